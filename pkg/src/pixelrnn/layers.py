"""Row LSTM, Diagonal BiLSTM, masked convolution and residual blocks.

All layers work on batched ``B x F x n x n`` tensors.  Each layer also knows
how to propagate a symbolic dependency map (see :mod:`pixelrnn.network`),
which is how receptive fields are computed without sampling.

Dependency maps are boolean arrays of shape ``G x n x n x M``: entry
``[g, y, x, m]`` says that features of group ``g`` at ``(y, x)`` may depend
on input sub-pixel ``m``.
"""

from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .errors import ConfigurationError
from .masking import build_mask
from .tensor import Parameter, Tensor


def uniform_init(rng, shape, fan_in):
    bound = 1.0 / np.sqrt(fan_in)
    return rng.uniform(-bound, bound, size=shape)


@dataclass
class RecurrentState:
    hidden: Tensor
    cell: Tensor

    def __post_init__(self):
        if self.hidden.shape != self.cell.shape:
            raise ConfigurationError(f"hidden {self.hidden.shape} and cell {self.cell.shape} differ in shape")


def lstm_step(gates, prev):
    """One LSTM update from gate pre-activations ordered ``[o, f, i, g]``.

    ``gates`` is ``4h x ...`` (unbatched) or ``B x 4h x ...``; ``prev``
    holds matching ``h``-feature maps.
    """
    axis = 0 if gates.ndim == 3 else 1
    h4 = gates.shape[axis]
    if h4 % 4:
        raise ConfigurationError(f"gate pre-activations need 4h features, got {h4}")
    h = h4 // 4
    expect = gates.shape[:axis] + (h,) + gates.shape[axis + 1:]
    if prev.hidden.shape != expect:
        raise ConfigurationError(f"state shape {prev.hidden.shape} does not match gates {gates.shape}")

    def chunk(j):
        idx = (slice(None),) * axis + (slice(j * h, (j + 1) * h),)
        return gates[idx]

    o = T.sigmoid(chunk(0))
    f = T.sigmoid(chunk(1))
    i = T.sigmoid(chunk(2))
    g = T.tanh(chunk(3))
    cell = T.add(T.mul(f, prev.cell), T.mul(i, g))
    hidden = T.mul(o, T.tanh(cell))
    return RecurrentState(hidden, cell)


def skew(x):
    """Offset row ``r`` by ``r`` columns: ``... x n x n`` -> ``... x n x (2n-1)``."""
    n = x.shape[-2]
    if x.shape[-1] != n:
        raise ConfigurationError(f"skew expects a square map, got {x.shape[-2:]}")
    lead = ((0, 0),) * (x.ndim - 2)
    rows = [T.pad(x[..., r, :], lead + ((r, n - 1 - r),)) for r in range(n)]
    return T.stack(rows, axis=-2)


def unskew(x):
    """Inverse of :func:`skew` on its image."""
    n, width = x.shape[-2:]
    if width != 2 * n - 1:
        raise ConfigurationError(f"unskew expects width 2n-1={2 * n - 1}, got {width}")
    return T.stack([x[..., r, r:r + n] for r in range(n)], axis=-2)


# ---------------------------------------------------------------------------
# symbolic dependency helpers


def _shift(dep, dy, dx):
    """``out[:, y, x] = dep[:, y + dy, x + dx]`` with out-of-range reads empty."""
    out = np.zeros_like(dep)
    n_y, n_x = dep.shape[1:3]
    ys = slice(max(0, -dy), min(n_y, n_y - dy))
    xs = slice(max(0, -dx), min(n_x, n_x - dx))
    yr = slice(ys.start + dy, ys.stop + dy)
    xr = slice(xs.start + dx, xs.stop + dx)
    out[:, ys, xs] = dep[:, yr, xr]
    return out


def conv_dependencies(dep, group_pattern, padding):
    """Propagate through a convolution with group connectivity ``Go x Gi x kh x kw``."""
    (pt, _), (pl, _) = padding
    G_out, _, kh, kw = group_pattern.shape
    out = np.zeros((G_out,) + dep.shape[1:], dtype=bool)
    for dy in range(kh):
        for dx in range(kw):
            tap = group_pattern[:, :, dy, dx]
            if not tap.any():
                continue
            shifted = _shift(dep, dy - pt, dx - pl)
            for go in range(G_out):
                for gi in np.flatnonzero(tap[go]):
                    out[go] |= shifted[gi]
    return out


def _dense_groups(g_out, g_in, kh=1, kw=1):
    return np.ones((g_out, g_in, kh, kw), dtype=bool)


# ---------------------------------------------------------------------------
# layers


class MaskedConv:
    """Convolution whose kernel carries a mask (or none, for ``kind=None``)."""

    def __init__(self, name, in_features, out_features, kh, kw, kind, group_count, rng, bias=True):
        self.mask = build_mask(kind, kh, kw, in_features, out_features, group_count) if kind else None
        self.group_count = group_count
        fan_in = in_features * kh * kw
        self.weight = Parameter(uniform_init(rng, (out_features, in_features, kh, kw), fan_in),
                                f"{name}.weight", self.mask)
        self.bias = Parameter(np.zeros(out_features), f"{name}.bias") if bias else None
        self.padding = ((kh // 2, kh // 2), (kw // 2, kw // 2))

    def parameters(self):
        return [self.weight] + ([self.bias] if self.bias is not None else [])

    def __call__(self, x):
        return masked_conv_forward(self.weight, x, self.bias, self.padding)

    def dependencies(self, dep):
        if self.mask is None:
            kh, kw = self.weight.shape[2:]
            gp = _dense_groups(self.group_count, dep.shape[0], kh, kw)
        else:
            gp = self.mask.group_pattern()
        return conv_dependencies(dep, gp, self.padding)


def masked_conv_forward(kernel, x, bias=None, padding="same"):
    """Resolution-preserving convolution with ``kernel``'s mask enforced."""
    return T.conv2d(x, kernel, bias, padding=padding, mask=kernel.mask)


class _Conditioned:
    """Mixin: optional bias-free 1x1 projections of a conditioning map."""

    def _make_cond(self, name, cond_width, out_features, rng, count):
        self.cond_proj = []
        if cond_width:
            for d in range(count):
                self.cond_proj.append(Parameter(
                    uniform_init(rng, (out_features, cond_width, 1, 1), cond_width), f"{name}.cond{d}"))

    def _cond_bias(self, cond, d):
        if cond is None or not self.cond_proj:
            return None
        return T.conv2d(cond, self.cond_proj[d], padding=((0, 0), (0, 0)))


class ConvInner(_Conditioned):
    """PixelCNN body layer: ReLU, 3x3 mask-B convolution to ``h`` features, ReLU."""

    def __init__(self, name, in_features, h, group_count, rng, cond_width=0, kernel=3):
        self.conv = MaskedConv(f"{name}.conv", in_features, h, kernel, kernel, "B", group_count, rng)
        self._make_cond(name, cond_width, h, rng, 1)

    def parameters(self):
        return self.conv.parameters() + self.cond_proj

    def __call__(self, x, cond=None):
        y = self.conv(T.relu(x))
        bias = self._cond_bias(cond, 0)
        if bias is not None:
            y = T.add(y, bias)
        return T.relu(y)

    def dependencies(self, dep):
        return self.conv.dependencies(dep)


class RowLSTMLayer(_Conditioned):
    """Row LSTM: masked ``1 x k`` input-to-state, unmasked ``1 x k`` state-to-state over the row above."""

    def __init__(self, name, in_features, h, n, group_count, rng, k=3, mask_kind="B", cond_width=0):
        if k % 2 == 0 or k < 1:
            raise ConfigurationError(f"Row LSTM kernel width must be odd, got {k}")
        self.h, self.n, self.k = h, n, k
        self.group_count = group_count
        self.is_mask = build_mask(mask_kind, 1, k, in_features, 4 * h, group_count, out_tiles=4)
        self.k_is = Parameter(uniform_init(rng, (4 * h, in_features, 1, k), in_features * k),
                              f"{name}.k_is", self.is_mask)
        self.b_is = Parameter(np.zeros(4 * h), f"{name}.b_is")
        self.k_ss = Parameter(uniform_init(rng, (4 * h, h, 1, k), h * k), f"{name}.k_ss")
        self.h0 = Parameter(np.zeros((h, n)), f"{name}.h0")
        self.c0 = Parameter(np.zeros((h, n)), f"{name}.c0")
        self._make_cond(name, cond_width, 4 * h, rng, 1)

    def parameters(self):
        return [self.k_is, self.b_is, self.k_ss, self.h0, self.c0] + self.cond_proj

    def input_to_state(self, x):
        pad = ((0, 0), (self.k // 2, self.k // 2))
        return T.conv2d(x, self.k_is, self.b_is, padding=pad, mask=self.is_mask)

    def __call__(self, x, cond=None):
        B, _, n, width = x.shape
        if n != width:
            raise ConfigurationError(f"Row LSTM needs a square input, got {n}x{width}")
        if n != self.n:
            raise ConfigurationError(f"layer built for n={self.n}, got n={n}")
        pre = self.input_to_state(x)
        bias = self._cond_bias(cond, 0)
        if bias is not None:
            pre = T.add(pre, bias)
        pad = ((0, 0), (self.k // 2, self.k // 2))
        state = RecurrentState(
            T.broadcast_to(T.reshape(self.h0, (1, self.h, 1, n)), (B, self.h, 1, n)),
            T.broadcast_to(T.reshape(self.c0, (1, self.h, 1, n)), (B, self.h, 1, n)),
        )
        rows = []
        for i in range(n):
            gates = T.add(pre[:, :, i:i + 1, :], T.conv2d(state.hidden, self.k_ss, padding=pad))
            state = lstm_step(gates, state)
            rows.append(state.hidden)
        return T.concat(rows, axis=2)

    def dependencies(self, dep):
        IS = conv_dependencies(dep, self.is_mask.group_pattern(), ((0, 0), (self.k // 2, self.k // 2)))
        G, n = IS.shape[0], IS.shape[1]
        S = IS.copy()
        r = self.k // 2
        for i in range(1, n):
            above = np.logical_or.reduce(S[:, i - 1], axis=0)
            spread = np.zeros_like(above)
            for dx in range(-r, r + 1):
                lo, hi = max(0, -dx), min(n, n - dx)
                spread[lo:hi] |= above[lo + dx:hi + dx]
            S[:, i] |= spread[None]
        return S


class DiagBiLSTMLayer(_Conditioned):
    """Diagonal BiLSTM: two skewed column scans with a ``2 x 1`` state-to-state kernel.

    The right-to-left direction is the left-to-right machinery applied to the
    mirrored input; its output is mirrored back and shifted down one row
    before being added to the left-to-right output.
    """

    DIRECTIONS = ("left", "right")

    def __init__(self, name, in_features, h, n, group_count, rng, mask_kind="B", cond_width=0):
        self.h, self.n = h, n
        self.group_count = group_count
        self.is_mask = build_mask(mask_kind, 1, 1, in_features, 4 * h, group_count, out_tiles=4)
        self.params = {}
        for d in self.DIRECTIONS:
            self.params[d] = {
                "k_is": Parameter(uniform_init(rng, (4 * h, in_features, 1, 1), in_features),
                                  f"{name}.{d}.k_is", self.is_mask),
                "b_is": Parameter(np.zeros(4 * h), f"{name}.{d}.b_is"),
                "k_ss": Parameter(uniform_init(rng, (4 * h, h, 2, 1), 2 * h), f"{name}.{d}.k_ss"),
                "h0": Parameter(np.zeros((h, n)), f"{name}.{d}.h0"),
                "c0": Parameter(np.zeros((h, n)), f"{name}.{d}.c0"),
            }
        self._make_cond(name, cond_width, 4 * h, rng, 2)
        rows = np.arange(n)[:, None]
        cols = np.arange(2 * n - 1)[None, :]
        self._valid = (cols >= rows) & (cols < rows + n)

    def parameters(self):
        out = []
        for d in self.DIRECTIONS:
            out.extend(self.params[d].values())
        return out + self.cond_proj

    def _scan(self, x, p, bias):
        B, n = x.shape[0], self.n
        xs = skew(x)
        pre = T.conv2d(xs, p["k_is"], p["b_is"], padding=((0, 0), (0, 0)), mask=self.is_mask)
        if bias is not None:
            pre = T.add(pre, skew(bias))
        h0 = T.broadcast_to(T.reshape(p["h0"], (1, self.h, n, 1)), (B, self.h, n, 1))
        c0 = T.broadcast_to(T.reshape(p["c0"], (1, self.h, n, 1)), (B, self.h, n, 1))
        state = RecurrentState(h0, c0)
        cols = []
        for c in range(2 * n - 1):
            ss = T.conv2d(state.hidden, p["k_ss"], padding=((1, 0), (0, 0)))
            new = lstm_step(T.add(pre[:, :, :, c:c + 1], ss), state)
            valid = self._valid[:, c].reshape(1, 1, n, 1)
            # outside the skewed band the state is pinned to the learned boundary state
            state = RecurrentState(T.where(valid, new.hidden, h0), T.where(valid, new.cell, c0))
            cols.append(state.hidden)
        return unskew(T.concat(cols, axis=3))

    def __call__(self, x, cond=None):
        B, _, n, width = x.shape
        if n != width:
            raise ConfigurationError(f"Diagonal BiLSTM needs a square input, got {n}x{width}")
        if n != self.n:
            raise ConfigurationError(f"layer built for n={self.n}, got n={n}")
        left = self._scan(x, self.params["left"], self._cond_bias(cond, 0))
        rbias = self._cond_bias(cond, 1)
        right = T.flip(self._scan(T.flip(x, 3), self.params["right"],
                                  None if rbias is None else T.flip(rbias, 3)), 3)
        zeros = T.Tensor(np.zeros((B, self.h, 1, n)))
        shifted = T.concat([zeros, right[:, :, :n - 1, :]], axis=2)
        return T.add(left, shifted)

    def dependencies(self, dep):
        IS = conv_dependencies(dep, self.is_mask.group_pattern(), ((0, 0), (0, 0)))
        n = IS.shape[1]
        left = IS.copy()
        right = IS.copy()
        for i in range(n):
            for j in range(n):
                if j > 0:
                    left[:, i, j] |= np.logical_or.reduce(left[:, i, j - 1], axis=0)[None]
                if i > 0:
                    left[:, i, j] |= np.logical_or.reduce(left[:, i - 1, j], axis=0)[None]
            for j in range(n - 1, -1, -1):
                if j < n - 1:
                    right[:, i, j] |= np.logical_or.reduce(right[:, i, j + 1], axis=0)[None]
                if i > 0:
                    right[:, i, j] |= np.logical_or.reduce(right[:, i - 1, j], axis=0)[None]
        out = left.copy()
        out[:, 1:] |= right[:, :-1]
        return out


class ResidualBlock:
    """``inner`` (2h -> h) followed by a 1x1 mask-B upsampling back to 2h.

    With ``residual`` the block input is added to the result.
    """

    def __init__(self, name, inner, h, group_count, rng, residual=True):
        self.inner = inner
        self.h = h
        self.residual = residual
        self.up = MaskedConv(f"{name}.up", h, 2 * h, 1, 1, "B", group_count, rng)

    def parameters(self):
        return self.inner.parameters() + self.up.parameters()

    def __call__(self, x, cond=None):
        return residual_forward(self, x, cond)

    def dependencies(self, dep):
        out = self.up.dependencies(self.inner.dependencies(dep))
        return out | dep if self.residual else out


def residual_forward(block, x, cond=None):
    if x.shape[1] != 2 * block.h:
        raise ConfigurationError(f"residual block expects {2 * block.h} features, got {x.shape[1]}")
    y = block.up(block.inner(x, cond))
    return T.add(x, y) if block.residual else y
