"""Dense float64 tensors with taped reverse-mode differentiation.

Every op in this module takes and returns :class:`Tensor` objects.  When
recording is enabled (the default) and at least one argument requires a
gradient, the result remembers its parents and a closure that maps the
output gradient to the parent gradients.  :func:`backward` walks that tape
in reverse topological order.

Recording state is thread-local: one recording per thread.
"""

import contextlib
import threading

import numpy as np

from .errors import ConfigurationError, NumericError

__all__ = [
    "Tensor", "Parameter", "tensor", "no_grad", "is_grad_enabled", "nonfinite_allowed",
    "backward", "zero_grad",
    "add", "sub", "mul", "neg", "scale", "sigmoid", "tanh", "relu", "pointwise",
    "sum", "mean", "reshape", "concat", "stack", "pad", "flip", "where",
    "broadcast_to", "add_bias", "upsample_nearest", "conv2d", "conv1d_rows",
    "categorical_nll", "bernoulli_nll",
]

_local = threading.local()


def is_grad_enabled():
    return getattr(_local, "grad_enabled", True)


def _nonfinite_ok():
    return getattr(_local, "allow_nonfinite", False)


@contextlib.contextmanager
def no_grad():
    """Disable recording inside the block (used for sampling and evaluation)."""
    prev = is_grad_enabled()
    _local.grad_enabled = False
    try:
        yield
    finally:
        _local.grad_enabled = prev


@contextlib.contextmanager
def nonfinite_allowed():
    """Poisoning mode: accept NaN inputs and route masked convolutions structurally.

    Inside this block a masked convolution never multiplies a weight that its
    mask forbids, so NaN written to a masked-out input cannot leak into the
    result through ``0 * nan``.  Outside it the dense path is used.
    """
    prev = _nonfinite_ok()
    _local.allow_nonfinite = True
    try:
        yield
    finally:
        _local.allow_nonfinite = prev


class Tensor:
    """A float64 array that may sit on the recording tape."""

    __array_priority__ = 100

    def __init__(self, data, requires_grad=False):
        self.data = np.asarray(data, dtype=np.float64)
        self.requires_grad = requires_grad
        self.grad = None
        self._parents = ()
        self._backward = None
        self._consumed = False

    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    def numpy(self):
        return self.data

    def backward(self):
        backward(self)

    def __repr__(self):
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad})"

    def __add__(self, other):
        return add(self, other)

    def __sub__(self, other):
        return sub(self, other)

    def __mul__(self, other):
        return mul(self, other)

    def __neg__(self):
        return neg(self)

    def __getitem__(self, index):
        return _getitem(self, index)


class Parameter(Tensor):
    """A named, trainable leaf tensor.

    ``mask`` is an optional object with a binary ``pattern`` array of the
    same shape; masked positions are kept at exactly 0.0.
    """

    def __init__(self, data, name, mask=None):
        super().__init__(np.array(data, dtype=np.float64), requires_grad=True)
        self.name = name
        self.mask = mask
        self.grad = np.zeros_like(self.data)
        if mask is not None:
            if np.shape(mask.pattern) != self.data.shape:
                raise ConfigurationError(
                    f"mask shape {np.shape(mask.pattern)} does not match parameter {name} {self.data.shape}"
                )
            self.data[...] = np.where(np.asarray(mask.pattern) != 0, self.data, 0.0)

    def __repr__(self):
        return f"Parameter({self.name!r}, shape={self.shape})"


def tensor(data, requires_grad=False):
    return data if isinstance(data, Tensor) else Tensor(data, requires_grad)


def _make(data, parents, grad_fn):
    out = Tensor(data)
    if is_grad_enabled() and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = parents
        out._backward = grad_fn
    return out


def _released(_g):
    raise ConfigurationError("backward through a graph that was already consumed")


def _topo_order(root):
    order, seen = [], set()
    stack = [(root, False)]
    while stack:
        node, done = stack.pop()
        if done:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for p in node._parents:
            if p.requires_grad and id(p) not in seen:
                stack.append((p, False))
    return order


def backward(loss):
    """Populate ``.grad`` on every leaf reachable from the scalar ``loss``.

    Gradients accumulate into leaves; clear them with :func:`zero_grad`.
    The tape is released afterwards, so a second call raises.
    """
    if loss.data.size != 1:
        raise ConfigurationError(f"backward needs a scalar loss, got shape {loss.shape}")
    if loss._consumed:
        raise ConfigurationError("backward called twice on the same recording")
    if not loss.requires_grad:
        raise ConfigurationError("loss was not produced by an active recording")
    order = _topo_order(loss)
    grads = {id(loss): np.ones_like(loss.data)}
    for node in reversed(order):
        g = grads.pop(id(node), None)
        if g is None:
            continue
        if node._backward is None:
            if node.grad is None:
                node.grad = np.zeros_like(node.data)
            node.grad += g
            continue
        for p, pg in zip(node._parents, node._backward(g)):
            if pg is None or not p.requires_grad:
                continue
            key = id(p)
            grads[key] = grads[key] + pg if key in grads else pg
    for node in order:
        if node._backward is not None:
            node._parents = ()
            node._backward = _released
    loss._consumed = True


def zero_grad(params):
    for p in params:
        p.grad = np.zeros_like(p.data)


def _same_shape(a, b, op):
    if a.shape != b.shape:
        raise ConfigurationError(f"{op}: shape mismatch {a.shape} vs {b.shape}")


# ---------------------------------------------------------------------------
# elementwise


def add(a, b):
    a, b = tensor(a), tensor(b)
    _same_shape(a, b, "add")
    return _make(a.data + b.data, (a, b), lambda g: (g, g))


def sub(a, b):
    a, b = tensor(a), tensor(b)
    _same_shape(a, b, "sub")
    return _make(a.data - b.data, (a, b), lambda g: (g, -g))


def mul(a, b):
    a, b = tensor(a), tensor(b)
    _same_shape(a, b, "mul")
    return _make(a.data * b.data, (a, b), lambda g: (g * b.data, g * a.data))


def neg(a):
    return _make(-a.data, (a,), lambda g: (-g,))


def scale(a, c):
    c = float(c)
    return _make(a.data * c, (a,), lambda g: (g * c,))


def sigmoid(a):
    # tanh form never overflows and gives sigmoid(0) == 0.5 exactly
    s = 0.5 * (np.tanh(0.5 * a.data) + 1.0)
    return _make(s, (a,), lambda g: (g * s * (1.0 - s),))


def tanh(a):
    t = np.tanh(a.data)
    return _make(t, (a,), lambda g: (g * (1.0 - t * t),))


def relu(a):
    on = a.data > 0
    # maximum keeps NaN visible, which poisoned sampling relies on
    return _make(np.maximum(a.data, 0.0), (a,), lambda g: (g * on,))


_POINTWISE = {"sigmoid": sigmoid, "tanh": tanh, "relu": relu, "add": add, "mul": mul}


def pointwise(kind, *args):
    """Dispatch by name: ``pointwise("mul", x, y)``."""
    try:
        fn = _POINTWISE[kind]
    except KeyError:
        raise ConfigurationError(f"unknown pointwise op {kind!r}") from None
    return fn(*args)


# ---------------------------------------------------------------------------
# reductions and shape plumbing


def sum(a):  # noqa: A001 - mirrors numpy naming
    shape = a.shape
    return _make(np.sum(a.data), (a,), lambda g: (np.broadcast_to(g, shape).copy(),))


def mean(a):
    n = a.data.size
    shape = a.shape
    return _make(np.mean(a.data), (a,), lambda g: (np.full(shape, g / n),))


def reshape(a, shape):
    old = a.shape
    return _make(a.data.reshape(shape), (a,), lambda g: (g.reshape(old),))


def _getitem(a, index):
    shape = a.shape

    def grad_fn(g):
        out = np.zeros(shape)
        out[index] += g
        return (out,)

    return _make(a.data[index], (a,), grad_fn)


def concat(tensors, axis):
    tensors = [tensor(t) for t in tensors]
    sizes = np.cumsum([t.shape[axis] for t in tensors])[:-1]

    def grad_fn(g):
        return tuple(np.split(g, sizes, axis=axis))

    return _make(np.concatenate([t.data for t in tensors], axis=axis), tuple(tensors), grad_fn)


def stack(tensors, axis):
    tensors = [tensor(t) for t in tensors]

    def grad_fn(g):
        return tuple(np.take(g, i, axis=axis) for i in range(len(tensors)))

    return _make(np.stack([t.data for t in tensors], axis=axis), tuple(tensors), grad_fn)


def pad(a, pad_width):
    """Zero padding; ``pad_width`` as for :func:`numpy.pad`."""
    pad_width = tuple(tuple(p) for p in pad_width)
    crop = tuple(slice(lo, lo + n) for (lo, _), n in zip(pad_width, a.shape))
    return _make(np.pad(a.data, pad_width), (a,), lambda g: (g[crop],))


def flip(a, axis):
    return _make(np.flip(a.data, axis=axis).copy(), (a,), lambda g: (np.flip(g, axis=axis).copy(),))


def where(cond, a, b):
    """Select from ``a`` where the constant boolean ``cond`` holds, else ``b``.

    ``b`` may have a broadcastable shape; its gradient is summed back.
    """
    a, b = tensor(a), tensor(b)
    cond = np.broadcast_to(np.asarray(cond, dtype=bool), a.shape)
    bshape = b.shape

    def grad_fn(g):
        gb = np.where(cond, 0.0, g)
        return np.where(cond, g, 0.0), _unbroadcast(gb, bshape)

    return _make(np.where(cond, a.data, b.data), (a, b), grad_fn)


def _unbroadcast(g, shape):
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for axis, n in enumerate(shape):
        if n == 1 and g.shape[axis] != 1:
            g = g.sum(axis=axis, keepdims=True)
    return g


def broadcast_to(a, shape):
    src = a.shape
    return _make(np.broadcast_to(a.data, shape).copy(), (a,), lambda g: (_unbroadcast(g, src),))


def add_bias(x, bias):
    """Add a per-feature bias along axis 1 of a ``B x F x ...`` tensor."""
    if bias.shape != (x.shape[1],):
        raise ConfigurationError(f"bias shape {bias.shape} does not match {x.shape[1]} features")
    view = (1, -1) + (1,) * (x.ndim - 2)
    axes = (0,) + tuple(range(2, x.ndim))
    return _make(x.data + bias.data.reshape(view), (x, bias), lambda g: (g, g.sum(axis=axes)))


def upsample_nearest(x, factor):
    """Nearest-neighbour enlargement of the two trailing axes."""
    factor = int(factor)
    B, F, H, W = x.shape
    out = np.repeat(np.repeat(x.data, factor, axis=2), factor, axis=3)

    def grad_fn(g):
        return (g.reshape(B, F, H, factor, W, factor).sum(axis=(3, 5)),)

    return _make(out, (x,), grad_fn)


# ---------------------------------------------------------------------------
# convolution


def _conv_plan(pattern, structural):
    """List of ``(dy, dx, blocks)``; each block is ``(out_idx, in_idx)`` or ``None`` for dense."""
    O, I, kh, kw = pattern.shape
    plan = []
    for dy in range(kh):
        for dx in range(kw):
            tap = pattern[:, :, dy, dx] != 0
            if not tap.any():
                continue
            if not structural or tap.all():
                plan.append((dy, dx, None))
                continue
            blocks = []
            rows = {}
            for o in range(O):
                if tap[o].any():
                    rows.setdefault(tap[o].tobytes(), []).append(o)
            for key, outs in rows.items():
                ins = np.flatnonzero(np.frombuffer(key, dtype=bool))
                blocks.append((np.asarray(outs), ins))
            plan.append((dy, dx, blocks))
    return plan


def _plan_for(mask, kernel_shape):
    structural = _nonfinite_ok()
    if mask is None:
        kh, kw = kernel_shape[2:]
        return [(dy, dx, None) for dy in range(kh) for dx in range(kw)]
    pattern = getattr(mask, "pattern", mask)
    if np.shape(pattern) != tuple(kernel_shape):
        raise ConfigurationError(f"mask shape {np.shape(pattern)} does not match kernel {kernel_shape}")
    cache = getattr(mask, "__dict__", None)
    if cache is None:
        return _conv_plan(np.asarray(pattern), structural)
    key = "_plan_structural" if structural else "_plan_dense"
    if key not in cache:
        cache[key] = _conv_plan(np.asarray(pattern), structural)
    return cache[key]


def _same_padding(kh, kw):
    if kh % 2 == 0 or kw % 2 == 0:
        raise ConfigurationError(f"same padding needs odd kernel extents, got {kh}x{kw}")
    return ((kh // 2, kh // 2), (kw // 2, kw // 2))


def conv2d(x, kernel, bias=None, padding="same", mask=None):
    """Cross-correlation of ``B x I x H x W`` (or ``I x H x W``) with ``O x I x kh x kw``.

    ``padding`` is ``"same"`` (odd kernels only) or ``((top, bottom), (left, right))``
    zero padding.  ``mask`` restricts which kernel taps are evaluated; see
    :func:`nonfinite_allowed`.
    """
    x = tensor(x)
    unbatched = x.ndim == 3
    if unbatched:
        x = reshape(x, (1,) + x.shape)
    if x.ndim != 4 or kernel.ndim != 4:
        raise ConfigurationError(f"conv2d expects 4-D input and kernel, got {x.shape} and {kernel.shape}")
    O, I, kh, kw = kernel.shape
    if x.shape[1] != I:
        raise ConfigurationError(f"conv2d: input has {x.shape[1]} features, kernel expects {I}")
    if not _nonfinite_ok() and not np.isfinite(x.data).all():
        raise NumericError("conv2d: non-finite input")
    if padding == "same":
        padding = _same_padding(kh, kw)
    (pt, pb), (pl, pr) = padding
    xp = np.pad(x.data, ((0, 0), (0, 0), (pt, pb), (pl, pr)))
    B, _, Hp, Wp = xp.shape
    Ho, Wo = Hp - kh + 1, Wp - kw + 1
    if Ho < 1 or Wo < 1:
        raise ConfigurationError("conv2d: kernel larger than padded input")
    plan = _plan_for(mask, kernel.shape)
    w = kernel.data
    out = np.zeros((B, O, Ho * Wo))
    for dy, dx, blocks in plan:
        patch = xp[:, :, dy:dy + Ho, dx:dx + Wo].reshape(B, I, Ho * Wo)
        if blocks is None:
            out += w[:, :, dy, dx] @ patch
        else:
            for oi, ii in blocks:
                out[:, oi] += w[np.ix_(oi, ii)][:, :, dy, dx] @ patch[:, ii]
    out = out.reshape(B, O, Ho, Wo)
    parents = (x, kernel)
    if bias is not None:
        out += bias.data.reshape(1, O, 1, 1)
        parents = parents + (bias,)

    def grad_fn(g):
        gout = g.reshape(B, O, Ho * Wo)
        gw = np.zeros_like(w) if kernel.requires_grad else None
        gxp = np.zeros_like(xp) if x.requires_grad else None
        for dy, dx, blocks in plan:
            patch = xp[:, :, dy:dy + Ho, dx:dx + Wo].reshape(B, I, Ho * Wo)
            if blocks is None:
                blocks_ = ((slice(None), slice(None)),)
            else:
                blocks_ = blocks
            for oi, ii in blocks_:
                dense = isinstance(oi, slice)
                wt = w[:, :, dy, dx] if dense else w[np.ix_(oi, ii)][:, :, dy, dx]
                go = gout if dense else gout[:, oi]
                if gw is not None:
                    p = patch if dense else patch[:, ii]
                    contrib = np.tensordot(go, p, axes=([0, 2], [0, 2]))
                    if dense:
                        gw[:, :, dy, dx] += contrib
                    else:
                        gw[np.ix_(oi, ii, [dy], [dx])] += contrib[:, :, None, None]
                if gxp is not None:
                    gx = (wt.T @ go).reshape(B, -1, Ho, Wo)
                    if dense:
                        gxp[:, :, dy:dy + Ho, dx:dx + Wo] += gx
                    else:
                        gxp[:, ii, dy:dy + Ho, dx:dx + Wo] += gx
        grads = [None if gxp is None else gxp[:, :, pt:pt + Hp - pt - pb, pl:pl + Wp - pl - pr], gw]
        if bias is not None:
            grads.append(g.sum(axis=(0, 2, 3)))
        return tuple(grads)

    result = _make(out, parents, grad_fn)
    if unbatched:
        result = reshape(result, result.shape[1:])
    return result


def conv1d_rows(x, kernel, bias=None, mask=None):
    """Convolve every row independently with an ``O x I x k`` kernel (k odd, centred)."""
    if kernel.ndim != 3:
        raise ConfigurationError(f"conv1d_rows expects an O x I x k kernel, got {kernel.shape}")
    k = kernel.shape[2]
    if k % 2 == 0:
        raise ConfigurationError(f"conv1d_rows needs an odd kernel length, got {k}")
    kernel4 = reshape(kernel, kernel.shape[:2] + (1, k))
    return conv2d(x, kernel4, bias, padding=((0, 0), (k // 2, k // 2)), mask=mask)


# ---------------------------------------------------------------------------
# likelihood heads


def categorical_nll(logits, targets):
    """Per-image negative log-likelihood (nats) of integer targets under a softmax.

    ``logits`` has shape ``B x C x K x H x W`` (K classes on axis 2) and
    ``targets`` ``B x C x H x W``.  Returns a ``(B,)`` tensor.
    """
    L = logits.data
    t = np.asarray(targets)
    if L.ndim != 5 or t.shape != L.shape[:2] + L.shape[3:]:
        raise ConfigurationError(f"categorical_nll: logits {L.shape} vs targets {t.shape}")
    m = L.max(axis=2, keepdims=True)
    e = np.exp(L - m)
    z = e.sum(axis=2, keepdims=True)
    logp = np.take_along_axis(L, t[:, :, None].astype(np.intp), axis=2) - m - np.log(z)
    nll = -logp.reshape(L.shape[0], -1).sum(axis=1)

    def grad_fn(g):
        p = e / z
        np.put_along_axis(p, t[:, :, None].astype(np.intp),
                          np.take_along_axis(p, t[:, :, None].astype(np.intp), axis=2) - 1.0, axis=2)
        return (p * g.reshape(-1, 1, 1, 1, 1),)

    return _make(nll, (logits,), grad_fn)


def bernoulli_nll(logits, targets):
    """Per-image NLL (nats) of binary targets under ``sigmoid(logits)``; returns ``(B,)``."""
    l = logits.data
    t = np.asarray(targets, dtype=np.float64)
    if l.shape != t.shape:
        raise ConfigurationError(f"bernoulli_nll: logits {l.shape} vs targets {t.shape}")
    per = np.maximum(l, 0.0) - l * t + np.log1p(np.exp(-np.abs(l)))
    nll = per.reshape(l.shape[0], -1).sum(axis=1)

    def grad_fn(g):
        s = 0.5 * (np.tanh(0.5 * l) + 1.0)
        return ((s - t) * g.reshape((-1,) + (1,) * (l.ndim - 1)),)

    return _make(nll, (logits,), grad_fn)
