"""Causal connectivity masks A and B.

Features are split into ``group_count`` contiguous, equal blocks ordered
R, G, B.  Spatially, every tap above the centre row and every tap left of
the centre on the centre row is open; everything right of or below the
centre is closed.  At the centre tap an output group ``g`` may read input
group ``g'`` when ``g' < g`` (mask A) or ``g' <= g`` (mask B).
"""

from dataclasses import dataclass, field

import numpy as np

from .errors import ConfigurationError

KINDS = ("A", "B")


@dataclass(frozen=True, eq=False)
class MaskSpec:
    kind: str
    kernel_extent: tuple
    in_features: int
    out_features: int
    group_count: int
    pattern: np.ndarray = field(repr=False)
    out_groups: np.ndarray = field(repr=False)
    in_groups: np.ndarray = field(repr=False)

    @property
    def shape(self):
        return self.pattern.shape

    def group_pattern(self):
        """Group-level connectivity ``G_out x G_in x kh x kw`` (any open weight in the block)."""
        G = self.group_count
        open_ = self.pattern != 0
        return np.array([
            [open_[self.out_groups == go][:, self.in_groups == gi].any(axis=(0, 1)) for gi in range(G)]
            for go in range(G)
        ])


def _group_index(features, group_count):
    return np.arange(features) // (features // group_count)


def build_mask(kind, kh, kw, in_features, out_features, group_count=1, out_tiles=1):
    """Construct a :class:`MaskSpec`.

    ``out_tiles`` repeats the output grouping, for kernels that emit several
    gate blocks side by side (an LSTM input-to-state kernel uses 4 tiles of
    ``out_features // 4``, each split into R, G, B).
    """
    if kind not in KINDS:
        raise ConfigurationError(f"mask kind must be 'A' or 'B', got {kind!r}")
    if kh % 2 == 0 or kw % 2 == 0:
        raise ConfigurationError(f"mask kernel extents must be odd, got {kh}x{kw}")
    if group_count < 1:
        raise ConfigurationError("group_count must be positive")
    if out_features % out_tiles:
        raise ConfigurationError(f"{out_features} output features do not split into {out_tiles} tiles")
    tile = out_features // out_tiles
    if in_features % group_count or tile % group_count:
        raise ConfigurationError(
            f"features ({in_features} in, {tile} out per tile) must be divisible by group_count={group_count}"
        )
    pattern = np.zeros((out_features, in_features, kh, kw))
    cy, cx = kh // 2, kw // 2
    pattern[:, :, :cy, :] = 1.0
    pattern[:, :, cy, :cx] = 1.0
    g_out = np.tile(_group_index(tile, group_count), out_tiles)
    g_in = _group_index(in_features, group_count)
    if kind == "A":
        centre = g_in[None, :] < g_out[:, None]
    else:
        centre = g_in[None, :] <= g_out[:, None]
    pattern[:, :, cy, cx] = centre
    pattern.setflags(write=False)
    return MaskSpec(kind, (kh, kw), in_features, out_features, group_count, pattern, g_out, g_in)


def apply_mask(param):
    """Zero the masked positions of ``param`` in place and return it."""
    if param.mask is None:
        return param
    if param.mask.pattern.shape != param.data.shape:
        raise ConfigurationError(
            f"mask shape {param.mask.pattern.shape} does not match parameter {param.data.shape}"
        )
    param.data[...] = np.where(param.mask.pattern != 0, param.data, 0.0)
    return param
