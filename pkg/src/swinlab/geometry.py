"""Window partitioning, cyclic shifts, shifted-window attention masks, and
relative-offset index maps for square M x M windows on a feature grid.

All orders are fixed and row-major: windows enumerate left-to-right then
top-to-bottom over the window grid, and patches inside a window do the same.
Checkpoint portability depends on this being stable.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .errors import GeometryError, ParameterError
from .tensor import Tensor

MASK_NEG = -1e9  # additive mask for forbidden pairs; finite so grads stay finite


@dataclass(frozen=True)
class WindowGrid:
    """Geometry of one windowed-attention layer."""

    feature_h: int
    feature_w: int
    window: int
    shift: int = 0

    def __post_init__(self):
        if self.window < 1:
            raise ParameterError(f"window must be >= 1, got {self.window}")
        if self.feature_h % self.window or self.feature_w % self.window:
            raise GeometryError(
                f"feature {self.feature_h}x{self.feature_w} not divisible by window {self.window}"
            )
        if not 0 <= self.shift < self.window:
            raise GeometryError(f"shift {self.shift} outside [0, {self.window})")

    @property
    def num_windows(self) -> int:
        return (self.feature_h // self.window) * (self.feature_w // self.window)


def window_partition(x: Tensor, M: int) -> Tensor:
    """[B, H, W, C] -> [B*nW, M*M, C], windows row-major over the grid."""
    if x.ndim != 4:
        raise GeometryError(f"window_partition expects [B,H,W,C], got {x.shape}")
    B, H, W, C = x.shape
    if H % M or W % M:
        raise GeometryError(f"H={H}, W={W} not divisible by window M={M}")
    x = T.reshape(x, (B, H // M, M, W // M, M, C))
    x = T.permute(x, (0, 1, 3, 2, 4, 5))
    return T.reshape(x, (B * (H // M) * (W // M), M * M, C))


def window_reverse(w: Tensor, M: int, H: int, W: int) -> Tensor:
    """Exact inverse of :func:`window_partition`."""
    if w.ndim != 3 or w.shape[1] != M * M:
        raise GeometryError(f"window_reverse expects [B*nW, {M * M}, C], got {w.shape}")
    if H % M or W % M:
        raise GeometryError(f"H={H}, W={W} not divisible by window M={M}")
    nW = (H // M) * (W // M)
    if w.shape[0] % nW:
        raise GeometryError(f"{w.shape[0]} windows not a multiple of grid count {nW}")
    B = w.shape[0] // nW
    C = w.shape[2]
    x = T.reshape(w, (B, H // M, W // M, M, M, C))
    x = T.permute(x, (0, 1, 3, 2, 4, 5))
    return T.reshape(x, (B, H, W, C))


def cyclic_shift(x: Tensor, s: int) -> Tensor:
    """Torus roll of a [B, H, W, C] grid by (-s, -s); negate s to undo."""
    if x.ndim != 4:
        raise GeometryError(f"cyclic_shift expects [B,H,W,C], got {x.shape}")
    if abs(s) >= min(x.shape[1], x.shape[2]):
        raise GeometryError(
            f"|shift|={abs(s)} must be < min(H,W)={min(x.shape[1], x.shape[2])}"
        )
    if s == 0:
        return x
    return T.roll2d(x, -s, -s)


def shift_attention_mask(H: int, W: int, M: int, s: int) -> Tensor:
    """Additive masks keeping shifted-window attention inside pre-shift regions.

    Returns [nW, M*M, M*M] with entries 0 (allowed) or MASK_NEG.  After the
    grid is rolled by (-s, -s), a patch at new row i holds content that
    wrapped around iff i >= H - s (same for columns).  Two patches in one
    window may attend iff their wrap status matches on both axes, which is
    exactly "came from the same pre-shift region" for divisible H, W.
    """
    if s >= M:
        raise GeometryError(f"shift {s} must be < window {M}")
    if H % M or W % M:
        raise GeometryError(f"H={H}, W={W} not divisible by window M={M}")
    nW = (H // M) * (W // M)
    if s == 0:
        return Tensor(np.zeros((nW, M * M, M * M)))
    rows = np.arange(H) >= H - s
    cols = np.arange(W) >= W - s
    region = (rows[:, None].astype(np.int64) * 2 + cols[None, :].astype(np.int64))
    region = region.reshape(H // M, M, W // M, M).transpose(0, 2, 1, 3)
    region = region.reshape(nW, M * M)
    same = region[:, :, None] == region[:, None, :]
    return Tensor(np.where(same, 0.0, MASK_NEG))


@dataclass(frozen=True)
class RelIndex:
    """Flat lookup from patch pair (i, j) into a (2M-1)^2 offset table.

    index[i, j] = (dr + M - 1) * (2M - 1) + (dc + M - 1) where (dr, dc) is
    the offset of patch i minus patch j in row-major window coordinates.
    """

    M: int
    index: np.ndarray  # [M*M, M*M] int64

    @property
    def table_size(self) -> int:
        return (2 * self.M - 1) ** 2

    @property
    def center(self) -> int:
        return (self.M - 1) * (2 * self.M - 1) + (self.M - 1)


def relative_index(M: int) -> RelIndex:
    """Build the offset index map for an M x M window."""
    if M < 1:
        raise ParameterError(f"window must be >= 1, got {M}")
    r = np.arange(M * M) // M
    c = np.arange(M * M) % M
    dr = r[:, None] - r[None, :]
    dc = c[:, None] - c[None, :]
    idx = (dr + M - 1) * (2 * M - 1) + (dc + M - 1)
    return RelIndex(M=M, index=idx.astype(np.int64))
