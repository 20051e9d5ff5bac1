"""Relative position bias providers for windowed attention.

Three regimes produce the additive per-head logit term B:

* :class:`ParamTable` - a directly learned (2M-1)^2 x heads table, resampled
  by 2-D bicubic interpolation when the window size changes.
* :class:`CPBNet` - a 2-layer MLP (ReLU between) evaluated on relative
  coordinates, either linear-spaced or log-spaced.  The weights are
  window-size-agnostic, so a trained net transfers verbatim.

Log spacing maps an offset d to sign(d) * log(1 + |d|), which shrinks how
far a larger window's coordinates extend beyond the trained range; the
``extrapolation_ratio`` helper quantifies exactly that.
"""

from __future__ import annotations

from dataclasses import dataclass, replace

import numpy as np

from . import tensor as T
from .errors import ParameterError
from .geometry import RelIndex, relative_index
from .tensor import Tensor

SPACINGS = ("linear", "log")
NORMALIZE_MODES = ("none", "train_window")


# ---------------------------------------------------------------------------
# Coordinate transforms

def _transform_1d(delta: np.ndarray, spacing: str) -> np.ndarray:
    if spacing == "linear":
        return delta.astype(np.float64)
    if spacing == "log":
        return np.sign(delta) * np.log1p(np.abs(delta))
    raise ParameterError(f"unknown spacing '{spacing}', expected one of {SPACINGS}")


def _norm_divisor(M_train: int, spacing: str) -> float:
    """Divisor that maps the training window's extreme offset to 1.0."""
    if M_train < 2:
        raise ParameterError(
            f"normalization needs a training window >= 2, got {M_train}"
        )
    if spacing == "linear":
        return float(M_train - 1)
    # log1p(M_train - 1) == log(M_train): the trained range endpoint.
    return float(np.log(M_train))


def rel_coords(M_train: int, M_target: int, spacing: str,
               normalize: str = "train_window") -> Tensor:
    """Coordinates for every offset of an M_target window, [(2*M_target-1)^2, 2].

    Rows are ordered to match the flat offset table: row
    (dr + M_target - 1) * (2*M_target - 1) + (dc + M_target - 1) holds the
    transformed (dr, dc).  Both axes use the identical transform.  With
    ``normalize='train_window'`` the training window's own offsets land in
    [-1, 1]; larger windows extend beyond it, which is the extrapolation
    being studied.
    """
    if M_train < 1 or M_target < 1:
        raise ParameterError(f"window sizes must be >= 1, got {M_train}, {M_target}")
    if normalize not in NORMALIZE_MODES:
        raise ParameterError(f"unknown normalize mode '{normalize}'")
    n = 2 * M_target - 1
    d = np.arange(-(M_target - 1), M_target)
    t = _transform_1d(d, spacing)
    if normalize == "train_window":
        t = t / _norm_divisor(M_train, spacing)
    dr = np.repeat(t, n)
    dc = np.tile(t, n)
    return Tensor(np.stack([dr, dc], axis=1))


def extrapolation_ratio(M_train: int, M_target: int, spacing: str) -> float:
    """Fraction of the target coordinate range outside the trained range.

    (range_target - range_train) / range_train under the spacing's transform.
    Returns 0.0 when M_target <= M_train (no extrapolation happens).
    """
    if M_train < 2:
        raise ParameterError(f"training window must be >= 2, got {M_train}")
    if M_target <= M_train:
        return 0.0
    r_train = float(_transform_1d(np.asarray(M_train - 1), spacing))
    r_target = float(_transform_1d(np.asarray(M_target - 1), spacing))
    return (r_target - r_train) / r_train


# ---------------------------------------------------------------------------
# Providers

@dataclass
class ParamTable:
    """Directly learned bias table, one row per (dr, dc) offset."""

    table: Tensor  # [(2M-1)^2, heads]
    M: int

    def __post_init__(self):
        want = (2 * self.M - 1) ** 2
        if self.table.shape[0] != want:
            raise ParameterError(
                f"table has {self.table.shape[0]} rows, window {self.M} needs {want}"
            )

    @property
    def heads(self) -> int:
        return self.table.shape[1]


@dataclass
class CPBNet:
    """2-layer MLP (ReLU between) from relative coordinates to per-head bias."""

    w1: Tensor  # [2, hidden]
    b1: Tensor  # [hidden]
    w2: Tensor  # [hidden, heads]
    b2: Tensor  # [heads]
    spacing: str = "log"
    normalize: str = "train_window"

    def __post_init__(self):
        if self.w1.shape[0] != 2:
            raise ParameterError(f"w1 must take 2 inputs (dr, dc), got {self.w1.shape}")
        if self.spacing not in SPACINGS:
            raise ParameterError(f"unknown spacing '{self.spacing}'")
        if self.normalize not in NORMALIZE_MODES:
            raise ParameterError(f"unknown normalize mode '{self.normalize}'")

    @property
    def hidden(self) -> int:
        return self.w1.shape[1]

    @property
    def heads(self) -> int:
        return self.w2.shape[1]


def make_cpb_net(rng: np.random.Generator, hidden: int, heads: int,
                 spacing: str, normalize: str = "train_window") -> CPBNet:
    """Fresh net with Kaiming-uniform weights and zero biases."""
    return CPBNet(
        w1=Tensor(T.kaiming_uniform(rng, (2, hidden), fan_in=2), requires_grad=True),
        b1=Tensor(np.zeros(hidden), requires_grad=True),
        w2=Tensor(T.kaiming_uniform(rng, (hidden, heads), fan_in=hidden), requires_grad=True),
        b2=Tensor(np.zeros(heads), requires_grad=True),
        spacing=spacing,
        normalize=normalize,
    )


def make_param_table(rng: np.random.Generator, M: int, heads: int,
                     std: float = 0.02) -> ParamTable:
    t = T.trunc_normal(rng, ((2 * M - 1) ** 2, heads), std=std)
    return ParamTable(table=Tensor(t, requires_grad=True), M=M)


# ---------------------------------------------------------------------------
# Bias matrix construction

def _scatter_table(table: Tensor, idx: RelIndex) -> Tensor:
    """[(2M-1)^2, heads] table -> [heads, M^2, M^2] bias matrix."""
    m2 = idx.M * idx.M
    flat = T.take_rows(table, idx.index.reshape(-1))  # [M^4, heads]
    b = T.reshape(flat, (m2, m2, table.shape[1]))
    return T.permute(b, (2, 0, 1))


def param_bias(t: ParamTable, idx: RelIndex) -> Tensor:
    """Gather a learned table into a [heads, M^2, M^2] bias matrix."""
    if idx.M != t.M:
        raise ParameterError(f"index built for M={idx.M}, table holds M={t.M}")
    return _scatter_table(t.table, idx)


def _cpb_table(net: CPBNet, M_train: int, M_target: int) -> Tensor:
    """Evaluate the MLP at every offset of an M_target window."""
    coords = rel_coords(M_train, M_target, net.spacing, net.normalize)
    h = T.relu(T.add(T.matmul(coords, net.w1), net.b1))
    return T.add(T.matmul(h, net.w2), net.b2)  # [(2*M_target-1)^2, heads]


def cpb_bias(net: CPBNet, M_train: int, M_target: int, heads: int) -> Tensor:
    """Evaluate the net and scatter to a [heads, M_target^2, M_target^2] matrix."""
    if net.heads != heads:
        raise ParameterError(f"net emits {net.heads} heads, attention wants {heads}")
    vals = _cpb_table(net, M_train, M_target)
    return _scatter_table(vals, relative_index(M_target))


def precompute_bias(net: CPBNet, M: int, M_train: int | None = None) -> ParamTable:
    """Freeze the net's output at window M into a stored table.

    Gathering the result with :func:`param_bias` reproduces
    :func:`cpb_bias` bit-exactly, because both routes read the same
    evaluated table; only the storage differs.
    """
    if M_train is None:
        M_train = M
    vals = _cpb_table(net, M_train, M)
    return ParamTable(table=vals.detach(), M=M)


# ---------------------------------------------------------------------------
# Bicubic table transfer

def _catmull_rom(t: np.ndarray) -> np.ndarray:
    """Catmull-Rom cubic kernel (a = -0.5); exact partition of unity."""
    at = np.abs(t)
    at2 = at * at
    at3 = at2 * at
    near = 1.5 * at3 - 2.5 * at2 + 1.0
    far = -0.5 * at3 + 2.5 * at2 - 4.0 * at + 2.0
    return np.where(at <= 1.0, near, np.where(at < 2.0, far, 0.0))


def _resample_axis(f: np.ndarray, n_new: int) -> np.ndarray:
    """Resample axis 0 from n_old to n_new samples, endpoints aligned.

    Ghost cells one step outside each end are linear extrapolations of the
    boundary pair, so the kernel reproduces linear ramps exactly all the
    way to the edges (replicated ghosts would bend a ramp near the border).
    """
    n_old = f.shape[0]
    if n_new == n_old:
        return f.copy()
    ext = np.concatenate([
        (2.0 * f[:1] - f[1:2]),
        f,
        (2.0 * f[-1:] - f[-2:-1]),
    ], axis=0)
    pos = np.arange(n_new) * (n_old - 1) / (n_new - 1)
    i0 = np.floor(pos).astype(np.int64)
    i0 = np.minimum(i0, n_old - 2)  # keep the 4-tap stencil in range at the top end
    frac = pos - i0
    out = np.zeros((n_new,) + f.shape[1:])
    for k in range(4):
        w = _catmull_rom(frac - (k - 1))
        out += w.reshape((-1,) + (1,) * (f.ndim - 1)) * ext[i0 + k]
    return out


def bicubic_transfer(t: ParamTable, M_new: int) -> ParamTable:
    """Resample a learned table to a new window size.

    Operates per head on the (2M-1) x (2M-1) offset grid with corners
    aligned, standard separable bicubic.  M_new == M is the identity.
    """
    if t.M < 2 or M_new < 2:
        raise ParameterError(f"bicubic transfer needs windows >= 2, got {t.M} -> {M_new}")
    n_old = 2 * t.M - 1
    n_new = 2 * M_new - 1
    grid = t.table.data.reshape(n_old, n_old, t.heads)
    grid = _resample_axis(grid, n_new)
    grid = _resample_axis(grid.transpose(1, 0, 2), n_new).transpose(1, 0, 2)
    table = Tensor(grid.reshape(n_new * n_new, t.heads), requires_grad=True)
    return ParamTable(table=table, M=M_new)
