"""Windowed multi-head self-attention.

Two logit rules share one pipeline:

* ``dot``    - softmax(Q K^T / sqrt(d) + B + mask) V
* ``cosine`` - softmax(cos(q, k) / max(tau, tau_min) + B + mask) V

The cosine rule normalizes q and k rows, so every pre-bias logit lies in
[-1/tau, 1/tau] regardless of the amplitude of the block input; tau is a
learnable scalar per head, floored at ``tau_min``.

``attend_sequential`` computes the same result one window at a time, so the
peak transient buffer is one window's logits rather than all windows' at
once.  Results match the batch path to float64 noise.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .errors import ContractError, NumericsError, ParameterError, ShapeError
from .tensor import Tensor

VARIANTS = ("dot", "cosine")

# When True, every forward asserts the cosine logit bound.  Cheap, but off by
# default so profiling reflects the real op mix.
DEBUG_BOUNDS = False

# Test hook for the negative-control check: skips the tau floor so the bound
# check above (and cmd_check) can be shown to catch a violation.
_TEST_BYPASS_TAU_CLAMP = False


@dataclass(frozen=True)
class AttentionConfig:
    heads: int
    head_dim: int
    variant: str = "cosine"
    tau_init: float = 1.0
    tau_min: float = 0.01

    def __post_init__(self):
        if self.variant not in VARIANTS:
            raise ParameterError(f"unknown attention variant '{self.variant}'")
        if self.heads < 1 or self.head_dim < 1:
            raise ParameterError("heads and head_dim must be >= 1")
        if self.tau_min <= 0:
            raise ParameterError("tau_min must be > 0")


@dataclass
class AttentionWeights:
    """Projection weights for one attention layer.

    ``tau`` holds the raw (unconstrained) per-head temperature; the floor is
    applied at use, with subgradient 0 at and below the floor.
    """

    heads: int
    head_dim: int
    qkv_w: Tensor    # [C, 3 * heads * head_dim]
    qkv_b: Tensor    # [3 * heads * head_dim]
    proj_w: Tensor   # [heads * head_dim, C]
    proj_b: Tensor   # [C]
    tau: Tensor | None = None  # [heads], cosine only

    def trainable(self) -> list[Tensor]:
        ps = [self.qkv_w, self.qkv_b, self.proj_w, self.proj_b]
        if self.tau is not None:
            ps.append(self.tau)
        return ps


def _split_heads(qkv: Tensor, nW: int, m2: int, heads: int, d: int) -> tuple[Tensor, Tensor, Tensor]:
    """[nW, M^2, 3*H*d] -> three [nW, H, M^2, d] tensors."""
    x = T.reshape(qkv, (nW, m2, 3, heads, d))
    x = T.permute(x, (2, 0, 3, 1, 4))  # [3, nW, H, M^2, d]
    parts = []
    for i in range(3):
        p = T.take_rows(x, [i])
        parts.append(T.reshape(p, (nW, heads, m2, d)))
    return parts[0], parts[1], parts[2]


def _logits(q: Tensor, k: Tensor, w: AttentionWeights, variant: str,
            tau_min: float) -> Tensor:
    if variant == "dot":
        return T.scale(T.matmul(q, T.transpose_last2(k)), 1.0 / np.sqrt(w.head_dim))
    if variant == "cosine":
        if w.tau is None:
            raise ParameterError("cosine attention needs tau weights")
        qn = T.normalize_rows(q)
        kn = T.normalize_rows(k)
        sim = T.matmul(qn, T.transpose_last2(kn))
        if _TEST_BYPASS_TAU_CLAMP:
            tau_eff = w.tau
        else:
            tau_eff = T.clamp_min(w.tau, tau_min)
        tau_b = T.reshape(tau_eff, (1, w.heads, 1, 1))
        out = T.div(sim, tau_b)
        if DEBUG_BOUNDS:
            bound = 1.0 / np.maximum(tau_eff.data, 1e-300)  # per head
            if np.any(np.abs(out.data) > bound.reshape(1, -1, 1, 1) + 1e-9):
                raise ContractError(
                    "cosine logits exceed the 1/tau bound; tau floor violated"
                )
        return out
    raise ParameterError(f"unknown attention variant '{variant}'")


def _attend(x: Tensor, w: AttentionWeights, B: Tensor | None, mask: Tensor | None,
            variant: str, tau_min: float, return_probs: bool):
    if x.ndim != 3:
        raise ShapeError(f"attention input must be [nW, M^2, C], got {x.shape}")
    nW, m2, C = x.shape
    heads, d = w.heads, w.head_dim
    if w.qkv_w.shape != (C, 3 * heads * d):
        raise ShapeError(
            f"qkv weight {w.qkv_w.shape} incompatible with C={C}, heads={heads}, d={d}"
        )
    qkv = T.add(T.matmul(x, w.qkv_w), w.qkv_b)
    q, k, v = _split_heads(qkv, nW, m2, heads, d)
    logits = _logits(q, k, w, variant, tau_min)  # [nW, H, M^2, M^2]
    if B is not None:
        if B.shape != (heads, m2, m2):
            raise ShapeError(f"bias matrix {B.shape} != ({heads}, {m2}, {m2})")
        logits = T.add(logits, T.reshape(B, (1, heads, m2, m2)))
    if mask is not None:
        if mask.shape != (nW, m2, m2):
            raise ShapeError(f"mask {mask.shape} != ({nW}, {m2}, {m2})")
        logits = T.add(logits, T.reshape(mask, (nW, 1, m2, m2)))
    probs = T.softmax_lastdim(logits)
    out = T.matmul(probs, v)                      # [nW, H, M^2, d]
    out = T.permute(out, (0, 2, 1, 3))
    out = T.reshape(out, (nW, m2, heads * d))
    out = T.add(T.matmul(out, w.proj_w), w.proj_b)
    if return_probs:
        return out, probs
    return out


def attend_dot(x: Tensor, w: AttentionWeights, B: Tensor | None = None,
               mask: Tensor | None = None, return_probs: bool = False,
               label: str = "attend_dot"):
    try:
        return _attend(x, w, B, mask, "dot", 0.01, return_probs)
    except NumericsError as e:
        raise NumericsError(e.op, f"in {label}") from e


def attend_cosine(x: Tensor, w: AttentionWeights, B: Tensor | None = None,
                  mask: Tensor | None = None, tau_min: float = 0.01,
                  return_probs: bool = False, label: str = "attend_cosine"):
    try:
        return _attend(x, w, B, mask, "cosine", tau_min, return_probs)
    except NumericsError as e:
        raise NumericsError(e.op, f"in {label}") from e


def attend_sequential(x: Tensor, w: AttentionWeights, B: Tensor | None = None,
                      mask: Tensor | None = None, variant: str = "cosine",
                      tau_min: float = 0.01, label: str = "attend_sequential") -> Tensor:
    """One window-group at a time; numerically equal to the batch path.

    Peak transient memory is O(M^2 * (C + M^2 * heads)) per step instead of
    the batch path's O(nW * ...) everything-at-once footprint.
    """
    if variant not in VARIANTS:
        raise ParameterError(f"unknown attention variant '{variant}'")
    if x.ndim != 3:
        raise ShapeError(f"attention input must be [nW, M^2, C], got {x.shape}")
    nW = x.shape[0]
    outs = []
    try:
        for i in range(nW):
            xi = T.take_rows(x, [i])
            mi = T.take_rows(mask, [i]) if mask is not None else None
            outs.append(_attend(xi, w, B, mi, variant, tau_min, False))
        return T.concat_rows(outs)
    except NumericsError as e:
        raise NumericsError(e.op, f"in {label}") from e


def attention_stats(probs) -> dict[str, np.ndarray]:
    """Per-head Shannon entropy (nats) and max probability, averaged over queries.

    Accepts [heads, M^2, M^2] or any [..., heads, M^2, M^2] probability
    tensor whose last-dim rows sum to 1.
    """
    p = probs.data if isinstance(probs, Tensor) else np.asarray(probs, dtype=np.float64)
    if p.ndim < 3:
        raise ShapeError(f"attention_stats expects [..., heads, M^2, M^2], got {p.shape}")
    sums = p.sum(axis=-1)
    if np.any(np.abs(sums - 1.0) > 1e-6):
        raise ContractError("attention_stats input rows do not sum to 1")
    ent = np.where(p > 0.0, -p * np.log(np.where(p > 0.0, p, 1.0)), 0.0).sum(axis=-1)
    # Average over query positions and any leading batch axes.
    reduce_axes = tuple(i for i in range(p.ndim - 1) if i != p.ndim - 3)
    return {
        "entropy": ent.mean(axis=reduce_axes),
        "max_prob": p.max(axis=-1).mean(axis=reduce_axes),
    }
