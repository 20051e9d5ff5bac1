"""Dense f64 tensors with reverse-mode automatic differentiation.

A dynamic tape records primitive operations as they execute; ``Tape.backward``
replays the records in reverse to accumulate gradients into leaf tensors.
Everything is float64 and row-major, so gradient checks can be tight and
equality claims (checkpointed vs. plain training) can be bit-exact.

Any primitive that produces NaN or Inf raises :class:`NumericsError` naming
the op, so divergence is a detectable state rather than silent poison.
"""

from __future__ import annotations

from contextlib import contextmanager
from typing import Callable, Iterator, Sequence

import numpy as np
from scipy.special import erf as _erf

from .errors import NumericsError, ParameterError, ShapeError, UsageError

Array = np.ndarray

# ---------------------------------------------------------------------------
# Instrumentation.  Live-object counters back the memory claims for
# sequential attention and activation checkpointing; the op counter backs
# the recompute claim.  Counts are of Tensor wrappers / their elements, which
# tracks allocation behaviour closely enough at this scale.

_live_tensors = 0
_live_elements = 0
_peak_tensors = 0
_peak_elements = 0
_ops_executed = 0


def reset_peaks() -> None:
    """Reset peak counters to the current live level and zero the op count."""
    global _peak_tensors, _peak_elements, _ops_executed
    _peak_tensors = _live_tensors
    _peak_elements = _live_elements
    _ops_executed = 0


def counter_snapshot() -> dict[str, int]:
    return {
        "live_tensors": _live_tensors,
        "live_elements": _live_elements,
        "peak_tensors": _peak_tensors,
        "peak_elements": _peak_elements,
        "ops_executed": _ops_executed,
    }


class Tensor:
    """A dense n-dimensional float64 array, optionally gradient-tracked.

    ``data`` is always a C-contiguous float64 ndarray.  ``grad`` is either
    None or an ndarray of identical shape; it is only ever written by
    ``Tape.backward`` (accumulated, so several tapes may contribute).
    """

    __slots__ = ("data", "requires_grad", "grad")

    def __init__(self, data, requires_grad: bool = False, _checked: bool = False):
        arr = np.ascontiguousarray(data, dtype=np.float64)
        if not _checked and not np.all(np.isfinite(arr)):
            raise NumericsError("tensor", "constructor received non-finite data")
        self.data = arr
        self.requires_grad = bool(requires_grad)
        self.grad: Array | None = None
        _count_alloc(arr.size)

    def __del__(self):
        try:
            _count_free(self.data.size)
        except Exception:
            pass

    # -- basic introspection ------------------------------------------------
    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    def item(self) -> float:
        return float(self.data.reshape(-1)[0])

    def detach(self) -> "Tensor":
        return Tensor(self.data, requires_grad=False, _checked=True)

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad})"

    # -- operator sugar -----------------------------------------------------
    def __add__(self, other: "Tensor") -> "Tensor":
        return add(self, other)

    def __sub__(self, other: "Tensor") -> "Tensor":
        return sub(self, other)

    def __mul__(self, other: "Tensor") -> "Tensor":
        return mul(self, other)

    def __truediv__(self, other: "Tensor") -> "Tensor":
        return div(self, other)

    def __neg__(self) -> "Tensor":
        return scale(self, -1.0)

    def __matmul__(self, other: "Tensor") -> "Tensor":
        return matmul(self, other)


def _count_alloc(n: int) -> None:
    global _live_tensors, _live_elements, _peak_tensors, _peak_elements
    _live_tensors += 1
    _live_elements += n
    if _live_tensors > _peak_tensors:
        _peak_tensors = _live_tensors
    if _live_elements > _peak_elements:
        _peak_elements = _live_elements


def _count_free(n: int) -> None:
    global _live_tensors, _live_elements
    _live_tensors -= 1
    _live_elements -= n


# ---------------------------------------------------------------------------
# Tape

class _Node:
    __slots__ = ("out", "inputs", "vjp")

    def __init__(self, out: Tensor, inputs: tuple[Tensor, ...], vjp: Callable):
        self.out = out
        self.inputs = inputs
        # vjp: grad_out ndarray -> sequence of (ndarray | None), one per input
        self.vjp = vjp


_TAPE_STACK: list["Tape | None"] = []


class Tape:
    """Ordered record of primitive ops for one forward pass.

    Recording order is execution order, so iterating the records backwards
    is a valid reverse topological order of the dynamic graph.  A tape may
    be consumed by ``backward``/``backward_from`` exactly once.
    """

    def __init__(self):
        self.nodes: list[_Node] = []
        self.consumed = False

    def __enter__(self) -> "Tape":
        _TAPE_STACK.append(self)
        return self

    def __exit__(self, *exc) -> None:
        popped = _TAPE_STACK.pop()
        if popped is not self:  # pragma: no cover - stack discipline bug
            raise UsageError("tape stack corrupted")

    def record(self, out: Tensor, inputs: Sequence[Tensor], vjp: Callable) -> None:
        self.nodes.append(_Node(out, tuple(inputs), vjp))

    def backward(self, loss: Tensor) -> None:
        """Populate ``grad`` on every requires_grad leaf reachable from loss."""
        if loss.size != 1:
            raise UsageError(f"backward needs a scalar loss, got shape {loss.shape}")
        self.backward_from(loss, np.ones_like(loss.data))

    def backward_from(self, out: Tensor, grad_out: Array) -> None:
        """Seed ``out`` with ``grad_out`` and run the reverse sweep.

        Used directly by activation checkpointing, which re-runs a segment
        under a fresh tape and injects the downstream gradient.
        """
        if self.consumed:
            raise UsageError("tape already consumed; run a new forward pass")
        self.consumed = True
        if grad_out.shape != out.data.shape:
            raise ShapeError(
                f"seed gradient shape {grad_out.shape} != output shape {out.data.shape}"
            )
        produced = {id(n.out) for n in self.nodes}
        if id(out) not in produced:
            raise UsageError("output is not attached to this tape (detached graph?)")

        # Accumulation never mutates a stored array in place: a vjp may
        # return the incoming gradient itself (add with no broadcasting),
        # so the same buffer can be referenced under several ids.
        grads: dict[int, Array] = {id(out): np.asarray(grad_out, dtype=np.float64)}
        for node in reversed(self.nodes):
            g_out = grads.pop(id(node.out), None)
            if g_out is None:
                continue
            in_grads = node.vjp(g_out)
            for inp, g in zip(node.inputs, in_grads):
                if g is None:
                    continue
                if inp.requires_grad and id(inp) not in produced:
                    # Leaf: accumulate into the persistent .grad buffer.
                    if inp.grad is None:
                        inp.grad = np.zeros_like(inp.data)
                    inp.grad += g
                elif id(inp) in produced:
                    acc = grads.get(id(inp))
                    grads[id(inp)] = g if acc is None else acc + g


def _active_tape() -> "Tape | None":
    return _TAPE_STACK[-1] if _TAPE_STACK else None


@contextmanager
def no_tape() -> Iterator[None]:
    """Disable recording inside the block, even if a tape is active."""
    _TAPE_STACK.append(None)
    try:
        yield
    finally:
        _TAPE_STACK.pop()


def record_custom(out: Tensor, inputs: Sequence[Tensor], vjp: Callable) -> None:
    """Attach a hand-written backward rule to the active tape, if any."""
    tape = _active_tape()
    if tape is not None:
        tape.record(out, inputs, vjp)


def checkpoint_segment(fn: Callable[[Tensor], Tensor], x: Tensor) -> Tensor:
    """Run ``fn`` without storing its intermediates; recompute them in backward.

    The segment's forward executes with recording off, so its intermediate
    tensors are freed as soon as they go dead.  One custom node on the outer
    tape re-runs ``fn`` under a fresh tape during backward, seeds it with the
    incoming gradient, and lets leaf weights accumulate their grads through
    that inner tape.  Because every op here is deterministic in f64, the
    recomputed gradients are bit-identical to the plain path's.
    """
    tape = _active_tape()
    if tape is None:
        return fn(x)
    with no_tape():
        y = fn(x)
    out = Tensor(y.data, requires_grad=True, _checked=True)

    def vjp(g: Array):
        x_leaf = Tensor(x.data, requires_grad=True, _checked=True)
        with Tape() as inner:
            y2 = fn(x_leaf)
        inner.backward_from(y2, g)
        gx = x_leaf.grad if x_leaf.grad is not None else np.zeros_like(x.data)
        return (gx,)

    tape.record(out, (x,), vjp)
    return out


# ---------------------------------------------------------------------------
# Primitive plumbing

def _make(op: str, out_data: Array, inputs: Sequence[Tensor], vjp: Callable) -> Tensor:
    global _ops_executed
    _ops_executed += 1
    if not np.all(np.isfinite(out_data)):
        raise NumericsError(op)
    out = Tensor(out_data, requires_grad=any(i.requires_grad for i in inputs), _checked=True)
    tape = _active_tape()
    if tape is not None and out.requires_grad:
        tape.record(out, inputs, vjp)
    return out


def _unbroadcast(g: Array, shape: tuple[int, ...]) -> Array:
    """Sum a broadcast gradient back down to ``shape``."""
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for ax, s in enumerate(shape):
        if s == 1 and g.shape[ax] != 1:
            g = g.sum(axis=ax, keepdims=True)
    return g


# ---------------------------------------------------------------------------
# Elementwise and linear-algebra primitives

def add(a: Tensor, b: Tensor) -> Tensor:
    out = a.data + b.data

    def vjp(g):
        return _unbroadcast(g, a.shape), _unbroadcast(g, b.shape)

    return _make("add", out, (a, b), vjp)


def sub(a: Tensor, b: Tensor) -> Tensor:
    out = a.data - b.data

    def vjp(g):
        return _unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)

    return _make("sub", out, (a, b), vjp)


def mul(a: Tensor, b: Tensor) -> Tensor:
    out = a.data * b.data

    def vjp(g):
        return _unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)

    return _make("mul", out, (a, b), vjp)


def div(a: Tensor, b: Tensor) -> Tensor:
    out = a.data / b.data

    def vjp(g):
        ga = _unbroadcast(g / b.data, a.shape)
        gb = _unbroadcast(-g * a.data / (b.data * b.data), b.shape)
        return ga, gb

    return _make("div", out, (a, b), vjp)


def scale(a: Tensor, c: float) -> Tensor:
    c = float(c)
    out = a.data * c

    def vjp(g):
        return (g * c,)

    return _make("scale", out, (a,), vjp)


def matmul(a: Tensor, b: Tensor) -> Tensor:
    if a.ndim < 2 or b.ndim < 2:
        raise ShapeError(f"matmul needs rank >= 2, got {a.shape} and {b.shape}")
    if a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"matmul inner extents disagree: {a.shape} x {b.shape}")
    try:
        out = np.matmul(a.data, b.data)
    except ValueError as e:
        raise ShapeError(f"matmul batch extents incompatible: {a.shape} x {b.shape}") from e

    def vjp(g):
        # Skip the half of the product rule feeding a non-grad input; with
        # constant data (images, masks) that saves a full gemm.
        ga = gb = None
        if a.requires_grad:
            ga = _unbroadcast(np.matmul(g, np.swapaxes(b.data, -1, -2)), a.shape)
        if b.requires_grad:
            gb = _unbroadcast(np.matmul(np.swapaxes(a.data, -1, -2), g), b.shape)
        return ga, gb

    return _make("matmul", out, (a, b), vjp)


def transpose_last2(a: Tensor) -> Tensor:
    if a.ndim < 2:
        raise ShapeError(f"transpose_last2 needs rank >= 2, got {a.shape}")
    out = np.swapaxes(a.data, -1, -2).copy()

    def vjp(g):
        return (np.swapaxes(g, -1, -2),)

    return _make("transpose_last2", out, (a,), vjp)


def permute(a: Tensor, axes: Sequence[int]) -> Tensor:
    axes = tuple(axes)
    if sorted(axes) != list(range(a.ndim)):
        raise ShapeError(f"permute axes {axes} invalid for rank {a.ndim}")
    inv = tuple(np.argsort(axes))
    out = np.transpose(a.data, axes).copy()

    def vjp(g):
        return (np.transpose(g, inv),)

    return _make("permute", out, (a,), vjp)


def reshape(a: Tensor, shape: Sequence[int]) -> Tensor:
    shape = tuple(int(s) for s in shape)
    out = a.data.reshape(shape)
    old = a.shape

    def vjp(g):
        return (g.reshape(old),)

    return _make("reshape", out, (a,), vjp)


def reduce_sum(a: Tensor, axis: int | tuple[int, ...] | None = None,
               keepdims: bool = False) -> Tensor:
    out = a.data.sum(axis=axis, keepdims=keepdims)
    out = np.asarray(out)

    def vjp(g):
        g = np.asarray(g)
        if axis is None:
            return (np.broadcast_to(g, a.shape).copy(),)
        axes = axis if isinstance(axis, tuple) else (axis,)
        if not keepdims:
            for ax in sorted(a.ndim + x if x < 0 else x for x in axes):
                g = np.expand_dims(g, ax)
        return (np.broadcast_to(g, a.shape).copy(),)

    return _make("reduce_sum", out, (a,), vjp)


def reduce_mean(a: Tensor, axis: int | tuple[int, ...] | None = None,
                keepdims: bool = False) -> Tensor:
    if axis is None:
        count = a.size
    else:
        axes = axis if isinstance(axis, tuple) else (axis,)
        count = 1
        for ax in axes:
            count *= a.shape[ax]
    s = reduce_sum(a, axis=axis, keepdims=keepdims)
    return scale(s, 1.0 / count)


def relu(a: Tensor) -> Tensor:
    out = np.maximum(a.data, 0.0)

    def vjp(g):
        return (g * (a.data > 0.0),)

    return _make("relu", out, (a,), vjp)


def gelu(a: Tensor) -> Tensor:
    """Exact (erf-based) GELU."""
    x = a.data
    cdf = 0.5 * (1.0 + _erf(x / np.sqrt(2.0)))
    out = x * cdf

    def vjp(g):
        pdf = np.exp(-0.5 * x * x) / np.sqrt(2.0 * np.pi)
        return (g * (cdf + x * pdf),)

    return _make("gelu", out, (a,), vjp)


def softmax_lastdim(a: Tensor) -> Tensor:
    if a.size == 0 or a.shape[-1] < 1:
        raise ShapeError(f"softmax over empty tensor, shape {a.shape}")
    # Max-subtraction keeps exp() finite for logits up to +/-1e308.
    m = a.data.max(axis=-1, keepdims=True)
    e = np.exp(a.data - m)
    out = e / e.sum(axis=-1, keepdims=True)

    def vjp(g):
        dot = (g * out).sum(axis=-1, keepdims=True)
        return (out * (g - dot),)

    return _make("softmax_lastdim", out, (a,), vjp)


def logsumexp_lastdim(a: Tensor) -> Tensor:
    if a.size == 0 or a.shape[-1] < 1:
        raise ShapeError(f"logsumexp over empty tensor, shape {a.shape}")
    m = a.data.max(axis=-1, keepdims=True)
    e = np.exp(a.data - m)
    s = e.sum(axis=-1, keepdims=True)
    out = (m + np.log(s))[..., 0]
    soft = e / s

    def vjp(g):
        return (soft * np.asarray(g)[..., None],)

    return _make("logsumexp_lastdim", out, (a,), vjp)


def layer_norm(x: Tensor, gamma: Tensor, beta: Tensor, eps: float = 1e-5) -> Tensor:
    if eps <= 0.0:
        raise ParameterError(f"layer_norm eps must be > 0, got {eps}")
    C = x.shape[-1]
    if gamma.shape != (C,) or beta.shape != (C,):
        raise ShapeError(
            f"layer_norm affine shapes {gamma.shape}/{beta.shape} do not match last extent {C}"
        )
    mu = x.data.mean(axis=-1, keepdims=True)
    xc = x.data - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv
    out = xhat * gamma.data + beta.data

    def vjp(g):
        gbeta = _unbroadcast(g, beta.shape)
        ggamma = _unbroadcast(g * xhat, gamma.shape)
        dxhat = g * gamma.data
        # Per-slice projection removes the mean and the xhat component,
        # which is the closed-form LN gradient.
        m1 = dxhat.mean(axis=-1, keepdims=True)
        m2 = (dxhat * xhat).mean(axis=-1, keepdims=True)
        gx = inv * (dxhat - m1 - xhat * m2)
        return gx, ggamma, gbeta

    return _make("layer_norm", out, (x, gamma, beta), vjp)


def normalize_rows(a: Tensor, eps: float = 1e-12) -> Tensor:
    """Scale each last-dim row to unit L2 norm, with an eps floor on the norm.

    The floor means zero rows map to zero (gradient 1/eps-scaled identity)
    instead of NaN.
    """
    norm = np.sqrt((a.data * a.data).sum(axis=-1, keepdims=True))
    n = np.maximum(norm, eps)
    out = a.data / n
    active = norm > eps

    def vjp(g):
        dot = (g * out).sum(axis=-1, keepdims=True)
        return (np.where(active, (g - out * dot) / n, g / n),)

    return _make("normalize_rows", out, (a,), vjp)


def clamp(a: Tensor, lo: float | None = None, hi: float | None = None) -> Tensor:
    out = np.clip(a.data, lo, hi)
    # Strict inequalities: at the clamp boundary the subgradient is 0,
    # so a parameter sitting exactly on its floor stops moving.
    mask = np.ones_like(a.data, dtype=bool)
    if lo is not None:
        mask &= a.data > lo
    if hi is not None:
        mask &= a.data < hi

    def vjp(g):
        return (g * mask,)

    return _make("clamp", out, (a,), vjp)


def clamp_min(a: Tensor, lo: float) -> Tensor:
    return clamp(a, lo=lo)


def maximum(a: Tensor, b: Tensor) -> Tensor:
    out = np.maximum(a.data, b.data)
    a_wins = a.data >= b.data  # ties route gradient to the first argument

    def vjp(g):
        return (_unbroadcast(g * a_wins, a.shape),
                _unbroadcast(g * ~a_wins, b.shape))

    return _make("maximum", out, (a, b), vjp)


# ---------------------------------------------------------------------------
# Indexing / layout primitives

def take_rows(a: Tensor, idx) -> Tensor:
    """Gather along axis 0: out[i] = a[idx[i]]."""
    idx = np.asarray(idx, dtype=np.int64)
    if idx.ndim != 1:
        raise ShapeError(f"take_rows index must be 1-D, got shape {idx.shape}")
    if idx.size and (idx.min() < 0 or idx.max() >= a.shape[0]):
        raise ShapeError(f"take_rows index out of range for extent {a.shape[0]}")
    out = a.data[idx]

    def vjp(g):
        ga = np.zeros_like(a.data)
        np.add.at(ga, idx, g)
        return (ga,)

    return _make("take_rows", out, (a,), vjp)


def pick_lastdim(a: Tensor, idx) -> Tensor:
    """out[i] = a[i, idx[i]] for a 2-D input; the per-row select behind CE loss."""
    if a.ndim != 2:
        raise ShapeError(f"pick_lastdim needs a 2-D tensor, got {a.shape}")
    idx = np.asarray(idx, dtype=np.int64)
    if idx.shape != (a.shape[0],):
        raise ShapeError(f"pick_lastdim index shape {idx.shape} != ({a.shape[0]},)")
    if idx.size and (idx.min() < 0 or idx.max() >= a.shape[1]):
        raise ShapeError(f"pick_lastdim index out of range for extent {a.shape[1]}")
    rows = np.arange(a.shape[0])
    out = a.data[rows, idx]

    def vjp(g):
        ga = np.zeros_like(a.data)
        np.add.at(ga, (rows, idx), g)
        return (ga,)

    return _make("pick_lastdim", out, (a,), vjp)


def roll2d(a: Tensor, dr: int, dc: int) -> Tensor:
    """Torus roll of axes 1 and 2 of a [B, H, W, C] tensor."""
    if a.ndim != 4:
        raise ShapeError(f"roll2d needs a 4-D tensor, got {a.shape}")
    out = np.roll(a.data, (dr, dc), axis=(1, 2))

    def vjp(g):
        return (np.roll(g, (-dr, -dc), axis=(1, 2)),)

    return _make("roll2d", out, (a,), vjp)


def pad_hw(a: Tensor, pad_bottom: int, pad_right: int) -> Tensor:
    """Zero-pad the bottom/right of the H, W axes of a [B, H, W, C] tensor."""
    if a.ndim != 4:
        raise ShapeError(f"pad_hw needs a 4-D tensor, got {a.shape}")
    if pad_bottom < 0 or pad_right < 0:
        raise ParameterError("pad_hw amounts must be >= 0")
    H, W = a.shape[1], a.shape[2]
    out = np.pad(a.data, ((0, 0), (0, pad_bottom), (0, pad_right), (0, 0)))

    def vjp(g):
        return (g[:, :H, :W, :].copy(),)

    return _make("pad_hw", out, (a,), vjp)


def crop_hw(a: Tensor, H: int, W: int) -> Tensor:
    """Keep the top-left H x W region of a [B, H', W', C] tensor."""
    if a.ndim != 4:
        raise ShapeError(f"crop_hw needs a 4-D tensor, got {a.shape}")
    if H > a.shape[1] or W > a.shape[2]:
        raise ShapeError(f"crop_hw target ({H},{W}) exceeds input {a.shape}")
    out = a.data[:, :H, :W, :].copy()

    def vjp(g):
        ga = np.zeros_like(a.data)
        ga[:, :H, :W, :] = g
        return (ga,)

    return _make("crop_hw", out, (a,), vjp)


def concat_rows(parts: Sequence[Tensor]) -> Tensor:
    """Concatenate along axis 0."""
    if not parts:
        raise ShapeError("concat_rows needs at least one tensor")
    out = np.concatenate([p.data for p in parts], axis=0)
    sizes = [p.shape[0] for p in parts]

    def vjp(g):
        grads = []
        start = 0
        for s in sizes:
            grads.append(g[start:start + s].copy())
            start += s
        return grads

    return _make("concat_rows", out, tuple(parts), vjp)


# ---------------------------------------------------------------------------
# Parameter initializers.  Deterministic given the caller's Generator.

def trunc_normal(rng: np.random.Generator, shape: Sequence[int],
                 std: float = 0.02) -> Array:
    """Normal(0, std) with resampling outside +/- 2 std."""
    shape = tuple(shape)
    out = rng.normal(0.0, std, size=shape)
    bad = np.abs(out) > 2.0 * std
    while bad.any():
        out[bad] = rng.normal(0.0, std, size=int(bad.sum()))
        bad = np.abs(out) > 2.0 * std
    return out


def kaiming_uniform(rng: np.random.Generator, shape: Sequence[int],
                    fan_in: int) -> Array:
    """Uniform(-b, b) with b = sqrt(6 / fan_in)."""
    bound = np.sqrt(6.0 / fan_in)
    return rng.uniform(-bound, bound, size=tuple(shape))
