"""Shared oracles for the test suite.

The finite-difference machinery here is the independent check for every
hand-written vjp: it never calls the tape for the numerator, only plain
forward evaluations on perturbed copies.
"""

from __future__ import annotations

from typing import Callable, Sequence

import numpy as np

from swinlab import tensor as T


def scalar_eval(fn: Callable, arrays: Sequence[np.ndarray]) -> float:
    """Evaluate fn off-tape on fresh Tensors; fn must return a scalar Tensor."""
    with T.no_tape():
        out = fn(*[T.Tensor(a) for a in arrays])
    return float(out.data.reshape(()))


def tape_grads(fn: Callable, arrays: Sequence[np.ndarray]) -> list[np.ndarray]:
    """Gradients of scalar fn w.r.t. every input, via one tape pass."""
    tens = [T.Tensor(a, requires_grad=True) for a in arrays]
    with T.Tape() as tape:
        out = fn(*tens)
        tape.backward(out)
    return [t.grad if t.grad is not None else np.zeros_like(t.data) for t in tens]


def fd_max_rel_err(fn: Callable, arrays: Sequence[np.ndarray],
                   rng: np.random.Generator, probes: int = 5,
                   full: bool = False) -> float:
    """Max relative |tape - central difference| over probed coordinates.

    ``full=True`` probes every coordinate of every input instead of sampling.
    """
    grads = tape_grads(fn, arrays)
    worst = 0.0
    for j, a in enumerate(arrays):
        n = a.size
        if full:
            idxs = range(n)
        else:
            idxs = [int(rng.integers(n)) for _ in range(min(probes, n))]
        for i in idxs:
            h = 1e-6 * max(1.0, abs(a.reshape(-1)[i]))
            up_arrays = [x.copy() for x in arrays]
            up_arrays[j].reshape(-1)[i] += h
            dn_arrays = [x.copy() for x in arrays]
            dn_arrays[j].reshape(-1)[i] -= h
            fd = (scalar_eval(fn, up_arrays) - scalar_eval(fn, dn_arrays)) / (2 * h)
            ad = grads[j].reshape(-1)[i]
            worst = max(worst, abs(ad - fd) / max(1.0, abs(fd)))
    return worst


def _away_from_zero(rng: np.random.Generator, shape, lo=0.2, hi=1.5) -> np.ndarray:
    """Values bounded away from 0 so kinked ops (relu, clamp) are smooth locally."""
    mag = rng.uniform(lo, hi, size=shape)
    sign = np.where(rng.random(shape) < 0.5, -1.0, 1.0)
    return mag * sign


def op_cases(rng: np.random.Generator) -> list[tuple[str, Callable, list[np.ndarray]]]:
    """One differentiable scalar objective per primitive op.

    Each case multiplies the op output by a fixed random cotangent and sums,
    so the FD check exercises the full vjp, not just a uniform seed.
    """

    def R(shape):
        return T.Tensor(rng.normal(0, 1, shape))

    def dot_sum(out_shape):
        r = R(out_shape)
        return lambda y: T.reduce_sum(T.mul(y, r))

    cases: list[tuple[str, Callable, list[np.ndarray]]] = []

    a23 = rng.normal(0, 1, (2, 3))
    b23 = rng.normal(0, 1, (2, 3))
    s = dot_sum((2, 3))
    cases.append(("add", lambda x, y: s(T.add(x, y)), [a23.copy(), b23.copy()]))
    cases.append(("add_broadcast", lambda x, y: s(T.add(x, y)),
                  [a23.copy(), rng.normal(0, 1, (3,))]))
    cases.append(("sub", lambda x, y: s(T.sub(x, y)), [a23.copy(), b23.copy()]))
    cases.append(("mul", lambda x, y: s(T.mul(x, y)), [a23.copy(), b23.copy()]))
    cases.append(("div", lambda x, y: s(T.div(x, y)),
                  [a23.copy(), _away_from_zero(rng, (2, 3), 0.5, 2.0)]))
    cases.append(("scale", lambda x: s(T.scale(x, -1.7)), [a23.copy()]))

    s35 = dot_sum((3, 5))
    cases.append(("matmul", lambda x, y: s35(T.matmul(x, y)),
                  [rng.normal(0, 1, (3, 4)), rng.normal(0, 1, (4, 5))]))
    s235 = dot_sum((2, 3, 5))
    cases.append(("matmul_batched", lambda x, y: s235(T.matmul(x, y)),
                  [rng.normal(0, 1, (2, 3, 4)), rng.normal(0, 1, (2, 4, 5))]))
    cases.append(("matmul_bcast_b", lambda x, y: s235(T.matmul(x, y)),
                  [rng.normal(0, 1, (2, 3, 4)), rng.normal(0, 1, (4, 5))]))

    s32 = dot_sum((3, 2))
    cases.append(("transpose_last2", lambda x: s32(T.transpose_last2(x)), [a23.copy()]))
    s432 = dot_sum((4, 3, 2))
    cases.append(("permute", lambda x: s432(T.permute(x, (2, 1, 0))),
                  [rng.normal(0, 1, (2, 3, 4))]))
    s6 = dot_sum((6,))
    cases.append(("reshape", lambda x: s6(T.reshape(x, (6,))), [a23.copy()]))

    cases.append(("reduce_sum_all", lambda x: T.reduce_sum(x), [a23.copy()]))
    s3 = dot_sum((3,))
    cases.append(("reduce_sum_axis", lambda x: s3(T.reduce_sum(x, axis=0)), [a23.copy()]))
    cases.append(("reduce_mean", lambda x: s3(T.reduce_mean(x, axis=0)), [a23.copy()]))

    cases.append(("relu", lambda x: s(T.relu(x)), [_away_from_zero(rng, (2, 3))]))
    cases.append(("gelu", lambda x: s(T.gelu(x)), [a23.copy()]))
    s24 = dot_sum((2, 4))
    cases.append(("softmax_lastdim", lambda x: s24(T.softmax_lastdim(x)),
                  [rng.normal(0, 2, (2, 4))]))
    s2 = dot_sum((2,))
    cases.append(("logsumexp_lastdim", lambda x: s2(T.logsumexp_lastdim(x)),
                  [rng.normal(0, 2, (2, 4))]))

    g4, b4 = rng.normal(1, 0.3, (4,)), rng.normal(0, 0.3, (4,))
    cases.append(("layer_norm", lambda x, g, b: s24(T.layer_norm(x, g, b)),
                  [rng.normal(0, 1, (2, 4)), g4, b4]))
    cases.append(("normalize_rows", lambda x: s24(T.normalize_rows(x)),
                  [_away_from_zero(rng, (2, 4), 0.5, 2.0)]))

    cases.append(("clamp", lambda x: s(T.clamp(x, -1.0, 1.0)),
                  [rng.uniform(-0.8, 0.8, (2, 3)) + np.where(rng.random((2, 3)) < 0.5, -0.6, 0.6)]))
    cases.append(("clamp_min", lambda x: s(T.clamp_min(x, 0.1)),
                  [_away_from_zero(rng, (2, 3), 0.3, 1.5)]))
    mm_a = rng.normal(0, 1, (2, 3))
    mm_b = mm_a + _away_from_zero(rng, (2, 3), 0.2, 0.8)  # no exact ties
    cases.append(("maximum", lambda x, y: s(T.maximum(x, y)), [mm_a, mm_b]))

    s23r = dot_sum((2, 5))
    cases.append(("take_rows", lambda x: s23r(T.take_rows(x, [2, 0])),
                  [rng.normal(0, 1, (4, 5))]))
    cases.append(("pick_lastdim", lambda x: s3(T.pick_lastdim(x, [1, 0, 3])),
                  [rng.normal(0, 1, (3, 4))]))

    img = rng.normal(0, 1, (2, 4, 4, 3))
    s_img = dot_sum((2, 4, 4, 3))
    cases.append(("roll2d", lambda x: s_img(T.roll2d(x, -1, 2)), [img.copy()]))
    s_pad = dot_sum((2, 5, 6, 3))
    cases.append(("pad_hw", lambda x: s_pad(T.pad_hw(x, 1, 2)), [img.copy()]))
    s_crop = dot_sum((2, 3, 2, 3))
    cases.append(("crop_hw", lambda x: s_crop(T.crop_hw(x, 3, 2)), [img.copy()]))
    s_cat = dot_sum((5, 3))
    cases.append(("concat_rows", lambda x, y: s_cat(T.concat_rows([x, y])),
                  [rng.normal(0, 1, (2, 3)), rng.normal(0, 1, (3, 3))]))
    return cases
