"""Autodiff engine: forward oracles, gradient checks, tape discipline."""

import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from helpers import fd_max_rel_err, op_cases
from swinlab import tensor as T
from swinlab.errors import NumericsError, ParameterError, ShapeError, UsageError
from swinlab.tensor import Tape, Tensor


# ---------------------------------------------------------------------------
# Forward oracles

def test_matmul_against_triple_loop():
    rng = np.random.default_rng(0)
    a = rng.normal(0, 1, (3, 4))
    b = rng.normal(0, 1, (4, 5))
    out = T.matmul(Tensor(a), Tensor(b)).data
    ref = np.zeros((3, 5))
    for i in range(3):
        for j in range(5):
            acc = 0.0
            for k in range(4):
                acc += a[i, k] * b[k, j]
            ref[i, j] = acc
    assert np.allclose(out, ref, atol=1e-12)


def test_matmul_batched_against_loop():
    rng = np.random.default_rng(1)
    a = rng.normal(0, 1, (2, 3, 4))
    b = rng.normal(0, 1, (2, 4, 5))
    out = T.matmul(Tensor(a), Tensor(b)).data
    for n in range(2):
        assert np.allclose(out[n], a[n] @ b[n], atol=1e-12)


def test_softmax_matches_formula_and_sums_to_one():
    rng = np.random.default_rng(2)
    x = rng.normal(0, 3, (4, 7))
    out = T.softmax_lastdim(Tensor(x)).data
    ref = np.exp(x) / np.exp(x).sum(axis=-1, keepdims=True)
    assert np.allclose(out, ref, atol=1e-12)
    assert np.allclose(out.sum(axis=-1), 1.0, atol=1e-12)


def test_softmax_stable_at_huge_magnitudes():
    x = np.array([[1e4, 1e4 - 5.0, 0.0]])
    out = T.softmax_lastdim(Tensor(x)).data
    # Shifting by the max leaves softmax unchanged; compute the small version.
    ref = np.exp(x - 1e4) / np.exp(x - 1e4).sum()
    assert np.allclose(out, ref, atol=1e-12)


def test_logsumexp_matches_direct_formula():
    rng = np.random.default_rng(3)
    x = rng.normal(0, 2, (5, 6))
    out = T.logsumexp_lastdim(Tensor(x)).data
    ref = np.log(np.exp(x).sum(axis=-1))
    assert np.allclose(out, ref, atol=1e-12)
    big = np.array([[1e4, 1e4]])
    assert np.isclose(T.logsumexp_lastdim(Tensor(big)).data[0], 1e4 + math.log(2.0))


def test_layer_norm_matches_formula():
    rng = np.random.default_rng(4)
    x = rng.normal(3, 2, (2, 5))
    g = rng.normal(1, 0.2, (5,))
    b = rng.normal(0, 0.2, (5,))
    out = T.layer_norm(Tensor(x), Tensor(g), Tensor(b)).data
    mu = x.mean(-1, keepdims=True)
    var = ((x - mu) ** 2).mean(-1, keepdims=True)
    ref = (x - mu) / np.sqrt(var + 1e-5) * g + b
    assert np.allclose(out, ref, atol=1e-12)


def test_layer_norm_output_statistics():
    rng = np.random.default_rng(5)
    x = rng.normal(-7, 11, (3, 64))
    ones, zeros = Tensor(np.ones(64)), Tensor(np.zeros(64))
    out = T.layer_norm(Tensor(x), ones, zeros).data
    assert np.allclose(out.mean(-1), 0.0, atol=1e-12)
    assert np.allclose(out.std(-1), 1.0, atol=1e-3)  # eps shifts variance slightly


def test_layer_norm_rejects_bad_eps_and_shapes():
    x = Tensor(np.zeros((2, 4)))
    with pytest.raises(ParameterError):
        T.layer_norm(x, Tensor(np.ones(4)), Tensor(np.zeros(4)), eps=0.0)
    with pytest.raises(ShapeError):
        T.layer_norm(x, Tensor(np.ones(3)), Tensor(np.zeros(4)))


def test_gelu_matches_erf_formula():
    from scipy.special import erf
    x = np.linspace(-4, 4, 33)
    out = T.gelu(Tensor(x)).data
    ref = 0.5 * x * (1.0 + erf(x / np.sqrt(2.0)))
    assert np.allclose(out, ref, atol=1e-14)
    assert abs(T.gelu(Tensor(np.array([0.0]))).data[0]) == 0.0


def test_normalize_rows_unit_norm_and_zero_row():
    rng = np.random.default_rng(6)
    x = rng.normal(0, 2, (4, 6))
    out = T.normalize_rows(Tensor(x)).data
    assert np.allclose(np.linalg.norm(out, axis=-1), 1.0, atol=1e-12)
    z = T.normalize_rows(Tensor(np.zeros((1, 3)))).data
    assert np.all(z == 0.0)


def test_take_pick_roll_pad_crop_concat_forward():
    x = np.arange(12.0).reshape(4, 3)
    assert np.array_equal(T.take_rows(Tensor(x), [3, 1]).data, x[[3, 1]])
    assert np.array_equal(T.pick_lastdim(Tensor(x), [2, 0, 1, 2]).data,
                          np.array([2.0, 3.0, 7.0, 11.0]))
    img = np.arange(16.0).reshape(1, 4, 4, 1)
    rolled = T.roll2d(Tensor(img), 1, -1).data
    assert np.array_equal(rolled, np.roll(img, (1, -1), axis=(1, 2)))
    padded = T.pad_hw(Tensor(img), 2, 1).data
    assert padded.shape == (1, 6, 5, 1)
    assert np.all(padded[:, 4:, :, :] == 0) and np.all(padded[:, :, 4:, :] == 0)
    assert np.array_equal(T.crop_hw(Tensor(padded), 4, 4).data, img)
    cat = T.concat_rows([Tensor(x), Tensor(x[:1])]).data
    assert np.array_equal(cat, np.concatenate([x, x[:1]]))


@given(st.integers(0, 2**32 - 1))
@settings(max_examples=25, deadline=None)
def test_reshape_permute_round_trip(seed):
    rng = np.random.default_rng(seed)
    shape = tuple(int(rng.integers(1, 5)) for _ in range(3))
    x = rng.normal(0, 1, shape)
    t = Tensor(x)
    back = T.reshape(T.reshape(t, (-1 if False else int(np.prod(shape)),)), shape)
    assert np.array_equal(back.data, x)
    axes = tuple(rng.permutation(3))
    inv = tuple(int(i) for i in np.argsort(axes))
    assert np.array_equal(T.permute(T.permute(t, axes), inv).data, x)


@given(st.integers(0, 2**32 - 1))
@settings(max_examples=25, deadline=None)
def test_softmax_rows_sum_to_one_property(seed):
    rng = np.random.default_rng(seed)
    x = rng.normal(0, float(rng.uniform(0.1, 50)), (3, int(rng.integers(1, 9))))
    out = T.softmax_lastdim(Tensor(x)).data
    assert np.all(out >= 0)
    assert np.allclose(out.sum(axis=-1), 1.0, atol=1e-12)


# ---------------------------------------------------------------------------
# Gradient checks (finite differences are the oracle)

@pytest.mark.parametrize("name,fn,arrays",
                         op_cases(np.random.default_rng(42)),
                         ids=lambda v: v if isinstance(v, str) else "")
def test_op_gradients_match_finite_differences(name, fn, arrays):
    err = fd_max_rel_err(fn, arrays, np.random.default_rng(7), probes=6)
    assert err < 1e-4, f"{name}: max rel grad error {err:.2e}"


def test_matmul_layernorm_softmax_full_fd():
    # Exhaustive per-element FD on the three structurally trickiest vjps.
    rng = np.random.default_rng(8)
    r = Tensor(rng.normal(0, 1, (2, 3)))
    a, b = rng.normal(0, 1, (2, 4)), rng.normal(0, 1, (4, 3))
    err = fd_max_rel_err(lambda x, y: T.reduce_sum(T.mul(T.matmul(x, y), r)),
                         [a, b], rng, full=True)
    assert err < 1e-4
    g, bb = rng.normal(1, 0.2, (3,)), rng.normal(0, 0.2, (3,))
    r2 = Tensor(rng.normal(0, 1, (2, 3)))
    err = fd_max_rel_err(
        lambda x, gg, bbb: T.reduce_sum(T.mul(T.layer_norm(x, gg, bbb), r2)),
        [rng.normal(0, 1, (2, 3)), g, bb], rng, full=True)
    assert err < 1e-4
    err = fd_max_rel_err(lambda x: T.reduce_sum(T.mul(T.softmax_lastdim(x), r2)),
                         [rng.normal(0, 2, (2, 3))], rng, full=True)
    assert err < 1e-4


def test_clamp_subgradient_is_zero_at_boundary():
    x = Tensor(np.array([0.01, 0.0099999, 0.5, 0.02]), requires_grad=True)
    with Tape() as tape:
        y = T.reduce_sum(T.clamp_min(x, 0.01))
        tape.backward(y)
    # Strictly-above passes gradient; at or below the floor it is cut.
    assert np.array_equal(x.grad, np.array([0.0, 0.0, 1.0, 1.0]))


def test_maximum_routes_ties_to_first_argument():
    a = Tensor(np.array([1.0, 2.0]), requires_grad=True)
    b = Tensor(np.array([1.0, 5.0]), requires_grad=True)
    with Tape() as tape:
        y = T.reduce_sum(T.maximum(a, b))
        tape.backward(y)
    assert np.array_equal(a.grad, np.array([1.0, 0.0]))
    assert np.array_equal(b.grad, np.array([0.0, 1.0]))


# ---------------------------------------------------------------------------
# Accumulation correctness (aliased gradient buffers must never be mutated)

def test_gradient_accumulates_through_aliased_add():
    x = Tensor(np.array([3.0]), requires_grad=True)
    with Tape() as tape:
        y = T.add(x, x)          # vjp returns the same buffer twice
        z = T.add(y, y)
        tape.backward(T.reduce_sum(z))
    assert np.array_equal(x.grad, np.array([4.0]))


def test_shared_intermediate_fanout_gradient():
    x = Tensor(np.array([2.0]), requires_grad=True)
    with Tape() as tape:
        h = T.mul(x, x)              # x^2
        out = T.add(T.add(h, h), h)  # 3 x^2
        tape.backward(T.reduce_sum(out))
    assert np.allclose(x.grad, np.array([12.0]))  # d/dx 3x^2 = 6x


def test_grad_accumulates_across_tapes():
    x = Tensor(np.array([1.0, 2.0]), requires_grad=True)
    for _ in range(2):
        with Tape() as tape:
            tape.backward(T.reduce_sum(T.mul(x, x)))
    assert np.array_equal(x.grad, 2 * 2 * x.data)  # two passes of 2x


def test_no_grad_for_constant_inputs():
    x = Tensor(np.ones(3), requires_grad=True)
    c = Tensor(np.ones(3))
    with Tape() as tape:
        tape.backward(T.reduce_sum(T.mul(x, c)))
    assert c.grad is None
    assert np.array_equal(x.grad, np.ones(3))


# ---------------------------------------------------------------------------
# Tape discipline and error surfaces

def test_backward_requires_scalar():
    x = Tensor(np.ones((2, 2)), requires_grad=True)
    with Tape() as tape:
        y = T.mul(x, x)
        with pytest.raises(UsageError):
            tape.backward(y)


def test_tape_is_single_use():
    x = Tensor(np.ones(2), requires_grad=True)
    with Tape() as tape:
        y = T.reduce_sum(x)
        tape.backward(y)
    with pytest.raises(UsageError):
        tape.backward(y)


def test_backward_from_rejects_detached_output():
    x = Tensor(np.ones(2), requires_grad=True)
    with Tape() as tape:
        _dead = T.reduce_sum(x)
    with T.no_tape():
        other = T.reduce_sum(x)
    with pytest.raises(UsageError):
        tape.backward(other)


def test_no_tape_suppresses_recording():
    x = Tensor(np.ones(2), requires_grad=True)
    with Tape() as tape:
        with T.no_tape():
            _y = T.reduce_sum(T.mul(x, x))
    assert tape.nodes == []


def test_nan_production_raises_numerics_error_naming_op():
    a = Tensor(np.array([1.0]))
    b = Tensor(np.array([0.0]))
    with pytest.raises(NumericsError) as ei:
        T.div(a, b)
    assert ei.value.op == "div"
    with pytest.raises(NumericsError):
        Tensor(np.array([np.nan]))


def test_shape_errors():
    with pytest.raises(ShapeError):
        T.matmul(Tensor(np.ones((2, 3))), Tensor(np.ones((4, 2))))
    with pytest.raises(ShapeError):
        T.take_rows(Tensor(np.ones((2, 2))), [2])
    with pytest.raises(ShapeError):
        T.pick_lastdim(Tensor(np.ones((2, 2))), [0, 2])
    with pytest.raises(ShapeError):
        T.crop_hw(Tensor(np.ones((1, 2, 2, 1))), 3, 1)
    with pytest.raises(ParameterError):
        T.pad_hw(Tensor(np.ones((1, 2, 2, 1))), -1, 0)


# ---------------------------------------------------------------------------
# Activation checkpointing at the tape level

def _segment(x):
    return T.gelu(T.matmul(x, x))


def test_checkpoint_segment_gradients_bit_equal_plain():
    rng = np.random.default_rng(9)
    data = rng.normal(0, 0.5, (4, 4))
    grads = []
    for use_ckpt in (False, True):
        x = Tensor(data.copy(), requires_grad=True)
        with Tape() as tape:
            y = T.checkpoint_segment(_segment, x) if use_ckpt else _segment(x)
            tape.backward(T.reduce_sum(y))
        grads.append(x.grad.copy())
    assert np.array_equal(grads[0], grads[1])


def test_checkpoint_segment_recomputes_forward_ops():
    rng = np.random.default_rng(10)
    data = rng.normal(0, 0.5, (4, 4))
    counts = []
    for use_ckpt in (False, True):
        x = Tensor(data.copy(), requires_grad=True)
        T.reset_peaks()
        with Tape() as tape:
            y = T.checkpoint_segment(_segment, x) if use_ckpt else _segment(x)
            tape.backward(T.reduce_sum(y))
        counts.append(T.counter_snapshot()["ops_executed"])
    assert counts[1] > counts[0]  # forward ran twice under checkpointing


def test_checkpoint_segment_without_tape_is_transparent():
    x = Tensor(np.eye(3))
    with T.no_tape():
        y = T.checkpoint_segment(_segment, x)
        ref = _segment(x)
    assert np.array_equal(y.data, ref.data)


# ---------------------------------------------------------------------------
# Instrumentation and initializers

def test_live_and_peak_counters_move():
    T.reset_peaks()
    base = T.counter_snapshot()
    keep = [Tensor(np.zeros(1000)) for _ in range(3)]
    snap = T.counter_snapshot()
    assert snap["live_tensors"] >= base["live_tensors"] + 3
    assert snap["peak_elements"] >= base["live_elements"] + 3000
    del keep
    after = T.counter_snapshot()
    assert after["live_elements"] <= snap["live_elements"] - 3000


def test_ops_counter_counts_primitives():
    T.reset_peaks()
    a = Tensor(np.ones(4))
    _ = T.add(a, a)
    _ = T.mul(a, a)
    assert T.counter_snapshot()["ops_executed"] == 2


def test_trunc_normal_respects_bounds_and_determinism():
    rng = np.random.default_rng(11)
    x = T.trunc_normal(rng, (2000,), std=0.02)
    assert np.all(np.abs(x) <= 0.04 + 1e-15)
    y = T.trunc_normal(np.random.default_rng(11), (2000,), std=0.02)
    assert np.array_equal(x, y)


def test_kaiming_uniform_bound():
    rng = np.random.default_rng(12)
    x = T.kaiming_uniform(rng, (500, 8), fan_in=8)
    assert np.all(np.abs(x) <= np.sqrt(6.0 / 8))
    assert np.abs(x).max() > 0.5 * np.sqrt(6.0 / 8)  # actually fills the range
