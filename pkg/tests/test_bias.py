"""Position-bias providers: coordinate transforms, tables, MLP, bicubic."""

import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from helpers import fd_max_rel_err
from swinlab import tensor as T
from swinlab.bias import (
    CPBNet,
    ParamTable,
    _transform_1d,
    bicubic_transfer,
    cpb_bias,
    extrapolation_ratio,
    make_cpb_net,
    make_param_table,
    param_bias,
    precompute_bias,
    rel_coords,
)
from swinlab.errors import ParameterError
from swinlab.geometry import relative_index
from swinlab.tensor import Tensor


# ---------------------------------------------------------------------------
# Coordinate transforms

def test_log_transform_endpoints():
    # Largest offsets of 8- and 16-wide windows under sign(d) * log(1 + |d|).
    assert abs(_transform_1d(np.asarray(7), "log") - 2.0794) < 5e-4
    assert abs(_transform_1d(np.asarray(15), "log") - 2.7726) < 5e-4
    assert abs(_transform_1d(np.asarray(-7), "log") + 2.0794) < 5e-4


def test_transforms_are_odd_and_fix_zero():
    d = np.arange(-9, 10)
    for spacing in ("linear", "log"):
        t = _transform_1d(d, spacing)
        assert np.array_equal(t, -_transform_1d(-d, spacing))
        assert t[9] == 0.0
        assert np.all(np.diff(t) > 0)  # strictly increasing


def test_log_compresses_beyond_one():
    # Unnormalized: log1p(d) < d for every integer offset d >= 1.
    d = np.arange(1, 40, dtype=np.float64)
    assert np.all(_transform_1d(d, "log") < d)


def test_normalized_log_compresses_only_outside_trained_range():
    # Dividing by the trained endpoint makes both spacings hit 1.0 at
    # |delta| = M_train - 1; inside that range log is the LARGER coordinate,
    # beyond it the smaller. That regionality is the whole point.
    M_train = 8
    lin_div, log_div = 7.0, math.log(8.0)
    for delta in (1, 3, 6):
        lin = delta / lin_div
        log = math.log1p(delta) / log_div
        assert log > lin
    for delta in (8, 11, 15):
        lin = delta / lin_div
        log = math.log1p(delta) / log_div
        assert log < lin


def test_rel_coords_layout_and_normalization():
    c = rel_coords(4, 4, "linear", "train_window").data
    assert c.shape == (49, 2)
    # Row (dr + 3) * 7 + (dc + 3) holds (dr, dc) / 3.
    for dr, dc in ((-3, -3), (0, 0), (2, -1), (3, 3)):
        row = (dr + 3) * 7 + (dc + 3)
        assert np.allclose(c[row], [dr / 3.0, dc / 3.0], atol=1e-15)
    assert c.min() == -1.0 and c.max() == 1.0


def test_rel_coords_log_normalization_endpoint():
    c = rel_coords(8, 8, "log", "train_window").data
    assert np.isclose(abs(c).max(), 1.0, atol=1e-15)
    raw = rel_coords(8, 8, "log", "none").data
    assert np.isclose(abs(raw).max(), math.log(8.0), atol=1e-12)


def test_rel_coords_transfer_extends_beyond_unit_range():
    c = rel_coords(8, 16, "log", "train_window").data
    assert np.isclose(abs(c).max(), math.log(16.0) / math.log(8.0), atol=1e-12)
    lin = rel_coords(8, 16, "linear", "train_window").data
    assert np.isclose(abs(lin).max(), 15.0 / 7.0, atol=1e-12)


def test_shared_offsets_keep_identical_coordinates_across_transfer():
    # Offsets present in both the 8- and 12-wide tables must map to the same
    # MLP input after transfer, so learned behavior carries over unchanged.
    c8 = rel_coords(8, 8, "log").data
    c12 = rel_coords(8, 12, "log").data
    for dr in range(-7, 8):
        for dc in range(-7, 8):
            r8 = (dr + 7) * 15 + (dc + 7)
            r12 = (dr + 11) * 23 + (dc + 11)
            assert np.array_equal(c8[r8], c12[r12])


def test_rel_coords_validation():
    with pytest.raises(ParameterError):
        rel_coords(0, 4, "linear")
    with pytest.raises(ParameterError):
        rel_coords(1, 4, "linear")  # normalization undefined for M_train < 2
    with pytest.raises(ParameterError):
        rel_coords(4, 4, "cubic")
    with pytest.raises(ParameterError):
        rel_coords(4, 4, "linear", normalize="sometimes")
    # Without normalization a 1-wide training window is fine.
    assert rel_coords(1, 3, "linear", "none").shape == (25, 2)


# ---------------------------------------------------------------------------
# Extrapolation ratio

def test_extrapolation_ratio_8_to_16_exact():
    # Independent arithmetic: (T(15) - T(7)) / T(7).
    lin = extrapolation_ratio(8, 16, "linear")
    assert lin == (15.0 - 7.0) / 7.0
    assert abs(lin - 8.0 / 7.0) < 1e-15
    log = extrapolation_ratio(8, 16, "log")
    expect = (math.log(16.0) - math.log(8.0)) / math.log(8.0)
    assert abs(log - expect) < 1e-15
    assert abs(log - 1.0 / 3.0) < 1e-12  # log2 / log8 is exactly 1/3


def test_extrapolation_ratio_no_growth_cases():
    assert extrapolation_ratio(8, 8, "linear") == 0.0
    assert extrapolation_ratio(8, 4, "log") == 0.0
    with pytest.raises(ParameterError):
        extrapolation_ratio(1, 4, "linear")


@given(st.integers(2, 16), st.integers(3, 48))
@settings(max_examples=60, deadline=None)
def test_log_ratio_always_below_linear_ratio(m_train, m_target):
    if m_target <= m_train:
        return
    lin = extrapolation_ratio(m_train, m_target, "linear")
    log = extrapolation_ratio(m_train, m_target, "log")
    assert 0.0 < log < lin


def test_ratio_monotone_in_target_window():
    vals = [extrapolation_ratio(8, m, "log") for m in (9, 12, 16, 24, 32)]
    assert all(b > a for a, b in zip(vals, vals[1:]))


# ---------------------------------------------------------------------------
# ParamTable gather

def test_param_bias_gather_matches_index():
    rng = np.random.default_rng(20)
    t = make_param_table(rng, M=3, heads=2, std=0.5)
    idx = relative_index(3)
    B = param_bias(t, idx).data  # [2, 9, 9]
    for h in range(2):
        for i in range(9):
            for j in range(9):
                assert B[h, i, j] == t.table.data[idx.index[i, j], h]


def test_param_bias_offset_usage_counts():
    # Offset (dr, dc) occurs (M - |dr|) * (M - |dc|) times in an M x M window.
    M = 4
    idx = relative_index(M)
    counts = np.bincount(idx.index.reshape(-1), minlength=(2 * M - 1) ** 2)
    k = 0
    for dr in range(-(M - 1), M):
        for dc in range(-(M - 1), M):
            assert counts[k] == (M - abs(dr)) * (M - abs(dc))
            k += 1


def test_param_table_validation():
    with pytest.raises(ParameterError):
        ParamTable(table=Tensor(np.zeros((10, 2))), M=3)  # needs 25 rows
    t = make_param_table(np.random.default_rng(0), M=3, heads=2)
    with pytest.raises(ParameterError):
        param_bias(t, relative_index(4))


def test_param_bias_gradient_flows_to_table():
    rng = np.random.default_rng(21)
    table = rng.normal(0, 1, (9, 2))
    r = Tensor(rng.normal(0, 1, (2, 4, 4)))

    def fn(tab):
        b = param_bias(ParamTable(table=tab, M=2), relative_index(2))
        return T.reduce_sum(T.mul(b, r))

    tens = Tensor(table, requires_grad=True)
    with T.Tape() as tape:
        tape.backward(fn(tens))
    # Each table row's gradient is the sum of cotangent entries at its pairs.
    idx = relative_index(2).index
    for k in range(9):
        for h in range(2):
            expect = r.data[h][idx == k].sum()
            assert np.isclose(tens.grad[k, h], expect, atol=1e-12)


# ---------------------------------------------------------------------------
# CPB net

def _manual_cpb(net: CPBNet, dr, dc, M_train):
    """Per-pair oracle: plain numpy forward for one offset."""
    x = np.array([dr, dc], dtype=np.float64)
    x = np.sign(x) * np.log1p(np.abs(x)) if net.spacing == "log" else x
    if net.normalize == "train_window":
        x = x / (math.log(M_train) if net.spacing == "log" else (M_train - 1))
    h = np.maximum(x @ net.w1.data + net.b1.data, 0.0)
    return h @ net.w2.data + net.b2.data


def test_cpb_bias_matches_per_pair_oracle():
    rng = np.random.default_rng(22)
    net = make_cpb_net(rng, hidden=9, heads=3, spacing="log")
    M = 3
    with T.no_tape():
        B = cpb_bias(net, M, M, 3).data  # [3, 9, 9]
    idx = relative_index(M).index
    for i in range(9):
        for j in range(9):
            dr = i // M - j // M
            dc = i % M - j % M
            ref = _manual_cpb(net, dr, dc, M)
            assert np.allclose(B[:, i, j], ref, atol=1e-12), (i, j)
            assert idx[i, j] == (dr + M - 1) * (2 * M - 1) + (dc + M - 1)


def test_cpb_bias_linear_spacing_oracle():
    rng = np.random.default_rng(23)
    net = make_cpb_net(rng, hidden=5, heads=2, spacing="linear")
    with T.no_tape():
        B = cpb_bias(net, 2, 2, 2).data
    ref = _manual_cpb(net, 1, -1, 2)
    assert np.allclose(B[:, 2, 1], ref, atol=1e-12)  # patch 2=(1,0), patch 1=(0,1)


def test_cpb_bias_head_mismatch():
    net = make_cpb_net(np.random.default_rng(0), hidden=4, heads=2, spacing="log")
    with pytest.raises(ParameterError):
        cpb_bias(net, 4, 4, 3)


def test_cpb_net_validation():
    z = lambda *s: Tensor(np.zeros(s))
    with pytest.raises(ParameterError):
        CPBNet(w1=z(3, 4), b1=z(4), w2=z(4, 2), b2=z(2), spacing="log")
    with pytest.raises(ParameterError):
        CPBNet(w1=z(2, 4), b1=z(4), w2=z(4, 2), b2=z(2), spacing="elliptic")


def test_cpb_gradient_flows_to_all_net_params():
    rng = np.random.default_rng(24)
    w1 = rng.normal(0, 0.5, (2, 6))
    b1 = rng.normal(0, 0.5, (6,))
    w2 = rng.normal(0, 0.5, (6, 2))
    b2 = rng.normal(0, 0.5, (2,))
    r = Tensor(rng.normal(0, 1, (2, 4, 4)))

    def fn(a, b, c, d):
        net = CPBNet(w1=a, b1=b, w2=c, b2=d, spacing="log")
        return T.reduce_sum(T.mul(cpb_bias(net, 2, 2, 2), r))

    err = fd_max_rel_err(fn, [w1, b1, w2, b2], rng, probes=6)
    assert err < 1e-4


def test_zeroed_output_layer_gives_zero_bias():
    rng = np.random.default_rng(25)
    net = make_cpb_net(rng, hidden=8, heads=2, spacing="log")
    net.w2.data[...] = 0.0
    net.b2.data[...] = 0.0
    with T.no_tape():
        B = cpb_bias(net, 4, 4, 2).data
    assert np.all(B == 0.0)


# ---------------------------------------------------------------------------
# Precompute equivalence

@pytest.mark.parametrize("M", [2, 7, 8])
def test_precompute_reproduces_live_bias_bit_exactly(M):
    rng = np.random.default_rng(26)
    net = make_cpb_net(rng, hidden=16, heads=4, spacing="log")
    with T.no_tape():
        live = cpb_bias(net, M, M, 4).data
        stored = param_bias(precompute_bias(net, M), relative_index(M)).data
    assert np.array_equal(live, stored)


def test_precompute_with_anchor_matches_transferred_live_path():
    rng = np.random.default_rng(27)
    net = make_cpb_net(rng, hidden=16, heads=2, spacing="log")
    with T.no_tape():
        live = cpb_bias(net, 4, 8, 2).data  # trained at 4, evaluated at 8
        stored = param_bias(precompute_bias(net, 8, M_train=4), relative_index(8)).data
    assert np.array_equal(live, stored)


# ---------------------------------------------------------------------------
# Bicubic table transfer

def test_bicubic_identity_when_size_unchanged():
    rng = np.random.default_rng(28)
    t = make_param_table(rng, M=4, heads=3, std=1.0)
    out = bicubic_transfer(t, 4)
    assert np.array_equal(out.table.data, t.table.data)
    assert out.table.data is not t.table.data  # a copy, not a view


def test_bicubic_preserves_constant_tables():
    t = ParamTable(table=Tensor(np.full((49, 2), 3.25)), M=4)
    out = bicubic_transfer(t, 8)
    assert out.M == 8 and out.table.shape == (225, 2)
    assert np.allclose(out.table.data, 3.25, atol=1e-12)


def test_bicubic_reproduces_linear_ramps_exactly():
    # Values linear in (dr, dc) stay linear under the resampler; the
    # linear-extrapolated ghost cells make this exact at the borders too.
    M, M_new = 4, 7
    n, n_new = 2 * M - 1, 2 * M_new - 1
    r = np.arange(n, dtype=np.float64)
    ramp = (2.0 * r[:, None] - 0.7 * r[None, :] + 1.5).reshape(n * n, 1)
    out = bicubic_transfer(ParamTable(table=Tensor(ramp), M=M), M_new)
    pos = np.arange(n_new) * (n - 1) / (n_new - 1)
    expect = (2.0 * pos[:, None] - 0.7 * pos[None, :] + 1.5)
    assert np.allclose(out.table.data.reshape(n_new, n_new), expect, atol=1e-10)


def test_bicubic_corners_are_aligned():
    rng = np.random.default_rng(29)
    t = make_param_table(rng, M=3, heads=2, std=1.0)
    out = bicubic_transfer(t, 6)
    n_old, n_new = 5, 11
    g_old = t.table.data.reshape(n_old, n_old, 2)
    g_new = out.table.data.reshape(n_new, n_new, 2)
    for r in (0, -1):
        for c in (0, -1):
            assert np.allclose(g_new[r, c], g_old[r, c], atol=1e-12)


def test_bicubic_heads_resample_independently():
    rng = np.random.default_rng(30)
    t = make_param_table(rng, M=3, heads=2, std=1.0)
    both = bicubic_transfer(t, 5).table.data
    for h in range(2):
        solo = bicubic_transfer(
            ParamTable(table=Tensor(t.table.data[:, h:h + 1].copy()), M=3), 5)
        assert np.array_equal(both[:, h], solo.table.data[:, 0])


def test_bicubic_downsample_and_validation():
    rng = np.random.default_rng(31)
    t = make_param_table(rng, M=8, heads=1, std=1.0)
    down = bicubic_transfer(t, 4)
    assert down.table.shape == (49, 1)
    with pytest.raises(ParameterError):
        bicubic_transfer(t, 1)
