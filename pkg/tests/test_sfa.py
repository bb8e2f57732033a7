import numpy as np
import pytest

from ecfusion import numerics as nx
from ecfusion.grid import offset_to_flat
from ecfusion.selftest import conv_loop, cost_volume_loop, warp_loop
from ecfusion.sfa import SfaParams, align_and_fuse, compute_cost_volumes, estimate_flow, fuse, warp


def test_uniform_heatmaps_give_nc_c_squared_inside():
    c, nc = 0.3, 3
    h = np.full((6, 6, nc), c)
    cp, ci = compute_cost_volumes(h, h, 2)
    assert np.allclose(cp.value[3, 3], nc * c * c, rtol=0, atol=1e-15)
    assert np.array_equal(cp.value, ci.value)


def test_one_hot_neighbour_lands_on_its_offset():
    hp, hi = np.zeros((5, 5, 3)), np.zeros((5, 5, 3))
    hp[2, 2, 1] = 1.0
    hi[3, 2, 1] = 1.0
    cp, _ = compute_cost_volumes(hp, hi, 4)
    want = np.zeros(16)
    want[offset_to_flat(1, 0, 4)] = 1.0
    assert np.array_equal(cp.value[2, 2], want)


@pytest.mark.parametrize("q", [2, 4])
def test_cost_volume_matches_loop_oracle(q):
    rng = np.random.default_rng(q)
    hp, hi = rng.random((6, 6, 3)), rng.random((6, 6, 3))
    cp, ci = compute_cost_volumes(hp, hi, q)
    assert np.array_equal(cp.value, cost_volume_loop(hp, hi, q))
    assert np.array_equal(ci.value, cost_volume_loop(hi, hp, q))


def test_cost_volume_reciprocity():
    rng = np.random.default_rng(3)
    q = 4
    hp, hi = rng.random((7, 6, 2)), rng.random((7, 6, 2))
    cp, ci = (c.value for c in compute_cost_volumes(hp, hi, q))
    for i in range(7):
        for j in range(6):
            for m in range(-q // 2 + 1, q // 2):
                for n in range(-q // 2 + 1, q // 2):
                    if 0 <= i + m < 7 and 0 <= j + n < 6:
                        assert cp[i, j, offset_to_flat(m, n, q)] == ci[i + m, j + n, offset_to_flat(-m, -n, q)]


def test_cost_volume_entries_bounded_by_class_count():
    rng = np.random.default_rng(4)
    hp, hi = rng.random((5, 5, 3)), rng.random((5, 5, 3))
    cp, _ = compute_cost_volumes(hp, hi, 4)
    assert cp.value.min() >= 0 and cp.value.max() <= 3


def test_cost_volume_shape_errors():
    with pytest.raises(ValueError):
        compute_cost_volumes(np.zeros((4, 4, 2)), np.zeros((4, 4, 3)), 2)
    with pytest.raises(ValueError):
        compute_cost_volumes(np.zeros((4, 4, 2)), np.zeros((4, 4, 2)), 3)


def _inputs(rng, X=6, Y=5, C=4, q=2):
    return (rng.normal(size=(X, Y, C)), rng.random((X, Y, q * q)), rng.normal(size=(X, Y, C)), rng.random((X, Y, q * q)))


def test_zero_init_flow_is_zero_for_any_input():
    rng = np.random.default_rng(5)
    params = SfaParams.init(nx.Rng(0), 4, 2, hidden=6)
    fp, fi = estimate_flow(*_inputs(rng), params)
    assert fp.shape == (6, 5, 2) and fi.shape == (6, 5, 2)
    assert not fp.value.any() and not fi.value.any()


def test_flow_channel_mismatch_rejected():
    rng = np.random.default_rng(6)
    params = SfaParams.init(nx.Rng(0), 4, 4, hidden=6)
    with pytest.raises(ValueError):
        estimate_flow(*_inputs(rng, q=2), params)


def test_flow_channel_split():
    rng = np.random.default_rng(7)
    params = SfaParams.init(nx.Rng(0), 4, 2, hidden=6)
    params.flow_b2.value[...] = [1.0, 2.0, 3.0, 4.0]
    fp, fi = estimate_flow(*_inputs(rng), params)
    assert np.all(fp.value[..., 0] == 1.0) and np.all(fp.value[..., 1] == 2.0)
    assert np.all(fi.value[..., 0] == 3.0) and np.all(fi.value[..., 1] == 4.0)


def test_flow_gradient_wrt_lidar_feature():
    rng = np.random.default_rng(8)
    params = SfaParams.init(nx.Rng(1), 3, 2, hidden=4)
    params.flow_w2.value[...] = rng.normal(0, 0.3, params.flow_w2.shape)
    b_p, c_p, b_i, c_i = _inputs(rng, X=4, Y=4, C=3)
    b_p = nx.leaf(b_p)
    checks = nx.check_gradients(lambda: nx.sum_(estimate_flow(b_p, c_p, b_i, c_i, params)[0]), {"b_p": b_p},
                                n_samples=20, rng=rng)
    assert nx.max_rel_err(checks) <= 1e-4


def test_zero_flow_warp_bit_identical():
    f = np.random.default_rng(9).normal(size=(7, 5, 3))
    assert np.array_equal(warp(f, np.zeros((7, 5, 2))).value, f)


def test_integer_flow_shifts_rows_with_zero_fill():
    f = np.random.default_rng(10).normal(size=(5, 4, 2))
    flow = np.zeros((5, 4, 2))
    flow[..., 0] = 1.0
    out = warp(f, flow).value
    assert np.array_equal(out[:-1], f[1:])
    assert not out[-1].any()


def test_warp_matches_per_cell_oracle():
    rng = np.random.default_rng(11)
    f = rng.normal(size=(8, 8, 2))
    flow = rng.uniform(-1.5, 1.5, (8, 8, 2))
    assert np.abs(warp(f, flow).value - warp_loop(f, flow)).max() <= 1e-12


def test_warp_rejects_mismatched_flow():
    with pytest.raises(ValueError):
        warp(np.zeros((4, 4, 2)), np.zeros((4, 5, 2)))


def test_fuse_shape_and_channel_selection_identity():
    rng = np.random.default_rng(12)
    C = 3
    params = SfaParams.init(nx.Rng(0), C, 2, hidden=4)
    w = np.zeros((3, 3, 2 * C, C))
    w[1, 1, :C, :] = np.eye(C)
    params.fuse_w.value[...] = w
    a, b = rng.normal(size=(5, 4, C)), rng.normal(size=(5, 4, C))
    out = fuse(a, b, params).value
    assert out.shape == (5, 4, C)
    assert np.array_equal(out, a)


def test_fuse_matches_conv_of_concatenation():
    rng = np.random.default_rng(13)
    params = SfaParams.init(nx.Rng(2), 3, 2, hidden=4)
    a, b = rng.normal(size=(5, 4, 3)), rng.normal(size=(5, 4, 3))
    ref = conv_loop(np.concatenate([a, b], axis=2), params.fuse_w.value, params.fuse_b.value)
    assert np.abs(fuse(a, b, params).value - ref).max() <= 1e-12


def test_fresh_params_align_is_identity_and_equals_plain_fusion():
    rng = np.random.default_rng(14)
    params = SfaParams.init(nx.Rng(3), 4, 4, hidden=5)
    b_p, b_i = rng.normal(size=(8, 8, 4)), rng.normal(size=(8, 8, 4))
    h_p, h_i = rng.random((8, 8, 3)), rng.random((8, 8, 3))
    on = align_and_fuse(b_p, b_i, h_p, h_i, params, 4)
    off = align_and_fuse(b_p, b_i, h_p, h_i, params, 4, enabled=False)
    assert np.array_equal(on.aligned_p.value, b_p) and np.array_equal(on.aligned_i.value, b_i)
    assert np.array_equal(on.fused.value, off.fused.value)


def test_fused_output_differentiable_wrt_heatmaps_and_features():
    rng = np.random.default_rng(15)
    params = SfaParams.init(nx.Rng(4), 3, 2, hidden=4)
    params.flow_w2.value[...] = rng.normal(0, 0.2, params.flow_w2.shape)
    params.flow_b2.value[...] = [0.3, -0.4, 0.6, 0.2]
    b_p, b_i = nx.leaf(rng.normal(size=(5, 5, 3))), nx.leaf(rng.normal(size=(5, 5, 3)))
    h_p, h_i = nx.leaf(rng.random((5, 5, 2))), nx.leaf(rng.random((5, 5, 2)))
    wts = rng.normal(size=(5, 5, 3))
    checks = nx.check_gradients(lambda: nx.sum_(align_and_fuse(b_p, b_i, h_p, h_i, params, 2).fused * wts),
                                {"b_p": b_p, "b_i": b_i, "h_p": h_p, "h_i": h_i}, n_samples=30, rng=rng)
    assert nx.max_rel_err(checks) <= 1e-4
