import numpy as np
import pytest

from deepcs import tensor as T
from deepcs.gradcheck import GradCase, _jitter_biases, check_case
from deepcs.measurement import SamplingConfig
from deepcs.reconstructor import NUM_LAYERS, SKIP_LAYERS, ReconWidths, build_network, forward_stage, reconstruct
from deepcs.tensor import ShapeError, Tensor

CFG = SamplingConfig(8, 8, 3, 0.25)
SMALL = ReconWidths(8, 6, 4, 5, 3, 3)


def _latent(rng, n=1, hb=2, wb=2, L=192):
    return Tensor(rng.standard_normal((n, hb, wb, L)).astype(np.float32))


def test_layer_structure():
    net = build_network(CFG)
    assert len(net.specs) == NUM_LAYERS == 21
    assert [s.index for s in net.specs] == list(range(1, 22))
    adds = [s.index for s in net.specs if s.kind == "residual_add"]
    assert adds == list(SKIP_LAYERS) and len(adds) == 5
    for s in net.specs:
        if s.skip_from is not None:
            assert s.skip_from == s.index - 3
    l1, l2, l3 = net.specs[:3]
    assert l1.kernel == l2.kernel == (1, 1) and l1.bn and l2.bn
    assert l1.cout == l2.cout == 192
    assert l3.kind == "conv_transpose" and l3.kernel == (8, 8) and l3.stride == (8, 8) and l3.cout == 3
    assert [s.kernel for s in net.specs[3:6]] == [(11, 11), (7, 7), (1, 1)]
    assert net.specs[5].relu
    assert net.convs[1].kernel_shape[:2] == (1, 1)


def test_layer3_shape_and_element_count(rng):
    net = build_network(CFG, SMALL)
    Z = _latent(rng)
    out = forward_stage(net, Z, 3, train=True)
    assert out.shape == (1, 16, 16, 3)
    assert out.data.size == Z.data.size


def test_reconstruct_shape_and_nonnegative(rng):
    net = build_network(CFG, SMALL)
    for _ in range(3):
        x = reconstruct(net, _latent(rng, 1, 4, 4), train=True)
        assert x.shape == (1, 32, 32, 3)
        assert x.data.min() >= 0
    with pytest.raises(ShapeError):
        reconstruct(net, Tensor(np.zeros((1, 2, 2, 100))))


def test_forward_stage_consistency_and_range(rng):
    net = build_network(CFG, SMALL)
    Z = _latent(rng)
    full = reconstruct(net, Z, train=True).data
    np.testing.assert_array_equal(T.relu(forward_stage(net, Z, 21, train=True)).data, full)
    assert forward_stage(net, Z, 6, train=True).data.min() >= 0
    for bad in (0, 22, -1):
        with pytest.raises(IndexError):
            forward_stage(net, Z, bad)


def test_residual_identity_when_tail_zeroed(rng):
    net = build_network(CFG, SMALL)
    for idx in range(7, 22):
        for p in net.layer_parameters(idx):
            p.assign(np.zeros(p.shape))
    Z = _latent(rng, 2)
    stage6 = forward_stage(net, Z, 6, train=True).data
    np.testing.assert_array_equal(reconstruct(net, Z, train=True).data, np.maximum(stage6, 0))


def test_stage2_block_permutation_equivariance(rng):
    net = build_network(CFG, SMALL)
    Z = _latent(rng, 1, 3, 4)
    d = Z.data.reshape(1, 12, 192)
    perm = rng.permutation(12)
    Zp = Tensor(d[:, perm].reshape(1, 3, 4, 192))
    # batch statistics are permutation invariant, so train mode works too
    for train in (True, False):
        if not train:
            forward_stage(net, Z, 2, train=True)
        a = forward_stage(net, Z, 2, train=train).data.reshape(1, 12, 192)
        b = forward_stage(net, Zp, 2, train=train).data.reshape(1, 12, 192)
        np.testing.assert_allclose(b, a[:, perm], atol=1e-5)


def test_deterministic_initialization():
    a, b = build_network(CFG, SMALL, 7), build_network(CFG, SMALL, 7)
    for p, q in zip(a.parameters(), b.parameters()):
        np.testing.assert_array_equal(p.data, q.data)
    c = build_network(CFG, SMALL, 8)
    assert any(not np.array_equal(p.data, q.data) for p, q in zip(a.parameters(), c.parameters()))


def test_widths_validation():
    for kw in ({"enrich4": 0}, {"residual": -1}, {"k4": 4}, {"k_res": 2}):
        with pytest.raises(ValueError):
            ReconWidths(**kw)


def test_layer_table_matches_parameter_count():
    net = build_network(CFG)
    rows = net.layer_table((1, 4, 4, 192))
    assert len(rows) == 21
    assert rows[2]["out_shape"] == (1, 32, 32, 3)
    assert rows[-1]["out_shape"] == (1, 32, 32, 3)
    assert sum(r["params"] for r in rows) == sum(p.data.size for p in net.parameters())


def test_every_layer_gradient_finite_difference():
    with T.precision(64):
        cfg = SamplingConfig(2, 2, 1, 0.5)
        rng = np.random.default_rng(11)
        net = build_network(cfg, ReconWidths(3, 3, 3, 3, 3, 3), rng)
        _jitter_biases(net.parameters(), rng)
        target = rng.random((2, 6, 6, 1))
        fn = lambda z: T.mse(reconstruct(net, z, True), Tensor(target))
        weights = [p for p in net.parameters() if p.name.endswith(".weight")]
        assert len(weights) == 21
        case = GradCase("mse(reconstruct)", fn, [rng.standard_normal((2, 3, 3, 4))], weights, max_entries=2)
        res = check_case(case)
    assert res.rel_error < 1e-3
