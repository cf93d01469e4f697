import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from deepcs import tensor as T
from deepcs.measurement import SamplingConfig, make_measurement_matrix, measure
from deepcs.recurrent import (DivergenceError, RecurrentGates, gate_forward, gd_latent_optimize, init_state,
                              recurrent_step, run_recurrence)
from deepcs.tensor import ShapeError, Tape, Tensor

CFG = SamplingConfig(2, 2, 1, 0.5)  # m = 2, latent 4


def _setup(seed=0, steps=3):
    rng = np.random.default_rng(seed)
    gates = RecurrentGates(CFG.m, CFG.block_entries, steps, rng)
    mm = make_measurement_matrix(rng.standard_normal((1, 1, CFG.block_entries, CFG.m)) * 0.5)
    M = Tensor(rng.standard_normal((2, 3, 3, CFG.m)))
    with T.no_grad():
        run_recurrence(M, gates, _F(mm), steps, train=True)  # records eval statistics
    return gates, mm, M, rng


def _F(mm):
    return lambda z: measure(z, mm)


def _no_bn_out(gates):
    gates.bn_out = lambda x, train, slot=0: x


def _const(value):
    return lambda zh: Tensor(np.full(zh.shape[:3] + (zh.shape[3] // 2,), value, dtype=zh.data.dtype))


def test_init_state_shapes_and_zero_propagation():
    rng = np.random.default_rng(0)
    gates = RecurrentGates(19, 192, 5, rng)
    st0 = init_state(Tensor(np.zeros((1, 2, 2, 19))), gates, train=True)
    assert st0.Z.shape == (1, 2, 2, 192) and st0.step == 0
    assert not st0.Z.data.any()  # zero biases carry zeros through
    with pytest.raises(ShapeError):
        init_state(Tensor(np.zeros((1, 2, 2, 20))), gates)


def test_i0_frozen_over_many_steps():
    gates, mm, M, _ = _setup(steps=20)
    before = M.data.copy()
    state = init_state(M, gates)
    for _ in range(20):
        state = recurrent_step(state, gates, _F(mm))
    assert state.I0 is M
    np.testing.assert_array_equal(state.I0.data, before)
    with pytest.raises(IndexError, match="exceeds"):
        recurrent_step(state, gates, _F(mm))


def test_reset_one_update_zero_keeps_state():
    gates, mm, M, _ = _setup()
    gates.R, gates.U = _const(1.0), _const(0.0)
    _no_bn_out(gates)
    state = init_state(M, gates)
    nxt = recurrent_step(state, gates, _F(mm))
    np.testing.assert_array_equal(nxt.Z.data, state.Z.data)


def test_reset_zero_update_one_replaces_state():
    gates, mm, M, _ = _setup()
    real_C = gates.init.C
    gates.R, gates.U = _const(0.0), _const(1.0)
    _no_bn_out(gates)
    state = init_state(M, gates)
    nxt = recurrent_step(state, gates, _F(mm))
    residual = T.sub(measure(state.Z, mm), M)
    H = real_C(gates.S(gates.bn_in(residual, False, slot=1)))
    np.testing.assert_allclose(nxt.Z.data, H.data, rtol=1e-6, atol=1e-9)


@settings(max_examples=15, deadline=None)
@given(st.floats(0.0, 1.0), st.integers(0, 100))
def test_convex_combination_when_gates_sum_to_one(r, seed):
    gates, mm, M, _ = _setup(seed)
    gates.R, gates.U = _const(r), _const(1.0 - r)
    _no_bn_out(gates)
    state = init_state(M, gates)
    H = gates.C(gates.S(gates.bn_in(T.sub(measure(state.Z, mm), M), False, slot=1)))
    z = recurrent_step(state, gates, _F(mm)).Z.data
    lo, hi = np.minimum(state.Z.data, H.data), np.maximum(state.Z.data, H.data)
    assert (z >= lo - 1e-9).all() and (z <= hi + 1e-9).all()


def test_run_recurrence_trace_and_determinism():
    gates, mm, M, _ = _setup()
    z1, trace = run_recurrence(M, gates, _F(mm), 1)
    assert len(trace) == 2
    assert trace[0] == pytest.approx(float(((measure(init_state(M, gates).Z, mm).data - M.data) ** 2).sum()))
    zT, tr, states = run_recurrence(M, gates, _F(mm), 3, return_states=True)
    assert len(states) == 4 and len(tr) == 4
    again, _ = run_recurrence(M, gates, _F(mm), 3)
    np.testing.assert_array_equal(zT.data, again.data)
    g2, mm2, M2, _ = _setup()
    np.testing.assert_array_equal(run_recurrence(M2, g2, _F(mm2), 3)[0].data, zT.data)
    with pytest.raises(ValueError):
        run_recurrence(M, gates, _F(mm), 0)


def test_gate_shapes_ranges_and_arity():
    rng = np.random.default_rng(1)
    gates = RecurrentGates(48, 192, 5, rng)
    m = Tensor(rng.standard_normal((2, 2, 2, 48)) * 5)
    z = Tensor(rng.standard_normal((2, 2, 2, 192)) * 5)
    assert gate_forward(gates, "C", m).shape == (2, 2, 2, 192)
    assert gate_forward(gates, "S", m).shape == (2, 2, 2, 48)
    for g in "RU":
        out = gate_forward(gates, g, z, z).data
        assert out.shape == (2, 2, 2, 192) and (out > 0).all() and (out < 1).all()
    with pytest.raises(TypeError, match="takes 2"):
        gate_forward(gates, "R", z)
    with pytest.raises(TypeError):
        gate_forward(gates, "S", m, m)
    with pytest.raises(ValueError):
        gate_forward(gates, "Q", m)
    for mod in gates.gate_modules().values():
        for p in mod.parameters():
            if p.name.endswith("weight"):
                assert p.shape[:2] == (1, 1)


def test_scaling_gate_bounded_across_input_scale():
    rng = np.random.default_rng(2)
    gates = RecurrentGates(8, 16, 2, rng)
    bound = np.abs(gates.S.gain.data)
    x = Tensor(rng.standard_normal((1, 3, 3, 8)))
    small, big = gate_forward(gates, "S", x).data, gate_forward(gates, "S", T.scale(x, 10.0)).data
    assert (np.abs(small) <= bound).all() and (np.abs(big) <= bound).all()
    assert np.abs(big - small).max() < 2 * bound.max()


def test_block_decoupling():
    gates, mm, M, rng = _setup()
    state = init_state(M, gates)
    base = recurrent_step(state, gates, _F(mm)).Z.data
    z = state.Z.data.copy()
    z[1, 2, 0] += rng.standard_normal(z.shape[3])
    state.Z = Tensor(z)
    moved = recurrent_step(state, gates, _F(mm)).Z.data
    changed = np.abs(moved - base).max(axis=3) > 0
    assert changed[1, 2, 0] and changed.sum() == 1
    # the same holds for the full recurrence
    M2 = M.data.copy()
    M2[0, 1, 1] += 1.0
    a = run_recurrence(M, gates, _F(mm), 3)[0].data
    b = run_recurrence(Tensor(M2), gates, _F(mm), 3)[0].data
    diff = np.abs(a - b).max(axis=3) > 0
    assert diff[0, 1, 1] and diff.sum() == 1


def test_gate_weights_used_at_every_step():
    gates, mm, M, _ = _setup(steps=3)
    w = gates.R.l1.weight.value
    with Tape() as tape:
        z, _ = run_recurrence(M, gates, _F(mm), 3, train=True)
        loss = T.total(T.square(z))
    uses = [r for r in tape.records if any(i is w for i in r.inputs)]
    assert len(uses) == 3
    assert np.abs(tape.gradients(loss, [w])[id(w)]).sum() > 0


def test_gd_orthonormal_least_squares(f64):
    rng = np.random.default_rng(3)
    q, _ = np.linalg.qr(rng.standard_normal((4, 4)))
    mm = make_measurement_matrix(q.reshape(1, 1, 4, 4))
    m = Tensor(rng.standard_normal((2, 3, 3, 4)))
    z = gd_latent_optimize(m, lambda z: z, _F(mm), 500, 0.5, np.zeros((2, 3, 3, 4)))
    want = m.data @ q.T  # measurement is z @ W, so the solution is m W^T
    assert np.abs(z.data - want).max() < 1e-4


def test_gd_consistent_system_objective_to_zero(f64):
    rng = np.random.default_rng(4)
    A = rng.standard_normal((1, 1, 4, 4)) * 0.3 + np.eye(4).reshape(1, 1, 4, 4)
    G = lambda z: T.conv2d(z, Tensor(A))
    mm = make_measurement_matrix(rng.standard_normal((1, 1, 4, 2)) * 0.5)
    z_star = rng.standard_normal((1, 3, 3, 4))
    with T.no_grad():
        m = measure(G(Tensor(z_star)), mm)
    trace = []
    gd_latent_optimize(m, G, _F(mm), 2000, 0.5, np.zeros_like(z_star), trace=trace)
    assert trace[-1] < 1e-6
    assert all(b <= a for a, b in zip(trace, trace[1:]))


def test_gd_errors(f64):
    rng = np.random.default_rng(5)
    mm = make_measurement_matrix(rng.standard_normal((1, 1, 4, 2)))
    m = Tensor(rng.standard_normal((1, 2, 2, 2)))
    z0 = np.zeros((1, 2, 2, 4))
    with pytest.raises(ValueError):
        gd_latent_optimize(m, lambda z: z, _F(mm), 0, 0.1, z0)
    with pytest.raises(ValueError):
        gd_latent_optimize(m, lambda z: z, _F(mm), 5, 0.0, z0)
    with pytest.raises(DivergenceError, match="smaller lr"):
        gd_latent_optimize(m, lambda z: z, _F(mm), 5, 1e4, z0)
