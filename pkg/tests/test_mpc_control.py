from collections import Counter

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from endonav.geometry_core import ArcShape, InvalidShapeError
from endonav.jacobian_learning import ImageJacobianEstimator, ShapeJacobianEstimator
from endonav.mpc_control import (MpcConfig, MpcProblem, ShiftError, ftl_shift, insertion_samples,
                                 join_parts, predict_energy, predict_feature, solve_mpc,
                                 solve_vision_mpc, velocity_control)
from endonav.proprioception import StiffnessParams, elastic_energy
from oracles import circle_arc, ftl_block, helix

seeds = st.integers(0, 2**32 - 1)


class ConstantJacobian:
    """Estimator stand-in with the same Jacobian everywhere."""

    def __init__(self, J):
        self.J = np.asarray(J, dtype=float)

    def jacobian(self, q):
        q = np.asarray(q, dtype=float)
        return np.broadcast_to(self.J, q.shape[:-1] + self.J.shape)


def straight(n, spacing=5.0, z0=0.0):
    z = z0 + spacing * np.arange(n)
    return np.stack([0 * z, 0 * z, z], axis=1)


# --- velocity_control -------------------------------------------------------

def test_zero_error_gives_zero_command():
    J = np.random.default_rng(0).normal(size=(2, 3))
    np.testing.assert_array_equal(velocity_control(np.zeros(2), J), 0.0)


def test_row_orthonormal_jacobian():
    J = [[1, 0, 0], [0, 1, 0]]
    np.testing.assert_allclose(velocity_control([1.0, 2.0], J, mu_c=1.0, damping=0.0),
                               [-1, -2, 0], atol=1e-15)


def test_zero_jacobian_with_damping():
    out = velocity_control([3.0, -4.0], np.zeros((2, 3)), damping=0.05)
    assert np.all(np.isfinite(out)) and np.all(out == 0)


def test_rate_limit_keeps_direction():
    raw = velocity_control([10.0, 5.0], np.eye(2), mu_c=1.0, damping=0.0)
    lim = velocity_control([10.0, 5.0], np.eye(2), mu_c=1.0, damping=0.0, rate_limits=(1.0, 1.0))
    assert np.max(np.abs(lim)) == pytest.approx(1.0)
    np.testing.assert_allclose(lim / np.linalg.norm(lim), raw / np.linalg.norm(raw))


# --- predict_feature --------------------------------------------------------

def test_feature_constant_without_motion():
    est = ImageJacobianEstimator(seed=1, init_scale=1.0)
    out = predict_feature([5.0, 7.0], est, [0.1, 0.1, 50.0], np.zeros((6, 3)), 0.05)
    np.testing.assert_array_equal(out, np.tile([5.0, 7.0], (6, 1)))


def test_feature_linear_rollout():
    J0 = np.array([[1.0, 2.0, 0.1], [-3.0, 0.5, 0.0]])
    qd = np.array([0.2, -0.1, 4.0])
    out = predict_feature([1.0, 2.0], ConstantJacobian(J0), np.zeros(3), np.tile(qd, (5, 1)), 0.05)
    k = np.arange(1, 6)[:, None]
    np.testing.assert_allclose(out, [1.0, 2.0] + k * (J0 @ qd) * 0.05, atol=1e-13)
    one = predict_feature([1.0, 2.0], ConstantJacobian(J0), np.zeros(3), qd[None], 0.05)
    assert one.shape == (1, 2)


# --- follow-the-leader shift ------------------------------------------------

def test_shift_examples():
    a = np.array([[0, 0, 1.0], [0, 0, 2.0], [0, 0, 3.0]])
    f = np.array([[0, 0, -1.0]])
    np.testing.assert_array_equal(ftl_shift(a, f, 0), f)
    np.testing.assert_array_equal(ftl_shift(a, f, 1), [[0, 0, -1.0], [0, 0, 1.0]])
    with pytest.raises(ShiftError):
        ftl_shift(a, f, 4)


@pytest.mark.parametrize("m_a", range(1, 7))
@pytest.mark.parametrize("m_f", range(0, 7))
def test_shift_matches_block_matrix(m_a, m_f):
    rng = np.random.default_rng(m_a * 10 + m_f)
    a, f = rng.normal(size=(m_a, 3)), rng.normal(size=(m_f, 3))
    for m in range(m_a + 1):
        np.testing.assert_array_equal(ftl_shift(a, f, m), ftl_block(a, f, m))


@given(seeds)
def test_shift_composes_and_conserves_samples(seed):
    rng = np.random.default_rng(seed)
    a = rng.normal(size=(rng.integers(1, 25), 3))
    f = rng.normal(size=(rng.integers(0, 25), 3))
    m1 = int(rng.integers(0, len(a) + 1))
    m2 = int(rng.integers(0, len(a) - m1 + 1))
    once = ftl_shift(a, f, m1 + m2)
    twice = ftl_shift(a[m1:], ftl_shift(a, f, m1), m2)
    np.testing.assert_array_equal(once, twice)
    before = Counter(map(tuple, np.vstack([a, f])))
    after = Counter(map(tuple, np.vstack([a[m1 + m2:], once])))
    assert before == after


@given(st.lists(st.floats(0, 40), min_size=1, max_size=200))
def test_insertion_quantization_does_not_drift(speeds):
    carry, total = 0.0, 0
    for v in speeds:
        m, carry = insertion_samples(v, 0.05, 5.0, carry)
        total += m
        assert m >= 0 and -0.5 <= carry <= 0.5 + 1e-12
    assert abs(total - sum(speeds) * 0.05 / 5.0) <= 0.5 + 1e-9


# --- predict_energy ---------------------------------------------------------

def test_straight_collinear_parts_have_no_energy():
    E = predict_energy(straight(10, z0=100.0), straight(5, z0=75.0), straight(15),
                       StiffnessParams(1.0, 1.0))
    assert E == 0.0


@pytest.mark.parametrize("cut", [(4, 9), (10, 10), (3, 30)])
def test_energy_of_split_body_matches_whole(cut):
    k = StiffnessParams(2.0, 3.0)
    whole = ArcShape(helix(50.0, 20.0, 200.0, 5.0), 5.0)
    s = whole.samples
    parts = s[cut[1]:], s[cut[0]:cut[1]], s[:cut[0]]
    assert predict_energy(*parts, k, spacing=5.0) == pytest.approx(elastic_energy(whole, k).E,
                                                                   rel=1e-9, abs=1e-12)


def test_bending_active_part_adds_arc_energy():
    ds, kappa = 1.0, 0.005
    passive = straight(201, ds)
    bent = circle_arc(1 / kappa, 120.0, ds) + passive[-1]
    flat = straight(121, ds, z0=passive[-1, 2])
    k = StiffnessParams(1.0, 1.0)
    dE = (predict_energy(bent[1:], None, passive, k, spacing=ds)
          - predict_energy(flat[1:], None, passive, k, spacing=ds))
    assert dE == pytest.approx(0.5 * kappa ** 2 * 120, rel=0.01)


def test_discontinuous_parts_rejected():
    with pytest.raises(InvalidShapeError):
        join_parts(straight(5), None, straight(5, z0=40.0), 5.0)


# --- solve_mpc --------------------------------------------------------------

def tracking_problem(rng, J=None, y=None):
    est = ImageJacobianEstimator(seed=int(rng.integers(1 << 30)), init_scale=1.0) \
        if J is None else ConstantJacobian(J)
    return MpcProblem(y=np.asarray(y if y is not None else rng.uniform(0, 32, 2)),
                      y_d=np.array([15.5, 15.5]), q=np.array([0.1, -0.2, 100.0]), est_c=est,
                      tick=int(rng.integers(1000)))


def energy_problem(rng, y=None):
    prob = tracking_problem(rng, y=y)
    prob.est_s = ShapeJacobianEstimator(75, seed=int(rng.integers(1 << 30)), init_scale=0.01)
    arc = circle_arc(300.0, 120.0, 5.0)
    prob.s_a_local = arc
    prob.base_pos = np.array([0.0, 0.0, 200.0])
    prob.base_R = np.eye(3)
    prob.s_p = straight(41)
    prob.stiffness = StiffnessParams(1e4, 1e4, 0.03)
    return prob


@settings(max_examples=20)
@given(seeds)
def test_vision_solver_is_the_zero_energy_weight_solver(seed):
    rng = np.random.default_rng(seed)
    prob = energy_problem(rng)
    cfg = MpcConfig(lam_scale=0.0, horizon=8, seed=seed % 1000)
    a, b = solve_vision_mpc(prob, MpcConfig(lam_scale=0.3, horizon=8, seed=seed % 1000)), \
        solve_mpc(prob, cfg)
    np.testing.assert_array_equal(a.velocities, b.velocities)
    assert a.objective == b.objective and a.degraded == b.degraded


def test_zero_error_and_straight_shapes_stay_put():
    prob = MpcProblem(y=np.array([15.5, 15.5]), y_d=np.array([15.5, 15.5]),
                      q=np.array([0.0, 0.0, 50.0]), est_c=ImageJacobianEstimator(seed=3),
                      est_s=ShapeJacobianEstimator(75, init_scale=0.0),
                      s_a_local=straight(25), base_pos=np.array([0, 0, 50.0]),
                      base_R=np.eye(3), s_p=straight(11), stiffness=StiffnessParams(1.0, 1.0))
    sol = solve_mpc(prob, MpcConfig(horizon=5))
    np.testing.assert_array_equal(sol.first, 0.0)
    assert sol.objective == 0.0


@given(seeds)
def test_discrete_candidates_brute_force(seed):
    rng = np.random.default_rng(seed)
    J = rng.normal(size=(2, 3)) * [1, 1, 0.05]
    prob = tracking_problem(rng, J=J)
    cfg = MpcConfig(horizon=4, lam_scale=0.0)
    cands = rng.uniform([-1, -1, 0], [1, 1, 40], (int(rng.integers(2, 9)), 3))
    costs = []
    for u in cands:
        c = 0.0
        for k in range(cfg.horizon + 1):
            y = prob.y + (k + 1) * (J @ u) * cfg.dt
            c += cfg.eta_scale / 2 ** k * float(np.sum((y - prob.y_d) ** 2))
        costs.append(c)
    sol = solve_mpc(prob, cfg, candidates=cands)
    np.testing.assert_array_equal(sol.first, cands[int(np.argmin(costs))])
    assert sol.objective == pytest.approx(min(costs), rel=1e-12)


@given(seeds)
def test_first_command_reduces_error(seed):
    rng = np.random.default_rng(seed)
    J = np.zeros((2, 3))
    J[0, 0] = rng.choice([-1, 1]) * rng.uniform(2, 20)
    prob = tracking_problem(rng, J=J, y=[rng.uniform(0, 31), 15.5])
    sol = solve_vision_mpc(prob, MpcConfig(seed=seed % 997))
    e = prob.y - prob.y_d
    assert e @ (J @ sol.first) < 0 or np.allclose(e, 0)


@given(seeds)
def test_single_candidate_zero_horizon_is_velocity_control(seed):
    rng = np.random.default_rng(seed)
    prob = tracking_problem(rng)
    cfg = MpcConfig(horizon=0, candidates=1, iterations=1)
    sol = solve_vision_mpc(prob, cfg)
    e = prob.y - prob.y_d
    qd = velocity_control(e, prob.est_c.jacobian(prob.q)[:, :2], cfg.mu_c, cfg.damping,
                          cfg.rate_limits[:2])
    np.testing.assert_array_equal(sol.first[:2], qd)
    assert sol.velocities.shape == (1, 3) and not sol.degraded


@settings(max_examples=25)
@given(seeds)
def test_emitted_commands_respect_constraints(seed):
    rng = np.random.default_rng(seed)
    prob = energy_problem(rng)
    cfg = MpcConfig(horizon=6, lam_scale=rng.uniform(0, 1), candidates=16, iterations=2,
                    insertion_speed=None if rng.random() < 0.5 else 40.0, seed=seed % 101)
    sol = solve_mpc(prob, cfg)
    assert np.all(sol.velocities[:, 2] >= 0)
    assert np.all(np.abs(sol.velocities) <= np.asarray(cfg.rate_limits) + 1e-12)
    assert sol.energies is not None and np.all(np.isfinite(sol.energies))


@given(seeds)
def test_receding_horizon_error_is_monotone(seed):
    rng = np.random.default_rng(seed)
    J = np.hstack([rng.normal(size=(2, 2)) * 10, np.zeros((2, 1))])
    y = rng.uniform(0, 31, 2)
    cfg = MpcConfig(horizon=6, candidates=24, iterations=3, seed=seed % 89)
    norms = []
    for tick in range(60):
        prob = MpcProblem(y=y, y_d=np.array([15.5, 15.5]), q=np.zeros(3),
                          est_c=ConstantJacobian(J), tick=tick)
        u = solve_vision_mpc(prob, cfg).first
        y = y + J @ u * cfg.dt
        norms.append(float(np.linalg.norm(y - 15.5)))
    tail = np.array(norms[20:])
    assert np.all(np.diff(tail) <= 1e-9 + 1e-6 * tail[:-1])
