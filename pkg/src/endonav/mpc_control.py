"""Steering policies: damped pseudo-inverse servoing and a sampling-based MPC.

The MPC searches constant motor-velocity candidates over the horizon.  Each
candidate is rolled out through the learned image Jacobian (feature
prediction) and, when energy weights are non-zero, through the learned
shape Jacobian plus follow-the-leader bookkeeping (energy prediction).
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .geometry_core import (ArcShape, InvalidShapeError, discrete_curvature_torsion,
                       sample_weights)
from .proprioception import StiffnessParams, energy_terms


class ShiftError(ValueError):
    pass


# ---------------------------------------------------------------------------
# configuration
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class MpcConfig:
    horizon: int = 20
    dt: float = 0.05
    rate_limits: tuple = (1.0, 1.0, 40.0)
    mu_c: float = 0.5
    damping: float = 0.05
    eta_scale: float = 1.0
    lam_scale: float = 1.0
    candidates: int = 48
    iterations: int = 3
    elites: int = 8
    spread_tol: float = 0.25          # elite std / admissible span still counted as converged
    insertion_speed: float | None = None   # pin qd3 to a gated feed-forward when set
    insertion_gate: float = 10.0      # px; no insertion at or beyond this error
    energy_steps: int | None = None   # lam_k = 0 for k >= energy_steps
    seed: int = 0

    def __post_init__(self):
        if self.horizon < 0 or not self.dt > 0:
            raise ValueError("horizon must be >= 0 and dt > 0")
        if self.eta_scale < 0 or self.lam_scale < 0:
            raise ValueError("objective weights must be non-negative")
        if self.candidates < 1 or self.iterations < 1 or self.elites < 1:
            raise ValueError("optimizer budget must be positive")
        if self.energy_steps is not None and self.energy_steps < 0:
            raise ValueError("energy_steps must be >= 0")

    @property
    def eta(self) -> np.ndarray:
        return self.eta_scale / 2.0 ** np.arange(self.horizon + 1)

    @property
    def lam(self) -> np.ndarray:
        lam = self.lam_scale / 2.0 ** (np.arange(self.horizon + 1) + 1)
        if self.energy_steps is not None:
            lam[self.energy_steps:] = 0.0
        return lam


@dataclass(frozen=True)
class MpcSolution:
    velocities: np.ndarray     # (horizon + 1, 3)
    features: np.ndarray       # (horizon + 1, 2), y(t+k+1)
    energies: np.ndarray | None  # (steps + 1,), anchor first
    objective: float
    degraded: bool = False

    @property
    def first(self) -> np.ndarray:
        return self.velocities[0].copy()


# ---------------------------------------------------------------------------
# baseline controller
# ---------------------------------------------------------------------------

def damped_pinv(J, damping: float) -> np.ndarray:
    J = np.asarray(J, dtype=float)
    m = J.shape[0]
    return J.T @ np.linalg.solve(J @ J.T + damping ** 2 * np.eye(m), np.eye(m))


def velocity_control(e, J, mu_c: float = 0.5, damping: float = 0.05, rate_limits=None):
    """``-mu_c * J^+ e`` with a damped pseudo-inverse.

    When a component exceeds its rate limit the whole vector is scaled down,
    so the commanded direction is kept.
    """
    e = np.asarray(e, dtype=float)
    if damping == 0.0:
        qd = -mu_c * (np.linalg.pinv(np.asarray(J, dtype=float)) @ e)
    else:
        qd = -mu_c * (damped_pinv(J, damping) @ e)
    if rate_limits is not None:
        lim = np.asarray(rate_limits, dtype=float)[: len(qd)]
        over = np.max(np.abs(qd) / lim)
        if over > 1.0:
            qd = qd / over
    return qd


def insertion_feedforward(e, speed: float, gate: float) -> float:
    """Insertion speed that fades to zero as the tracking error approaches ``gate``."""
    return float(speed * min(max(1.0 - float(np.linalg.norm(e)) / gate, 0.0), 1.0))


# ---------------------------------------------------------------------------
# predictions
# ---------------------------------------------------------------------------

def predict_feature(y_now, est, q_now, qdots, dt: float) -> np.ndarray:
    """Feature rollout ``y(t+k+1) = y(t+k) + J(q(t+k)) qd(t+k) dt``.

    ``qdots`` is (horizon + 1, 3) or batched as (..., horizon + 1, 3).
    Returns the matching (..., horizon + 1, 2) feature sequence.
    """
    qd = np.asarray(qdots, dtype=float)
    batch = qd.shape[:-2]
    steps = qd.shape[-2]
    y = np.broadcast_to(np.asarray(y_now, dtype=float), batch + (2,)).copy()
    q = np.broadcast_to(np.asarray(q_now, dtype=float), batch + (3,)).copy()
    out = np.empty(batch + (steps, 2))
    for k in range(steps):
        J = est.jacobian(q)
        y = y + np.einsum("...ij,...j->...i", J, qd[..., k, :]) * dt
        q = q + qd[..., k, :] * dt
        out[..., k, :] = y
    return out


def ftl_shift(s_a, s_f, m: int) -> np.ndarray:
    """Move the ``m`` most proximal active samples onto the distal end of ``s_f``.

    ``s_a`` runs proximal to distal; ``s_f`` may be empty.
    """
    s_a = np.asarray(s_a, dtype=float).reshape(-1, 3)
    s_f = np.asarray(s_f, dtype=float).reshape(-1, 3)
    if m < 0 or m > len(s_a):
        raise ShiftError(f"cannot shift {m} samples out of a {len(s_a)}-sample active part")
    return np.vstack([s_f, s_a[:m]])


def insertion_samples(qd3: float, dt: float, spacing: float, carry: float = 0.0):
    """Whole samples inserted this step and the remainder carried forward."""
    x = carry + qd3 * dt / spacing
    m = int(math.floor(x + 0.5))
    return max(m, 0), x - max(m, 0)


def _junction_parts(s_p, s_f, s_a, spacing):
    parts = [np.asarray(p, dtype=float).reshape(-1, 3) for p in (s_p, s_f, s_a) if p is not None]
    parts = [p for p in parts if len(p)]
    return parts


def join_parts(s_p, s_f, s_a, spacing: float, max_gap: float = 1.5) -> np.ndarray:
    """Concatenate passive, follow-the-leader and active samples.

    A passive endpoint closer than half a spacing to the next part is dropped
    so no near-duplicate samples reach the curvature stencil.
    """
    parts = _junction_parts(s_p, s_f, s_a, spacing)
    out = []
    for i, p in enumerate(parts):
        if out:
            prev = out[-1]
            gap = float(np.linalg.norm(p[0] - prev[-1]))
            # the tolerance applies to the measured gap, not the one left after the drop
            if gap > max_gap * spacing + 1e-9:
                raise InvalidShapeError(f"junction gap {gap:.3f} mm exceeds "
                                        f"{max_gap} x spacing ({spacing} mm)")
            if gap < 0.5 * spacing and len(prev) > 1:
                out[-1] = prev[:-1]
        out.append(p)
    return np.vstack(out)


def predict_energy(s_a_pred, s_f_pred, s_p_pred, k: StiffnessParams = StiffnessParams(),
                   spacing: float | None = None) -> float:
    """Elastic energy of the three-part body ``s_p + s_f + s_a`` (proximal to distal)."""
    if spacing is None:
        spacing = s_a_pred.spacing if isinstance(s_a_pred, ArcShape) else 5.0
    pts = join_parts(_points(s_p_pred), _points(s_f_pred), _points(s_a_pred), spacing)
    if len(pts) < 5:
        raise InvalidShapeError("predicted body has fewer than 5 samples")
    E_b, E_t = energy_terms(pts, k)
    return float(E_b + E_t)


def _points(part):
    if part is None:
        return None
    return part.samples if isinstance(part, ArcShape) else np.asarray(part, dtype=float)


class _EnergyModel:
    """Energy of ``fixed + tail`` bodies where only the tail varies.

    Samples whose curvature/torsion stencil lies entirely in the fixed prefix
    are integrated once; each query re-evaluates only the last few prefix
    samples together with the tail.
    """

    HALO = 4

    def __init__(self, prefix, k: StiffnessParams):
        self.k = k
        p = np.asarray(prefix, dtype=float).reshape(-1, 3)
        self.split = len(p) >= 2 * self.HALO
        if self.split:
            kappa, tau = discrete_curvature_torsion(p)
            w = sample_weights(p)
            tau = tau * k.torsion_gate(kappa)
            keep = len(p) - self.HALO + 1       # samples 0 .. n-4 are final
            self.base = float(np.sum(0.5 * (k.EI * kappa[:keep] ** 2 + k.GJ * tau[:keep] ** 2)
                                     * w[:keep]))
            self.halo = p[keep - 2:]            # two stencil samples plus the open ones
            self.skip = 2
        else:
            self.base = 0.0
            self.halo = p
            self.skip = 0

    def __call__(self, tails) -> np.ndarray:
        """Energies for tails of shape (..., n_tail, 3)."""
        tails = np.asarray(tails, dtype=float)
        halo = np.broadcast_to(self.halo, tails.shape[:-2] + self.halo.shape)
        pts = np.concatenate([halo, tails], axis=-2)
        kappa, tau = discrete_curvature_torsion(pts)
        w = sample_weights(pts)
        tau = tau * self.k.torsion_gate(kappa)
        dens = 0.5 * (self.k.EI * kappa ** 2 + self.k.GJ * tau ** 2) * w
        return self.base + np.sum(dens[..., self.skip:], axis=-1)




# ---------------------------------------------------------------------------
# MPC problem and solver
# ---------------------------------------------------------------------------

@dataclass
class MpcProblem:
    """Everything the solver needs at one control tick (frozen snapshots)."""

    y: np.ndarray
    y_d: np.ndarray
    q: np.ndarray
    est_c: object
    est_s: object = None
    s_a_local: np.ndarray | None = None     # (n_a, 3) in the active-base frame
    base_pos: np.ndarray | None = None
    base_R: np.ndarray | None = None
    s_p: np.ndarray | None = None           # predicted passive samples (proximal -> distal)
    spacing: float = 5.0
    carry: float = 0.0
    stiffness: StiffnessParams = field(default_factory=StiffnessParams)
    tick: int = 0


def _frames_at(local, m: int) -> np.ndarray:
    """Rotations (old base frame) of the active frames at sample ``m``, batched.

    The tangent comes from a central difference; the rotation is the minimal
    one from the base axis, which is how a bending arc carries its frame.
    """
    n = local.shape[-2]
    t = local[:, min(m + 1, n - 1)] - local[:, max(m - 1, 0)]
    t = t / np.linalg.norm(t, axis=-1, keepdims=True)
    K = np.zeros(t.shape[:-1] + (3, 3))
    K[:, 0, 2], K[:, 1, 2] = t[:, 0], t[:, 1]
    K[:, 2, 0], K[:, 2, 1] = -t[:, 0], -t[:, 1]
    c = t[:, 2]
    # axis*sin = e_z x t; R = I + K + K^2 / (1 + c)
    return np.eye(3) + K + (K @ K) / (1.0 + c)[:, None, None]


def _energy_rollout(prob: MpcProblem, cands: np.ndarray, cfg: MpcConfig):
    """Predicted energies (N, steps + 1) for constant candidates (N, 3).

    Column 0 is the anchor: the energy of the current (filtered passive +
    sensed active) body.  ``steps`` is the horizon length, cut short by
    ``cfg.energy_steps``.
    """
    N = len(cands)
    K = cfg.horizon + 1
    if cfg.energy_steps is not None:
        K = min(K, cfg.energy_steps)
    dt = cfg.dt
    local0 = np.asarray(prob.s_a_local, dtype=float)
    n_a = len(local0)
    prefix = prob.s_p if prob.s_p is not None else np.zeros((0, 3))
    body0 = join_parts(prefix, None, from_local(local0, prob.base_pos, prob.base_R),
                       prob.spacing)
    n_fixed = max(len(body0) - n_a, 0)
    model = _EnergyModel(body0[:n_fixed], prob.stiffness)
    out = np.empty((N, K + 1))
    out[:, 0] = model(body0[n_fixed:])[()]

    # shapes of the active part in the base frame, per candidate and step
    locals_ = np.empty((N, K, n_a, 3))
    q = np.broadcast_to(np.asarray(prob.q, dtype=float), (N, 3)).copy()
    cur = np.broadcast_to(local0, (N, n_a, 3)).copy()
    for k in range(K):
        J = prob.est_s.jacobian(q)                     # (N, 3 n_a, 2)
        cur = cur + (np.einsum("nrj,nj->nr", J, cands[:, :2]) * dt).reshape(N, n_a, 3)
        q = q + cands * dt
        locals_[:, k] = cur

    # candidates sharing an insertion pattern share the base bookkeeping
    patterns = {}
    for i, qd3 in enumerate(cands[:, 2]):
        ms, carry = [], prob.carry
        for _ in range(K):
            m, carry = insertion_samples(float(qd3), dt, prob.spacing, carry)
            ms.append(min(m, n_a - 1))
        patterns.setdefault(tuple(ms), []).append(i)

    for ms, idx in patterns.items():
        idx = np.array(idx)
        pos = np.broadcast_to(np.asarray(prob.base_pos, dtype=float), (len(idx), 3)).copy()
        R = np.broadcast_to(np.asarray(prob.base_R, dtype=float), (len(idx), 3, 3)).copy()
        world_prev = from_local_batch(local0[None].repeat(len(idx), 0), pos, R)
        s_f = np.zeros((len(idx), 0, 3))
        by_len = {}      # steps with equal tail length are scored in one call
        for k, m in enumerate(ms):
            if m > 0:
                s_f = np.concatenate([s_f, world_prev[:, :m]], axis=1)
                prev_local = locals_[idx, k - 1] if k > 0 else local0[None].repeat(len(idx), 0)
                pos = world_prev[:, m].copy()
                R = R @ _frames_at(prev_local, m)
            world = from_local_batch(locals_[idx, k], pos, R)
            tail = np.concatenate([s_f, world], axis=1) if s_f.shape[1] else world
            by_len.setdefault(tail.shape[1], []).append((k, tail))
            world_prev = world
        for steps in by_len.values():
            ks = [k + 1 for k, _ in steps]
            out[idx[:, None], ks] = model(np.stack([t for _, t in steps], axis=1))
    return out


def from_local(points, base_pos, base_R):
    return np.asarray(points) @ np.asarray(base_R).T + np.asarray(base_pos)


def from_local_batch(points, pos, R):
    return np.einsum("nij,npj->npi", R, points) + pos[:, None, :]


def _objective(prob: MpcProblem, cands: np.ndarray, cfg: MpcConfig):
    K = cfg.horizon + 1
    seq = np.repeat(cands[:, None, :], K, axis=1)
    feats = predict_feature(prob.y, prob.est_c, prob.q, seq, cfg.dt)
    err = feats - np.asarray(prob.y_d, dtype=float)
    cost = np.einsum("k,nk->n", cfg.eta, np.sum(err * err, axis=-1))
    energies = None
    if np.any(cfg.lam > 0):
        energies = _energy_rollout(prob, cands, cfg)
        flow = np.diff(energies, axis=1)
        cost = cost + np.einsum("k,nk->n", cfg.lam[: flow.shape[1]], flow * flow)
    return cost, feats, energies


def _bounds(prob: MpcProblem, cfg: MpcConfig):
    lim = np.asarray(cfg.rate_limits, dtype=float)
    lo, hi = -lim.copy(), lim.copy()
    lo[2] = 0.0
    if cfg.insertion_speed is not None:
        v = insertion_feedforward(np.asarray(prob.y) - np.asarray(prob.y_d),
                                  cfg.insertion_speed, cfg.insertion_gate)
        v = min(v, lim[2])
        lo[2] = hi[2] = v
    return lo, hi


def solve_mpc(prob: MpcProblem, cfg: MpcConfig, candidates=None) -> MpcSolution:
    """Minimize tracking plus energy-flow cost over constant velocity candidates.

    With ``candidates`` given, exactly those (N, 3) sequences are evaluated.
    Otherwise a seeded cross-entropy search runs; its first candidate in every
    round is the damped pseudo-inverse command, so the result is never worse
    than the baseline controller under the model.  Candidate order is fixed
    before evaluation, so results depend only on ``(cfg.seed, prob.tick)``.
    """
    lo, hi = _bounds(prob, cfg)
    e = np.asarray(prob.y, dtype=float) - np.asarray(prob.y_d, dtype=float)
    J = prob.est_c.jacobian(prob.q)
    base = np.zeros(3)
    base[:2] = velocity_control(e, J[:, :2], cfg.mu_c, cfg.damping, cfg.rate_limits[:2])
    base[2] = lo[2] if lo[2] == hi[2] else 0.0
    base = np.clip(base, lo, hi)

    if candidates is not None:
        cands = np.clip(np.atleast_2d(np.asarray(candidates, dtype=float)), lo, hi)
        cost, feats, energies = _objective(prob, cands, cfg)
        i = int(np.argmin(cost))
        return _solution(cands[i], feats[i], None if energies is None else energies[i],
                         float(cost[i]), False, cfg)

    rng = np.random.default_rng([cfg.seed, prob.tick])
    free = hi > lo
    span = np.where(free, hi - lo, 0.0)
    mean = base.copy()
    std = 0.5 * span
    best = (math.inf, None, None, None)
    elite_spread = math.inf
    for _ in range(cfg.iterations):
        draws = rng.standard_normal((cfg.candidates, 3))
        cands = np.clip(mean + draws * std, lo, hi)
        cands[0] = base
        cands[:, ~free] = lo[~free]
        cost, feats, energies = _objective(prob, cands, cfg)
        order = np.argsort(cost, kind="stable")
        i = int(order[0])
        if cost[i] < best[0]:
            best = (float(cost[i]), cands[i].copy(), feats[i].copy(),
                    None if energies is None else energies[i].copy())
        elite = cands[order[: min(cfg.elites, len(cands))]]
        mean = elite.mean(axis=0)
        std = elite.std(axis=0)
        if np.any(free):
            elite_spread = float(np.max(std[free] / span[free]))
        else:
            elite_spread = 0.0
        if cfg.candidates == 1:
            elite_spread = 0.0
            break
    degraded = elite_spread > cfg.spread_tol or not math.isfinite(best[0])
    return _solution(best[1], best[2], best[3], best[0], degraded, cfg)


def solve_vision_mpc(prob: MpcProblem, cfg: MpcConfig, candidates=None) -> MpcSolution:
    """The tracking-only problem: :func:`solve_mpc` with every energy weight at zero."""
    from dataclasses import replace
    return solve_mpc(prob, replace(cfg, lam_scale=0.0), candidates)


def _solution(u, feats, energies, cost, degraded, cfg: MpcConfig) -> MpcSolution:
    vel = np.repeat(np.asarray(u, dtype=float)[None], cfg.horizon + 1, axis=0)
    if np.any(vel[:, 2] < 0):
        raise AssertionError("insertion velocity must be non-negative")
    return MpcSolution(velocities=vel, features=np.asarray(feats), objective=cost,
                       energies=None if energies is None else np.asarray(energies),
                       degraded=bool(degraded))
