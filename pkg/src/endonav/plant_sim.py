"""Ground-truth endoscope physics, hidden from the controller.

Three motors drive the scope: ``q1, q2`` bend a single constant-curvature
active section, ``q3`` inserts the body.  The passive body follows the path
traced by the active base (follow-the-leader) and is deflected by the lumen
wall where that path would leave the tube.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace

import numpy as np

from .geometry_core import ArcShape, ConfigError, Lumen, chord_walk, min_rotation, rotation_about


class ContactLockError(RuntimeError):
    """The tip cannot be kept inside the lumen."""


@dataclass(frozen=True)
class PlantParams:
    k_q: float = 0.01                 # curvature per motor radian (1/mm/rad)
    active_length: float = 120.0
    active_links: int = 24
    max_insertion: float = 880.0
    q_limit: float = math.pi / 2
    rate_limits: tuple = (1.0, 1.0, 40.0)
    clearance: float = 1.0            # minimum body-to-wall distance (mm)
    spacing: float = 5.0              # delta-s of sensed / ground-truth shapes
    contact_spread: int = 6           # links a wall correction is spread over
    gain_drift: float = 0.0           # relative amplitude of k_q oscillation
    drift_period: float = 20.0        # s
    velocity_noise: tuple = (0.0, 0.0, 0.0)
    seed: int = 0

    def __post_init__(self):
        if self.k_q <= 0 or self.active_length <= 0 or self.active_links < 2:
            raise ConfigError("invalid active-section parameters")
        if self.spacing <= 0 or self.clearance < 0:
            raise ConfigError("invalid spacing or clearance")


@dataclass(frozen=True)
class MotorState:
    q1: float
    q2: float
    q3: float

    def __post_init__(self):
        if self.q3 < 0:
            raise ValueError(f"insertion q3 must be >= 0, got {self.q3}")

    def as_array(self) -> np.ndarray:
        return np.array([self.q1, self.q2, self.q3])


@dataclass(frozen=True)
class Endoscope:
    lumen: Lumen
    params: PlantParams = PlantParams()

    def initial_state(self, q1: float = 0.0, q2: float = 0.0) -> "PlantState":
        base = np.zeros(3)
        R = np.eye(3)
        q = np.array([q1, q2, 0.0])
        active, frames, contact = _active_section(self, base, R, q, 0.0)
        return PlantState(model=self, q=_ro(q), t=0.0, tick=0, base_pos=_ro(base), base_R=_ro(R),
                          track=_ro(base[None, :].copy()), active=_ro(active),
                          active_R=_ro(frames), contact=contact,
                          passive=_ro(base[None, :].copy()), passive_seg=0)


@dataclass(frozen=True)
class PlantState:
    model: Endoscope = field(repr=False)
    q: np.ndarray
    t: float
    tick: int
    base_pos: np.ndarray
    base_R: np.ndarray
    track: np.ndarray           # base path, port -> base
    active: np.ndarray          # (links + 1, 3), base -> tip
    active_R: np.ndarray        # frames along the active section
    contact: bool
    passive: np.ndarray = field(repr=False)   # chord-walk samples of the track
    passive_seg: int = 0

    @property
    def motors(self) -> MotorState:
        return MotorState(*map(float, self.q))


def _ro(a):
    a = np.array(a, dtype=float)
    a.setflags(write=False)
    return a


def _curvature_vector(model: Endoscope, q, t: float):
    p = model.params
    gain = p.k_q
    if p.gain_drift:
        gain *= 1.0 + p.gain_drift * math.sin(2.0 * math.pi * t / p.drift_period)
    return gain * q[0], gain * q[1]


def arc_section(base, R, kx: float, ky: float, length: float, links: int):
    """Points and frames of a constant-curvature arc sampled at equal arc length.

    Equal arc-length steps on a circle give equal chords, so the result is a
    uniform polyline.  Body frame columns are (x, y, tangent); the tangent
    turns toward ``kx * x + ky * y``.
    """
    s = np.linspace(0.0, length, links + 1)
    k = math.hypot(kx, ky)
    if k < 1e-12:
        local = np.zeros((links + 1, 3))
        local[:, 2] = s
        frames = np.broadcast_to(R, (links + 1, 3, 3)).copy()
        return base + local @ R.T, frames
    bx, by = kx / k, ky / k
    ang = k * s
    radial = (1.0 - np.cos(ang)) / k
    local = np.stack([radial * bx, radial * by, np.sin(ang) / k], axis=1)
    # rotation about the body axis (-by, bx, 0)
    ax = np.array([-by, bx, 0.0])
    c, sn = np.cos(ang), np.sin(ang)
    K = np.array([[0.0, -ax[2], ax[1]], [ax[2], 0.0, -ax[0]], [-ax[1], ax[0], 0.0]])
    rot = (np.eye(3)[None] + sn[:, None, None] * K[None]
           + (1.0 - c)[:, None, None] * (K @ K)[None])
    frames = R[None] @ rot
    return base + local @ R.T, frames


def _march_pass(model: Endoscope, arc_pts, arc_frames, start: int, d_local, R_step, pieces,
                pre_turn=None):
    """March links ``start..`` from the arc, turning each by ``pre_turn`` first
    and projecting it back inside when it still reaches the wall.

    Returns points, frames and the per-link wall correction as rotation vectors.
    """
    p = model.params
    lumen = model.lumen
    c = float(np.linalg.norm(d_local))
    limit = lumen.radius - p.clearance
    pts = [arc_pts[i] for i in range(start + 1)]
    frames = [arc_frames[i] for i in range(start + 1)]
    fixes = np.zeros((p.active_links, 3))
    for i in range(start, p.active_links):
        Rj = frames[-1]
        if pre_turn is not None and np.any(pre_turn[i]):
            ang = float(np.linalg.norm(pre_turn[i]))
            Rj = rotation_about(pre_turn[i] / ang, ang) @ Rj
        cand = pts[-1] + Rj @ d_local
        Rn = Rj @ R_step
        if lumen.closest_one(cand, pieces)[1] > limit:
            chord_cmd = (cand - pts[-1]) / c
            direction = chord_cmd
            for _ in range(4):
                target = lumen.project_one(cand, p.clearance, pieces)
                direction = target - pts[-1]
                direction /= np.linalg.norm(direction)
                cand = pts[-1] + c * direction
                if lumen.closest_one(cand, pieces)[1] <= limit + 1e-9:
                    break
            axis = np.cross(chord_cmd, direction)
            sn = float(np.linalg.norm(axis))
            if sn > 1e-15:
                fixes[i] = axis / sn * math.atan2(sn, float(np.dot(chord_cmd, direction)))
            Rn = min_rotation(chord_cmd, direction) @ Rn
        pts.append(cand)
        frames.append(Rn)
    return np.array(pts), np.array(frames), fixes


def _march_section(model: Endoscope, base, R, kx, ky, arc_pts, arc_frames, first_bad: int):
    """Rebuild the active section so it stays off the wall.

    A first pass slides each offending link along the wall.  Each of those
    corrections is then spread evenly over the ``contact_spread`` links that
    lead up to it, and a second pass (still wall-checked) rebuilds the section,
    so a contact bends the rod gradually instead of folding one joint.
    """
    p = model.params
    h = p.active_length / p.active_links
    step_pts, step_R = arc_section(np.zeros(3), np.eye(3), kx, ky, h, 1)
    d_local, R_step = step_pts[1], step_R[1]
    pieces = model.lumen.pieces_near(base, p.active_length + 2 * model.lumen.radius)
    start = max(first_bad - 1, 0)
    pts, frames, fixes = _march_pass(model, arc_pts, arc_frames, start, d_local, R_step, pieces)
    n = p.contact_spread
    if n <= 1:
        return pts, frames
    pre = np.zeros_like(fixes)
    for j in np.flatnonzero(np.any(fixes != 0.0, axis=1)):
        lo = max(j - n + 1, 0)
        pre[lo: j + 1] += fixes[j] / (j + 1 - lo)
    start = int(np.flatnonzero(np.any(pre != 0.0, axis=1))[0]) if np.any(pre) else start
    pts, frames, _ = _march_pass(model, arc_pts, arc_frames, start, d_local, R_step, pieces, pre)
    return pts, frames


def _active_section(model: Endoscope, base, R, q, t):
    p = model.params
    kx, ky = _curvature_vector(model, q, t)
    pts, frames = arc_section(base, R, kx, ky, p.active_length, p.active_links)
    pieces = model.lumen.pieces_near(base, p.active_length + 2 * model.lumen.radius)
    bad = model.lumen.signed_distance(pts, pieces) > -p.clearance + 1e-9
    if not np.any(bad):
        return pts, frames, False
    pts, frames = _march_section(model, base, R, kx, ky, pts, frames, int(np.argmax(bad)))
    return pts, frames, True


def _advance_base(state: PlantState, d: float):
    """Move the active base ``d`` mm forward along the current active section."""
    model = state.model
    p = model.params
    if not state.contact:
        kx, ky = _curvature_vector(model, state.q, state.t)
        pts, frames = arc_section(state.base_pos, state.base_R, kx, ky, d, 1)
        new_pos, new_R = pts[1], frames[1]
    else:
        pts, frames = state.active, state.active_R
        chords = np.linalg.norm(np.diff(pts, axis=0), axis=1)
        cum = np.concatenate([[0.0], np.cumsum(chords)])
        j = min(int(np.searchsorted(cum, d, side="right")) - 1, len(chords) - 1)
        frac = (d - cum[j]) / chords[j]
        new_pos = pts[j] + frac * (pts[j + 1] - pts[j])
        seg = (pts[j + 1] - pts[j]) / chords[j]
        new_R = min_rotation(frames[j][:, 2], seg) @ frames[j]
    lumen = model.lumen
    prev = state.base_pos
    if lumen.signed_distance(new_pos) > -p.clearance:
        direction = None
        for _ in range(4):
            target = lumen.project_inside(new_pos, p.clearance)
            direction = (target - prev) / np.linalg.norm(target - prev)
            new_pos = prev + d * direction
            if lumen.signed_distance(new_pos) <= -p.clearance + 1e-9:
                break
        new_R = min_rotation(new_R[:, 2], direction) @ new_R
    return new_pos, new_R


def _retract_base(state: PlantState, q3_new: float):
    track = state.track
    seg = np.linalg.norm(np.diff(track, axis=0), axis=1)
    cum = np.concatenate([[0.0], np.cumsum(seg)])
    j = int(np.searchsorted(cum, q3_new, side="right")) - 1
    j = min(max(j, 0), len(seg) - 1)
    frac = (q3_new - cum[j]) / seg[j] if seg[j] > 0 else 0.0
    pos = track[j] + frac * (track[j + 1] - track[j])
    new_track = np.vstack([track[: j + 1], pos])
    direction = track[j + 1] - track[j]
    direction /= np.linalg.norm(direction)
    R = min_rotation(state.base_R[:, 2], direction) @ state.base_R
    return pos, R, new_track


def step(state: PlantState, qdot, dt: float) -> PlantState:
    """Advance the plant by one explicit Euler step of the motor velocities."""
    if not dt > 0:
        raise ValueError(f"dt must be positive, got {dt}")
    model = state.model
    p = model.params
    qd = np.asarray(qdot, dtype=float)
    if qd.shape != (3,) or not np.all(np.isfinite(qd)):
        raise ValueError(f"motor velocity must be 3 finite values, got {qdot!r}")
    lim = np.asarray(p.rate_limits, dtype=float)
    qd = np.clip(qd, -lim, lim)
    noise = np.asarray(p.velocity_noise, dtype=float)
    if np.any(noise > 0):
        rng = np.random.default_rng([p.seed, state.tick])
        qd = qd + noise * rng.standard_normal(3)
    q = state.q + qd * dt
    q[:2] = np.clip(q[:2], -p.q_limit, p.q_limit)
    q[2] = min(max(q[2], 0.0), p.max_insertion)
    d = q[2] - state.q[2]
    t_new = state.t + dt

    track = state.track
    passive, passive_seg = state.passive, state.passive_seg
    if d > 0:
        base, R = _advance_base(state, d)
        track = np.vstack([track, base])
        walk, seg = chord_walk(track, p.spacing, start_index=passive_seg,
                               start_point=passive[-1], close_end=False)
        passive = np.vstack([passive, walk[1:]])
        passive_seg = seg
    elif d < 0:
        if q[2] <= 0.0:
            base, R = track[0].copy(), state.base_R
            track = track[:1]
        else:
            base, R, track = _retract_base(state, q[2])
        walk, passive_seg = chord_walk(track, p.spacing, close_end=False)
        passive = walk
    else:
        base, R = state.base_pos, state.base_R

    active, frames, contact = _active_section(model, base, R, q, t_new)
    if model.lumen.signed_distance(active[-1]) > 0:
        raise ContactLockError(f"tip left the lumen at t={t_new:.3f}s")
    return replace(state, q=_ro(q), t=t_new, tick=state.tick + 1, base_pos=_ro(base),
                   base_R=_ro(R), track=_ro(track), active=_ro(active), active_R=_ro(frames),
                   contact=contact, passive=_ro(passive), passive_seg=passive_seg)


def true_tip_pose(state: PlantState):
    """Camera pose at the distal tip: ``(position, R)``, optical axis ``R[:, 2]``."""
    return state.active[-1].copy(), state.active_R[-1].copy()


def passive_samples(state: PlantState) -> np.ndarray:
    """Port-anchored passive samples at the shape spacing (fixed in the world)."""
    return state.passive.copy()


def ground_truth_shape(state: PlantState) -> ArcShape:
    """Full body, port to tip, resampled at the configured spacing."""
    p = state.model.params
    tail = np.vstack([state.track[state.passive_seg:], state.active[1:]])
    walk, _ = chord_walk(tail, p.spacing, start_point=state.passive[-1], close_end=True)
    return ArcShape(np.vstack([state.passive[:-1], walk]), p.spacing)
