"""Curves, discrete differential geometry and parametric tube phantoms.

Everything here is in millimetres.  Shapes are ordered proximal to distal.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field
from functools import cached_property
from pathlib import Path

import numpy as np


class InvalidShapeError(ValueError):
    pass


class ConfigError(ValueError):
    pass


# ---------------------------------------------------------------------------
# rotations
# ---------------------------------------------------------------------------

def rotation_about(axis, angle: float) -> np.ndarray:
    """Rodrigues rotation matrix for a unit ``axis``."""
    x, y, z = axis
    c, s = math.cos(angle), math.sin(angle)
    C = 1.0 - c
    return np.array([
        [c + x * x * C, x * y * C - z * s, x * z * C + y * s],
        [y * x * C + z * s, c + y * y * C, y * z * C - x * s],
        [z * x * C - y * s, z * y * C + x * s, c + z * z * C],
    ])


def min_rotation(a, b) -> np.ndarray:
    """Smallest rotation taking unit vector ``a`` onto unit vector ``b``."""
    a = np.asarray(a, dtype=float)
    b = np.asarray(b, dtype=float)
    v = np.cross(a, b)
    s = np.linalg.norm(v)
    c = float(np.dot(a, b))
    if s < 1e-15:
        if c > 0:
            return np.eye(3)
        # antiparallel: any perpendicular axis
        perp = np.cross(a, [1.0, 0.0, 0.0])
        if np.linalg.norm(perp) < 1e-8:
            perp = np.cross(a, [0.0, 1.0, 0.0])
        return rotation_about(perp / np.linalg.norm(perp), math.pi)
    return rotation_about(v / s, math.atan2(s, c))


# ---------------------------------------------------------------------------
# shapes
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class ArcShape:
    """Arc-length sampled 3-D curve.

    ``spacing`` is the nominal chord length between consecutive samples.
    Geometric shapes (resampled curves, plant ground truth) satisfy it to
    1e-6 relative; sensed and filtered shapes carry noise on top, so the
    uniformity check lives in :meth:`is_uniform` rather than the constructor.
    """

    samples: np.ndarray
    spacing: float

    def __post_init__(self):
        pts = np.array(self.samples, dtype=float)
        if pts.ndim != 2 or pts.shape[1] != 3:
            raise InvalidShapeError(f"samples must have shape (n, 3), got {pts.shape}")
        if len(pts) < 3:
            raise InvalidShapeError(f"need at least 3 samples, got {len(pts)}")
        if not np.all(np.isfinite(pts)):
            raise InvalidShapeError("non-finite sample coordinates")
        spacing = float(self.spacing)
        if not (math.isfinite(spacing) and spacing > 0):
            raise InvalidShapeError(f"spacing must be positive, got {self.spacing}")
        pts.setflags(write=False)
        object.__setattr__(self, "samples", pts)
        object.__setattr__(self, "spacing", spacing)

    def __len__(self) -> int:
        return len(self.samples)

    @property
    def flat(self) -> np.ndarray:
        """Flattened coordinate vector (3 scalars per sample)."""
        return self.samples.reshape(-1)

    @property
    def chords(self) -> np.ndarray:
        return np.linalg.norm(np.diff(self.samples, axis=0), axis=1)

    @property
    def length(self) -> float:
        return float(self.chords.sum())

    def is_uniform(self, rtol: float = 1e-6) -> bool:
        return bool(np.all(np.abs(self.chords - self.spacing) <= rtol * self.spacing))

    def transformed(self, R, t) -> "ArcShape":
        return ArcShape(self.samples @ np.asarray(R).T + np.asarray(t), self.spacing)


def chord_walk(points, spacing: float, start_index: int = 0, start_point=None,
               close_end: bool = True):
    """Walk a polyline placing samples at exact chord distance ``spacing``.

    Returns ``(samples, segment_index)``; ``segment_index`` is the polyline
    segment holding the last regular sample so a later call can resume from
    it.  With ``close_end`` an extra sample is extrapolated past the last
    vertex when the leftover exceeds half a spacing, which keeps the far
    endpoint within ``spacing / 2``.
    """
    pts = np.asarray(points, dtype=float)
    P = pts.tolist()
    n = len(P)
    s2 = spacing * spacing
    # a vertex exactly one spacing away may round to just inside the sphere
    s2_hit = s2 * (1.0 - 1e-12)
    cur = list(P[start_index] if start_point is None else start_point)
    out = [cur]
    k = start_index
    while True:
        j = k + 1
        while j < n:
            dx = P[j][0] - cur[0]
            dy = P[j][1] - cur[1]
            dz = P[j][2] - cur[2]
            if dx * dx + dy * dy + dz * dz >= s2_hit:
                break
            j += 1
        if j >= n:
            break
        A, B = P[j - 1], P[j]
        D = (B[0] - A[0], B[1] - A[1], B[2] - A[2])
        f = (A[0] - cur[0], A[1] - cur[1], A[2] - cur[2])
        a = D[0] * D[0] + D[1] * D[1] + D[2] * D[2]
        b = 2.0 * (f[0] * D[0] + f[1] * D[1] + f[2] * D[2])
        c = f[0] * f[0] + f[1] * f[1] + f[2] * f[2] - s2
        disc = max(b * b - 4.0 * a * c, 0.0)
        u = (-b + math.sqrt(disc)) / (2.0 * a)
        u = min(max(u, 0.0), 1.0)
        cur = [A[0] + u * D[0], A[1] + u * D[1], A[2] + u * D[2]]
        out.append(cur)
        k = j - 1
    samples = np.array(out)
    if close_end:
        end = pts[-1]
        gap = float(np.linalg.norm(end - samples[-1]))
        if gap > 0.5 * spacing:
            samples = np.vstack([samples, samples[-1] + spacing * (end - samples[-1]) / gap])
    return samples, k


def resample(shape: ArcShape, spacing: float) -> ArcShape:
    """Resample ``shape`` to uniform chord spacing, starting at its first sample."""
    if not (spacing > 0 and math.isfinite(spacing)):
        raise InvalidShapeError(f"spacing must be positive, got {spacing}")
    pts, _ = chord_walk(shape.samples, spacing)
    if len(pts) < 3:
        raise InvalidShapeError(f"shape of length {shape.length:.3f} too short for spacing {spacing}")
    return ArcShape(pts, spacing)


def resample_points(points, spacing: float) -> ArcShape:
    pts = np.asarray(points, dtype=float)
    if not np.all(np.isfinite(pts)):
        raise InvalidShapeError("non-finite sample coordinates")
    samples, _ = chord_walk(pts, spacing)
    return ArcShape(samples, spacing)


# ---------------------------------------------------------------------------
# discrete curvature / torsion
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class CurvatureProfile:
    kappa: np.ndarray
    tau: np.ndarray


def _edge_terms(p):
    e = np.diff(p, axis=-2)
    ell = np.linalg.norm(e, axis=-1)
    return e, ell


def discrete_curvature_torsion(points):
    """Per-sample curvature and torsion of a polyline (batched over leading axes).

    Curvature is the inverse circumradius of each consecutive sample triple.
    Torsion is the signed rotation angle between consecutive discrete
    binormal axes divided by the connecting edge length, averaged onto
    samples; the angle is taken modulo a half turn.
    Endpoint values copy the nearest interior estimate.
    """
    p = np.asarray(points, dtype=float)
    n = p.shape[-2]
    e, ell = _edge_terms(p)
    e0, e1 = e[..., :-1, :], e[..., 1:, :]
    a, b = ell[..., :-1], ell[..., 1:]
    c = np.linalg.norm(p[..., 2:, :] - p[..., :-2, :], axis=-1)
    cr = np.cross(e0, e1)
    crn = np.linalg.norm(cr, axis=-1)
    denom = a * b * c
    with np.errstate(invalid="ignore", divide="ignore"):
        k_in = np.where(denom > 0, 2.0 * crn / denom, 0.0)
        defined = crn > 1e-12 * a * b
        binorm = np.where(defined[..., None], cr / np.where(crn > 0, crn, 1.0)[..., None], 0.0)

    # torsion on edges 1 .. n-3 (edge i joins samples i and i+1)
    b0, b1 = binorm[..., :-1, :], binorm[..., 1:, :]
    t_edge = e[..., 1:-1, :] / ell[..., 1:-1, None]
    sin_term = np.einsum("...i,...i->...", np.cross(b0, b1), t_edge)
    cos_term = np.einsum("...i,...i->...", b0, b1)
    both = defined[..., :-1] & defined[..., 1:]
    # binormals are compared as unoriented axes, so the half-turn flip at an
    # inflection of a planar curve reads as zero torsion
    angle = np.arctan2(sin_term * np.sign(cos_term + (cos_term == 0)), np.abs(cos_term))
    tau_edge = np.where(both, angle / ell[..., 1:-1], 0.0)

    kappa = np.empty(p.shape[:-2] + (n,))
    kappa[..., 1:-1] = k_in
    kappa[..., 0] = k_in[..., 0]
    kappa[..., -1] = k_in[..., -1]

    tau = np.zeros(p.shape[:-2] + (n,))
    if n >= 4:
        # sample i sees edges i-1 and i (valid edges are 1 .. n-3)
        tau[..., 1] = tau_edge[..., 0]
        tau[..., n - 2] = tau_edge[..., -1]
        if n >= 5:
            tau[..., 2:n - 2] = 0.5 * (tau_edge[..., :-1] + tau_edge[..., 1:])
        tau[..., 0] = tau[..., 1]
        tau[..., -1] = tau[..., n - 2]
    return kappa, tau


def curvature_torsion(shape: ArcShape) -> CurvatureProfile:
    if len(shape) < 5:
        raise InvalidShapeError(f"curvature needs at least 5 samples, got {len(shape)}")
    if np.any(shape.chords <= 1e-9 * shape.spacing):
        raise InvalidShapeError("degenerate shape: repeated consecutive samples")
    kappa, tau = discrete_curvature_torsion(shape.samples)
    return CurvatureProfile(kappa=kappa, tau=tau)


def sample_weights(points) -> np.ndarray:
    """Voronoi arc-length weight of each sample (half of each adjacent edge)."""
    _, ell = _edge_terms(np.asarray(points, dtype=float))
    w = np.zeros(ell.shape[:-1] + (ell.shape[-1] + 1,))
    w[..., :-1] += 0.5 * ell
    w[..., 1:] += 0.5 * ell
    return w


# ---------------------------------------------------------------------------
# lumen phantoms
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class _Line:
    start: np.ndarray
    direction: np.ndarray
    length: float
    s0: float

    def point(self, s):
        return self.start + np.multiply.outer(np.asarray(s) - self.s0, self.direction)

    def tangent(self, s):
        return np.broadcast_to(self.direction, np.shape(s) + (3,))

    def closest(self, p):
        t = np.clip((p - self.start) @ self.direction, 0.0, self.length)
        cp = self.start + t[..., None] * self.direction
        return cp, self.s0 + t

    def distance(self, p):
        w = p - self.start
        t = np.clip(w @ self.direction, 0.0, self.length)
        g = w - t[..., None] * self.direction
        return np.sqrt(np.einsum("...i,...i->...", g, g))

    @property
    def curvature(self):
        return 0.0

    def closest_one(self, x, y, z):
        ax, ay, az = self.start.tolist()
        dx, dy, dz = self.direction.tolist()
        t = (x - ax) * dx + (y - ay) * dy + (z - az) * dz
        t = min(max(t, 0.0), self.length)
        return ax + t * dx, ay + t * dy, az + t * dz


@dataclass(frozen=True)
class _Arc:
    center: np.ndarray
    radius: float
    u: np.ndarray   # centre -> start point
    v: np.ndarray   # tangent at start
    normal: np.ndarray
    angle: float
    s0: float

    @property
    def length(self):
        return self.radius * self.angle

    @property
    def curvature(self):
        return 1.0 / self.radius

    def point(self, s):
        phi = (np.asarray(s) - self.s0) / self.radius
        return self.center + self.radius * (np.multiply.outer(np.cos(phi), self.u)
                                            + np.multiply.outer(np.sin(phi), self.v))

    def tangent(self, s):
        phi = (np.asarray(s) - self.s0) / self.radius
        return -np.multiply.outer(np.sin(phi), self.u) + np.multiply.outer(np.cos(phi), self.v)

    def closest_one(self, x, y, z):
        cx, cy, cz = self.center.tolist()
        ux, uy, uz = self.u.tolist()
        vx, vy, vz = self.v.tolist()
        nx, ny, nz = self.normal.tolist()
        wx, wy, wz = x - cx, y - cy, z - cz
        h = wx * nx + wy * ny + wz * nz
        wx, wy, wz = wx - h * nx, wy - h * ny, wz - h * nz
        wu = wx * ux + wy * uy + wz * uz
        wv = wx * vx + wy * vy + wz * vz
        phi = math.atan2(wv, wu)
        rho = self.radius
        if 0.0 <= phi <= self.angle and (wu or wv):
            rn = math.hypot(wu, wv)
            f = rho / rn
            return cx + f * wx, cy + f * wy, cz + f * wz
        ends = []
        for a in (0.0, self.angle):
            ca, sa = math.cos(a), math.sin(a)
            ends.append((cx + rho * (ca * ux + sa * vx), cy + rho * (ca * uy + sa * vy),
                         cz + rho * (ca * uz + sa * vz)))
        d0 = (x - ends[0][0]) ** 2 + (y - ends[0][1]) ** 2 + (z - ends[0][2]) ** 2
        d1 = (x - ends[1][0]) ** 2 + (y - ends[1][1]) ** 2 + (z - ends[1][2]) ** 2
        return ends[0] if d0 <= d1 else ends[1]

    @cached_property
    def _ends(self):
        return self.point(self.s0), self.point(self.s0 + self.length)

    def distance(self, p):
        """Distance from each point to the arc."""
        w = p - self.center
        h = w @ self.normal
        wu, wv = w @ self.u, w @ self.v
        if self.angle < math.pi:
            within = (wv >= 0.0) & (wu * math.sin(self.angle) - wv * math.cos(self.angle) >= 0.0)
        else:
            phi = np.arctan2(wv, wu)
            within = (phi >= 0.0) & (phi <= self.angle)
        d2 = h * h + (np.hypot(wu, wv) - self.radius) ** 2
        if not np.all(within):
            g0, g1 = p - self._ends[0], p - self._ends[1]
            end2 = np.minimum(np.einsum("...i,...i->...", g0, g0),
                              np.einsum("...i,...i->...", g1, g1))
            d2 = np.where(within, d2, end2)
        return np.sqrt(d2)

    def bounding_ball(self, margin: float = 0.0):
        """Center and radius of a ball holding the arc, grown by ``margin``."""
        mid = self.point(self.s0 + 0.5 * self.length)
        return mid, 2.0 * self.radius * math.sin(0.25 * self.angle) + margin

    def closest(self, p):
        w = p - self.center
        h = w @ self.normal
        w_in = w - h[..., None] * self.normal
        phi = np.arctan2(w_in @ self.v, w_in @ self.u)
        inside = (phi >= 0.0) & (phi <= self.angle)
        rn = np.linalg.norm(w_in, axis=-1)
        safe = np.where(rn > 0, rn, 1.0)
        on_arc = self.center + self.radius * w_in / safe[..., None]
        on_arc = np.where((rn > 0)[..., None], on_arc, self.center + self.radius * self.u)
        p0 = self.center + self.radius * self.u
        p1 = self.point(self.s0 + self.length)
        d0 = np.linalg.norm(p - p0, axis=-1)
        d1 = np.linalg.norm(p - p1, axis=-1)
        end_pt = np.where((d0 <= d1)[..., None], p0, p1)
        end_phi = np.where(d0 <= d1, 0.0, self.angle)
        cp = np.where(inside[..., None], on_arc, end_pt)
        s = self.s0 + self.radius * np.where(inside, phi, end_phi)
        return cp, s


@dataclass(frozen=True)
class PhantomSpec:
    """Parametric tube descriptor.

    ``kind`` is one of ``straight``, ``s_curve`` or ``multi_bend``.
    """

    kind: str = "straight"
    length: float = 1000.0
    radius: float = 25.0
    bend_radius: float = 180.0
    bend_angle_deg: float = 50.0
    max_curvature_jump: float = 0.0101


@dataclass(frozen=True)
class Lumen:
    """Tube around a piecewise line/arc centerline starting at the origin along +z."""

    pieces: tuple
    radius: float
    centerline: ArcShape = field(repr=False)

    @property
    def length(self) -> float:
        last = self.pieces[-1]
        return last.s0 + last.length

    def closest(self, points):
        """Closest centerline point and its arc-length parameter for each point."""
        p = np.asarray(points, dtype=float)
        best_d = None
        for piece in self.pieces:
            cp, s = piece.closest(p)
            d = np.linalg.norm(p - cp, axis=-1)
            if best_d is None:
                best_d, best_cp, best_s = d, cp, s
            else:
                better = d < best_d
                best_d = np.where(better, d, best_d)
                best_cp = np.where(better[..., None], cp, best_cp)
                best_s = np.where(better, s, best_s)
        return best_cp, best_s, best_d

    def signed_distance(self, points, pieces=None):
        """Distance to the wall; negative inside the lumen."""
        p = np.asarray(points, dtype=float)
        best = None
        for piece in (self.pieces if pieces is None else pieces):
            d = piece.distance(p)
            best = d if best is None else np.minimum(best, d)
        return best - self.radius

    def closest_one(self, point, pieces=None):
        """Scalar fast path of :meth:`closest` for one point: ``(cp, distance)``."""
        x, y, z = (float(v) for v in point)
        best = None
        for piece in (self.pieces if pieces is None else pieces):
            cx, cy, cz = piece.closest_one(x, y, z)
            d2 = (x - cx) ** 2 + (y - cy) ** 2 + (z - cz) ** 2
            if best is None or d2 < best[0]:
                best = (d2, (cx, cy, cz))
        return np.array(best[1]), math.sqrt(best[0])

    def project_one(self, point, clearance: float = 0.0, pieces=None):
        p = np.asarray(point, dtype=float)
        cp, d = self.closest_one(p, pieces)
        limit = self.radius - clearance
        if d <= limit or d == 0.0:
            return p
        return cp + (p - cp) * (limit / d)

    def project_inside(self, points, clearance: float = 0.0):
        """Move points lying closer than ``clearance`` to the wall back inside."""
        p = np.asarray(points, dtype=float)
        cp, _, d = self.closest(p)
        limit = self.radius - clearance
        out = d > limit
        safe = np.where(d > 0, d, 1.0)
        moved = cp + (p - cp) * (limit / safe)[..., None]
        return np.where(out[..., None], moved, p)

    def point(self, s):
        s = np.asarray(s, dtype=float)
        out = np.zeros(s.shape + (3,))
        for piece in self.pieces:
            m = (s >= piece.s0) & (s <= piece.s0 + piece.length)
            if np.any(m):
                out[m] = piece.point(s[m])
        return out

    def tangent(self, s):
        s = np.asarray(s, dtype=float)
        out = np.zeros(s.shape + (3,))
        for piece in self.pieces:
            m = (s >= piece.s0) & (s <= piece.s0 + piece.length)
            if np.any(m):
                out[m] = piece.tangent(s[m])
        return out

    def wall_points(self, s, psi):
        """Exact wall points at centerline parameter ``s`` and angle ``psi``."""
        s = np.atleast_1d(np.asarray(s, dtype=float))
        psi = np.atleast_1d(np.asarray(psi, dtype=float))
        c = self.point(s)
        t = self.tangent(s)
        ref = np.where(np.abs(t[:, 0:1]) < 0.9, np.array([1.0, 0, 0]), np.array([0, 1.0, 0]))
        n1 = np.cross(t, ref)
        n1 /= np.linalg.norm(n1, axis=1, keepdims=True)
        n2 = np.cross(t, n1)
        return c + self.radius * (np.cos(psi)[:, None] * n1 + np.sin(psi)[:, None] * n2)

    def pieces_near(self, point, reach: float):
        """Pieces whose closest point to ``point`` lies within ``reach``."""
        p = np.asarray(point, dtype=float)
        keep = []
        for piece in self.pieces:
            cp, _ = piece.closest(p)
            if np.linalg.norm(p - cp) <= reach:
                keep.append(piece)
        return tuple(keep) if keep else self.pieces


def _build_pieces(segments):
    """segments: list of ("line", length) or ("arc", radius, angle_rad, roll_rad)."""
    pos = np.zeros(3)
    R = np.eye(3)  # columns: body x, body y, tangent
    s = 0.0
    pieces = []
    for seg in segments:
        if seg[0] == "line":
            L = float(seg[1])
            pieces.append(_Line(pos.copy(), R[:, 2].copy(), L, s))
            pos = pos + L * R[:, 2]
            s += L
        else:
            _, rho, ang, roll = seg
            bend = math.cos(roll) * R[:, 0] + math.sin(roll) * R[:, 1]
            center = pos + rho * bend
            normal = np.cross(R[:, 2], bend)
            arc = _Arc(center, float(rho), -bend, R[:, 2].copy(), normal, float(ang), s)
            pieces.append(arc)
            Rb = rotation_about(normal, ang)
            R = Rb @ R
            pos = arc.point(s + arc.length)
            s += arc.length
    return tuple(pieces)


def _phantom_segments(spec: PhantomSpec):
    L = spec.length
    rho = spec.bend_radius
    ang = math.radians(spec.bend_angle_deg)
    if spec.kind == "straight":
        return [("line", L)]
    if spec.kind == "s_curve":
        lead, gap = 250.0, 100.0
        tail = L - (lead + gap + 2 * rho * ang)
        if tail <= 0:
            raise ConfigError("phantom too short for its bends")
        return [("line", lead), ("arc", rho, ang, 0.0), ("line", gap),
                ("arc", rho, ang, math.pi), ("line", tail)]
    if spec.kind == "multi_bend":
        lead, gap = 150.0, 60.0
        a3 = 0.8 * ang
        tail = L - (lead + 2 * gap + rho * (2 * ang + a3))
        if tail <= 0:
            raise ConfigError("phantom too short for its bends")
        return [("line", lead), ("arc", rho, ang, 0.0), ("line", gap),
                ("arc", rho, ang, math.pi / 2), ("line", gap),
                ("arc", rho, a3, 1.25 * math.pi), ("line", tail)]
    raise ConfigError(f"unknown phantom kind {spec.kind!r}")


def _exact_chord_walk(lumen: Lumen, spacing: float) -> np.ndarray:
    """Centerline samples lying on the analytic curve, exactly ``spacing`` apart."""
    total = lumen.length
    s = 0.0
    out = [lumen.point(np.array([0.0]))[0]]
    while True:
        p0 = out[-1]
        u = s + spacing       # a chord never exceeds its arc, so this undershoots
        for _ in range(20):
            if u > total:
                break
            d = lumen.point(np.array([u]))[0] - p0
            r = float(np.linalg.norm(d))
            f = r - spacing
            if abs(f) < 1e-13 * spacing:
                break
            u -= f / (float(lumen.tangent(np.array([u]))[0] @ d) / r)
        if u > total:
            return np.array(out)
        out.append(lumen.point(np.array([u]))[0])
        s = u


def make_phantom(spec: PhantomSpec = PhantomSpec(), spacing: float = 5.0) -> Lumen:
    if spec.radius <= 0:
        raise ConfigError(f"radius must be positive, got {spec.radius}")
    if spec.length <= 0:
        raise ConfigError(f"length must be positive, got {spec.length}")
    pieces = _build_pieces(_phantom_segments(spec))
    for a, b in zip(pieces[:-1], pieces[1:]):
        if abs(a.curvature - b.curvature) > spec.max_curvature_jump:
            raise ConfigError(f"curvature jump {abs(a.curvature - b.curvature):.4g} /mm "
                              f"exceeds bound {spec.max_curvature_jump}")
    tmp = Lumen(pieces, float(spec.radius), None)  # type: ignore[arg-type]
    centerline = ArcShape(_exact_chord_walk(tmp, spacing), spacing)
    return Lumen(pieces, float(spec.radius), centerline)


# ---------------------------------------------------------------------------
# shape files
# ---------------------------------------------------------------------------

SHAPE_HEADER = ["s_mm", "x_mm", "y_mm", "z_mm"]


def save_shape_csv(path, shape: ArcShape) -> None:
    s = np.concatenate([[0.0], np.cumsum(shape.chords)])
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(SHAPE_HEADER)
        for si, (x, y, z) in zip(s, shape.samples):
            w.writerow([repr(float(si)), repr(float(x)), repr(float(y)), repr(float(z))])


def load_shape_csv(path) -> ArcShape:
    with open(Path(path), newline="") as fh:
        rows = list(csv.reader(fh))
    if not rows or rows[0] != SHAPE_HEADER:
        raise InvalidShapeError(f"{path}: expected header {','.join(SHAPE_HEADER)}")
    data = np.array([[float(v) for v in r] for r in rows[1:]])
    if data.ndim != 2 or data.shape[0] < 3:
        raise InvalidShapeError(f"{path}: need at least 3 samples")
    spacing = float(np.mean(np.diff(data[:, 0])))
    return ArcShape(data[:, 1:], spacing)
