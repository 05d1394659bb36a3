"""Depth rendering inside tube phantoms and ROI-based image features.

Pixel coordinates are ``(x, y) = (column, row)`` with pixel centres on
integers; the default principal point is the raster centre.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from scipy import ndimage

from .geometry_core import Lumen


class RenderError(RuntimeError):
    pass


class DepthFormatError(ValueError):
    pass


@dataclass(frozen=True)
class Intrinsics:
    width: int
    height: int
    focal: float
    cx: float
    cy: float

    @classmethod
    def from_fov(cls, width: int = 384, height: int = 384, fov_deg: float = 100.0) -> "Intrinsics":
        focal = 0.5 * width / math.tan(math.radians(fov_deg) / 2.0)
        return cls(width, height, focal, (width - 1) / 2.0, (height - 1) / 2.0)

    @property
    def center(self) -> np.ndarray:
        return np.array([self.cx, self.cy])


@dataclass(frozen=True)
class DepthMap:
    depth: np.ndarray        # (H, W) float32, mm
    intrinsics: Intrinsics

    def __post_init__(self):
        d = np.asarray(self.depth, dtype=np.float32)
        if d.ndim != 2 or d.shape[0] == 0 or d.shape[1] == 0:
            raise DepthFormatError(f"depth must be a non-empty 2-D raster, got {d.shape}")
        if d.shape != (self.intrinsics.height, self.intrinsics.width):
            raise DepthFormatError("raster shape does not match intrinsics")
        if not np.all(np.isfinite(d)) or np.any(d <= 0):
            raise DepthFormatError("depths must be positive and finite")
        d.setflags(write=False)
        object.__setattr__(self, "depth", d)

    @property
    def shape(self):
        return self.depth.shape


# ---------------------------------------------------------------------------
# ray casting
# ---------------------------------------------------------------------------

_CHECK_SAMPLES = 32


def _cylinder_exit(origins, dirs, piece, radius):
    """Exit distance of rays from a straight tube piece's cylinder.

    Returns ``(t, inside)``: ``t`` is NaN where the exit is not on this piece,
    ``inside`` marks origins lying within the piece itself.
    """
    a = piece.direction
    w = origins - piece.start
    wa = w @ a
    da = dirs @ a
    wp = w - wa[:, None] * a
    dp = dirs - da[:, None] * a
    A = np.einsum("ij,ij->i", dp, dp)
    B = 2.0 * np.einsum("ij,ij->i", wp, dp)
    C = np.einsum("ij,ij->i", wp, wp) - radius * radius
    with np.errstate(invalid="ignore", divide="ignore"):
        t = (-B + np.sqrt(B * B - 4.0 * A * C)) / (2.0 * A)
    s_hit = wa + t * da
    ok = (A > 1e-12) & (s_hit >= 0) & (s_hit <= piece.length) & np.isfinite(t) & (t > 0)
    inside = (C < 0) & (wa >= 0) & (wa <= piece.length)
    return np.where(ok, t, np.nan), inside


def _torus_exit(origins, dirs, piece, radius, both=False):
    """Exit distance of rays from the full torus swept by a bent piece.

    Solves the ray/torus quartic for every ray at once (companion-matrix
    eigenvalues) and polishes the exit root by Newton steps: the smallest
    positive root from inside the torus tube, the second one from outside.
    With ``both`` the following exit is returned too, as a second column: a
    ray can cross the part of the torus outside the arc before reaching the
    wall.  Returns ``(t, inside)`` like :func:`_cylinder_exit`; ``inside`` is
    only the torus-tube test, which is all the caller needs.
    """
    w = origins - piece.center
    n = piece.normal
    R2 = piece.radius ** 2
    b = np.einsum("ij,ij->i", w, dirs)
    wn = w @ n
    dn = dirs @ n
    ww = np.einsum("ij,ij->i", w, w)
    G = ww + R2 - radius * radius
    a3 = 4.0 * b
    a2 = 4.0 * b * b + 2.0 * G - 4.0 * R2 * (1.0 - dn * dn)
    a1 = 4.0 * b * G - 8.0 * R2 * (b - wn * dn)
    a0 = G * G - 4.0 * R2 * (ww - wn * wn)
    m = len(b)
    comp = np.zeros((m, 4, 4))
    comp[:, 1, 0] = comp[:, 2, 1] = comp[:, 3, 2] = 1.0
    comp[:, 0, 3], comp[:, 1, 3], comp[:, 2, 3], comp[:, 3, 3] = -a0, -a1, -a2, -a3
    roots = np.linalg.eigvals(comp)
    real = np.abs(roots.imag) <= 1e-6 * np.maximum(1.0, np.abs(roots.real))
    cand = np.sort(np.where(real & (roots.real > 0), roots.real, np.inf), axis=1)
    first = np.where(a0 < 0, 0, 1)
    t = np.take_along_axis(cand, np.stack([first, first + 2], axis=1), axis=1)
    a3, a2, a1, a0_ = (c[:, None] for c in (a3, a2, a1, a0))
    for _ in range(3):
        f = (((t + a3) * t + a2) * t + a1) * t + a0_
        df = ((4.0 * t + 3.0 * a3) * t + 2.0 * a2) * t + a1
        with np.errstate(invalid="ignore", divide="ignore"):
            t = np.where(np.isfinite(t) & (df != 0), t - f / df, t)
    t = np.where(np.isfinite(t) & (t > 0), t, np.nan)
    return (t if both else t[:, 0]), a0 < 0


def _reaches_ball(origins, dirs, center, radius, max_depth):
    """Rays whose segment ``[0, max_depth]`` comes within ``radius`` of ``center``."""
    w = center - origins
    t = np.clip(np.einsum("ij,ij->i", w, dirs), 0.0, max_depth)
    gap = w - t[:, None] * dirs
    return np.einsum("ij,ij->i", gap, gap) <= radius * radius


def _sphere_exit(origins, dirs, center, radius):
    """Exit distance of rays from a ball; ``(t, inside)`` like :func:`_cylinder_exit`."""
    w = origins - center
    b = np.einsum("ij,ij->i", w, dirs)
    c = np.einsum("ij,ij->i", w, w) - radius * radius
    with np.errstate(invalid="ignore"):
        t = -b + np.sqrt(b * b - c)
    ok = np.isfinite(t) & (t > 0)
    return np.where(ok, t, np.nan), c < 0


def cast_rays(origins, dirs, lumen: Lumen, max_depth: float = 300.0,
              min_step: float = 0.05, tol: float = 1e-4, pieces=None, rel_step: float = 0.0):
    """Distance along each unit ray to the first lumen-wall crossing.

    Each piece first offers a closed-form exit (ray/cylinder or ray/torus),
    accepted where the exit point is on the wall of the whole tube.  The remaining rays are
    sphere traced against the exact signed distance with a minimum step of
    ``max(min_step, rel_step * t)``, then the bracketing interval is bisected
    down to ``tol``.  A positive ``rel_step`` lets grazing rays far down the
    tube advance faster, at the cost of possibly stepping over a wall sliver
    thinner than that step.  Rays that
    travel ``max_depth`` without a hit report ``max_depth``.
    """
    o = np.atleast_2d(np.asarray(origins, dtype=float))
    d = np.atleast_2d(np.asarray(dirs, dtype=float))
    o = np.broadcast_to(o, d.shape)
    n = len(d)
    if pieces is None:
        pieces = lumen.pieces_near(o[0], max_depth + 2 * lumen.radius)
    # the pieces closest along the lumen settle most rays, so try them first
    s_cam = float(lumen.closest(o[0])[1])
    trial_order = sorted(pieces, key=lambda pc: abs(float(pc.closest(o[0])[1]) - s_cam))
    out = np.full(n, np.nan)

    frac = (np.arange(1, _CHECK_SAMPLES + 1) - 0.5) / _CHECK_SAMPLES

    def accept(t, inside, todo):
        """Store the candidate exits ``t`` of the rays in ``todo`` that hold up."""
        good = np.isfinite(t)
        if not np.any(good):
            return
        idx = np.flatnonzero(todo)[good]
        tg = np.minimum(t[good], max_depth)
        far = t[good] >= max_depth
        hit = o[idx] + tg[:, None] * d[idx]
        sd_hit = lumen.signed_distance(hit, pieces)
        # an exit beyond max_depth only has to leave the ray inside up to there
        ok = np.where(far, sd_hit < 0.0, np.abs(sd_hit) <= 1e-6)
        # rays starting outside this part must stay in the tube until the hit
        check = ok & (~inside[good] | far)
        if np.any(check):
            c = np.flatnonzero(check)
            probe = o[idx[c], None] + (tg[c, None] * frac)[..., None] * d[idx[c], None]
            sd = lumen.signed_distance(probe.reshape(-1, 3), pieces).reshape(len(c), -1)
            ok[c[np.any(sd >= 0.0, axis=1)]] = False
        out[idx[ok]] = tg[ok]

    for piece in trial_order:
        todo = np.isnan(out)
        if not np.any(todo):
            break
        if hasattr(piece, "direction"):
            accept(*_cylinder_exit(o[todo], d[todo], piece, lumen.radius), todo)
            continue
        todo &= _reaches_ball(o, d, *piece.bounding_ball(lumen.radius), max_depth)
        if not np.any(todo):
            continue
        t, inside = _torus_exit(o[todo], d[todo], piece, lumen.radius, both=True)
        accept(t[:, 0], inside, todo)
        left = np.isnan(out[todo])
        todo2 = todo.copy()
        todo2[todo] = left
        accept(t[left, 1], np.zeros(left.sum(), dtype=bool), todo2)
    # the wall around a joint on the outer side of a bend is a sphere
    for piece in pieces[1:]:
        todo = np.isnan(out)
        if not np.any(todo):
            break
        accept(*_sphere_exit(o[todo], d[todo], piece.point(piece.s0), lumen.radius), todo)

    idx = np.flatnonzero(np.isnan(out))
    if len(idx):
        t = np.zeros(len(idx))
        oo, dd = o[idx], d[idx]
        t_prev = np.zeros(len(idx))
        active = np.ones(len(idx), dtype=bool)
        for _ in range(4000):
            a = np.flatnonzero(active)
            if not len(a):
                break
            sd = lumen.signed_distance(oo[a] + t[a, None] * dd[a], pieces)
            crossed = sd >= 0.0
            far = t[a] >= max_depth
            stop = crossed | far
            active[a[stop]] = False
            go = a[~stop]
            t_prev[go] = t[go]
            t[go] += np.maximum(-sd[~stop], np.maximum(min_step, rel_step * t[go]))
        lo, hi = t_prev.copy(), np.minimum(t, max_depth)
        hit = lumen.signed_distance(oo + hi[:, None] * dd, pieces) >= 0.0
        h = np.flatnonzero(hit)
        lo_h, hi_h = lo[h], hi[h]
        while np.any(hi_h - lo_h > tol):
            mid = 0.5 * (lo_h + hi_h)
            sd = lumen.signed_distance(oo[h] + mid[:, None] * dd[h], pieces)
            outside = sd >= 0.0
            hi_h = np.where(outside, mid, hi_h)
            lo_h = np.where(outside, lo_h, mid)
        res = np.full(len(idx), float(max_depth))
        res[h] = 0.5 * (lo_h + hi_h)
        out[idx] = res
    return out


def pixel_rays(intr: Intrinsics, R) -> np.ndarray:
    """Unit world-frame ray directions, row-major over the raster."""
    v, u = np.mgrid[0:intr.height, 0:intr.width]
    cam = np.stack([(u - intr.cx) / intr.focal, (v - intr.cy) / intr.focal,
                    np.ones(u.shape)], axis=-1).reshape(-1, 3)
    cam /= np.linalg.norm(cam, axis=1, keepdims=True)
    return cam @ np.asarray(R).T


def render_depth(pose, lumen: Lumen, intr: Intrinsics, max_depth: float = 300.0) -> DepthMap:
    """Range image seen from ``pose = (position, R)``; optical axis ``R[:, 2]``."""
    pos, R = pose
    pos = np.asarray(pos, dtype=float)
    if lumen.signed_distance(pos) >= 0:
        raise RenderError(f"camera at {pos} is not inside the lumen")
    dirs = pixel_rays(intr, R)
    depth = cast_rays(pos, dirs, lumen, max_depth=max_depth)
    return DepthMap(depth.reshape(intr.height, intr.width).astype(np.float32), intr)


# ---------------------------------------------------------------------------
# ROI and image feature
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class Roi:
    mask: np.ndarray
    center: np.ndarray   # (x, y) px
    area: int


def extract_roi(depth: DepthMap, percentile: float = 95.0) -> Roi:
    """Largest 4-connected component of the pixels at or above the depth percentile.

    Equal-size components resolve to the one whose first pixel comes first in
    row-major order (``ndimage.label`` numbers components in scan order).
    """
    d = depth.depth
    thr = np.percentile(d, percentile)
    cand = d >= thr
    labels, count = ndimage.label(cand)
    sizes = np.bincount(labels.ravel(), minlength=count + 1)[1:]
    best = int(np.argmax(sizes)) + 1
    mask = labels == best
    rows, cols = np.nonzero(mask)
    center = np.array([cols.mean(), rows.mean()])
    mask.setflags(write=False)
    return Roi(mask=mask, center=center, area=int(mask.sum()))


@dataclass(frozen=True)
class ImageFeature:
    y: np.ndarray     # smoothed ROI centre (x, y) px
    y_d: np.ndarray   # desired centre

    @property
    def error(self) -> np.ndarray:
        return self.y - self.y_d


def image_feature(roi: Roi, previous: ImageFeature | None, alpha: float = 0.5,
                  y_d=None) -> ImageFeature:
    """Exponentially smoothed ROI centre; the first call adopts the centre as is."""
    if not 0.0 < alpha <= 1.0:
        raise ValueError(f"alpha must lie in (0, 1], got {alpha}")
    p = np.asarray(roi.center, dtype=float)
    if previous is None:
        if y_d is None:
            h, w = roi.mask.shape
            y_d = np.array([(w - 1) / 2.0, (h - 1) / 2.0])
        return ImageFeature(p.copy(), np.asarray(y_d, dtype=float))
    y = alpha * p + (1.0 - alpha) * previous.y
    return ImageFeature(y, previous.y_d if y_d is None else np.asarray(y_d, dtype=float))


# ---------------------------------------------------------------------------
# files
# ---------------------------------------------------------------------------

def save_depth(path, dm: DepthMap) -> None:
    i = dm.intrinsics
    header = f"DPTH {i.width} {i.height} {float(i.focal)!r} {float(i.cx)!r} {float(i.cy)!r}\n"
    with open(path, "wb") as fh:
        fh.write(header.encode("ascii"))
        fh.write(np.ascontiguousarray(dm.depth, dtype="<f4").tobytes())


def load_depth(path) -> DepthMap:
    raw = Path(path).read_bytes()
    nl = raw.find(b"\n")
    if nl < 0:
        raise DepthFormatError(f"{path}: missing header line")
    parts = raw[:nl].decode("ascii", errors="replace").split()
    if len(parts) != 6 or parts[0] != "DPTH":
        raise DepthFormatError(f"{path}: malformed header {raw[:nl]!r}")
    try:
        w, h = int(parts[1]), int(parts[2])
        focal, cx, cy = (float(v) for v in parts[3:])
    except ValueError as exc:
        raise DepthFormatError(f"{path}: malformed header values") from exc
    if w <= 0 or h <= 0:
        raise DepthFormatError(f"{path}: non-positive raster size {w}x{h}")
    body = raw[nl + 1:]
    if len(body) != 4 * w * h:
        raise DepthFormatError(f"{path}: expected {4 * w * h} data bytes, found {len(body)}")
    depth = np.frombuffer(body, dtype="<f4").reshape(h, w).astype(np.float32)
    return DepthMap(depth, Intrinsics(w, h, focal, cx, cy))


def save_mask_pgm(path, mask) -> None:
    m = np.asarray(mask, dtype=bool)
    h, w = m.shape
    with open(path, "wb") as fh:
        fh.write(f"P5\n{w} {h}\n255\n".encode("ascii"))
        fh.write((m.astype(np.uint8) * 255).tobytes())


def load_mask_pgm(path) -> np.ndarray:
    raw = Path(path).read_bytes()
    head = raw.split(b"\n", 3)
    if head[0] != b"P5":
        raise DepthFormatError(f"{path}: not a binary PGM")
    w, h = (int(v) for v in head[1].split())
    data = np.frombuffer(head[3], dtype=np.uint8)
    if data.size != w * h:
        raise DepthFormatError(f"{path}: truncated PGM")
    return data.reshape(h, w) > 0


