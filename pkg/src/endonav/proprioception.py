"""Simulated fibre-optic proprioception: noisy shape readout, per-sample
Kalman filtering and elastic rod energy."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .geometry_core import (ArcShape, ConfigError, InvalidShapeError,
                       curvature_torsion, discrete_curvature_torsion, sample_weights)
from .plant_sim import PlantState


class FilterError(ValueError):
    pass


@dataclass(frozen=True)
class StiffnessParams:
    EI: float = 1.0   # bending stiffness, N mm^2
    GJ: float = 1.0   # torsional stiffness, N mm^2
    kappa_floor: float = 0.0   # 1/mm; torsion fades out below this curvature

    def __post_init__(self):
        if not (self.EI > 0 and self.GJ > 0):
            raise ConfigError("stiffness values must be positive")
        if self.kappa_floor < 0:
            raise ConfigError("kappa_floor must be non-negative")

    def torsion_gate(self, kappa):
        """Weight in [0, 1] applied to torsion; 1 everywhere when the floor is 0.

        The Frenet frame of a nearly straight polyline is ill-defined, so its
        torsion is mostly noise there.
        """
        if self.kappa_floor == 0.0:
            return np.ones_like(kappa)
        k2 = kappa * kappa
        return k2 / (k2 + self.kappa_floor ** 2)


@dataclass(frozen=True)
class EnergyReading:
    E_b: float
    E_t: float

    @property
    def E(self) -> float:
        return self.E_b + self.E_t


def energy_terms(points, k: StiffnessParams = StiffnessParams()):
    """Bending and torsion energy of polylines, batched over leading axes.

    Each sample carries half of each adjacent edge, so non-uniform junctions
    between shape parts are weighted by their real length.
    """
    kappa, tau = discrete_curvature_torsion(points)
    w = sample_weights(points)
    tau = tau * k.torsion_gate(kappa)
    E_b = 0.5 * k.EI * np.sum(kappa * kappa * w, axis=-1)
    E_t = 0.5 * k.GJ * np.sum(tau * tau * w, axis=-1)
    return E_b, E_t


def elastic_energy(shape: ArcShape, k: StiffnessParams = StiffnessParams()) -> EnergyReading:
    prof = curvature_torsion(shape)
    w = sample_weights(shape.samples)
    tau = prof.tau * k.torsion_gate(prof.kappa)
    return EnergyReading(E_b=float(0.5 * k.EI * np.sum(prof.kappa ** 2 * w)),
                         E_t=float(0.5 * k.GJ * np.sum(tau ** 2 * w)))


def sense_shape(state: PlantState, seed, sigma: float = 0.5):
    """Noisy readout of the body split at the active-section boundary.

    Returns ``(s_a, s_p)`` in the port frame.  ``s_a`` runs from the active
    base to the tip; ``s_p`` holds the port-anchored passive samples, or is
    ``None`` while fewer than three of them exist.
    """
    rng = np.random.default_rng(seed)
    active = np.array(state.active)
    passive = np.array(state.passive)
    if sigma > 0:
        active = active + sigma * rng.standard_normal(active.shape)
        passive = passive + sigma * rng.standard_normal(passive.shape)
    chord = float(np.mean(np.linalg.norm(np.diff(state.active, axis=0), axis=1)))
    s_a = ArcShape(active, chord)
    s_p = ArcShape(passive, state.model.params.spacing) if len(passive) >= 3 else None
    return s_a, s_p


def to_base_frame(points, base_pos, base_R) -> np.ndarray:
    """Express port-frame points in the active-base frame."""
    return (np.asarray(points) - base_pos) @ np.asarray(base_R)


def from_base_frame(points, base_pos, base_R) -> np.ndarray:
    return np.asarray(points) @ np.asarray(base_R).T + base_pos


class PassiveShapeFilter:
    """Independent constant-position Kalman filters, one per 3-D sample.

    With isotropic noise every per-sample covariance stays a multiple of the
    identity, so only the scalar variances are stored.
    """

    def __init__(self, n: int, sigma_p: float = 0.05, sigma_m: float = 0.5):
        if n < 1:
            raise FilterError("filter needs at least one sample")
        self.sigma_p = float(sigma_p)
        self.sigma_m = float(sigma_m)
        self.x = None
        self.var = np.full(n, np.inf)

    @property
    def n(self) -> int:
        return len(self.var)

    @property
    def covariances(self) -> np.ndarray:
        return self.var[:, None, None] * np.eye(3)[None]

    def grow(self, n: int) -> None:
        """Append fresh (uninformed) samples at the distal end."""
        if n > self.n:
            self.var = np.concatenate([self.var, np.full(n - self.n, np.inf)])
            if self.x is not None:
                self.x = np.vstack([self.x, np.zeros((n - len(self.x), 3))])

    def predict(self, drift=None) -> None:
        if drift is not None and self.x is not None:
            self.x = self.x + drift
        self.var = self.var + self.sigma_p ** 2

    def update(self, z) -> None:
        z = np.asarray(z, dtype=float)
        if z.shape != (self.n, 3):
            raise FilterError(f"measurement shape {z.shape} does not match filter ({self.n}, 3)")
        if self.x is None:
            self.x = np.zeros_like(z)
        r = self.sigma_m ** 2
        fresh = ~np.isfinite(self.var)
        with np.errstate(invalid="ignore"):
            gain = np.where(fresh, 1.0, self.var / (self.var + r)) if r > 0 else np.ones(self.n)
        self.x = self.x + gain[:, None] * (z - self.x)
        self.var = np.where(fresh, r, (1.0 - gain) * np.where(fresh, 0.0, self.var))

    @property
    def estimate(self) -> np.ndarray:
        return self.x.copy()


def predict_passive_shape(filt: PassiveShapeFilter, measurement: ArcShape) -> ArcShape:
    """Fuse ``measurement`` and return the one-step-ahead passive shape.

    The constant-position model leaves the mean unchanged by the prediction;
    only the variance grows.
    """
    if len(measurement) != filt.n:
        raise FilterError(f"measurement has {len(measurement)} samples, filter {filt.n}")
    filt.update(measurement.samples)
    filt.predict()
    return ArcShape(filt.estimate, measurement.spacing)


__all__ = ["StiffnessParams", "EnergyReading", "energy_terms", "elastic_energy", "sense_shape",
           "PassiveShapeFilter", "predict_passive_shape", "FilterError", "InvalidShapeError",
           "to_base_frame", "from_base_frame"]
