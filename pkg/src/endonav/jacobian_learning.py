"""Online RBF-network estimates of the image and shape Jacobians.

Every output row ``i`` of a Jacobian is ``(W_i @ theta(q))`` where ``W_i``
holds one weight per (motor input, neuron) pair.  The same composite
adaptation drives both estimators; the image estimator also feeds the
tracking error back into its update.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass

import numpy as np


class AdaptationError(ValueError):
    pass


class EstimatorError(ValueError):
    pass


@dataclass(frozen=True)
class RbfBasis:
    """Gaussian radial basis over (a prefix of) the motor vector.

    ``input_scale`` multiplies coordinate differences before the distance
    is taken, so inputs with different units (rad vs mm) can share one
    width per neuron.
    """

    centers: np.ndarray          # (xi, d)
    widths: np.ndarray           # (xi,)
    input_scale: np.ndarray      # (d,)

    def __post_init__(self):
        c = np.atleast_2d(np.asarray(self.centers, dtype=float))
        w = np.asarray(self.widths, dtype=float).reshape(-1)
        s = np.broadcast_to(np.asarray(self.input_scale, dtype=float), (c.shape[1],)).copy()
        if len(c) < 1 or len(w) != len(c):
            raise EstimatorError("need one width per centre and at least one centre")
        if np.any(w <= 0) or np.any(s <= 0):
            raise EstimatorError("widths and input scales must be positive")
        for a in (c, w, s):
            a.setflags(write=False)
        object.__setattr__(self, "centers", c)
        object.__setattr__(self, "widths", w)
        object.__setattr__(self, "input_scale", s)

    @property
    def size(self) -> int:
        return len(self.widths)

    @property
    def dim(self) -> int:
        return self.centers.shape[1]

    def __call__(self, q) -> np.ndarray:
        """theta(q); ``q`` may carry more coordinates than the basis uses and
        may be batched over leading axes."""
        q = np.asarray(q, dtype=float)[..., : self.dim]
        diff = (q[..., None, :] - self.centers) * self.input_scale
        r2 = np.einsum("...ij,...ij->...i", diff, diff)
        return np.exp(-r2 / (2.0 * self.widths ** 2))


def eval_basis(basis: RbfBasis, q) -> np.ndarray:
    return basis(q)


def grid_basis(q_limit: float = math.pi / 2, per_axis: int = 3, q3_mid: float | None = None,
               q3_span: float = 880.0) -> RbfBasis:
    """Grid of centres over the deflection box, widths equal to the spacing.

    With ``q3_mid`` given the basis is 3-D: every centre sits at the middle
    of the insertion range, and insertion is rescaled so its whole span
    covers one grid spacing.
    """
    axis = np.linspace(-q_limit, q_limit, per_axis)
    spacing = float(axis[1] - axis[0]) if per_axis > 1 else 2.0 * q_limit
    g1, g2 = np.meshgrid(axis, axis, indexing="ij")
    centers = np.stack([g1.ravel(), g2.ravel()], axis=1)
    scale = np.ones(2)
    if q3_mid is not None:
        centers = np.hstack([centers, np.full((len(centers), 1), q3_mid)])
        scale = np.array([1.0, 1.0, spacing / q3_span])
    return RbfBasis(centers, np.full(len(centers), spacing), scale)


class _RbfJacobian:
    """Shared machinery: rows x inputs x neurons weights on one basis."""

    def __init__(self, basis: RbfBasis, rows: int, inputs: int, mu_e: float, mu_y: float,
                 gamma_inv=1.0, init_scale: float = 0.01, seed=0):
        if rows < 1 or inputs < 1:
            raise EstimatorError("estimator needs at least one row and one input")
        self.basis = basis
        self.mu_e = float(mu_e)
        self.mu_y = float(mu_y)
        shape = (rows, inputs, basis.size)
        g = np.broadcast_to(np.asarray(gamma_inv, dtype=float), shape).copy()
        if np.any(g <= 0) or not np.all(np.isfinite(g)):
            raise EstimatorError("gain matrix entries must be positive")
        self.gamma_inv = g
        rng = np.random.default_rng(seed)
        self.weights = rng.uniform(-init_scale, init_scale, shape) if init_scale > 0 \
            else np.zeros(shape)

    @property
    def rows(self) -> int:
        return self.weights.shape[0]

    @property
    def inputs(self) -> int:
        return self.weights.shape[1]

    def jacobian(self, q) -> np.ndarray:
        """Row ``i`` is ``W_i @ theta(q)``; batched over leading axes of ``q``."""
        th = self.basis(q)
        return np.einsum("rjk,...k->...rj", self.weights, th)

    def predict_flow(self, q, qdot) -> np.ndarray:
        return self.jacobian(q) @ np.asarray(qdot, dtype=float)[: self.inputs]

    def flow_prediction_error(self, q, qdot, measured) -> np.ndarray:
        measured = np.asarray(measured, dtype=float)
        if measured.shape != (self.rows,):
            raise EstimatorError(f"flow has shape {measured.shape}, expected ({self.rows},)")
        return measured - self.predict_flow(q, qdot)

    def increment(self, drive, q, qdot, dt: float) -> np.ndarray:
        """Weight increment ``dt * gamma_inv * Q(qdot) Theta(q) drive`` in (rows, inputs, xi) form."""
        th = self.basis(q)
        qd = np.asarray(qdot, dtype=float)[: self.inputs]
        return dt * self.gamma_inv * (drive[:, None, None] * qd[None, :, None] * th[None, None, :])

    def _apply(self, drive, q, qdot, dt) -> None:
        vals = [np.asarray(v, dtype=float) for v in (drive, q, qdot)]
        if not (dt > 0 and math.isfinite(dt)) or not all(np.all(np.isfinite(v)) for v in vals):
            raise AdaptationError("adaptation inputs must be finite with dt > 0")
        inc = self.increment(vals[0], vals[1], vals[2], dt)
        new = self.weights + inc
        if not np.all(np.isfinite(new)):
            raise AdaptationError("adaptation produced non-finite weights")
        self.weights = new

    def stability_bound(self, q, qdot) -> float:
        """Largest dt for which a prediction-error-only step cannot grow the error.

        ``Theta^T Q^T Gamma^-1 Q Theta`` is diagonal with one entry per row.
        """
        th = self.basis(q)
        qd = np.asarray(qdot, dtype=float)[: self.inputs]
        m = np.einsum("rjk,j,k->r", self.gamma_inv, qd * qd, th * th)
        top = float(m.max()) if m.size else 0.0
        return math.inf if top == 0.0 or self.mu_y == 0.0 else 2.0 / (self.mu_y * top)

    def snapshot(self) -> "_RbfJacobian":
        clone = object.__new__(type(self))
        clone.__dict__.update(self.__dict__)
        clone.weights = self.weights.copy()
        clone.weights.setflags(write=False)
        return clone

    # explicit matrix forms, used to cross-check the compact code paths
    def theta_matrix(self, q) -> np.ndarray:
        """Block-diagonal Theta(q): (rows * xi, rows)."""
        th = self.basis(q)
        return np.kron(np.eye(self.rows), th[:, None])

    def q_matrix(self, qdot) -> np.ndarray:
        """Q(qdot) = blockdiag over rows of kron(qdot, I_xi): (rows*inputs*xi, rows*xi)."""
        qd = np.asarray(qdot, dtype=float)[: self.inputs]
        block = np.kron(qd[:, None], np.eye(self.basis.size))
        return np.kron(np.eye(self.rows), block)

    def stacked_weights(self) -> np.ndarray:
        """W-bar: row-major stack of every W_i (input-major inside a row)."""
        return self.weights.reshape(-1).copy()


class ImageJacobianEstimator(_RbfJacobian):
    """Two-row estimate of the feature Jacobian over the three motors."""

    def __init__(self, basis: RbfBasis | None = None, mu_e: float = 0.01, mu_y: float = 0.2,
                 gamma_inv=1.0, init_scale: float = 0.01, seed=0):
        super().__init__(basis if basis is not None else grid_basis(q3_mid=440.0), 2, 3,
                         mu_e, mu_y, gamma_inv, init_scale, seed)

    def adapt(self, e, flow_error, q, qdot, dt: float) -> None:
        """Composite step driven by the tracking error and the flow prediction error."""
        e = np.asarray(e, dtype=float)
        f = np.asarray(flow_error, dtype=float)
        if e.shape != (2,) or f.shape != (2,):
            raise AdaptationError("tracking and flow errors must both have two components")
        with np.errstate(all="ignore"):
            drive = self.mu_e * e + self.mu_y * f
        self._apply(drive, q, qdot, dt)


class ShapeJacobianEstimator(_RbfJacobian):
    """Active-shape flow per unit deflection-motor velocity, one network per coordinate."""

    def __init__(self, rows: int = 75, basis: RbfBasis | None = None, mu_y: float = 0.2,
                 gamma_inv=1.0, init_scale: float = 0.01, seed=0):
        super().__init__(basis if basis is not None else grid_basis(), rows, 2,
                         0.0, mu_y, gamma_inv, init_scale, seed)

    def adapt(self, flow_error, q, qdot, dt: float) -> None:
        f = np.asarray(flow_error, dtype=float)
        if f.shape != (self.rows,):
            raise EstimatorError(f"shape flow error has shape {f.shape}, expected ({self.rows},)")
        self._apply(self.mu_y * f, q, qdot, dt)


def shape_estimator(est: ShapeJacobianEstimator, q, qdot, measured_flow, dt: float):
    """One learning step on the active-shape flow.

    Returns ``(J_s, err)`` where ``J_s`` is evaluated before the update and
    ``err`` is the flow prediction error that drove it.
    """
    measured_flow = np.asarray(measured_flow, dtype=float)
    if measured_flow.shape != (est.rows,):
        raise EstimatorError(f"measured flow has shape {measured_flow.shape}, "
                             f"expected ({est.rows},)")
    J = est.jacobian(q)
    err = measured_flow - J @ np.asarray(qdot, dtype=float)[:2]
    est.adapt(err, q, qdot, dt)
    return J, err


# ---------------------------------------------------------------------------
# weight files
# ---------------------------------------------------------------------------

def save_weights(path, nets: dict) -> None:
    """Write ``{name: estimator}`` as ``net,row,neuron,weight`` rows.

    ``row`` counts (output row, motor input) pairs, so each CSV row holds one
    entry of a ``W_i`` matrix.
    """
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["net", "row", "neuron", "weight"])
        for name, est in nets.items():
            flat = est.weights.reshape(-1, est.basis.size)
            for r, vals in enumerate(flat):
                for k, v in enumerate(vals):
                    w.writerow([name, r, k, repr(float(v))])


def load_weights(path, nets: dict) -> None:
    """Restore weights written by :func:`save_weights` into matching estimators."""
    found = {name: np.full(est.weights.shape, np.nan).reshape(-1, est.basis.size)
             for name, est in nets.items()}
    with open(path, newline="") as fh:
        reader = csv.DictReader(fh)
        if reader.fieldnames != ["net", "row", "neuron", "weight"]:
            raise EstimatorError(f"{path}: unexpected header {reader.fieldnames}")
        for rec in reader:
            name = rec["net"]
            if name not in found:
                raise EstimatorError(f"{path}: unknown net {name!r}")
            found[name][int(rec["row"]), int(rec["neuron"])] = float(rec["weight"])
    for name, arr in found.items():
        if np.any(np.isnan(arr)):
            raise EstimatorError(f"{path}: incomplete weights for {name!r}")
        nets[name].weights = arr.reshape(nets[name].weights.shape)
