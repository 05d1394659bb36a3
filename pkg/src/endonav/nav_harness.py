"""Closed-loop navigation trials, paired comparisons and result files."""

from __future__ import annotations

import configparser
import csv
import math
from dataclasses import dataclass, field, fields, replace
from pathlib import Path

import numpy as np

from .depth_guidance import Intrinsics, extract_roi, image_feature, render_depth, RenderError
from .geometry_core import ConfigError, PhantomSpec, InvalidShapeError, make_phantom, save_shape_csv
from .jacobian_learning import (ImageJacobianEstimator, ShapeJacobianEstimator, grid_basis,
                                shape_estimator)
from .mpc_control import (MpcConfig, MpcProblem, insertion_feedforward, insertion_samples,
                  solve_mpc, solve_vision_mpc, velocity_control)
from .plant_sim import ContactLockError, Endoscope, PlantParams, ground_truth_shape, step, true_tip_pose
from .proprioception import (PassiveShapeFilter, StiffnessParams, elastic_energy, sense_shape,
                             to_base_frame)

MODES = ("with", "without", "velocity")


# ---------------------------------------------------------------------------
# configuration
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class TaskSection:
    name: str = "task"
    mode: str = "with"
    seed: int = 0
    trials: int = 8
    stop_fraction: float = 0.9       # of phantom length, counted as 120 + q3
    max_ticks: int = 10000
    start_deflection: float = 0.05   # rad, uniform jitter of q1, q2 per trial
    degraded_budget: int = 50        # consecutive degraded solver ticks before failing
    max_mean_error_px: float = 5.0   # a finished trial tracking worse than this fails

    def __post_init__(self):
        if self.mode not in MODES:
            raise ConfigError(f"mode must be one of {MODES}, got {self.mode!r}")
        if self.trials < 1:
            raise ConfigError("trial count must be >= 1")


@dataclass(frozen=True)
class SensingConfig:
    sigma: float = 0.01              # shape readout noise, mm
    filter_process: float = 0.01
    EI: float = 1.0e4
    GJ: float = 1.0e4
    # below ~0.03 /mm (0.15 rad per 5 mm sample) the Frenet binormal of the
    # contact-marched body wanders and its torsion is noise
    kappa_floor: float = 0.03

    @property
    def stiffness(self) -> StiffnessParams:
        return StiffnessParams(self.EI, self.GJ, self.kappa_floor)


@dataclass(frozen=True)
class CameraConfig:
    width: int = 32
    height: int = 32
    fov_deg: float = 100.0
    max_depth: float = 300.0
    alpha: float = 0.5

    @property
    def intrinsics(self) -> Intrinsics:
        return Intrinsics.from_fov(self.width, self.height, self.fov_deg)


@dataclass(frozen=True)
class LearningConfig:
    mu_e: float = 0.01
    mu_y: float = 0.2
    gamma_image: float = 20.0
    gamma_shape: float = 20.0
    # the insertion column sees velocities ~40x larger than the deflection
    # columns; its gain is divided by the squared rate-limit ratio
    normalize_insertion: bool = True
    init_scale: float = 0.01
    rbf_limit: float = math.pi / 2


# closed-loop planner settings; the module defaults of MpcConfig stay generic
CLOSED_LOOP_MPC = MpcConfig(lam_scale=0.001, candidates=32, iterations=2, insertion_speed=40.0,
                            insertion_gate=8.0, energy_steps=6)


@dataclass(frozen=True)
class TaskConfig:
    task: TaskSection = TaskSection()
    phantom: PhantomSpec = PhantomSpec()
    plant: PlantParams = PlantParams()
    sensing: SensingConfig = SensingConfig()
    camera: CameraConfig = CameraConfig()
    learning: LearningConfig = LearningConfig()
    mpc: MpcConfig = CLOSED_LOOP_MPC


_SECTIONS = {f.name: f.type for f in fields(TaskConfig)}


_OPTIONAL = ("insertion_speed", "energy_steps")
_INT_KEYS = ("energy_steps",)


def _convert(raw: str, default, name: str):
    text = raw.strip()
    if isinstance(default, bool):
        return text.lower() in ("1", "true", "yes", "on")
    if isinstance(default, tuple):
        return tuple(float(v) for v in text.split(","))
    if default is None or name in _OPTIONAL:
        if text.lower() in ("none", ""):
            return None
        return int(text) if name in _INT_KEYS else float(text)
    if isinstance(default, int):
        return int(text)
    if isinstance(default, float):
        return float(text)
    return text


def load_config(path) -> TaskConfig:
    """Read an INI task file; unknown sections or keys are config errors."""
    parser = configparser.ConfigParser()
    parser.optionxform = str      # keys are field names, EI and GJ included
    if not parser.read(path):
        raise ConfigError(f"cannot read config {path}")
    base = TaskConfig()
    parts = {}
    for sec in parser.sections():
        if sec not in _SECTIONS:
            raise ConfigError(f"{path}: unknown section [{sec}]")
        current = getattr(base, sec)
        known = {f.name: getattr(current, f.name) for f in fields(current)}
        kw = {}
        for key, raw in parser.items(sec):
            if key not in known:
                raise ConfigError(f"{path}: unknown key {key!r} in [{sec}]")
            try:
                kw[key] = _convert(raw, known[key], key)
            except ValueError as exc:
                raise ConfigError(f"{path}: bad value for {sec}.{key}: {raw!r}") from exc
        parts[sec] = replace(current, **kw)
    return replace(base, **parts)


# ---------------------------------------------------------------------------
# metrics and logs
# ---------------------------------------------------------------------------

@dataclass
class TaskMetrics:
    T_in: float = 0.0            # s
    L_et: float = 0.0            # mm
    mean_e_px: float = 0.0
    mean_e_mm: float = 0.0
    energy_flow: float = 0.0     # sum |E(t+1) - E(t)| of the true body
    success: bool = False
    ticks: int = 0
    failure: str = ""
    e_norms: list = field(default_factory=list, repr=False)
    energies: list = field(default_factory=list, repr=False)
    tip_start: np.ndarray | None = field(default=None, repr=False)
    tip_end: np.ndarray | None = field(default=None, repr=False)


METRIC_COLUMNS = ("T_in_s", "L_et_mm", "e_px", "energy_flow")


class _Logs:
    """Per-tick CSV logs of one trial (kept in memory, written at the end)."""

    HEADERS = {
        "features.csv": ["t_s", "yx_px", "yy_px", "ex_px", "ey_px"],
        "control.csv": ["t_s", "q1", "q2", "q3", "qd1", "qd2", "qd3", "objective", "flag"],
        "energy.csv": ["t_s", "E_b", "E_t"],
        "flow_error.csv": ["t_s", "image_flow_px_s", "shape_flow_mm_s"],
    }

    def __init__(self):
        self.rows = {k: [] for k in self.HEADERS}

    def add(self, name, *values):
        self.rows[name].append([_fmt(v) for v in values])

    def write(self, out_dir: Path):
        out_dir.mkdir(parents=True, exist_ok=True)
        for name, header in self.HEADERS.items():
            with open(out_dir / name, "w", newline="") as fh:
                w = csv.writer(fh, lineterminator="\n")
                w.writerow(header)
                w.writerows(self.rows[name])


def _fmt(v):
    if isinstance(v, str):
        return v
    if isinstance(v, (bool, np.bool_)):
        return int(v)
    return f"{float(v):.9g}"


# ---------------------------------------------------------------------------
# closed loop
# ---------------------------------------------------------------------------

def image_gains(cfg: TaskConfig) -> np.ndarray:
    """Diagonal of the image-network gain as a (2, 3, 1) broadcastable array."""
    lc = cfg.learning
    g = np.full((2, 3, 1), lc.gamma_image)
    if lc.normalize_insertion:
        lim = cfg.plant.rate_limits
        g[:, 2] *= (lim[0] / lim[2]) ** 2
    return g


def trial_seed(cfg: TaskConfig, trial_index: int) -> int:
    return int(cfg.task.seed) * 1000 + int(trial_index)


def run_trial(cfg: TaskConfig, trial_index: int = 0, out_dir=None, mode: str | None = None,
              shape_every: int = 0) -> TaskMetrics:
    """One navigation run: sense, render, learn, solve, actuate until a stop criterion.

    Deterministic for a given ``(cfg, trial_index, mode)``.  Contact lock,
    render failure or running out of ticks end the trial unsuccessfully with
    the metrics gathered so far.
    """
    mode = mode or cfg.task.mode
    if mode not in MODES:
        raise ConfigError(f"mode must be one of {MODES}, got {mode!r}")
    seed = trial_seed(cfg, trial_index)
    rng = np.random.default_rng([seed, 17])
    lumen = make_phantom(cfg.phantom)
    plant = Endoscope(lumen, replace(cfg.plant, seed=seed))
    jitter = rng.uniform(-1.0, 1.0, 2) * cfg.task.start_deflection
    state = plant.initial_state(*jitter)
    intr = cfg.camera.intrinsics
    dt = cfg.mpc.dt
    stiff = cfg.sensing.stiffness
    lc = cfg.learning
    est_c = ImageJacobianEstimator(grid_basis(lc.rbf_limit, q3_mid=0.5 * cfg.plant.max_insertion,
                                              q3_span=cfg.plant.max_insertion),
                                   lc.mu_e, lc.mu_y, image_gains(cfg), lc.init_scale, [seed, 1])
    n_active = len(state.active)
    est_s = ShapeJacobianEstimator(3 * n_active, grid_basis(lc.rbf_limit), lc.mu_y,
                                   lc.gamma_shape, lc.init_scale, [seed, 2])
    filt = None
    mpc_cfg = replace(cfg.mpc, seed=seed)
    target_q3 = cfg.task.stop_fraction * lumen.length - plant.params.active_length
    logs = _Logs()
    m = TaskMetrics()
    tip = true_tip_pose(state)[0]
    m.tip_start = tip.copy()
    feat = None
    prev_y = prev_local = None
    prev_q = state.q.copy()
    prev_qd = np.zeros(3)
    carry = 0.0
    E_prev = None
    depth_scale = []
    run_dir = Path(out_dir) if out_dir is not None else None

    tick = n_degraded = 0
    while True:
        t = tick * dt
        # --- proprioception -------------------------------------------------
        s_a, s_p = sense_shape(state, [seed, tick, 3], cfg.sensing.sigma)
        truth = ground_truth_shape(state)
        E = elastic_energy(truth, stiff)
        logs.add("energy.csv", t, E.E_b, E.E_t)
        if E_prev is not None:
            m.energy_flow += abs(E.E - E_prev)
        E_prev = E.E
        m.energies.append(E.E)
        if run_dir is not None and shape_every and tick % shape_every == 0:
            (run_dir / "shapes").mkdir(parents=True, exist_ok=True)
            save_shape_csv(run_dir / "shapes" / f"shape_{tick:05d}.csv", truth)

        # --- vision ----------------------------------------------------------
        try:
            dm = render_depth(true_tip_pose(state), lumen, intr, cfg.camera.max_depth)
        except RenderError as exc:
            m.failure = f"render: {exc}"
            break
        roi = extract_roi(dm)
        feat = image_feature(roi, feat, cfg.camera.alpha)
        e = feat.error
        m.e_norms.append(float(np.linalg.norm(e)))
        depth_scale.append(float(np.mean(dm.depth[roi.mask])) / intr.focal)
        logs.add("features.csv", t, feat.y[0], feat.y[1], e[0], e[1])

        # --- learning --------------------------------------------------------
        local = to_base_frame(s_a.samples, state.base_pos, state.base_R)
        img_err = shp_err = float("nan")
        if prev_y is not None:
            ydot = (feat.y - prev_y) / dt
            ferr = est_c.flow_prediction_error(prev_q, prev_qd, ydot)
            est_c.adapt(e, ferr, prev_q, prev_qd, dt)
            sdot = (local - prev_local).ravel() / dt
            serr = sdot - est_s.predict_flow(prev_q, prev_qd)
            est_s.adapt(serr, prev_q, prev_qd, dt)
            img_err, shp_err = float(np.linalg.norm(ferr)), float(np.linalg.norm(serr))
        logs.add("flow_error.csv", t, img_err, shp_err)
        prev_y, prev_local = feat.y.copy(), local

        s_p_pred = None
        if s_p is not None:
            if filt is None:
                filt = PassiveShapeFilter(len(s_p), cfg.sensing.filter_process, max(cfg.sensing.sigma, 1e-6))
            elif len(s_p) > filt.n:
                filt.grow(len(s_p))
            elif len(s_p) < filt.n:
                filt = PassiveShapeFilter(len(s_p), cfg.sensing.filter_process, max(cfg.sensing.sigma, 1e-6))
            filt.update(s_p.samples)
            filt.predict()
            s_p_pred = filt.estimate

        # --- stop ------------------------------------------------------------
        if state.q[2] >= target_q3 - 1e-9:
            m.success = True
            break
        if tick >= cfg.task.max_ticks:
            m.failure = "tick limit"
            break

        # --- control ---------------------------------------------------------
        objective, flag = float("nan"), "ok"
        if mode == "velocity" or (mpc_cfg.horizon < 0):
            J = est_c.jacobian(state.q)
            qd = np.zeros(3)
            qd[:2] = velocity_control(e, J[:, :2], mpc_cfg.mu_c, mpc_cfg.damping,
                                      mpc_cfg.rate_limits[:2])
            if mpc_cfg.insertion_speed is not None:
                qd[2] = insertion_feedforward(e, mpc_cfg.insertion_speed, mpc_cfg.insertion_gate)
        else:
            prob = MpcProblem(y=feat.y, y_d=feat.y_d, q=state.q.copy(), est_c=est_c.snapshot(),
                              est_s=est_s.snapshot(), s_a_local=local,
                              base_pos=state.base_pos, base_R=state.base_R, s_p=s_p_pred,
                              spacing=plant.params.spacing, carry=carry, stiffness=stiff,
                              tick=tick)
            solver = solve_mpc if mode == "with" else solve_vision_mpc
            try:
                sol = solver(prob, mpc_cfg)
            except InvalidShapeError as exc:
                m.failure = f"prediction: {exc}"
                break
            qd = sol.first
            objective = sol.objective
            flag = "degraded" if sol.degraded else "ok"
            n_degraded = n_degraded + 1 if sol.degraded else 0
            if n_degraded > cfg.task.degraded_budget:
                m.failure = f"solver degraded for {n_degraded} consecutive ticks"
                break
        qd[2] = max(qd[2], 0.0)
        assert qd[2] >= 0.0, "insertion velocity must be non-negative"
        _, carry = insertion_samples(qd[2], dt, plant.params.spacing, carry)
        logs.add("control.csv", t, *state.q, *qd, objective, flag)

        # --- actuation -------------------------------------------------------
        prev_q, prev_qd = state.q.copy(), qd.copy()
        try:
            state = step(state, qd, dt)
        except ContactLockError as exc:
            m.failure = f"contact lock: {exc}"
            break
        new_tip = true_tip_pose(state)[0]
        m.L_et += float(np.linalg.norm(new_tip - tip))
        tip = new_tip
        tick += 1

    m.ticks = tick
    m.T_in = tick * dt
    m.tip_end = tip.copy()
    if m.e_norms:
        m.mean_e_px = float(np.mean(m.e_norms))
        m.mean_e_mm = float(np.mean(np.asarray(m.e_norms) * np.asarray(depth_scale)))
    if m.success and m.mean_e_px > cfg.task.max_mean_error_px:
        m.success = False
        m.failure = f"mean tracking error {m.mean_e_px:.2f} px above {cfg.task.max_mean_error_px} px"
    if run_dir is not None:
        logs.write(run_dir)
    return m


# ---------------------------------------------------------------------------
# experiments
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class ExcitationConfig:
    """Open-loop sinusoidal deflection in the straight tube, insertion held.

    The amplitude keeps the active section off the wall, so the learned
    Jacobians face a smooth contact-free plant.
    """

    ticks: int = 2000
    dt: float = 0.05
    amplitude: float = 0.18          # rad
    periods: tuple = (8.0, 11.0)     # s, for q1 and q2
    phase: float = 0.5               # rad, q2 lead
    sigma: float = 0.0               # shape readout noise, mm
    width: int = 128                 # px; the ROI centre is quantized to pixels
    alpha: float = 0.5
    gamma_image: float = 20.0
    gamma_shape: float = 20.0
    shape_rbf_limit: float = 0.3     # rad; the shape grid covers the excited range
    seed: int = 0


def excitation_velocity(cfg: ExcitationConfig, t: float) -> np.ndarray:
    w = [2.0 * math.pi / p for p in cfg.periods]
    a = cfg.amplitude
    return np.array([a * w[0] * math.cos(w[0] * t), a * w[1] * math.cos(w[1] * t + cfg.phase), 0.0])


def excitation_learning(cfg: ExcitationConfig = ExcitationConfig()):
    """Flow prediction error norms of both networks under :func:`excitation_velocity`.

    Returns ``(image_err, shape_err)``, one value per tick after the first.
    """
    lumen = make_phantom(PhantomSpec("straight"))
    plant = Endoscope(lumen, PlantParams())
    state = plant.initial_state()
    intr = Intrinsics.from_fov(cfg.width, cfg.width)
    est_c = ImageJacobianEstimator(gamma_inv=cfg.gamma_image, seed=[cfg.seed, 1])
    est_s = ShapeJacobianEstimator(3 * len(state.active), grid_basis(cfg.shape_rbf_limit),
                                   gamma_inv=cfg.gamma_shape, seed=[cfg.seed, 2])
    feat = prev_y = prev_local = None
    img, shp = [], []
    for k in range(cfg.ticks + 1):
        qd = excitation_velocity(cfg, k * cfg.dt)
        q = state.q.copy()
        state = step(state, qd, cfg.dt)
        dm = render_depth(true_tip_pose(state), lumen, intr)
        feat = image_feature(extract_roi(dm), feat, cfg.alpha)
        s_a, _ = sense_shape(state, [cfg.seed, k], cfg.sigma)
        local = to_base_frame(s_a.samples, state.base_pos, state.base_R).ravel()
        if prev_y is not None:
            ferr = est_c.flow_prediction_error(q, qd, (feat.y - prev_y) / cfg.dt)
            est_c.adapt(feat.error, ferr, q, qd, cfg.dt)
            _, serr = shape_estimator(est_s, q, qd, (local - prev_local) / cfg.dt, cfg.dt)
            img.append(float(np.linalg.norm(ferr)))
            shp.append(float(np.linalg.norm(serr)))
        prev_y, prev_local = feat.y.copy(), local
    return np.array(img), np.array(shp)


def converged_tick(errors, window: int = 50, fraction: float = 0.1):
    """First tick whose trailing moving average drops below ``fraction`` of the
    first window's average, or ``None``."""
    errors = np.asarray(errors, dtype=float)
    if len(errors) < window:
        return None
    ma = np.convolve(errors, np.ones(window) / window, mode="valid")
    hit = np.nonzero(ma < fraction * ma[0])[0]
    return int(hit[0]) + window - 1 if len(hit) else None


def metrics_row(m: TaskMetrics):
    return [m.T_in, m.L_et, m.mean_e_px, m.energy_flow]


def write_metrics(path, records):
    """``records``: iterable of (mode, trial, TaskMetrics)."""
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["mode", "trial", "success", "ticks", "T_in_s", "L_et_mm", "e_px", "e_mm",
                    "energy_flow", "failure"])
        for mode, i, m in records:
            w.writerow([mode, i, int(m.success), m.ticks, _fmt(m.T_in), _fmt(m.L_et),
                        _fmt(m.mean_e_px), _fmt(m.mean_e_mm), _fmt(m.energy_flow), m.failure])


@dataclass
class Comparison:
    task: str
    trials: dict            # mode -> list[TaskMetrics]

    def summary(self, mode):
        ok = [m for m in self.trials[mode] if m.success]
        cols = np.array([metrics_row(m) for m in ok]) if ok else np.full((0, 4), np.nan)
        return ok, cols

    def paired(self, column: int):
        """Per-trial ``(with, without)`` values for trials both modes finished."""
        pairs = []
        for a, b in zip(self.trials["with"], self.trials["without"]):
            if a.success and b.success:
                pairs.append((metrics_row(a)[column], metrics_row(b)[column]))
        return np.array(pairs).reshape(-1, 2)


def _trial_job(args):
    cfg, i, sub, mode = args
    return run_trial(cfg, i, sub, mode=mode)


def run_comparison(cfg: TaskConfig, n_trials: int | None = None, out_dir=None,
                   modes=("without", "with"), jobs: int = 1) -> Comparison:
    """Paired runs of the two planners over the same trial seeds.

    Writes ``comparison.csv`` (one row per mode, mean ± std over successful
    trials) and ``metrics.csv`` (every trial) when ``out_dir`` is given.
    ``jobs > 1`` spreads trials over worker processes; every trial owns its
    state, so the files do not depend on the job count.
    """
    n = cfg.task.trials if n_trials is None else n_trials
    if n < 2:
        raise ConfigError("a comparison needs at least two trials")
    out = Path(out_dir) if out_dir is not None else None
    work = [(cfg, i, out / f"{mode}_{i:02d}" if out is not None else None, mode)
            for i in range(n) for mode in modes]
    if jobs > 1:
        from concurrent.futures import ProcessPoolExecutor
        with ProcessPoolExecutor(max_workers=jobs) as pool:
            results = list(pool.map(_trial_job, work))
    else:
        results = [_trial_job(w) for w in work]
    trials = {mode: [] for mode in modes}
    records = []
    for (_, i, _, mode), m in zip(work, results):
        trials[mode].append(m)
        records.append((mode, i, m))
    comp = Comparison(cfg.task.name, trials)
    if out is not None:
        out.mkdir(parents=True, exist_ok=True)
        write_metrics(out / "metrics.csv", records)
        write_comparison(out / "comparison.csv", comp)
    return comp


def write_comparison(path, comp: Comparison) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["task", "mode", "trials", "failed", *METRIC_COLUMNS])
        for mode, label in (("without", "w/o planning"), ("with", "w/ planning")):
            if mode not in comp.trials:
                continue
            ok, cols = comp.summary(mode)
            cells = []
            for j in range(4):
                if len(ok):
                    cells.append(f"{np.mean(cols[:, j]):.4f} ± {np.std(cols[:, j]):.4f}")
                else:
                    cells.append("nan")
            w.writerow([comp.task, label, len(comp.trials[mode]),
                        len(comp.trials[mode]) - len(ok), *cells])


# ---------------------------------------------------------------------------
# plots
# ---------------------------------------------------------------------------

class PlotError(RuntimeError):
    pass


_PANELS = (
    ("tracking_error.svg", "features.csv", ("ex_px", "ey_px"), "image tracking error |e| (px)"),
    ("shape_flow_error.svg", "flow_error.csv", ("shape_flow_mm_s",), "shape flow prediction error (mm/s)"),
    ("bending_energy.svg", "energy.csv", ("E_b",), "bending energy E_b"),
    ("torsion_energy.svg", "energy.csv", ("E_t",), "torsion energy E_t"),
)


def _read_columns(path: Path, needed):
    if not path.exists():
        raise PlotError(f"missing log {path}")
    with open(path, newline="") as fh:
        reader = csv.DictReader(fh)
        header = reader.fieldnames or []
        for col in ("t_s", *needed):
            if col not in header:
                raise PlotError(f"{path}: missing column {col!r}")
        rows = list(reader)
    return {c: np.array([float(r[c]) for r in rows]) for c in ("t_s", *needed)}


def emit_plots(run_dir) -> list:
    """Four SVG line plots per trial directory found under ``run_dir``."""
    import matplotlib
    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    root = Path(run_dir)
    dirs = sorted({p.parent for p in root.rglob("features.csv")}) if root.exists() else []
    if not dirs:
        raise PlotError(f"no trial logs under {root}")
    written = []
    plt.rcParams["svg.hashsalt"] = "endonav"
    for d in dirs:
        for svg, log, cols, label in _PANELS:
            data = _read_columns(d / log, cols)
            if len(cols) == 2:
                series = np.hypot(data[cols[0]], data[cols[1]])
            else:
                series = data[cols[0]]
            fig, ax = plt.subplots(figsize=(5, 3))
            ax.plot(data["t_s"], series, lw=1.0)
            ax.set_xlabel("t (s)")
            ax.set_ylabel(label)
            fig.tight_layout()
            fig.savefig(d / svg, metadata={"Date": None})
            plt.close(fig)
            written.append(d / svg)
    return written
