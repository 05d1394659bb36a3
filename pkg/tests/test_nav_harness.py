import csv
from dataclasses import replace
from pathlib import Path

import numpy as np
import pytest

from endonav.cli import main
from endonav.geometry_core import ConfigError, PhantomSpec
from endonav.nav_harness import (METRIC_COLUMNS, PlotError, TaskConfig, TaskSection, emit_plots,
                                 load_config, run_comparison, run_trial)

CONFIGS = Path(__file__).resolve().parents[1] / "configs"


def short(kind="s_curve", stop=0.3, **task):
    """A few seconds of insertion: 120 + q3 stops at ``stop`` of the tube length."""
    return TaskConfig(task=TaskSection(name=kind, stop_fraction=stop, **task),
                      phantom=PhantomSpec(kind))


def read_rows(path):
    with open(path, newline="") as fh:
        return list(csv.reader(fh))


@pytest.fixture(scope="module")
def straight_run(tmp_path_factory):
    out = tmp_path_factory.mktemp("straight") / "with_00"
    cfg = TaskConfig(task=TaskSection(name="straight"), phantom=PhantomSpec("straight"))
    return cfg, run_trial(cfg, 0, out), out


# --- trials -----------------------------------------------------------------

def test_trial_is_deterministic(tmp_path):
    a = run_trial(short(), 3, tmp_path / "a")
    b = run_trial(short(), 3, tmp_path / "b")
    for name in ("T_in", "L_et", "mean_e_px", "mean_e_mm", "energy_flow", "success", "ticks",
                 "e_norms", "energies"):
        assert getattr(a, name) == getattr(b, name)
    np.testing.assert_array_equal(a.tip_end, b.tip_end)
    for log in (tmp_path / "a").iterdir():
        assert log.read_bytes() == (tmp_path / "b" / log.name).read_bytes()


def test_straight_tube_with_planning_succeeds(straight_run):
    cfg, m, _ = straight_run
    assert m.success, m.failure
    assert m.mean_e_px < cfg.task.max_mean_error_px
    assert m.T_in > 0 and m.mean_e_mm >= 0


def test_zero_length_stop():
    m = run_trial(short("straight", stop=0.12), 0)
    assert m.success and m.T_in == 0.0 and m.L_et == 0.0


@pytest.mark.parametrize("kind", ["straight", "s_curve", "multi_bend"])
def test_path_length_bounds_displacement(kind):
    m = run_trial(short(kind, stop=0.25), 1, mode="without")
    assert m.L_et >= np.linalg.norm(m.tip_end - m.tip_start) - 1e-9
    assert min(m.T_in, m.L_et, m.mean_e_px, m.energy_flow) >= 0


def test_tracking_error_decays(straight_run):
    _, m, _ = straight_run
    e = np.asarray(m.e_norms)
    q = len(e) // 4
    assert e[-q:].mean() < e[:q].mean()


def test_velocity_mode_runs():
    m = run_trial(short("straight", stop=0.2), 0, mode="velocity")
    assert m.success, m.failure


# --- comparison -------------------------------------------------------------

def test_self_comparison_has_zero_difference(tmp_path):
    cfg = short("s_curve", stop=0.2)
    cfg = replace(cfg, mpc=replace(cfg.mpc, lam_scale=0.0))
    comp = run_comparison(cfg, 2, tmp_path)
    for col in range(4):
        pairs = comp.paired(col)
        assert len(pairs) == 2
        np.testing.assert_array_equal(pairs[:, 0], pairs[:, 1])
    rows = read_rows(tmp_path / "comparison.csv")
    assert rows[0][-4:] == list(METRIC_COLUMNS)
    assert len(rows) == 3 and all(len(r) == 8 for r in rows)
    assert len(read_rows(tmp_path / "metrics.csv")) == 5


def test_comparison_needs_two_trials():
    with pytest.raises(ConfigError):
        run_comparison(short(), 1)


# --- plots ------------------------------------------------------------------

def test_plots_for_a_trial(straight_run):
    _, _, out = straight_run
    files = emit_plots(out)
    assert sorted(f.name for f in files) == ["bending_energy.svg", "shape_flow_error.svg",
                                             "torsion_energy.svg", "tracking_error.svg"]
    assert all(f.stat().st_size > 0 for f in files)
    counts = {len(read_rows(out / log)) for log in ("features.csv", "energy.csv",
                                                   "flow_error.csv")}
    assert len(counts) == 1
    # one control row per actuated tick, one feature row per sensed tick
    assert len(read_rows(out / "control.csv")) == len(read_rows(out / "features.csv")) - 1


def test_plots_need_logs(tmp_path):
    with pytest.raises(PlotError):
        emit_plots(tmp_path)


def test_plots_name_missing_column(tmp_path, straight_run):
    _, _, out = straight_run
    bad = tmp_path / "t"
    bad.mkdir()
    for name in ("features.csv", "flow_error.csv"):
        (bad / name).write_bytes((out / name).read_bytes())
    (bad / "energy.csv").write_text("t_s,E_b\n0,1\n")
    with pytest.raises(PlotError, match="E_t"):
        emit_plots(bad)


# --- configs and CLI --------------------------------------------------------

@pytest.mark.parametrize("name,kind", [("task1_straight.ini", "straight"),
                                       ("task2_scurve.ini", "s_curve"),
                                       ("task3_multibend.ini", "multi_bend")])
def test_shipped_configs_match_defaults(name, kind):
    cfg = load_config(CONFIGS / name)
    assert cfg.phantom.kind == kind
    assert replace(cfg, task=replace(cfg.task, name="task"),
                   phantom=replace(cfg.phantom, kind="straight")) == TaskConfig()


def test_unknown_config_key(tmp_path):
    path = tmp_path / "bad.ini"
    path.write_text("[task]\nspeed = 3\n")
    with pytest.raises(ConfigError, match="speed"):
        load_config(path)


def test_cli_run_and_plot(tmp_path, capsys):
    cfg = tmp_path / "short.ini"
    cfg.write_text("[task]\nstop_fraction = 0.15\n[phantom]\nkind = straight\n")
    out = tmp_path / "runs"
    assert main(["run", "--config", str(cfg), "--trials", "1", "--mode", "without",
                 "--out", str(out)]) == 0
    assert (out / "metrics.csv").exists() and (out / "without_00" / "control.csv").exists()
    assert main(["plot", "--run", str(out)]) == 0
    assert len(list(out.rglob("*.svg"))) == 4
    assert main(["plot", "--run", str(tmp_path / "missing")]) == 2
