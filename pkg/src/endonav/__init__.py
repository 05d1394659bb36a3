"""Learning-based visual servoing and energy-aware planning for a simulated
flexible endoscope."""

from .geometry_core import ArcShape, ConfigError, InvalidShapeError, Lumen, PhantomSpec, make_phantom
from .nav_harness import TaskConfig, load_config, run_comparison, run_trial
from .mpc_control import MpcConfig, solve_mpc, solve_vision_mpc, velocity_control

__all__ = ["ArcShape", "ConfigError", "InvalidShapeError", "Lumen", "PhantomSpec",
           "make_phantom", "TaskConfig", "load_config", "run_comparison", "run_trial",
           "MpcConfig", "solve_mpc", "solve_vision_mpc", "velocity_control"]
