"""Flow matching with optimal acceleration transport refinement, on a small numpy autodiff core."""

from .bench import BenchmarkReport, EvalConfig, TaskSpec, evaluate, run_benchmark, sample_dataset
from .estimators import FlowMatching, OATFlowRefiner
from .flows import Phase1Config, train_phase1
from .geometry import PhasePoint, accel_energy, bound_constant, cubic_minimizer, oat_cost, optimal_vt, pair_loss
from .model import VelocityField, init, load_checkpoint, save_checkpoint
from .oatfm import RefineConfig, refine
from .ode import integrate_dopri5, integrate_euler, integrate_rk4, path_energy
from .otcore import cost_matrix, empirical_w2, solve_exact, solve_sinkhorn

__version__ = "0.1.0"

__all__ = [
    "BenchmarkReport",
    "EvalConfig",
    "FlowMatching",
    "OATFlowRefiner",
    "Phase1Config",
    "PhasePoint",
    "RefineConfig",
    "TaskSpec",
    "VelocityField",
    "accel_energy",
    "bound_constant",
    "cost_matrix",
    "cubic_minimizer",
    "empirical_w2",
    "evaluate",
    "init",
    "integrate_dopri5",
    "integrate_euler",
    "integrate_rk4",
    "load_checkpoint",
    "oat_cost",
    "optimal_vt",
    "pair_loss",
    "path_energy",
    "refine",
    "run_benchmark",
    "sample_dataset",
    "save_checkpoint",
    "solve_exact",
    "solve_sinkhorn",
    "train_phase1",
]
