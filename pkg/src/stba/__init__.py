"""Bundle adjustment with a stochastically clustered reduced camera system."""

from .bal import read_bal, write_bal, write_bal_params
from .bench import (CostCurve, PerturbSpec, ProfileInput, SyntheticSpec,
                    generate_synthetic, performance_profile, perturb,
                    profile_rows)
from .clustering import (CameraGraph, ClusterAssignment, build_camera_graph,
                         cluster_deterministic, cluster_stochastic,
                         delta_modularity, modularity, sample_merge)
from .errors import (BalParseError, DegenerateProjection, InfeasibleSpec,
                     InvalidProblem, NotPositiveDefinite, PcgStalled,
                     SingularPointBlock, SingularVirtualBlock, StbaError)
from .lm import DampingState, SolverConfig, lm_minimize
from .problem import (BundleProblem, Camera, project, residual, residuals_all,
                      total_cost)
from .robust import JacobianBlocks, huber_rho, weighted_blocks
from .stochastic import minimize, stba_minimize
from .trace import SolveTrace

__version__ = "0.1.0"

__all__ = [
    "BalParseError", "BundleProblem", "Camera", "CameraGraph",
    "ClusterAssignment", "CostCurve", "DampingState", "DegenerateProjection",
    "InfeasibleSpec", "InvalidProblem", "JacobianBlocks", "NotPositiveDefinite",
    "PcgStalled", "PerturbSpec", "ProfileInput", "SingularPointBlock",
    "SingularVirtualBlock", "SolveTrace", "SolverConfig", "StbaError",
    "SyntheticSpec", "build_camera_graph", "cluster_deterministic",
    "cluster_stochastic", "delta_modularity", "generate_synthetic", "huber_rho",
    "lm_minimize", "minimize", "modularity", "performance_profile", "perturb",
    "profile_rows", "project", "read_bal", "residual", "residuals_all",
    "sample_merge", "stba_minimize", "total_cost", "weighted_blocks",
    "write_bal", "write_bal_params",
]
