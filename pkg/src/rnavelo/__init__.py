"""RNA velocity toolkit: splicing kinetics, EM inference, time rescaling,
uncertainty, velocity-kernel random walks and hitting-time pseudo-time."""

__version__ = "0.1.0"

from .dynamics import GeneKinetics  # noqa: E402
from .synth import SimConfig, ExpressionDataset, generate, generate_bifurcation  # noqa: E402
from .inference import EmConfig, em_infer, velocity_field  # noqa: E402
from .rescale import rescale  # noqa: E402
from .uq import sem_covariance  # noqa: E402
from .kernelwalk import KernelSpec, build_graph, transition_matrix, bandwidth_sweep  # noqa: E402
from .hitting import HittingProblem, solve_hitting, pseudo_time, bifurcation_gap  # noqa: E402

__all__ = [
    "GeneKinetics", "SimConfig", "ExpressionDataset", "generate", "generate_bifurcation",
    "EmConfig", "em_infer", "velocity_field", "rescale", "sem_covariance", "KernelSpec",
    "build_graph", "transition_matrix", "bandwidth_sweep", "HittingProblem", "solve_hitting",
    "pseudo_time", "bifurcation_gap",
]
