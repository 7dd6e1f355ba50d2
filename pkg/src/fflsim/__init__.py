"""fflsim: a deterministic simulator for communication-adaptive federated
SGD with unbiased atomic-decomposition gradient compression."""

__version__ = "0.1.0"

from .config import ExperimentConfig, load_config
from .federation import Experiment, run_experiment

__all__ = ["ExperimentConfig", "load_config", "Experiment", "run_experiment", "__version__"]
