"""Graph neural network potentials for water clusters.

Pretrain a continuous-filter convolution network on potential-energy minima,
finetune it with a force-weighted loss and error-threshold active sampling,
transfer it to a second surface, and check it by running molecular dynamics
re-scored on a reference potential.
"""

__version__ = "0.1.0"

from .chemdata import Cluster, ClusterSet, SplitIndices, batch_clusters, read_xyz, save_xyz, split_dataset
from .dynamics import MDConfig, run_ensemble, run_md, validate_trajectory
from .evaluation import MetricsReport, energy_histogram, evaluate_model
from .model import ModelConfig, ModelParams, NNPProvider, init_params, predict
from .sampling import ActiveConfig, ErrorStats, SamplingPools, active_round, active_training_loop, promotion_decision
from .surrogate import SurrogateProvider, SurrogateSpec, generate_minima, generate_nonminima, relabel
from .training import Checkpoint, LossConfig, Schedule, finetune, load_checkpoint, save_checkpoint, train

__all__ = [
    "ActiveConfig", "Checkpoint", "Cluster", "ClusterSet", "ErrorStats", "LossConfig", "MDConfig",
    "MetricsReport", "ModelConfig", "ModelParams", "NNPProvider", "SamplingPools", "Schedule",
    "SplitIndices", "SurrogateProvider", "SurrogateSpec", "active_round", "active_training_loop",
    "batch_clusters", "energy_histogram", "evaluate_model", "finetune", "generate_minima",
    "generate_nonminima", "init_params", "load_checkpoint", "predict", "promotion_decision",
    "read_xyz", "relabel", "run_ensemble", "run_md", "save_checkpoint", "save_xyz",
    "split_dataset", "train", "validate_trajectory",
]
