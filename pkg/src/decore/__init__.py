"""Multi-agent REINFORCE channel pruning on a small numpy training engine."""
from .accounting import compression_report, count_flops, count_params, prune
from .agents import AgentBank, keep_probabilities, sample_actions
from .data import Dataset, load_idx, synth_data
from .graph import GraphSpec, attach_gates, build_resnet_tiny, build_vgg16_cifar, build_vgg_tiny
from .kernels import BACKEND
from .rewards import RewardConfig, reinforce_gradient
from .search import Constraint, search_by_constraint, verify_constraint
from .training import Checkpoint, TrainConfig, evaluate, load_checkpoint, save_checkpoint, train, train_baseline

__version__ = "0.1.0"
