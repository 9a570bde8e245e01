"""Coarse-to-fine GNSS pseudorange error estimation on a small numpy autodiff engine."""
from .coarse import BACKBONES, CoarseEstimator, selective_scan
from .diffusion import DiffusionConfig, build_schedule, ddim_sample, forward_diffuse, refine
from .features import FeatureWindow, build_windows, compute_stats, normalize_features, split_dataset
from .model import DiffGNSS, ModelConfig
from .observations import EpochObservation, load_observations, save_observations
from .spp import solve_spp
from .training import TrainConfig, load_checkpoint, save_checkpoint, train

__version__ = "0.1.0"
