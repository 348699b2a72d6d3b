"""Top-view semantic grid segmentation of LiDAR scans with pillar features and ray-cast occupancy."""

from .grid import GridSpec, default_spec
from .model import ModelConfig, forward, init_params, predict
from .trainer import AugmentConfig, TrainConfig, train

__version__ = "0.1.0"
