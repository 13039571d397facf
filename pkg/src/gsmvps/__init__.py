"""Multi-view photometric stereo with 2D Gaussian splats and deferred physically based shading."""

from .checkpoint import Checkpoint, load_checkpoint, save_checkpoint
from .config import Config, desk_config
from .data import MVPSDataset, load_dataset, save_dataset
from .edit import EditSpec, Region, apply_edit
from .evaluate import EvalReport, relight, render_view
from .scene import Camera, DirectionalLight, Gaussian2D, GaussianScene

__version__ = "0.1.0"

__all__ = [
    "Camera", "Checkpoint", "Config", "DirectionalLight", "EditSpec", "EvalReport", "Gaussian2D", "GaussianScene",
    "MVPSDataset", "Region", "apply_edit", "desk_config", "load_checkpoint", "load_dataset", "relight",
    "render_view", "save_checkpoint", "save_dataset",
]
