"""Point cloud shape completion with graph attention and adaptive patch densification."""
from .autodiff import NonFiniteError, ShapeError, Tape, Tensor, backward, grad_check
from .estimator import ShapeCompleter
from .geometry import PointCloud, RigidTransform, chamfer_distance, icp_register, knn_search, rotation_from_normal
from .model import ModelConfig, forward, init_params, load_params, save_params
from .training import TrainConfig, evaluate, train

__all__ = [
    "ModelConfig", "NonFiniteError", "PointCloud", "RigidTransform", "ShapeCompleter", "ShapeError", "Tape",
    "Tensor", "TrainConfig", "backward", "chamfer_distance", "evaluate", "forward", "grad_check",
    "icp_register", "init_params", "knn_search", "load_params", "rotation_from_normal", "save_params", "train",
]
__version__ = "0.1.0"
