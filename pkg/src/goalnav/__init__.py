"""Image-goal navigation with an early-fusion transformer.

Submodules: ``geometry``, ``data``, ``sim``, ``model``, ``training``, ``idm``,
``evaluation``, ``experiments``, ``config`` and ``cli``.
"""

from .geometry import Pose, RelPose, WaypointAction, encode, pose_yaw_distance, relative_pose
from .data import Episode, TrainingSample, normalize_dataset, filter_outliers
from .model import ModelConfig, NavigationModel, InverseDynamicsModel, build_model, load_checkpoint, save_checkpoint
from .training import LossWeights, TrainConfig, train, finetune, validate
from .evaluation import EvalReport, ModelPolicy, evaluate

__version__ = "0.1.0"

__all__ = [
    "Pose", "RelPose", "WaypointAction", "encode", "pose_yaw_distance", "relative_pose",
    "Episode", "TrainingSample", "normalize_dataset", "filter_outliers",
    "ModelConfig", "NavigationModel", "InverseDynamicsModel", "build_model",
    "load_checkpoint", "save_checkpoint",
    "LossWeights", "TrainConfig", "train", "finetune", "validate",
    "EvalReport", "ModelPolicy", "evaluate",
]
