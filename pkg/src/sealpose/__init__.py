"""Energy-guided 3D pose lifting: pose-net, learned structural loss-net, metrics and tooling."""
from .errors import ContractError, DiagnosticWarning, NumericError
from .estimators import SealPoseRegressor
from .gbi import GbiConfig, gbi_refine
from .lossnet import LossNetConfig, init_lossnet, lossnet_energy
from .objectives import ObjectiveConfig
from .posenet import PoseNetConfig, init_posenet, posenet_forward
from .preprocessing import PoseScaler
from .skeleton import SkeletonSpec, get_skeleton, h36m17
from .synthdata import CameraModel, GeneratorConfig, PoseDataset, make_dataset
from .trainer import TrainConfig, greedy_sweep, train_run

__version__ = "0.1.0"

__all__ = [
    "CameraModel",
    "ContractError",
    "DiagnosticWarning",
    "GbiConfig",
    "GeneratorConfig",
    "LossNetConfig",
    "NumericError",
    "ObjectiveConfig",
    "PoseDataset",
    "PoseNetConfig",
    "PoseScaler",
    "SealPoseRegressor",
    "SkeletonSpec",
    "TrainConfig",
    "gbi_refine",
    "get_skeleton",
    "greedy_sweep",
    "h36m17",
    "init_lossnet",
    "init_posenet",
    "lossnet_energy",
    "make_dataset",
    "posenet_forward",
    "train_run",
]
