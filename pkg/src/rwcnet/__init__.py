"""Recurrent correlation network for coarse-to-fine 3-D deformable registration, in numpy."""

__version__ = "0.1.0"

from .config import NetworkConfig, RunConfig, StageConfig, apply_ablation, smoke_config, table1_config
from .data import RegistrationPair, SyntheticPair, generate_synthetic_pair
from .model import RegistrationResult, init_params, multiscale_forward
from .objectives import KeypointSet, LossWeights
from .params import Adam, ParameterSet, load_params, save_params
from .spatial import Volume3D, warp
from .tensor import Tensor

__all__ = [
    "Adam",
    "KeypointSet",
    "LossWeights",
    "NetworkConfig",
    "ParameterSet",
    "RegistrationPair",
    "RegistrationResult",
    "RunConfig",
    "StageConfig",
    "SyntheticPair",
    "Tensor",
    "Volume3D",
    "apply_ablation",
    "generate_synthetic_pair",
    "init_params",
    "load_params",
    "multiscale_forward",
    "save_params",
    "smoke_config",
    "table1_config",
    "warp",
]
