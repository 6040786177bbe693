"""Attention-based graph convolution modules (AGCM) for salient object detection."""

from .agcm import AgcmConfig, agcm_forward
from .checkpoint import load_checkpoint, save_checkpoint
from .data import SceneSpec, gen_dataset, gen_scene, load_dir, read_pnm, write_pnm
from .errors import (AgcmError, CheckpointError, ConfigError, DataError, NumericError,
                     OptimizerError, PnmError, ShapeError, UsageError)
from .estimator import SaliencyDetector
from .metrics import EvalReport, e_measure, evaluate, f_measure, mae, s_measure
from .network import NetworkConfig, build_params, model_forward
from .training import TrainConfig, train

__version__ = "0.1.0"

__all__ = [
    "AgcmConfig", "agcm_forward", "load_checkpoint", "save_checkpoint", "SceneSpec",
    "gen_dataset", "gen_scene", "load_dir", "read_pnm", "write_pnm", "AgcmError",
    "CheckpointError", "ConfigError", "DataError", "NumericError", "OptimizerError",
    "PnmError", "ShapeError", "UsageError", "SaliencyDetector", "EvalReport", "e_measure",
    "evaluate", "f_measure", "mae", "s_measure", "NetworkConfig", "build_params",
    "model_forward", "TrainConfig", "train",
]
