"""Heart-rate estimation from wrist PPG with a CNN + LSTM network.

The network, its reverse-mode autograd core, signal preparation, ECG
ground truth, training/cross-validation harness, metrics and a synthetic
data generator all live here; ``ppgnet.cli`` wires them to the command line.
"""
from .dataio import DataError, Recording, WindowedDataset, load_windowed, save_windowed
from .estimator import PPGNetRegressor
from .metrics import EvalReport, mae, pcc, sdae
from .model import BLOCK_NAMES, ModelConfig, PPGNetModel, build_model
from .prepare import PrepareConfig, prepare_dataset, prepare_recording
from .trainer import TrainConfig, kfold_folds, loso_folds, run_condition, sparse_subset, train

__version__ = "0.1.0"

__all__ = [
    "BLOCK_NAMES",
    "DataError",
    "EvalReport",
    "ModelConfig",
    "PPGNetModel",
    "PPGNetRegressor",
    "PrepareConfig",
    "Recording",
    "TrainConfig",
    "WindowedDataset",
    "build_model",
    "kfold_folds",
    "load_windowed",
    "loso_folds",
    "mae",
    "pcc",
    "prepare_dataset",
    "prepare_recording",
    "run_condition",
    "save_windowed",
    "sdae",
    "sparse_subset",
    "train",
]
