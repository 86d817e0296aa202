"""Time-aware long- and short-term attention network for next-item recommendation."""

from .evaluate import EvalReport, auc, evaluate_popularity, precision_recall_at_k
from .ingest import Dataset, Example, build_dataset, read_dataset, write_dataset
from .model import ModelParams, forward, load_checkpoint, save_checkpoint
from .synth import SynthSpec, generate_synthetic
from .train import TrainConfig, grad_check, train_loop

__version__ = "0.1.0"

__all__ = [
    "Dataset", "EvalReport", "Example", "ModelParams", "SynthSpec", "TrainConfig",
    "auc", "build_dataset", "evaluate_popularity", "forward", "generate_synthetic",
    "grad_check", "load_checkpoint", "precision_recall_at_k", "read_dataset", "save_checkpoint",
    "train_loop", "write_dataset",
]
