"""Knowledge-distillation workbench: a small numpy transformer, KD losses and reports."""

__version__ = "0.1.0"

from .analysis import PredictionLog, ScoreTable, compute_metric, degradation_heatmap, recipe_table
from .benchmark import BenchConfig, measure_throughput
from .checkpoint import load_checkpoint, save_checkpoint
from .data import Dataset, Example, build_vocab, gen_synthetic, get_task, load_tsv
from .distill import DistillConfig, resolve_layer_map
from .model import ModelConfig, build_model, forward, param_count, student_grid
from .tensor import Tensor, backward, no_grad
from .training import RunConfig, distill, evaluate, finetune, train_teacher

__all__ = [
    "BenchConfig", "Dataset", "DistillConfig", "Example", "ModelConfig", "PredictionLog",
    "RunConfig", "ScoreTable", "Tensor", "backward", "build_model", "build_vocab",
    "compute_metric", "degradation_heatmap", "distill", "evaluate", "finetune", "forward",
    "gen_synthetic", "get_task", "load_checkpoint", "load_tsv", "measure_throughput",
    "no_grad", "param_count", "recipe_table", "resolve_layer_map", "save_checkpoint",
    "student_grid", "train_teacher",
]
