"""Services for point cloud registration and domain adaptation."""

from .checkpoint import load_checkpoint, save_checkpoint
from .evaluator import evaluate_predictions, sdlogj, summarize, tre
from .export_formatter import ExportFormatter
from .geometry import DisplacementField, PointCloud, chamfer_distance
from .run_registry import RunRegistry
from .visualizer import Visualizer

__all__ = [
    "DisplacementField",
    "ExportFormatter",
    "PointCloud",
    "RunRegistry",
    "Visualizer",
    "chamfer_distance",
    "evaluate_predictions",
    "load_checkpoint",
    "save_checkpoint",
    "sdlogj",
    "summarize",
    "tre",
]
