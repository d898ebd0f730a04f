"""Pseudo-label guided unsupervised image segmentation by per-image CNN refinement."""
from .config import RunConfig, load_config
from .evaluation import EvalReport, MultiAnnotationReport, evaluate, evaluate_multi
from .network import forward, init_params, parameter_count
from .synthetic import CorruptionSpec, SceneSpec, corrupt_labels, generate_scene
from .trainer import RunTrace, refine

__version__ = "0.1.0"

__all__ = [
    "RunConfig", "load_config", "EvalReport", "MultiAnnotationReport", "evaluate",
    "evaluate_multi", "forward", "init_params", "parameter_count", "CorruptionSpec",
    "SceneSpec", "corrupt_labels", "generate_scene", "RunTrace", "refine",
]
