"""Multi-task stacked hourglass pipeline for MPFL drill-site planning on lateral knee radiographs."""

from .dataset_io import AnnotationSet, GrayImage, Sample, load_dataset, load_sample, save_sample, split_dataset
from .errors import (ConfigError, DatasetLoadError, KneeplanError, PlanningError, TrainingDivergedError,
                     ValidationError)
from .model import NetworkConfig, StackedHourglass, build_network, load_checkpoint, save_checkpoint
from .phantom import PhantomSpec, analytic_schoettle, generate_phantom, random_spec
from .planner import Line2D, PlanningResult, plan, plan_from_inputs, schoettle_point
from .trainer import ExperimentConfig, TrainConfig, load_config, train

__version__ = "0.1.0"

__all__ = [
    "AnnotationSet", "GrayImage", "Sample", "load_dataset", "load_sample", "save_sample", "split_dataset",
    "ConfigError", "DatasetLoadError", "KneeplanError", "PlanningError", "TrainingDivergedError", "ValidationError",
    "NetworkConfig", "StackedHourglass", "build_network", "load_checkpoint", "save_checkpoint",
    "PhantomSpec", "analytic_schoettle", "generate_phantom", "random_spec",
    "Line2D", "PlanningResult", "plan", "plan_from_inputs", "schoettle_point",
    "ExperimentConfig", "TrainConfig", "load_config", "train",
]
