"""Geometry-aware confidence rescoring for black-box LiDAR 3D detectors."""

from .errors import DataFormatError, GaceError
from .estimator import GaceRescorer
from .evaluation import (EvalReport, average_precision, conditional_precision,
                         evaluate, oracle_gap, pr_curve)
from .features import NormConfig, ablation_mask
from .geometry import (BoundingBox3D, PointStats, bev_overlap_area,
                       canonicalize, iou3d, point_statistics, points_in_box,
                       viewing_angle)
from .io import (load_model, load_store, read_dataset, save_model,
                 save_store, write_dataset)
from .net import GaceModel, LossConfig, build_model
from .supervision import (Detection, GroundTruth, LabeledDetection,
                          assign_labels, default_thresholds)
from .synth import (DetectorErrorModel, SceneConfig, error_model_a,
                    error_model_b, generate_frames, generate_scene,
                    simulate_detector)
from .trainer import (Frame, Rescorer, TrainConfig, TrainingStore,
                      build_training_set, rescore, train)

__version__ = "0.1.0"

__all__ = [
    "BoundingBox3D", "DataFormatError", "Detection", "DetectorErrorModel",
    "EvalReport", "Frame", "GaceError", "GaceModel", "GaceRescorer",
    "GroundTruth", "LabeledDetection", "LossConfig", "NormConfig",
    "PointStats", "Rescorer", "SceneConfig", "TrainConfig", "TrainingStore",
    "ablation_mask", "assign_labels", "average_precision",
    "bev_overlap_area", "build_model", "build_training_set", "canonicalize",
    "conditional_precision", "default_thresholds", "error_model_a",
    "error_model_b", "evaluate", "generate_frames", "generate_scene",
    "iou3d", "load_model", "load_store", "oracle_gap", "point_statistics",
    "points_in_box", "pr_curve", "read_dataset", "rescore", "save_model",
    "save_store", "simulate_detector", "train", "viewing_angle",
    "write_dataset",
]
