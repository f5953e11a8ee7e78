"""Localization-error diagnostics for monocular 3D object detection."""

from .diagnosis import run_table1, substitute
from .evaluation import EvalConfig, ap40, rangewise_eval
from .geometry import Box3D, iou_3d
from .kitti_io import Calibration, ObjectLabel, parse_calib_file, parse_label_file

__all__ = [
    "Box3D",
    "Calibration",
    "EvalConfig",
    "ObjectLabel",
    "ap40",
    "iou_3d",
    "parse_calib_file",
    "parse_label_file",
    "rangewise_eval",
    "run_table1",
    "substitute",
]
__version__ = "0.1.0"
