"""Desk-scale laboratory for harmony-aware quantization of object detectors."""

from .autodiff import Tensor, conv2d, custom_grad, finite_diff_check, matmul
from .detector import Box, Detection, DetectorNet, GroundTruth, iou, nms
from .losses import (LossConfig, LossMode, hiou_loss, hqod_total,
                     task_correlation, tcorr_loss)
from .quantize import BitPolicy, QuantMode, QuantParams, fake_quantize, init_step

__all__ = [
    "Tensor", "conv2d", "custom_grad", "finite_diff_check", "matmul",
    "Box", "Detection", "DetectorNet", "GroundTruth", "iou", "nms",
    "LossConfig", "LossMode", "hiou_loss", "hqod_total",
    "task_correlation", "tcorr_loss",
    "BitPolicy", "QuantMode", "QuantParams", "fake_quantize", "init_step",
]

__version__ = "0.1.0"
