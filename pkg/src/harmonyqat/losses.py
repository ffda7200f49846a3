"""Training objectives: standard detection loss plus the harmony terms.

The harmony terms couple the two head outputs per positive sample:
a task-correlation indicator c = p^u * u^p (exponents detached), an
exponential penalty on low c reweighted by the score gap, and an IoU loss
reweighted toward high-IoU samples.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from enum import Enum
from typing import Optional

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor

SCORE_EPS = 1e-6
HIOU_GAMMA = 0.8
HIOU_TRADEOFF = 1.5
FOCAL_GAMMA = 2.0
FOCAL_ALPHA = 0.25


class LossMode(Enum):
    BASELINE = "BASELINE"
    TCORR = "TCORR"
    HQOD = "HQOD"


@dataclass
class LossConfig:
    mode: LossMode = LossMode.BASELINE
    gamma: float = HIOU_GAMMA
    sigma: float = HIOU_TRADEOFF
    focal_gamma: float = FOCAL_GAMMA
    focal_alpha: float = FOCAL_ALPHA
    eps: float = SCORE_EPS

    def __post_init__(self):
        if isinstance(self.mode, str):
            self.mode = LossMode(self.mode)
        if self.gamma <= 0 or self.sigma < 0 or not (0 < self.eps < 1e-2):
            raise ValueError("invalid loss configuration")


@dataclass
class LossBreakdown:
    total: float
    cls_component: float
    reg_component: float
    tcorr_component: float
    hiou_component: float
    positives: int
    negatives: int

    def to_dict(self) -> dict:
        return {
            "total": self.total,
            "cls": self.cls_component,
            "reg": self.reg_component,
            "tcorr": self.tcorr_component,
            "hiou": self.hiou_component,
            "positives": self.positives,
            "negatives": self.negatives,
        }


def task_correlation(p: Tensor, u: Tensor, eps: float = SCORE_EPS) -> Tensor:
    """Joint quality/consistency indicator in (0, 1].

    c = p^u * u^p with both exponents detached, so gradients flow only
    through the bases; high when both scores are high or both are low,
    low when the scores disagree or both sit mid-range.
    """
    p = ad.as_tensor(p).clamp(eps, 1.0)
    u = ad.as_tensor(u).clamp(eps, 1.0)
    return ad.power(p, u.detach()) * ad.power(u, p.detach())


def tcorr_loss(p: Tensor, u: Tensor, eps: float = SCORE_EPS) -> Tensor:
    """Per-positive harmony penalty alpha * (e^-c - e^-1), zero iff c == 1.

    alpha = 1 + |p - u| is a detached reweighting factor emphasizing samples
    with a wide gap between the two task scores.
    """
    p = ad.as_tensor(p)
    u = ad.as_tensor(u)
    c = task_correlation(p, u, eps)
    alpha = 1.0 + (p.detach() - u.detach()).abs()
    return alpha * ((-c).exp() - math.exp(-1.0))


def hiou_loss(u: Tensor, gamma: float = HIOU_GAMMA) -> Tensor:
    """IoU loss (1+u)^gamma * (1-u): strictly decreasing in u, with the
    (1+u)^gamma weight pushing optimization pressure toward high-IoU samples."""
    u = ad.as_tensor(u)
    return ad.power(1.0 + u, gamma) * (1.0 - u)


def focal_cls_loss(scores: Tensor, targets: np.ndarray,
                   gamma: float = FOCAL_GAMMA, alpha: float = FOCAL_ALPHA,
                   eps: float = SCORE_EPS) -> Tensor:
    """Elementwise sigmoid focal loss, summed. scores and one-hot targets
    share a shape; target 1 entries are positives, 0 entries background."""
    scores = ad.as_tensor(scores).clamp(eps, 1.0 - eps)
    t = np.asarray(targets, dtype=np.float64)
    if t.shape != scores.shape:
        raise ValueError(f"targets shape {t.shape} != scores shape {scores.shape}")
    pos = ad.power(1.0 - scores, gamma) * scores.log() * (-alpha)
    neg = ad.power(scores, gamma) * (1.0 - scores).log() * (-(1.0 - alpha))
    per_elem = Tensor(t) * pos + Tensor(1.0 - t) * neg
    return per_elem.sum()


def giou_loss(px1: Tensor, py1: Tensor, px2: Tensor, py2: Tensor,
              gt: np.ndarray) -> Tensor:
    """Per-positive 1 - GIoU in [0, 2]; gives a gradient even for disjoint boxes."""
    gt = np.asarray(gt, dtype=np.float64).reshape(-1, 4)
    gx1, gy1, gx2, gy2 = (Tensor(gt[:, i]) for i in range(4))
    ix = ad.maximum(ad.minimum(px2, gx2) - ad.maximum(px1, gx1), 0.0)
    iy = ad.maximum(ad.minimum(py2, gy2) - ad.maximum(py1, gy1), 0.0)
    inter = ix * iy
    area_p = ad.maximum(px2 - px1, 0.0) * ad.maximum(py2 - py1, 0.0)
    area_g = (gx2 - gx1) * (gy2 - gy1)
    union = area_p + area_g - inter
    iou = inter / union
    ex = ad.maximum(px2, gx2) - ad.minimum(px1, gx1)
    ey = ad.maximum(py2, gy2) - ad.minimum(py1, gy1)
    enclose = ex * ey
    giou = iou - (enclose - union) / enclose
    return 1.0 - giou


@dataclass
class PositiveBatch:
    """Differentiable per-positive quantities feeding the combined objective."""
    p: Optional[Tensor]            # [P] gt-class scores
    u: Optional[Tensor]            # [P] decoded-box IoU vs matched gt, in [0,1]
    cls_loss: Optional[Tensor]     # [P] per-positive classification losses
    reg_loss: Optional[Tensor]     # [P] per-positive regression losses
    neg_cls_loss: Optional[Tensor]  # scalar sum over negatives
    positives: int
    negatives: int


def hqod_total(batch: PositiveBatch, config: LossConfig) -> tuple[Tensor, LossBreakdown]:
    """Combine the detection loss with the mode-selected harmony terms.

    BASELINE: (1/P)(sum_pos(cls+reg) + sum_neg cls)
    TCORR:    + (1/P) sum_pos tcorr
    HQOD:     + (1/P) sum_pos (tcorr + sigma * hiou)
    With P == 0 the divisor is 1 and only the negative term survives.
    """
    p_count = batch.positives
    divisor = max(p_count, 1)
    zero = Tensor(0.0)
    cls_pos = batch.cls_loss.sum() if (p_count and batch.cls_loss is not None) else zero
    reg_pos = batch.reg_loss.sum() if (p_count and batch.reg_loss is not None) else zero
    neg = batch.neg_cls_loss if batch.neg_cls_loss is not None else zero
    total = (cls_pos + reg_pos + neg) / float(divisor)
    cls_component = (float(cls_pos.values) + float(neg.values)) / divisor
    reg_component = float(reg_pos.values) / divisor
    tcorr_component = 0.0
    hiou_component = 0.0
    if p_count and config.mode in (LossMode.TCORR, LossMode.HQOD):
        tcorr = tcorr_loss(batch.p, batch.u, config.eps).sum() / float(divisor)
        tcorr_component = float(tcorr.values)
        total = total + tcorr
    if p_count and config.mode == LossMode.HQOD:
        u_clamped = batch.u.clamp(config.eps, 1.0)
        hiou = hiou_loss(u_clamped, config.gamma).sum() * (config.sigma / divisor)
        hiou_component = float(hiou.values)
        total = total + hiou
    breakdown = LossBreakdown(
        total=float(total.values),
        cls_component=cls_component,
        reg_component=reg_component,
        tcorr_component=tcorr_component,
        hiou_component=hiou_component,
        positives=p_count,
        negatives=batch.negatives,
    )
    return total, breakdown
