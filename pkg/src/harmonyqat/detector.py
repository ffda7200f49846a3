"""Toy single-scale dense detector: grid predictions, assignment, decode, IoU, NMS.

The network is deliberately small (a conv stem, three conv blocks, and two
parallel conv heads over an 8x8 grid) so that full training runs finish in
minutes while keeping the classification/regression two-head structure.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Optional, Sequence

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor

IMAGE_SIZE = 64
GRID_STRIDE = 8
GRID_CELLS = IMAGE_SIZE // GRID_STRIDE  # 8x8 grid
NUM_CLASSES = 3

NMS_IOU_THRESHOLD = 0.5
SCORE_THRESHOLD = 0.05
MAX_DETECTIONS = 100


@dataclass(frozen=True)
class Box:
    x1: float
    y1: float
    x2: float
    y2: float

    def __post_init__(self):
        if not (self.x1 < self.x2 and self.y1 < self.y2):
            raise ValueError(f"degenerate box {(self.x1, self.y1, self.x2, self.y2)}")

    @property
    def area(self) -> float:
        return (self.x2 - self.x1) * (self.y2 - self.y1)

    def as_array(self) -> np.ndarray:
        return np.array([self.x1, self.y1, self.x2, self.y2], dtype=np.float64)


@dataclass(frozen=True)
class GroundTruth:
    box: Box
    class_id: int


@dataclass(frozen=True)
class Detection:
    box: Box
    class_id: int
    score: float
    cell_index: int = -1


def iou(a: Box, b: Box) -> float:
    ix = max(0.0, min(a.x2, b.x2) - max(a.x1, b.x1))
    iy = max(0.0, min(a.y2, b.y2) - max(a.y1, b.y1))
    inter = ix * iy
    union = a.area + b.area - inter
    return inter / union if union > 0 else 0.0


def iou_matrix(boxes_a: np.ndarray, boxes_b: np.ndarray) -> np.ndarray:
    """Pairwise IoU of [N,4] x [M,4] xyxy arrays."""
    a = np.asarray(boxes_a, dtype=np.float64).reshape(-1, 4)
    b = np.asarray(boxes_b, dtype=np.float64).reshape(-1, 4)
    ix = np.clip(np.minimum(a[:, None, 2], b[None, :, 2]) - np.maximum(a[:, None, 0], b[None, :, 0]), 0, None)
    iy = np.clip(np.minimum(a[:, None, 3], b[None, :, 3]) - np.maximum(a[:, None, 1], b[None, :, 1]), 0, None)
    inter = ix * iy
    area_a = (a[:, 2] - a[:, 0]) * (a[:, 3] - a[:, 1])
    area_b = (b[:, 2] - b[:, 0]) * (b[:, 3] - b[:, 1])
    union = area_a[:, None] + area_b[None, :] - inter
    with np.errstate(divide="ignore", invalid="ignore"):
        out = np.where(union > 0, inter / union, 0.0)
    return out


def iou_tensor(px1: Tensor, py1: Tensor, px2: Tensor, py2: Tensor,
               gt: np.ndarray) -> Tensor:
    """Differentiable elementwise IoU of predicted coords against fixed gt [P,4]."""
    gx1, gy1, gx2, gy2 = (Tensor(gt[:, i]) for i in range(4))
    ix = ad.maximum(ad.minimum(px2, gx2) - ad.maximum(px1, gx1), 0.0)
    iy = ad.maximum(ad.minimum(py2, gy2) - ad.maximum(py1, gy1), 0.0)
    inter = ix * iy
    area_p = ad.maximum(px2 - px1, 0.0) * ad.maximum(py2 - py1, 0.0)
    area_g = (gx2 - gx1) * (gy2 - gy1)
    union = area_p + area_g - inter
    return inter / union


def cell_centers(grid: int = GRID_CELLS, stride: int = GRID_STRIDE) -> np.ndarray:
    """[grid*grid, 2] array of (cx, cy) centers, row-major over (row, col)."""
    idx = np.arange(grid * grid)
    cx = (idx % grid + 0.5) * stride
    cy = (idx // grid + 0.5) * stride
    return np.stack([cx, cy], axis=1)


def decode(centers: np.ndarray, l: Tensor, t: Tensor, r: Tensor, b: Tensor):
    """Distances-from-center to xyxy coordinates; linear hence trivially differentiable."""
    cx, cy = Tensor(centers[:, 0]), Tensor(centers[:, 1])
    return cx - l, cy - t, cx + r, cy + b


def encode(box: Box, center: Sequence[float]) -> np.ndarray:
    """Inverse of decode for a single box: positive (l, t, r, b) distances."""
    cx, cy = center
    return np.array([cx - box.x1, cy - box.y1, box.x2 - cx, box.y2 - cy], dtype=np.float64)


def assign_targets(gts: Sequence[GroundTruth], grid: int = GRID_CELLS,
                   stride: int = GRID_STRIDE):
    """Cell is positive iff its center lies inside a gt box; ties go to the
    smallest-area box. Returns (pos_cells, pos_gt_idx, neg_cells)."""
    centers = cell_centers(grid, stride)
    n_cells = grid * grid
    matched = np.full(n_cells, -1, dtype=np.intp)
    best_area = np.full(n_cells, np.inf)
    for gi, gt in enumerate(gts):
        b = gt.box
        inside = ((centers[:, 0] > b.x1) & (centers[:, 0] < b.x2) &
                  (centers[:, 1] > b.y1) & (centers[:, 1] < b.y2))
        take = inside & (b.area < best_area)
        matched[take] = gi
        best_area[take] = b.area
    pos = np.nonzero(matched >= 0)[0]
    neg = np.nonzero(matched < 0)[0]
    return pos, matched[pos], neg


def nms(detections: Sequence[Detection], iou_threshold: float = NMS_IOU_THRESHOLD,
        score_threshold: float = SCORE_THRESHOLD,
        max_detections: int = MAX_DETECTIONS) -> list[Detection]:
    """Greedy per-class suppression; kept list ordered by descending score,
    equal scores broken by lower cell index."""
    cands = [d for d in detections if d.score >= score_threshold]
    cands.sort(key=lambda d: (-d.score, d.cell_index))
    kept: list[Detection] = []
    suppressed = [False] * len(cands)
    for i, d in enumerate(cands):
        if suppressed[i]:
            continue
        kept.append(d)
        if len(kept) >= max_detections:
            break
        for j in range(i + 1, len(cands)):
            if suppressed[j] or cands[j].class_id != d.class_id:
                continue
            if iou(d.box, cands[j].box) > iou_threshold:
                suppressed[j] = True
    return kept


class ConvLayer:
    def __init__(self, name: str, weight: np.ndarray, bias: np.ndarray,
                 stride: int = 1, padding: int = 1):
        self.name = name
        self.weight = Tensor(weight, requires_grad=True)
        self.bias = Tensor(bias, requires_grad=True)
        self.stride = stride
        self.padding = padding

    def parameters(self):
        return [self.weight, self.bias]

    def forward_with(self, x: Tensor, weight: Tensor) -> Tensor:
        out = ad.conv2d(x, weight, stride=self.stride, padding=self.padding)
        return out + self.bias.reshape(1, -1, 1, 1)

    def __call__(self, x: Tensor) -> Tensor:
        return self.forward_with(x, self.weight)


# layer name -> (in_ch, out_ch, kernel, stride, pad, relu_after)
ARCHITECTURE = [
    ("stem", 1, 16, 3, 2, 1, True),
    ("block1", 16, 32, 3, 2, 1, True),
    ("block2", 32, 32, 3, 2, 1, True),
    ("block3", 32, 32, 3, 1, 1, True),
]
HEADS = {
    "cls": [("cls_conv", 32, 32, 3, 1, 1, True), ("cls_out", 32, NUM_CLASSES, 1, 1, 0, False)],
    "reg": [("reg_conv", 32, 32, 3, 1, 1, True), ("reg_out", 32, 4, 1, 1, 0, False)],
}

FIRST_LAYER = "stem"
HEAD_OUTPUT_LAYERS = ("cls_out", "reg_out")


class DetectorNet:
    """Single-scale dense detector over an 8x8 grid of 64x64 images."""

    def __init__(self, rng: Optional[np.random.Generator] = None):
        rng = rng if rng is not None else np.random.default_rng(0)
        self.layers: dict[str, ConvLayer] = {}
        self.relu_after: dict[str, bool] = {}
        for name, cin, cout, k, stride, pad, relu in ARCHITECTURE + HEADS["cls"] + HEADS["reg"]:
            fan_in = cin * k * k
            w = rng.normal(0.0, math.sqrt(2.0 / fan_in), size=(cout, cin, k, k))
            b = np.zeros(cout)
            if name == "cls_out":
                b[:] = -2.0  # low initial foreground prior for focal loss
            if name == "reg_out":
                b[:] = math.log(8.0)  # initial boxes roughly cell-sized
            self.layers[name] = ConvLayer(name, w, b, stride=stride, padding=pad)
            self.relu_after[name] = relu
        # wrapped[name] is a QuantizedConv once a bit policy is applied
        self.wrapped: dict[str, object] = {}

    def layer_names(self) -> list[str]:
        return list(self.layers.keys())

    def parameters(self) -> list[Tensor]:
        out = []
        for layer in self.layers.values():
            out.extend(layer.parameters())
        return out

    def quant_parameters(self) -> list[Tensor]:
        out = []
        for wrapper in self.wrapped.values():
            out.extend(wrapper.quant_params())
        return out

    def quant_params_map(self) -> dict[str, object]:
        return dict(self.wrapped)

    def _apply(self, name: str, x: Tensor) -> Tensor:
        layer = self.wrapped.get(name, self.layers[name])
        out = layer(x)
        if self.relu_after[name]:
            out = out.relu()
        return out

    def forward(self, images: np.ndarray) -> tuple[Tensor, Tensor]:
        """images [N,1,64,64] in [0,1] -> (cls_logits [N,HW,C], offsets [N,HW,4]).

        Offsets are strictly positive pixel distances (exp mapping).
        """
        images = np.asarray(images, dtype=np.float64)
        if images.ndim == 3:
            images = images[:, None]
        if images.shape[1:] != (1, IMAGE_SIZE, IMAGE_SIZE):
            raise ValueError(f"expected [N,1,{IMAGE_SIZE},{IMAGE_SIZE}] images, got {images.shape}")
        x = Tensor(images)
        for name, *_ in ARCHITECTURE:
            x = self._apply(name, x)
        cls = x
        for name, *_ in HEADS["cls"]:
            cls = self._apply(name, cls)
        reg = x
        for name, *_ in HEADS["reg"]:
            reg = self._apply(name, reg)
        n = images.shape[0]
        hw = GRID_CELLS * GRID_CELLS
        cls_logits = cls.transpose((0, 2, 3, 1)).reshape(n, hw, NUM_CLASSES)
        offsets = reg.transpose((0, 2, 3, 1)).reshape(n, hw, 4).exp()
        return cls_logits, offsets

    def predict(self, images: np.ndarray,
                iou_threshold: float = NMS_IOU_THRESHOLD,
                score_threshold: float = SCORE_THRESHOLD,
                max_detections: int = MAX_DETECTIONS) -> list[list[Detection]]:
        """Full inference: forward, decode every cell/class, then per-class NMS."""
        cls_logits, offsets = self.forward(images)
        scores = 1.0 / (1.0 + np.exp(-cls_logits.values))
        off = offsets.values
        centers = cell_centers()
        results = []
        for n in range(scores.shape[0]):
            dets = []
            for cell in range(centers.shape[0]):
                l, t, r, b = off[n, cell]
                cx, cy = centers[cell]
                try:
                    box = Box(cx - l, cy - t, cx + r, cy + b)
                except ValueError:
                    continue
                for c in range(NUM_CLASSES):
                    s = float(scores[n, cell, c])
                    if s >= score_threshold:
                        dets.append(Detection(box=box, class_id=c, score=s, cell_index=cell))
            results.append(nms(dets, iou_threshold, score_threshold, max_detections))
        return results
