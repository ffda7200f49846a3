"""Synthetic 64x64 grayscale scenes of filled shapes for detector training.

Three classes: 0 = rectangle, 1 = circle, 2 = triangle. Scenes carry 1-4
objects with light overlap control and additive Gaussian pixel noise, and
are fully determined by (seed, index).
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .detector import Box, GroundTruth, IMAGE_SIZE, iou

CLASS_NAMES = ["rectangle", "circle", "triangle"]
NOISE_SIGMA = 0.05
MIN_SIDE = 8
MAX_SIDE = 28
MAX_GT_OVERLAP = 0.2


@dataclass
class ShapeScene:
    image: np.ndarray  # [64, 64] float64 in [0, 1]
    gts: list[GroundTruth]
    seed: int
    index: int

    @property
    def scene_id(self) -> str:
        return f"{self.seed}:{self.index}"


def _coord_grids():
    ys, xs = np.mgrid[0:IMAGE_SIZE, 0:IMAGE_SIZE]
    return xs + 0.5, ys + 0.5


_XS, _YS = _coord_grids()


def _shape_mask(class_id: int, box: Box) -> np.ndarray:
    x1, y1, x2, y2 = box.x1, box.y1, box.x2, box.y2
    if class_id == 0:
        return (_XS >= x1) & (_XS < x2) & (_YS >= y1) & (_YS < y2)
    if class_id == 1:
        cx, cy = (x1 + x2) / 2, (y1 + y2) / 2
        rx, ry = (x2 - x1) / 2, (y2 - y1) / 2
        return ((_XS - cx) / rx) ** 2 + ((_YS - cy) / ry) ** 2 <= 1.0
    # up-pointing triangle inscribed in the box: apex top-center, base bottom
    ax, ay = (x1 + x2) / 2, y1
    bx, by = x1, y2
    cx2, cy2 = x2, y2

    def side(px, py, qx, qy):
        return (qx - px) * (_YS - py) - (qy - py) * (_XS - px)

    d1 = side(ax, ay, bx, by)
    d2 = side(bx, by, cx2, cy2)
    d3 = side(cx2, cy2, ax, ay)
    return ((d1 >= 0) & (d2 >= 0) & (d3 >= 0)) | ((d1 <= 0) & (d2 <= 0) & (d3 <= 0))


def generate_scene(seed: int, index: int) -> ShapeScene:
    rng = np.random.default_rng(np.random.SeedSequence([seed, index]))
    image = np.zeros((IMAGE_SIZE, IMAGE_SIZE), dtype=np.float64)
    n_obj = int(rng.integers(1, 5))
    gts: list[GroundTruth] = []
    attempts = 0
    while len(gts) < n_obj and attempts < 50:
        attempts += 1
        w = float(rng.uniform(MIN_SIDE, MAX_SIDE))
        h = float(rng.uniform(MIN_SIDE, MAX_SIDE))
        x1 = float(rng.uniform(0, IMAGE_SIZE - w))
        y1 = float(rng.uniform(0, IMAGE_SIZE - h))
        box = Box(x1, y1, x1 + w, y1 + h)
        if any(iou(box, g.box) > MAX_GT_OVERLAP for g in gts):
            continue
        class_id = int(rng.integers(0, len(CLASS_NAMES)))
        intensity = float(rng.uniform(0.5, 1.0))
        mask = _shape_mask(class_id, box)
        image[mask] = intensity
        gts.append(GroundTruth(box=box, class_id=class_id))
    noise = rng.normal(0.0, NOISE_SIGMA, size=image.shape)
    image = np.clip(image + noise, 0.0, 1.0)
    return ShapeScene(image=image, gts=gts, seed=seed, index=index)


def generate_dataset(seed: int, n: int) -> list[ShapeScene]:
    if n <= 0:
        raise ValueError("dataset size must be positive")
    return [generate_scene(seed, i) for i in range(n)]


def dataset_id(seed: int, n: int) -> str:
    return f"shapes-v1-seed{seed}-n{n}"
