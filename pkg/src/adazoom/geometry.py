"""Box geometry: IoU, NMS, focus-region realization, grid mapping and tiling.

Boxes are ``(x, y, w, h)`` tuples in image pixels throughout.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

Box = tuple[float, float, float, float]


@dataclass(frozen=True)
class ZoomSpec:
    """Candidate region scales (areas), aspect ratios and desired object ranges."""

    scales: tuple[float, ...] = (240.0**2, 350.0**2, 420.0**2)
    ratios: tuple[float, ...] = (0.7, 1.0, 1.5)
    scale_ranges: tuple[tuple[float, float], ...] = ((0.0, 40.0), (30.0, 60.0), (50.0, math.inf))
    target_short_edge: float = 800.0

    def __post_init__(self):
        object.__setattr__(self, "scales", tuple(float(s) for s in self.scales))
        object.__setattr__(self, "ratios", tuple(float(r) for r in self.ratios))
        object.__setattr__(
            self, "scale_ranges", tuple((float(lo), float(hi)) for lo, hi in self.scale_ranges)
        )
        if len(self.scale_ranges) != len(self.scales):
            raise ValueError("one desired object range per candidate scale is required")
        if any(s <= 0 for s in self.scales) or any(r <= 0 for r in self.ratios):
            raise ValueError("scales and ratios must be positive")
        for lo, hi in self.scale_ranges:
            if not (0 <= lo < hi):
                raise ValueError(f"bad scale range ({lo}, {hi})")
        if self.target_short_edge <= 0:
            raise ValueError("target_short_edge must be positive")

    @property
    def n_scales(self) -> int:
        return len(self.scales)

    @property
    def n_ratios(self) -> int:
        return len(self.ratios)


@dataclass(frozen=True)
class Region:
    x: float
    y: float
    w: float
    h: float
    scale_index: int = -1
    ratio_index: int = -1

    @property
    def box(self) -> Box:
        return (self.x, self.y, self.w, self.h)

    @property
    def short_edge(self) -> float:
        return min(self.w, self.h)

    @property
    def area(self) -> float:
        return self.w * self.h


@dataclass(frozen=True)
class GridRect:
    """Inclusive cell range ``rows i0..i1, cols j0..j1`` on the state grid."""

    i0: int
    i1: int
    j0: int
    j1: int

    def __post_init__(self):
        if self.i0 > self.i1 or self.j0 > self.j1 or self.i0 < 0 or self.j0 < 0:
            raise ValueError(f"empty or negative grid rect {self}")

    @property
    def rows(self) -> slice:
        return slice(self.i0, self.i1 + 1)

    @property
    def cols(self) -> slice:
        return slice(self.j0, self.j1 + 1)

    def cells(self) -> list[tuple[int, int]]:
        return [(i, j) for i in range(self.i0, self.i1 + 1) for j in range(self.j0, self.j1 + 1)]

    def __len__(self) -> int:
        return (self.i1 - self.i0 + 1) * (self.j1 - self.j0 + 1)


@dataclass
class Detection:
    x: float
    y: float
    w: float
    h: float
    confidence: float
    category: int
    id: int = 0
    matched_gt: int | None = None
    # ground-truth id that produced the detection in the simulator, None for false positives
    source: int | None = field(default=None, compare=False)

    @property
    def box(self) -> Box:
        return (self.x, self.y, self.w, self.h)


def area(box: Box) -> float:
    return max(0.0, box[2]) * max(0.0, box[3])


def intersection(a: Box, b: Box) -> float:
    iw = min(a[0] + a[2], b[0] + b[2]) - max(a[0], b[0])
    ih = min(a[1] + a[3], b[1] + b[3]) - max(a[1], b[1])
    if iw <= 0 or ih <= 0:
        return 0.0
    return iw * ih


def iou(a: Box, b: Box) -> float:
    inter = intersection(a, b)
    if inter == 0.0:
        return 0.0
    return inter / (area(a) + area(b) - inter)


def iou_matrix(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Pairwise IoU between (N, 4) and (M, 4) arrays of ``x, y, w, h``."""
    a = np.asarray(a, dtype=float).reshape(-1, 4)
    b = np.asarray(b, dtype=float).reshape(-1, 4)
    ix = np.minimum(a[:, None, 0] + a[:, None, 2], b[None, :, 0] + b[None, :, 2]) - np.maximum(
        a[:, None, 0], b[None, :, 0]
    )
    iy = np.minimum(a[:, None, 1] + a[:, None, 3], b[None, :, 1] + b[None, :, 3]) - np.maximum(
        a[:, None, 1], b[None, :, 1]
    )
    inter = np.clip(ix, 0, None) * np.clip(iy, 0, None)
    union = (a[:, 2] * a[:, 3])[:, None] + (b[:, 2] * b[:, 3])[None, :] - inter
    with np.errstate(invalid="ignore", divide="ignore"):
        out = np.where(inter > 0, inter / union, 0.0)
    return out


def containment_fraction(box: Box, region: Box) -> float:
    """Share of ``box`` area lying inside ``region``."""
    a = area(box)
    if a <= 0:
        return 0.0
    return intersection(box, region) / a


def containment_many(boxes: np.ndarray, region: Box) -> np.ndarray:
    """Vectorized :func:`containment_fraction` for an (N, 4) array."""
    if len(boxes) == 0:
        return np.zeros(0)
    rx, ry, rw, rh = region
    iw = np.minimum(boxes[:, 0] + boxes[:, 2], rx + rw) - np.maximum(boxes[:, 0], rx)
    ih = np.minimum(boxes[:, 1] + boxes[:, 3], ry + rh) - np.maximum(boxes[:, 1], ry)
    inter = np.clip(iw, 0, None) * np.clip(ih, 0, None)
    return inter / (boxes[:, 2] * boxes[:, 3])


def nms(dets: Sequence[Detection], iou_threshold: float = 0.5) -> list[Detection]:
    """Greedy per-category suppression.

    Candidates are visited by descending confidence (lower id first on ties);
    a candidate is dropped when its IoU with an already kept box of the same
    category exceeds ``iou_threshold``.
    """
    order = sorted(dets, key=lambda d: (-d.confidence, d.id))
    kept: list[Detection] = []
    by_category: dict[int, list[Box]] = {}
    for det in order:
        boxes = by_category.setdefault(det.category, [])
        if boxes and iou_matrix(np.array([det.box]), np.array(boxes)).max() > iou_threshold:
            continue
        boxes.append(det.box)
        kept.append(det)
    return kept


def realize_region(
    fixation: tuple[int, int],
    scale_index: int,
    ratio_index: int,
    grid_dims: tuple[int, int],
    image_dims: tuple[float, float],
    zoom: ZoomSpec,
) -> Region:
    """Turn a (cell, scale, ratio) action into an image rectangle.

    ``grid_dims`` is ``(rows, cols)`` and ``image_dims`` is ``(width, height)``.
    The rectangle is centered on the cell center, translated to fit inside the
    image, and clipped only along a dimension that is larger than the image.
    """
    i, j = fixation
    rows, cols = grid_dims
    W, H = image_dims
    cx = (j + 0.5) * W / cols
    cy = (i + 0.5) * H / rows
    a = zoom.scales[scale_index]
    r = zoom.ratios[ratio_index]
    w = min(math.sqrt(a * r), W)
    h = min(math.sqrt(a / r), H)
    x = min(max(cx - w / 2.0, 0.0), W - w)
    y = min(max(cy - h / 2.0, 0.0), H - h)
    return Region(x, y, w, h, scale_index, ratio_index)


def uniform_partition(image_dims: tuple[int, int], rows: int, cols: int, overlap: float) -> list[Region]:
    """``rows x cols`` tiles covering the image with ``overlap`` pixels between neighbours.

    Tile sides are rounded up to whole pixels and the last tile of each row
    and column is flush with the image edge.
    """
    W, H = image_dims
    if rows < 1 or cols < 1:
        raise ValueError("rows and cols must be >= 1")
    tw = math.ceil((W + (cols - 1) * overlap) / cols - 1e-9)
    th = math.ceil((H + (rows - 1) * overlap) / rows - 1e-9)
    if tw <= 0 or th <= 0:
        raise ValueError("tile dimensions must be positive")
    if (cols > 1 and tw <= overlap) or (rows > 1 and th <= overlap):
        raise ValueError(f"tile {tw}x{th} is not larger than the overlap {overlap}")
    tw, th = min(tw, W), min(th, H)

    def origins(n, tile, total):
        if n == 1:
            return [0]
        stride = tile - overlap
        out = [int(round(k * stride)) for k in range(n - 1)]
        out.append(total - tile)
        return out

    xs, ys = origins(cols, tw, W), origins(rows, th, H)
    return [Region(x, y, tw, th) for y in ys for x in xs]


def map_region_to_grid(region: Region | Box, grid_dims: tuple[int, int], image_dims: tuple[float, float]) -> GridRect:
    """Cells whose centers fall inside the region (closed), never empty."""
    box = region.box if isinstance(region, Region) else region
    x, y, w, h = box
    rows, cols = grid_dims
    W, H = image_dims
    cw, ch = W / cols, H / rows
    j0 = max(0, math.ceil(x / cw - 0.5))
    j1 = min(cols - 1, math.floor((x + w) / cw - 0.5))
    i0 = max(0, math.ceil(y / ch - 0.5))
    i1 = min(rows - 1, math.floor((y + h) / ch - 0.5))
    jc = min(cols - 1, max(0, int((x + w / 2.0) // cw)))
    ic = min(rows - 1, max(0, int((y + h / 2.0) // ch)))
    if j0 > j1 or i0 > i1:
        # no cell center inside: only the cell holding the region center
        return GridRect(ic, ic, jc, jc)
    return GridRect(min(i0, ic), max(i1, ic), min(j0, jc), max(j1, jc))


def cell_of_point(px: float, py: float, grid_dims: tuple[int, int], image_dims: tuple[float, float]) -> tuple[int, int]:
    rows, cols = grid_dims
    W, H = image_dims
    j = min(cols - 1, max(0, int(px * cols // W)))
    i = min(rows - 1, max(0, int(py * rows // H)))
    return i, j
