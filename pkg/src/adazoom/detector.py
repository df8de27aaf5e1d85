"""Parametric detector surrogate, zoomed inference, NMS merge and collaborative training.

Detection confidence is a logistic function of the object's side length after
magnification, so zooming into a region helps small objects the way a real
detector would, without training one.
"""
from __future__ import annotations

import json
import logging
import math
from dataclasses import dataclass, field, replace
from typing import Sequence

import numpy as np

from . import rng as rngmod
from .geometry import Detection, Region, ZoomSpec, iou_matrix, nms
from .scene import Scene

log = logging.getLogger(__name__)

N_SCALE_BINS = 8
# log-spaced effective-scale bin edges (pixels after magnification)
SCALE_BIN_EDGES = np.geomspace(4.0, 512.0, N_SCALE_BINS + 1)


@dataclass(frozen=True)
class DetectorConfig:
    mu: float = 24.0
    tau: float = 6.0
    jitter: float = 0.05
    fp_rate: float = 0.5
    skill_offsets: tuple[float, ...] = (0.0,) * N_SCALE_BINS
    seed: int = 0

    def __post_init__(self):
        if self.tau <= 0:
            raise ValueError("tau must be positive")
        if self.fp_rate < 0 or self.jitter < 0:
            raise ValueError("fp_rate and jitter must be nonnegative")
        offsets = tuple(float(v) for v in self.skill_offsets)
        if len(offsets) != N_SCALE_BINS:
            raise ValueError(f"expected {N_SCALE_BINS} skill offsets")
        object.__setattr__(self, "skill_offsets", offsets)


@dataclass
class ZoomedInference:
    region: Region
    magnification: float
    detections: list[Detection] = field(default_factory=list)


def scale_bin(s_eff: float) -> int:
    return int(np.clip(np.searchsorted(SCALE_BIN_EDGES[1:-1], s_eff, side="right"), 0, N_SCALE_BINS - 1))


def _logistic(x: float) -> float:
    if x >= 0:
        return 1.0 / (1.0 + math.exp(-x))
    e = math.exp(x)
    return e / (1.0 + e)


def confidence(s_eff: float, det: DetectorConfig) -> float:
    """Detection confidence for an object of effective side ``s_eff``.

    Each scale bin shifts the logistic midpoint by its skill offset. Taking the
    running maximum over lower bins keeps confidence non-decreasing in
    ``s_eff`` whatever the offsets are.
    """
    b = scale_bin(s_eff)
    best = 0.0
    for k in range(b + 1):
        s = s_eff if k == b else SCALE_BIN_EDGES[k + 1]
        best = max(best, _logistic((s - det.mu - det.skill_offsets[k]) / det.tau))
    return best


def magnification(short_edge: float, zoom: ZoomSpec) -> float:
    """Resize factor bringing ``short_edge`` to the target, never below 1."""
    m = zoom.target_short_edge / short_edge
    if m < 1.0:
        log.debug("magnification %.3f clamped to 1 (short edge %.1f)", m, short_edge)
        return 1.0
    return m


def _region_rng(det: DetectorConfig, scene: Scene, region: Region):
    # keyed by geometry: identical regions see identical noise, order never matters
    return rngmod.stream(det.seed, "detect", scene.source_id, *(float(v) for v in region.box))


def _clip_to(box, region: Region):
    x0 = max(box[0], region.x)
    y0 = max(box[1], region.y)
    x1 = min(box[0] + box[2], region.x + region.w)
    y1 = min(box[1] + box[3], region.y + region.h)
    if x1 - x0 <= 0 or y1 - y0 <= 0:
        return None
    return (x0, y0, x1 - x0, y1 - y0)


def simulate_detect(scene: Scene, region: Region, zoom: ZoomSpec, det: DetectorConfig, rng=None) -> list[Detection]:
    """Detections for one zoomed region, in image coordinates.

    Every object centered in the region is reported with a jittered box and a
    scale-dependent confidence; Poisson false positives are added in
    proportion to the resized area.
    """
    rng = _region_rng(det, scene, region) if rng is None else rng
    m = magnification(region.short_edge, zoom)
    out: list[Detection] = []
    rx1, ry1 = region.x + region.w, region.y + region.h
    for obj in scene.objects:
        cx, cy = obj.center
        if not (region.x <= cx < rx1 and region.y <= cy < ry1):
            continue
        s = obj.scale
        conf = confidence(s * m, det)
        sigma = det.jitter * s / m
        dx, dy, dw, dh = rng.normal(0.0, 1.0, size=4) * sigma
        box = (obj.x + dx, obj.y + dy, max(1.0, obj.w + dw), max(1.0, obj.h + dh))
        box = _clip_to(box, region)
        if box is None:
            continue
        out.append(Detection(*box, confidence=conf, category=obj.category, source=obj.id))
    megapixels = (region.w * m) * (region.h * m) / 1e6
    n_fp = int(rng.poisson(det.fp_rate * megapixels))
    categories = sorted({o.category for o in scene.objects}) or [1]
    for _ in range(n_fp):
        side_w, side_h = rng.uniform(16.0, 96.0, size=2) / m
        side_w, side_h = min(side_w, region.w), min(side_h, region.h)
        x = region.x + rng.uniform(0.0, region.w - side_w)
        y = region.y + rng.uniform(0.0, region.h - side_h)
        out.append(Detection(x, y, side_w, side_h, confidence=float(rng.uniform(0.05, 0.5)),
                             category=int(categories[rng.integers(len(categories))])))
    return out


def whole_image(scene: Scene) -> Region:
    return Region(0.0, 0.0, float(scene.width), float(scene.height))


def zoomed_inference(scene: Scene, region: Region, zoom: ZoomSpec, det: DetectorConfig) -> ZoomedInference:
    return ZoomedInference(region, magnification(region.short_edge, zoom), simulate_detect(scene, region, zoom, det))


def full_pipeline(scene: Scene, regions: Sequence[Region], zoom: ZoomSpec, det: DetectorConfig,
                  iou_threshold: float = 0.5) -> list[Detection]:
    """Whole image plus every region, merged by per-category NMS."""
    merged: list[Detection] = []
    for region in [whole_image(scene), *regions]:
        merged.extend(simulate_detect(scene, region, zoom, det))
    for k, d in enumerate(merged):
        d.id = k
    return nms(merged, iou_threshold)


def match_detections(scene: Scene, dets: Sequence[Detection], iou_threshold: float = 0.5) -> dict[int, float]:
    """Best matched confidence per ground-truth id (0 for misses).

    Detections are visited by descending confidence and each claims the
    highest-IoU unclaimed object of its category with IoU >= threshold.
    """
    conf = {o.id: 0.0 for o in scene.objects}
    if not scene.objects or not dets:
        return conf
    gt_boxes = scene.boxes()
    gt_cats = np.array([o.category for o in scene.objects])
    taken = np.zeros(len(scene.objects), dtype=bool)
    order = sorted(dets, key=lambda d: (-d.confidence, d.id))
    ious = iou_matrix(np.array([d.box for d in order]), gt_boxes)
    for row, d in enumerate(order):
        cand = np.where((gt_cats == d.category) & ~taken & (ious[row] >= iou_threshold))[0]
        if len(cand) == 0:
            d.matched_gt = None
            continue
        best = cand[np.argmax(ious[row, cand])]
        taken[best] = True
        gid = scene.objects[best].id
        d.matched_gt = gid
        conf[gid] = float(d.confidence)
    return conf


def collaborative_reweight(scene: Scene, confidences: dict[int, float] | Sequence[float]) -> np.ndarray:
    """Object weights ``1 - c`` aligned with ``scene.objects``."""
    if isinstance(confidences, dict):
        c = np.array([confidences.get(o.id, 0.0) for o in scene.objects], dtype=float)
    else:
        c = np.asarray(confidences, dtype=float)
    if np.any(c < 0) or np.any(c > 1):
        raise ValueError("confidences must lie in [0, 1]")
    return 1.0 - c


def exposure_histogram(scene: Scene, regions: Sequence[Region], zoom: ZoomSpec) -> np.ndarray:
    """Count of (object, region) pairs per effective-scale bin."""
    hist = np.zeros(N_SCALE_BINS)
    for region in regions:
        m = magnification(region.short_edge, zoom)
        for obj in scene.objects:
            cx, cy = obj.center
            if region.x <= cx < region.x + region.w and region.y <= cy < region.y + region.h:
                hist[scale_bin(obj.scale * m)] += 1
    return hist


def detector_finetune(det: DetectorConfig, exposure: Sequence[float], eta: float) -> DetectorConfig:
    """Lower the midpoint offset of each bin in proportion to its exposure share."""
    if eta <= 0:
        raise ValueError("eta must be positive")
    exposure = np.asarray(exposure, dtype=float)
    total = exposure.sum()
    if total <= 0:
        return det
    share = exposure / total
    floor = -det.mu / 2.0
    offsets = tuple(max(d - eta * s, floor) for d, s in zip(det.skill_offsets, share))
    return replace(det, skill_offsets=offsets)


def detections_to_jsonl(scene_id: str, dets: Sequence[Detection]) -> str:
    lines = [
        json.dumps({"scene_id": scene_id, "x": round(d.x, 6), "y": round(d.y, 6), "w": round(d.w, 6),
                    "h": round(d.h, 6), "confidence": round(d.confidence, 6), "category": d.category})
        for d in dets
    ]
    return "".join(line + "\n" for line in lines)


def detections_from_jsonl(text: str) -> dict[str, list[Detection]]:
    out: dict[str, list[Detection]] = {}
    for lineno, line in enumerate(text.splitlines(), start=1):
        if not line.strip():
            continue
        try:
            rec = json.loads(line)
            sid = str(rec["scene_id"])
            d = Detection(float(rec["x"]), float(rec["y"]), float(rec["w"]), float(rec["h"]),
                          float(rec["confidence"]), int(rec["category"]))
        except (ValueError, KeyError, TypeError) as exc:
            raise ValueError(f"detections line {lineno}: {exc}") from None
        bucket = out.setdefault(sid, [])
        d.id = len(bucket)
        bucket.append(d)
    return out


@dataclass(frozen=True)
class CTConfig:
    """One collaborative round: region count, policy finetune length, detector step."""

    k: int = 7
    policy_iters: int = 200
    eta: float = 4.0
    lr: float = 1.0
    batch_size: int = 16
    guidance: float = 0.0
    seed: int = 0


def ct_weights(policy, det: DetectorConfig, scenes: Sequence[Scene], k: int) -> list[np.ndarray]:
    """``1 - c`` per object after running the full pipeline on the policy's regions."""
    out = []
    for scene in scenes:
        dets = full_pipeline(scene, policy.regions(scene, k), policy.zoom, det)
        out.append(collaborative_reweight(scene, match_detections(scene, dets)))
    return out


def captured_mass(policy, scenes: Sequence[Scene], weights: Sequence[np.ndarray], k: int) -> float:
    """Total weight of objects enclosed by the policy's top-k greedy regions,
    rolled out on the reweighted scenes."""
    from .geometry import containment_many

    total = 0.0
    for scene, w in zip(scenes, weights):
        regions = policy.greedy_episode(scene, k, weights=w).regions if k > 0 else []
        if not regions or not scene.objects:
            continue
        boxes = scene.boxes()
        hit = np.zeros(len(boxes), dtype=bool)
        for region in regions:
            hit |= containment_many(boxes, region.box) >= policy.reward_cfg.rho - 1e-12
        total += float(np.asarray(w)[hit].sum())
    return total


def collaborative_round(policy, det: DetectorConfig, scenes: Sequence[Scene], ct_cfg: CTConfig = CTConfig()):
    """Reweight objects by detector difficulty, finetune the policy on the new
    weights, then finetune the detector on the new policy's regions."""
    from .training import TrainConfig, train

    weights = ct_weights(policy, det, scenes, ct_cfg.k)
    cfg = TrainConfig(
        batch_size=ct_cfg.batch_size,
        lr=ct_cfg.lr,
        iterations=ct_cfg.policy_iters,
        guidance_start=ct_cfg.guidance,
        guidance_end=0.0,
        T=max(ct_cfg.k, 1),
        n_hidden=0 if policy.params.hidden is None else policy.params.hidden.shape[0],
        seed=rngmod.child_seed(ct_cfg.seed, "ct", "policy"),
    )
    new_policy, _ = train(scenes, cfg, init=policy, weights=weights)
    exposure = np.zeros(N_SCALE_BINS)
    for scene in scenes:
        exposure += exposure_histogram(scene, new_policy.regions(scene, ct_cfg.k), new_policy.zoom)
    return new_policy, detector_finetune(det, exposure, ct_cfg.eta)
