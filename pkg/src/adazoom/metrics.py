"""Recall-vs-K, COCO-style AP, the pixel cost proxy and report files."""
from __future__ import annotations

import csv
import json
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Mapping, Sequence

import numpy as np

from .detector import magnification
from .geometry import Detection, Region, ZoomSpec, containment_many, iou_matrix
from .scene import Scene

BUCKETS = ("small", "medium", "large")
COCO_IOUS = tuple(round(0.5 + 0.05 * k, 2) for k in range(10))


@dataclass(frozen=True)
class SizeBuckets:
    small: float = 32.0**2
    medium: float = 96.0**2

    def __post_init__(self):
        if not 0 < self.small < self.medium:
            raise ValueError("bucket thresholds must be increasing")

    def of(self, area: float) -> str:
        if area < self.small:
            return "small"
        if area <= self.medium:
            return "medium"
        return "large"


def recall_at_k(scene: Scene, regions: Sequence[Region], bucket: str, rho: float = 1.0,
                buckets: SizeBuckets = SizeBuckets()) -> float | None:
    """Share of ``bucket`` objects enclosed by at least one region; None if the bucket is empty."""
    hit, total = recall_counts(scene, regions, bucket, rho, buckets)
    if total == 0:
        return None
    return hit / total


def recall_counts(scene: Scene, regions: Sequence[Region], bucket: str, rho: float = 1.0,
                  buckets: SizeBuckets = SizeBuckets()) -> tuple[int, int]:
    members = [o for o in scene.objects if buckets.of(o.area) == bucket]
    if not members:
        return 0, 0
    boxes = np.array([o.box for o in members], dtype=float)
    enclosed = np.zeros(len(members), dtype=bool)
    for region in regions:
        enclosed |= containment_many(boxes, region.box) >= rho - 1e-12
    return int(enclosed.sum()), len(members)


def cost_proxy(regions: Sequence[Region], zoom: ZoomSpec, image_dims: tuple[float, float]) -> float:
    """Resized pixels processed (whole image plus regions) per native image pixel."""
    W, H = image_dims
    m = magnification(min(W, H), zoom)
    pixels = W * H * m * m
    for region in regions:
        mr = magnification(region.short_edge, zoom)
        pixels += region.w * region.h * mr * mr
    return pixels / (W * H)


def _all_point_ap(recall: np.ndarray, precision: np.ndarray) -> float:
    mrec = np.concatenate([[0.0], recall, [1.0]])
    mpre = np.concatenate([[0.0], precision, [0.0]])
    mpre = np.maximum.accumulate(mpre[::-1])[::-1]
    steps = np.where(mrec[1:] != mrec[:-1])[0]
    return float(np.sum((mrec[steps + 1] - mrec[steps]) * mpre[steps + 1]))


@dataclass
class APResult:
    ap: float
    ap50: float
    ap75: float
    per_threshold: dict[float, float] = field(default_factory=dict)
    # (category, iou) -> (recall, precision) arrays in ranking order
    curves: dict[tuple[int, float], tuple[np.ndarray, np.ndarray]] = field(default_factory=dict)


def _as_lists(scenes: Sequence[Scene], detections) -> list[list[Detection]]:
    if isinstance(detections, Mapping):
        return [list(detections.get(s.source_id, [])) for s in scenes]
    if len(detections) != len(scenes):
        raise ValueError("one detection list per scene is required")
    return [list(d) for d in detections]


def average_precision(scenes: Sequence[Scene], detections, iou_thresholds: Sequence[float] = COCO_IOUS) -> APResult:
    """COCO-style AP with all-point interpolation.

    ``detections`` is a list aligned with ``scenes`` or a mapping from scene
    id. AP averages over categories that have ground truth and over the IoU
    thresholds; AP50 and AP75 use the single thresholds.
    """
    per_scene = _as_lists(scenes, detections)
    categories = sorted({o.category for s in scenes for o in s.objects})
    if not categories:
        raise ValueError("no ground-truth objects in any scene")
    thresholds = sorted({round(float(t), 4) for t in iou_thresholds} | {0.5, 0.75})
    table = {t: [] for t in thresholds}
    curves = {}
    for cat in categories:
        npos = sum(1 for s in scenes for o in s.objects if o.category == cat)
        ranked = []
        for si, dets in enumerate(per_scene):
            for d in dets:
                if d.category == cat:
                    ranked.append((-d.confidence, si, d.id, d))
        ranked.sort(key=lambda r: r[:3])
        gts = [np.array([o.box for o in s.objects if o.category == cat], dtype=float).reshape(-1, 4) for s in scenes]
        ious = [
            iou_matrix(np.array([r[3].box]), gts[r[1]])[0] if len(gts[r[1]]) else np.zeros(0) for r in ranked
        ]
        for t in thresholds:
            taken = [np.zeros(len(g), dtype=bool) for g in gts]
            tp = np.zeros(len(ranked))
            for k, (_, si, _, _) in enumerate(ranked):
                row = ious[k]
                if len(row) == 0:
                    continue
                cand = np.where(~taken[si] & (row >= t - 1e-12))[0]
                if len(cand):
                    taken[si][cand[np.argmax(row[cand])]] = True
                    tp[k] = 1
            ctp = np.cumsum(tp)
            recall = ctp / npos
            precision = ctp / np.arange(1, len(ranked) + 1) if len(ranked) else np.zeros(0)
            table[t].append(_all_point_ap(recall, precision))
            curves[(cat, t)] = (recall, precision)
    per_threshold = {t: float(np.mean(v)) for t, v in table.items()}
    used = [round(float(t), 4) for t in iou_thresholds]
    ap = float(np.mean([per_threshold[t] for t in used]))
    return APResult(ap, per_threshold[0.5], per_threshold[0.75], per_threshold, curves)


@dataclass
class EvalReport:
    name: str = ""
    ap: float | None = None
    ap50: float | None = None
    ap75: float | None = None
    recall: list[tuple[int, str, float | None]] = field(default_factory=list)
    cost: list[tuple[int, float]] = field(default_factory=list)
    pr_curves: list[tuple[int, float, float, float]] = field(default_factory=list)
    per_scene: list[dict] = field(default_factory=list)
    extra: dict = field(default_factory=dict)

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, doc: dict) -> "EvalReport":
        return cls(
            name=doc.get("name", ""),
            ap=doc.get("ap"),
            ap50=doc.get("ap50"),
            ap75=doc.get("ap75"),
            recall=[(int(k), str(b), None if r is None else float(r)) for k, b, r in doc.get("recall", [])],
            cost=[(int(k), float(c)) for k, c in doc.get("cost", [])],
            pr_curves=[(int(c), float(t), float(r), float(p)) for c, t, r, p in doc.get("pr_curves", [])],
            per_scene=list(doc.get("per_scene", [])),
            extra=dict(doc.get("extra", {})),
        )


def build_eval_report(name: str, scenes: Sequence[Scene], regions: Sequence[Sequence[Region]],
                      detections, zoom: ZoomSpec, k_max: int | None = None, rho: float = 1.0,
                      buckets: SizeBuckets = SizeBuckets()) -> EvalReport:
    """Aggregate one run: AP over the suite, pooled recall per K, mean cost per K.

    ``regions[i]`` is the ordered region list used on ``scenes[i]``; recall at
    K uses its first K entries.
    """
    if len(regions) != len(scenes):
        raise ValueError("one region list per scene is required")
    k_max = max((len(r) for r in regions), default=0) if k_max is None else k_max
    report = EvalReport(name=name)
    per_scene = _as_lists(scenes, detections)
    if any(s.objects for s in scenes):
        res = average_precision(scenes, per_scene)
        report.ap, report.ap50, report.ap75 = res.ap, res.ap50, res.ap75
        for (cat, t), (rec, prec) in sorted(res.curves.items()):
            if t in (0.5, 0.75):
                report.pr_curves.extend((cat, t, float(r), float(p)) for r, p in zip(rec, prec))
    for k in range(1, k_max + 1):
        for bucket in BUCKETS:
            hit = total = 0
            for scene, regs in zip(scenes, regions):
                h, n = recall_counts(scene, regs[:k], bucket, rho, buckets)
                hit += h
                total += n
            report.recall.append((k, bucket, hit / total if total else None))
    for k in range(0, k_max + 1):
        costs = [cost_proxy(regs[:k], zoom, s.image_dims) for s, regs in zip(scenes, regions)]
        report.cost.append((k, float(np.mean(costs)) if costs else 0.0))
    for scene, regs, dets in zip(scenes, regions, per_scene):
        report.per_scene.append({
            "scene_id": scene.source_id,
            "n_objects": len(scene.objects),
            "n_regions": len(regs),
            "n_detections": len(dets),
            "cost": cost_proxy(regs, zoom, scene.image_dims),
        })
    return report


def _fmt(value) -> str:
    if value is None:
        return ""
    if isinstance(value, float):
        return f"{value:.6f}"
    return str(value)


def _round(value):
    if isinstance(value, float):
        return None if math.isnan(value) else float(f"{value:.6f}")
    if isinstance(value, dict):
        return {k: _round(v) for k, v in value.items()}
    if isinstance(value, (list, tuple)):
        return [_round(v) for v in value]
    return value


def _write_csv(path: Path, header, rows) -> None:
    with path.open("w", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(header)
        for row in rows:
            writer.writerow([_fmt(v) for v in row])


def emit_report(report: EvalReport, directory) -> list[Path]:
    """Write ``summary.json``, ``recall_vs_k.csv``, ``cost_vs_k.csv`` and ``pr_curves.csv``."""
    out = Path(directory)
    try:
        out.mkdir(parents=True, exist_ok=True)
        summary = {
            "name": report.name,
            "AP": None if report.ap is None else _round(100.0 * report.ap),
            "AP50": None if report.ap50 is None else _round(100.0 * report.ap50),
            "AP75": None if report.ap75 is None else _round(100.0 * report.ap75),
            "recall_at_kmax": {b: _round(r) for k, b, r in report.recall if k == max(x[0] for x in report.recall)},
            "cost_at_kmax": _round(report.cost[-1][1]) if report.cost else None,
            "n_scenes": len(report.per_scene),
            "extra": _round(report.extra),
        }
        paths = [out / "summary.json", out / "recall_vs_k.csv", out / "cost_vs_k.csv", out / "pr_curves.csv"]
        paths[0].write_text(json.dumps(summary, indent=1, sort_keys=True) + "\n")
        _write_csv(paths[1], ["k", "bucket", "recall"], report.recall)
        _write_csv(paths[2], ["k", "cost"], report.cost)
        _write_csv(paths[3], ["category", "iou", "recall", "precision"], report.pr_curves)
        (out / "report.json").write_text(json.dumps(report.to_dict(), sort_keys=True) + "\n")
        paths.append(out / "report.json")
    except OSError as exc:
        raise OSError(f"cannot write report to {exc.filename or out}: {exc.strerror}") from exc
    return paths
