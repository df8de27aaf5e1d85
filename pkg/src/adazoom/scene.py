"""Scenes, object annotations, loaders and the synthetic scene generator."""
from __future__ import annotations

import json
import logging
import math
from dataclasses import dataclass, replace
from pathlib import Path
import numpy as np

log = logging.getLogger(__name__)

# VisDrone categories 0 (ignored region) and 11 (others) never become objects.
VISDRONE_IGNORED = frozenset({0, 11})


class AnnotationError(ValueError):
    """Raised when an annotation file cannot be parsed."""

    def __init__(self, message: str, path=None, line: int | None = None):
        where = ""
        if path is not None:
            where += f"{path}"
        if line is not None:
            where += f":{line}"
        super().__init__(f"{where}: {message}" if where else message)
        self.path = path
        self.line = line


@dataclass(frozen=True)
class ObjectAnnotation:
    x: float
    y: float
    w: float
    h: float
    category: int
    id: int

    def __post_init__(self):
        if not (self.w > 0 and self.h > 0):
            raise ValueError(f"object {self.id}: nonpositive box {self.box}")

    @property
    def box(self) -> tuple[float, float, float, float]:
        return (self.x, self.y, self.w, self.h)

    @property
    def center(self) -> tuple[float, float]:
        return (self.x + self.w / 2.0, self.y + self.h / 2.0)

    @property
    def area(self) -> float:
        return self.w * self.h

    @property
    def scale(self) -> float:
        return object_scale(self)

    @property
    def weight(self) -> float:
        return object_weight(self)


@dataclass(frozen=True)
class Scene:
    width: int
    height: int
    objects: tuple[ObjectAnnotation, ...] = ()
    source_id: str = ""

    def __post_init__(self):
        if self.width < 64 or self.height < 64:
            raise ValueError(f"scene {self.source_id!r}: image must be at least 64x64")
        object.__setattr__(self, "objects", tuple(self.objects))
        ids = [o.id for o in self.objects]
        if len(set(ids)) != len(ids):
            raise ValueError(f"scene {self.source_id!r}: duplicate object ids")

    def __len__(self) -> int:
        return len(self.objects)

    @property
    def image_dims(self) -> tuple[int, int]:
        return (self.width, self.height)

    def boxes(self) -> np.ndarray:
        """(N, 4) array of ``x, y, w, h``."""
        if not self.objects:
            return np.zeros((0, 4))
        return np.array([o.box for o in self.objects], dtype=float)

    def scales(self) -> np.ndarray:
        return np.array([object_scale(o) for o in self.objects], dtype=float)

    def weights(self) -> np.ndarray:
        return np.array([object_weight(o) for o in self.objects], dtype=float)

    def ids(self) -> list[int]:
        return [o.id for o in self.objects]


def object_scale(obj: ObjectAnnotation) -> float:
    """Geometric-mean side length ``sqrt(w * h)`` in pixels."""
    return math.sqrt(obj.w * obj.h)


def object_weight(obj: ObjectAnnotation) -> float:
    """Reward weight of an object, inversely proportional to its scale."""
    return 1.0 / object_scale(obj)


def clip_box(x, y, w, h, width, height):
    """Intersect a box with the image; boxes already inside come back unchanged."""
    if x >= 0 and y >= 0 and x + w <= width and y + h <= height:
        return x, y, w, h
    x0, y0 = max(0.0, float(x)), max(0.0, float(y))
    x1, y1 = min(float(width), float(x) + float(w)), min(float(height), float(y) + float(h))
    return x0, y0, x1 - x0, y1 - y0


def load_visdrone(annotation_path, width: int, height: int, source_id: str | None = None) -> Scene:
    """Read a VisDrone-DET annotation file.

    Lines are ``left,top,width,height,score,category,truncation,occlusion``.
    Ignored regions and the "others" category are dropped; boxes are clipped to
    the image and boxes left with no area are skipped (counted in a warning).
    """
    path = Path(annotation_path)
    objects = []
    skipped = 0
    with path.open() as fh:
        for lineno, raw in enumerate(fh, start=1):
            line = raw.strip()
            if not line:
                continue
            fields = line.split(",")
            # some releases carry a trailing comma
            if fields and fields[-1] == "":
                fields = fields[:-1]
            if len(fields) < 8:
                raise AnnotationError(f"expected 8 fields, got {len(fields)}", path, lineno)
            try:
                left, top, w, h = (float(v) for v in fields[:4])
                category = int(fields[5])
            except ValueError as exc:
                raise AnnotationError(f"malformed field ({exc})", path, lineno) from None
            if category in VISDRONE_IGNORED:
                continue
            x, y, w, h = clip_box(left, top, w, h, width, height)
            if w <= 0 or h <= 0:
                skipped += 1
                continue
            objects.append(ObjectAnnotation(x, y, w, h, category, len(objects)))
    if skipped:
        log.warning("%s: skipped %d boxes with no area inside the image", path, skipped)
    return Scene(int(width), int(height), tuple(objects), source_id or path.stem)


def scene_to_dict(scene: Scene) -> dict:
    return {
        "source_id": scene.source_id,
        "width": scene.width,
        "height": scene.height,
        "objects": [
            {"x": o.x, "y": o.y, "w": o.w, "h": o.h, "category": o.category}
            for o in scene.objects
        ],
    }


def _number(doc, key, where, kind=(int, float)):
    if key not in doc:
        raise AnnotationError(f"missing field {key!r}", where)
    value = doc[key]
    if isinstance(value, bool) or not isinstance(value, kind):
        raise AnnotationError(f"field {key!r} has wrong type {type(value).__name__}", where)
    return value


def scene_from_dict(doc: dict, source_id: str = "") -> Scene:
    if not isinstance(doc, dict):
        raise AnnotationError("scene document must be an object")
    width = _number(doc, "width", "scene", int)
    height = _number(doc, "height", "scene", int)
    raw_objects = doc.get("objects")
    if not isinstance(raw_objects, list):
        raise AnnotationError("field 'objects' must be a list", "scene")
    objects = []
    for index, item in enumerate(raw_objects):
        where = f"objects[{index}]"
        if not isinstance(item, dict):
            raise AnnotationError("object entry must be a mapping", where)
        x, y, w, h = (_number(item, k, where) for k in ("x", "y", "w", "h"))
        category = _number(item, "category", where, int)
        cx, cy, cw, ch = clip_box(x, y, w, h, width, height)
        if cw <= 0 or ch <= 0:
            continue
        objects.append(ObjectAnnotation(cx, cy, cw, ch, category, index))
    return Scene(width, height, tuple(objects), str(doc.get("source_id", source_id)))


def load_scene_json(path) -> Scene:
    path = Path(path)
    with path.open() as fh:
        try:
            doc = json.load(fh)
        except json.JSONDecodeError as exc:
            raise AnnotationError(f"invalid JSON ({exc.msg})", path, exc.lineno) from None
    try:
        return scene_from_dict(doc, source_id=path.stem)
    except AnnotationError as exc:
        raise AnnotationError(str(exc), path) from None


def emit_scene_json(scene: Scene, path) -> None:
    path = Path(path)
    path.write_text(json.dumps(scene_to_dict(scene), indent=1) + "\n")


def load_scene_dir(directory) -> list[Scene]:
    """All ``*.json`` scenes in a directory, sorted by file name (a run's ``config.json`` is skipped)."""
    paths = sorted(p for p in Path(directory).glob("*.json") if p.name != "config.json")
    return [load_scene_json(p) for p in paths]


@dataclass(frozen=True)
class SynthSceneConfig:
    """Parameters of a synthetic UAV-like scene.

    Clustered objects are small; the scattered objects are large with
    probability ``large_fraction`` and medium otherwise.
    """

    width: int = 1280
    height: int = 720
    n_clusters: int = 3
    objects_per_cluster: int = 12
    cluster_spread: float = 35.0
    small_range: tuple[float, float] = (8.0, 24.0)
    medium_range: tuple[float, float] = (32.0, 64.0)
    large_range: tuple[float, float] = (100.0, 180.0)
    n_scatter: int = 6
    large_fraction: float = 0.5
    category_count: int = 3
    n_hard_clusters: int = 0
    hard_range: tuple[float, float] = (4.0, 8.0)
    seed: int = 0
    source_id: str = ""

    def __post_init__(self):
        for name in ("small_range", "medium_range", "large_range", "hard_range"):
            lo, hi = getattr(self, name)
            if not (0 < lo <= hi):
                raise ValueError(f"{name} must be positive and ordered")
            object.__setattr__(self, name, (float(lo), float(hi)))
        if min(self.n_clusters, self.objects_per_cluster, self.n_scatter, self.n_hard_clusters) < 0:
            raise ValueError("counts must be nonnegative")
        if not 0.0 <= self.large_fraction <= 1.0:
            raise ValueError("large_fraction must lie in [0, 1]")
        if self.cluster_spread <= 0 or self.category_count < 1:
            raise ValueError("cluster_spread and category_count must be positive")


def _place(cx, cy, w, h, width, height):
    # translate so the whole box is inside the image
    x = min(max(cx - w / 2.0, 0.0), width - w)
    y = min(max(cy - h / 2.0, 0.0), height - h)
    return clip_box(x, y, w, h, width, height)


def synth_scene(cfg: SynthSceneConfig) -> Scene:
    """Deterministic synthetic scene: small-object clusters plus scattered objects."""
    rng = np.random.default_rng(np.random.SeedSequence([cfg.seed & 0xFFFFFFFF, 0x5CE]))
    W, H = cfg.width, cfg.height
    margin = min(2.0 * cfg.cluster_spread, W / 4.0, H / 4.0)
    raw = []
    # hard clusters hold tiny objects that stay low-confidence even when zoomed
    sizes = [cfg.small_range] * cfg.n_clusters + [cfg.hard_range] * cfg.n_hard_clusters
    for size_range in sizes:
        cx = rng.uniform(margin, W - margin)
        cy = rng.uniform(margin, H - margin)
        category = int(rng.integers(1, cfg.category_count + 1))
        for _ in range(cfg.objects_per_cluster):
            w, h = rng.uniform(*size_range, size=2)
            ox, oy = rng.normal(0.0, cfg.cluster_spread, size=2)
            raw.append((cx + ox, cy + oy, w, h, category))
    for _ in range(cfg.n_scatter):
        lo, hi = cfg.large_range if rng.random() < cfg.large_fraction else cfg.medium_range
        w, h = rng.uniform(lo, hi, size=2)
        w, h = min(w, W), min(h, H)
        cx, cy = rng.uniform(0, W), rng.uniform(0, H)
        raw.append((cx, cy, w, h, int(rng.integers(1, cfg.category_count + 1))))
    objects = []
    for cx, cy, w, h, category in raw:
        x, y, w, h = _place(cx, cy, w, h, W, H)
        if w > 0 and h > 0:
            objects.append(ObjectAnnotation(x, y, w, h, category, len(objects)))
    return Scene(W, H, tuple(objects), cfg.source_id or f"synth-{cfg.seed}")


def synth_suite(
    n_scenes: int,
    seed: int = 0,
    clusters: tuple[int, int] = (2, 4),
    base: SynthSceneConfig | None = None,
) -> list[Scene]:
    """``n_scenes`` scenes with a cluster count drawn uniformly from ``clusters``."""
    base = base or SynthSceneConfig()
    rng = np.random.default_rng(np.random.SeedSequence([seed & 0xFFFFFFFF, 0x5017E]))
    scenes = []
    for index in range(n_scenes):
        n_clusters = int(rng.integers(clusters[0], clusters[1] + 1))
        scene_seed = int(rng.integers(0, 2**31 - 1))
        cfg = replace(base, n_clusters=n_clusters, seed=scene_seed,
                      source_id=f"synth-{seed}-{index:04d}")
        scenes.append(synth_scene(cfg))
    return scenes
