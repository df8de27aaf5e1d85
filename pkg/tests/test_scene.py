import json
import logging
import math

import pytest
from hypothesis import given, strategies as st

from adazoom.scene import (AnnotationError, ObjectAnnotation, Scene, SynthSceneConfig, emit_scene_json,
                           load_scene_dir, load_scene_json, load_visdrone, object_scale, object_weight,
                           scene_from_dict, synth_scene, synth_suite)


def obj(w, h, x=0.0, y=0.0):
    return ObjectAnnotation(x, y, w, h, 1, 0)


@pytest.mark.parametrize("w,h,s", [(40, 40, 40.0), (16, 25, 20.0), (1, 1, 1.0)])
def test_object_scale(w, h, s):
    assert object_scale(obj(w, h)) == pytest.approx(s, abs=1e-12)


@pytest.mark.parametrize("side,weight", [(20, 0.05), (1, 1.0), (100, 0.01)])
def test_object_weight(side, weight):
    assert object_weight(obj(side, side)) == pytest.approx(weight, abs=1e-15)


def test_visdrone_line_mapping(tmp_path):
    path = tmp_path / "0001.txt"
    path.write_text("684,8,273,116,1,4,0,0\n0,0,10,10,1,0,0,0\n5,5,10,10,1,11,0,0\n")
    scene = load_visdrone(path, 1360, 765)
    assert len(scene.objects) == 1
    o = scene.objects[0]
    assert (o.x, o.y, o.w, o.h, o.category) == (684, 8, 273, 116, 4)
    assert scene.source_id == "0001"


def test_visdrone_malformed_line_names_line(tmp_path):
    path = tmp_path / "bad.txt"
    path.write_text("684,8,273,116,1,4,0,0\n10,10,abc,5,1,4,0,0\n")
    with pytest.raises(AnnotationError) as info:
        load_visdrone(path, 1360, 765)
    assert info.value.line == 2
    assert "2" in str(info.value)


def test_visdrone_clips_and_counts_skipped(tmp_path, caplog):
    path = tmp_path / "clip.txt"
    path.write_text("1350,700,40,100,1,4,0,0\n2000,10,5,5,1,4,0,0\n-10,-10,5,5,1,4,0,0\n")
    with caplog.at_level(logging.WARNING):
        scene = load_visdrone(path, 1360, 765)
    assert len(scene.objects) == 1
    assert scene.objects[0].box == (1350.0, 700.0, 10.0, 65.0)
    assert "skipped 2" in caplog.text


def test_scene_from_dict_examples():
    assert len(scene_from_dict({"width": 100, "height": 100, "objects": []}).objects) == 0
    s = scene_from_dict({"width": 100, "height": 100, "objects": [{"x": 0, "y": 0, "w": 10, "h": 10, "category": 1}]})
    assert len(s.objects) == 1 and s.objects[0].id == 0


def test_scene_from_dict_clips_and_drops():
    doc = {"width": 100, "height": 100, "objects": [
        {"x": 95, "y": 95, "w": 10, "h": 10, "category": 1},
        {"x": 200, "y": 0, "w": 10, "h": 10, "category": 1},
    ]}
    s = scene_from_dict(doc)
    assert [o.box for o in s.objects] == [(95.0, 95.0, 5.0, 5.0)]


@pytest.mark.parametrize("doc", [
    {"height": 100, "objects": []},
    {"width": 100, "height": 100, "objects": [{"x": 0, "y": 0, "w": "a", "h": 1, "category": 1}]},
    {"width": 100, "height": 100},
])
def test_scene_from_dict_rejects_malformed(doc):
    with pytest.raises(AnnotationError):
        scene_from_dict(doc)


def test_synth_empty_and_deterministic():
    assert len(synth_scene(SynthSceneConfig(n_clusters=0, n_scatter=0)).objects) == 0
    assert synth_scene(SynthSceneConfig(seed=3)) == synth_scene(SynthSceneConfig(seed=3))
    assert synth_scene(SynthSceneConfig(seed=3)) != synth_scene(SynthSceneConfig(seed=4))


def test_synth_cluster_sides_enumerated():
    cfg = SynthSceneConfig(n_clusters=2, objects_per_cluster=10, n_scatter=0, seed=11)
    scene = synth_scene(cfg)
    assert len(scene.objects) == 20
    for o in scene.objects:
        assert 8 <= o.w <= 24 and 8 <= o.h <= 24
        assert 0 <= o.x and o.x + o.w <= scene.width and 0 <= o.y and o.y + o.h <= scene.height


def test_synth_suite_ids_and_determinism():
    a = synth_suite(5, seed=2)
    assert [s.source_id for s in a] == [f"synth-2-{k:04d}" for k in range(5)]
    assert a == synth_suite(5, seed=2)


boxes = st.tuples(
    st.floats(0, 500, allow_nan=False), st.floats(0, 500, allow_nan=False),
    st.floats(0.5, 200, allow_nan=False), st.floats(0.5, 200, allow_nan=False), st.integers(1, 10),
)


@given(items=st.lists(boxes, max_size=15))
def test_json_round_trip_preserves_geometry(tmp_path_factory, items):
    doc = {"width": 640, "height": 480, "source_id": "rt",
           "objects": [{"x": x, "y": y, "w": w, "h": h, "category": c} for x, y, w, h, c in items]}
    scene = scene_from_dict(doc)
    path = tmp_path_factory.mktemp("rt") / "rt.json"
    emit_scene_json(scene, path)
    again = load_scene_json(path)
    assert [o.box for o in again.objects] == [o.box for o in scene.objects]
    assert [o.category for o in again.objects] == [o.category for o in scene.objects]
    for o in scene.objects:
        assert o.w > 0 and o.h > 0 and o.x + o.w <= 640 + 1e-9 and o.y + o.h <= 480 + 1e-9


def test_scene_dir_sorted_and_skips_config(tmp_path):
    for name in ("b", "a"):
        (tmp_path / f"{name}.json").write_text(json.dumps({"width": 100, "height": 100, "objects": []}))
    (tmp_path / "config.json").write_text("{}")
    assert [s.source_id for s in load_scene_dir(tmp_path)] == ["a", "b"]


def test_duplicate_ids_rejected():
    with pytest.raises(ValueError):
        Scene(100, 100, (obj(5, 5), obj(6, 6)))


def test_scene_weights_match_scales():
    s = synth_scene(SynthSceneConfig(seed=5))
    assert all(math.isclose(w * sc, 1.0) for w, sc in zip(s.weights(), s.scales()))
