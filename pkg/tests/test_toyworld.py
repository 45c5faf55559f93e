import json
import math

import numpy as np
import pytest

from toydrive.geometry import Box3D, box_corners, f_viz, points_in_polygon, project, world_to_camera
from toydrive.toyworld import (
    LOCATIONS,
    OBJECT_CLASSES,
    TIMES_OF_DAY,
    WEATHERS,
    DatasetError,
    RenderConfig,
    SceneConfig,
    SceneRecord,
    build_prompt,
    generate_dataset,
    make_rig,
    read_dataset,
    render_rig,
    render_view,
    sample_scene,
    write_dataset,
)

RC = RenderConfig()


def empty_scene(boxes=(), time="day", weather="sunny"):
    return SceneRecord("t", [], list(boxes), "toytown", time, weather, make_rig())


class TestSampling:
    def test_deterministic(self):
        assert sample_scene(11) == sample_scene(11)
        assert sample_scene(11) != sample_scene(12)

    def test_coverage_and_validity(self):
        cfg = SceneConfig()
        classes, locs, times, weathers = set(), set(), set(), set()
        counts = []
        for seed in range(1000):
            s = sample_scene(seed, cfg)
            counts.append(len(s.boxes))
            assert len(s.boxes) <= cfg.max_boxes
            for b in s.boxes:
                classes.add(b.class_id)
                assert np.abs(box_corners(b)[:, :2]).max() < cfg.map_extent / 2
                if b.class_id in (0, 1):
                    drivable = [e.vertices for e in s.road_elements if e.class_id == 0]
                    assert any(points_in_polygon(b.center[0], b.center[1], p) for p in drivable)
            for i, a in enumerate(s.boxes):
                for b in s.boxes[i + 1:]:
                    ra = 0.5 * math.hypot(*a.size[:2])
                    rb = 0.5 * math.hypot(*b.size[:2])
                    assert math.hypot(*(a.center[:2] - b.center[:2])) >= ra + rb
            locs.add(s.location)
            times.add(s.time_of_day)
            weathers.add(s.weather)
        assert classes == set(range(len(OBJECT_CLASSES)))
        assert locs == set(LOCATIONS) and times == set(TIMES_OF_DAY) and weathers == set(WEATHERS)
        assert min(counts) == 0 and max(counts) >= cfg.max_boxes - 2

    def test_no_boxes_allowed(self):
        s = sample_scene(5, SceneConfig(max_boxes=0))
        assert s.boxes == []
        assert s.road_elements


class TestRender:
    def test_empty_scene_is_background(self):
        for time in TIMES_OF_DAY:
            for weather in WEATHERS:
                img = render_view(empty_scene(time=time, weather=weather), make_rig().poses[1], RC)
                assert img.shape == (48, 80, 3) and img.dtype == np.uint8
                assert (img == RC.backgrounds[(time, weather)]).all()

    def test_box_behind_camera_invisible(self):
        pose = make_rig().poses[1]  # looks along +x
        box = Box3D(0, (-10, 0, 1), (2, 2, 2), 0.0)
        assert not f_viz(box, pose)
        np.testing.assert_array_equal(render_view(empty_scene([box]), pose, RC),
                                      render_view(empty_scene(), pose, RC))

    def test_cube_matches_projected_corner_rectangle(self):
        pose = make_rig().poses[1]
        box = Box3D(1, (10, 1, 1.5), (2, 2, 2), 0.0)
        img = render_view(empty_scene([box]), pose, RC)
        rows, cols = np.nonzero((img == RC.class_colors[1]).all(-1))
        uv = np.array([project(world_to_camera(c, pose), pose.intrinsics) for c in box_corners(box)])
        # a pixel is painted when its centre (u + 0.5, v + 0.5) lies inside the silhouette
        assert cols.min() == math.ceil(uv[:, 0].min() - 0.5)
        assert cols.max() == math.floor(uv[:, 0].max() - 0.5)
        assert rows.min() == math.ceil(uv[:, 1].min() - 0.5)
        assert rows.max() == math.floor(uv[:, 1].max() - 0.5)
        # axis-aligned cube seen head on: silhouette is the rectangle itself
        assert len(rows) == (cols.max() - cols.min() + 1) * (rows.max() - rows.min() + 1)

    def test_near_box_occludes_far_box(self):
        pose = make_rig().poses[1]
        near = Box3D(0, (6, 0, 1), (1, 1, 1), 0.0)
        far = Box3D(1, (15, 0, 1), (2, 2, 2), 0.0)
        img = render_view(empty_scene([far, near]), pose, RC)
        centre = img[24, 40]
        assert tuple(centre) == RC.class_colors[0]

    def test_rig_views_differ_and_deterministic(self):
        s = sample_scene(21)
        a, b = render_rig(s, rc=RC), render_rig(s, rc=RC)
        assert len(a) == 3
        for x, y in zip(a, b):
            np.testing.assert_array_equal(x, y)

    def test_palette_distinct(self):
        with pytest.raises(ValueError):
            RenderConfig(class_colors={0: (10, 10, 10), 1: (12, 10, 10), 2: (200, 200, 0), 3: (0, 200, 200)})
        assert RenderConfig.from_json(json.loads(json.dumps(RC.to_json()))) == RC


def test_prompt():
    s = empty_scene()
    assert build_prompt(s) == "A driving scene image at toytown. sunny, day."


class TestDataset:
    def test_round_trip(self, tmp_path):
        ds = generate_dataset(4, seed=3)
        write_dataset(ds, tmp_path / "d")
        back = read_dataset(tmp_path / "d")
        assert back.scenes == ds.scenes
        for a, b in zip(back.images, ds.images):
            for x, y in zip(a, b):
                np.testing.assert_array_equal(x, y)
        assert back.config == json.loads(json.dumps(ds.config))

    def test_generation_deterministic(self, tmp_path):
        write_dataset(generate_dataset(3, seed=9), tmp_path / "a")
        write_dataset(generate_dataset(3, seed=9), tmp_path / "b")
        files = sorted(p.relative_to(tmp_path / "a") for p in (tmp_path / "a").rglob("*") if p.is_file())
        assert len(files) == 2 + 9
        for rel in files:
            assert (tmp_path / "a" / rel).read_bytes() == (tmp_path / "b" / rel).read_bytes()

    def test_missing_manifest(self, tmp_path):
        with pytest.raises(DatasetError) as err:
            read_dataset(tmp_path)
        assert err.value.path == tmp_path / "manifest.json"

    def test_bad_version(self, tmp_path):
        write_dataset(generate_dataset(1, seed=0), tmp_path)
        m = json.loads((tmp_path / "manifest.json").read_text())
        m["format_version"] = 99
        (tmp_path / "manifest.json").write_text(json.dumps(m))
        with pytest.raises(DatasetError, match="version"):
            read_dataset(tmp_path)

    def test_missing_and_corrupt_image(self, tmp_path):
        write_dataset(generate_dataset(1, seed=0), tmp_path)
        img = next((tmp_path / "images").glob("*_1.ppm"))
        img.write_bytes(b"P5\n1 1\n255\n\x00")
        with pytest.raises(DatasetError) as err:
            read_dataset(tmp_path)
        assert err.value.path == img
        img.unlink()
        with pytest.raises(DatasetError, match="missing") as err:
            read_dataset(tmp_path)
        assert err.value.path == img

    def test_subset_and_index(self):
        ds = generate_dataset(3, seed=1)
        sub = ds.subset([2, 0])
        assert [s.scene_id for s in sub.scenes] == ["s1_000002", "s1_000000"]
        assert ds.index("s1_000001") == 1
        with pytest.raises(KeyError):
            ds.index("nope")
