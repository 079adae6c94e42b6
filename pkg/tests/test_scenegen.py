import json
import math

import numpy as np
import pytest

from gvsynergy.diffcore import Graph, dumps_tensor
from gvsynergy.geometry import project_points
from gvsynergy.scenegen import (N_CLASSES, PlacementError, SceneFormatError, SplitMix64, Xoshiro256,
                                depth_feature_shapes, encode_images, encoder_param_shapes, generate_scene,
                                read_ppm, read_scene, write_ppm, write_scene)
from gvsynergy.scenegen.generate import ROOM_MAX, ROOM_MIN
from gvsynergy.verify import BLOCK_TOL, resolve_checks, run_gradient_suite


@pytest.fixture(scope="module")
def scene():
    return generate_scene(3)


def slab_ray(origin, direction, lo, hi):
    """Scalar slab test: (t_near, t_far) or None."""
    t0, t1 = -math.inf, math.inf
    for a in range(3):
        if direction[a] == 0.0:
            if not lo[a] <= origin[a] <= hi[a]:
                return None
            continue
        ta, tb = (lo[a] - origin[a]) / direction[a], (hi[a] - origin[a]) / direction[a]
        t0, t1 = max(t0, min(ta, tb)), min(t1, max(ta, tb))
    return (t0, t1) if t0 <= t1 else None


def oracle_depth(scene, view, i, j):
    """Camera-z depth of pixel (row i, col j) by scalar ray casting."""
    cam = scene.cameras[view]
    K, R = cam.K, cam.P[:3, :3]
    d_cam = np.array([(j + 0.5 - K[0, 2]) / K[0, 0], (i + 0.5 - K[1, 2]) / K[1, 1], 1.0])
    origin, direction = cam.center, R.T @ d_cam
    best = slab_ray(origin, direction, np.array(ROOM_MIN), np.array(ROOM_MAX))[1]
    for obj in scene.objects:
        b = obj.box
        c, s = math.cos(b.yaw), math.sin(b.yaw)
        rel = origin - np.array(b.center)
        o_loc = np.array([c * rel[0] + s * rel[1], -s * rel[0] + c * rel[1], rel[2]])
        d_loc = np.array([c * direction[0] + s * direction[1], -s * direction[0] + c * direction[1], direction[2]])
        hit = slab_ray(o_loc, d_loc, -np.array(b.dims) / 2, np.array(b.dims) / 2)
        if hit is not None and 1e-9 < hit[0] < best:
            best = hit[0]
    return best


class TestRng:
    def test_splitmix_reference(self):
        assert SplitMix64(0).next() == 0xE220A8397B1DCDAF

    def test_xoshiro_reference(self):
        r = Xoshiro256(state=[1, 2, 3, 4])
        assert [r.next_u64() for _ in range(4)] == [11520, 0, 1509978240, 1215971899390074240]

    def test_zero_state_rejected(self):
        with pytest.raises(ValueError):
            Xoshiro256(state=[0, 0, 0, 0])

    def test_uniform_range(self):
        r = Xoshiro256(5)
        vals = [r.random() for _ in range(1000)]
        assert min(vals) >= 0.0 and max(vals) < 1.0
        assert all(0 <= r.integers(3) < 3 for _ in range(100))


class TestGenerate:
    def test_deterministic(self):
        a, b = generate_scene(11), generate_scene(11)
        assert a.boxes == b.boxes and a.cameras == b.cameras
        for x, y in zip(a.images + a.depths, b.images + b.depths):
            assert x.tobytes() == y.tobytes()

    def test_shapes_and_contract(self, scene):
        assert scene.n_views == 8 and len(scene.objects) == 4
        assert scene.images[0].shape == (3, 64, 64) and scene.depths[0].shape == (64, 64)
        assert all(0 <= b.class_id < N_CLASSES for b in scene.boxes)
        diag = np.linalg.norm(np.subtract(ROOM_MAX, ROOM_MIN))
        for img, dep in zip(scene.images, scene.depths):
            assert img.min() >= 0 and img.max() <= 1
            assert dep.min() > 0 and dep.max() <= diag

    def test_boxes_inside_room(self, scene):
        for b in scene.boxes:
            c = b.corners()
            assert np.all(c >= np.array(ROOM_MIN) - 1e-9) and np.all(c <= np.array(ROOM_MAX) + 1e-9)

    def test_every_box_seen_in_two_views(self, scene):
        for b in scene.boxes:
            seen = 0
            for cam in scene.cameras:
                u, v, _, ok = project_points(cam, b.corners())
                W, H = cam.image_size
                seen += (ok & (u >= 0) & (u < W) & (v >= 0) & (v < H)).mean() >= 0.1
            assert seen >= 2

    def test_empty_room_wall_distances(self):
        empty = generate_scene(4, n_objects=0, image_size=(16, 16), n_views=3)
        assert not empty.objects
        for view in range(3):
            for i, j in [(0, 0), (7, 9), (15, 15), (3, 12)]:
                assert abs(empty.depths[view][i, j] - oracle_depth(empty, view, i, j)) < 1e-9

    def test_depth_matches_scalar_raycast(self, scene):
        rng = np.random.default_rng(0)
        for _ in range(200):
            view, i, j = rng.integers(8), rng.integers(64), rng.integers(64)
            assert abs(scene.depths[view][i, j] - oracle_depth(scene, view, i, j)) < 1e-9

    def test_corner_depth_consistency(self, scene):
        # near a projected corner some ray hits that corner region or an occluder in front of it
        tol = 0.25
        checked = 0
        for cam, dep in zip(scene.cameras, scene.depths):
            for b in scene.boxes:
                u, v, z, ok = project_points(cam, b.corners())
                for uk, vk, zk, okk in zip(u, v, z, ok):
                    if not okk or not (1 <= uk < 63 and 1 <= vk < 63):
                        continue
                    j, i = int(uk), int(vk)
                    assert dep[i - 1:i + 2, j - 1:j + 2].min() <= zk + tol
                    checked += 1
        assert checked > 20

    def test_too_many_objects(self):
        with pytest.raises(PlacementError, match="1000"):
            generate_scene(0, n_objects=500)

    def test_bad_arguments(self):
        with pytest.raises(ValueError):
            generate_scene(0, n_objects=-1)
        with pytest.raises(ValueError):
            generate_scene(0, n_views=0)


class TestSceneIO:
    def test_round_trip(self, scene, tmp_path):
        back = read_scene(write_scene(scene, tmp_path / "s"))
        assert back.cameras == scene.cameras and back.boxes == scene.boxes
        for a, b in zip(back.depths, scene.depths):
            assert a.tobytes() == b.tobytes()
        for a, b in zip(back.images, scene.images):
            assert np.max(np.abs(a - b)) <= 0.5 / 255 + 1e-12

    def test_layout(self, scene, tmp_path):
        root = write_scene(scene, tmp_path / "s")
        meta = json.loads((root / "scene.json").read_text())
        assert meta["format_version"] == 1
        assert (root / "images" / "view_007.ppm").exists() and (root / "depth" / "view_000.gvt").exists()

    def test_truncated_depth(self, scene, tmp_path):
        root = write_scene(scene, tmp_path / "s")
        p = root / "depth" / "view_002.gvt"
        p.write_bytes(p.read_bytes()[:100])
        with pytest.raises(SceneFormatError, match="view_002.gvt"):
            read_scene(root)

    def test_missing_image(self, scene, tmp_path):
        root = write_scene(scene, tmp_path / "s")
        (root / "images" / "view_001.ppm").unlink()
        with pytest.raises(SceneFormatError, match="view_001.ppm"):
            read_scene(root)

    def test_unknown_keys_accepted(self, scene, tmp_path):
        root = write_scene(scene, tmp_path / "s")
        meta = json.loads((root / "scene.json").read_text())
        meta["future_field"] = {"x": 1}
        meta["objects"][0]["material"] = "oak"
        (root / "scene.json").write_text(json.dumps(meta))
        assert read_scene(root).boxes == scene.boxes

    def test_version_mismatch(self, scene, tmp_path):
        root = write_scene(scene, tmp_path / "s")
        meta = json.loads((root / "scene.json").read_text())
        meta["format_version"] = 2
        (root / "scene.json").write_text(json.dumps(meta))
        with pytest.raises(SceneFormatError, match="format_version"):
            read_scene(root)

    def test_bad_magic(self, scene, tmp_path):
        root = write_scene(scene, tmp_path / "s")
        (root / "depth" / "view_000.gvt").write_bytes(b"NOPE" + dumps_tensor(np.zeros(2))[4:])
        with pytest.raises(SceneFormatError, match="magic"):
            read_scene(root)

    def test_missing_scene(self, tmp_path):
        with pytest.raises(SceneFormatError, match="scene.json"):
            read_scene(tmp_path / "nothing")

    def test_ppm_round_trip(self, tmp_path):
        img = np.random.default_rng(0).integers(0, 256, (3, 5, 7)) / 255.0
        write_ppm(tmp_path / "a.ppm", img)
        np.testing.assert_array_equal(read_ppm(tmp_path / "a.ppm"), img)


class TestEncoder:
    def test_zero_params_zero_features(self, scene):
        g = Graph()
        shapes = {**encoder_param_shapes(8, 6), **depth_feature_shapes(8, 6)}
        p = {k: g.constant(np.zeros(s)) for k, s in shapes.items()}
        f, F = encode_images(scene, p, g)
        assert f.shape == (8, 8, 16, 16) and F.shape == (8, 6, 16, 16)
        assert not f.data.any() and not F.data.any()

    def test_indivisible_size(self):
        small = generate_scene(1, n_objects=1, image_size=(30, 30), n_views=2)
        g = Graph()
        shapes = encoder_param_shapes(4, 4)
        with pytest.raises(ValueError, match="divisible"):
            encode_images(small, {k: g.constant(np.zeros(s)) for k, s in shapes.items()}, g, False)


@pytest.mark.parametrize("name", resolve_checks("scenegen"))
def test_block_gradients(name):
    (res,) = run_gradient_suite([name])
    assert res.max_error < BLOCK_TOL, res.errors
