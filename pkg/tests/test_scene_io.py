import json

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from PIL import Image

from mvseg.scene_io import (
    IGNORE_LABEL,
    CameraModel,
    Scene,
    SceneError,
    Split,
    View,
    assign_split,
    generate_rays,
    gather_pixels,
    load_scene,
    look_at_pose,
    sample_ray_batch,
    save_scene,
)


def camera(pose=None, w=32, h=24, f=20.0):
    return CameraModel(w, h, f, (w / 2, h / 2), np.eye(4) if pose is None else pose)


def random_pose(rng):
    q, _ = np.linalg.qr(rng.normal(size=(3, 3)))
    if np.linalg.det(q) < 0:
        q[:, 0] *= -1
    pose = np.eye(4)
    pose[:3, :3] = q
    pose[:3, 3] = rng.normal(size=3) * 3
    return pose


@pytest.fixture
def small_scene():
    rng = np.random.default_rng(0)
    views = []
    for i in range(3):
        img = rng.integers(0, 256, (24, 32, 3)).astype(np.float32) / 255
        labels = rng.integers(0, 3, (24, 32)).astype(np.uint8) if i == 0 else None
        if labels is not None:
            labels[0, :5] = IGNORE_LABEL
        views.append(View(f"{i:03d}", img, camera(random_pose(rng))))
        if labels is not None:
            views[-1] = View(views[-1].name, img, views[-1].camera, labels)
    return Scene(tuple(views), 3, (Split.TRAIN_LABELED, Split.TRAIN_UNLABELED, Split.TEST), 0.5, 6.0, ("a", "b", "c"))


class TestCameraModel:
    def test_rejects_non_orthonormal(self):
        pose = np.eye(4)
        pose[0, 0] = 1.1
        with pytest.raises(SceneError):
            camera(pose)

    def test_rejects_bad_focal_and_principal_point(self):
        with pytest.raises(SceneError):
            CameraModel(32, 24, 0.0, (16, 12), np.eye(4))
        with pytest.raises(SceneError):
            CameraModel(32, 24, 10.0, (32, 12), np.eye(4))

    def test_look_at_orthonormal(self):
        pose = look_at_pose((3, 1, 2), (0, 0, 0))
        r = pose[:3, :3]
        np.testing.assert_allclose(r.T @ r, np.eye(3), atol=1e-12)
        fwd = -r[:, 2]
        np.testing.assert_allclose(fwd, -np.array([3, 1, 2]) / np.sqrt(14), atol=1e-12)


class TestGenerateRays:
    def test_principal_point_looks_down_minus_z(self):
        cam = camera()
        rays = generate_rays(cam, [(16, 12)], 0.1, 5.0)
        np.testing.assert_allclose(rays.directions[0], [0, 0, -1], atol=1e-15)
        np.testing.assert_array_equal(rays.origins[0], [0, 0, 0])

    def test_one_focal_right(self):
        cam = camera(w=64)
        rays = generate_rays(cam, [(32 + 20.0, 12)], 0.1, 5.0)
        np.testing.assert_allclose(rays.directions[0], np.array([1, 0, -1]) / np.sqrt(2), atol=1e-15)

    def test_out_of_bounds(self):
        with pytest.raises(SceneError):
            generate_rays(camera(), [(-1, 3)], 0.1, 5.0)
        with pytest.raises(SceneError):
            generate_rays(camera(), [(3, 25)], 0.1, 5.0)

    @settings(max_examples=100, deadline=None)
    @given(st.integers(0, 2**31), st.floats(0.1, 20))
    def test_unit_norm_origin_and_reprojection(self, seed, depth):
        rng = np.random.default_rng(seed)
        cam = camera(random_pose(rng))
        pix = rng.uniform([0, 0], [32, 24], size=(20, 2))
        rays = generate_rays(cam, pix, 0.0, 30.0)
        np.testing.assert_allclose(np.linalg.norm(rays.directions, axis=-1), 1.0, atol=1e-6)
        assert (rays.origins == cam.pose[:3, 3]).all()
        pts = rays.origins + depth * rays.directions
        np.testing.assert_allclose(cam.project(pts), pix, atol=1e-4)

    def test_ray_indexing(self):
        rays = generate_rays(camera(), [(1.5, 2.5), (3.5, 4.5)], 0.5, 3.0, view_id=4)
        r = rays[1]
        assert r.pixel == (3.5, 4.5) and r.view_id == 4 and r.near == 0.5 and r.far == 3.0
        assert len(list(rays)) == 2


class TestSceneRoundTrip:
    def test_round_trip(self, small_scene, tmp_path):
        save_scene(small_scene, tmp_path / "s")
        loaded = load_scene(tmp_path / "s")
        assert len(loaded) == 3
        assert loaded.split == small_scene.split
        assert loaded.class_count == 3 and loaded.class_names == ("a", "b", "c")
        for a, b in zip(small_scene.views, loaded.views):
            assert np.array_equal(a.image, b.image)
            assert np.abs(a.camera.pose - b.camera.pose).max() <= 1e-7
            if a.label_map is None:
                assert b.label_map is None
            else:
                assert np.array_equal(a.label_map, b.label_map)

    def test_missing_pose_names_view(self, small_scene, tmp_path):
        root = save_scene(small_scene, tmp_path / "s")
        poses = json.loads((root / "poses.json").read_text())
        del poses["001"]
        (root / "poses.json").write_text(json.dumps(poses))
        with pytest.raises(SceneError, match="001"):
            load_scene(root)

    def test_label_value_out_of_range(self, small_scene, tmp_path):
        root = save_scene(small_scene, tmp_path / "s")
        bad = np.zeros((24, 32), np.uint8)
        bad[3, 3] = 3  # == class_count
        Image.fromarray(bad, mode="L").save(root / "labels" / "000.png")
        with pytest.raises(SceneError, match="label out of range"):
            load_scene(root)

    def test_label_size_mismatch(self, small_scene, tmp_path):
        root = save_scene(small_scene, tmp_path / "s")
        Image.fromarray(np.zeros((10, 10), np.uint8), mode="L").save(root / "labels" / "000.png")
        with pytest.raises(SceneError, match="size"):
            load_scene(root)


class TestSampleRayBatch:
    def test_empty_count(self, small_scene):
        assert len(sample_ray_batch(small_scene, 0)) == 0

    def test_determinism(self, small_scene):
        a = sample_ray_batch(small_scene, 100, None, 11)
        b = sample_ray_batch(small_scene, 100, None, 11)
        assert np.array_equal(a.pixels, b.pixels) and np.array_equal(a.view_ids, b.view_ids)
        np.testing.assert_array_equal(a.directions, b.directions)

    def test_empty_pool(self, small_scene):
        only_train = Scene(small_scene.views[:2], 3, small_scene.split[:2], 0.5, 6.0)
        with pytest.raises(SceneError):
            sample_ray_batch(only_train, 5, [Split.TEST], 0)

    def test_pool_filter(self, small_scene):
        rays = sample_ray_batch(small_scene, 200, [Split.TEST], 1)
        assert set(rays.view_ids.tolist()) == {2}

    def test_every_view_hit_chi_square(self, small_scene):
        from scipy.stats import chisquare

        rays = sample_ray_batch(small_scene, 10_000, None, 2)
        counts = np.bincount(rays.view_ids, minlength=3)
        assert (counts > 0).all()
        assert chisquare(counts).pvalue > 0.001

    def test_gather_pixels(self, small_scene):
        rays = sample_ray_batch(small_scene, 300, None, 3)
        colours, labels = gather_pixels(small_scene, rays)
        rows, cols = rays.rows_cols
        for k in range(300):
            v = small_scene.views[rays.view_ids[k]]
            assert np.array_equal(colours[k], v.image[rows[k], cols[k]])
            expect = IGNORE_LABEL if v.label_map is None else v.label_map[rows[k], cols[k]]
            assert labels[k] == expect


def test_assign_split_default_fraction():
    tags = assign_split(300)
    assert tags.count(Split.TEST) == 150
    assert tags.count(Split.TRAIN_LABELED) == 3  # 2% of 150 training views
