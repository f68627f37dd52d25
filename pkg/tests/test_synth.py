import json

import numpy as np
import pytest

from traitnerf import dataset, geometry, losses, synth
from traitnerf.errors import ConfigError
from traitnerf.synth import SceneConfig

SMALL = SceneConfig(image_size=(64, 40))


@pytest.fixture(scope="module")
def scene():
    return synth.make_scene(SMALL, seed=11)


class TestMakeScene:
    def test_deterministic(self):
        a, b = synth.make_scene(SMALL, seed=4), synth.make_scene(SMALL, seed=4)
        assert np.array_equal(a.texture.phases, b.texture.phases)
        assert a.input_views == b.input_views and a.heldout_views == b.heldout_views
        ra, rb = synth.rasterize(a, a.cameras[3]), synth.rasterize(b, b.cameras[3])
        assert np.array_equal(ra.color, rb.color) and np.array_equal(ra.trait, rb.trait)

    def test_default_arc_spans_sixty_degrees(self, scene):
        assert scene.angles_deg.min() == pytest.approx(-30) and scene.angles_deg.max() == pytest.approx(30)

    def test_three_input_views_and_disjoint_splits(self, scene):
        assert len(scene.input_views) == 3
        sets = [set(scene.input_views), set(scene.supervision_views), set(scene.heldout_views)]
        assert sum(len(s) for s in sets) == len(set.union(*sets)) == len(scene.cameras)
        assert len(scene.heldout_views) == 20

    def test_every_camera_sees_enough_foreground(self, scene):
        for cam in scene.cameras:
            assert synth.rasterize(scene, cam).valid.mean() >= 0.3

    def test_bad_arc(self):
        with pytest.raises(ConfigError):
            synth.make_scene(SceneConfig(image_size=(64, 40), arc_deg=200.0))

    def test_unknown_trait(self):
        with pytest.raises(ConfigError):
            synth.make_scene(SceneConfig(image_size=(64, 40), trait="scales"))

    def test_vein_modality(self):
        s = synth.make_scene(SceneConfig(image_size=(64, 40), trait="vein"), seed=2)
        bundle = synth.rasterize(s, s.cameras[15])
        assert 0 < bundle.trait.mean() < 0.5


class TestRasterize:
    def test_ray_along_axis_misses(self, scene):
        origin = np.array([[0.0, 10.0, 0.0]])
        t, hit, _ = synth.intersect(scene, origin, np.array([[0.0, 1.0, 0.0]]))
        assert not hit[0] and t[0] == 0

    def test_background_black_with_zero_depth(self, scene):
        bundle = synth.rasterize(scene, scene.cameras[0])
        bg = ~bundle.valid
        assert bg.any()
        assert not bundle.color[bg].any() and not bundle.depth[bg].any() and not bundle.trait[bg].any()
        assert (bundle.depth[bundle.valid] > 0).all()

    def test_silhouette_center_depth(self, scene):
        center = scene.cameras[len(scene.cameras) // 2]
        assert np.allclose(center.center, [0, 0, -scene.config.camera_distance])
        cx, cy = center.intrinsics[0, 2], center.intrinsics[1, 2]
        origins, dirs = geometry.pixel_rays(center, np.array([[cx, cy]]))
        t, hit, _ = synth.intersect(scene, origins, dirs)
        a = scene.config.semi_axes[0]
        assert hit[0] and abs(t[0] - (scene.config.camera_distance - a)) < 1e-9

    def test_cross_view_depth_consistency(self, scene):
        i, j = scene.input_views[0], scene.input_views[1]
        cam_i, cam_j = scene.cameras[i], scene.cameras[j]
        bi, bj = synth.rasterize(scene, cam_i), synth.rasterize(scene, cam_j)
        origins, dirs = geometry.pixel_rays(cam_i, geometry.pixel_grid(*cam_i.image_size))
        fg = bi.valid.ravel()
        X = origins[fg] + bi.depth.ravel()[fg, None] * dirs[fg]
        uv, _ = geometry.project_points(cam_j, X)
        # keep points visible (not self-occluded) from view j: its ray hits X first
        o_j, d_j = geometry.pixel_rays(cam_j, uv)
        t_j, hit_j, _ = synth.intersect(scene, o_j, d_j)
        dist = np.linalg.norm(X - o_j, axis=1)
        visible = hit_j & (np.abs(t_j - dist) < 1e-6)
        assert visible.mean() > 0.5
        inside = (uv[:, 0] >= 0) & (uv[:, 0] <= cam_j.width - 1) & (uv[:, 1] >= 0) & (uv[:, 1] <= cam_j.height - 1)
        sel = visible & inside
        assert sel.sum() > 100
        rounded = np.round(uv[sel]).astype(int)
        assert bj.valid[rounded[:, 1], rounded[:, 0]].mean() > 0.98
        assert np.max(np.abs(t_j[sel] - dist[sel])) < 1e-6

    def test_trait_subset_of_foreground(self, scene):
        for cam in scene.cameras[::5]:
            b = synth.rasterize(scene, cam)
            assert not (b.trait & ~b.valid).any()


class TestPseudoDepth:
    def test_identity(self, scene):
        gt = synth.rasterize(scene, scene.cameras[2]).depth
        pse = synth.pseudo_depth(gt, 1.0, 0.0, 0.0)
        assert np.array_equal(pse[gt > 0], gt[gt > 0])

    def test_default_distortion_recovered(self, scene):
        b = synth.rasterize(scene, scene.cameras[7])
        pse = synth.pseudo_depth(b.depth, -0.5, 7.0, 0.0, seed=1)
        align = losses.solve_scale_shift(b.depth, pse, b.valid)
        assert abs(align.theta_s + 0.5) < 1e-8 and abs(align.theta_t - 7) < 1e-8

    def test_noisy_recovery_within_standard_errors(self, scene):
        b = synth.rasterize(scene, scene.cameras[7])
        sigma = 0.01
        pse = synth.pseudo_depth(b.depth, -0.5, 7.0, sigma, seed=3)
        align = losses.solve_scale_shift(b.depth, pse, b.valid)
        d = b.depth[b.valid]
        A = np.stack([d, np.ones_like(d)], axis=1)
        se = sigma * np.sqrt(np.diag(np.linalg.inv(A.T @ A)))
        assert abs(align.theta_s + 0.5) < 3 * se[0] and abs(align.theta_t - 7) < 3 * se[1]

    def test_background_is_clutter(self, scene):
        b = synth.rasterize(scene, scene.cameras[7])
        pse = synth.pseudo_depth(b.depth, -0.5, 7.0, 0.0, seed=1)
        assert np.std(pse[~b.valid]) > 0.3

    def test_zero_scale_rejected(self):
        with pytest.raises(ValueError):
            synth.pseudo_depth(np.ones((2, 2)), 0.0, 1.0, 0.0)


class TestDatasetFiles:
    def test_write_and_load(self, tmp_path):
        s = synth.make_scene(SceneConfig(image_size=(32, 20)), seed=0)
        dataset.write_dataset(s, tmp_path / "d")
        ds = dataset.Dataset.load(tmp_path / "d")
        manifest = json.loads((tmp_path / "d" / "manifest.json").read_text())
        assert manifest["extrinsics"] == "world_to_camera"
        entry = manifest["views"][0]
        assert len(entry["intrinsics"]) == 9 and len(entry["rotation"]) == 9 and len(entry["translation"]) == 3
        assert {"image_path", "trait_path", "near", "far"} <= set(entry)
        truth = synth.rasterize(s, s.cameras[0])
        view = ds.views[0]
        assert np.max(np.abs(view.image - truth.color)) <= 0.5 / 255 + 1e-12
        assert np.array_equal(view.trait, truth.trait)
        assert np.array_equal(view.depth, truth.depth)
        assert np.allclose(view.camera.rotation, s.cameras[0].rotation, atol=0)

    def test_byte_identical_regeneration(self, tmp_path):
        for name in ("a", "b"):
            dataset.write_dataset(synth.make_scene(SceneConfig(image_size=(32, 20)), seed=9), tmp_path / name)
        files = sorted(p.relative_to(tmp_path / "a") for p in (tmp_path / "a").rglob("*") if p.is_file())
        assert files
        for f in files:
            assert (tmp_path / "a" / f).read_bytes() == (tmp_path / "b" / f).read_bytes()

    def test_trait_png_values(self, tmp_path):
        from PIL import Image

        s = synth.make_scene(SceneConfig(image_size=(32, 20)), seed=0)
        dataset.write_dataset(s, tmp_path)
        arr = np.array(Image.open(tmp_path / "traits" / "view_000.png"))
        assert set(np.unique(arr)) <= {0, 255}

    def test_missing_manifest(self, tmp_path):
        with pytest.raises(FileNotFoundError, match=str(tmp_path)):
            dataset.Dataset.load(tmp_path)

    def test_depth_png_round_trip(self, tmp_path):
        depth = np.array([[0.0, 2.3456], [3.0001, 1.2]])
        dataset.write_png_depth_mm(tmp_path / "d.png", depth)
        assert np.allclose(dataset.read_png(tmp_path / "d.png"), np.round(depth * 1000) / 1000, atol=1e-12)
