"""Manifest I/O, PNG round-trips, holdout protocols, synthetic ground truth."""

import json
import os

import numpy as np
import pytest

from xfield import data
from xfield.data import (CoordinateLengthError, DimensionSpec, ImageEntry, Manifest,
                         ManifestSchemaError, holdout_split, load_image, load_manifest,
                         save_image, save_manifest)


def minimal_manifest():
    return Manifest(
        name="pair",
        dims=[DimensionSpec("t", "time", 0.0, 1.0)],
        images=[ImageEntry("a.png", [0.0]), ImageEntry("b.png", [1.0])],
    )


class TestManifest:
    def test_minimal_roundtrip(self, tmp_path):
        path = tmp_path / "manifest.json"
        save_manifest(minimal_manifest(), path)
        loaded = load_manifest(path)
        assert loaded.n_d == 1
        assert [e.path for e in loaded.images] == ["a.png", "b.png"]

    def test_coordinate_length_mismatch(self, tmp_path):
        manifest = minimal_manifest()
        manifest.images[1] = ImageEntry("b.png", [1.0, 2.0])
        with pytest.raises(CoordinateLengthError):
            manifest.validate()

    def test_schema_violation_distinct_from_missing_file(self, tmp_path):
        with pytest.raises(FileNotFoundError):
            load_manifest(tmp_path / "absent.json")
        bad = tmp_path / "bad.json"
        bad.write_text(json.dumps({"name": "x", "images": []}))
        with pytest.raises(ManifestSchemaError):
            load_manifest(bad)

    def test_save_load_save_bytes_identical(self, tmp_path):
        p1, p2 = tmp_path / "m1.json", tmp_path / "m2.json"
        manifest = minimal_manifest()
        manifest.heldout = [1]
        save_manifest(manifest, p1)
        save_manifest(load_manifest(p1), p2)
        assert p1.read_bytes() == p2.read_bytes()

    def test_duplicate_coordinates_rejected(self):
        manifest = minimal_manifest()
        manifest.images[1] = ImageEntry("b.png", [0.0])
        with pytest.raises(ManifestSchemaError):
            manifest.validate()

    def test_normalization_uses_dim_range(self):
        manifest = Manifest("raw", [DimensionSpec("t", "time", 2.0, 6.0)],
                            [ImageEntry("a.png", [2.0]), ImageEntry("b.png", [5.0])])
        np.testing.assert_allclose(manifest.normalized_coord(1), [0.75])


class TestImageIO:
    def test_roundtrip_bit_identical(self, tmp_path):
        rng = np.random.default_rng(0)
        img = rng.uniform(size=(16, 20, 3)).astype(np.float32)
        p1, p2 = tmp_path / "a.png", tmp_path / "b.png"
        save_image(p1, img)
        loaded = load_image(p1)
        save_image(p2, loaded)
        assert p1.read_bytes() == p2.read_bytes()
        # quantization error bounded by half a step
        assert np.abs(loaded - img).max() <= 0.5 / 255 + 1e-7

    def test_uint8_exact_roundtrip(self, tmp_path):
        img = data.from_uint8(np.random.default_rng(1).integers(0, 256, (8, 8, 3), dtype=np.uint8))
        save_image(tmp_path / "x.png", img)
        np.testing.assert_array_equal(load_image(tmp_path / "x.png"), img)


class TestHoldoutSplit:
    def test_center_3x3(self):
        scene = data.synth_lightfield_plane(size=16, disparity_px=2.0, grid=(3, 3), seed=0)
        train, held = holdout_split(scene.manifest, "center")
        assert len(train) == 8 and len(held) == 1
        assert scene.manifest.images[held[0]].coord == [1.0, 1.0]

    def test_corners_2x2_degenerate(self):
        scene = data.synth_lightfield_plane(size=16, disparity_px=2.0, grid=(2, 2), seed=0)
        train, held = holdout_split(scene.manifest, "corners")
        assert len(train) == 4 and held == []

    def test_corners_3x3(self):
        scene = data.synth_lightfield_plane(size=16, disparity_px=2.0, grid=(3, 3), seed=0)
        train, held = holdout_split(scene.manifest, "corners")
        assert len(train) == 4 and len(held) == 5

    def test_middle_frame_triplet(self):
        scene = data.synth_translate(size=16, total_shift_px=4.0, n_frames=3, seed=0)
        train, held = holdout_split(scene.manifest, "middle_frame")
        assert train == [0, 2] and held == [1]

    def test_middle_frame_five(self):
        scene = data.synth_translate(size=16, total_shift_px=4.0, n_frames=5, seed=0)
        train, held = holdout_split(scene.manifest, "middle_frame")
        assert train == [0, 2, 4] and held == [1, 3]

    def test_center_needs_odd_grid(self):
        scene = data.synth_lightfield_plane(size=16, disparity_px=2.0, grid=(2, 3), seed=0)
        with pytest.raises(ValueError):
            holdout_split(scene.manifest, "center")

    def test_explicit_needs_heldout_list(self):
        with pytest.raises(ValueError):
            holdout_split(minimal_manifest(), "explicit")

    def test_partition_properties(self):
        scene = data.synth_lightfield_plane(size=16, disparity_px=2.0, grid=(3, 3), seed=1)
        for protocol in ("center", "corners"):
            train, held = holdout_split(scene.manifest, protocol)
            assert set(train) & set(held) == set()
            assert sorted(train + held) == list(range(9))


class TestSynthTranslate:
    def test_zero_shift_frames_identical(self):
        scene = data.synth_translate(size=32, total_shift_px=0.0, n_frames=3, seed=0)
        np.testing.assert_array_equal(scene.images[0], scene.images[1])
        np.testing.assert_array_equal(scene.images[0], scene.images[2])

    def test_three_frames_shift_arithmetic(self):
        scene = data.synth_translate(size=32, total_shift_px=8.0, n_frames=3, seed=0)
        # frame spacing is 4 px: frame 2 equals frame 0 shifted by 8 px exactly
        np.testing.assert_allclose(scene.images[2][:, :-8], scene.images[0][:, 8:], atol=1e-6)
        np.testing.assert_allclose(scene.images[1][:, :-4], scene.images[0][:, 4:], atol=1e-6)

    def test_excessive_shift_rejected(self):
        with pytest.raises(ValueError):
            data.synth_translate(size=32, total_shift_px=20.0, n_frames=3, seed=0)

    def test_ground_truth_flow_reaches_last_frame(self):
        scene = data.synth_translate(size=64, total_shift_px=8.0, n_frames=3, seed=0)
        rec = scene.warp_by_truth(0, scene.manifest.normalized_coord(2))
        interior = (slice(9, 55), slice(9, 55))
        assert np.abs(rec[interior] - scene.images[2][interior]).max() <= 1e-3

    def test_true_jacobian_value(self):
        scene = data.synth_translate(size=32, total_shift_px=6.0, n_frames=4, seed=0)
        assert scene.true_jacobian.shape == (32, 32, 2, 1)
        np.testing.assert_array_equal(scene.true_jacobian[..., 0, 0], 6.0)
        np.testing.assert_array_equal(scene.true_jacobian[..., 1, 0], 0.0)


class TestSynthLightfield:
    def test_zero_disparity_views_identical(self):
        scene = data.synth_lightfield_plane(size=32, disparity_px=0.0, grid=(2, 2), seed=0)
        for img in scene.images[1:]:
            np.testing.assert_array_equal(img, scene.images[0])

    def test_view_shift_arithmetic(self):
        scene = data.synth_lightfield_plane(size=32, disparity_px=4.0, grid=(3, 3), seed=0)
        # one horizontal grid step = disparity * 0.5 = 2 px
        np.testing.assert_allclose(scene.images[1][:, :-2], scene.images[0][:, 2:], atol=1e-6)
        # one vertical grid step moves rows
        np.testing.assert_allclose(scene.images[3][:-2, :], scene.images[0][2:, :], atol=1e-6)

    def test_grid_too_small(self):
        with pytest.raises(ValueError):
            data.synth_lightfield_plane(size=32, disparity_px=2.0, grid=(1, 3), seed=0)


class TestGeneratorSelfConsistency:
    """Warping any frame by the analytic flow reproduces any other frame."""

    @pytest.mark.parametrize("seed", [0, 1, 2])
    def test_translate_all_pairs(self, seed):
        scene = data.synth_translate(size=64, total_shift_px=8.0, n_frames=4, seed=seed)
        interior = (slice(10, 54), slice(10, 54))
        for i in range(4):
            for j in range(4):
                rec = scene.warp_by_truth(i, scene.manifest.normalized_coord(j))
                assert np.abs(rec[interior] - scene.images[j][interior]).max() <= 1e-3

    @pytest.mark.parametrize("seed", [0, 1])
    def test_lightfield_all_pairs(self, seed):
        scene = data.synth_lightfield_plane(size=64, disparity_px=5.0, grid=(3, 2), seed=seed)
        interior = (slice(10, 54), slice(10, 54))
        n = len(scene.images)
        for i in range(n):
            for j in range(n):
                rec = scene.warp_by_truth(i, scene.manifest.normalized_coord(j))
                assert np.abs(rec[interior] - scene.images[j][interior]).max() <= 1e-3


class TestShadowSweep:
    def test_constant_with_static_shadow(self):
        scene = data.synth_shadow_sweep(size=32, n_lights=3, travel_px=0.0, seed=0)
        np.testing.assert_array_equal(scene.images[0], scene.images[2])

    def test_mask_geometry(self):
        scene = data.synth_shadow_sweep(size=64, n_lights=3, travel_px=10.0,
                                        band_width_px=16.0, seed=0)
        masks = scene.extras["shadow_masks"]
        # band columns: roughly band_width wide, full height
        count = masks[1].sum()
        assert 10 * 64 <= count <= 22 * 64
        # the band sweeps: masks at different lights differ
        assert (masks[0] != masks[2]).any()

    def test_two_layer_ground_truth_reconstructs_frames(self):
        scene = data.synth_shadow_sweep(size=64, n_lights=5, travel_px=12.0, seed=1)
        albedo = scene.extras["true_albedo"]
        shading = scene.extras["true_shading"]
        for i, frame in enumerate(scene.images):
            rec = albedo * shading[i][..., None]
            np.testing.assert_allclose(rec, frame, atol=1e-6)

    def test_save_writes_dataset(self, tmp_path):
        scene = data.synth_shadow_sweep(size=16, n_lights=2, seed=0)
        manifest_path = scene.save(tmp_path)
        manifest = load_manifest(manifest_path)
        assert len(manifest.images) == 2
        assert os.path.exists(tmp_path / "truth.npz")
        obs = data.load_observations(manifest, tmp_path)
        assert obs[0].image.shape == (16, 16, 3)
