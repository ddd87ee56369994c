import struct

import numpy as np
import pytest

from merging_isp.align import Displacement
from merging_isp.cfa import RGGB
from merging_isp.dataio import (
    DataError,
    ExposureEntry,
    SceneManifest,
    augment,
    extract_patches,
    load_scene,
    quantize16,
    read_dataset_file,
    read_manifest,
    read_pfm,
    read_png16,
    render_ldr,
    synthesize_radiance,
    synthesize_scene,
    write_manifest,
    write_pfm,
    write_png16,
    write_scene,
)
from merging_isp.tensor import ShapeError


class TestPfm:
    def test_roundtrip_exact_in_f32(self, tmp_path):
        rng = np.random.default_rng(0)
        img = rng.random((3, 5, 7)).astype(np.float32).astype(np.float64)
        path = tmp_path / "roundtrip.pfm"
        write_pfm(path, img)
        np.testing.assert_array_equal(read_pfm(path), img)

    def test_hand_built_fixture_bytes(self, tmp_path):
        # 1x1 color PFM written by hand: header + three LE floats
        path = tmp_path / "fixture.pfm"
        payload = struct.pack("<3f", 0.25, 0.5, 1.0)
        path.write_bytes(b"PF\n1 1\n-1.0\n" + payload)
        img = read_pfm(path)
        assert img.shape == (3, 1, 1)
        np.testing.assert_array_equal(img.ravel(), [0.25, 0.5, 1.0])

    def test_rows_are_bottom_up(self, tmp_path):
        # 1x2 image: file stores the bottom row first
        path = tmp_path / "rows.pfm"
        bottom = struct.pack("<3f", 1.0, 1.0, 1.0)
        top = struct.pack("<3f", 0.0, 0.0, 0.0)
        path.write_bytes(b"PF\n1 2\n-1.0\n" + bottom + top)
        img = read_pfm(path)
        assert img[0, 0, 0] == 0.0  # top row
        assert img[0, 1, 0] == 1.0  # bottom row

    def test_big_endian_scale(self, tmp_path):
        path = tmp_path / "be.pfm"
        path.write_bytes(b"PF\n1 1\n1.0\n" + struct.pack(">3f", 0.25, 0.5, 1.0))
        np.testing.assert_array_equal(read_pfm(path).ravel(), [0.25, 0.5, 1.0])

    def test_grayscale_rejected(self, tmp_path):
        path = tmp_path / "gray.pfm"
        path.write_bytes(b"Pf\n1 1\n-1.0\n" + struct.pack("<f", 0.5))
        with pytest.raises(DataError, match="grayscale"):
            read_pfm(path)

    def test_not_pfm_rejected(self, tmp_path):
        path = tmp_path / "bogus.pfm"
        path.write_bytes(b"P6\n1 1\n255\n\x00\x00\x00")
        with pytest.raises(DataError):
            read_pfm(path)

    def test_truncated_payload_rejected(self, tmp_path):
        path = tmp_path / "short.pfm"
        path.write_bytes(b"PF\n2 2\n-1.0\n" + b"\x00" * 10)
        with pytest.raises(DataError, match="truncated"):
            read_pfm(path)

    def test_bad_shape_rejected(self, tmp_path):
        with pytest.raises(ShapeError):
            write_pfm(tmp_path / "x.pfm", np.zeros((1, 4, 4)))

    def test_hdr_values_preserved(self, tmp_path):
        img = np.array([[[1e-4]], [[1.0]], [[100.0]]])
        path = tmp_path / "hdr.pfm"
        write_pfm(path, img)
        np.testing.assert_allclose(read_pfm(path), img, rtol=1e-6)


class TestPng16:
    def test_roundtrip_on_lattice(self, tmp_path):
        rng = np.random.default_rng(1)
        img = quantize16(rng.random((3, 6, 8)))
        path = tmp_path / "img.png"
        write_png16(path, img)
        np.testing.assert_array_equal(read_png16(path), img)

    def test_quantization_error_bounded(self, tmp_path):
        rng = np.random.default_rng(2)
        img = rng.random((3, 4, 4))
        path = tmp_path / "q.png"
        write_png16(path, img)
        assert np.max(np.abs(read_png16(path) - img)) <= 0.5 / 65535

    def test_channel_order_preserved(self, tmp_path):
        img = np.zeros((3, 2, 2))
        img[0] = 1.0  # pure red
        path = tmp_path / "red.png"
        write_png16(path, img)
        back = read_png16(path)
        np.testing.assert_array_equal(back[0], np.ones((2, 2)))
        np.testing.assert_array_equal(back[1:], np.zeros((2, 2, 2)))

    def test_out_of_range_rejected(self, tmp_path):
        with pytest.raises(DataError):
            write_png16(tmp_path / "x.png", np.full((3, 2, 2), 1.5))

    def test_missing_file_rejected(self, tmp_path):
        with pytest.raises(DataError):
            read_png16(tmp_path / "missing.png")

    def test_eight_bit_rejected(self, tmp_path):
        import cv2

        path = tmp_path / "eight.png"
        cv2.imwrite(str(path), np.zeros((4, 4, 3), dtype=np.uint8))
        with pytest.raises(DataError, match="16-bit"):
            read_png16(path)


class TestManifest:
    def _manifest(self, **overrides):
        kwargs = dict(
            scene_id="s0",
            exposures=(
                ExposureEntry("a.png", 0.25),
                ExposureEntry("b.png", 1.0),
                ExposureEntry("c.png", 4.0),
            ),
            reference_index=1,
            ground_truth="gt.pfm",
        )
        kwargs.update(overrides)
        return SceneManifest(**kwargs)

    def test_roundtrip(self, tmp_path):
        m = self._manifest()
        path = tmp_path / "scene.yaml"
        write_manifest(path, m)
        assert read_manifest(path) == m

    def test_single_exposure_rejected(self):
        with pytest.raises(DataError):
            self._manifest(exposures=(ExposureEntry("a.png", 1.0),))

    def test_unsorted_times_rejected(self):
        with pytest.raises(DataError):
            self._manifest(
                exposures=(ExposureEntry("a.png", 4.0), ExposureEntry("b.png", 1.0))
            )

    def test_nonpositive_time_rejected(self):
        with pytest.raises(DataError):
            self._manifest(
                exposures=(ExposureEntry("a.png", -1.0), ExposureEntry("b.png", 1.0))
            )

    def test_reference_out_of_range_rejected(self):
        with pytest.raises(DataError):
            self._manifest(reference_index=3)

    def test_unknown_cfa_rejected(self):
        with pytest.raises(DataError):
            self._manifest(cfa_pattern="GRBG")

    def test_malformed_yaml_rejected(self, tmp_path):
        path = tmp_path / "bad.yaml"
        path.write_text("scene_id: [unclosed", encoding="utf-8")
        with pytest.raises(DataError):
            read_manifest(path)

    def test_missing_keys_rejected(self, tmp_path):
        path = tmp_path / "incomplete.yaml"
        path.write_text("scene_id: s0\n", encoding="utf-8")
        with pytest.raises(DataError):
            read_manifest(path)

    def test_dataset_file_relative_paths_and_comments(self, tmp_path):
        (tmp_path / "list.txt").write_text(
            "# comment\nsub/scene.yaml\n\nother.yaml\n", encoding="utf-8"
        )
        paths = read_dataset_file(tmp_path / "list.txt")
        assert paths == [tmp_path / "sub/scene.yaml", tmp_path / "other.yaml"]


class TestSceneLoading:
    def test_write_then_load_roundtrip(self, tmp_path):
        rng = np.random.default_rng(3)
        scene = synthesize_scene(rng, 16, 16, scene_id="rt")
        manifest_path = write_scene(scene, tmp_path / "rt")
        loaded = load_scene(read_manifest(manifest_path), manifest_path.parent)
        assert loaded.scene_id == "rt"
        assert loaded.num_exposures == 3
        assert loaded.times == [0.25, 1.0, 4.0]
        for a, b in zip(loaded.raws, scene.raws):
            np.testing.assert_array_equal(a.values, b.values)
        # GT is float32 on disk and max-normalized on load
        np.testing.assert_allclose(
            loaded.ground_truth, scene.ground_truth / scene.ground_truth.max(),
            rtol=1e-6,
        )

    def test_times_normalized_to_reference(self, tmp_path):
        rng = np.random.default_rng(4)
        scene = synthesize_scene(rng, 8, 8, times=(0.5, 2.0, 8.0))
        manifest_path = write_scene(scene, tmp_path / "tn", times=[0.5, 2.0, 8.0])
        loaded = load_scene(read_manifest(manifest_path), manifest_path.parent)
        assert loaded.times == [0.25, 1.0, 4.0]

    def test_shape_mismatch_between_exposures(self, tmp_path):
        write_png16(tmp_path / "a.png", np.zeros((3, 4, 4)))
        write_png16(tmp_path / "b.png", np.zeros((3, 6, 6)))
        m = SceneManifest(
            scene_id="mm",
            exposures=(ExposureEntry("a.png", 1.0), ExposureEntry("b.png", 2.0)),
            reference_index=0,
        )
        with pytest.raises(DataError, match="shape"):
            load_scene(m, tmp_path)


class TestPatches:
    def _scene(self, h, w, seed=5):
        return synthesize_scene(np.random.default_rng(seed), h, w)

    def test_patch_count_full_resolution_arithmetic(self):
        # 1500x1000 with 50x50 non-overlapping patches -> 30*20 = 600
        h, w, size = 1500, 1000, 50
        count = len(range(0, h - size + 1, size)) * len(range(0, w - size + 1, size))
        assert count == 600

    def test_patch_count_small(self):
        scene = self._scene(64, 96)
        pairs = extract_patches(scene, size=32, stride=32)
        assert len(pairs) == 2 * 3

    def test_residual_border_dropped(self):
        scene = self._scene(70, 70)
        pairs = extract_patches(scene, size=32, stride=32)
        assert len(pairs) == 4

    def test_patch_contents_match_source(self):
        scene = self._scene(64, 64)
        pairs = extract_patches(scene, size=32, stride=32)
        p = pairs[3]  # bottom-right patch
        np.testing.assert_array_equal(
            p.raws[0], scene.raws[0].values[:, 32:64, 32:64]
        )
        np.testing.assert_array_equal(p.target, scene.ground_truth[:, 32:64, 32:64])
        assert p.times == scene.times

    def test_odd_size_rejected(self):
        with pytest.raises(ShapeError):
            extract_patches(self._scene(64, 64), size=31, stride=32)

    def test_odd_stride_rejected(self):
        with pytest.raises(ShapeError):
            extract_patches(self._scene(64, 64), size=32, stride=31)

    def test_missing_ground_truth_rejected(self):
        scene = self._scene(64, 64)
        scene.ground_truth = None
        with pytest.raises(DataError):
            extract_patches(scene)


class TestAugment:
    def _pair(self, seed=6):
        scene = synthesize_scene(np.random.default_rng(seed), 32, 32)
        return extract_patches(scene, size=32, stride=32)[0]

    def test_raw_stays_valid_rggb(self):
        pair = self._pair()
        mask = RGGB.mask(32, 32)
        for k in range(20):
            out = augment(pair, np.random.default_rng(k))
            for raw in out.raws:
                assert np.all(raw[~mask] == 0.0), "off-pattern samples must be zero"

    def test_transform_applied_identically(self):
        # identify which of the 8 symmetries hit the target, then check the
        # RGB frames underwent the same one
        from merging_isp.dataio import _dihedral

        pair = self._pair()
        out = augment(pair, np.random.default_rng(3))
        ks = [
            k for k in range(8)
            if np.array_equal(_dihedral(pair.target, k), out.target)
        ]
        assert ks, "augmented target is not a dihedral image of the original"
        k = ks[0]
        for a, b in zip(out.rgbs, pair.rgbs):
            np.testing.assert_array_equal(a, _dihedral(b, k))

    def test_identity_transform_reachable(self):
        pair = self._pair()
        seen_identity = False
        for k in range(40):
            out = augment(pair, np.random.default_rng(k))
            if np.array_equal(out.target, pair.target):
                seen_identity = True
                break
        assert seen_identity

    def test_produces_multiple_distinct_outputs(self):
        pair = self._pair()
        digests = {
            augment(pair, np.random.default_rng(k)).target.tobytes() for k in range(32)
        }
        assert len(digests) == 8  # all dihedral symmetries occur

    def test_without_rgb_rejected(self):
        pair = self._pair()
        pair.rgbs = None
        with pytest.raises(DataError):
            augment(pair, np.random.default_rng(0))


class TestSynthesis:
    def test_deterministic_under_seed(self):
        a = synthesize_scene(np.random.default_rng(42), 16, 16)
        b = synthesize_scene(np.random.default_rng(42), 16, 16)
        np.testing.assert_array_equal(a.ground_truth, b.ground_truth)
        for ra, rb in zip(a.raws, b.raws):
            np.testing.assert_array_equal(ra.values, rb.values)

    def test_radiance_range_and_dynamic_range(self):
        rad = synthesize_radiance(np.random.default_rng(7), 64, 64)
        assert rad.max() == 1.0
        assert rad.min() > 0.0
        assert rad.min() < 1e-2  # spans several decades

    def test_long_exposure_saturates(self):
        scene = synthesize_scene(np.random.default_rng(8), 32, 32)
        long_exp = scene.ldr_rgb[2]
        assert np.any(long_exp == 1.0)

    def test_render_algebra(self):
        # unsaturated pixels follow (X*t)**(1/gamma) exactly (up to the lattice)
        rad = np.full((3, 4, 4), 0.1)
        out = render_ldr(rad, 2.0)
        expected = quantize16(np.power(0.2, 1 / 2.2) * np.ones((3, 4, 4)))
        np.testing.assert_array_equal(out, expected)

    def test_motion_moves_nonreference_exposures(self):
        rng = np.random.default_rng(9)
        motions = [Displacement(2, 2), Displacement(0, 0), Displacement(-2, 0)]
        moved = synthesize_scene(rng, 32, 32, motions=motions, scene_id="m")
        rng2 = np.random.default_rng(9)
        still = synthesize_scene(rng2, 32, 32, scene_id="s")
        np.testing.assert_array_equal(moved.ldr_rgb[1], still.ldr_rgb[1])
        assert not np.array_equal(moved.ldr_rgb[0], still.ldr_rgb[0])

    def test_odd_dimensions_rejected(self):
        with pytest.raises(ShapeError):
            synthesize_scene(np.random.default_rng(0), 15, 16)

    def test_object_motion_ghosts_between_exposures(self):
        motions = [Displacement(4, -3), Displacement(0, 0), Displacement(-5, 6)]
        scene = synthesize_scene(
            np.random.default_rng(10), 40, 40, motions=motions, motion="object"
        )
        # a pure exposure change brightens every pixel monotonically; only a
        # displaced object can make the short exposure brighter than the long
        short, long_ = scene.ldr_rgb[0], scene.ldr_rgb[2]
        assert np.any(short > long_ + 0.1)

    def test_object_motion_ground_truth_in_reference_geometry(self):
        motions = [Displacement(6, 6), Displacement(0, 0), Displacement(-6, -6)]
        scene = synthesize_scene(
            np.random.default_rng(11), 40, 40, motions=motions, motion="object"
        )
        # the reference exposure is a straight render of the ground truth
        # (object at its reference position), so GT sits in reference geometry
        np.testing.assert_array_equal(
            scene.ldr_rgb[1], render_ldr(scene.ground_truth, 1.0)
        )

    def test_unknown_motion_mode_rejected(self):
        with pytest.raises(ValueError):
            synthesize_scene(np.random.default_rng(0), 16, 16, motion="swirl")
