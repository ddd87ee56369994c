import numpy as np
import pytest

from merging_isp.cli import (
    EXIT_DATA,
    EXIT_OK,
    EXIT_USAGE,
    main,
)
from merging_isp.dataio import (
    quantize16,
    read_manifest,
    read_pfm,
    read_png16,
    write_manifest,
    write_png16,
)
from merging_isp.cfa import RGGB


TRAIN_FLAGS = [
    "--epochs", "1", "--batch-size", "2", "--patch-size", "16",
    "--stride", "16", "--n-blocks", "0", "--val-fraction", "0",
]


@pytest.fixture(scope="module")
def dataset(tmp_path_factory):
    """Two tiny synthetic scenes written through the CLI itself."""
    root = tmp_path_factory.mktemp("scenes")
    code = main(["synth", str(root), "--seed", "3", "--count", "2",
                 "--height", "16", "--width", "16"])
    assert code == EXIT_OK
    return root / "dataset.txt"


@pytest.fixture(scope="module")
def checkpoint(dataset, tmp_path_factory):
    path = tmp_path_factory.mktemp("ckpt") / "model.ckpt"
    code = main(["train", str(dataset), str(path), *TRAIN_FLAGS])
    assert code == EXIT_OK
    return path


class TestUsageErrors:
    def test_no_command(self):
        assert main([]) == EXIT_USAGE

    def test_unknown_command(self):
        assert main(["frobnicate"]) == EXIT_USAGE

    def test_unknown_flag(self):
        assert main(["synth", "/tmp/x", "--bogus-flag"]) == EXIT_USAGE

    def test_missing_argument(self):
        assert main(["mosaic", "only_one_arg"]) == EXIT_USAGE


class TestSynth:
    def test_writes_scene_tree(self, dataset):
        root = dataset.parent
        assert dataset.exists()
        manifest = read_manifest(root / "scene_000" / "scene.yaml")
        assert len(manifest.exposures) == 3
        assert (root / "scene_000" / "ground_truth.pfm").exists()

    def test_idempotent(self, tmp_path):
        for sub in ("a", "b"):
            assert main(["synth", str(tmp_path / sub), "--seed", "9",
                         "--count", "1", "--height", "16", "--width", "16"]) == EXIT_OK
        a = (tmp_path / "a" / "scene_000" / "exposure_0.png").read_bytes()
        b = (tmp_path / "b" / "scene_000" / "exposure_0.png").read_bytes()
        assert a == b


class TestMosaic:
    def test_masks_to_cfa(self, tmp_path):
        src = tmp_path / "rgb.png"
        dst = tmp_path / "raw.png"
        rng = np.random.default_rng(0)
        img = quantize16(rng.random((3, 8, 8)))
        write_png16(src, img)
        assert main(["mosaic", str(src), str(dst)]) == EXIT_OK
        raw = read_png16(dst)
        mask = RGGB.mask(8, 8)
        assert np.all(raw[~mask] == 0.0)
        np.testing.assert_array_equal(raw[mask], img[mask])

    def test_missing_input_is_data_error(self, tmp_path):
        assert main(["mosaic", str(tmp_path / "no.png"), str(tmp_path / "o.png")]) == EXIT_DATA


class TestTrain:
    def test_writes_checkpoint_and_loss_log(self, dataset, tmp_path):
        ckpt = tmp_path / "m.ckpt"
        log = tmp_path / "loss.log"
        code = main(["train", str(dataset), str(ckpt),
                     "--loss-log", str(log), *TRAIN_FLAGS])
        assert code == EXIT_OK
        assert ckpt.exists()
        assert len(log.read_text().splitlines()) == 1

    def test_idempotent_byte_identical(self, dataset, tmp_path):
        outs = []
        for name in ("1.ckpt", "2.ckpt"):
            path = tmp_path / name
            assert main(["train", str(dataset), str(path), *TRAIN_FLAGS]) == EXIT_OK
            outs.append(path.read_bytes())
        assert outs[0] == outs[1]

    def test_config_file_equivalent_to_flags(self, dataset, tmp_path):
        cfg = tmp_path / "cfg.yaml"
        cfg.write_text(
            "epochs: 1\nbatch_size: 2\npatch_size: 16\nstride: 16\n"
            "n_blocks: 0\nval_fraction: 0\n",
            encoding="utf-8",
        )
        by_cfg = tmp_path / "cfg.ckpt"
        by_flags = tmp_path / "flags.ckpt"
        assert main(["train", str(dataset), str(by_cfg), "--config", str(cfg)]) == EXIT_OK
        assert main(["train", str(dataset), str(by_flags), *TRAIN_FLAGS]) == EXIT_OK
        assert by_cfg.read_bytes() == by_flags.read_bytes()

    def test_unknown_config_key_is_data_error(self, dataset, tmp_path):
        cfg = tmp_path / "bad.yaml"
        cfg.write_text("learning_rate: 0.1\n", encoding="utf-8")
        assert main(["train", str(dataset), str(tmp_path / "x.ckpt"),
                     "--config", str(cfg)]) == EXIT_DATA

    def test_resume_continues(self, dataset, checkpoint, tmp_path):
        out = tmp_path / "resumed.ckpt"
        code = main(["train", str(dataset), str(out), "--resume", str(checkpoint),
                     *TRAIN_FLAGS[:1], "2", *TRAIN_FLAGS[2:]])
        assert code == EXIT_OK
        assert out.exists()

    def test_missing_dataset_is_data_error(self, tmp_path):
        assert main(["train", str(tmp_path / "no.txt"), str(tmp_path / "x.ckpt"),
                     *TRAIN_FLAGS]) == EXIT_DATA


class TestInfer:
    def test_output_dims_match_input(self, dataset, checkpoint, tmp_path):
        manifest = dataset.parent / "scene_000" / "scene.yaml"
        out = tmp_path / "hdr.pfm"
        preview = tmp_path / "preview.png"
        code = main(["infer", str(checkpoint), str(manifest), str(out),
                     "--preview", str(preview)])
        assert code == EXIT_OK
        hdr = read_pfm(out)
        assert hdr.shape == (3, 16, 16)
        pv = read_png16(preview)
        assert pv.shape == (3, 16, 16)
        assert pv.min() >= 0.0 and pv.max() <= 1.0

    def test_corrupt_checkpoint_is_data_error(self, dataset, tmp_path):
        bad = tmp_path / "bad.ckpt"
        bad.write_bytes(b"not a checkpoint")
        manifest = dataset.parent / "scene_000" / "scene.yaml"
        assert main(["infer", str(bad), str(manifest), str(tmp_path / "o.pfm")]) == EXIT_DATA


class TestEval:
    def test_writes_csv(self, dataset, checkpoint, tmp_path):
        out = tmp_path / "metrics.csv"
        assert main(["eval", str(checkpoint), str(dataset), str(out)]) == EXIT_OK
        lines = out.read_text().strip().splitlines()
        assert lines[0] == "scene_id,psnr_db,ssim"
        assert len(lines) == 4  # 2 scenes + header + mean

    def test_dataset_without_ground_truth_gives_empty_table(
        self, dataset, checkpoint, tmp_path
    ):
        # strip the ground-truth reference from a copy of one manifest
        src = read_manifest(dataset.parent / "scene_000" / "scene.yaml")
        scene_dir = dataset.parent / "scene_000"
        stripped_dir = tmp_path / "nogt"
        stripped_dir.mkdir()
        for entry in src.exposures:
            (stripped_dir / entry.path).write_bytes((scene_dir / entry.path).read_bytes())
        stripped = type(src)(
            scene_id=src.scene_id,
            exposures=src.exposures,
            reference_index=src.reference_index,
            ground_truth=None,
        )
        write_manifest(stripped_dir / "scene.yaml", stripped)
        (tmp_path / "list.txt").write_text("nogt/scene.yaml\n", encoding="utf-8")
        out = tmp_path / "metrics.csv"
        with pytest.warns(UserWarning, match="no ground truth"):
            code = main(["eval", str(checkpoint), str(tmp_path / "list.txt"), str(out)])
        assert code == EXIT_OK
        lines = out.read_text().strip().splitlines()
        assert len(lines) == 2  # header + (empty) mean row only


class TestAblate:
    def test_proposed_variant_runs(self, dataset, tmp_path):
        out = tmp_path / "ablation.csv"
        code = main(["ablate", "proposed", str(dataset), str(out),
                     "--levels", "2", "--radius", "2", *TRAIN_FLAGS])
        assert code == EXIT_OK
        assert out.read_text().startswith("scene_id,")

    def test_unknown_variant_is_usage_error(self, dataset, tmp_path):
        assert main(["ablate", "bogus", str(dataset), str(tmp_path / "o.csv")]) == EXIT_USAGE


def test_gradcheck_exits_zero():
    assert main(["gradcheck", "--seed", "0"]) == EXIT_OK
