"""End-to-end CLI smoke tests on tiny configurations."""

import os

import numpy as np
import pytest

from xfield import data
from xfield.cli import main


class TestPipeline:
    def test_synth_train_eval_render_effect(self, tmp_path):
        dataset = tmp_path / "ds"
        model = tmp_path / "model.xf"
        report = tmp_path / "report"
        frame = tmp_path / "frame.png"
        blur = tmp_path / "blur.png"

        assert main(["synth", "translate1d", "--out", str(dataset), "--size", "16",
                     "--frames", "3", "--shift", "3", "--seed", "1"]) == 0
        assert main(["train", str(dataset / "manifest.json"), "--out", str(model),
                     "--steps", "8", "--lr", "0.001", "--seed", "2",
                     "--protocol", "middle_frame"]) == 0
        assert os.path.exists(model) and os.path.exists(str(model) + ".loss.csv")
        assert main(["eval", str(model), str(dataset / "manifest.json"),
                     "--protocol", "middle_frame", "--out", str(report), "--sweep", "5"]) == 0
        for name in ("report.json", "report.csv", "metrics.png", "epipolar.png", "loss.png"):
            assert os.path.exists(report / name), name
        assert main(["render", str(model), "--coord", "0.5", "--out", str(frame)]) == 0
        img = data.load_image(frame)
        assert img.shape == (16, 16, 3)
        assert main(["effect", str(model), "--coord", "0.5", "--axis", "0",
                     "--radius", "0.2", "--n", "2", "--out", str(blur)]) == 0
        assert data.load_image(blur).shape == (16, 16, 3)

    def test_render_wrong_arity_fails_nonzero(self, tmp_path, capsys):
        dataset = tmp_path / "ds"
        model = tmp_path / "model.xf"
        main(["synth", "translate1d", "--out", str(dataset), "--size", "16",
              "--frames", "2", "--shift", "2", "--seed", "0"])
        main(["train", str(dataset / "manifest.json"), "--out", str(model),
              "--steps", "2", "--lr", "0.001"])
        code = main(["render", str(model), "--coord", "0.5,0.5", "--out", str(tmp_path / "x.png")])
        assert code != 0
        assert "error" in capsys.readouterr().err

    def test_missing_manifest_fails_nonzero(self, tmp_path, capsys):
        code = main(["train", str(tmp_path / "absent.json"), "--out", str(tmp_path / "m.xf"),
                     "--steps", "1"])
        assert code != 0

    def test_seeded_training_reproducible_model_files(self, tmp_path):
        dataset = tmp_path / "ds"
        main(["synth", "translate1d", "--out", str(dataset), "--size", "16",
              "--frames", "3", "--shift", "3", "--seed", "4"])
        m1, m2 = tmp_path / "m1.xf", tmp_path / "m2.xf"
        args = [str(dataset / "manifest.json"), "--steps", "6", "--lr", "0.002", "--seed", "7"]
        assert main(["train"] + args + ["--out", str(m1)]) == 0
        assert main(["train"] + args + ["--out", str(m2)]) == 0
        b1, b2 = m1.read_bytes(), m2.read_bytes()
        assert b1 == b2
        assert (tmp_path / "m1.xf.loss.csv").read_bytes() == (tmp_path / "m2.xf.loss.csv").read_bytes()

    def test_checkpoint_resume_matches_uninterrupted(self, tmp_path):
        dataset = tmp_path / "ds"
        main(["synth", "translate1d", "--out", str(dataset), "--size", "16",
              "--frames", "3", "--shift", "3", "--seed", "5"])
        manifest = str(dataset / "manifest.json")

        full = tmp_path / "full.xf"
        assert main(["train", manifest, "--out", str(full), "--steps", "8",
                     "--lr", "0.002", "--seed", "9"]) == 0

        part = tmp_path / "part.xf"
        assert main(["train", manifest, "--out", str(part), "--steps", "8",
                     "--lr", "0.002", "--seed", "9", "--checkpoint-interval", "4"]) == 0
        ckpt = str(part) + ".step000004.ckpt"
        assert os.path.exists(ckpt)

        resumed = tmp_path / "resumed.xf"
        assert main(["train", manifest, "--out", str(resumed), "--steps", "8",
                     "--lr", "0.002", "--seed", "9", "--resume", ckpt]) == 0

        from xfield.modelio import read_container
        _, full_tensors = read_container(full)
        _, resumed_tensors = read_container(resumed)
        for name in full_tensors:
            np.testing.assert_array_equal(full_tensors[name], resumed_tensors[name], err_msg=name)
