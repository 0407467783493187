import json

import numpy as np
import pytest

from inkgarden.cli import main
from inkgarden.imageio import save_image

TINY_MODEL = {
    "image_size": 16,
    "downsample_factor": 2,
    "latent_channels": 2,
    "vae_base": 8,
    "unet_base": 8,
    "channel_mults": [1, 2],
    "blocks_per_stage": 1,
    "d_text": 8,
    "text_length": 8,
    "text_blocks": 1,
    "timesteps": 20,
}


@pytest.fixture(scope="module")
def workspace(tmp_path_factory):
    """Prepared data + tiny vae/diffusion checkpoints, shared by the CLI tests."""
    root = tmp_path_factory.mktemp("cli")
    w = ["--workdir", str(root)]
    assert main(w + ["prepare-data", "--root", "data", "--synth", "10", "--style-count", "4",
                     "--eval-count", "10", "--seed", "3", "--side", "16"]) == 0
    cfg = dict(TINY_MODEL)
    cfg.update({"total_steps": 4, "batch_size": 4, "checkpoint_every": 2, "seed": 5})
    (root / "train.json").write_text(json.dumps(cfg))
    assert main(w + ["train", "--stage", "vae", "--config", "train.json", "--data", "data/train",
                     "--out", "runs/vae"]) == 0
    assert main(w + ["train", "--stage", "diffusion", "--config", "train.json", "--data", "data/train",
                     "--vae-ckpt", "runs/vae/final.ckpt", "--out", "runs/diff",
                     "--preview-prompt", "a pavilion on the left."]) == 0
    return root


class TestPrepareData:
    def test_layout(self, workspace):
        root = workspace
        for sub in ("train", "style", "eval"):
            assert (root / "data" / sub / "metadata.jsonl").exists()
            assert (root / "data" / sub / "curation.jsonl").exists()
            assert (root / "data" / sub / "images").is_dir()
        assert (root / "data" / "vocab.txt").exists()
        assert (root / "data" / "eval" / "split.json").exists()
        assert (root / "data" / "run_manifest.json").exists()

    def test_manifest_contains_resolved_config(self, workspace):
        manifest = json.loads((workspace / "data" / "run_manifest.json").read_text())
        assert manifest["command"] == "prepare-data"
        assert manifest["config"]["synth"] == 10
        assert manifest["seed"] == 3
        assert manifest["tool_version"]

    def test_ingest_applies_filters(self, tmp_path):
        src = tmp_path / "raw"
        (src / "images").mkdir(parents=True)
        rng = np.random.default_rng(0)
        # big enough (3000x2000) vs too small (100x100)
        from PIL import Image

        Image.fromarray(rng.integers(0, 255, (2000, 3000, 3), dtype=np.uint8)).save(src / "images" / "big.png")
        Image.fromarray(rng.integers(0, 255, (100, 100, 3), dtype=np.uint8)).save(src / "images" / "small.png")
        (src / "metadata.jsonl").write_text(
            '{"file_name": "big.png", "additional_feature": "a pavilion"}\n'
            '{"file_name": "small.png", "additional_feature": "a pond"}\n'
        )
        (src / "curation.jsonl").write_text(
            '{"file_name": "big.png", "has_architecture": true}\n'
            '{"file_name": "small.png", "has_architecture": true}\n'
        )
        assert main(["--workdir", str(tmp_path), "prepare-data", "--root", "out", "--ingest", "raw",
                     "--side", "16"]) == 0
        lines = (tmp_path / "out" / "train" / "metadata.jsonl").read_text().splitlines()
        assert len(lines) == 1 and "big.png" in lines[0]
        from inkgarden.imageio import image_size

        assert image_size(tmp_path / "out" / "train" / "images" / "big.png") == (16, 16)


class TestTrainCommand:
    def test_lora_without_base_ckpt_is_usage_error(self, workspace, capsys):
        rc = main(["--workdir", str(workspace), "train", "--stage", "lora", "--config", "train.json",
                   "--data", "data/style", "--out", "runs/lora"])
        assert rc == 1
        assert "--base-ckpt" in capsys.readouterr().err

    def test_diffusion_without_vae_ckpt_is_usage_error(self, workspace, capsys):
        rc = main(["--workdir", str(workspace), "train", "--stage", "diffusion", "--config", "train.json",
                   "--data", "data/train", "--out", "runs/d2"])
        assert rc == 1
        assert "--vae-ckpt" in capsys.readouterr().err

    def test_unknown_config_key_is_usage_error(self, workspace, tmp_path):
        bad = dict(TINY_MODEL, total_steps=2, bogus_knob=1)
        (workspace / "bad.json").write_text(json.dumps(bad))
        rc = main(["--workdir", str(workspace), "train", "--stage", "vae", "--config", "bad.json",
                   "--data", "data/train", "--out", "runs/bad"])
        assert rc == 1

    def test_missing_total_steps_is_usage_error(self, workspace):
        (workspace / "empty.json").write_text(json.dumps(TINY_MODEL))
        rc = main(["--workdir", str(workspace), "train", "--stage", "vae", "--config", "empty.json",
                   "--data", "data/train", "--out", "runs/bad2"])
        assert rc == 1

    def test_manifest_written_before_outputs(self, workspace):
        manifest = json.loads((workspace / "runs" / "vae" / "run_manifest.json").read_text())
        assert manifest["command"] == "train"
        assert manifest["config"]["train"]["total_steps"] == 4
        assert manifest["config"]["model"]["image_size"] == 16
        assert manifest["input_hashes"]


class TestSampleCommand:
    def test_deterministic_bytes(self, workspace):
        w = ["--workdir", str(workspace)]
        args = ["sample", "--ckpt", "runs/diff/final.ckpt", "--prompt", "a pond on the right.",
                "--steps", "4", "--seed", "9", "--out"]
        assert main(w + args + ["out/a.png"]) == 0
        assert main(w + args + ["out/b.png"]) == 0
        assert (workspace / "out" / "a.png").read_bytes() == (workspace / "out" / "b.png").read_bytes()

    def test_missing_checkpoint_is_runtime_error(self, workspace):
        rc = main(["--workdir", str(workspace), "sample", "--ckpt", "nope.ckpt", "--prompt", "x",
                   "--seed", "1", "--out", "out/x.png"])
        assert rc == 2

    def test_bad_flag_is_usage_error(self, workspace):
        rc = main(["--workdir", str(workspace), "sample", "--nonsense"])
        assert rc == 1

    def test_rerun_reproduces_bytes(self, workspace):
        w = ["--workdir", str(workspace)]
        before = (workspace / "out" / "a.png").read_bytes()
        assert main(w + ["rerun", "out/a.png.manifest.json"]) == 0
        assert (workspace / "out" / "a.png").read_bytes() == before

    def test_inputs_never_mutated(self, workspace):
        ckpt = workspace / "runs" / "diff" / "final.ckpt"
        before = ckpt.read_bytes()
        assert main(["--workdir", str(workspace), "sample", "--ckpt", "runs/diff/final.ckpt",
                     "--prompt", "a rock.", "--steps", "4", "--seed", "3",
                     "--out", "out/mut.png"]) == 0
        assert ckpt.read_bytes() == before


class TestInpaintCommand:
    def test_inpaint_respects_mask(self, workspace):
        w = ["--workdir", str(workspace)]
        mask = np.full((3, 16, 16), -1.0, dtype=np.float32)
        mask[:, :, 8:] = 1.0
        save_image(mask, workspace / "mask.png")
        rc = main(w + ["inpaint", "--ckpt", "runs/diff/final.ckpt",
                       "--image", "data/train/images/scene_00000.png", "--mask", "mask.png",
                       "--prompt", "a pine on the right.", "--steps", "4", "--seed", "2",
                       "--out", "out/inp.png"])
        assert rc == 0
        from inkgarden.imageio import load_image

        src = load_image(workspace / "data/train/images/scene_00000.png")
        out = load_image(workspace / "out" / "inp.png")
        np.testing.assert_array_equal(out[:, :, :8], src[:, :, :8])


class TestEvaluateCommand:
    def test_report_written(self, workspace):
        w = ["--workdir", str(workspace)]
        assert main(w + ["train-evaluator", "--data", "data/eval", "--vocab", "data/vocab.txt",
                         "--out", "runs/encoder.ckpt", "--steps", "6", "--seed", "4"]) == 0
        (workspace / "prompts.txt").write_text("a pond on the right.\n")
        (workspace / "gen").mkdir(exist_ok=True)
        import shutil

        shutil.copy(workspace / "out" / "a.png", workspace / "gen" / "a.png")
        assert main(w + ["evaluate", "--encoder", "runs/encoder.ckpt", "--images", "gen",
                         "--prompts", "prompts.txt", "--out", "out/report.json"]) == 0
        report = json.loads((workspace / "out" / "report.json").read_text())
        assert len(report["records"]) == 1
        assert "aggregate" in report


class TestPanoramaCommand:
    def test_bundle_output(self, workspace):
        w = ["--workdir", str(workspace)]
        scenes = [f"data/train/images/scene_{i:05d}.png" for i in range(3)]
        (workspace / "seams.txt").write_text("a path.\na stream.\n")
        rc = main(w + ["panorama", "--ckpt", "runs/diff/final.ckpt", "--scenes", *scenes,
                       "--seam-prompts", "seams.txt", "--steps", "4", "--seed", "6",
                       "--height", "64", "--out", "out/pano"])
        assert rc == 0
        meta = json.loads((workspace / "out" / "pano" / "panorama.json").read_text())
        assert meta["width"] == 2 * meta["height"] == 128
        assert len(meta["scenes"]) == 3 and len(meta["seams"]) == 2
        from inkgarden.imageio import load_image

        pano = load_image(workspace / "out" / "pano" / "panorama.png")
        assert np.abs(pano[:, :, 0] - pano[:, :, -1]).max() <= 1 / 255 + 1e-6
