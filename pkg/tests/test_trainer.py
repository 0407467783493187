import numpy as np
import pytest

from inkgarden.checkpoint import load_checkpoint, save_checkpoint
from inkgarden.errors import (
    CheckpointCorruptError,
    CheckpointVersionError,
    ConfigurationError,
)
from inkgarden.text import Vocabulary
from inkgarden.toydata import synth_toy_dataset
from inkgarden.trainer import (
    ModelSpec,
    TrainConfig,
    TrainData,
    TrainerSession,
    batch_indices,
    load_pipeline,
    train,
)

TINY = ModelSpec(
    image_size=16,
    downsample_factor=2,
    latent_channels=2,
    vae_base=8,
    unet_base=8,
    channel_mults=(1, 2),
    blocks_per_stage=1,
    d_text=8,
    text_length=8,
    text_blocks=1,
    timesteps=20,
)


@pytest.fixture(scope="module")
def toy():
    records, images, _ = synth_toy_dataset(12, seed=31, side=16)
    data = TrainData(images=np.stack(images), captions=[r.caption for r in records])
    vocab = Vocabulary.build(data.captions)
    return data, vocab


def vae_config(**kw):
    defaults = dict(stage="vae", total_steps=10, checkpoint_every=5, batch_size=4, seed=2, model=TINY)
    defaults.update(kw)
    return TrainConfig(**defaults)


class TestCheckpointFile:
    def test_roundtrip_byte_identical(self, tmp_path):
        rng = np.random.default_rng(0)
        arrays = {"b.x": rng.standard_normal((3, 4)).astype(np.float32), "a.y": rng.standard_normal(7).astype(np.float32)}
        header = {"stage": "vae", "step": 3, "seed": 1}
        p1, p2 = tmp_path / "one.ckpt", tmp_path / "two.ckpt"
        save_checkpoint(p1, header, arrays)
        loaded_header, loaded = load_checkpoint(p1)
        assert loaded_header["stage"] == "vae" and loaded_header["step"] == 3
        for k in arrays:
            np.testing.assert_array_equal(loaded[k], arrays[k])
        save_checkpoint(p2, {k: loaded_header[k] for k in header}, loaded)
        assert p1.read_bytes() == p2.read_bytes()

    def test_flipped_magic_rejected(self, tmp_path):
        p = tmp_path / "x.ckpt"
        save_checkpoint(p, {"stage": "vae"}, {"w": np.zeros(2, dtype=np.float32)})
        raw = bytearray(p.read_bytes())
        raw[0] ^= 0xFF
        p.write_bytes(bytes(raw))
        with pytest.raises(CheckpointCorruptError):
            load_checkpoint(p)

    def test_truncated_file_reports_offset(self, tmp_path):
        p = tmp_path / "x.ckpt"
        save_checkpoint(p, {"stage": "vae"}, {"w": np.arange(64, dtype=np.float32)})
        raw = p.read_bytes()
        p.write_bytes(raw[: len(raw) - 32])
        with pytest.raises(CheckpointCorruptError) as exc:
            load_checkpoint(p)
        assert exc.value.offset is not None

    def test_wrong_version_rejected(self, tmp_path):
        p = tmp_path / "x.ckpt"
        save_checkpoint(p, {"stage": "vae"}, {})
        raw = bytearray(p.read_bytes())
        raw[4] = 99
        p.write_bytes(bytes(raw))
        with pytest.raises(CheckpointVersionError):
            load_checkpoint(p)


class TestBatchIndices:
    def test_epoch_shuffles_cover_dataset(self):
        n, batch = 12, 4
        seen = []
        for step in range(3):  # one epoch = 3 batches
            seen.extend(batch_indices(7, step, batch, n))
        assert sorted(seen) == list(range(n))

    def test_deterministic_per_step(self):
        a = batch_indices(7, 5, 4, 12)
        b = batch_indices(7, 5, 4, 12)
        np.testing.assert_array_equal(a, b)


class TestTrainLoop:
    def test_config_invariants(self):
        with pytest.raises(ConfigurationError):
            vae_config(checkpoint_every=11)
        with pytest.raises(ConfigurationError):
            vae_config(preview_count=0)
        with pytest.raises(ConfigurationError):
            vae_config(stage="bogus")

    def test_checkpoint_cadence_and_previews(self, toy, tmp_path):
        data, _ = toy
        session = TrainerSession(vae_config(), data).init_vae_stage()
        train(session, tmp_path / "run")
        names = sorted(p.name for p in (tmp_path / "run").iterdir())
        assert "ckpt_step5.ckpt" in names and "ckpt_step10.ckpt" in names
        assert "preview_step5.png" in names and "preview_step10.png" in names
        assert "final.ckpt" in names
        assert sum(1 for n in names if n.startswith("ckpt_step")) == 10 // 5

    def test_loss_log_rows_and_header(self, toy, tmp_path):
        data, _ = toy
        session = TrainerSession(vae_config(), data).init_vae_stage()
        _, losses = train(session, tmp_path / "run")
        lines = (tmp_path / "run" / "loss.csv").read_text().splitlines()
        assert lines[0] == "step,loss,wall_ms"
        assert len(lines) == 1 + 10
        steps = [int(line.split(",")[0]) for line in lines[1:]]
        assert steps == list(range(1, 11))
        assert len(losses) == 10

    def test_identical_seeds_byte_identical_outputs(self, toy, tmp_path):
        data, _ = toy
        files = ["final.ckpt", "loss.csv", "ckpt_step5.ckpt", "preview_step10.png"]
        for d in ("a", "b"):
            session = TrainerSession(vae_config(), data).init_vae_stage()
            train(session, tmp_path / d)
        for f in files:
            assert (tmp_path / "a" / f).read_bytes() == (tmp_path / "b" / f).read_bytes(), f

    def test_split_run_resume_equals_uninterrupted(self, toy, tmp_path):
        data, _ = toy
        full = TrainerSession(vae_config(total_steps=10), data).init_vae_stage()
        train(full, tmp_path / "full")

        first = TrainerSession(vae_config(total_steps=10), data).init_vae_stage()
        stop_ckpt, _ = train(first, tmp_path / "split", stop_at_step=5)
        second = TrainerSession(vae_config(total_steps=10), data).init_vae_stage()
        train(second, tmp_path / "split", resume_from=stop_ckpt)

        a = (tmp_path / "full" / "final.ckpt").read_bytes()
        b = (tmp_path / "split" / "final.ckpt").read_bytes()
        assert a == b
        assert (tmp_path / "full" / "loss.csv").read_bytes() == (tmp_path / "split" / "loss.csv").read_bytes()

    def test_vae_stage_sets_latent_scale(self, toy, tmp_path):
        data, _ = toy
        session = TrainerSession(vae_config(), data).init_vae_stage()
        final, _ = train(session, tmp_path / "run")
        header, _ = load_checkpoint(final)
        assert header["latent_scale"] != 1.0
        assert np.isfinite(header["latent_scale"])

    def test_nan_loss_writes_crash_checkpoint(self, toy, tmp_path):
        from inkgarden.errors import NonFiniteError

        data, _ = toy
        session = TrainerSession(vae_config(), data).init_vae_stage()
        # poison one weight so the first loss goes non-finite
        session.vae.parameters()[0].value.data[...] = np.nan
        with pytest.raises(NonFiniteError):
            train(session, tmp_path / "run")
        crashes = list((tmp_path / "run").glob("crash_step*.ckpt"))
        assert len(crashes) == 1
        assert not (tmp_path / "run" / "final.ckpt").exists()


@pytest.fixture(scope="module")
def staged(toy, tmp_path_factory):
    data, vocab = toy
    root = tmp_path_factory.mktemp("stages")
    vae_sess = TrainerSession(vae_config(), data).init_vae_stage()
    vae_ckpt, _ = train(vae_sess, root / "vae")
    dcfg = TrainConfig(
        stage="diffusion", total_steps=6, checkpoint_every=3, batch_size=4, seed=2,
        preview_prompt="a pavilion on the left.", preview_steps=4, model=TINY,
    )
    d_sess = TrainerSession(dcfg, data, vocab).init_diffusion_stage(vae_ckpt)
    d_ckpt, d_losses = train(d_sess, root / "diff")
    return root, data, vocab, vae_ckpt, d_ckpt, d_losses


class TestStageWiring:
    def test_diffusion_freezes_vae(self, staged):
        root, data, vocab, vae_ckpt, d_ckpt, _ = staged
        before, _ = load_checkpoint(vae_ckpt)
        after_header, after_arrays = load_checkpoint(d_ckpt)
        _, vae_arrays = load_checkpoint(vae_ckpt)
        for name, arr in vae_arrays.items():
            if name.startswith("vae."):
                np.testing.assert_array_equal(arr, after_arrays[name])
        assert after_header["latent_scale"] == before["latent_scale"]

    def test_lora_stage_freeze_and_adapters(self, staged, toy, tmp_path):
        root, data, vocab, _, d_ckpt, _ = staged
        lcfg = TrainConfig(
            stage="lora", total_steps=6, checkpoint_every=3, batch_size=4, seed=2,
            lr=1e-2, lora_rank=4, preview_prompt="a pond.", preview_steps=4, model=TINY,
        )
        l_sess = TrainerSession(lcfg, data, vocab).init_lora_stage(d_ckpt)
        l_ckpt, _ = train(l_sess, tmp_path / "lora")
        _, d_arrays = load_checkpoint(d_ckpt)
        l_header, l_arrays = load_checkpoint(l_ckpt)
        changed = []
        for name, arr in d_arrays.items():
            if name.startswith("adam."):
                continue
            np.testing.assert_array_equal(arr, l_arrays[name], err_msg=name)
        adapters = [n for n in l_arrays if n.endswith(".lora_A") or n.endswith(".lora_B")]
        assert adapters
        assert l_header["lora"]["rank"] == 4
        assert (tmp_path / "lora" / "adapters.lora").exists()

    def test_pipeline_reload_samples(self, staged):
        root, data, vocab, _, d_ckpt, _ = staged
        pipe, header = load_pipeline(d_ckpt)
        img = pipe.sample("a pavilion on the left.", steps=4, seed=1)
        assert img.shape == (3, 16, 16)
        img2 = pipe.sample("a pavilion on the left.", steps=4, seed=1)
        assert img.tobytes() == img2.tobytes()

    def test_frozen_checksums_constant_across_lora_checkpoints(self, staged, toy, tmp_path):
        root, data, vocab, _, d_ckpt, _ = staged
        lcfg = TrainConfig(
            stage="lora", total_steps=6, checkpoint_every=3, batch_size=4, seed=3,
            lr=1e-2, preview_prompt="a pond.", preview_steps=4, model=TINY,
        )
        l_sess = TrainerSession(lcfg, data, vocab).init_lora_stage(d_ckpt)
        train(l_sess, tmp_path / "l2")
        import hashlib

        def frozen_digest(path):
            _, arrays = load_checkpoint(path)
            h = hashlib.sha256()
            for name in sorted(arrays):
                if name.startswith("adam.") or name.endswith(".lora_A") or name.endswith(".lora_B"):
                    continue
                h.update(arrays[name].tobytes())
            return h.hexdigest()

        assert frozen_digest(tmp_path / "l2" / "ckpt_step3.ckpt") == frozen_digest(
            tmp_path / "l2" / "ckpt_step6.ckpt"
        )
