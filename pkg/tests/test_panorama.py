import json

import numpy as np
import pytest

from inkgarden.errors import ConfigurationError
from inkgarden.imageio import load_image, to_u8
from inkgarden.panorama import (
    SceneSequence,
    build_bundle,
    scene_anchor_x,
    seam_center_x,
    stitch,
    strip_width,
    to_equirectangular,
)
from inkgarden.toydata import ScenePlan, render_scene


def toy_scenes(n, side=32):
    plans = [
        ScenePlan(elements=(("pavilion", "left", 1.0),)),
        ScenePlan(elements=(("pond", "right", 1.0),)),
        ScenePlan(elements=(("pine", "left", 1.0), ("moon", "right", 1.0))),
        ScenePlan(elements=(("bridge", "right", 1.0),)),
    ]
    return [render_scene(p, side) for p in plans[:n]]


def fake_inpaint(task, seed):
    """Deterministic stand-in for diffusion inpainting: fills mask=1 pixels
    with the row-wise mean of the kept pixels."""
    out = task.source.copy()
    keep = task.mask == 0
    fill = task.source[:, keep].mean(axis=1, keepdims=True)
    out[:, task.mask == 1] = np.broadcast_to(fill, out[:, task.mask == 1].shape)
    return out


class TestStitch:
    def test_strip_width_formula(self):
        scenes = toy_scenes(2)
        seq = SceneSequence(images=scenes, seam_prompts=["x"], gap_width=16)
        strip = stitch(seq, fake_inpaint, seed=0, latent_factor=4)
        assert strip.shape == (3, 32, 2 * 32 + 16)
        assert strip_width(2, 32, 16) == 80

    def test_pixels_outside_masks_bit_identical(self):
        scenes = toy_scenes(4)
        seq = SceneSequence(images=scenes, seam_prompts=["a", "b", "c"], gap_width=8)
        strip = stitch(seq, fake_inpaint, seed=3, latent_factor=4)
        side, gap = 32, 8
        margin = min(side // 8, gap // 2)
        for i, img in enumerate(scenes):
            x = i * (side + gap)
            # each neighbouring gap mask eats `margin` pixels into the scene
            lo = margin if i > 0 else 0
            hi = side - (margin if i < len(scenes) - 1 else 0)
            np.testing.assert_array_equal(strip[:, :, x + lo : x + hi], img[:, :, lo:hi])

    def test_gap_below_latent_factor_rejected(self):
        scenes = toy_scenes(2)
        seq = SceneSequence(images=scenes, seam_prompts=["x"], gap_width=2)
        with pytest.raises(ConfigurationError):
            stitch(seq, fake_inpaint, seed=0, latent_factor=4)

    def test_sequence_validation(self):
        scenes = toy_scenes(2)
        with pytest.raises(ConfigurationError):
            SceneSequence(images=scenes[:1], seam_prompts=[])
        with pytest.raises(ConfigurationError):
            SceneSequence(images=scenes, seam_prompts=["a", "b"])

    def test_deterministic(self):
        scenes = toy_scenes(3)
        seq = SceneSequence(images=scenes, seam_prompts=["a", "b"], gap_width=16)
        s1 = stitch(seq, fake_inpaint, seed=5, latent_factor=4)
        s2 = stitch(seq, fake_inpaint, seed=5, latent_factor=4)
        assert s1.tobytes() == s2.tobytes()

    def test_default_gap_is_half_side(self):
        seq = SceneSequence(images=toy_scenes(2), seam_prompts=["x"])
        assert seq.gap_width == 16

    def test_seam_band_smoother_than_raw_abutment(self):
        scenes = toy_scenes(2)
        seq = SceneSequence(images=scenes, seam_prompts=["x"], gap_width=16)
        strip = stitch(seq, fake_inpaint, seed=0, latent_factor=4)
        seam_lo, seam_hi = 32 - 4, 48 + 4
        seam_grad = np.abs(np.diff(strip[:, :, seam_lo:seam_hi], axis=2)).mean()
        naive = np.concatenate(scenes, axis=2)
        naive_grad = np.abs(np.diff(naive[:, :, 28:36], axis=2)).mean()
        assert seam_grad <= naive_grad


class TestEquirectangular:
    def test_two_to_one_aspect(self):
        strip = np.random.default_rng(0).uniform(-1, 1, (3, 32, 200)).astype(np.float32)
        pano = to_equirectangular(strip, 256)
        assert pano.pixels.shape == (3, 256, 512)
        assert pano.width == 2 * pano.height

    def test_odd_height_rejected(self):
        strip = np.zeros((3, 32, 100), dtype=np.float32)
        with pytest.raises(ConfigurationError):
            to_equirectangular(strip, 255)

    def test_constant_strip_fills_band_only(self):
        strip = np.full((3, 32, 100), 0.5, dtype=np.float32)
        pano = to_equirectangular(strip, 64, band_fraction=0.5)
        band = pano.pixels[:, 16:48, :]
        np.testing.assert_allclose(band, 0.5, atol=1e-6)
        # fill tones appear only outside the band
        assert not np.allclose(pano.pixels[:, 0, :], 0.5)
        assert not np.allclose(pano.pixels[:, -1, :], 0.5)

    def test_wrap_continuity_within_one_count(self):
        strip = np.random.default_rng(1).uniform(-1, 1, (3, 32, 300)).astype(np.float32)
        pano = to_equirectangular(strip, 128)
        assert pano.wrap_error() <= 1 / 255
        u8 = to_u8(pano.pixels)
        assert np.abs(u8[:, 0, :].astype(int) - u8[:, -1, :].astype(int)).max() <= 1

    def test_deterministic(self):
        strip = np.random.default_rng(2).uniform(-1, 1, (3, 32, 160)).astype(np.float32)
        a = to_equirectangular(strip, 64).pixels
        b = to_equirectangular(strip, 64).pixels
        assert a.tobytes() == b.tobytes()


class TestBundle:
    def test_bundle_files_and_metadata(self, tmp_path):
        scenes = toy_scenes(4)
        seq = SceneSequence(images=scenes, seam_prompts=["a", "b", "c"], gap_width=16)
        strip = stitch(seq, fake_inpaint, seed=9, latent_factor=4)
        pano = to_equirectangular(strip, 64)
        meta = build_bundle(tmp_path, seq, strip, pano, seed=9)
        assert (tmp_path / "panorama.png").exists()
        loaded = json.loads((tmp_path / "panorama.json").read_text())
        assert loaded == meta
        assert loaded["width"] == 2 * loaded["height"]
        total = strip.shape[-1]
        for i, scene in enumerate(loaded["scenes"]):
            assert scene["anchor_yaw"] == pytest.approx(360.0 * scene_anchor_x(i, 32, 16) / total)
            assert 0.0 <= scene["anchor_yaw"] < 360.0
        for i, seam in enumerate(loaded["seams"]):
            assert seam["yaw"] == pytest.approx(360.0 * seam_center_x(i, 32, 16) / total)
            assert seam["prompt"] == ["a", "b", "c"][i]
        png = load_image(tmp_path / "panorama.png")
        assert png.shape == (3, 64, 128)
