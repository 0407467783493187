"""Scroll stitching and 2:1 equirectangular assembly.

Scenes are laid left-to-right with blank gap bands; each gap (plus a small
margin into both neighbours) is diffusion-inpainted sequentially so every
fill sees the previous one.  The finished strip lands in the central
vertical band of a 2:1 canvas, with edge-extension blends to flat sky and
ground tones and a blended wrap seam so column 0 matches column W-1.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .dataset import area_resample
from .diffusion import InpaintTask
from .errors import ConfigurationError
from .imageio import save_image

SKY_TONE = (0.74, 0.70, 0.52)  # in [-1, 1]
GROUND_TONE = (0.24, 0.12, -0.08)


@dataclass
class SceneSequence:
    images: list  # n images, each (3, S, S) in [-1, 1]
    seam_prompts: list  # n - 1 prompts guiding the gap fills
    gap_width: int | None = None  # defaults to S // 2

    def __post_init__(self):
        if len(self.images) < 2:
            raise ConfigurationError("need at least 2 scenes to stitch")
        shapes = {img.shape for img in self.images}
        if len(shapes) != 1:
            raise ConfigurationError(f"scene shapes differ: {sorted(shapes)}")
        if len(self.seam_prompts) != len(self.images) - 1:
            raise ConfigurationError(
                f"need {len(self.images) - 1} seam prompts, got {len(self.seam_prompts)}"
            )
        if self.gap_width is None:
            self.gap_width = self.images[0].shape[-1] // 2


def strip_width(n, side, gap):
    return n * side + (n - 1) * gap


def scene_anchor_x(i, side, gap):
    return i * (side + gap) + side / 2.0


def seam_center_x(i, side, gap):
    return i * (side + gap) + side + gap / 2.0


def stitch(seq: SceneSequence, inpaint_fn, seed, latent_factor=4):
    """Inpaint the gaps of the scene row; returns the (3, S, total) strip.

    `inpaint_fn(task, seed)` regenerates mask=1 pixels of an S x S window.
    Pixels outside every gap-plus-margin mask stay bit-identical to the
    input scenes.
    """
    if seq.gap_width < latent_factor:
        raise ConfigurationError(
            f"gap width {seq.gap_width} is below the latent cell size {latent_factor}"
        )
    side = seq.images[0].shape[-1]
    gap = seq.gap_width
    if gap > side // 2:
        raise ConfigurationError(f"gap width {gap} exceeds S/2 = {side // 2} (window must cover both rims)")
    n = len(seq.images)
    total = strip_width(n, side, gap)
    strip = np.zeros((3, side, total), dtype=np.float32)
    for i, img in enumerate(seq.images):
        x = i * (side + gap)
        strip[:, :, x : x + side] = img
    margin = min(side // 8, gap // 2)
    for g in range(n - 1):
        x0 = g * (side + gap) + side
        x1 = x0 + gap
        m0, m1 = x0 - margin, x1 + margin
        centre = (x0 + x1) // 2
        w0 = min(max(centre - side // 2, 0), total - side)
        window = np.ascontiguousarray(strip[:, :, w0 : w0 + side])
        mask = np.zeros((side, side), dtype=np.int64)
        lo = max(m0 - w0, 0)
        hi = min(m1 - w0, side)
        mask[:, lo:hi] = 1
        task = InpaintTask(source=window, mask=mask, prompt=seq.seam_prompts[g])
        filled = inpaint_fn(task, seed + g)
        strip[:, :, w0 : w0 + side] = filled
    return strip


@dataclass
class PanoramaImage:
    pixels: np.ndarray  # (3, H, 2H) in [-1, 1]
    band_fraction: float
    meta: dict = field(default_factory=dict)

    @property
    def height(self):
        return self.pixels.shape[1]

    @property
    def width(self):
        return self.pixels.shape[2]

    def wrap_error(self):
        return float(np.abs(self.pixels[:, :, 0] - self.pixels[:, :, -1]).max())


def to_equirectangular(strip, h_out, band_fraction=0.5, sky=SKY_TONE, ground=GROUND_TONE):
    """Place the strip in the central band of a 2:1 canvas with wrap continuity."""
    if h_out % 2 != 0:
        raise ConfigurationError(f"output height must be even, got {h_out}")
    if strip.shape[1] < 8:
        raise ConfigurationError("strip height must be >= 8")
    w = 2 * h_out
    band_h = int(round(h_out * band_fraction))
    band = area_resample(np.asarray(strip, dtype=np.float64), band_h, w)
    y0 = (h_out - band_h) // 2
    y1 = y0 + band_h
    canvas = np.empty((3, h_out, w), dtype=np.float64)
    sky = np.asarray(sky, dtype=np.float64).reshape(3, 1)
    ground = np.asarray(ground, dtype=np.float64).reshape(3, 1)
    canvas[:, y0:y1, :] = band
    top_row = band[:, 0, :]
    bottom_row = band[:, -1, :]
    for y in range(y0):
        t = (y0 - y) / max(y0, 1)
        canvas[:, y, :] = (1.0 - t) * top_row + t * sky
    for y in range(y1, h_out):
        t = (y - y1 + 1) / max(h_out - y1, 1)
        canvas[:, y, :] = (1.0 - t) * bottom_row + t * ground
    # Blend the wrap seam over a 2% window so column 0 == column W-1.
    window = max(1, int(round(w * 0.02)))
    target = 0.5 * (canvas[:, :, 0] + canvas[:, :, -1])
    for d in range(window):
        a = 1.0 - d / window
        canvas[:, :, d] = a * target + (1.0 - a) * canvas[:, :, d]
        canvas[:, :, w - 1 - d] = a * target + (1.0 - a) * canvas[:, :, w - 1 - d]
    pixels = np.clip(canvas, -1.0, 1.0).astype(np.float32)
    return PanoramaImage(pixels=pixels, band_fraction=band_fraction)


def build_bundle(out_dir, seq: SceneSequence, strip, pano: PanoramaImage, seed):
    """Write panorama.png + panorama.json (the viewer's input contract)."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    side = seq.images[0].shape[-1]
    gap = seq.gap_width
    total = strip.shape[-1]
    scenes = [
        {"index": i, "anchor_yaw": 360.0 * scene_anchor_x(i, side, gap) / total}
        for i in range(len(seq.images))
    ]
    seams = [
        {"yaw": 360.0 * seam_center_x(i, side, gap) / total, "prompt": seq.seam_prompts[i]}
        for i in range(len(seq.seam_prompts))
    ]
    meta = {
        "image": "panorama.png",
        "width": pano.width,
        "height": pano.height,
        "band_fraction": pano.band_fraction,
        "seed": seed,
        "scenes": scenes,
        "seams": seams,
        "initial_yaw": scenes[0]["anchor_yaw"],
        "initial_pitch": 0.0,
    }
    save_image(pano.pixels, out_dir / "panorama.png")
    with (out_dir / "panorama.json").open("w", encoding="utf-8", newline="\n") as f:
        json.dump(meta, f, indent=2, sort_keys=True)
        f.write("\n")
    pano.meta = meta
    return meta
