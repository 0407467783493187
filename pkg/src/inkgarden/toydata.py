"""Procedural toy corpus: small garden scenes with template captions.

Each scene composes a subset of six elements (pavilion, bridge, pond, pine,
rock, moon) over a paper-toned background; the caption deterministically
names every drawn element and its left/right placement, so captions and
pixels are mutually consistent by construction.  An "ink" style variant
renders the same vocabulary as pale strokes on a dark night ground and says
so in the caption; it serves as the distribution shift for adapter
fine-tuning runs.
"""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .dataset import DatasetRecord, write_manifest
from .imageio import save_image

ELEMENTS = ("pavilion", "bridge", "pond", "pine", "rock", "moon")

ELEMENT_PROBS = {
    "pavilion": 0.70,
    "bridge": 0.50,
    "pond": 0.65,
    "pine": 0.60,
    "rock": 0.50,
    "moon": 0.45,
}

STYLES = {
    "paper": {
        "bg": (0.84, 0.78, 0.64),
        "ink": (0.20, 0.17, 0.15),
        "roof": (0.45, 0.16, 0.12),
        "water": (0.42, 0.52, 0.56),
        "pine": (0.22, 0.34, 0.24),
        "rock": (0.48, 0.45, 0.42),
        "moon": (0.93, 0.89, 0.72),
    },
    "ink": {
        "bg": (0.08, 0.09, 0.13),
        "ink": (0.82, 0.84, 0.90),
        "roof": (0.74, 0.60, 0.46),
        "water": (0.30, 0.40, 0.55),
        "pine": (0.52, 0.66, 0.58),
        "rock": (0.58, 0.60, 0.66),
        "moon": (0.96, 0.94, 0.84),
    },
}

INK_STYLE_PHRASE = "in ink night style"


@dataclass(frozen=True)
class ScenePlan:
    """Which elements appear, where, and how large (jitter around 1.0)."""

    elements: tuple  # ((name, side, jitter), ...) in canonical element order
    style: str = "paper"

    def present(self):
        return [name for name, _, _ in self.elements]


def sample_scene_plan(rng, style="paper") -> ScenePlan:
    chosen = []
    for name in ELEMENTS:
        if rng.random() < ELEMENT_PROBS[name]:
            side = "left" if rng.random() < 0.5 else "right"
            jitter = float(rng.uniform(0.85, 1.15))
            chosen.append((name, side, jitter))
    return ScenePlan(elements=tuple(chosen), style=style)


def caption_for(plan: ScenePlan) -> str:
    phrases = [f"a {name} on the {side}" for name, side, _ in plan.elements]
    if not phrases:
        phrases = ["an empty garden"]
    if plan.style == "ink":
        phrases.append(INK_STYLE_PHRASE)
    return ", ".join(phrases) + "."


def _fill(img, mask, color):
    for c in range(3):
        img[c][mask] = color[c]


def render_scene(plan: ScenePlan, side: int) -> np.ndarray:
    """Draw the plan onto an S x S canvas; returns (3, S, S) float32 in [-1, 1]."""
    s = side
    pal = STYLES[plan.style]
    img = np.empty((3, s, s), dtype=np.float64)
    for c in range(3):
        img[c].fill(pal["bg"][c])
    yy, xx = np.mgrid[0:s, 0:s].astype(np.float64)

    def cx_for(sde, j):
        return (0.27 if sde == "left" else 0.73) * s * (0.95 + 0.05 * j)

    placed = {name: (sde, j) for name, sde, j in plan.elements}

    # back-to-front: moon, pond, bridge, rock, pine, pavilion
    if "moon" in placed:
        sde, j = placed["moon"]
        cx, cy, r = cx_for(sde, j), 0.17 * s, 0.09 * s * j
        _fill(img, (xx - cx) ** 2 + (yy - cy) ** 2 <= r * r, pal["moon"])
    if "pond" in placed:
        sde, j = placed["pond"]
        cx, cy = cx_for(sde, j), 0.82 * s
        rx, ry = 0.21 * s * j, 0.07 * s * j
        _fill(img, ((xx - cx) / rx) ** 2 + ((yy - cy) / ry) ** 2 <= 1.0, pal["water"])
    if "bridge" in placed:
        sde, j = placed["bridge"]
        cx, cy = cx_for(sde, j), 0.76 * s
        outer, inner = 0.17 * s * j, 0.11 * s * j
        rr = (xx - cx) ** 2 + (yy - cy) ** 2
        _fill(img, (rr <= outer * outer) & (rr >= inner * inner) & (yy <= cy), pal["ink"])
    if "rock" in placed:
        sde, j = placed["rock"]
        cx, cy = cx_for(sde, j), 0.74 * s
        m1 = ((xx - cx + 0.03 * s) / (0.08 * s * j)) ** 2 + ((yy - cy) / (0.05 * s * j)) ** 2 <= 1.0
        m2 = ((xx - cx - 0.04 * s) / (0.06 * s * j)) ** 2 + ((yy - cy - 0.01 * s) / (0.045 * s * j)) ** 2 <= 1.0
        _fill(img, m1 | m2, pal["rock"])
    if "pine" in placed:
        sde, j = placed["pine"]
        cx = cx_for(sde, j)
        top, mid, base = 0.36 * s, 0.62 * s * (0.98 + 0.02 * j), 0.75 * s
        trunk = (np.abs(xx - cx) <= max(0.015 * s, 0.6)) & (yy >= mid) & (yy <= base)
        frac = np.clip((yy - top) / (mid - top), 0.0, 1.0)
        canopy = (np.abs(xx - cx) <= frac * 0.11 * s * j) & (yy >= top) & (yy <= mid)
        _fill(img, trunk | canopy, pal["pine"])
    if "pavilion" in placed:
        sde, j = placed["pavilion"]
        cx = cx_for(sde, j)
        roof_top, eave, floor = 0.44 * s, 0.57 * s, 0.75 * s
        half = 0.11 * s * j
        frac = np.clip((yy - roof_top) / (eave - roof_top), 0.0, 1.0)
        roof = (np.abs(xx - cx) <= frac * (half + 0.03 * s)) & (yy >= roof_top) & (yy <= eave)
        body = (np.abs(xx - cx) <= half) & (yy >= eave) & (yy <= floor)
        posts = body & (
            (np.abs(xx - (cx - half + 0.02 * s)) <= max(0.012 * s, 0.5))
            | (np.abs(xx - (cx + half - 0.02 * s)) <= max(0.012 * s, 0.5))
            | (yy >= floor - max(0.02 * s, 1.0))
            | (yy <= eave + max(0.02 * s, 1.0))
        )
        _fill(img, roof, pal["roof"])
        _fill(img, posts, pal["ink"])
    return (img * 2.0 - 1.0).astype(np.float32)


def record_rng(seed: int, index: int):
    return np.random.Generator(np.random.Philox(np.random.SeedSequence(entropy=(seed, index))))


def synth_toy_dataset(n, seed, side, out_dir=None, style="paper", prefix="scene"):
    """Generate n scenes; same seed gives a bit-identical corpus.

    Returns (records, images, plans); when out_dir is given, also writes the
    PNGs plus metadata.jsonl and curation.jsonl underneath it.
    """
    if n < 1:
        raise ValueError("need n >= 1")
    records, images, plans = [], [], []
    for i in range(n):
        plan = sample_scene_plan(record_rng(seed, i), style=style)
        img = render_scene(plan, side)
        present = set(plan.present())
        records.append(
            DatasetRecord(
                file_name=f"{prefix}_{i:05d}.png",
                caption=caption_for(plan),
                has_architecture=bool(present & {"pavilion", "bridge"}),
            )
        )
        images.append(img)
        plans.append(plan)
    if out_dir is not None:
        out_dir = Path(out_dir)
        img_dir = out_dir / "images"
        img_dir.mkdir(parents=True, exist_ok=True)
        for rec, img in zip(records, images):
            save_image(img, img_dir / rec.file_name)
        write_manifest(records, out_dir / "metadata.jsonl", out_dir / "curation.jsonl")
    return records, images, plans
