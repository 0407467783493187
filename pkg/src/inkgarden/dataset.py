"""Image-caption dataset handling: curation filters, square scaling, manifests.

The manifest is JSONL with exactly the keys ``file_name`` and
``additional_feature`` per line; the manual architecture-curation flag lives
in a separate sidecar file so the manifest keys stay fixed.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .errors import DuplicateRecordError, InvalidImageError, ManifestError

MIN_PIXELS = 6_000_000

# Rejections are checked in this fixed order; the first failure wins.
REJECT_RESOLUTION = "resolution"
REJECT_CAPTION = "missing_caption"
REJECT_ARCHITECTURE = "missing_architecture"


@dataclass(frozen=True)
class DatasetRecord:
    file_name: str
    caption: str
    has_architecture: bool = True

    def __post_init__(self):
        if not self.file_name:
            raise ManifestError("record file_name must be non-empty")
        if not self.caption.strip():
            raise ManifestError(f"record '{self.file_name}' has an empty caption")


@dataclass(frozen=True)
class RawImageMeta:
    width: int
    height: int
    has_caption: bool
    has_architecture: bool


@dataclass(frozen=True)
class FilterDecision:
    accepted: bool
    reason: str | None = None


def filter_record(meta: RawImageMeta) -> FilterDecision:
    """Accept iff pixels >= 6,000,000 (inclusive) AND caption AND architecture."""
    if meta.width * meta.height < MIN_PIXELS:
        return FilterDecision(False, REJECT_RESOLUTION)
    if not meta.has_caption:
        return FilterDecision(False, REJECT_CAPTION)
    if not meta.has_architecture:
        return FilterDecision(False, REJECT_ARCHITECTURE)
    return FilterDecision(True)


def _overlap_matrix(n_in: int, n_out: int) -> np.ndarray:
    """Row-stochastic matrix averaging n_in source cells into n_out output cells."""
    m = np.zeros((n_out, n_in))
    scale = n_in / n_out
    for o in range(n_out):
        lo, hi = o * scale, (o + 1) * scale
        for i in range(int(np.floor(lo)), min(int(np.ceil(hi)), n_in)):
            w = min(hi, i + 1) - max(lo, i)
            if w > 0:
                m[o, i] = w
    return m / m.sum(axis=1, keepdims=True)


def area_resample(img: np.ndarray, out_h: int, out_w: int) -> np.ndarray:
    """Exact area-average resample of a (C, H, W) image (separable box filter)."""
    _, h, w = img.shape
    rows = _overlap_matrix(h, out_h)
    cols = _overlap_matrix(w, out_w)
    tmp = np.einsum("oh,chw->cow", rows, img.astype(np.float64))
    return np.einsum("pw,cow->cop", cols, tmp)


def scale_image(img: np.ndarray, target_side: int) -> np.ndarray:
    """Center-crop to a square on the short side, then box-resample to S x S.

    Input/output are (3, H, W) floats in [-1, 1]; no-op for S x S inputs.
    """
    if target_side < 8 or target_side % 2 != 0:
        raise InvalidImageError(f"target side must be even and >= 8, got {target_side}")
    if img.ndim != 3 or img.shape[0] != 3:
        raise InvalidImageError(f"expected (3, H, W) image, got {img.shape}")
    _, h, w = img.shape
    if min(h, w) < 2:
        raise InvalidImageError(f"degenerate image of size {h}x{w}")
    side = min(h, w)
    top = (h - side) // 2
    left = (w - side) // 2
    cropped = img[:, top : top + side, left : left + side]
    if side == target_side:
        return np.asarray(cropped, dtype=img.dtype).copy()
    out = area_resample(cropped, target_side, target_side)
    return np.clip(out, -1.0, 1.0).astype(img.dtype)


def manifest_line(record: DatasetRecord) -> str:
    return json.dumps(
        {"file_name": record.file_name, "additional_feature": record.caption},
        ensure_ascii=False,
        separators=(", ", ": "),
    )


def write_manifest(records, path, curation_path=None):
    """Write metadata.jsonl (+ optional curation sidecar); file_name must be unique."""
    records = list(records)
    seen = set()
    for r in records:
        if r.file_name in seen:
            raise DuplicateRecordError(f"duplicate file_name '{r.file_name}' in manifest")
        seen.add(r.file_name)
    path = Path(path)
    with path.open("w", encoding="utf-8", newline="\n") as f:
        for r in records:
            f.write(manifest_line(r) + "\n")
    if curation_path is not None:
        with Path(curation_path).open("w", encoding="utf-8", newline="\n") as f:
            for r in records:
                f.write(
                    json.dumps(
                        {"file_name": r.file_name, "has_architecture": r.has_architecture},
                        ensure_ascii=False,
                        separators=(", ", ": "),
                    )
                    + "\n"
                )


def read_manifest(path, curation_path=None):
    """Read records back; raises with the line number on malformed JSON."""
    flags = {}
    if curation_path is not None and Path(curation_path).exists():
        with Path(curation_path).open("r", encoding="utf-8") as f:
            for lineno, line in enumerate(f, start=1):
                if not line.strip():
                    continue
                try:
                    obj = json.loads(line)
                except json.JSONDecodeError as e:
                    raise ManifestError(f"{curation_path}: malformed JSON on line {lineno}: {e}") from e
                flags[obj["file_name"]] = bool(obj["has_architecture"])
    records = []
    seen = set()
    with Path(path).open("r", encoding="utf-8") as f:
        for lineno, line in enumerate(f, start=1):
            if not line.strip():
                continue
            try:
                obj = json.loads(line)
            except json.JSONDecodeError as e:
                raise ManifestError(f"{path}: malformed JSON on line {lineno}: {e}") from e
            if set(obj.keys()) != {"file_name", "additional_feature"}:
                raise ManifestError(f"{path}: unexpected keys {sorted(obj)} on line {lineno}")
            name = obj["file_name"]
            if name in seen:
                raise DuplicateRecordError(f"{path}: duplicate file_name '{name}' on line {lineno}")
            seen.add(name)
            records.append(
                DatasetRecord(
                    file_name=name,
                    caption=obj["additional_feature"],
                    has_architecture=flags.get(name, True),
                )
            )
    return records


def read_raw_entries(path, curation_path=None):
    """Lenient manifest read for ingest: yields dicts without record validation,
    so caption-less rows can be *filtered* (the Table-1 invariants only apply to
    records that survive ingestion)."""
    flags = {}
    if curation_path is not None and Path(curation_path).exists():
        with Path(curation_path).open("r", encoding="utf-8") as f:
            for line in f:
                if line.strip():
                    obj = json.loads(line)
                    flags[obj["file_name"]] = bool(obj["has_architecture"])
    entries = []
    with Path(path).open("r", encoding="utf-8") as f:
        for lineno, line in enumerate(f, start=1):
            if not line.strip():
                continue
            try:
                obj = json.loads(line)
            except json.JSONDecodeError as e:
                raise ManifestError(f"{path}: malformed JSON on line {lineno}: {e}") from e
            entries.append(
                {
                    "file_name": obj["file_name"],
                    "caption": obj.get("additional_feature", ""),
                    "has_architecture": flags.get(obj["file_name"], False),
                }
            )
    return entries


def load_corpus(root):
    """Read a prepared corpus directory: metadata.jsonl + curation.jsonl + images/."""
    from .imageio import load_image  # local import to keep dataset importable without PIL use

    root = Path(root)
    records = read_manifest(root / "metadata.jsonl", root / "curation.jsonl")
    images = np.stack([load_image(root / "images" / r.file_name) for r in records])
    return records, images


def split_indices(n: int, seed: int, holdout_fraction: float = 0.1):
    """Seeded train/holdout split (defaults to 90/10)."""
    rng = np.random.default_rng(seed)
    order = rng.permutation(n)
    n_hold = max(1, int(round(n * holdout_fraction))) if n > 1 else 0
    return np.sort(order[n_hold:]).tolist(), np.sort(order[:n_hold]).tolist()
