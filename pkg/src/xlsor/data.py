"""Image/mask pairs and their on-disk form: 8-bit binary PGM files plus a JSON manifest.

A dataset directory holds ``<id>_img.pgm`` (gray = round-half-up(intensity * 255)),
``<id>_mask.pgm`` (0 background, 255 foreground) and ``manifest.json``.
"""

from __future__ import annotations

import json
import re
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, List, Optional, Sequence

import numpy as np

from .errors import DataError

MANIFEST = "manifest.json"
SPLITS = ("train", "val", "test")


@dataclass
class MaskPair:
    """A gray image in [0, 1] and its binary mask (ground truth or pseudo), both H×W."""

    image: np.ndarray
    mask: np.ndarray
    meta: Dict = field(default_factory=dict)


# ----------------------------------------------------------------------- PGM


def to_u8(image: np.ndarray) -> np.ndarray:
    """Intensities in [0, 1] to gray levels, rounding halves up."""
    return np.floor(np.clip(image, 0.0, 1.0) * 255.0 + 0.5).astype(np.uint8)


def from_u8(gray: np.ndarray) -> np.ndarray:
    return gray.astype(np.float64) / 255.0


def write_pgm(path, gray: np.ndarray) -> None:
    gray = np.asarray(gray)
    if gray.ndim != 2 or gray.dtype != np.uint8:
        raise DataError(f"PGM writer needs a 2-D uint8 array, got {gray.dtype} {gray.shape}")
    h, w = gray.shape
    Path(path).write_bytes(b"P5\n%d %d\n255\n" % (w, h) + gray.tobytes())


_TOKEN = re.compile(rb"\s*(?:#[^\n]*\n\s*)*(\S+)")


def read_pgm(path) -> np.ndarray:
    """Read a binary (P5) 8-bit PGM into an H×W uint8 array."""
    data = Path(path).read_bytes()
    pos, fields = 0, []
    for _ in range(4):
        m = _TOKEN.match(data, pos)
        if m is None:
            raise DataError(f"{path}: truncated PGM header")
        fields.append(m.group(1))
        pos = m.end()
    magic, width, height, maxval = fields
    if magic != b"P5":
        raise DataError(f"{path}: not a binary PGM (magic {magic!r})")
    width, height, maxval = int(width), int(height), int(maxval)
    if maxval != 255:
        raise DataError(f"{path}: only 8-bit PGM supported (maxval {maxval})")
    pos += 1  # single whitespace byte after maxval
    pixels = data[pos:]
    if len(pixels) != width * height:
        raise DataError(f"{path}: expected {width * height} pixel bytes, found {len(pixels)}")
    return np.frombuffer(pixels, dtype=np.uint8).reshape(height, width).copy()


# ----------------------------------------------------------------- datasets


def split_assignment(n: int, seed: int, fractions=(0.7, 0.1, 0.2)) -> List[str]:
    """Seeded train/val/test labels for ``n`` items (70/10/20 by default)."""
    order = np.random.default_rng(int(seed)).permutation(n)
    n_train = int(round(fractions[0] * n))
    n_val = int(round(fractions[1] * n))
    labels = [""] * n
    for rank, i in enumerate(order):
        labels[i] = "train" if rank < n_train else "val" if rank < n_train + n_val else "test"
    return labels


def write_dataset(out_dir, records: Sequence[dict], images, masks, header: Optional[dict] = None):
    """Write PGM pairs and a manifest. ``records[i]`` must carry a unique ``id``."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    entries = []
    for rec, image, mask in zip(records, images, masks):
        rid = rec["id"]
        write_pgm(out / f"{rid}_img.pgm", to_u8(image))
        write_pgm(out / f"{rid}_mask.pgm", (np.asarray(mask) > 0).astype(np.uint8) * 255)
        entries.append({**rec, "image": f"{rid}_img.pgm", "mask": f"{rid}_mask.pgm"})
    manifest = {**(header or {}), "pairs": entries}
    (out / MANIFEST).write_text(json.dumps(manifest, indent=2) + "\n")
    return manifest


def read_manifest(data_dir) -> dict:
    path = Path(data_dir) / MANIFEST
    try:
        manifest = json.loads(path.read_text())
    except (OSError, json.JSONDecodeError) as exc:
        raise DataError(f"cannot read {path}: {exc}") from exc
    if not isinstance(manifest.get("pairs"), list):
        raise DataError(f"{path}: missing 'pairs' list")
    return manifest


def load_pairs(data_dir, split: Optional[str] = None, style: Optional[str] = None) -> List[MaskPair]:
    """Load pairs from a dataset directory, optionally filtered by split and style.

    ``style`` may be a style name, ``"normal"``, or ``"abnormal"`` (anything but normal).
    """
    root = Path(data_dir)
    pairs = []
    for rec in read_manifest(root)["pairs"]:
        if split is not None and rec.get("split") != split:
            continue
        rec_style = rec.get("style", "normal")
        if style == "abnormal" and rec_style == "normal":
            continue
        if style not in (None, "abnormal") and rec_style != style:
            continue
        try:
            gray = read_pgm(root / rec["image"])
            mask = read_pgm(root / rec["mask"])
        except OSError as exc:
            raise DataError(f"cannot read pair {rec.get('id')}: {exc}") from exc
        if not np.isin(mask, (0, 255)).all():
            raise DataError(f"{rec['mask']}: mask values must be 0 or 255")
        pairs.append(MaskPair(from_u8(gray), (mask > 0).astype(np.uint8), dict(rec)))
    return pairs
