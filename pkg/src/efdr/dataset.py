"""Dataset preparation and loading.

Prepared layout::

    out/covers/<name>.jpg    baseline 4:4:4 JPEG at the chosen quality
    out/secrets/<name>.png   lossless RGB
    out/manifest.tsv         cover<TAB>secret pairs used for evaluation
"""
from __future__ import annotations

import logging
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from PIL import Image

from .jpeg_codec import JpegFile, make_quant_tables, read_jpeg, write_jpeg
from .transforms import encode_rgb

log = logging.getLogger(__name__)

IMAGE_SUFFIXES = {".png", ".jpg", ".jpeg", ".bmp", ".ppm", ".pgm", ".tif", ".tiff", ".webp", ".gif"}


def read_rgb(path) -> np.ndarray:
    """Any raster Pillow can read, as a (3, H, W) uint8 array."""
    with Image.open(path) as im:
        return np.asarray(im.convert("RGB")).transpose(2, 0, 1).copy()


def write_png(rgb, path):
    arr = np.clip(np.floor(np.asarray(rgb, dtype=np.float64) + 0.5), 0, 255).astype(np.uint8)
    Image.fromarray(arr.transpose(1, 2, 0)).save(path, format="PNG")


def center_crop(rgb, size):
    _, h, w = rgb.shape
    if h < size or w < size:
        raise ValueError(f"image {h}x{w} smaller than crop {size}")
    top = (h - size) // 2
    left = (w - size) // 2
    return rgb[:, top:top + size, left:left + size]


def encode_cover(rgb, qf) -> JpegFile:
    luma, chroma = make_quant_tables(qf)
    coeffs = encode_rgb(rgb, np.stack([luma, chroma, chroma]))
    return JpegFile.from_coefficients(coeffs.blocks, luma, chroma)


@dataclass
class PrepareSummary:
    written: int
    skipped: int
    manifest: Path


def prepare_dataset(src_dir, out_dir, qf, crop=128) -> PrepareSummary:
    """Center-crop every image in ``src_dir`` into a cover JPEG and a secret PNG."""
    if not 1 <= qf <= 100:
        raise ValueError(f"qf {qf} outside 1..100")
    if crop <= 0 or crop % 8:
        raise ValueError(f"crop {crop} must be a positive multiple of 8")
    src_dir, out_dir = Path(src_dir), Path(out_dir)
    sources = sorted(p for p in src_dir.iterdir() if p.suffix.lower() in IMAGE_SUFFIXES)
    (out_dir / "covers").mkdir(parents=True, exist_ok=True)
    (out_dir / "secrets").mkdir(parents=True, exist_ok=True)
    names = []
    skipped = 0
    for path in sources:
        try:
            rgb = read_rgb(path)
        except OSError as exc:
            log.warning("skipping %s: unreadable (%s)", path.name, exc)
            skipped += 1
            continue
        if min(rgb.shape[1:]) < crop:
            log.warning("skipping %s: %dx%d is smaller than crop %d",
                        path.name, rgb.shape[2], rgb.shape[1], crop)
            skipped += 1
            continue
        rgb = center_crop(rgb, crop)
        write_jpeg(encode_cover(rgb, qf), out_dir / "covers" / f"{path.stem}.jpg")
        write_png(rgb, out_dir / "secrets" / f"{path.stem}.png")
        names.append(path.stem)
    manifest = out_dir / "manifest.tsv"
    with open(manifest, "w") as fh:
        for i, name in enumerate(names):
            partner = names[(i + 1) % len(names)]
            fh.write(f"covers/{name}.jpg\tsecrets/{partner}.png\n")
    return PrepareSummary(len(names), skipped, manifest)


def load_covers(cover_dir):
    return [(p.stem, read_jpeg(p)) for p in sorted(Path(cover_dir).glob("*.jpg"))]


def load_secrets(secret_dir):
    return [(p.stem, read_rgb(p)) for p in sorted(Path(secret_dir).glob("*.png"))]


def read_manifest(data_dir):
    """List of (cover path, secret path) pairs from ``manifest.tsv``."""
    data_dir = Path(data_dir)
    pairs = []
    for line in (data_dir / "manifest.tsv").read_text().splitlines():
        if not line.strip():
            continue
        cover, secret = line.split("\t")
        pairs.append((data_dir / cover, data_dir / secret))
    return pairs
