"""Image quality metrics: PSNR, SSIM and APD on (3, H, W) images in [0, 255]."""
from __future__ import annotations

import csv
import json
from dataclasses import dataclass

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

IDENTICAL = "identical"

CSV_COLUMNS = ["file", "psnr_cs", "ssim_cs", "apd_cs", "psnr_sr", "ssim_sr", "apd_sr"]


def _pair(a, b):
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise ValueError(f"shape mismatch: {a.shape} vs {b.shape}")
    return a, b


def psnr(a, b, data_range=255.0):
    """PSNR in dB, or :data:`IDENTICAL` when the images are equal."""
    a, b = _pair(a, b)
    mse = np.mean((a - b) ** 2)
    if mse == 0:
        return IDENTICAL
    return float(10 * np.log10(data_range ** 2 / mse))


def apd(a, b):
    a, b = _pair(a, b)
    return float(np.mean(np.abs(a - b)))


def gaussian_window(size=11, sigma=1.5):
    x = np.arange(size) - (size - 1) / 2
    g = np.exp(-x ** 2 / (2 * sigma ** 2))
    return g / g.sum()


def _smooth(img, g):
    # separable 'valid' filtering over the last two axes
    rows = sliding_window_view(img, len(g), axis=-2) @ g
    return sliding_window_view(rows, len(g), axis=-1) @ g


def ssim(a, b, data_range=255.0, size=11, sigma=1.5, k1=0.01, k2=0.03):
    """Mean SSIM with a Gaussian window, averaged over windows and channels.

    Accepts (H, W) or (C, H, W) images; the window only covers positions
    where it fits entirely inside the image.
    """
    a, b = _pair(a, b)
    if a.ndim == 2:
        a, b = a[None], b[None]
    if min(a.shape[-2:]) < size:
        raise ValueError(f"image smaller than the {size}x{size} window")
    g = gaussian_window(size, sigma)
    c1 = (k1 * data_range) ** 2
    c2 = (k2 * data_range) ** 2
    mu_a, mu_b = _smooth(a, g), _smooth(b, g)
    var_a = _smooth(a * a, g) - mu_a ** 2
    var_b = _smooth(b * b, g) - mu_b ** 2
    cov = _smooth(a * b, g) - mu_a * mu_b
    s = ((2 * mu_a * mu_b + c1) * (2 * cov + c2)) / ((mu_a ** 2 + mu_b ** 2 + c1) * (var_a + var_b + c2))
    return float(s.mean())


@dataclass
class QualityReport:
    psnr: float | str
    ssim: float
    apd: float


def quality(a, b) -> QualityReport:
    return QualityReport(psnr(a, b), ssim(a, b), apd(a, b))


def _mean_psnr(values):
    nums = [v for v in values if v != IDENTICAL]
    return IDENTICAL if not nums else float(np.mean(nums))


def aggregate(rows):
    """Mean of per-image rows; PSNR averages only finite entries."""
    out = {"file": "mean"}
    for col in CSV_COLUMNS[1:]:
        vals = [r[col] for r in rows]
        out[col] = _mean_psnr(vals) if col.startswith("psnr") else float(np.mean(vals))
    return out


def evaluate_pairs(model, pairs, names=None):
    """Hide/reveal every (cover JpegFile, secret RGB) pair and measure both pairs.

    Returns ``(rows, mean_row)``; cover/stego images are compared as 8-bit
    decodes, secret/recovery after rounding the recovery to 8 bits.
    """
    from .pipeline import hide, reveal
    from .transforms import decode_rgb

    rows = []
    for i, (cover, secret) in enumerate(pairs):
        result = hide(cover, secret, model)
        recovered = reveal(result.stego_jpeg, model)
        recovered8 = np.clip(np.floor(recovered + 0.5), 0, 255)
        cs = quality(decode_rgb(cover.coefficients), decode_rgb(result.stego_jpeg.coefficients))
        sr = quality(np.asarray(secret, dtype=np.float64), recovered8)
        rows.append({
            "file": names[i] if names else str(i),
            "psnr_cs": cs.psnr, "ssim_cs": cs.ssim, "apd_cs": cs.apd,
            "psnr_sr": sr.psnr, "ssim_sr": sr.ssim, "apd_sr": sr.apd,
        })
    return rows, aggregate(rows)


def _fmt(v):
    return v if isinstance(v, str) else f"{v:.6f}"


def write_csv(rows, mean_row, path):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(CSV_COLUMNS)
        for r in list(rows) + [mean_row]:
            w.writerow([r["file"]] + [_fmt(r[c]) for c in CSV_COLUMNS[1:]])


def write_json(rows, mean_row, path):
    with open(path, "w") as fh:
        json.dump({"rows": rows, "mean": mean_row}, fh, indent=2)
        fh.write("\n")

