"""Spatial <-> block DCT <-> sub-band map conversions.

Sub-band maps put one (color channel, frequency) pair per channel:
channel ``c*64 + u*8 + v`` at spatial position ``(by, bx)`` holds
coefficient ``(u, v)`` of block ``(by, bx)`` of color channel ``c``.

Every function accepts optional leading batch dimensions.
"""
import numpy as np

from .jpeg_codec import CoefficientImage, quantize


def _dct_matrix():
    k = np.arange(8)
    m = np.cos((2 * k[None, :] + 1) * k[:, None] * np.pi / 16) * np.sqrt(2 / 8)
    m[0] /= np.sqrt(2)
    return m


# row u holds the u-th orthonormal basis vector
DCT_MATRIX = _dct_matrix()

# full-range BT.601 as used by JFIF
RGB_TO_YCBCR = np.array([
    [0.299, 0.587, 0.114],
    [-0.168735892, -0.331264108, 0.5],
    [0.5, -0.418687589, -0.081312411],
])
YCBCR_TO_RGB = np.linalg.inv(RGB_TO_YCBCR)
CHROMA_OFFSET = np.array([0.0, 128.0, 128.0])


def rgb_to_ycbcr(img):
    """(..., 3, H, W) RGB in [0, 255] -> YCbCr with chroma centred at 128."""
    img = np.asarray(img, dtype=np.float64)
    out = np.einsum("ij,...jhw->...ihw", RGB_TO_YCBCR, img)
    return out + CHROMA_OFFSET[:, None, None]


def ycbcr_to_rgb(img, clamp=True):
    img = np.asarray(img, dtype=np.float64) - CHROMA_OFFSET[:, None, None]
    out = np.einsum("ij,...jhw->...ihw", YCBCR_TO_RGB, img)
    return np.clip(out, 0, 255) if clamp else out


def block_split(img, level_shift=True):
    """(..., 3, H, W) -> (..., 3, H/8, W/8, 8, 8), optionally shifted by -128."""
    img = np.asarray(img, dtype=np.float64)
    *lead, c, h, w = img.shape
    if h % 8 or w % 8:
        raise ValueError(f"image size {h}x{w} is not a multiple of 8")
    out = img.reshape(*lead, c, h // 8, 8, w // 8, 8).swapaxes(-3, -2)
    return out - 128.0 if level_shift else out.copy()


def block_merge(blocks, level_shift=True):
    blocks = np.asarray(blocks, dtype=np.float64)
    *lead, c, bh, bw, _, _ = blocks.shape
    out = blocks.swapaxes(-3, -2).reshape(*lead, c, bh * 8, bw * 8)
    return out + 128.0 if level_shift else out.copy()


def dct8x8(blocks):
    """Orthonormal 2-D type-II DCT over the last two axes."""
    return DCT_MATRIX @ np.asarray(blocks, dtype=np.float64) @ DCT_MATRIX.T


def idct8x8(blocks):
    return DCT_MATRIX.T @ np.asarray(blocks, dtype=np.float64) @ DCT_MATRIX


def blocks_to_subbands(blocks):
    """(..., 3, H/8, W/8, 8, 8) -> (..., 192, H/8, W/8)."""
    blocks = np.asarray(blocks)
    *lead, c, bh, bw, u, v = blocks.shape
    if (u, v) != (8, 8):
        raise ValueError(f"expected 8x8 blocks, got {u}x{v}")
    moved = np.moveaxis(blocks, (-2, -1), (-4, -3))  # (..., c, 8, 8, bh, bw)
    return moved.reshape(*lead, c * 64, bh, bw)


def subbands_to_blocks(maps, channels=3):
    maps = np.asarray(maps)
    *lead, k, bh, bw = maps.shape
    if k != channels * 64:
        raise ValueError(f"expected {channels * 64} sub-band channels, got {k}")
    split = maps.reshape(*lead, channels, 8, 8, bh, bw)
    return np.moveaxis(split, (-4, -3), (-2, -1))


def secret_to_subbands(rgb):
    """RGB image (..., 3, H, W) -> 192-channel DCT sub-band map."""
    return blocks_to_subbands(dct8x8(block_split(rgb_to_ycbcr(rgb))))


def subbands_to_secret(maps, clamp=True):
    blocks = idct8x8(subbands_to_blocks(maps))
    return ycbcr_to_rgb(block_merge(blocks), clamp=clamp)


def coefficients_to_subbands(coeffs):
    blocks = coeffs.blocks if isinstance(coeffs, CoefficientImage) else coeffs
    return blocks_to_subbands(np.asarray(blocks, dtype=np.float64))


def decode_coefficients(blocks, quant_steps, clamp=True):
    """Pixel decode of (possibly fractional) quantized coefficients to RGB floats.

    No rounding is applied; ``clamp=False`` gives the purely affine map used
    by the hiding loss.
    """
    steps = np.asarray(quant_steps, dtype=np.float64)
    # fixed memory layout keeps the result bit-identical across input strides
    deq = np.ascontiguousarray(np.asarray(blocks, dtype=np.float64) * steps[:, None, None])
    ycc = block_merge(idct8x8(deq))
    if clamp:
        # 8-bit decoders range-limit the samples before color conversion
        ycc = np.clip(ycc, 0.0, 255.0)
    return ycbcr_to_rgb(ycc, clamp=clamp)


def decode_rgb(coeffs: CoefficientImage):
    """8-bit RGB rendering of a coefficient image, (3, H, W) uint8."""
    rgb = decode_coefficients(coeffs.blocks, coeffs.quant_steps)
    return np.clip(np.floor(rgb + 0.5), 0, 255).astype(np.uint8)


def encode_rgb(rgb, quant_steps):
    """Forward JPEG transform of an RGB image into quantized coefficients."""
    ycc = rgb_to_ycbcr(rgb)
    return quantize(dct8x8(block_split(ycc)), quant_steps)
