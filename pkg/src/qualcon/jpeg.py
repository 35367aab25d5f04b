"""Baseline-JPEG style lossy round trip (transform + quantisation only).

Entropy coding is lossless, so it is skipped: the reconstruction depends only on
colour conversion, the 8x8 DCT and quantisation.  Chroma is kept at full
resolution (4:4:4).
"""
from __future__ import annotations

import numpy as np

from .imgproc import check_image, clamp

# ITU-T T.81 Annex K, tables K.1 and K.2 (natural, not zig-zag, order)
LUMA_TABLE = np.array(
    [
        [16, 11, 10, 16, 24, 40, 51, 61],
        [12, 12, 14, 19, 26, 58, 60, 55],
        [14, 13, 16, 24, 40, 57, 69, 56],
        [14, 17, 22, 29, 51, 87, 80, 62],
        [18, 22, 37, 56, 68, 109, 103, 77],
        [24, 35, 55, 64, 81, 104, 113, 92],
        [49, 64, 78, 87, 103, 121, 120, 101],
        [72, 92, 95, 98, 112, 100, 103, 99],
    ],
    dtype=np.float64,
)
CHROMA_TABLE = np.array(
    [
        [17, 18, 24, 47, 99, 99, 99, 99],
        [18, 21, 26, 66, 99, 99, 99, 99],
        [24, 26, 56, 99, 99, 99, 99, 99],
        [47, 66, 99, 99, 99, 99, 99, 99],
        [99, 99, 99, 99, 99, 99, 99, 99],
        [99, 99, 99, 99, 99, 99, 99, 99],
        [99, 99, 99, 99, 99, 99, 99, 99],
        [99, 99, 99, 99, 99, 99, 99, 99],
    ],
    dtype=np.float64,
)

# JFIF full-range RGB <-> YCbCr
_RGB2YCC = np.array(
    [
        [0.299, 0.587, 0.114],
        [-0.168736, -0.331264, 0.5],
        [0.5, -0.418688, -0.081312],
    ]
)
_YCC2RGB = np.array(
    [
        [1.0, 0.0, 1.402],
        [1.0, -0.344136, -0.714136],
        [1.0, 1.772, 0.0],
    ]
)


def dct_matrix(n: int = 8) -> np.ndarray:
    """Orthonormal DCT-II matrix ``C`` so that ``C @ x`` transforms a column."""
    k = np.arange(n)[:, None]
    i = np.arange(n)[None, :]
    c = np.cos((2 * i + 1) * k * np.pi / (2 * n)) * np.sqrt(2.0 / n)
    c[0] /= np.sqrt(2.0)
    return c


_DCT = dct_matrix(8)


def quality_scale(quality: int) -> int:
    """libjpeg quality law: 5000/q below 50, 200 - 2q from 50 up."""
    if quality < 50:
        return 5000 // quality
    return 200 - 2 * quality


def scaled_table(base: np.ndarray, quality: int) -> np.ndarray:
    _check_quality(quality)
    scale = quality_scale(quality)
    # libjpeg: (base * scale + 50) / 100 in integer arithmetic
    table = np.floor((base * scale + 50) / 100)
    return np.clip(table, 1, 255)


def _check_quality(quality: int) -> None:
    if isinstance(quality, bool) or int(quality) != quality or not 1 <= quality <= 100:
        raise ValueError(f"JPEG quality must be an integer in 1..100, got {quality!r}")


def _blocks(plane: np.ndarray) -> np.ndarray:
    h, w = plane.shape
    return plane.reshape(h // 8, 8, w // 8, 8).transpose(0, 2, 1, 3)


def _unblocks(blocks: np.ndarray) -> np.ndarray:
    bh, bw = blocks.shape[:2]
    return blocks.transpose(0, 2, 1, 3).reshape(bh * 8, bw * 8)


def roundtrip_plane(plane: np.ndarray, table: np.ndarray) -> np.ndarray:
    """DCT -> quantise -> dequantise -> IDCT on a level-shifted plane whose sides are multiples of 8."""
    b = _blocks(plane)
    coef = _DCT @ b @ _DCT.T
    coef = np.round(coef / table) * table
    return _unblocks(_DCT.T @ coef @ _DCT)


def jpeg_roundtrip(img: np.ndarray, quality: int) -> np.ndarray:
    img = check_image(img)
    _check_quality(quality)
    h, w = img.shape[:2]
    ph, pw = -h % 8, -w % 8
    px = np.pad(img.astype(np.float64) * 255.0, ((0, ph), (0, pw), (0, 0)), mode="edge")
    ycc = px @ _RGB2YCC.T
    ycc[..., 1:] += 128.0
    tables = (scaled_table(LUMA_TABLE, quality), scaled_table(CHROMA_TABLE, quality))
    out = np.empty_like(ycc)
    for c in range(3):
        table = tables[0] if c == 0 else tables[1]
        out[..., c] = roundtrip_plane(ycc[..., c] - 128.0, table) + 128.0
    out[..., 1:] -= 128.0
    rgb = out @ _YCC2RGB.T
    return clamp(rgb[:h, :w] / 255.0)
