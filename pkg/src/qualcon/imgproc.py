"""Low-level image kernels.

Images are ``float64`` arrays of shape ``(H, W, 3)`` with samples in ``[0, 1]``.
Every public operation returns a fresh, clamped array and never mutates its
input.
"""
from __future__ import annotations

import math
from pathlib import Path

import numpy as np
from PIL import Image

# Rec.601 luma weights
LUMA_R = 0.299
LUMA_G = 0.587
LUMA_B = 0.114


def check_image(img: np.ndarray, name: str = "img") -> np.ndarray:
    img = np.asarray(img)
    if img.ndim != 3 or img.shape[2] != 3:
        raise ValueError(f"{name} must have shape (H, W, 3), got {img.shape}")
    if img.shape[0] < 1 or img.shape[1] < 1:
        raise ValueError(f"{name} must be non-empty, got {img.shape}")
    return img


def clamp(img: np.ndarray) -> np.ndarray:
    return np.clip(img, 0.0, 1.0)


def _axis_weights(n_in: int, n_out: int) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    # half-pixel centres: output sample i sits at input coordinate (i + 0.5) * n_in / n_out - 0.5
    pos = (np.arange(n_out, dtype=np.float64) + 0.5) * (n_in / n_out) - 0.5
    pos = np.clip(pos, 0.0, n_in - 1)
    lo = np.floor(pos).astype(np.intp)
    hi = np.minimum(lo + 1, n_in - 1)
    return lo, hi, pos - lo


def resize_bilinear(img: np.ndarray, out_h: int, out_w: int) -> np.ndarray:
    """Bilinear resize with half-pixel-centre alignment (no antialiasing)."""
    img = check_image(img)
    out_h, out_w = int(out_h), int(out_w)
    if out_h < 1 or out_w < 1:
        raise ValueError(f"target size must be positive, got {out_h}x{out_w}")
    h, w = img.shape[:2]
    if (out_h, out_w) == (h, w):
        return img.astype(np.float64, copy=True)
    r0, r1, fr = _axis_weights(h, out_h)
    c0, c1, fc = _axis_weights(w, out_w)
    fr = fr[:, None, None]
    top = img[r0]
    rows = top + fr * (img[r1] - top)
    fc = fc[None, :, None]
    left = rows[:, c0]
    out = left + fc * (rows[:, c1] - left)
    return clamp(out)


def gaussian_taps(sigma: float) -> np.ndarray:
    """Normalised taps ``exp(-d^2 / 2 sigma^2)`` for ``d`` in ``[-r, r]``, ``r = ceil(3 sigma)``."""
    radius = int(math.ceil(3.0 * sigma))
    d = np.arange(-radius, radius + 1, dtype=np.float64)
    if 2.0 * sigma * sigma == 0.0:  # sigma so small its square underflows
        return (d == 0).astype(np.float64)
    taps = np.exp(-(d * d) / (2.0 * sigma * sigma))
    return taps / taps.sum()


def _blur_axis(img: np.ndarray, taps: np.ndarray, axis: int) -> np.ndarray:
    radius = len(taps) // 2
    pad = [(0, 0)] * img.ndim
    pad[axis] = (radius, radius)
    # numpy "reflect" is reflect-101 (edge sample not repeated)
    padded = np.pad(img, pad, mode="reflect")
    n = img.shape[axis]
    # written as x + sum w_d (x_d - x) so constant regions are preserved exactly
    out = img.copy()
    for k, t in enumerate(taps):
        if k == radius:
            continue
        shifted = np.take(padded, np.arange(k, k + n), axis=axis)
        out += t * (shifted - img)
    return out


def gaussian_blur(img: np.ndarray, sigma: float) -> np.ndarray:
    """Separable Gaussian blur with reflect-101 borders."""
    img = check_image(img)
    if not sigma >= 0:
        raise ValueError(f"sigma must be non-negative, got {sigma}")
    if sigma == 0:
        return img.astype(np.float64, copy=True)
    taps = gaussian_taps(sigma)
    out = img.astype(np.float64)
    # reflect padding of width r needs at least r + 1 samples; larger radii fold repeatedly
    out = _blur_axis(out, taps, axis=0)
    out = _blur_axis(out, taps, axis=1)
    return clamp(out)


def flip_horizontal(img: np.ndarray) -> np.ndarray:
    img = check_image(img)
    return img[:, ::-1].astype(np.float64, copy=True)


def crop(img: np.ndarray, top: int, left: int, h: int, w: int) -> np.ndarray:
    img = check_image(img)
    H, W = img.shape[:2]
    if h < 1 or w < 1 or top < 0 or left < 0 or top + h > H or left + w > W:
        raise ValueError(f"crop ({top}, {left}, {h}, {w}) outside {H}x{W} image")
    return img[top : top + h, left : left + w].astype(np.float64, copy=True)


def luma(img: np.ndarray) -> np.ndarray:
    r, g, b = img[..., 0], img[..., 1], img[..., 2]
    # G + wr(R-G) + wb(B-G): exact on already-gray pixels
    return g + LUMA_R * (r - g) + LUMA_B * (b - g)


def to_grayscale(img: np.ndarray) -> np.ndarray:
    img = check_image(img)
    y = clamp(luma(img.astype(np.float64)))
    return np.repeat(y[..., None], 3, axis=2)


# ---------------------------------------------------------------- file I/O


def from_uint8(arr: np.ndarray) -> np.ndarray:
    return np.asarray(arr, dtype=np.float64) / 255.0


def to_uint8(img: np.ndarray) -> np.ndarray:
    return np.round(clamp(img) * 255.0).astype(np.uint8)


def write_ppm(path: str | Path, img: np.ndarray) -> None:
    data = to_uint8(check_image(img))
    h, w = data.shape[:2]
    with open(path, "wb") as fh:
        fh.write(f"P6\n{w} {h}\n255\n".encode("ascii"))
        fh.write(data.tobytes())


def _ppm_tokens(raw: bytes) -> tuple[list[bytes], int]:
    tokens: list[bytes] = []
    i = 0
    while len(tokens) < 4:
        while i < len(raw) and raw[i : i + 1].isspace():
            i += 1
        if raw[i : i + 1] == b"#":
            while i < len(raw) and raw[i : i + 1] not in (b"\n", b"\r"):
                i += 1
            continue
        j = i
        while j < len(raw) and not raw[j : j + 1].isspace():
            j += 1
        if j == i:
            raise ValueError("truncated PPM header")
        tokens.append(raw[i:j])
        i = j
    # exactly one whitespace byte separates the header from the raster
    return tokens, i + 1


def read_ppm(path: str | Path) -> np.ndarray:
    raw = Path(path).read_bytes()
    tokens, offset = _ppm_tokens(raw)
    if tokens[0] != b"P6":
        raise ValueError(f"{path}: not a binary PPM (P6) file")
    w, h, maxval = (int(t) for t in tokens[1:])
    if maxval != 255:
        raise ValueError(f"{path}: only 8-bit PPM is supported")
    body = raw[offset : offset + w * h * 3]
    if len(body) != w * h * 3:
        raise ValueError(f"{path}: truncated PPM raster")
    return from_uint8(np.frombuffer(body, dtype=np.uint8).reshape(h, w, 3))


def read_image(path: str | Path) -> np.ndarray:
    path = Path(path)
    if path.suffix.lower() in (".ppm", ".pnm"):
        return read_ppm(path)
    with Image.open(path) as im:
        return from_uint8(np.asarray(im.convert("RGB")))


def write_image(path: str | Path, img: np.ndarray) -> None:
    path = Path(path)
    if path.suffix.lower() in (".ppm", ".pnm"):
        write_ppm(path, img)
    else:
        Image.fromarray(to_uint8(check_image(img))).save(path)
