"""The degradation space: nine operators and the skip / shuffle / two-order sampler."""
from __future__ import annotations

import enum
import json
import math
from dataclasses import dataclass, field, replace
from typing import Any

import numpy as np

from . import imgproc
from .jpeg import jpeg_roundtrip
from .rng import RngStream


class OpKind(enum.Enum):
    ScaleJitter = "scale_jitter"
    HorizontalFlip = "horizontal_flip"
    DownSample = "down_sample"
    UpSample = "up_sample"
    ColorJitter = "color_jitter"
    Grayscale = "grayscale"
    AddNoise = "add_noise"
    Fuzzify = "fuzzify"
    JpegCompress = "jpeg_compress"


ALL_OPS: tuple[OpKind, ...] = tuple(OpKind)

CATEGORIES: dict[str, tuple[OpKind, ...]] = {
    "geometric": (OpKind.ScaleJitter, OpKind.HorizontalFlip, OpKind.DownSample, OpKind.UpSample),
    "color": (OpKind.ColorJitter, OpKind.Grayscale),
    "texture": (OpKind.AddNoise, OpKind.Fuzzify, OpKind.JpegCompress),
}

# Smallest side a resampling op may produce.
MIN_SIDE = 8

# (low, high, low_open, high_open)
Range = tuple[float, float, bool, bool]

DEFAULT_RANGES: dict[str, Range] = {
    "scale": (0.5, 2.0, False, False),
    "down": (0.25, 1.0, False, True),
    "up": (1.0, 2.0, True, False),
    "brightness": (0.6, 1.4, False, False),
    "contrast": (0.6, 1.4, False, False),
    "saturation": (0.6, 1.4, False, False),
    "hue": (-0.1, 0.1, False, False),
    "noise_sigma": (0.0, 0.1, False, False),
    "blur_sigma": (0.0, 3.0, False, False),
    "quality": (10, 95, False, False),
}

OP_PARAMS: dict[OpKind, tuple[str, ...]] = {
    OpKind.ScaleJitter: ("scale",),
    OpKind.HorizontalFlip: (),
    OpKind.DownSample: ("down",),
    OpKind.UpSample: ("up",),
    OpKind.ColorJitter: ("brightness", "contrast", "saturation", "hue"),
    OpKind.Grayscale: (),
    OpKind.AddNoise: ("noise_sigma",),
    OpKind.Fuzzify: ("blur_sigma",),
    OpKind.JpegCompress: ("quality",),
}


@dataclass(frozen=True)
class SpaceConfig:
    """Shape of the degradation space.

    ``enable_shuffle=False`` gives the fixed-sequence baseline: every enabled
    op, every time, in canonical order.  ``enable_skip`` and
    ``enable_two_order`` gate ``p_skip`` and ``p_second_order``.
    """

    ops: tuple[OpKind, ...] = ALL_OPS
    p_skip: float = 0.25
    p_second_order: float = 0.5
    enable_skip: bool = True
    enable_shuffle: bool = True
    enable_two_order: bool = True
    ranges: dict[str, Range] = field(default_factory=lambda: dict(DEFAULT_RANGES))

    def __post_init__(self) -> None:
        if not self.ops:
            raise ValueError("degradation space needs at least one op")
        if len(set(self.ops)) != len(self.ops):
            raise ValueError("duplicate ops in space config")
        for p in (self.p_skip, self.p_second_order):
            if not 0.0 <= p <= 1.0:
                raise ValueError(f"probability out of [0, 1]: {p}")

    def with_range(self, name: str, low: float, high: float) -> "SpaceConfig":
        ranges = dict(self.ranges)
        _, _, lo_open, hi_open = ranges[name]
        ranges[name] = (low, high, lo_open, hi_open)
        return replace(self, ranges=ranges)


@dataclass(frozen=True)
class OpInstance:
    kind: OpKind
    params: dict[str, float] = field(default_factory=dict)
    skip: bool = False


@dataclass(frozen=True)
class DegradationPlan:
    orders: tuple[tuple[OpInstance, ...], ...]

    def __post_init__(self) -> None:
        if not 1 <= len(self.orders) <= 2:
            raise ValueError(f"a plan has 1 or 2 orders, got {len(self.orders)}")
        for seq in self.orders:
            kinds = [op.kind for op in seq]
            if not 1 <= len(kinds) <= len(ALL_OPS):
                raise ValueError(f"order length must be in 1..9, got {len(kinds)}")
            if len(set(kinds)) != len(kinds):
                raise ValueError("an op kind appears twice within one order")

    def is_identity(self) -> bool:
        return all(op.skip for seq in self.orders for op in seq)

    def to_dict(self) -> dict[str, Any]:
        return {
            "orders": [
                [{"op": op.kind.value, "params": dict(op.params), "skip": op.skip} for op in seq]
                for seq in self.orders
            ]
        }

    @classmethod
    def from_dict(cls, data: dict[str, Any]) -> "DegradationPlan":
        return cls(
            tuple(
                tuple(
                    OpInstance(OpKind(op["op"]), dict(op["params"]), bool(op["skip"]))
                    for op in seq
                )
                for seq in data["orders"]
            )
        )

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), sort_keys=True, separators=(",", ":"))


# ------------------------------------------------------------------ operators


def _check_param(name: str, value: float, space: SpaceConfig) -> None:
    low, high, lo_open, hi_open = space.ranges[name]
    ok = (value > low if lo_open else value >= low) and (value < high if hi_open else value <= high)
    if not (ok and math.isfinite(value)):
        raise ValueError(f"parameter {name}={value} outside its range {space.ranges[name][:2]}")


def validate_op(op: OpInstance, space: SpaceConfig | None = None) -> None:
    space = space or SpaceConfig()
    expected = OP_PARAMS[op.kind]
    if set(op.params) != set(expected):
        raise ValueError(f"{op.kind.name} expects params {expected}, got {sorted(op.params)}")
    for name in expected:
        _check_param(name, op.params[name], space)
    if op.kind is OpKind.JpegCompress and int(op.params["quality"]) != op.params["quality"]:
        raise ValueError("JPEG quality must be an integer")


def _resize_by(img: np.ndarray, factor: float) -> np.ndarray:
    h, w = img.shape[:2]
    out_h = max(MIN_SIDE, int(round(h * factor)))
    out_w = max(MIN_SIDE, int(round(w * factor)))
    return imgproc.resize_bilinear(img, out_h, out_w)


def scale_jitter(img: np.ndarray, scale: float) -> np.ndarray:
    """Resize by ``scale`` then centre-crop (or edge-pad) back to the original size."""
    h, w = img.shape[:2]
    big = imgproc.resize_bilinear(img, max(1, round(h * scale)), max(1, round(w * scale)))
    bh, bw = big.shape[:2]
    if bh < h or bw < w:
        ph, pw = max(0, h - bh), max(0, w - bw)
        big = np.pad(big, ((ph // 2, ph - ph // 2), (pw // 2, pw - pw // 2), (0, 0)), mode="edge")
        bh, bw = big.shape[:2]
    top, left = (bh - h) // 2, (bw - w) // 2
    return imgproc.crop(big, top, left, h, w)


# RGB <-> YIQ, used for hue rotation
_RGB2YIQ = np.array([[0.299, 0.587, 0.114], [0.596, -0.274, -0.322], [0.211, -0.523, 0.312]])
_YIQ2RGB = np.linalg.inv(_RGB2YIQ)


def color_jitter(
    img: np.ndarray, brightness: float, contrast: float, saturation: float, hue: float
) -> np.ndarray:
    """Brightness, contrast, saturation and hue (in turns), applied in that order."""
    out = imgproc.clamp(img * brightness)
    mean = imgproc.luma(out).mean()
    out = imgproc.clamp(out + (contrast - 1.0) * (out - mean))
    gray = imgproc.luma(out)[..., None]
    out = imgproc.clamp(out + (saturation - 1.0) * (out - gray))
    if hue != 0.0:
        theta = 2.0 * math.pi * hue
        c, s = math.cos(theta), math.sin(theta)
        rot = np.array([[1.0, 0.0, 0.0], [0.0, c, -s], [0.0, s, c]])
        m = _YIQ2RGB @ rot @ _RGB2YIQ
        out = imgproc.clamp(out @ m.T)
    return out


def add_noise(img: np.ndarray, sigma: float, rng: RngStream) -> np.ndarray:
    if sigma == 0:
        return img.astype(np.float64, copy=True)
    noise = rng.generator().standard_normal(img.shape)
    return imgproc.clamp(img + sigma * noise)


def apply_op(
    op: OpInstance, img: np.ndarray, rng: RngStream, space: SpaceConfig | None = None
) -> np.ndarray:
    """Apply one operator; ``skip`` returns an exact copy."""
    img = imgproc.check_image(img)
    validate_op(op, space)
    if op.skip:
        return img.astype(np.float64, copy=True)
    p = op.params
    k = op.kind
    if k is OpKind.ScaleJitter:
        return scale_jitter(img, p["scale"])
    if k is OpKind.HorizontalFlip:
        return imgproc.flip_horizontal(img)
    if k is OpKind.DownSample:
        return _resize_by(img, p["down"])
    if k is OpKind.UpSample:
        return _resize_by(img, p["up"])
    if k is OpKind.ColorJitter:
        return color_jitter(img, p["brightness"], p["contrast"], p["saturation"], p["hue"])
    if k is OpKind.Grayscale:
        return imgproc.to_grayscale(img)
    if k is OpKind.AddNoise:
        return add_noise(img, p["noise_sigma"], rng)
    if k is OpKind.Fuzzify:
        return imgproc.gaussian_blur(img, p["blur_sigma"])
    if k is OpKind.JpegCompress:
        return jpeg_roundtrip(img, int(p["quality"]))
    raise AssertionError(k)


# ------------------------------------------------------------------ sampling


def _draw_param(gen: np.random.Generator, name: str, space: SpaceConfig) -> float:
    low, high, lo_open, hi_open = space.ranges[name]
    if name == "quality":
        return float(gen.integers(int(low), int(high), endpoint=True))
    while True:
        v = float(gen.uniform(low, high))
        if (v > low or not lo_open) and (v < high or not hi_open):
            return v


def _sample_order(gen: np.random.Generator, space: SpaceConfig) -> tuple[OpInstance, ...]:
    ops = space.ops
    if space.enable_shuffle:
        size = int(gen.integers(1, len(ops), endpoint=True))
        chosen = gen.choice(len(ops), size=size, replace=False)
        # choice without replacement is already a uniform random permutation of a uniform subset
        kinds = [ops[i] for i in chosen]
    else:
        kinds = list(ops)
    seq = []
    for kind in kinds:
        skip = bool(space.enable_skip and gen.random() < space.p_skip)
        params = {name: _draw_param(gen, name, space) for name in OP_PARAMS[kind]}
        seq.append(OpInstance(kind, params, skip))
    return tuple(seq)


def sample_plan(rng: RngStream, space: SpaceConfig | None = None) -> DegradationPlan:
    """Draw one plan; the result depends only on ``rng`` and ``space``."""
    space = space or SpaceConfig()
    gen = rng.generator()
    two = space.enable_two_order and gen.random() < space.p_second_order
    orders = [_sample_order(gen, space)]
    if two:
        orders.append(_sample_order(gen, space))
    return DegradationPlan(tuple(orders))


def apply_plan(
    plan: DegradationPlan, img: np.ndarray, rng: RngStream, space: SpaceConfig | None = None
) -> np.ndarray:
    out = imgproc.check_image(img).astype(np.float64, copy=True)
    for o, seq in enumerate(plan.orders):
        for i, op in enumerate(seq):
            out = apply_op(op, out, rng.child("order", o, "op", i), space)
    return imgproc.clamp(out)


# ------------------------------------------------------------------ counting


def count_space(num_ops: int, max_order: int) -> int:
    """``max_order * sum_i C(n, i) * i!``: ordered non-empty distinct subsets times the order factor."""
    if num_ops < 1:
        raise ValueError("num_ops must be >= 1")
    if max_order not in (1, 2):
        raise ValueError("max_order must be 1 or 2")
    total = max_order * sum(math.perm(num_ops, i) for i in range(1, num_ops + 1))
    if total >= 2**63:
        raise OverflowError(f"composition count for {num_ops} ops exceeds 64 bits")
    return total


PUBLISHED_APPROX = "2x10^7"
