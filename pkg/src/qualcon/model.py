"""A small patch-embedding encoder with hand-written gradients.

Architecture (per image)::

    tokens  = non-overlapping P x P x 3 patches, shifted/scaled to roughly [-2, 2]
    h0      = tokens @ W_embed + b_embed            (T, d_h)
    h1      = relu(h0 @ W_fc1 + b_fc1)
    h2      = relu(h1 @ W_fc2 + b_fc2)
    pooled  = mean over tokens of h2                 (d_h,)   <- backbone feature
    g       = relu(pooled @ W_head1 + b_head1)
    out     = g @ W_head2 + b_head2                  (d_f,)   <- projection output

All parameters live in one flat vector; ``Encoder.layout`` maps layer names to
slices of it.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, asdict
from typing import Iterable

import numpy as np

from .rng import RngStream

INPUT_SHIFT = 0.5
INPUT_SCALE = 4.0


class DegenerateFeatureError(ArithmeticError):
    """A feature vector has zero norm and cannot be L2-normalised."""


@dataclass(frozen=True)
class EncoderConfig:
    input_size: int = 64
    patch: int = 8
    d_h: int = 128
    d_f: int = 64

    def __post_init__(self) -> None:
        if self.input_size % self.patch:
            raise ValueError("input_size must be a multiple of the patch size")
        if min(self.input_size, self.patch, self.d_h, self.d_f) < 1:
            raise ValueError("encoder dimensions must be positive")

    @property
    def tokens(self) -> int:
        return (self.input_size // self.patch) ** 2

    @property
    def token_dim(self) -> int:
        return self.patch * self.patch * 3

    def to_dict(self) -> dict:
        return asdict(self)


HEAD_LAYERS = ("head1", "head2")


class Encoder:
    def __init__(self, cfg: EncoderConfig):
        self.cfg = cfg
        d_in, d_h, d_f = cfg.token_dim, cfg.d_h, cfg.d_f
        self.shapes: list[tuple[str, tuple[int, ...]]] = [
            ("embed.W", (d_in, d_h)),
            ("embed.b", (d_h,)),
            ("fc1.W", (d_h, d_h)),
            ("fc1.b", (d_h,)),
            ("fc2.W", (d_h, d_h)),
            ("fc2.b", (d_h,)),
            ("head1.W", (d_h, d_h)),
            ("head1.b", (d_h,)),
            ("head2.W", (d_h, d_f)),
            ("head2.b", (d_f,)),
        ]
        self.layout: dict[str, slice] = {}
        offset = 0
        for name, shape in self.shapes:
            size = math.prod(shape)
            self.layout[name] = slice(offset, offset + size)
            offset += size
        self.size = offset

    # ------------------------------------------------------------ parameters

    def unpack(self, params: np.ndarray) -> dict[str, np.ndarray]:
        if params.shape != (self.size,):
            raise ValueError(f"expected {self.size} parameters, got shape {params.shape}")
        return {name: params[self.layout[name]].reshape(shape) for name, shape in self.shapes}

    def layer_slice(self, layer: str) -> slice:
        """Contiguous slice covering ``layer.W`` and ``layer.b``."""
        return slice(self.layout[f"{layer}.W"].start, self.layout[f"{layer}.b"].stop)

    def init(self, rng: RngStream) -> np.ndarray:
        """Fan-in scaled uniform weights (He bound ``sqrt(6 / fan_in)``), zero biases."""
        gen = rng.generator()
        params = np.zeros(self.size)
        for name, shape in self.shapes:
            if name.endswith(".W"):
                bound = math.sqrt(6.0 / shape[0])
                params[self.layout[name]] = gen.uniform(-bound, bound, size=math.prod(shape))
        return params

    @staticmethod
    def check_finite(params: np.ndarray) -> np.ndarray:
        if not np.all(np.isfinite(params)):
            raise ValueError("encoder parameters contain NaN or Inf")
        return params

    # ------------------------------------------------------------ forward

    def tokenize(self, patches: np.ndarray) -> np.ndarray:
        """``(N, S, S, 3)`` images -> ``(N, T, P*P*3)`` normalised tokens."""
        patches = np.asarray(patches)
        if patches.ndim == 3:
            patches = patches[None]
        S, P = self.cfg.input_size, self.cfg.patch
        if patches.shape[1:] != (S, S, 3):
            raise ValueError(f"encoder expects {S}x{S}x3 inputs, got {patches.shape[1:]}")
        n, g = patches.shape[0], S // P
        t = patches.reshape(n, g, P, g, P, 3).transpose(0, 1, 3, 2, 4, 5)
        t = t.reshape(n, g * g, P * P * 3)
        return (t - INPUT_SHIFT) * INPUT_SCALE

    def forward(self, params: np.ndarray, patches: np.ndarray, head: bool = True):
        """Return ``(output, cache)``; output is ``(N, d_f)`` or ``(N, d_h)`` pooled features when ``head=False``."""
        p = self.unpack(params)
        x = self.tokenize(patches)
        h0 = x @ p["embed.W"] + p["embed.b"]
        a1 = h0 @ p["fc1.W"] + p["fc1.b"]
        h1 = np.maximum(a1, 0.0)
        a2 = h1 @ p["fc2.W"] + p["fc2.b"]
        h2 = np.maximum(a2, 0.0)
        pooled = h2.mean(axis=1)
        cache = {"x": x, "h0": h0, "a1": a1, "h1": h1, "a2": a2, "h2": h2, "pooled": pooled}
        if not head:
            return pooled, cache
        z = pooled @ p["head1.W"] + p["head1.b"]
        g = np.maximum(z, 0.0)
        out = g @ p["head2.W"] + p["head2.b"]
        cache.update(z=z, g=g)
        return out, cache

    def features(self, params: np.ndarray, patches: np.ndarray) -> np.ndarray:
        return self.forward(params, patches)[0]

    def backbone(self, params: np.ndarray, patches: np.ndarray) -> np.ndarray:
        return self.forward(params, patches, head=False)[0]

    # ------------------------------------------------------------ backward

    def backward(
        self,
        params: np.ndarray,
        cache: dict,
        grad_out: np.ndarray,
        head: bool = True,
        frozen: Iterable[str] = (),
    ) -> np.ndarray:
        """Exact gradient of ``sum(grad_out * output)`` w.r.t. the flat parameters.

        ``frozen`` layer names (``embed``, ``fc1``, ...) get exactly zero gradient.
        """
        p = self.unpack(params)
        grad = np.zeros(self.size)
        gv = self.unpack(grad)  # views into grad
        if head:
            g, z = cache["g"], cache["z"]
            gv["head2.W"][...] = g.T @ grad_out
            gv["head2.b"][...] = grad_out.sum(axis=0)
            dz = (grad_out @ p["head2.W"].T) * (z > 0)
            gv["head1.W"][...] = cache["pooled"].T @ dz
            gv["head1.b"][...] = dz.sum(axis=0)
            dpooled = dz @ p["head1.W"].T
        else:
            dpooled = grad_out
        T = cache["h2"].shape[1]
        dh2 = np.broadcast_to(dpooled[:, None, :] / T, cache["h2"].shape)
        da2 = dh2 * (cache["a2"] > 0)
        h1 = cache["h1"]
        gv["fc2.W"][...] = np.einsum("nti,ntj->ij", h1, da2)
        gv["fc2.b"][...] = da2.sum(axis=(0, 1))
        da1 = (da2 @ p["fc2.W"].T) * (cache["a1"] > 0)
        gv["fc1.W"][...] = np.einsum("nti,ntj->ij", cache["h0"], da1)
        gv["fc1.b"][...] = da1.sum(axis=(0, 1))
        dh0 = da1 @ p["fc1.W"].T
        gv["embed.W"][...] = np.einsum("nti,ntj->ij", cache["x"], dh0)
        gv["embed.b"][...] = dh0.sum(axis=(0, 1))
        for layer in frozen:
            grad[self.layer_slice(layer)] = 0.0
        return grad


# ---------------------------------------------------------------- features


def normalize(f: np.ndarray) -> np.ndarray:
    """Row-wise L2 normalisation; raises on a zero row."""
    f = np.asarray(f, dtype=np.float64)
    norm = np.linalg.norm(f, axis=-1, keepdims=True)
    if np.any(norm == 0) or not np.all(np.isfinite(norm)):
        raise DegenerateFeatureError("cannot normalise a zero or non-finite feature vector")
    return f / norm


def normalize_backward(f_raw: np.ndarray, grad_unit: np.ndarray) -> np.ndarray:
    """Pull a gradient w.r.t. ``normalize(f_raw)`` back to ``f_raw``."""
    norm = np.linalg.norm(f_raw, axis=-1, keepdims=True)
    u = f_raw / norm
    return (grad_unit - u * np.sum(u * grad_unit, axis=-1, keepdims=True)) / norm


# ---------------------------------------------------------------- momentum


@dataclass
class EncoderState:
    query: np.ndarray
    key: np.ndarray
    momentum: float = 0.999


def momentum_update(state: EncoderState) -> EncoderState:
    m = state.momentum
    if not 0.0 <= m <= 1.0:
        raise ValueError(f"momentum must be in [0, 1], got {m}")
    if m == 1.0:
        key = state.key.copy()
    elif m == 0.0:
        key = state.query.copy()
    else:
        # lerp form: a key that already equals the query stays bit-identical
        key = state.key + (1.0 - m) * (state.query - state.key)
    return EncoderState(state.query, key, m)
