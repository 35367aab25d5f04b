"""Synthetic severity-labelled benchmark, corpora on disk, and manifest ingest.

Manifests are JSON-lines files, one record per image::

    {"id": 7, "path": "img/00007.ppm", "score": 81.4, "split": "train", ...}

``path`` is relative to the manifest's directory.  Extra keys are kept as
metadata.
"""
from __future__ import annotations

import json
import warnings
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any

import numpy as np

from . import imgproc
from .jpeg import jpeg_roundtrip
from .rng import RngStream

FAMILIES = ("noise", "blur", "jpeg", "resample")


# ---------------------------------------------------------------- base images


def value_noise(gen: np.random.Generator, size: int, cells: int) -> np.ndarray:
    grid = gen.random((cells + 1, cells + 1, 3))
    return imgproc.resize_bilinear(grid, size, size)


def base_image(rng: RngStream, size: int = 68) -> np.ndarray:
    """Multi-scale colour value noise with a few flat shapes on top."""
    gen = rng.generator()
    img = np.zeros((size, size, 3))
    total = 0.0
    for octave in range(4):
        cells = 2 ** (octave + 1)
        amp = 0.5**octave
        img += amp * value_noise(gen, size, cells)
        total += amp
    img /= total
    # stretch contrast per image
    lo, hi = img.min(), img.max()
    img = (img - lo) / max(hi - lo, 1e-6)
    yy, xx = np.mgrid[0:size, 0:size]
    for _ in range(int(gen.integers(2, 6))):
        color = gen.random(3)
        cy, cx = gen.uniform(0, size, 2)
        r = gen.uniform(size * 0.08, size * 0.3)
        if gen.random() < 0.5:
            m = (yy - cy) ** 2 + (xx - cx) ** 2 < r * r
        else:
            m = (np.abs(yy - cy) < r) & (np.abs(xx - cx) < r * gen.uniform(0.4, 1.0))
        img[m] = color
    return imgproc.clamp(img)


def make_corpus(n: int, seed: int, size: int = 68) -> list[np.ndarray]:
    root = RngStream(seed).child("corpus")
    return [base_image(root.child(i), size) for i in range(n)]


# ---------------------------------------------------------------- benchmark


@dataclass(frozen=True)
class SyntheticBenchSpec:
    seed: int = 7
    size: int = 68
    s_max: float = 100.0
    step: float = 10.0  # score drop per severity level
    jitter: float = 1.0
    families: tuple[str, ...] = FAMILIES


def severity_ladder(family: str, levels: int) -> list[float]:
    """Distortion parameters in strictly increasing severity."""
    if levels < 2:
        raise ValueError("need at least 2 severity levels")
    t = np.linspace(0.0, 1.0, levels)
    if family == "noise":
        return list(0.01 + 0.11 * t)
    if family == "blur":
        return list(0.5 + 2.5 * t)
    if family == "jpeg":
        # quality falls from 60 to 4; integer rounding must keep the ladder strict
        q = np.round(np.geomspace(60, 4, levels)).astype(int)
        for i in range(1, levels):
            q[i] = min(q[i], q[i - 1] - 1)
        if q[-1] < 1:
            raise ValueError("too many JPEG levels for a strict ladder")
        return [float(v) for v in q]
    if family == "resample":
        return list(0.8 - 0.6 * t)
    raise ValueError(f"unknown distortion family {family!r}")


def distort(img: np.ndarray, family: str, value: float, rng: RngStream) -> np.ndarray:
    if family == "noise":
        return imgproc.clamp(img + value * rng.generator().standard_normal(img.shape))
    if family == "blur":
        return imgproc.gaussian_blur(img, value)
    if family == "jpeg":
        return jpeg_roundtrip(img, int(value))
    if family == "resample":
        h, w = img.shape[:2]
        small = imgproc.resize_bilinear(img, max(1, round(h * value)), max(1, round(w * value)))
        return imgproc.resize_bilinear(small, h, w)
    raise ValueError(f"unknown distortion family {family!r}")


@dataclass
class ScoredItem:
    id: int
    score: float
    image: np.ndarray | None = None
    path: str | None = None
    split: str | None = None
    meta: dict[str, Any] = field(default_factory=dict)


@dataclass
class ScoredSet:
    items: list[ScoredItem]
    root: Path | None = None

    def __len__(self) -> int:
        return len(self.items)

    @property
    def scores(self) -> np.ndarray:
        return np.array([it.score for it in self.items], dtype=np.float64)

    def load(self, item: ScoredItem) -> np.ndarray:
        if item.image is not None:
            return item.image
        path = Path(item.path)
        if self.root is not None and not path.is_absolute():
            path = self.root / path
        return imgproc.read_image(path)

    def images(self) -> list[np.ndarray]:
        return [self.load(it) for it in self.items]


def gen_synthetic_bench(
    spec: SyntheticBenchSpec = SyntheticBenchSpec(), n_base: int = 16, levels: int = 5
) -> ScoredSet:
    """``n_base * len(families) * levels`` items; score = s_max - step * level + U(-jitter, jitter)."""
    if n_base < 1:
        raise ValueError("n_base must be >= 1")
    root = RngStream(spec.seed).child("bench")
    items = []
    for b in range(n_base):
        clean = base_image(root.child("base", b), spec.size)
        for family in spec.families:
            for level, value in enumerate(severity_ladder(family, levels)):
                irng = root.child("item", b, family, level)
                img = imgproc.from_uint8(imgproc.to_uint8(distort(clean, family, value, irng.child("distort"))))
                jit = float(irng.child("jitter").generator().uniform(-spec.jitter, spec.jitter))
                items.append(
                    ScoredItem(
                        id=len(items),
                        score=spec.s_max - spec.step * level + jit,
                        image=img,
                        meta={"base": b, "family": family, "level": level, "param": value},
                    )
                )
    return ScoredSet(items)


def split_indices(n: int, seed: int, train_frac: float = 0.8) -> tuple[np.ndarray, np.ndarray]:
    perm = RngStream(seed).child("split").generator().permutation(n)
    cut = int(round(train_frac * n))
    return np.sort(perm[:cut]), np.sort(perm[cut:])


# ---------------------------------------------------------------- disk I/O


def export_set(scored: ScoredSet, out_dir: str | Path, manifest: str = "manifest.jsonl") -> Path:
    """Write images as PPM plus a manifest; returns the manifest path."""
    out_dir = Path(out_dir)
    (out_dir / "img").mkdir(parents=True, exist_ok=True)
    lines = []
    for it in scored.items:
        rel = f"img/{it.id:06d}.ppm"
        imgproc.write_ppm(out_dir / rel, scored.load(it))
        rec = {"id": it.id, "path": rel, "score": it.score}
        if it.split is not None:
            rec["split"] = it.split
        rec.update(it.meta)
        lines.append(json.dumps(rec, sort_keys=True))
    path = out_dir / manifest
    path.write_text("".join(line + "\n" for line in lines))
    return path


class IngestError(ValueError):
    def __init__(self, problems: list[str]):
        self.problems = problems
        super().__init__("manifest ingest failed:\n" + "\n".join(f"  {p}" for p in problems))


def ingest_external(manifest: str | Path, check_images: bool = True) -> ScoredSet:
    """Read a JSON-lines manifest.  Every bad row is reported, not just the first."""
    manifest = Path(manifest)
    root = manifest.parent
    items, problems = [], []
    for lineno, line in enumerate(manifest.read_text().splitlines(), start=1):
        if not line.strip():
            continue
        try:
            rec = json.loads(line)
        except json.JSONDecodeError as exc:
            problems.append(f"row {lineno}: unparseable record ({exc.msg})")
            continue
        try:
            score = float(rec["score"])
            if not np.isfinite(score):
                raise ValueError
        except (KeyError, TypeError, ValueError):
            problems.append(f"row {lineno}: missing or unparseable score {rec.get('score')!r}")
            continue
        path = rec.get("path")
        if not path:
            problems.append(f"row {lineno}: missing path")
            continue
        full = Path(path) if Path(path).is_absolute() else root / path
        if check_images:
            try:
                imgproc.read_image(full)
            except (OSError, ValueError) as exc:
                problems.append(f"row {lineno}: unreadable image {path!r} ({exc})")
                continue
        meta = {k: v for k, v in rec.items() if k not in ("id", "path", "score", "split")}
        items.append(
            ScoredItem(
                id=int(rec.get("id", len(items))),
                score=score,
                path=str(path),
                split=rec.get("split"),
                meta=meta,
            )
        )
    if problems:
        raise IngestError(problems)
    if not items:
        warnings.warn(f"{manifest}: manifest is empty", stacklevel=2)
    return ScoredSet(items, root=root)
