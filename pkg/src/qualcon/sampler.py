"""Quality-aware pretext batches.

Each source image ``n`` is degraded into ``K`` views.  From every view one
query patch and one key patch are cut at different locations.  For a query
``(n, k)`` the key of the same view is the positive, keys of the other views
of the same image are degradation negatives, and keys of any other image are
content negatives.
"""
from __future__ import annotations

import enum
import hashlib
import math
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass

import numpy as np

from . import imgproc
from .degradation import DegradationPlan, SpaceConfig, apply_plan, sample_plan
from .rng import RngStream

MIN_AREA_RATIO = 0.5
ASPECT_RANGE = (3.0 / 4.0, 4.0 / 3.0)
FLIP_PROB = 0.5
MIN_VIEW_SIDE = 8


class Relation(enum.Enum):
    positive = "positive"
    degradation_negative = "degradation_negative"
    content_negative = "content_negative"


def relation(query_tag: tuple[int, int], key_tag: tuple[int, int]) -> Relation:
    """Classify a (query, key) pair from their ``(image_id, view)`` tags."""
    (n, k), (n2, k2) = query_tag, key_tag
    if n != n2:
        return Relation.content_negative
    if k != k2:
        return Relation.degradation_negative
    return Relation.positive


@dataclass
class ViewSet:
    image_id: int
    views: list[np.ndarray]
    plans: list[DegradationPlan | None]


@dataclass(frozen=True)
class CropBox:
    top: int
    left: int
    height: int
    width: int
    flipped: bool


def make_views(
    img: np.ndarray,
    n: int,
    K: int,
    rng: RngStream,
    space: SpaceConfig | None = None,
    identity: bool = False,
) -> ViewSet:
    """``K`` independently degraded views of one image; ``identity`` skips degradation."""
    if K < 1:
        raise ValueError("K must be >= 1")
    img = imgproc.check_image(img)
    views, plans = [], []
    for k in range(K):
        if identity:
            views.append(img.astype(np.float64, copy=True))
            plans.append(None)
            continue
        vrng = rng.child("view", k)
        plan = sample_plan(vrng.child("plan"), space)
        views.append(apply_plan(plan, img, vrng.child("apply"), space))
        plans.append(plan)
    return ViewSet(n, views, plans)


def sample_crop_box(view_hw: tuple[int, int], gen: np.random.Generator) -> CropBox:
    """Area ratio ~ U[0.5, 1], aspect ratio ~ U[3/4, 4/3]; sides rounded up so the ratio bound survives."""
    H, W = view_hw
    area = H * W
    for _ in range(10):
        ratio = gen.uniform(MIN_AREA_RATIO, 1.0)
        aspect = gen.uniform(*ASPECT_RANGE)
        w = math.ceil(math.sqrt(ratio * area * aspect))
        h = math.ceil(math.sqrt(ratio * area / aspect))
        if h <= H and w <= W:
            break
    else:
        h, w = H, W
    top = int(gen.integers(0, H - h, endpoint=True))
    left = int(gen.integers(0, W - w, endpoint=True))
    return CropBox(top, left, h, w, bool(gen.random() < FLIP_PROB))


def _cut(view: np.ndarray, box: CropBox, out_size: int) -> np.ndarray:
    patch = imgproc.crop(view, box.top, box.left, box.height, box.width)
    patch = imgproc.resize_bilinear(patch, out_size, out_size)
    return imgproc.flip_horizontal(patch) if box.flipped else patch


def make_pair(
    view: np.ndarray, rng: RngStream, out_size: int
) -> tuple[np.ndarray, np.ndarray, CropBox, CropBox]:
    """Query and key patches from one view, at different locations when the geometry allows it."""
    view = imgproc.check_image(view)
    H, W = view.shape[:2]
    if H < MIN_VIEW_SIDE or W < MIN_VIEW_SIDE:
        raise ValueError(f"view {H}x{W} is smaller than the minimum croppable {MIN_VIEW_SIDE}px")
    gen = rng.generator()
    qbox = sample_crop_box((H, W), gen)
    kbox = sample_crop_box((H, W), gen)
    for _ in range(10):
        if (kbox.top, kbox.left) != (qbox.top, qbox.left):
            break
        kbox = sample_crop_box((H, W), gen)
    return _cut(view, qbox, out_size), _cut(view, kbox, out_size), qbox, kbox


@dataclass
class PatchBatch:
    """``B * K`` query/key patches, row ``b * K + k`` belonging to image ``b`` view ``k``."""

    queries: np.ndarray  # (B*K, S, S, 3)
    keys: np.ndarray
    image_ids: np.ndarray  # (B*K,)
    view_ids: np.ndarray
    query_boxes: list[CropBox]
    key_boxes: list[CropBox]
    K: int

    @property
    def B(self) -> int:
        return len(self.image_ids) // self.K

    def tags(self) -> list[tuple[int, int]]:
        return list(zip(self.image_ids.tolist(), self.view_ids.tolist()))

    def relation_counts(self) -> dict[Relation, int]:
        tags = self.tags()
        counts = {r: 0 for r in Relation}
        for q in tags:
            for k in tags:
                counts[relation(q, k)] += 1
        return counts

    def digest(self) -> str:
        h = hashlib.sha256()
        h.update(np.ascontiguousarray(self.queries).tobytes())
        h.update(np.ascontiguousarray(self.keys).tobytes())
        h.update(self.image_ids.astype(np.int64).tobytes())
        return h.hexdigest()


def _image_pairs(args):
    n, img, K, rng, out_size, space = args
    vs = make_views(img, n, K, rng, space)
    out = []
    for k, view in enumerate(vs.views):
        out.append(make_pair(view, rng.child("view", k, "pair"), out_size))
    return out


def assemble_batch(
    images: list[tuple[int, np.ndarray]],
    K: int,
    rng: RngStream,
    out_size: int = 64,
    space: SpaceConfig | None = None,
    workers: int = 1,
) -> PatchBatch:
    """Degrade, crop and tag a batch.  Each image draws from ``rng/image/<id>``."""
    if not images:
        raise ValueError("assemble_batch needs at least one image")
    if out_size < 16:
        raise ValueError("out_size must be >= 16")
    jobs = [(n, img, K, rng.child("image", n), out_size, space) for n, img in images]
    if workers > 1:
        with ProcessPoolExecutor(max_workers=workers) as pool:
            results = list(pool.map(_image_pairs, jobs))
    else:
        results = [_image_pairs(j) for j in jobs]
    queries, keys, qboxes, kboxes, ids, vids = [], [], [], [], [], []
    for (n, _), pairs in zip(images, results):
        for k, (q, key, qb, kb) in enumerate(pairs):
            queries.append(q)
            keys.append(key)
            qboxes.append(qb)
            kboxes.append(kb)
            ids.append(n)
            vids.append(k)
    return PatchBatch(
        np.stack(queries),
        np.stack(keys),
        np.asarray(ids, dtype=np.int64),
        np.asarray(vids, dtype=np.int64),
        qboxes,
        kboxes,
        K,
    )
