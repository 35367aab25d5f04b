"""Pretraining loop, optimisers, linear probe and fine-tuning."""
from __future__ import annotations

import json
import logging
import math
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path
from typing import Any, Callable

import numpy as np

from . import imgproc
from .bench import ScoredSet, split_indices
from .degradation import OpKind, SpaceConfig
from .loss import LossConfig, MomentumQueue, qc_loss
from .metrics import UndefinedMetricError, five_crops, plcc, srcc
from .model import Encoder, EncoderConfig, EncoderState, momentum_update, normalize, normalize_backward
from .rng import RngStream
from .sampler import assemble_batch

log = logging.getLogger(__name__)

CHECKPOINT_VERSION = 1


class NumericalFailure(ArithmeticError):
    pass


@dataclass
class TrainConfig:
    epochs: int = 30
    batch_size: int = 16
    views: int = 4
    lr: float = 0.03 * 16 / 256
    lr_decay_epochs: tuple[int, ...] = (18, 24)
    lr_decay_factor: float = 0.1
    weight_decay: float = 1e-4
    sgd_momentum: float = 0.9
    ema_momentum: float = 0.99  # 0.999 barely moves the key encoder in a 480-step run
    seed: int = 0
    queue_size: int = 4096
    out_size: int = 64
    tau: float = 0.2
    beta: float = 0.4
    loss_form: str = "ratio"
    use_intra_negatives: bool = True
    use_inter_negatives: bool = True
    enable_skip: bool = True
    enable_shuffle: bool = True
    enable_two_order: bool = True
    patch: int = 8
    d_h: int = 128
    d_f: int = 64
    workers: int = 1

    def __post_init__(self) -> None:
        self.lr_decay_epochs = tuple(self.lr_decay_epochs)
        if self.epochs < 0 or self.batch_size < 1 or self.views < 1:
            raise ValueError("epochs, batch_size and views must be positive")
        if self.lr < 0 or self.weight_decay < 0:
            raise ValueError("learning rate and weight decay must be non-negative")
        d = self.lr_decay_epochs
        if any(b <= a for a, b in zip(d, d[1:])):
            raise ValueError("lr decay epochs must be strictly increasing")
        if d and d[-1] >= max(self.epochs, 1) and self.epochs > 0:
            raise ValueError("lr decay epochs must be < epochs")
        if self.use_intra_negatives and self.views < 2:
            raise ValueError("degradation negatives need views >= 2")

    @property
    def encoder_config(self) -> EncoderConfig:
        return EncoderConfig(self.out_size, self.patch, self.d_h, self.d_f)

    @property
    def loss_config(self) -> LossConfig:
        return LossConfig(self.tau, self.beta, self.use_intra_negatives, self.use_inter_negatives, self.loss_form)

    @property
    def space_config(self) -> SpaceConfig:
        return SpaceConfig(
            enable_skip=self.enable_skip,
            enable_shuffle=self.enable_shuffle,
            enable_two_order=self.enable_two_order,
        )

    def to_dict(self) -> dict[str, Any]:
        d = asdict(self)
        d["lr_decay_epochs"] = list(self.lr_decay_epochs)
        return d

    @classmethod
    def from_dict(cls, data: dict[str, Any]) -> "TrainConfig":
        known = {f for f in cls.__dataclass_fields__}
        unknown = set(data) - known
        if unknown:
            raise ValueError(f"unknown train config keys: {sorted(unknown)}")
        return cls(**data)


# ---------------------------------------------------------------- optimisers


def sgd_step(params, grads, velocity, lr, wd, momentum):
    """SGD with momentum and coupled L2 decay: ``v = mu v + g + wd p``; ``p -= lr v``."""
    if not (np.all(np.isfinite(grads)) and np.all(np.isfinite(params))):
        raise NumericalFailure("non-finite parameters or gradients in SGD step")
    velocity = momentum * velocity + grads + wd * params
    return params - lr * velocity, velocity


@dataclass
class AdamState:
    m: np.ndarray
    v: np.ndarray
    t: int = 0


def adamw_step(params, grads, state: AdamState, lr, wd, b1=0.9, b2=0.999, eps=1e-8):
    """Adam with decoupled weight decay."""
    if not np.all(np.isfinite(grads)):
        raise NumericalFailure("non-finite gradients in AdamW step")
    t = state.t + 1
    m = b1 * state.m + (1 - b1) * grads
    v = b2 * state.v + (1 - b2) * grads * grads
    mhat = m / (1 - b1**t)
    vhat = v / (1 - b2**t)
    params = params - lr * wd * params - lr * mhat / (np.sqrt(vhat) + eps)
    return params, AdamState(m, v, t)


def step_lr(cfg: TrainConfig, epoch: int) -> float:
    drops = sum(1 for e in cfg.lr_decay_epochs if epoch >= e)
    return cfg.lr * cfg.lr_decay_factor**drops


def cosine_lr(base: float, step: int, total: int) -> float:
    if total <= 0:
        return base
    return 0.5 * base * (1.0 + math.cos(math.pi * min(step, total) / total))


# ---------------------------------------------------------------- pretraining


@dataclass
class PretrainState:
    cfg: TrainConfig
    encoder: Encoder
    theta_q: np.ndarray
    theta_k: np.ndarray
    velocity: np.ndarray
    queue: MomentumQueue
    epoch: int = 0  # epochs completed
    steps: int = 0  # optimiser steps completed, survives a resume
    trace: list[dict[str, Any]] = field(default_factory=list)

    @classmethod
    def fresh(cls, cfg: TrainConfig) -> "PretrainState":
        enc = Encoder(cfg.encoder_config)
        root = RngStream(cfg.seed)
        theta = enc.init(root.child("init"))
        queue = MomentumQueue(cfg.queue_size, cfg.d_f)
        # MoCo-style start: random unit keys owned by no image
        noise = root.child("queue-init").generator().standard_normal((cfg.queue_size, cfg.d_f))
        queue.push(normalize(noise), np.full(cfg.queue_size, -1))
        return cls(cfg, enc, theta, theta.copy(), np.zeros_like(theta), queue)

    # -------------------------------------------------------------- checkpoint

    def save(self, path: str | Path) -> Path:
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        meta = {
            "version": CHECKPOINT_VERSION,
            "config": self.cfg.to_dict(),
            "layout": {k: [s.start, s.stop] for k, s in self.encoder.layout.items()},
            "epoch": self.epoch,
            "steps": self.steps,
            "rng": {"seed": self.cfg.seed, "next_epoch": self.epoch},
        }
        with open(path, "wb") as fh:
            np.savez(
                fh,
                meta=np.array(json.dumps(meta, sort_keys=True)),
                theta_q=self.theta_q,
                theta_k=self.theta_k,
                velocity=self.velocity,
                **self.queue.state(),
            )
        return path

    @classmethod
    def load(cls, path: str | Path) -> "PretrainState":
        with np.load(path, allow_pickle=False) as z:
            meta = json.loads(str(z["meta"]))
            if meta["version"] != CHECKPOINT_VERSION:
                raise ValueError(f"unsupported checkpoint version {meta['version']}")
            cfg = TrainConfig.from_dict(meta["config"])
            enc = Encoder(cfg.encoder_config)
            theta_q = Encoder.check_finite(z["theta_q"].copy())
            theta_k = Encoder.check_finite(z["theta_k"].copy())
            queue = MomentumQueue.from_state(cfg.queue_size, cfg.d_f, dict(z))
            velocity = z["velocity"].copy()
            state = cls(cfg, enc, theta_q, theta_k, velocity, queue, int(meta["epoch"]), int(meta.get("steps", 0)))
        if theta_q.shape != (enc.size,):
            raise ValueError("checkpoint parameter count does not match its config")
        return state


def train_step(state: PretrainState, batch) -> dict[str, Any]:
    cfg, enc = state.cfg, state.encoder
    B, K = batch.B, batch.K
    fq_raw, cache = enc.forward(state.theta_q, batch.queries)
    fk_raw = enc.features(state.theta_k, batch.keys)
    fq, fk = normalize(fq_raw), normalize(fk_raw)
    ids = batch.image_ids.reshape(B, K)[:, 0]
    qkeys, qids = state.queue.snapshot() if cfg.use_inter_negatives else (None, None)
    res = qc_loss(fq.reshape(B, K, -1), fk.reshape(B, K, -1), ids, qkeys, qids, cfg.loss_config)
    if not math.isfinite(res.loss):
        raise NumericalFailure(f"non-finite loss at epoch {state.epoch}")
    g_raw = normalize_backward(fq_raw, res.grad_q.reshape(B * K, -1))
    grads = enc.backward(state.theta_q, cache, g_raw)
    lr = step_lr(cfg, state.epoch)
    state.theta_q, state.velocity = sgd_step(
        state.theta_q, grads, state.velocity, lr, cfg.weight_decay, cfg.sgd_momentum
    )
    state.theta_k = momentum_update(EncoderState(state.theta_q, state.theta_k, cfg.ema_momentum)).key
    state.queue.push(fk, batch.image_ids)
    return {
        "term1": float(res.intra.mean()),
        "term2": float(res.inter.mean()),
        "total": res.loss,
        "queue_fill": state.queue.size,
        "grad_norm": float(np.linalg.norm(grads)),
        "lr": lr,
    }


def pretrain(
    corpus: list[np.ndarray],
    cfg: TrainConfig,
    state: PretrainState | None = None,
    until_epoch: int | None = None,
    out_dir: str | Path | None = None,
    on_step: Callable[[dict], None] | None = None,
) -> PretrainState:
    """Run (or resume) pretraining up to ``until_epoch`` (default ``cfg.epochs``)."""
    if not corpus:
        raise ValueError("pretraining corpus is empty")
    state = state or PretrainState.fresh(cfg)
    cfg = state.cfg
    until = cfg.epochs if until_epoch is None else until_epoch
    root = RngStream(cfg.seed)
    space = cfg.space_config
    trace_fh = None
    if out_dir is not None:
        out_dir = Path(out_dir)
        out_dir.mkdir(parents=True, exist_ok=True)
        trace_fh = open(out_dir / "trace.jsonl", "a")
    try:
        while state.epoch < until:
            e = state.epoch
            erng = root.child("epoch", e)
            order = erng.child("order").generator().permutation(len(corpus))
            steps = len(order) // cfg.batch_size or 1
            for s in range(steps):
                idx = order[s * cfg.batch_size : (s + 1) * cfg.batch_size]
                batch = assemble_batch(
                    [(int(i), corpus[i]) for i in idx],
                    cfg.views,
                    erng.child("step", s),
                    cfg.out_size,
                    space,
                    cfg.workers,
                )
                rec = {"step": state.steps, "epoch": e, **train_step(state, batch)}
                state.steps += 1
                state.trace.append(rec)
                if trace_fh is not None:
                    trace_fh.write(json.dumps(rec, sort_keys=True) + "\n")
                if on_step is not None:
                    on_step(rec)
            state.epoch += 1
            log.info("epoch %d done, mean loss %.4f", e, np.mean([r["total"] for r in state.trace[-steps:]]))
            if out_dir is not None:
                state.save(out_dir / f"ckpt_epoch{state.epoch:03d}.npz")
    finally:
        if trace_fh is not None:
            trace_fh.close()
    return state


# ---------------------------------------------------------------- evaluation


def prepare_eval_image(img: np.ndarray, resize_to: int) -> np.ndarray:
    """Resize the shorter side to ``resize_to`` keeping aspect ratio (no-op when it already matches)."""
    h, w = img.shape[:2]
    if min(h, w) == resize_to:
        return img
    s = resize_to / min(h, w)
    return imgproc.resize_bilinear(img, max(resize_to, round(h * s)), max(resize_to, round(w * s)))


def five_crop_features(enc: Encoder, params: np.ndarray, images: list[np.ndarray], resize_to: int) -> np.ndarray:
    """Backbone features averaged over each image's five crops."""
    crop = enc.cfg.input_size
    out = []
    for img in images:
        crops = five_crops(prepare_eval_image(img, resize_to), crop)
        out.append(enc.backbone(params, crops).mean(axis=0))
    return np.array(out)


class RankDeficientError(np.linalg.LinAlgError):
    pass


@dataclass
class RidgeProbe:
    mean: np.ndarray
    std: np.ndarray
    weights: np.ndarray
    bias: float

    def predict(self, X: np.ndarray) -> np.ndarray:
        return ((X - self.mean) / self.std) @ self.weights + self.bias


def fit_ridge(X: np.ndarray, y: np.ndarray, lam: float) -> RidgeProbe:
    """Least squares on standardised features; the intercept is not penalised."""
    mean = X.mean(axis=0)
    std = X.std(axis=0)
    std = np.where(std > 0, std, 1.0)
    Z = (X - mean) / std
    yc = y - y.mean()
    Zc = Z - Z.mean(axis=0)
    A = Zc.T @ Zc
    if lam == 0:
        if np.linalg.matrix_rank(Zc) < Zc.shape[1]:
            raise RankDeficientError("design matrix is rank deficient; use a ridge penalty lambda > 0")
        w = np.linalg.solve(A, Zc.T @ yc)
    else:
        w = np.linalg.solve(A + lam * np.eye(A.shape[0]), Zc.T @ yc)
    bias = float(y.mean() - Z.mean(axis=0) @ w)
    return RidgeProbe(mean, std, w, bias)


def _safe_metric(fn, pred, gt) -> float | None:
    try:
        return fn(pred, gt)
    except UndefinedMetricError:
        return None


def summarize(per_seed: list[dict[str, Any]]) -> dict[str, Any]:
    out: dict[str, Any] = {"per_seed": per_seed}
    for key in ("srcc", "plcc"):
        vals = [r[key] for r in per_seed if r[key] is not None]
        out[f"median_{key}"] = float(np.median(vals)) if vals else None
        out[f"undefined_{key}"] = len(per_seed) - len(vals)
    return out


def linear_probe(
    enc: Encoder | None,
    params: np.ndarray | None,
    scored: ScoredSet,
    seeds: list[int],
    lam: float = 1.0,
    resize_to: int | None = None,
    features: np.ndarray | None = None,
) -> dict[str, Any]:
    """Frozen backbone (projection head dropped) + ridge regressor; SRCC/PLCC per split seed."""
    if features is None:
        resize_to = resize_to or enc.cfg.input_size + enc.cfg.input_size // 16
        features = five_crop_features(enc, params, scored.images(), resize_to)
    X = features
    y = scored.scores
    per_seed = []
    for seed in seeds:
        tr, te = split_indices(len(y), seed)
        probe = fit_ridge(X[tr], y[tr], lam)
        pred = probe.predict(X[te])
        per_seed.append(
            {"seed": seed, "srcc": _safe_metric(srcc, pred, y[te]), "plcc": _safe_metric(plcc, pred, y[te])}
        )
    return summarize(per_seed)


# ---------------------------------------------------------------- fine-tuning


@dataclass
class FinetuneConfig:
    epochs: int = 20
    batch_size: int = 16
    lr: float = 1e-5
    weight_decay: float = 0.01
    resize_to: int = 68
    seed: int = 0
    head_init_scale: float = 0.01
    head_lr_mult: float = 1000.0  # the fresh head learns much faster than the pretrained backbone
    whiten_eps: float = 1.0 / 256


def finetune(
    enc: Encoder,
    backbone_params: np.ndarray,
    scored: ScoredSet,
    split_seed: int,
    ft: FinetuneConfig = FinetuneConfig(),
    images: list[np.ndarray] | None = None,
) -> dict[str, Any]:
    """End-to-end regression on the train split, five-crop evaluation on the test split.

    The projection head is discarded; a fresh linear head reads the pooled
    backbone feature through a frozen whitening map fitted to the initial
    backbone's training-split features.  Without it the quality signal sits
    in low-variance feature directions that a few hundred gradient steps
    never reach; ``whiten_eps`` plays the role of the probe's ridge penalty.
    Targets are standardised on the training split.
    """
    images = images if images is not None else scored.images()
    images = [prepare_eval_image(img, ft.resize_to) for img in images]
    y = scored.scores
    tr, te = split_indices(len(y), split_seed)
    mu, sd = y[tr].mean(), y[tr].std() or 1.0
    yz = (y - mu) / sd
    root = RngStream(ft.seed).child("finetune", split_seed)
    d_h = enc.cfg.d_h
    theta = backbone_params.copy()
    head = np.concatenate([root.child("head").generator().uniform(-1, 1, d_h) * ft.head_init_scale, [0.0]])
    params = np.concatenate([theta, head])
    opt = AdamState(np.zeros_like(params), np.zeros_like(params))
    n = enc.size
    lr_scale = np.ones_like(params)
    lr_scale[n:] = ft.head_lr_mult
    crop = enc.cfg.input_size
    F0 = np.array([enc.backbone(theta, five_crops(images[i], crop)).mean(axis=0) for i in tr])
    f_mu = F0.mean(axis=0)
    f_sd = np.where(F0.std(axis=0) > 0, F0.std(axis=0), 1.0)
    evals, evecs = np.linalg.eigh(np.cov((F0 - f_mu) / f_sd, rowvar=False, bias=True))
    # W = diag(1/sd) C^{-1/2}, regularised
    W = (evecs / np.sqrt(np.maximum(evals, 0) + ft.whiten_eps)) @ evecs.T / f_sd[:, None]
    steps_per_epoch = max(1, math.ceil(len(tr) / ft.batch_size))
    total = ft.epochs * steps_per_epoch
    step = 0
    for e in range(ft.epochs):
        erng = root.child("epoch", e)
        order = tr[erng.child("order").generator().permutation(len(tr))]
        for s in range(steps_per_epoch):
            idx = order[s * ft.batch_size : (s + 1) * ft.batch_size]
            gen = erng.child("step", s).generator()
            batch = []
            for i in idx:
                img = images[i]
                h, w = img.shape[:2]
                t, l = int(gen.integers(0, h - crop, endpoint=True)), int(gen.integers(0, w - crop, endpoint=True))
                patch = img[t : t + crop, l : l + crop]
                batch.append(patch[:, ::-1] if gen.random() < 0.5 else patch)
            pooled, cache = enc.forward(params[:n], np.stack(batch), head=False)
            z = (pooled - f_mu) @ W
            pred = z @ params[n:-1] + params[-1]
            err = pred - yz[idx]
            dpred = 2.0 * err / len(idx)
            g_head = np.concatenate([z.T @ dpred, [dpred.sum()]])
            g_back = enc.backward(params[:n], cache, np.outer(dpred, W @ params[n:-1]), head=False)
            grads = np.concatenate([g_back, g_head])
            lr = cosine_lr(ft.lr, step, total) * lr_scale
            params, opt = adamw_step(params, grads, opt, lr, ft.weight_decay)
            step += 1

    def model(crops: np.ndarray) -> np.ndarray:
        return ((enc.backbone(params[:n], crops) - f_mu) @ W) @ params[n:-1] + params[-1]

    pred = np.array([model(five_crops(images[i], crop)).mean() for i in te])
    return {
        "seed": split_seed,
        "srcc": _safe_metric(srcc, pred, y[te]),
        "plcc": _safe_metric(plcc, pred, y[te]),
        "params": params,
    }


# ---------------------------------------------------------------- ablations

ABLATIONS: dict[str, dict[str, Any]] = {
    "full": {},
    "inter_only": {"use_intra_negatives": False},
    "intra_only": {"use_inter_negatives": False},
    "fixed_sequence": {"enable_skip": False, "enable_shuffle": False, "enable_two_order": False},
    "no_skip": {"enable_skip": False},
    "no_shuffle": {"enable_shuffle": False},
    "one_order": {"enable_two_order": False},
}


def ablation_config(base: TrainConfig, name: str) -> TrainConfig:
    if name not in ABLATIONS:
        raise ValueError(f"unknown ablation {name!r}; choose from {sorted(ABLATIONS)}")
    return replace(base, **ABLATIONS[name])


def cross_family_grid(
    X: np.ndarray, scored: ScoredSet, seeds: list[int], lam: float = 1.0
) -> dict[str, dict[str, float | None]]:
    """Median SRCC of a probe fitted on one distortion family and tested on another.

    Train and test images come from disjoint base images (the split is over
    base ids), so the diagonal is not a memorisation score.
    """
    fam = np.array([it.meta.get("family") for it in scored.items])
    base = np.array([it.meta.get("base", i) for i, it in enumerate(scored.items)])
    y = scored.scores
    bases = np.unique(base)
    names = [f for f in dict.fromkeys(fam.tolist()) if f is not None]
    grid: dict[str, dict[str, float | None]] = {}
    for a in names:
        grid[a] = {}
        for b in names:
            vals = []
            for seed in seeds:
                tr_b, _ = split_indices(len(bases), seed)
                in_tr = np.isin(base, bases[tr_b])
                tr = np.flatnonzero(in_tr & (fam == a))
                te = np.flatnonzero(~in_tr & (fam == b))
                if len(tr) < 2 or len(te) < 3:
                    continue
                probe = fit_ridge(X[tr], y[tr], lam)
                v = _safe_metric(srcc, probe.predict(X[te]), y[te])
                if v is not None:
                    vals.append(v)
            grid[a][b] = float(np.median(vals)) if vals else None
    return grid
