"""InfoNCE, the quality-aware contrastive loss and the momentum key queue.

Feature tensors for a batch are laid out as ``(B, K, d)``: image ``b``, view
``k``.  Queries and keys are L2-normalised rows.

For anchor image ``n`` and view ``k`` write ``s_k = q_k . c_k / tau`` for the
positive logit, ``s_{k,j}`` for logits against the other views' keys and
``u_{k,m}`` for logits against queue entries whose image id differs from
``n``.  The loss is::

    intra(n) = -beta * log sum_k exp(s_k) / sum_{j != k} exp(s_{k,j})
    inter(n) =        -log sum_k exp(s_k) / sum_m exp(u_{k,m})
    loss     = mean_n [intra(n) + inter(n)]

Both terms are "log of a sum of ratios"; the positive is not part of either
denominator.  ``form="infonce"`` switches to the conventional per-view mean of
``-log softmax`` with the positive included, for comparison runs.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

NORM_TOL = 1e-6


def logsumexp(x: np.ndarray, axis: int = -1) -> np.ndarray:
    m = np.max(x, axis=axis, keepdims=True)
    m = np.where(np.isfinite(m), m, 0.0)
    with np.errstate(divide="ignore"):
        return np.squeeze(m, axis) + np.log(np.sum(np.exp(x - m), axis=axis))


def softmax(x: np.ndarray, axis: int = -1) -> np.ndarray:
    m = np.max(x, axis=axis, keepdims=True)
    e = np.exp(x - np.where(np.isfinite(m), m, 0.0))
    return e / e.sum(axis=axis, keepdims=True)


# ---------------------------------------------------------------- InfoNCE


def infonce(q: np.ndarray, k_pos: np.ndarray, negatives: np.ndarray, tau: float):
    """Single-query InfoNCE.  Returns ``(loss, dq, dk_pos, dnegatives)``."""
    if tau <= 0:
        raise ValueError("temperature must be positive")
    q = np.asarray(q, dtype=np.float64)
    k_pos = np.asarray(k_pos, dtype=np.float64)
    negatives = np.asarray(negatives, dtype=np.float64).reshape(-1, q.shape[-1])
    if q.size == 0 or k_pos.size == 0:
        raise ValueError("empty feature vector")
    keys = np.vstack([k_pos[None], negatives])
    logits = keys @ q / tau
    loss = float(logsumexp(logits) - logits[0])
    dlogits = softmax(logits)
    dlogits[0] -= 1.0
    dq = dlogits @ keys / tau
    dkeys = np.outer(dlogits, q) / tau
    return loss, dq, dkeys[0], dkeys[1:]


# ---------------------------------------------------------------- QC loss


@dataclass(frozen=True)
class LossConfig:
    tau: float = 0.2
    beta: float = 0.4
    use_intra: bool = True
    use_inter: bool = True
    form: str = "ratio"  # "ratio" | "infonce"

    def __post_init__(self) -> None:
        if not self.tau > 0:
            raise ValueError("temperature must be positive")
        if self.beta < 0:
            raise ValueError("beta must be non-negative")
        if self.form not in ("ratio", "infonce"):
            raise ValueError(f"unknown loss form {self.form!r}")


@dataclass
class QCResult:
    loss: float
    intra: np.ndarray  # (B,) beta-weighted first term per image
    inter: np.ndarray  # (B,)
    grad_q: np.ndarray  # (B, K, d)
    grad_k: np.ndarray  # (B, K, d)


def _term(pos: np.ndarray, neg: np.ndarray, mask: np.ndarray, weight: float, form: str):
    """One contrastive term for every image.

    ``pos`` (B, K) positive logits, ``neg`` (B, K, J) negative logits, ``mask``
    (B, K, J) marks which negatives take part.  Returns per-image value and the
    gradients w.r.t. ``pos`` and ``neg``.
    """
    neg = np.where(mask, neg, -np.inf)
    K = pos.shape[1]
    if form == "ratio":
        r = pos - logsumexp(neg, axis=2)
        value = -weight * logsumexp(r, axis=1)
        dr = -weight * softmax(r, axis=1)
        dpos = dr
        dneg = -dr[..., None] * softmax(neg, axis=2)
    else:
        allz = np.concatenate([pos[..., None], neg], axis=2)
        r = pos - logsumexp(allz, axis=2)
        value = -weight * r.mean(axis=1)
        dr = np.full_like(pos, -weight / K)
        sm = softmax(allz, axis=2)
        dpos = dr * (1.0 - sm[..., 0])
        dneg = -dr[..., None] * sm[..., 1:]
    dneg = np.where(mask, dneg, 0.0)
    return value, dpos, dneg


def qc_loss(
    q: np.ndarray,
    k: np.ndarray,
    image_ids: np.ndarray,
    queue_keys: np.ndarray | None,
    queue_ids: np.ndarray | None,
    cfg: LossConfig = LossConfig(),
) -> QCResult:
    """Quality-aware contrastive loss over a ``(B, K, d)`` batch and a queue snapshot."""
    q = np.asarray(q, dtype=np.float64)
    k = np.asarray(k, dtype=np.float64)
    B, K, d = q.shape
    if k.shape != q.shape:
        raise ValueError("query and key tensors must have the same shape")
    ids = np.asarray(image_ids).reshape(B)
    tau = cfg.tau
    S = np.einsum("bkd,bjd->bkj", q, k) / tau
    pos = np.einsum("bkk->bk", S)
    grad_S = np.zeros_like(S)
    grad_q = np.zeros_like(q)
    intra = np.zeros(B)
    inter = np.zeros(B)

    if cfg.use_intra and cfg.beta > 0:
        if K < 2:
            raise ValueError("degradation negatives need K >= 2 views")
        off = ~np.eye(K, dtype=bool)
        mask = np.broadcast_to(off, S.shape)
        intra, dpos, dneg = _term(pos, S, mask, cfg.beta, cfg.form)
        grad_S += dneg
        grad_S[:, np.arange(K), np.arange(K)] += dpos

    if cfg.use_inter:
        if queue_keys is None or len(queue_keys) == 0:
            raise ValueError("content negatives need a non-empty queue")
        Q = np.asarray(queue_keys, dtype=np.float64)
        qid = np.asarray(queue_ids)
        keep = qid[None, :] != ids[:, None]  # (B, M)
        if not np.all(keep.any(axis=1)):
            raise ValueError("every queue entry belongs to the anchor image; no content negatives")
        U = np.einsum("bkd,md->bkm", q, Q) / tau
        mask = np.broadcast_to(keep[:, None, :], U.shape)
        inter, dpos, dU = _term(pos, U, mask, 1.0, cfg.form)
        grad_S[:, np.arange(K), np.arange(K)] += dpos
        grad_q += np.einsum("bkm,md->bkd", dU, Q) / tau

    grad_q += np.einsum("bkj,bjd->bkd", grad_S, k) / tau
    grad_k = np.einsum("bkj,bkd->bjd", grad_S, q) / tau
    total = intra + inter
    return QCResult(float(total.mean()), intra, inter, grad_q / B, grad_k / B)


# ---------------------------------------------------------------- queue


@dataclass
class MomentumQueue:
    """Fixed-capacity FIFO of unit-norm keys tagged with their source image id."""

    capacity: int
    dim: int
    keys: np.ndarray = field(init=False)
    ids: np.ndarray = field(init=False)
    pushed: int = field(init=False, default=0)

    def __post_init__(self) -> None:
        if self.capacity < 1:
            raise ValueError("queue capacity must be positive")
        self.keys = np.zeros((self.capacity, self.dim))
        self.ids = np.full(self.capacity, -1, dtype=np.int64)

    @property
    def size(self) -> int:
        return min(self.pushed, self.capacity)

    @property
    def cursor(self) -> int:
        return self.pushed % self.capacity

    def push(self, keys: np.ndarray, ids) -> "MomentumQueue":
        keys = np.asarray(keys, dtype=np.float64).reshape(-1, self.dim)
        ids = np.asarray(ids, dtype=np.int64).reshape(-1)
        if len(keys) != len(ids):
            raise ValueError("one image id per key is required")
        if len(keys) and np.max(np.abs(np.linalg.norm(keys, axis=1) - 1.0)) > NORM_TOL:
            raise ValueError("queue keys must be L2-normalised")
        # only the last `capacity` keys can survive
        start = max(0, len(keys) - self.capacity)
        skipped = start
        self.pushed += skipped
        for key, i in zip(keys[start:], ids[start:]):
            c = self.cursor
            self.keys[c] = key
            self.ids[c] = i
            self.pushed += 1
        return self

    def snapshot(self) -> tuple[np.ndarray, np.ndarray]:
        """Stored keys and ids, oldest first."""
        if self.pushed <= self.capacity:
            idx = np.arange(self.pushed)
        else:
            idx = (np.arange(self.capacity) + self.cursor) % self.capacity
        return self.keys[idx].copy(), self.ids[idx].copy()

    def state(self) -> dict[str, np.ndarray]:
        return {"queue_keys": self.keys.copy(), "queue_ids": self.ids.copy(), "queue_pushed": np.array(self.pushed)}

    @classmethod
    def from_state(cls, capacity: int, dim: int, state: dict) -> "MomentumQueue":
        q = cls(capacity, dim)
        q.keys = np.array(state["queue_keys"], dtype=np.float64)
        q.ids = np.array(state["queue_ids"], dtype=np.int64)
        q.pushed = int(state["queue_pushed"])
        return q


# ---------------------------------------------------------------- verification


def rel_err(analytic: np.ndarray, numeric: np.ndarray, floor: float = 1e-3) -> float:
    """Max of ``|a - n| / max(|a|, |n|, floor * max|n|)`` over coordinates.

    The floor keeps coordinates whose true gradient is ~0 from reporting
    finite-difference round-off as a large relative error.
    """
    a, b = analytic, numeric
    denom = np.maximum(np.maximum(np.abs(a), np.abs(b)), floor * np.max(np.abs(b)) + 1e-300)
    return float(np.max(np.abs(a - b) / denom))


def _unit(gen: np.random.Generator, *shape: int) -> np.ndarray:
    x = gen.standard_normal(shape)
    return x / np.linalg.norm(x, axis=-1, keepdims=True)


def loss_feature_gradcheck(
    cfg: LossConfig = LossConfig(),
    seed: int = 0,
    kind: str = "qc",
    B: int = 2,
    K: int = 2,
    M: int = 8,
    d: int = 8,
    h: float = 1e-5,
) -> float:
    """Max relative error (see :func:`rel_err`) between analytic and central-difference feature gradients."""
    gen = np.random.default_rng(seed)
    if kind == "infonce":
        q, kp, negs = _unit(gen, d), _unit(gen, d), _unit(gen, M, d)
        _, dq, dk, dn = infonce(q, kp, negs, cfg.tau)
        x = np.concatenate([q, kp, negs.ravel()])
        analytic = np.concatenate([dq, dk, dn.ravel()])

        def f(v):
            return infonce(v[:d], v[d : 2 * d], v[2 * d :].reshape(M, d), cfg.tau)[0]

    elif kind == "qc":
        q, k = _unit(gen, B, K, d), _unit(gen, B, K, d)
        ids = np.arange(B)
        Q = _unit(gen, M, d)
        qids = gen.integers(0, B + 2, size=M)
        qids[0] = B + 5  # at least one entry foreign to every image
        r = qc_loss(q, k, ids, Q, qids, cfg)
        x = np.concatenate([q.ravel(), k.ravel()])
        analytic = np.concatenate([r.grad_q.ravel(), r.grad_k.ravel()])
        n = q.size

        def f(v):
            return qc_loss(v[:n].reshape(q.shape), v[n:].reshape(k.shape), ids, Q, qids, cfg).loss

    else:
        raise ValueError(f"unknown gradcheck kind {kind!r}")

    numeric = np.empty_like(x)
    for i in range(len(x)):
        xp, xm = x.copy(), x.copy()
        xp[i] += h
        xm[i] -= h
        numeric[i] = (f(xp) - f(xm)) / (2 * h)
    return rel_err(analytic, numeric)
