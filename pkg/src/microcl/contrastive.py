"""Contrastive training of the feature extractor.

The online network is extractor + projection head; its unit-length
metric embeddings are trained with a supervised micro<->macro loss and
an unsupervised two-view loss whose negatives come from a queue filled by
an exponential-moving-average copy of the network.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from typing import Callable, Dict, List, Optional, Sequence, Tuple

import numpy as np
from scipy.special import logsumexp

from . import autodiff as ad
from .data import FILTER_KINDS, AugmentSpec, N_CLASSES, color_distort, edge_filter
from .networks import build_extractor, build_head

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class TrainConfig:
    """Desk-scale defaults; the paper-scale value is noted where it differs."""

    sigma: float = 0.08
    lam: float = 1.0
    alpha: float = 0.999
    batch_size: int = 32  # paper: 256
    iterations: int = 200  # paper: 500
    lr: float = 1e-4
    momentum: float = 0.9
    queue_size: int = 512  # paper: 4096
    k_percent: float = 20.0
    base_channels: int = 16
    z_dim: int = 128  # paper: 1024
    hidden: int = 64  # paper: 256
    v_dim: int = 32  # paper: 128
    hue_deg: float = 180.0
    lightness: float = 0.2
    saturation: float = 0.9
    # probability of exchanging the two transforms for a sample, so both
    # networks see both appearance families
    view_swap: float = 0.5
    checkpoint_every: int = 100
    seed: int = 0

    def validate(self):
        if self.sigma <= 0:
            raise ValueError("sigma must be positive")
        if not 0.0 <= self.alpha <= 1.0:
            raise ValueError("alpha must lie in [0, 1]")
        if self.lam < 0:
            raise ValueError("lambda must be non-negative")
        if not 0.0 <= self.view_swap <= 1.0:
            raise ValueError("view_swap must lie in [0, 1]")
        if self.batch_size > self.queue_size:
            raise ValueError("batch size cannot exceed the queue capacity")


# ---------------------------------------------------------------------------
# Model
# ---------------------------------------------------------------------------

@dataclass
class Model:
    extractor: List[ad.LayerSpec]
    head: List[ad.LayerSpec]

    @classmethod
    def from_config(cls, cfg: TrainConfig) -> "Model":
        return cls(build_extractor(3, cfg.base_channels, cfg.z_dim),
                   build_head(cfg.z_dim, cfg.hidden, cfg.v_dim, cfg.k_percent))

    @property
    def layers(self) -> List[ad.LayerSpec]:
        return list(self.extractor) + list(self.head)

    def init(self, seed: int, dtype=np.float32) -> ad.ParamSet:
        return ad.init_params(self.layers, seed, dtype)


@dataclass
class EmbedTape:
    ext: ad.Tape
    head: ad.Tape
    norm: tuple


def embed(model: Model, params: ad.ParamSet, x: np.ndarray, record: bool = False,
          train: Optional[bool] = None):
    """``z = e(x)``, ``v = normalize(h(z))``; returns ``(z, v, tape)``.

    ``train`` selects batch statistics in batch-norm layers (default: ``record``).
    """
    x = x.astype(params[next(iter(params))].dtype, copy=False)
    z, t_ext = ad.forward(model.extractor, params, x, record=record, train=train)
    u, t_head = ad.forward(model.head, params, z, record=record, train=train)
    v, norm = ad.l2_normalize(u)
    ad.check_finite(v, "metric embedding")
    return z, v, (EmbedTape(t_ext, t_head, norm) if record else None)


def embed_backward(tape: EmbedTape, dv: np.ndarray) -> ad.ParamSet:
    du = ad.l2_normalize_backward(tape.norm, dv)
    dz, grads = ad.backward(tape.head, du)
    _, g_ext = ad.backward(tape.ext, dz)
    grads.update(g_ext)
    return grads


# ---------------------------------------------------------------------------
# Embedding queue
# ---------------------------------------------------------------------------

class EmbeddingQueue:
    """Fixed-capacity FIFO ring buffer of unit vectors."""

    def __init__(self, capacity: int, dim: int, dtype=np.float32):
        if capacity < 1:
            raise ValueError("queue capacity must be positive")
        self.capacity = capacity
        self.storage = np.zeros((capacity, dim), dtype=dtype)
        self.cursor = 0
        self.fill = 0

    def enqueue(self, batch: np.ndarray) -> "EmbeddingQueue":
        batch = np.asarray(batch)
        n = batch.shape[0]
        if n > self.capacity:
            raise ValueError(f"batch of {n} exceeds queue capacity {self.capacity}")
        idx = (self.cursor + np.arange(n)) % self.capacity
        self.storage[idx] = batch
        self.cursor = int((self.cursor + n) % self.capacity)
        self.fill = min(self.capacity, self.fill + n)
        return self

    def contents(self) -> np.ndarray:
        """Stored embeddings, oldest first."""
        if self.fill < self.capacity:
            return self.storage[: self.fill].copy()
        return np.concatenate([self.storage[self.cursor:], self.storage[: self.cursor]])

    def __len__(self) -> int:
        return self.fill


def enqueue(queue: EmbeddingQueue, batch: np.ndarray) -> EmbeddingQueue:
    return queue.enqueue(batch)


# ---------------------------------------------------------------------------
# Losses.  Each returns the loss and its gradient w.r.t. the query rows.
# ---------------------------------------------------------------------------

def info_nce(v: np.ndarray, positives: np.ndarray, negatives: np.ndarray, sigma: float) -> float:
    """``-log p`` for one query; with several positives, ``p`` sums over them."""
    if sigma <= 0:
        raise ValueError("sigma must be positive")
    positives = np.atleast_2d(positives)
    if positives.shape[0] == 0:
        raise ValueError("info_nce needs at least one positive key")
    negatives = np.asarray(negatives).reshape(-1, v.shape[-1])
    pos = positives @ v / sigma
    neg = negatives @ v / sigma
    log_terms = [p - logsumexp(np.concatenate([[p], neg])) for p in pos]
    return float(-logsumexp(log_terms))


def _ratio_sum_loss(s_pos: np.ndarray, s_neg: np.ndarray, pos_mask: np.ndarray, neg_mask: np.ndarray):
    """Per-query ``-log sum_{k+} e^{s_k+} / (e^{s_k+} + sum_{k-} e^{s_k-})``.

    ``s_pos``/``s_neg`` are (Q, K) scaled similarities against the same key
    set; masks pick positives and negatives.  Returns per-query loss and
    d loss / d s (Q, K).
    """
    q, k = s_pos.shape
    neg = np.where(neg_mask, s_neg, -np.inf)
    neg_lse = logsumexp(neg, axis=1, keepdims=True) if k else np.full((q, 1), -np.inf)
    # log of each positive's ratio: s_p - log(e^{s_p} + e^{neg_lse})
    log_ratio = s_pos - np.logaddexp(s_pos, neg_lse)
    log_ratio = np.where(pos_mask, log_ratio, -np.inf)
    log_p = logsumexp(log_ratio, axis=1)
    loss = -log_p
    # weights of each positive term inside p
    w = np.where(pos_mask, np.exp(log_ratio - log_p[:, None]), 0.0)
    r = np.where(pos_mask, np.exp(log_ratio), 0.0)  # ratio_k
    # d ratio_k / d s_k = ratio_k (1 - ratio_k); d ratio_k / d s_n = -ratio_k * softmax share of n
    d_pos = -w * (1 - r)
    neg_share = np.where(neg_mask, np.exp(neg - neg_lse), 0.0)  # e^{s_n} / sum e^{neg}
    # e^{s_n} / (e^{s_k} + N) = neg_share * (1 - ratio_k)
    coef = (w * (1 - r)).sum(axis=1, keepdims=True)
    d_neg = coef * neg_share
    return loss, d_pos + d_neg


@dataclass
class SupervisedLossResult:
    loss: float
    grad: np.ndarray  # w.r.t. all embeddings (micro rows first, then macro)
    per_query: np.ndarray
    skipped: int


def supervised_loss(v_micro: np.ndarray, y_micro: np.ndarray, v_macro: np.ndarray,
                    y_macro: np.ndarray, sigma: float) -> SupervisedLossResult:
    """Micro queries against macro keys and vice versa (sum over positives outside the log).

    A query whose class has no counterpart on the other side is skipped and
    counted in ``skipped``.
    """
    v_micro = np.atleast_2d(np.asarray(v_micro, dtype=np.float64))
    v_macro = np.asarray(v_macro, dtype=np.float64).reshape(-1, v_micro.shape[-1])
    y_micro, y_macro = np.asarray(y_micro), np.asarray(y_macro)
    n_t, n_a = len(v_micro), len(v_macro)
    grad = np.zeros((n_t + n_a, v_micro.shape[-1]))
    per_query = np.zeros(n_t + n_a)
    skipped = 0
    if n_t == 0 or n_a == 0:
        return SupervisedLossResult(0.0, grad, per_query, n_t + n_a)
    total = 0.0
    for queries, yq, keys, yk, off_q, off_k in ((v_micro, y_micro, v_macro, y_macro, 0, n_t),
                                                (v_macro, y_macro, v_micro, y_micro, n_t, 0)):
        s = queries @ keys.T / sigma
        pos = yq[:, None] == yk[None, :]
        has = pos.any(axis=1)
        skipped += int((~has).sum())
        if not has.any():
            continue
        with np.errstate(invalid="ignore", divide="ignore"):
            loss, ds = _ratio_sum_loss(s, s, pos, ~pos)
        loss = np.where(has, loss, 0.0)
        ds = np.where(has[:, None], ds, 0.0)
        total += float(loss.sum())
        per_query[off_q:off_q + len(queries)] = loss
        grad[off_q:off_q + len(queries)] += ds @ keys / sigma
        grad[off_k:off_k + len(keys)] += ds.T @ queries / sigma
    return SupervisedLossResult(total, grad, per_query, skipped)


def unsupervised_loss_from_embeddings(v_q: np.ndarray, v_m: np.ndarray, queue: np.ndarray,
                                      sigma: float):
    """``J_U = -sum log p_u``; returns ``(loss, dJ/dv_q, per-sample losses)``.

    ``v_m`` and ``queue`` are treated as constants.
    """
    v_q = np.asarray(v_q, dtype=np.float64)
    v_m = np.asarray(v_m, dtype=np.float64)
    queue = np.asarray(queue, dtype=np.float64).reshape(-1, v_q.shape[1])
    s_pos = (v_q * v_m).sum(axis=1) / sigma
    s_neg = v_q @ queue.T / sigma
    logits = np.concatenate([s_pos[:, None], s_neg], axis=1)
    lse = logsumexp(logits, axis=1)
    per = lse - s_pos
    prob = np.exp(logits - lse[:, None])
    grad = ((prob[:, :1] - 1) * v_m + prob[:, 1:] @ queue) / sigma
    return float(per.sum()), grad, per


# ---------------------------------------------------------------------------
# Views
# ---------------------------------------------------------------------------

def view_q(image: np.ndarray, cfg: TrainConfig, rng: np.random.Generator) -> np.ndarray:
    """Random colour distortion and horizontal flip."""
    spec = AugmentSpec(cfg.hue_deg, cfg.lightness, cfg.saturation, "none", cfg.seed)
    out = color_distort(image, spec, int(rng.integers(1 << 62)))
    return out[:, :, ::-1] if rng.random() < 0.5 else out


def view_m(image: np.ndarray, cfg: TrainConfig, rng: np.random.Generator) -> np.ndarray:
    """Random edge filter and horizontal flip."""
    out = edge_filter(image, FILTER_KINDS[int(rng.integers(len(FILTER_KINDS)))])
    return out[:, :, ::-1] if rng.random() < 0.5 else out


def two_views(images: np.ndarray, cfg: TrainConfig, rng: np.random.Generator):
    """``(x_q, x_m)`` batches; each pair is exchanged with probability ``cfg.view_swap``."""
    xq, xm = [], []
    for x in images:
        a, b = view_q(x, cfg, rng), view_m(x, cfg, rng)
        if cfg.view_swap and rng.random() < cfg.view_swap:
            a, b = b, a
        xq.append(a)
        xm.append(b)
    return np.stack(xq), np.stack(xm)


@dataclass
class MomentumState:
    params: ad.ParamSet
    queue: EmbeddingQueue


def unsupervised_loss(images: np.ndarray, cfg: TrainConfig, model: Model, params: ad.ParamSet,
                      momentum: MomentumState, rng: np.random.Generator, record: bool = True):
    """Two-view loss on a batch; returns ``(J_U, grads, v_m)``.

    ``v_m`` is to be enqueued after the step, so the current batch is never
    its own negative.  ``grads`` is None when ``record`` is False.
    """
    xq, xm = two_views(images, cfg, rng)
    _, v_q, tape = embed(model, params, xq, record=record)
    _, v_m, _ = embed(model, momentum.params, xm, train=True)
    loss, dv, _ = unsupervised_loss_from_embeddings(v_q, v_m, momentum.queue.contents(), cfg.sigma)
    grads = embed_backward(tape, dv.astype(v_q.dtype)) if record else None
    return loss, grads, v_m


# ---------------------------------------------------------------------------
# Training loop
# ---------------------------------------------------------------------------

@dataclass
class TrainState:
    model: Model
    params: ad.ParamSet
    momentum: MomentumState
    opt: ad.OptimizerState
    rng: np.random.Generator
    iteration: int = 0
    log: List[Tuple[int, float, float, float]] = field(default_factory=list)


def init_state(cfg: TrainConfig, backbone: Optional[ad.ParamSet] = None) -> TrainState:
    """Fresh training state; ``backbone`` overrides the extractor's initial parameters."""
    cfg.validate()
    model = Model.from_config(cfg)
    params = model.init(cfg.seed)
    if backbone is not None:
        for k, v in backbone.items():
            if k not in params or params[k].shape != v.shape:
                raise ad.ShapeError(f"backbone tensor {k} does not fit the extractor")
            params[k] = v.astype(params[k].dtype, copy=True)
    momentum = MomentumState(ad.copy_params(params), EmbeddingQueue(cfg.queue_size, cfg.v_dim))
    opt = ad.OptimizerState.for_params(params, cfg.lr, cfg.momentum)
    rng = np.random.default_rng([cfg.seed, 0x5EED])
    return TrainState(model, params, momentum, opt, rng)


def _balanced_indices(labels: np.ndarray, n: int, rng: np.random.Generator) -> np.ndarray:
    classes = [c for c in range(N_CLASSES) if (labels == c).any()]
    if not classes or n == 0:
        return np.zeros(0, dtype=int)
    start = int(rng.integers(len(classes)))
    picks = []
    for j in range(n):
        pool = np.flatnonzero(labels == classes[(start + j) % len(classes)])
        picks.append(pool[rng.integers(len(pool))])
    return np.array(picks)


@dataclass
class TrainData:
    micro: np.ndarray
    y_micro: np.ndarray
    macro: np.ndarray  # adapted macro images; may be empty
    y_macro: np.ndarray
    unlabeled: np.ndarray  # may be empty

    @property
    def pool(self) -> np.ndarray:
        parts = [a for a in (self.micro, self.macro, self.unlabeled) if len(a)]
        return np.concatenate(parts)


class TrainingDiverged(FloatingPointError):
    pass


def train_step(state: TrainState, data: TrainData, cfg: TrainConfig, pool: np.ndarray):
    rng = state.rng
    half = cfg.batch_size // 2 if len(data.macro) else cfg.batch_size
    it = _balanced_indices(data.y_micro, half, rng)
    ia = _balanced_indices(data.y_macro, cfg.batch_size - half, rng) if len(data.macro) else np.zeros(0, int)
    flip = lambda xs: np.stack([x[:, :, ::-1] if rng.random() < 0.5 else x for x in xs])
    x_sup = flip(np.concatenate([data.micro[it]] + ([data.macro[ia]] if len(ia) else [])))
    iu = rng.integers(len(pool), size=cfg.batch_size)
    xq, xm = two_views(pool[iu], cfg, rng)

    # separate passes so each loss sees batch-norm statistics of its own batch;
    # without macro keys every J_S term is skipped and the pass is saved
    tapes = []
    if len(ia):
        _, v_s, tape_s = embed(state.model, state.params, x_sup, record=True)
        sup = supervised_loss(v_s[:len(it)], data.y_micro[it], v_s[len(it):], data.y_macro[ia], cfg.sigma)
        tapes.append((tape_s, sup.grad.astype(v_s.dtype)))
    else:
        sup = SupervisedLossResult(0.0, np.zeros((len(it), cfg.v_dim)), np.zeros(len(it)), len(it))
    _, v_q, tape_q = embed(state.model, state.params, xq, record=True)
    _, v_m, _ = embed(state.model, state.momentum.params, xm, train=True)
    j_u, dq, _ = unsupervised_loss_from_embeddings(v_q, v_m, state.momentum.queue.contents(), cfg.sigma)
    total = sup.loss + cfg.lam * j_u
    if not np.isfinite(total):
        raise TrainingDiverged(f"non-finite loss at iteration {state.iteration}: J_S={sup.loss} J_U={j_u}")
    tapes.append((tape_q, (cfg.lam * dq).astype(v_q.dtype)))
    grads = {}
    for tape, dv in tapes:
        for k, g in embed_backward(tape, dv).items():
            grads[k] = grads[k] + g if k in grads else g
    ad.sgd_momentum_step(state.params, grads, state.opt)
    for tape, _ in tapes:
        ad.update_running_stats(state.params, tape.ext)
        ad.update_running_stats(state.params, tape.head)
    state.momentum.params = ad.ema_update(state.momentum.params, state.params, cfg.alpha)
    state.momentum.queue.enqueue(v_m)
    state.iteration += 1
    state.log.append((state.iteration, sup.loss, j_u, total))
    return sup.loss, j_u, total


def train_extractor(data: TrainData, cfg: TrainConfig, state: Optional[TrainState] = None,
                    on_checkpoint: Optional[Callable[[TrainState], None]] = None,
                    backbone: Optional[ad.ParamSet] = None) -> TrainState:
    """Run ``cfg.iterations`` total iterations (resuming ``state`` if given)."""
    if len(data.micro) == 0:
        raise ValueError("training needs labeled micro samples")
    state = state or init_state(cfg, backbone)
    pool = data.pool
    while state.iteration < cfg.iterations:
        j_s, j_u, total = train_step(state, data, cfg, pool)
        if state.iteration % 20 == 0:
            log.info("iter %d J_S=%.4f J_U=%.4f L=%.4f", state.iteration, j_s, j_u, total)
        if on_checkpoint and cfg.checkpoint_every and state.iteration % cfg.checkpoint_every == 0:
            on_checkpoint(state)
    if on_checkpoint:
        on_checkpoint(state)
    return state


def extract_z(model: Model, params: ad.ParamSet, images: np.ndarray, batch: int = 128) -> np.ndarray:
    out = []
    for i in range(0, len(images), batch):
        z, _ = ad.forward(model.extractor, params, images[i:i + batch].astype(np.float32))
        out.append(z)
    if out:
        return np.concatenate(out)
    z_dim = next(l.out_channels for l in reversed(model.extractor) if l.kind == "conv2d")
    return np.zeros((0, z_dim), np.float32)
