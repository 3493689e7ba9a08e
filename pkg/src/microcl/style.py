"""Render macro images in the averaged style of their class's micro images.

Content features come from the deepest extractor stage, style features are
Gram matrices of the shallower stages.  The adapted image is found by
gradient descent on its pixels.
"""

from __future__ import annotations

import hashlib
import json
import logging
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np

from . import autodiff as ad
from .data import Sample, load_png, quantize, save_png
from .networks import STAGES, stage_tap

log = logging.getLogger(__name__)

GramFeature = Dict[str, np.ndarray]


@dataclass(frozen=True)
class StyleConfig:
    lambda_s: float = 1e-3
    content_layers: Tuple[str, ...] = ("stage5",)
    style_layers: Tuple[str, ...] = ("stage1", "stage2", "stage3", "stage4")
    # None means uniform 1/|set| within each set
    layer_weights: Optional[Tuple[Tuple[str, float], ...]] = None
    steps: int = 300
    step_size: float = 0.05  # largest pixel change of the first step
    init: str = "white-noise"
    seed: int = 0

    def validate(self):
        if set(self.content_layers) & set(self.style_layers):
            raise ValueError("content and style layer sets must be disjoint")
        for layer in self.content_layers + self.style_layers:
            if layer not in STAGES:
                raise ValueError(f"unknown stage {layer!r}")
        if self.init not in ("white-noise", "content-copy"):
            raise ValueError(f"unknown init mode {self.init!r}")
        if self.layer_weights and any(w <= 0 for _, w in self.layer_weights):
            raise ValueError("layer weights must be positive")

    def weights(self) -> Dict[str, float]:
        w = {l: 1.0 / len(self.content_layers) for l in self.content_layers}
        w.update({l: 1.0 / len(self.style_layers) for l in self.style_layers})
        if self.layer_weights:
            w.update(dict(self.layer_weights))
        return w

    def digest(self) -> str:
        blob = json.dumps(asdict(self), sort_keys=True, separators=(",", ":"))
        return hashlib.sha256(blob.encode()).hexdigest()[:16]


@dataclass
class FeatureNet:
    """A frozen extractor used only to read stage features."""

    net: Sequence[ad.LayerSpec]
    params: ad.ParamSet

    def truncated(self, stages: Sequence[str]) -> List[ad.LayerSpec]:
        # only run the network up to the deepest requested tap
        names = [layer.name for layer in self.net]
        last = max(names.index(stage_tap(s)) for s in stages)
        return list(self.net[: last + 1])

    def digest(self) -> str:
        h = hashlib.sha256()
        for k in sorted(self.params):
            h.update(k.encode())
            h.update(np.ascontiguousarray(self.params[k]).tobytes())
        return h.hexdigest()[:16]


def extract_features(fnet: FeatureNet, image: np.ndarray,
                     stages: Sequence[str] = STAGES) -> Dict[str, np.ndarray]:
    """Stage name -> feature map ``(N_l, H_l, W_l)`` (or a batch of them)."""
    single = image.ndim == 3
    x = image[None] if single else image
    x = x.astype(next(iter(fnet.params.values())).dtype, copy=False)
    net = fnet.truncated(stages)
    _, tape = ad.forward(net, fnet.params, x, keep=[stage_tap(s) for s in stages])
    feats = {s: tape.outputs[stage_tap(s)] for s in stages}
    return {s: f[0] for s, f in feats.items()} if single else feats


def gram_matrix(features: np.ndarray) -> np.ndarray:
    """``G[i, j] = <F_i, F_j> / (N*H*W)``; accepts ``(N, H, W)`` or a batch."""
    single = features.ndim == 3
    f = features[None] if single else features
    b, n, h, w = f.shape
    flat = f.reshape(b, n, h * w)
    g = np.matmul(flat, flat.transpose(0, 2, 1)) / (n * h * w)
    return g[0] if single else g


def _gram_backward(features: np.ndarray, dgram: np.ndarray) -> np.ndarray:
    b, n, h, w = features.shape
    flat = features.reshape(b, n, h * w)
    sym = dgram + dgram.transpose(0, 2, 1)
    return (np.matmul(sym, flat) / (n * h * w)).reshape(features.shape)


def average_style(fnet: FeatureNet, images: Sequence[np.ndarray],
                  layers: Sequence[str] = ("stage1", "stage2", "stage3", "stage4")) -> GramFeature:
    """Elementwise mean of per-image Gram matrices for each style layer."""
    if len(images) == 0:
        raise ValueError("average_style needs at least one image")
    batch = np.stack(images)
    feats = extract_features(fnet, batch, layers)
    return {l: gram_matrix(feats[l]).mean(axis=0) for l in layers}


@dataclass
class PreLoss:
    total: np.ndarray  # per image
    content: np.ndarray
    style: np.ndarray
    grad: Optional[np.ndarray]


def pre_loss(fnet: FeatureNet, x_a: np.ndarray, content_target: Dict[str, np.ndarray],
             gbar: GramFeature, cfg: StyleConfig, need_grad: bool = True) -> PreLoss:
    """Content + ``lambda_s`` * style loss with its pixel gradient.

    ``x_a`` is ``(3, H, W)`` or a batch; ``content_target`` holds the content
    image's features on the content layers (batched alike).  Batched inputs
    give per-image losses.
    """
    single = x_a.ndim == 3
    x = x_a[None] if single else x_a
    targets = {l: (t[None] if single else t) for l, t in content_target.items()}
    w = cfg.weights()
    layers = tuple(cfg.content_layers) + tuple(cfg.style_layers)
    net = fnet.truncated(layers)
    x = x.astype(next(iter(fnet.params.values())).dtype, copy=False)
    _, tape = ad.forward(net, fnet.params, x, record=need_grad, train=False, keep=[stage_tap(l) for l in layers])
    b = x.shape[0]
    content = np.zeros(b)
    style = np.zeros(b)
    extra = {}
    for l in cfg.content_layers:
        diff = tape.outputs[stage_tap(l)] - targets[l]
        content += 0.5 * w[l] * (diff.reshape(b, -1).astype(np.float64) ** 2).sum(axis=1)
        extra[stage_tap(l)] = w[l] * diff
    for l in cfg.style_layers:
        f = tape.outputs[stage_tap(l)]
        diff = gram_matrix(f) - gbar[l]
        style += 0.5 * w[l] * (diff.reshape(b, -1).astype(np.float64) ** 2).sum(axis=1)
        extra[stage_tap(l)] = cfg.lambda_s * w[l] * _gram_backward(f, diff)
    total = content + cfg.lambda_s * style
    if not np.all(np.isfinite(total)):
        raise ad.NonFiniteError("non-finite style-transfer loss")
    grad = None
    if need_grad:
        grad, _ = ad.backward(tape, None, extra)
        if single:
            grad = grad[0]
    if single:
        return PreLoss(total[:1], content[:1], style[:1], grad)
    return PreLoss(total, content, style, grad)


class StylizeDiverged(RuntimeError):
    def __init__(self, msg, trajectory):
        super().__init__(msg)
        self.trajectory = trajectory


@dataclass
class StylizeResult:
    image: np.ndarray
    trajectory: List[List[float]]  # per image: loss of every accepted iterate
    initial: PreLoss
    final: PreLoss


def _initial_images(x_s: np.ndarray, cfg: StyleConfig, seeds: Sequence[int]) -> np.ndarray:
    if cfg.init == "content-copy":
        return x_s.copy()
    return np.stack([np.random.default_rng([cfg.seed, int(s)]).uniform(0, 1, size=x_s.shape[1:])
                     for s in seeds]).astype(x_s.dtype)


def stylize_batch(fnet: FeatureNet, x_s: np.ndarray, gbar: GramFeature, cfg: StyleConfig,
                  seeds: Optional[Sequence[int]] = None) -> StylizeResult:
    """Independent per-image descent on a batch of content images.

    Each image has its own step size, halved whenever a step would raise
    its loss (the step is then rejected), so the returned iterate is the
    best one seen.
    """
    cfg.validate()
    x_s = np.asarray(x_s)
    b = x_s.shape[0]
    seeds = list(range(b)) if seeds is None else list(seeds)
    target = extract_features(fnet, x_s, cfg.content_layers)
    x = np.clip(_initial_images(x_s, cfg, seeds), 0, 1)
    cur = pre_loss(fnet, x, target, gbar, cfg)
    initial = cur
    traj = [[float(v)] for v in cur.total]
    gmax = np.abs(cur.grad.reshape(b, -1)).max(axis=1)
    eta = np.where(gmax > 0, cfg.step_size / np.maximum(gmax, 1e-30), 0.0)
    loss, grad = cur.total.copy(), cur.grad
    for _ in range(cfg.steps):
        active = (eta > 0) & (loss > 0)
        if not active.any():
            break
        cand = np.clip(x - eta[:, None, None, None].astype(x.dtype) * grad, 0, 1)
        new = pre_loss(fnet, cand, target, gbar, cfg)
        if not np.all(np.isfinite(new.total)):
            raise StylizeDiverged("loss became non-finite", traj)
        better = active & (new.total <= loss)
        x[better] = cand[better]
        loss[better] = new.total[better]
        grad = np.where(better[:, None, None, None], new.grad, grad)
        eta[active & ~better] *= 0.5
        for i in np.flatnonzero(better):
            traj[i].append(float(loss[i]))
    final = pre_loss(fnet, x, target, gbar, cfg, need_grad=False)
    return StylizeResult(x, traj, initial, final)


def stylize(fnet: FeatureNet, x_s: np.ndarray, gbar: GramFeature, cfg: StyleConfig,
            seed: int = 0) -> StylizeResult:
    """Single-image form of :func:`stylize_batch`; ``x_s`` is ``(3, H, W)``."""
    res = stylize_batch(fnet, x_s[None], gbar, cfg, [seed])
    single = lambda p: PreLoss(p.total, p.content, p.style, None if p.grad is None else p.grad[0])
    return StylizeResult(res.image[0], res.trajectory, single(res.initial), single(res.final))


def stylize_dataset(fnet: FeatureNet, macro: List[Sample], micro_labeled: List[Sample],
                    cfg: StyleConfig, cache_dir=None, batch_size: int = 50) -> List[Sample]:
    """One adapted sample per macro sample, styled after its class's micro set.

    With ``cache_dir`` set, results are stored as PNG plus a JSON sidecar
    keyed by (sample seed, config hash) and reused on later calls.
    """
    cfg.validate()
    by_class: Dict[int, List[np.ndarray]] = {}
    for s in micro_labeled:
        by_class.setdefault(s.label, []).append(s.image)
    needed = sorted({s.label for s in macro})
    missing = [c for c in needed if c not in by_class]
    if missing:
        from .data import CLASS_NAMES
        names = ", ".join(f"{c} ({CLASS_NAMES[c]})" for c in missing)
        raise ValueError(f"no labeled micro samples for class {names}; cannot build its style")
    key = hashlib.sha256(f"{cfg.digest()}:{fnet.digest()}:{_style_set_digest(micro_labeled)}".encode()).hexdigest()[:16]
    cache = Path(cache_dir) if cache_dir is not None else None
    if cache is not None:
        cache.mkdir(parents=True, exist_ok=True)

    out: List[Optional[Sample]] = [None] * len(macro)
    todo: Dict[int, List[int]] = {}
    for i, s in enumerate(macro):
        if cache is not None:
            png = cache / f"{s.seed}_{key}.png"
            if png.exists():
                out[i] = Sample(load_png(png), s.label, "adapted", s.seed)
                continue
        todo.setdefault(s.label, []).append(i)

    for label, idx in sorted(todo.items()):
        gbar = average_style(fnet, by_class[label], cfg.style_layers)
        for start in range(0, len(idx), batch_size):
            chunk = idx[start:start + batch_size]
            x_s = np.stack([macro[i].image for i in chunk])
            res = stylize_batch(fnet, x_s, gbar, cfg, [macro[i].seed for i in chunk])
            for j, i in enumerate(chunk):
                img = quantize(res.image[j])
                out[i] = Sample(img, macro[i].label, "adapted", macro[i].seed)
                if cache is not None:
                    stem = f"{macro[i].seed}_{key}"
                    save_png(img, cache / f"{stem}.png")
                    with open(cache / f"{stem}.json", "w") as f:
                        json.dump({"cfg_hash": key, "seed": macro[i].seed, "label": macro[i].label,
                                   "loss_trajectory": res.trajectory[j]}, f)
            log.info("stylized class %d: %d/%d", label, min(start + batch_size, len(idx)), len(idx))
    return out


def _style_set_digest(samples: List[Sample]) -> str:
    h = hashlib.sha256()
    for s in samples:
        h.update(f"{s.seed}:{s.label};".encode())
    return h.hexdigest()[:16]
