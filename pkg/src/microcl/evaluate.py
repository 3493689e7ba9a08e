"""MLP classifier on frozen representations, supervised baseline, metrics.

F1 here is the harmonic mean of sensitivity and specificity, not the
precision/recall F1.  Multiclass numbers are one-vs-rest per class and
macro-averaged over classes; the headline accuracy is trace / total.
"""

from __future__ import annotations

import logging
import warnings
from dataclasses import dataclass, field
from typing import Dict, List, Optional, Sequence

import numpy as np
from scipy.special import log_softmax, softmax

from . import autodiff as ad
from .data import N_CLASSES
from .networks import build_classifier, build_extractor

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class ClassifierConfig:
    hidden: int = 64  # paper: 256
    epochs: int = 100
    lr: float = 0.05
    momentum: float = 0.9
    batch_size: int = 32
    seed: int = 0
    # supervised baseline (extractor + classifier trained jointly)
    baseline_iterations: int = 200
    baseline_lr: float = 0.02


# ---------------------------------------------------------------------------
# Classifier
# ---------------------------------------------------------------------------

def cross_entropy(logits: np.ndarray, labels: np.ndarray):
    """Mean cross-entropy and its gradient w.r.t. the logits."""
    logp = log_softmax(logits.astype(np.float64), axis=1)
    n = len(labels)
    loss = -logp[np.arange(n), labels].mean()
    grad = np.exp(logp)
    grad[np.arange(n), labels] -= 1
    return float(loss), (grad / n).astype(logits.dtype)


@dataclass
class Classifier:
    net: List[ad.LayerSpec]
    params: ad.ParamSet
    # input standardisation fitted on the training representations
    mean: np.ndarray
    scale: np.ndarray

    def logits(self, z: np.ndarray) -> np.ndarray:
        if z.shape[1] != self.mean.shape[0]:
            raise ad.ShapeError(f"classifier expects {self.mean.shape[0]}-D input, got {z.shape[1]}")
        out, _ = ad.forward(self.net, self.params, ((z - self.mean) / self.scale).astype(np.float32))
        return out


def train_classifier(z: np.ndarray, y: np.ndarray, cfg: ClassifierConfig,
                     n_classes: int = N_CLASSES) -> Classifier:
    """Cross-entropy training of dense-relu-dense on fixed representations."""
    if len(z) == 0:
        raise ValueError("classifier training needs labeled samples")
    net = build_classifier(z.shape[1], cfg.hidden, n_classes)
    params = ad.init_params(net, cfg.seed)
    mean = z.mean(axis=0).astype(np.float32)
    scale = (z.std(axis=0) + 1e-6).astype(np.float32)
    zn = ((z - mean) / scale).astype(np.float32)
    opt = ad.OptimizerState.for_params(params, cfg.lr, cfg.momentum)
    rng = np.random.default_rng([cfg.seed, 0xC1A5])
    for _ in range(cfg.epochs):
        order = rng.permutation(len(zn))
        for i in range(0, len(order), cfg.batch_size):
            idx = order[i:i + cfg.batch_size]
            out, tape = ad.forward(net, params, zn[idx], record=True)
            _, dout = cross_entropy(out, y[idx])
            _, grads = ad.backward(tape, dout)
            ad.sgd_momentum_step(params, grads, opt)
    return Classifier(net, params, mean, scale)


def predict_proba(logits: np.ndarray) -> np.ndarray:
    ad.check_finite(logits, "logits")
    return softmax(logits.astype(np.float64), axis=1)


def predict(extractor: Sequence[ad.LayerSpec], ext_params: ad.ParamSet, clf: Classifier,
            images: np.ndarray, batch: int = 128) -> np.ndarray:
    """Per-class probability rows for ``images``."""
    rows = []
    for i in range(0, len(images), batch):
        z, _ = ad.forward(extractor, ext_params, images[i:i + batch].astype(np.float32))
        rows.append(predict_proba(clf.logits(z)))
    return np.concatenate(rows) if rows else np.zeros((0, len(clf.mean)))


# ---------------------------------------------------------------------------
# Metrics
# ---------------------------------------------------------------------------

def confusion_matrix(truth: np.ndarray, pred: np.ndarray, n_classes: int = N_CLASSES) -> np.ndarray:
    """``cm[t, p]`` counts samples of true class ``t`` predicted as ``p``."""
    cm = np.zeros((n_classes, n_classes), dtype=np.int64)
    np.add.at(cm, (np.asarray(truth), np.asarray(pred)), 1)
    return cm


@dataclass
class MetricsReport:
    per_class: Dict[str, Dict[str, Optional[float]]]
    macro: Dict[str, float]
    accuracy: float  # overall multiclass accuracy, trace / total
    confusion: List[List[int]]
    auc: Optional[float] = None
    per_class_auc: Dict[str, Optional[float]] = field(default_factory=dict)
    roc: Dict[str, List[List[float]]] = field(default_factory=dict)

    def to_dict(self, include_roc: bool = False) -> dict:
        d = {
            "accuracy": self.accuracy,
            "macro": self.macro,
            "per_class": self.per_class,
            "confusion": self.confusion,
            "auc": self.auc,
            "per_class_auc": self.per_class_auc,
        }
        if include_roc:
            d["roc"] = self.roc
        return d


def rates(tp: int, fp: int, tn: int, fn: int) -> Dict[str, float]:
    """AC, SE, SP, F1 (of SE and SP) and JA from one-vs-rest counts."""
    total = tp + fp + tn + fn
    ac = (tp + tn) / total
    se = tp / (tp + fn)
    sp = tn / (tn + fp) if tn + fp else 0.0
    f1 = 2 * se * sp / (se + sp) if se + sp else 0.0
    ja = tp / (tp + fp + fn) if tp + fp + fn else 0.0
    return {"AC": ac, "SE": se, "SP": sp, "F1": f1, "JA": ja}


def compute_metrics(confusion: np.ndarray) -> MetricsReport:
    cm = np.asarray(confusion, dtype=np.int64)
    total = int(cm.sum())
    if total == 0:
        raise ValueError("empty confusion matrix")
    per_class: Dict[str, Dict[str, Optional[float]]] = {}
    kept = []
    for c in range(cm.shape[0]):
        tp = int(cm[c, c])
        fn = int(cm[c].sum()) - tp
        fp = int(cm[:, c].sum()) - tp
        tn = total - tp - fn - fp
        counts = {"TP": tp, "FP": fp, "TN": tn, "FN": fn}
        if tp + fn == 0:
            warnings.warn(f"class {c} has no samples; its rates are undefined and excluded")
            per_class[str(c)] = {**counts, **{k: None for k in ("AC", "SE", "SP", "F1", "JA")}}
            continue
        r = rates(tp, fp, tn, fn)
        per_class[str(c)] = {**counts, **r}
        kept.append(r)
    macro = {k: float(np.mean([r[k] for r in kept])) for k in ("AC", "SE", "SP", "F1", "JA")}
    return MetricsReport(per_class, macro, float(np.trace(cm)) / total, cm.tolist())


def roc_curve(scores: np.ndarray, positive: np.ndarray):
    """Threshold sweep over distinct scores (descending); returns fpr, tpr, thresholds."""
    scores = np.asarray(scores, dtype=np.float64)
    positive = np.asarray(positive, dtype=bool)
    order = np.argsort(-scores, kind="stable")
    s, p = scores[order], positive[order]
    distinct = np.r_[np.flatnonzero(np.diff(s)), len(s) - 1]
    tps = np.cumsum(p)[distinct]
    fps = np.cumsum(~p)[distinct]
    n_pos, n_neg = p.sum(), (~p).sum()
    tpr = np.r_[0.0, tps / n_pos]
    fpr = np.r_[0.0, fps / n_neg]
    thr = np.r_[np.inf, s[distinct]]
    return fpr, tpr, thr


def auc_trapezoid(fpr: np.ndarray, tpr: np.ndarray) -> float:
    return float(np.sum(np.diff(fpr) * (tpr[1:] + tpr[:-1]) / 2))


def auc_rank(scores: np.ndarray, positive: np.ndarray) -> float:
    """Mann-Whitney U / (n_pos * n_neg), ties counted as one half."""
    from scipy.stats import rankdata

    scores = np.asarray(scores, dtype=np.float64)
    positive = np.asarray(positive, dtype=bool)
    n_pos, n_neg = positive.sum(), (~positive).sum()
    ranks = rankdata(scores)
    u = ranks[positive].sum() - n_pos * (n_pos + 1) / 2
    return float(u / (n_pos * n_neg))


def roc_auc(scores: np.ndarray, truth: np.ndarray, n_classes: int = N_CLASSES):
    """One-vs-rest ROC per class and the unweighted mean of per-class AUCs."""
    scores = np.asarray(scores)
    ad.check_finite(scores, "scores")
    truth = np.asarray(truth)
    roc, aucs = {}, {}
    for c in range(n_classes):
        pos = truth == c
        if not pos.any() or pos.all():
            warnings.warn(f"class {c} absent from (or the only class in) the truth; excluded from AUC")
            aucs[str(c)] = None
            continue
        fpr, tpr, thr = roc_curve(scores[:, c], pos)
        roc[str(c)] = [[float(a), float(b), float(t)] for a, b, t in zip(fpr, tpr, thr)]
        aucs[str(c)] = auc_rank(scores[:, c], pos)
    valid = [a for a in aucs.values() if a is not None]
    overall = float(np.mean(valid)) if valid else None
    return roc, aucs, overall


def evaluate_probabilities(probs: np.ndarray, truth: np.ndarray) -> MetricsReport:
    """Shared evaluation path for every arm."""
    pred = probs.argmax(axis=1)
    report = compute_metrics(confusion_matrix(truth, pred, probs.shape[1]))
    report.roc, report.per_class_auc, report.auc = roc_auc(probs, truth, probs.shape[1])
    return report


# ---------------------------------------------------------------------------
# Supervised baseline
# ---------------------------------------------------------------------------

@dataclass
class BaselineResult:
    extractor: List[ad.LayerSpec]
    ext_params: ad.ParamSet
    classifier: Classifier


def supervised_baseline(images: np.ndarray, labels: np.ndarray, cfg: ClassifierConfig,
                        base_channels: int = 16, z_dim: int = 128, seed: int = 0,
                        backbone: Optional[ad.ParamSet] = None) -> BaselineResult:
    """Extractor + classifier trained jointly with cross-entropy on labeled data only.

    ``backbone`` optionally replaces the extractor's initial parameters.
    """
    if len(images) == 0:
        raise ValueError("baseline needs labeled samples")
    extractor = build_extractor(3, base_channels, z_dim)
    head = build_classifier(z_dim, cfg.hidden, N_CLASSES)
    params = ad.init_params(extractor + head, seed)
    for k, v in (backbone or {}).items():
        if k not in params or params[k].shape != v.shape:
            raise ad.ShapeError(f"backbone tensor {k} does not fit the extractor")
        params[k] = v.astype(params[k].dtype, copy=True)
    opt = ad.OptimizerState.for_params(params, cfg.baseline_lr, cfg.momentum)
    rng = np.random.default_rng([seed, 0xBA5E])
    for it in range(cfg.baseline_iterations):
        idx = rng.integers(len(images), size=cfg.batch_size)
        x = np.stack([im[:, :, ::-1] if rng.random() < 0.5 else im for im in images[idx]])
        z, t_ext = ad.forward(extractor, params, x, record=True)
        out, t_head = ad.forward(head, params, z, record=True)
        loss, dout = cross_entropy(out, labels[idx])
        dz, grads = ad.backward(t_head, dout)
        _, g_ext = ad.backward(t_ext, dz)
        grads.update(g_ext)
        ad.sgd_momentum_step(params, grads, opt)
        ad.update_running_stats(params, t_ext)
        if (it + 1) % 50 == 0:
            log.info("baseline iter %d CE=%.4f", it + 1, loss)
    ext_params = {k: v for k, v in params.items() if not k.startswith("cls")}
    clf_params = {k: v for k, v in params.items() if k.startswith("cls")}
    # identity standardisation: the head was trained on raw representations
    clf = Classifier(head, clf_params, np.zeros(z_dim, np.float32), np.ones(z_dim, np.float32))
    return BaselineResult(extractor, ext_params, clf)
