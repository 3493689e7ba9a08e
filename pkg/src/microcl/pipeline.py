"""End-to-end workflow: synthesize, adapt macro style, train, classify, evaluate."""

from __future__ import annotations

import csv
import json
import logging
from dataclasses import dataclass
from pathlib import Path
from typing import Dict, List, Optional, Sequence

import numpy as np

from . import autodiff as ad
from . import checkpoint as ckpt
from .config import Config
from .contrastive import (EmbeddingQueue, Model, MomentumState, TrainData, TrainState,
                          extract_z, train_extractor)
from .data import Dataset, Sample, labels_of, make_splits, to_array
from .evaluate import (ClassifierConfig, MetricsReport, evaluate_probabilities, predict,
                       supervised_baseline, train_classifier)
from .style import FeatureNet, stylize_dataset

log = logging.getLogger(__name__)


# ---------------------------------------------------------------------------
# Style-transfer feature net
# ---------------------------------------------------------------------------

def warmup_feature_net(ds: Dataset, cfg: Config) -> FeatureNet:
    """Brief supervised training on macro + labeled micro, then frozen."""
    images = to_array(ds.macro + ds.labeled)
    labels = labels_of(ds.macro + ds.labeled)
    wcfg = ClassifierConfig(hidden=cfg.classifier.hidden, batch_size=cfg.warmup.batch_size,
                            baseline_iterations=cfg.warmup.iterations, baseline_lr=cfg.warmup.lr,
                            momentum=cfg.train.momentum)
    res = supervised_baseline(images, labels, wcfg, cfg.train.base_channels, cfg.train.z_dim,
                              seed=cfg.split.seed)
    return FeatureNet(res.extractor, res.ext_params)


def backbone_params(cfg: Config, fnet: Optional[FeatureNet]) -> Optional[ad.ParamSet]:
    """Initial extractor weights shared by both arms (``None`` = fresh init)."""
    if cfg.backbone == "random":
        return None
    if fnet is None:
        raise ValueError("backbone 'warmup' needs the warm-up feature net")
    return fnet.params


def adapted_macro(ds: Dataset, cfg: Config, fnet: Optional[FeatureNet] = None,
                  cache_dir=None) -> List[Sample]:
    if cfg.macro == "none":
        return []
    if cfg.macro == "original":
        return list(ds.macro)
    fnet = fnet or warmup_feature_net(ds, cfg)
    return stylize_dataset(fnet, ds.macro, ds.labeled, cfg.style, cache_dir=cache_dir)


# ---------------------------------------------------------------------------
# Checkpoint conversion
# ---------------------------------------------------------------------------

def state_to_checkpoint(state: TrainState, cfg: Config) -> ckpt.Checkpoint:
    q = state.momentum.queue
    return ckpt.Checkpoint(
        extractor=list(state.model.extractor), head=list(state.model.head),
        params=state.params, ema=state.momentum.params, velocity=state.opt.velocity,
        lr=state.opt.lr, momentum=state.opt.momentum,
        queue=q.storage, queue_cursor=q.cursor, queue_fill=q.fill,
        rng_state=state.rng.bit_generator.state, iteration=state.iteration,
        loss_log=[list(r) for r in state.log], config_hash=cfg.digest(),
    )


def checkpoint_to_state(ck: ckpt.Checkpoint) -> TrainState:
    model = Model(ck.extractor, ck.head)
    queue = EmbeddingQueue(ck.queue.shape[0], ck.queue.shape[1], ck.queue.dtype)
    queue.storage[...] = ck.queue
    queue.cursor, queue.fill = ck.queue_cursor, ck.queue_fill
    rng = np.random.default_rng()
    rng.bit_generator.state = ck.rng_state
    opt = ad.OptimizerState(ad.copy_params(ck.velocity), ck.lr, ck.momentum)
    return TrainState(model, ad.copy_params(ck.params), MomentumState(ad.copy_params(ck.ema), queue),
                      opt, rng, ck.iteration, [tuple(r) for r in ck.loss_log])


def write_losses(state: TrainState, path) -> None:
    with open(path, "w", newline="") as f:
        w = csv.writer(f)
        w.writerow(["iter", "J_S", "J_U", "L_e"])
        for it, js, ju, le in state.log:
            w.writerow([it, repr(float(js)), repr(float(ju)), repr(float(le))])


# ---------------------------------------------------------------------------
# Arms
# ---------------------------------------------------------------------------

def train_data(ds: Dataset, adapted: List[Sample]) -> TrainData:
    return TrainData(
        micro=to_array(ds.labeled), y_micro=labels_of(ds.labeled),
        macro=to_array(adapted) if adapted else np.zeros((0,) + ds.labeled[0].image.shape, np.float32),
        y_macro=labels_of(adapted),
        unlabeled=to_array(ds.unlabeled) if ds.unlabeled else np.zeros((0,) + ds.labeled[0].image.shape, np.float32),
    )


def train_ssl(ds: Dataset, adapted: List[Sample], cfg: Config, state: Optional[TrainState] = None,
              on_checkpoint=None, backbone: Optional[ad.ParamSet] = None) -> TrainState:
    tcfg = cfg.train if cfg.train.seed == cfg.seed else cfg.replace(**{"train.seed": cfg.seed}).train
    return train_extractor(train_data(ds, adapted), tcfg, state, on_checkpoint, backbone)


def classify_ssl(ds: Dataset, adapted: List[Sample], extractor, ext_params, cfg: Config):
    labeled = ds.labeled + adapted
    z = extract_z(Model(extractor, []), ext_params, to_array(labeled))
    ccfg = cfg.classifier if cfg.classifier.seed == cfg.seed else cfg.replace(**{"classifier.seed": cfg.seed}).classifier
    return train_classifier(z, labels_of(labeled), ccfg)


def run_supervised(ds: Dataset, adapted: List[Sample], cfg: Config,
                   backbone: Optional[ad.ParamSet] = None):
    labeled = ds.labeled + adapted
    ccfg = cfg.replace(**{"classifier.seed": cfg.seed}).classifier
    return supervised_baseline(to_array(labeled), labels_of(labeled), ccfg,
                               cfg.train.base_channels, cfg.train.z_dim, seed=cfg.seed,
                               backbone=backbone)


def evaluate_arm(extractor, ext_params, clf, test: List[Sample]) -> MetricsReport:
    probs = predict(extractor, ext_params, clf, to_array(test))
    return evaluate_probabilities(probs, labels_of(test))


@dataclass
class RunResult:
    report: MetricsReport
    state: Optional[TrainState] = None


def needs_warmup(cfg: Config) -> bool:
    return cfg.backbone == "warmup" or cfg.macro == "adapted"


def run_experiment(cfg: Config, ds: Optional[Dataset] = None,
                   adapted: Optional[List[Sample]] = None,
                   fnet: Optional[FeatureNet] = None) -> RunResult:
    """In-memory run of one arm; evaluates on the colour-dropped test split.

    ``adapted`` and ``fnet`` may be passed in to share them across runs
    that differ only in the training seed or arm.
    """
    cfg.validate()
    ds = ds if ds is not None else make_splits(cfg.split)
    if fnet is None and needs_warmup(cfg) and not (adapted is not None and cfg.backbone == "random"):
        fnet = warmup_feature_net(ds, cfg)
    adapted = adapted if adapted is not None else adapted_macro(ds, cfg, fnet)
    backbone = backbone_params(cfg, fnet)
    if cfg.arm == "supervised":
        res = run_supervised(ds, adapted, cfg, backbone)
        return RunResult(evaluate_arm(res.extractor, res.ext_params, res.classifier, ds.test_colordropped))
    state = train_ssl(ds, adapted, cfg, backbone=backbone)
    clf = classify_ssl(ds, adapted, state.model.extractor, state.params, cfg)
    return RunResult(evaluate_arm(state.model.extractor, state.params, clf, ds.test_colordropped), state)


# ---------------------------------------------------------------------------
# Outputs
# ---------------------------------------------------------------------------

def metrics_json(report: MetricsReport, cfg: Config) -> str:
    d = report.to_dict()
    d["arm"] = cfg.arm
    d["config_hash"] = cfg.digest()
    return json.dumps(d, sort_keys=True, indent=2) + "\n"


def write_roc(report: MetricsReport, path) -> None:
    with open(path, "w", newline="") as f:
        w = csv.writer(f)
        w.writerow(["class", "fpr", "tpr", "threshold"])
        for c, points in sorted(report.roc.items()):
            for fpr, tpr, thr in points:
                w.writerow([c, repr(fpr), repr(tpr), repr(thr)])


REPORT_COLUMNS = ("AC", "F1", "JA")


def comparison_table(rows: Sequence[Dict]) -> List[List[str]]:
    """Rows of ``run, arm, AC, F1, JA, accuracy, AUC``; a median row is appended for 3+ runs."""
    out = [["run", "arm", *REPORT_COLUMNS, "accuracy", "auc"]]
    values = []
    for r in rows:
        vals = [r["macro"][k] for k in REPORT_COLUMNS] + [r["accuracy"], r["auc"]]
        values.append(vals)
        out.append([r["run"], r.get("arm", ""), *[f"{v:.6f}" for v in vals]])
    if len(rows) >= 3:
        med = np.median(np.array(values, dtype=float), axis=0)
        out.append(["median", "", *[f"{v:.6f}" for v in med]])
    return out
