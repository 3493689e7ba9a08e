"""``microcl`` command line: synth, stylize, train, eval, report.

Every command takes ``--config PATH`` (JSON) plus ``--set key=value``
overrides with dotted keys, e.g. ``--set train.iterations=50``.  Flags
such as ``--seed`` and ``--arm`` override both.
"""

from __future__ import annotations

import argparse
import contextlib
import csv
import json
import logging
import os
import sys
from pathlib import Path
from typing import List, Optional, Sequence

from . import checkpoint as ckpt
from . import pipeline as pl
from .config import Config, load_config, save_config
from .data import Sample, load_png, read_dataset, save_png, write_dataset, make_splits

log = logging.getLogger("microcl")

LOCK_NAME = ".microcl.lock"


class CliError(Exception):
    """User-facing failure; printed without a traceback, exit status 2."""


# ---------------------------------------------------------------------------
# Helpers
# ---------------------------------------------------------------------------

def _parse_value(text: str):
    try:
        return json.loads(text)
    except json.JSONDecodeError:
        return text


def build_config(args) -> Config:
    cfg = load_config(args.config) if getattr(args, "config", None) else Config()
    changes = {}
    for item in getattr(args, "set", None) or []:
        if "=" not in item:
            raise CliError(f"--set expects key=value, got {item!r}")
        key, value = item.split("=", 1)
        changes[key] = _parse_value(value)
    if getattr(args, "seed", None) is not None:
        changes["seed"] = args.seed
    if getattr(args, "arm", None):
        changes["arm"] = args.arm
    try:
        cfg = cfg.replace(**changes) if changes else cfg
        cfg = Config.from_dict(json.loads(json.dumps(cfg.to_dict())))
        return cfg.validate()
    except (TypeError, ValueError) as e:
        raise CliError(f"invalid configuration: {e}") from None


@contextlib.contextmanager
def run_lock(run_dir: Path):
    """Marker-file lock so two processes never write one run directory."""
    run_dir.mkdir(parents=True, exist_ok=True)
    marker = run_dir / LOCK_NAME
    try:
        fd = os.open(marker, os.O_CREAT | os.O_EXCL | os.O_WRONLY)
    except FileExistsError:
        raise CliError(f"run directory {run_dir} is locked ({marker} exists)") from None
    with os.fdopen(fd, "w") as f:
        f.write(f"{os.getpid()}\n")
    try:
        yield
    finally:
        marker.unlink(missing_ok=True)


def _require_dir(path: Optional[str], what: str) -> Path:
    if not path:
        raise CliError(f"missing {what} path")
    p = Path(path)
    if not p.is_dir():
        raise CliError(f"{what} directory not found: {p}")
    return p


def _check_empty(out: Path, force: bool) -> None:
    if out.exists() and any(out.iterdir()) and not force:
        raise CliError(f"output directory {out} is not empty (use --force to overwrite)")


def write_adapted(samples: Sequence[Sample], out_dir: Path) -> dict:
    entries = []
    (out_dir / "adapted").mkdir(parents=True, exist_ok=True)
    for s in samples:
        rel = f"adapted/{s.label}_{s.seed}.png"
        save_png(s.image, out_dir / rel)
        entries.append({"path": rel, "label": s.label, "domain": s.domain, "seed": s.seed})
    manifest = {"split": "adapted", "samples": entries}
    with open(out_dir / "manifest.json", "w") as f:
        json.dump(manifest, f, indent=1, sort_keys=True)
    return manifest


def read_adapted(adapted_dir: Path) -> List[Sample]:
    path = adapted_dir / "manifest.json"
    if not path.exists():
        raise CliError(f"no manifest.json under {adapted_dir}")
    with open(path) as f:
        manifest = json.load(f)
    return [Sample(load_png(adapted_dir / e["path"]), e["label"], e["domain"], e["seed"])
            for e in manifest["samples"]]


def _macro_set(cfg: Config, ds, args) -> List[Sample]:
    if cfg.macro == "adapted":
        if not args.adapted:
            raise CliError("macro mode 'adapted' needs --adapted DIR (run `microcl stylize` first)")
        return read_adapted(_require_dir(args.adapted, "adapted"))
    return pl.adapted_macro(ds, cfg)


def _backbone(cfg: Config, ds):
    # the warm-up net depends only on the data, so every seed shares it
    if cfg.backbone == "random":
        return None
    return pl.backbone_params(cfg, pl.warmup_feature_net(ds, cfg))


def _seed_dirs(run: Path, cfg: Config, n_seeds: int):
    if n_seeds <= 1:
        return [(run, cfg)]
    return [(run / f"seed-{cfg.seed + k}", cfg.replace(seed=cfg.seed + k)) for k in range(n_seeds)]


# ---------------------------------------------------------------------------
# Commands
# ---------------------------------------------------------------------------

def cmd_synth(args) -> int:
    cfg = build_config(args)
    if not args.out:
        raise CliError("missing output path (--out DIR)")
    out = Path(args.out)
    _check_empty(out, args.force)
    ds = make_splits(cfg.split)
    manifest = write_dataset(ds, out)
    save_config(cfg, out / "config.json")
    print(f"wrote {len(manifest['samples'])} samples to {out}")
    return 0


def cmd_stylize(args) -> int:
    cfg = build_config(args)
    data = _require_dir(args.data, "data")
    if not args.out:
        raise CliError("missing output path (--out DIR)")
    out = Path(args.out)
    _check_empty(out, args.force)
    ds = read_dataset(data)
    cache = args.cache or cfg.paths.cache_dir or None
    try:
        fnet = pl.warmup_feature_net(ds, cfg)
        adapted = pl.stylize_dataset(fnet, ds.macro, ds.labeled, cfg.style, cache_dir=cache)
    except ValueError as e:
        raise CliError(str(e)) from None
    out.mkdir(parents=True, exist_ok=True)
    write_adapted(adapted, out)
    save_config(cfg, out / "config.json")
    print(f"wrote {len(adapted)} adapted samples to {out}")
    return 0


def _train_one(cfg: Config, ds, macro, run: Path, resume: bool, force: bool, backbone) -> None:
    ck_path = run / "checkpoint.bin"
    state = None
    if resume:
        if not ck_path.exists():
            raise CliError(f"--resume given but no checkpoint at {ck_path}")
        try:
            ck = ckpt.load(ck_path)
        except ckpt.CheckpointError as e:
            raise CliError(f"cannot load {ck_path}: {e}") from None
        state = pl.checkpoint_to_state(ck)
        log.info("resuming %s at iteration %d", run, state.iteration)
    elif ck_path.exists() and not force:
        raise CliError(f"{ck_path} exists (use --resume to continue or --force to restart)")

    def on_checkpoint(st):
        ckpt.save(pl.state_to_checkpoint(st, cfg), ck_path)
        pl.write_losses(st, run / "losses.csv")

    with run_lock(run):
        save_config(cfg, run / "config.json")
        pl.train_ssl(ds, macro, cfg, state, on_checkpoint, None if state else backbone)
    print(f"trained {run}")


def cmd_train(args) -> int:
    cfg = build_config(args)
    if cfg.arm != "ssl":
        raise CliError("`train` fits the contrastive extractor; the supervised arm trains inside `eval`")
    data = _require_dir(args.data, "data")
    if not args.run:
        raise CliError("missing run path (--run DIR)")
    ds = read_dataset(data)
    macro = _macro_set(cfg, ds, args)
    backbone = None if args.resume else _backbone(cfg, ds)
    for run, c in _seed_dirs(Path(args.run), cfg, args.seeds):
        _train_one(c, ds, macro, run, args.resume, args.force, backbone)
    return 0


def _eval_one(cfg: Config, ds, macro, run: Path, split: str, backbone) -> None:
    test = ds.test_colordropped if split == "colordropped" else ds.test
    with run_lock(run):
        if cfg.arm == "supervised":
            res = pl.run_supervised(ds, macro, cfg, backbone)
            report = pl.evaluate_arm(res.extractor, res.ext_params, res.classifier, test)
        else:
            ck_path = run / "checkpoint.bin"
            if not ck_path.exists():
                raise CliError(f"no checkpoint at {ck_path}; run `microcl train` first")
            try:
                ck = ckpt.load(ck_path)
            except ckpt.CheckpointError as e:
                raise CliError(f"cannot load {ck_path}: {e}") from None
            ext_params = {k: v for k, v in ck.params.items() if not k.startswith("head")}
            clf = pl.classify_ssl(ds, macro, ck.extractor, ext_params, cfg)
            report = pl.evaluate_arm(ck.extractor, ext_params, clf, test)
        (run / "metrics.json").write_text(pl.metrics_json(report, cfg))
        pl.write_roc(report, run / "roc.csv")
    print(f"{run}: accuracy {report.accuracy:.4f} AUC {report.auc:.4f}")


def cmd_eval(args) -> int:
    cfg = build_config(args)
    data = _require_dir(args.data, "data")
    if not args.run:
        raise CliError("missing run path (--run DIR)")
    ds = read_dataset(data)
    macro = _macro_set(cfg, ds, args)
    backbone = _backbone(cfg, ds) if cfg.arm == "supervised" else None
    for run, c in _seed_dirs(Path(args.run), cfg, args.seeds):
        run.mkdir(parents=True, exist_ok=True)
        _eval_one(c, ds, macro, run, args.test, backbone)
    return 0


def _expand_runs(paths: Sequence[str]) -> List[Path]:
    missing = [p for p in paths if not Path(p).is_dir()]
    if missing:
        raise CliError("run directory not found: " + ", ".join(missing))
    runs = []
    for p in map(Path, paths):
        seeds = sorted(d for d in p.glob("seed-*") if (d / "metrics.json").exists())
        runs.extend(seeds or [p])
    for r in runs:
        if not (r / "metrics.json").exists():
            raise CliError(f"no metrics.json in {r}")
    return runs


def cmd_report(args) -> int:
    runs = _expand_runs(args.runs)
    rows = []
    for r in runs:
        with open(r / "metrics.json") as f:
            d = json.load(f)
        d["run"] = str(r)
        rows.append(d)
    table = pl.comparison_table(rows)
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    with open(out, "w", newline="") as f:
        csv.writer(f).writerows(table)
    for line in table:
        print(",".join(line))
    return 0


# ---------------------------------------------------------------------------
# Parser
# ---------------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="JSON config file")
    common.add_argument("--set", action="append", metavar="KEY=VALUE",
                        help="override a config field (dotted keys), repeatable")
    common.add_argument("--seed", type=int, help="training seed")
    common.add_argument("--force", action="store_true", help="overwrite existing outputs")
    common.add_argument("-v", "--verbose", action="store_true")

    p = argparse.ArgumentParser(prog="microcl", description=__doc__.splitlines()[0])
    sub = p.add_subparsers(dest="command", required=True)

    s = sub.add_parser("synth", parents=[common], help="generate the synthetic dataset")
    s.add_argument("--out", help="output directory")
    s.set_defaults(func=cmd_synth)

    s = sub.add_parser("stylize", parents=[common], help="render macro images in the micro style")
    s.add_argument("--data", help="dataset directory from `synth`")
    s.add_argument("--out", help="output directory for the adapted set")
    s.add_argument("--cache", help="stylization cache directory")
    s.set_defaults(func=cmd_stylize)

    for name, func, helptext in (("train", cmd_train, "train the contrastive extractor"),
                                 ("eval", cmd_eval, "fit the classifier and evaluate")):
        s = sub.add_parser(name, parents=[common], help=helptext)
        s.add_argument("--data", help="dataset directory from `synth`")
        s.add_argument("--adapted", help="adapted macro directory from `stylize`")
        s.add_argument("--run", help="run directory")
        s.add_argument("--arm", choices=("ssl", "supervised"))
        s.add_argument("--seeds", type=int, default=1,
                       help="repeat with seeds seed..seed+N-1 in seed-* subdirectories")
        if name == "train":
            s.add_argument("--resume", action="store_true", help="continue from checkpoint.bin")
        else:
            s.add_argument("--test", choices=("colordropped", "color"), default="colordropped",
                           help="test split (default: colour-dropped)")
        s.set_defaults(func=func)

    s = sub.add_parser("report", help="comparison table over run directories")
    s.add_argument("runs", nargs="+", help="run directories (seed-* subdirectories are expanded)")
    s.add_argument("--out", default="report.csv", help="output CSV path")
    s.add_argument("-v", "--verbose", action="store_true")
    s.set_defaults(func=cmd_report)
    return p


def main(argv: Optional[Sequence[str]] = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except CliError as e:
        print(f"microcl: error: {e}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
