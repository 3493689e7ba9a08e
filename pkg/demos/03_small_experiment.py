"""A reduced end-to-end run of both arms in memory (a few minutes on one core).

The full-size comparison lives in tests/test_acceptance.py and the CLI.

    python demos/03_small_experiment.py
"""
import logging

from microcl.config import Config
from microcl.data import make_splits
from microcl.pipeline import adapted_macro, comparison_table, run_experiment, warmup_feature_net

logging.basicConfig(level=logging.INFO, format="%(message)s")

cfg = Config().replace(**{
    "split.macro": 10, "split.labeled": 10, "split.unlabeled": 40, "split.test": 20,
    "split.size": 32, "style.steps": 20, "warmup.iterations": 40,
    "train.iterations": 30, "train.batch_size": 16, "train.queue_size": 64,
    "train.base_channels": 8, "train.z_dim": 32, "train.hidden": 32, "train.v_dim": 16,
    "classifier.epochs": 40, "classifier.baseline_iterations": 60,
})

# %% shared pieces: data, warm-up feature net, style-adapted macro set
ds = make_splits(cfg.split)
fnet = warmup_feature_net(ds, cfg)
adapted = adapted_macro(ds, cfg, fnet)

# %% both arms on the colour-dropped test split
rows = []
for arm in ("supervised", "ssl"):
    res = run_experiment(cfg.replace(arm=arm), ds, adapted, fnet)
    row = res.report.to_dict()
    row.update(run=arm, arm=arm)
    rows.append(row)
    if res.state is not None:
        it, j_s, j_u, total = res.state.log[-1]
        print(f"last iteration {it}: J_S={j_s:.3f} J_U={j_u:.3f} L_e={total:.3f}")

for line in comparison_table(rows):
    print(",".join(line))
