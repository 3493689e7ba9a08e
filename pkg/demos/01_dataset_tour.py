"""Tour of the synthetic two-domain dataset and the appearance transforms.

Writes a contact sheet to demos/out/dataset_tour.png: one row per class,
columns macro | micro | micro colour-dropped | colour distortion | edge filter.

    python demos/01_dataset_tour.py
"""
from pathlib import Path

import numpy as np

from microcl.data import (AugmentSpec, CLASS_NAMES, SplitSpec, augment, class_counts,
                          make_splits, save_png)

# %% a small split; every sample is regenerated from (master seed, split, class, index)
ds = make_splits(SplitSpec(macro=2, labeled=2, unlabeled=4, test=2))
for name in ("macro", "labeled", "test"):
    print(f"{name:10s}", class_counts(ds.split(name)))
print(f"{'unlabeled':10s}", len(ds.unlabeled), "images")

# the unlabeled pool carries no labels, its truth is kept aside for diagnostics only
assert all(s.label is None for s in ds.unlabeled)

# %% one row per class
jitter = AugmentSpec(hue_deg=180, lightness=0.2, saturation=0.9)
edges = AugmentSpec(filter="sobel")
rows = []
for c in range(len(CLASS_NAMES)):
    macro = next(s for s in ds.macro if s.label == c).image
    i, micro = next((i, s.image) for i, s in enumerate(ds.test) if s.label == c)
    gray = ds.test_colordropped[i].image
    rows.append(np.concatenate([macro, micro, gray, augment(micro, jitter, seed=c),
                                augment(micro, edges, seed=c)], axis=2))
sheet = np.concatenate(rows, axis=1)

out = Path(__file__).parent / "out"
out.mkdir(exist_ok=True)
save_png(sheet, out / "dataset_tour.png")
print("rows:", ", ".join(CLASS_NAMES), "->", out / "dataset_tour.png")
