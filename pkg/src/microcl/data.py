"""Procedural four-class, two-domain shape dataset and appearance transforms.

The classes are shape families: ring (annulus), crescent, double lobe
(two touching discs) and notched disc.  ``macro`` images are clean,
high-contrast renders on a near-uniform background; ``micro`` images
render the same families as a stained, blurred, noisy cell.  The micro
corruption model is a synthetic stand-in for real microscopy.
"""

from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Dict, List, Optional

import numpy as np
from scipy import ndimage

CLASS_NAMES = ("ring", "crescent", "double_lobe", "notched_disc")
N_CLASSES = len(CLASS_NAMES)
DOMAINS = ("macro", "micro", "adapted")
FILTER_KINDS = ("sobel", "scharr", "laplacian")
SPLITS = ("macro", "labeled", "unlabeled", "test")


@dataclass
class Sample:
    image: np.ndarray  # (3, H, W) float32 in [0, 1]
    label: Optional[int]
    domain: str
    seed: int


@dataclass(frozen=True)
class SplitSpec:
    """Per-class sample counts for every split (paper scale: 500/50/~5000/1000)."""

    macro: int = 50
    labeled: int = 50
    unlabeled: int = 500
    test: int = 100
    size: int = 64
    seed: int = 0

    def validate(self):
        for name in SPLITS:
            n = getattr(self, name)
            if n < 0:
                raise ValueError(f"negative count for split {name!r}: {n}")
            if n >= 1 << 24:
                raise ValueError(f"count for split {name!r} exceeds the per-class seed range")
        if self.test < 1:
            raise ValueError("the test split needs at least one sample per class")
        if self.size < 32 or self.size % 16:
            raise ValueError(f"image size must be >= 32 and a multiple of 16, got {self.size}")
        if not 0 <= self.seed < 1 << 32:
            raise ValueError("master seed must fit in 32 bits")


@dataclass(frozen=True)
class AugmentSpec:
    hue_deg: float = 0.0
    lightness: float = 0.0
    saturation: float = 0.0
    filter: str = "none"
    seed: int = 0


@dataclass
class Dataset:
    spec: SplitSpec
    macro: List[Sample] = field(default_factory=list)
    labeled: List[Sample] = field(default_factory=list)
    unlabeled: List[Sample] = field(default_factory=list)
    test: List[Sample] = field(default_factory=list)
    test_colordropped: List[Sample] = field(default_factory=list)
    # ground truth of the unlabeled pool, never used for training
    unlabeled_truth: List[int] = field(default_factory=list)

    def split(self, name: str) -> List[Sample]:
        return getattr(self, name)

    def manifest(self) -> dict:
        entries = []
        for split in SPLITS + ("test_colordropped",):
            for i, s in enumerate(self.split(split)):
                entries.append({
                    "path": f"{split}/{i:05d}.png",
                    "split": split,
                    "label": s.label,
                    "domain": s.domain,
                    "seed": int(s.seed),
                })
        return {"spec": asdict(self.spec), "samples": entries}


# ---------------------------------------------------------------------------
# Colour space helpers
# ---------------------------------------------------------------------------

def rgb_to_hsl(rgb: np.ndarray):
    """``rgb`` shaped (3, ...) -> hue in degrees, saturation, lightness."""
    r, g, b = rgb[0], rgb[1], rgb[2]
    mx = np.maximum(np.maximum(r, g), b)
    mn = np.minimum(np.minimum(r, g), b)
    light = (mx + mn) / 2
    delta = mx - mn
    chroma = delta > 0
    safe = np.where(chroma, delta, 1.0)
    denom = np.where(chroma, 1 - np.abs(2 * light - 1), 1.0)
    sat = np.where(chroma, delta / np.where(denom > 0, denom, 1.0), 0.0)
    hue = np.select(
        [mx == r, mx == g],
        [((g - b) / safe) % 6, (b - r) / safe + 2],
        (r - g) / safe + 4,
    ) * 60.0
    hue = np.where(chroma, hue, 0.0)
    return hue, np.clip(sat, 0, 1), light


def hsl_to_rgb(hue, sat, light) -> np.ndarray:
    c = (1 - np.abs(2 * light - 1)) * sat
    hp = (hue % 360.0) / 60.0
    x = c * (1 - np.abs(hp % 2 - 1))
    z = np.zeros_like(c)
    sector = np.floor(hp).astype(int) % 6
    r = np.choose(sector, [c, x, z, z, x, c])
    g = np.choose(sector, [x, c, c, x, z, z])
    b = np.choose(sector, [z, z, x, c, c, x])
    m = light - c / 2
    return np.stack([r + m, g + m, b + m])


def apply_hsl_shift(image: np.ndarray, hue_deg: float = 0.0, lightness: float = 0.0,
                    saturation: float = 0.0) -> np.ndarray:
    """Rotate hue, add to lightness, scale saturation by ``1 + saturation``."""
    if hue_deg == 0.0 and lightness == 0.0 and saturation == 0.0:
        return image.copy()
    h, s, l = rgb_to_hsl(image.astype(np.float64))
    out = hsl_to_rgb(h + hue_deg, np.clip(s * (1 + saturation), 0, 1), np.clip(l + lightness, 0, 1))
    return np.clip(out, 0, 1).astype(image.dtype)


def color_distort(image: np.ndarray, spec: AugmentSpec, seed: int) -> np.ndarray:
    """Random hue / lightness / saturation change drawn from ``spec`` ranges."""
    rng = np.random.default_rng([abs(int(spec.seed)), abs(int(seed))])
    hue = rng.uniform(-spec.hue_deg, spec.hue_deg) if spec.hue_deg else 0.0
    light = rng.uniform(-spec.lightness, spec.lightness) if spec.lightness else 0.0
    sat = rng.uniform(-spec.saturation, spec.saturation) if spec.saturation else 0.0
    return apply_hsl_shift(image, hue, light, sat)


_SOBEL = np.array([[-1, 0, 1], [-2, 0, 2], [-1, 0, 1]], dtype=np.float64)
_SCHARR = np.array([[-3, 0, 3], [-10, 0, 10], [-3, 0, 3]], dtype=np.float64)
_LAPLACE = np.array([[0, 1, 0], [1, -4, 1], [0, 1, 0]], dtype=np.float64)


def edge_filter(image: np.ndarray, kind: str) -> np.ndarray:
    """Per-channel 3x3 edge response, replicate-padded, rescaled to [0, 1]."""
    if kind not in FILTER_KINDS:
        raise ValueError(f"unknown filter kind {kind!r}; expected one of {FILTER_KINDS}")
    img = image.astype(np.float64)
    if kind == "laplacian":
        resp = np.abs(np.stack([ndimage.correlate(ch, _LAPLACE, mode="nearest") for ch in img]))
    else:
        kx = _SOBEL if kind == "sobel" else _SCHARR
        gx = np.stack([ndimage.correlate(ch, kx, mode="nearest") for ch in img])
        gy = np.stack([ndimage.correlate(ch, kx.T, mode="nearest") for ch in img])
        resp = np.sqrt(gx * gx + gy * gy)
    # zero-sum kernels leave rounding residue on flat regions; drop it so a
    # constant image maps to all zeros instead of rescaled noise
    resp[resp <= 1e-12 * max(1.0, float(np.abs(img).max()))] = 0.0
    peak = resp.max()
    if peak <= 0:
        return np.zeros_like(image)
    return (resp / peak).astype(image.dtype)


def augment(image: np.ndarray, spec: AugmentSpec, seed: int) -> np.ndarray:
    out = color_distort(image, spec, seed)
    if spec.filter != "none":
        out = edge_filter(out, spec.filter)
    return out


LUMA = (0.299, 0.587, 0.114)


def color_drop(image: np.ndarray) -> np.ndarray:
    """BT.601 luminance replicated to three channels."""
    if image.shape[0] != 3:
        raise ValueError(f"color_drop needs a 3-channel image, got shape {image.shape}")
    r, g, b = image
    lum = LUMA[0] * r + LUMA[1] * g + LUMA[2] * b
    # gray pixels map to themselves exactly
    lum = np.where((r == g) & (g == b), r, lum)
    return np.broadcast_to(lum, image.shape).astype(image.dtype)


# ---------------------------------------------------------------------------
# Shape rendering
# ---------------------------------------------------------------------------

def _shape_rng(label: int, seed: int) -> np.random.Generator:
    return np.random.default_rng([int(seed) & ((1 << 64) - 1), int(label), 7])


def _geometry(label: int, rng: np.random.Generator) -> dict:
    g = {
        "cx": rng.uniform(-0.06, 0.06),
        "cy": rng.uniform(-0.06, 0.06),
        "theta": rng.uniform(0, 2 * np.pi),
    }
    if label == 0:
        g["r_out"] = rng.uniform(0.26, 0.34)
        g["r_in"] = g["r_out"] * rng.uniform(0.5, 0.65)
    elif label == 1:
        g["r"] = rng.uniform(0.27, 0.34)
        g["r_cut"] = g["r"] * rng.uniform(0.85, 0.95)
        g["offset"] = g["r"] * rng.uniform(0.35, 0.5)
    elif label == 2:
        g["r1"] = rng.uniform(0.15, 0.19)
        g["r2"] = g["r1"] * rng.uniform(0.75, 0.95)
    elif label == 3:
        g["r"] = rng.uniform(0.25, 0.32)
        g["r_notch"] = g["r"] * rng.uniform(0.28, 0.38)
    else:
        raise ValueError(f"label must be in 0..{N_CLASSES - 1}, got {label}")
    return g


def _mask_from_geometry(label: int, g: dict, size: int, supersample: int = 1,
                        scale: float = 1.0) -> np.ndarray:
    n = size * supersample
    coords = ((np.arange(n) + 0.5) / n - 0.5) / scale
    yy, xx = np.meshgrid(coords, coords, indexing="ij")
    x0, y0 = xx - g["cx"], yy - g["cy"]
    c, s = math.cos(g["theta"]), math.sin(g["theta"])
    u = c * x0 + s * y0
    v = -s * x0 + c * y0
    rad = np.hypot(u, v)
    if label == 0:
        m = (rad <= g["r_out"]) & (rad >= g["r_in"])
    elif label == 1:
        m = (rad <= g["r"]) & (np.hypot(u - g["offset"], v) > g["r_cut"])
    elif label == 2:
        r1, r2 = g["r1"], g["r2"]
        m = (np.hypot(u + r1, v) <= r1) | (np.hypot(u - r2, v) <= r2)
    else:
        m = (rad <= g["r"]) & (np.hypot(u, v - g["r"]) > g["r_notch"])
    if supersample > 1:
        m = m.reshape(size, supersample, size, supersample).mean(axis=(1, 3))
    return m


def shape_mask(label: int, size: int, seed: int) -> np.ndarray:
    """Hard boolean mask of the object drawn by ``generate_sample``."""
    return _mask_from_geometry(label, _geometry(label, _shape_rng(label, seed)), size).astype(bool)


def _hsl_color(h, s, l):
    return hsl_to_rgb(np.array(h), np.array(s), np.array(l)).reshape(3, 1, 1)


def _render_macro(alpha: np.ndarray, rng: np.random.Generator) -> np.ndarray:
    size = alpha.shape[0]
    bg = np.full((3, 1, 1), rng.uniform(0.85, 0.95)) + rng.uniform(-0.02, 0.02, size=(3, 1, 1))
    fg = _hsl_color(rng.uniform(0, 360), rng.uniform(0.55, 0.9), rng.uniform(0.3, 0.5))
    # gentle directional shading on the object
    yy, xx = np.mgrid[0:size, 0:size] / size - 0.5
    shade = 1 + 0.15 * (xx * math.cos(rng.uniform(0, 6.3)) + yy * math.sin(rng.uniform(0, 6.3)))
    img = bg * (1 - alpha) + np.clip(fg * shade, 0, 1) * alpha
    img = img + rng.normal(0, 0.01, size=img.shape)
    return img


# Corruption strength of the micro domain.
MICRO_STYLE = {
    "scale": (0.55, 0.8),  # object size relative to the macro rendering
    "hue_band": (250.0, 330.0),  # stain hue range, degrees
    "fg_lightness": (0.35, 0.55),
    "grain": 0.4,
    "debris": (2, 8),  # count range
    "debris_radius": (0.025, 0.07),
    "neighbours": (0, 3),  # partial host cells entering from the border
    "blur": (0.5, 1.5),
    "speckle": 0.1,
    "noise": 0.04,
}


def _render_micro(alpha: np.ndarray, rng: np.random.Generator) -> np.ndarray:
    st = MICRO_STYLE
    size = alpha.shape[0]
    stain_hue = rng.uniform(*st["hue_band"])
    bg = _hsl_color(stain_hue, rng.uniform(0.2, 0.65), rng.uniform(0.6, 0.85))
    fg = _hsl_color(stain_hue + rng.uniform(-40, 40), rng.uniform(0.3, 0.8), rng.uniform(*st["fg_lightness"]))
    # granular texture inside the cell body
    grain = ndimage.gaussian_filter(rng.normal(0, 1, size=(size, size)), 1.0)
    grain = 1 + st["grain"] * grain / (np.abs(grain).max() + 1e-9)
    body = alpha.copy()
    # faint halo of the host cell around the object
    halo = ndimage.gaussian_filter(alpha, size * 0.06)
    halo = 0.35 * halo / (halo.max() + 1e-9)
    img = bg * (1 - halo) + bg * 0.8 * halo
    yy, xx = np.mgrid[0:size, 0:size] / size
    # neighbouring cells cut by the frame
    for _ in range(rng.integers(st["neighbours"][0], st["neighbours"][1] + 1)):
        ang = rng.uniform(0, 2 * np.pi)
        cy, cx = 0.5 + 0.75 * np.sin(ang), 0.5 + 0.75 * np.cos(ang)
        cell = ((yy - cy) ** 2 + (xx - cx) ** 2) <= rng.uniform(0.3, 0.45) ** 2
        img = np.where(cell, img * rng.uniform(0.8, 0.92), img)
    img = img * (1 - body) + np.clip(fg * grain, 0, 1) * body
    # small stained debris
    for _ in range(rng.integers(st["debris"][0], st["debris"][1] + 1)):
        cy, cx = rng.uniform(0.05, 0.95, size=2)
        r = rng.uniform(*st["debris_radius"])
        dot = ((yy - cy) ** 2 + (xx - cx) ** 2) <= r * r
        img = np.where(dot, img * rng.uniform(0.55, 0.85), img)
    sigma = rng.uniform(*st["blur"])
    img = np.stack([ndimage.gaussian_filter(ch, sigma) for ch in img])
    contrast = rng.uniform(0.7, 1.2)
    brightness = rng.uniform(-0.1, 0.1)
    img = (img - img.mean()) * contrast + img.mean() + brightness
    img = img * (1 + rng.normal(0, st["speckle"], size=img.shape)) + rng.normal(0, st["noise"], size=img.shape)
    return img


def quantize(image: np.ndarray) -> np.ndarray:
    """Round to 8-bit levels so PNG storage is lossless."""
    return (np.round(np.clip(image, 0, 1) * 255) / 255).astype(np.float32)


def generate_sample(label: int, domain: str, size: int = 64, seed: int = 0) -> Sample:
    """Render one image; deterministic in ``(label, domain, size, seed)``."""
    if size < 32:
        raise ValueError(f"size must be >= 32, got {size}")
    if domain not in ("macro", "micro"):
        raise ValueError(f"domain must be 'macro' or 'micro', got {domain!r}")
    g = _geometry(label, _shape_rng(label, seed))
    rng = np.random.default_rng([int(seed) & ((1 << 64) - 1), int(label), DOMAINS.index(domain) + 11])
    if domain == "macro":
        img = _render_macro(_mask_from_geometry(label, g, size, supersample=3), rng)
    else:
        scale = rng.uniform(*MICRO_STYLE["scale"])
        img = _render_micro(_mask_from_geometry(label, g, size, supersample=3, scale=scale), rng)
    return Sample(quantize(img), int(label), domain, int(seed))


# ---------------------------------------------------------------------------
# Splits
# ---------------------------------------------------------------------------

def sample_seed(master: int, split: str, label: int, index: int) -> int:
    """Seed ranges are disjoint by construction: master | split | class | index."""
    return (int(master) << 32) | (SPLITS.index(split) << 28) | (int(label) << 24) | int(index)


def make_splits(spec: SplitSpec) -> Dataset:
    spec.validate()
    ds = Dataset(spec)
    for split in SPLITS:
        domain = "macro" if split == "macro" else "micro"
        n = getattr(spec, split)
        # interleave classes so any prefix stays roughly balanced
        for i in range(n):
            for label in range(N_CLASSES):
                s = generate_sample(label, domain, spec.size, sample_seed(spec.seed, split, label, i))
                if split == "unlabeled":
                    ds.unlabeled_truth.append(s.label)
                    s.label = None
                ds.split(split).append(s)
    # quantised like every stored image so PNG round trips stay exact
    ds.test_colordropped = [Sample(quantize(color_drop(s.image)), s.label, s.domain, s.seed) for s in ds.test]
    seeds = [s.seed for split in SPLITS for s in ds.split(split)]
    assert len(seeds) == len(set(seeds)), "split seeds collide"
    return ds


def to_array(samples: List[Sample]) -> np.ndarray:
    if not samples:
        return np.zeros((0, 3, 0, 0), dtype=np.float32)
    return np.stack([s.image for s in samples]).astype(np.float32)


def labels_of(samples: List[Sample]) -> np.ndarray:
    return np.array([-1 if s.label is None else s.label for s in samples], dtype=np.int64)


# ---------------------------------------------------------------------------
# Disk format: 8-bit RGB PNGs plus manifest.json
# ---------------------------------------------------------------------------

def save_png(image: np.ndarray, path: Path) -> None:
    from PIL import Image

    arr = np.round(np.clip(image, 0, 1) * 255).astype(np.uint8).transpose(1, 2, 0)
    Image.fromarray(arr, mode="RGB").save(path, format="PNG")


def load_png(path: Path) -> np.ndarray:
    from PIL import Image

    with Image.open(path) as im:
        arr = np.asarray(im.convert("RGB"), dtype=np.float32) / 255.0
    return arr.transpose(2, 0, 1).copy()


def write_dataset(ds: Dataset, out_dir) -> dict:
    out = Path(out_dir)
    manifest = ds.manifest()
    for split in SPLITS + ("test_colordropped",):
        (out / split).mkdir(parents=True, exist_ok=True)
    for entry, s in zip(manifest["samples"], _iter_samples(ds)):
        save_png(s.image, out / entry["path"])
    with open(out / "manifest.json", "w") as f:
        json.dump(manifest, f, indent=1, sort_keys=True)
    return manifest


def _iter_samples(ds: Dataset):
    for split in SPLITS + ("test_colordropped",):
        yield from ds.split(split)


def read_dataset(data_dir) -> Dataset:
    root = Path(data_dir)
    path = root / "manifest.json"
    if not path.exists():
        raise FileNotFoundError(f"no manifest.json under {root}")
    with open(path) as f:
        manifest = json.load(f)
    ds = Dataset(SplitSpec(**manifest["spec"]))
    for entry in manifest["samples"]:
        img = load_png(root / entry["path"])
        ds.split(entry["split"]).append(Sample(img, entry["label"], entry["domain"], entry["seed"]))
    return ds


def class_counts(samples: List[Sample]) -> Dict[int, int]:
    counts = {c: 0 for c in range(N_CLASSES)}
    for s in samples:
        if s.label is not None:
            counts[s.label] += 1
    return counts
