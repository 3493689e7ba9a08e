import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from microcl import autodiff as ad
from microcl import style as st_mod
from microcl.data import Sample, generate_sample
from microcl.networks import build_extractor
from microcl.style import (FeatureNet, StyleConfig, average_style, extract_features, gram_matrix, pre_loss,
                           stylize, stylize_batch, stylize_dataset)


@pytest.fixture(scope="module")
def fnet():
    net = build_extractor(base_channels=4, z_dim=16)
    return FeatureNet(net, ad.init_params(net, 0, np.float32))


@pytest.fixture(scope="module")
def fnet64():
    net = build_extractor(base_channels=4, z_dim=16)
    return FeatureNet(net, ad.init_params(net, 1, np.float64))


def naive_gram(f):
    n, h, w = f.shape
    g = np.zeros((n, n))
    for i in range(n):
        for j in range(n):
            g[i, j] = sum(f[i, a, b] * f[j, a, b] for a in range(h) for b in range(w))
    return g / (n * h * w)


def test_gram_matches_loop_oracle():
    f = np.random.default_rng(0).normal(size=(3, 4, 5))
    assert np.allclose(gram_matrix(f), naive_gram(f), atol=1e-12)
    batch = np.stack([f, 2 * f])
    assert np.allclose(gram_matrix(batch)[1], 4 * naive_gram(f), atol=1e-12)


@settings(max_examples=50, deadline=None)
@given(st.integers(0, 10_000), st.integers(1, 8), st.integers(1, 6))
def test_gram_is_symmetric_psd(seed, n, hw):
    f = np.random.default_rng(seed).normal(size=(n, hw, hw + 1))
    g = gram_matrix(f)
    assert np.array_equal(g, g.T)
    assert np.linalg.eigvalsh(g).min() >= -1e-8


def test_gram_of_network_features_is_psd(fnet):
    img = generate_sample(0, "micro", 64, 3).image
    for stage, f in extract_features(fnet, img).items():
        g = gram_matrix(f.astype(np.float64))
        assert np.allclose(g, g.T) and np.linalg.eigvalsh(g).min() >= -1e-8, stage


def test_average_style_is_elementwise_mean(fnet):
    imgs = [generate_sample(2, "micro", 32, s).image for s in range(3)]
    avg = average_style(fnet, imgs, ["stage1", "stage2"])
    singles = [average_style(fnet, [im], ["stage1", "stage2"]) for im in imgs]
    for layer in ("stage1", "stage2"):
        assert np.allclose(avg[layer], np.mean([s[layer] for s in singles], axis=0), atol=1e-6)
    with pytest.raises(ValueError):
        average_style(fnet, [])


def test_style_config_validation():
    with pytest.raises(ValueError, match="disjoint"):
        StyleConfig(content_layers=("stage4",), style_layers=("stage4",)).validate()
    with pytest.raises(ValueError):
        StyleConfig(content_layers=("stage9",)).validate()
    with pytest.raises(ValueError):
        StyleConfig(init="zeros").validate()
    with pytest.raises(ValueError):
        StyleConfig(layer_weights=(("stage1", 0.0),)).validate()
    w = StyleConfig().weights()
    assert w["stage5"] == 1.0 and w["stage1"] == 0.25


def test_pre_loss_vanishes_at_its_own_targets(fnet):
    cfg = StyleConfig()
    x = generate_sample(1, "micro", 32, 4).image
    target = extract_features(fnet, x, cfg.content_layers)
    gbar = average_style(fnet, [x], cfg.style_layers)
    res = pre_loss(fnet, x, target, gbar, cfg)
    assert res.total[0] == pytest.approx(0, abs=1e-10)
    assert np.abs(res.grad).max() < 1e-6


def test_pre_loss_combines_content_and_style(fnet):
    cfg = StyleConfig(lambda_s=0.5)
    x = generate_sample(1, "macro", 32, 4).image
    other = generate_sample(3, "micro", 32, 5).image
    res = pre_loss(fnet, x, extract_features(fnet, other, cfg.content_layers),
                   average_style(fnet, [other], cfg.style_layers), cfg, need_grad=False)
    assert res.grad is None
    assert res.total[0] == pytest.approx(res.content[0] + 0.5 * res.style[0])
    assert res.content[0] > 0 and res.style[0] > 0


@pytest.mark.parametrize("seed", range(20))
def test_pre_loss_pixel_gradient(fnet64, seed):
    rng = np.random.default_rng(seed)
    cfg = StyleConfig(lambda_s=float(rng.choice([1e-3, 1.0, 100.0])))
    x = rng.uniform(size=(3, 32, 32))
    ref = rng.uniform(size=(2, 3, 32, 32))
    target = extract_features(fnet64, ref[0], cfg.content_layers)
    gbar = average_style(fnet64, list(ref), cfg.style_layers)
    res = pre_loss(fnet64, x, target, gbar, cfg)
    idx = [tuple(rng.integers(s) for s in x.shape) for _ in range(12)]
    num = ad.numeric_grad(lambda: float(pre_loss(fnet64, x, target, gbar, cfg, need_grad=False).total[0]),
                          x, idx, step=1e-7)
    assert ad.relative_error(np.array([res.grad[i] for i in idx]), num) < 1e-4


def test_batched_pre_loss_matches_single(fnet):
    cfg = StyleConfig()
    xs = np.stack([generate_sample(0, "macro", 32, s).image for s in range(3)])
    ref = generate_sample(0, "micro", 32, 9).image
    gbar = average_style(fnet, [ref], cfg.style_layers)
    targets = extract_features(fnet, xs, cfg.content_layers)
    batch = pre_loss(fnet, xs, targets, gbar, cfg)
    for i in range(3):
        one = pre_loss(fnet, xs[i], {k: v[i] for k, v in targets.items()}, gbar, cfg)
        assert one.total[0] == pytest.approx(batch.total[i], rel=1e-5)
        assert np.allclose(one.grad, batch.grad[i], rtol=1e-4, atol=1e-7)


def test_stylize_descends_and_is_monotone(fnet):
    cfg = StyleConfig(steps=40)
    x_s = generate_sample(2, "macro", 32, 1).image
    gbar = average_style(fnet, [generate_sample(2, "micro", 32, s).image for s in range(4)], cfg.style_layers)
    res = stylize(fnet, x_s, gbar, cfg, seed=3)
    traj = res.trajectory[0]
    assert all(b <= a for a, b in zip(traj, traj[1:]))
    assert res.final.total[0] < res.initial.total[0]
    assert res.final.total[0] == pytest.approx(traj[-1], rel=1e-6)
    assert res.image.min() >= 0 and res.image.max() <= 1
    again = stylize(fnet, x_s, gbar, cfg, seed=3)
    assert np.array_equal(res.image, again.image)


def test_content_copy_init_starts_at_content(fnet):
    cfg = StyleConfig(steps=0, init="content-copy")
    x_s = generate_sample(2, "macro", 32, 1).image
    gbar = average_style(fnet, [x_s], cfg.style_layers)
    res = stylize(fnet, x_s, gbar, cfg)
    assert np.array_equal(res.image, x_s)
    assert res.initial.content[0] == 0


def _samples(domain, labels, size=32):
    return [Sample(generate_sample(l, domain, size, 50 + i).image, l, domain, 50 + i) for i, l in enumerate(labels)]


def test_stylize_dataset_caches_results(fnet, tmp_path, monkeypatch):
    cfg = StyleConfig(steps=5)
    macro = _samples("macro", [0, 1])
    micro = _samples("micro", [0, 1, 1])
    first = stylize_dataset(fnet, macro, micro, cfg, cache_dir=tmp_path)
    assert [s.domain for s in first] == ["adapted", "adapted"]
    assert [s.label for s in first] == [0, 1]
    assert len(list(tmp_path.glob("*.png"))) == 2 and len(list(tmp_path.glob("*.json"))) == 2

    def boom(*a, **k):
        raise AssertionError("cache miss")

    monkeypatch.setattr(st_mod, "stylize_batch", boom)
    second = stylize_dataset(fnet, macro, micro, cfg, cache_dir=tmp_path)
    assert all(np.array_equal(a.image, b.image) for a, b in zip(first, second))


def test_stylize_dataset_needs_every_class(fnet):
    with pytest.raises(ValueError, match="class 2"):
        stylize_dataset(fnet, _samples("macro", [2]), _samples("micro", [0]), StyleConfig(steps=1))
