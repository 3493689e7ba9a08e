import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from microcl import autodiff as ad
from microcl import checkpoint as ckpt
from microcl.contrastive import Model, TrainConfig, embed


def sample_checkpoint(seed=0):
    cfg = TrainConfig(base_channels=2, z_dim=8, hidden=10, v_dim=4)
    model = Model.from_config(cfg)
    params = model.init(seed)
    rng = np.random.default_rng(seed)
    return ckpt.Checkpoint(
        extractor=model.extractor, head=model.head, params=params,
        ema={k: v + 1 for k, v in params.items()}, velocity=ad.zeros_like_params(params),
        lr=1e-4, momentum=0.9, queue=rng.normal(size=(6, 4)).astype(np.float32), queue_cursor=2, queue_fill=6,
        rng_state=np.random.default_rng(3).bit_generator.state, iteration=17,
        loss_log=[[1, 0.5, 1.25, 1.75]], config_hash="abc", extra={"note": "x"},
    )


def test_round_trip_is_byte_identical(tmp_path):
    ck = sample_checkpoint()
    ckpt.save(ck, tmp_path / "a.bin")
    back = ckpt.load(tmp_path / "a.bin")
    assert ckpt.to_bytes(back) == (tmp_path / "a.bin").read_bytes()
    assert back.iteration == 17 and back.queue_cursor == 2 and back.extra == {"note": "x"}
    assert back.extractor == ck.extractor and back.head == ck.head
    for k in ck.params:
        assert back.params[k].dtype == ck.params[k].dtype
        assert np.array_equal(back.params[k], ck.params[k])
    assert not (tmp_path / "a.bin.tmp").exists()


def test_loaded_weights_give_identical_outputs():
    ck = sample_checkpoint(4)
    back = ckpt.from_bytes(ckpt.to_bytes(ck))
    x = np.random.default_rng(0).uniform(size=(2, 3, 32, 32)).astype(np.float32)
    model = Model(ck.extractor, ck.head)
    a = embed(model, ck.params, x)
    b = embed(Model(back.extractor, back.head), back.params, x)
    assert a[0].tobytes() == b[0].tobytes() and a[1].tobytes() == b[1].tobytes()


def test_rng_state_survives():
    ck = sample_checkpoint()
    back = ckpt.from_bytes(ckpt.to_bytes(ck))
    a, b = np.random.default_rng(), np.random.default_rng()
    a.bit_generator.state, b.bit_generator.state = ck.rng_state, back.rng_state
    assert a.integers(1 << 60) == b.integers(1 << 60)


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 1000), st.sampled_from([np.float32, np.float64, np.int64]))
def test_arbitrary_tensors_round_trip(seed, dtype):
    rng = np.random.default_rng(seed)
    ck = sample_checkpoint()
    ck.params = {f"t{i}": (rng.normal(size=tuple(rng.integers(1, 4, size=rng.integers(0, 4)))) * 100).astype(dtype)
                 for i in range(3)}
    raw = ckpt.to_bytes(ck)
    back = ckpt.from_bytes(raw)
    assert all(np.array_equal(back.params[k], ck.params[k]) and back.params[k].shape == ck.params[k].shape
               for k in ck.params)
    assert ckpt.to_bytes(back) == raw


@pytest.mark.parametrize("mangle,match", [
    (lambda raw: b"XXXXXXXX" + raw[8:], "magic"),
    (lambda raw: raw[:-3], "truncated"),
    (lambda raw: raw + b"\0", "trailing"),
    (lambda raw: raw[:8] + b"\x09" + raw[9:], "version"),
    (lambda raw: raw[:25] + b"\xff\xff" + raw[27:], "header"),
])
def test_corrupt_files_are_rejected(mangle, match):
    raw = ckpt.to_bytes(sample_checkpoint())
    with pytest.raises(ckpt.CheckpointError, match=match):
        ckpt.from_bytes(mangle(raw))
