import math

import numpy as np
import pytest

from himosa.checkpoint import decode, encode, load_checkpoint, save_checkpoint
from himosa.config import TINY, TrainConfig
from himosa.data import load_manifest
from himosa.errors import CheckpointError, DimensionError
from himosa.model import init_weights
from himosa.tensor import Tensor
from himosa import tensor as T
from himosa.train import (AdamLike, NonFiniteLossError, SGDMomentum, clip_grad_norm, l1_loss, lr_at, new_state,
                          run_training, sample_batch, train_step)

from conftest import SMOKE_MODEL, SMOKE_TRAIN

FULL_SCHEDULE = TrainConfig()


def test_lr_schedule_milestones():
    assert lr_at(FULL_SCHEDULE, 0) == 0.0
    assert lr_at(FULL_SCHEDULE, 10_000) == 5e-4
    assert lr_at(FULL_SCHEDULE, 5_000) == pytest.approx(2.5e-4, rel=1e-15)
    assert lr_at(FULL_SCHEDULE, 200_000) == pytest.approx(1.25e-4, rel=1e-15)
    assert lr_at(FULL_SCHEDULE, 249_999) == pytest.approx(5e-4 / 16, rel=1e-15)


def test_lr_piecewise_monotone():
    lrs = [lr_at(FULL_SCHEDULE, t) for t in range(0, 250_000, 500)]
    peak = lrs.index(max(lrs))
    assert all(a <= b for a, b in zip(lrs[:peak], lrs[1:peak + 1]))
    assert all(a >= b for a, b in zip(lrs[peak:], lrs[peak + 1:]))


def test_l1_loss_values_and_grad():
    p = Tensor(np.array([1.0, 2.0, 3.0]), requires_grad=True)
    assert l1_loss(p, p.data).item() == 0.0
    loss = l1_loss(p, np.array([0.5, 2.0, 4.0]))
    assert loss.item() == pytest.approx(0.5)
    T.backward(loss)
    np.testing.assert_array_equal(p.grad, [1 / 3, 0.0, -1 / 3])
    with pytest.raises(DimensionError):
        l1_loss(p, np.zeros(2))


def test_clip_grad_norm():
    w = init_weights(TINY)
    for p in w.values():
        p.grad = np.ones_like(p.data)
    norm = clip_grad_norm(w, 1.0)
    assert norm == pytest.approx(math.sqrt(w.n_scalars()))
    total = math.sqrt(sum(float((p.grad ** 2).sum()) for p in w.values()))
    assert total == pytest.approx(1.0, rel=1e-9)


@pytest.mark.parametrize("opt", [SGDMomentum, AdamLike])
def test_zero_lr_step_changes_nothing(opt):
    w = init_weights(TINY)
    before = {k: v.data.copy() for k, v in w.items()}
    for p in w.values():
        p.grad = np.ones_like(p.data)
    opt().step(w, 0.0, 0)
    assert all(np.array_equal(before[k], w[k].data) for k in w)


def test_adam_first_step_moves_by_lr():
    w = init_weights(TINY)
    p = w["head.bias"]
    p.grad = np.full(p.shape, 3.0)
    for q in w.values():
        if q is not p:
            q.grad = None
    AdamLike().step(w, 0.01, 0)
    np.testing.assert_allclose(p.data, -0.01, rtol=1e-6)


def _pairs(dataset):
    return load_manifest(dataset, SMOKE_MODEL.scale).load_pairs()


def test_sample_batch_is_deterministic(dataset):
    pairs = _pairs(dataset)
    a = sample_batch(pairs, SMOKE_TRAIN, 2, 5)
    b = sample_batch(pairs, SMOKE_TRAIN, 2, 5)
    assert len(a) == SMOKE_TRAIN.batch_size
    assert all(np.array_equal(x[0], y[0]) and np.array_equal(x[1], y[1]) for x, y in zip(a, b))
    assert a[0][0].shape == (3, 8, 8) and a[0][1].shape == (3, 16, 16)


def test_training_is_deterministic(dataset):
    pairs = _pairs(dataset)
    runs = [run_training(new_state(SMOKE_MODEL, SMOKE_TRAIN), pairs).history for _ in range(2)]
    assert runs[0] == runs[1] and len(runs[0]) == SMOKE_TRAIN.total_iters


def test_nan_loss_names_parameter(dataset):
    state = new_state(SMOKE_MODEL, SMOKE_TRAIN)
    state.weights["head.bias"].data[0] = np.nan
    with pytest.raises(NonFiniteLossError, match="head.bias"):
        train_step(state, sample_batch(_pairs(dataset), SMOKE_TRAIN, 2, 0))


def test_checkpoint_roundtrip_bit_exact(tmp_path, dataset):
    state = run_training(new_state(SMOKE_MODEL, SMOKE_TRAIN), _pairs(dataset), n_steps=2)
    save_checkpoint(state, tmp_path / "a.himo")
    loaded = load_checkpoint(tmp_path / "a.himo")
    assert loaded.iteration == 2 and loaded.model_cfg == SMOKE_MODEL and loaded.train_cfg == SMOKE_TRAIN
    for k, v in state.weights.items():
        assert v.data.tobytes() == loaded.weights[k].data.tobytes()
    save_checkpoint(loaded, tmp_path / "b.himo")
    assert (tmp_path / "a.himo").read_bytes() == (tmp_path / "b.himo").read_bytes()


def test_checkpoint_float32_and_int_tensors():
    raw = encode("seed = 1\n", [("x", np.arange(3, dtype=np.float32)), ("n", np.array(7, dtype=np.int64))])
    text, tensors = decode(raw)
    assert text == "seed = 1\n"
    assert tensors[0][1].dtype == np.float32 and tensors[1][1].shape == () and int(tensors[1][1]) == 7


def test_checkpoint_header_layout():
    raw = encode("a", [("t", np.zeros((2, 1)))])
    assert raw[:4] == b"HIMO" and raw[4:8] == (1).to_bytes(4, "little")
    assert raw[8:12] == (1).to_bytes(4, "little") and raw[12:13] == b"a"


@pytest.mark.parametrize("mutate,match", [
    (lambda b: b[:-1], "CRC|truncated"),
    (lambda b: b[:20], "CRC|truncated"),
    (lambda b: b"XXXX" + b[4:], "not a HIMO"),
    (lambda b: b[:40] + bytes([b[40] ^ 1]) + b[41:], "CRC"),
])
def test_checkpoint_corruption_detected(mutate, match):
    raw = encode("seed = 0\n", [("param/x", np.arange(6.0).reshape(2, 3))])
    with pytest.raises(CheckpointError, match=match):
        decode(mutate(raw))


def test_checkpoint_version_rejected():
    import struct
    import zlib
    raw = bytearray(encode("", []))
    raw[4:8] = struct.pack("<I", 9)
    body = bytes(raw[:-4])
    with pytest.raises(CheckpointError, match="version 9"):
        decode(body + struct.pack("<I", zlib.crc32(body)))


def test_checkpoint_into_mismatched_config(tmp_path):
    state = new_state(SMOKE_MODEL, SMOKE_TRAIN)
    save_checkpoint(state, tmp_path / "a.himo")
    with pytest.raises(DimensionError, match="blocks.0.layers.0"):
        load_checkpoint(tmp_path / "a.himo", SMOKE_MODEL.replace(n_experts=3))


def test_resume_reproduces_uninterrupted_losses(tmp_path, dataset):
    pairs = _pairs(dataset)
    full = run_training(new_state(SMOKE_MODEL, SMOKE_TRAIN), pairs).history
    part = run_training(new_state(SMOKE_MODEL, SMOKE_TRAIN), pairs, n_steps=3)
    save_checkpoint(part, tmp_path / "mid.himo")
    resumed = run_training(load_checkpoint(tmp_path / "mid.himo"), pairs)
    assert part.history + resumed.history == full
