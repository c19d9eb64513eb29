import dataclasses

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from lmcat.data import SynthConfig, balanced_dataset, synth_dataset
from lmcat.errors import ConfigError, DataError, DivergenceError
from lmcat.model import LMCAT, ModelConfig, checkpoint_bytes
from lmcat import tensor as T
from lmcat.rng import substream
from lmcat.tensor import Tensor
from lmcat.train import (OptimState, StageConfig, TrainReport, adamw_step, clip_grads, code_hash, finetune,
                         finetune_config, frozen_hash, pretrain, pretrain_config, read_report_csv)

SYNTH = SynthConfig(patch=4)
TINY = ModelConfig(embed_dim=8, n_layers=2, n_heads=2, patch_size=4, token_reduce_after=1)


def param(values):
    return Tensor(np.array(values, dtype=np.float64), requires_grad=True)


# -- optimizer -----------------------------------------------------------------------
def test_zero_grad_decay_is_exact():
    w = param([1.0, -2.0, 0.5])
    state = OptimState(lr=0.1, weight_decay=0.2)
    adamw_step([w], [np.zeros(3)], state)
    assert np.array_equal(w.data, np.array([1.0, -2.0, 0.5]) * (1 - 0.1 * 0.2))


def test_first_step_closed_form():
    g = np.array([0.3, -4.0, 1e-9, 0.0])
    w = param(np.zeros(4))
    adamw_step([w], [g], OptimState(lr=0.01))
    assert np.allclose(w.data, -0.01 * g / (np.abs(g) + 1e-8), rtol=1e-12, atol=1e-18)


def test_quadratic_converges():
    w = param([1.0])
    state = OptimState(lr=0.1)
    for _ in range(200):
        adamw_step([w], [2.0 * w.data], state)
    assert abs(w.item()) < 1e-2
    assert state.step == 200


def test_moment_buffers_match_parameter_shapes():
    ps = [param(np.ones((2, 3))), param(np.ones(5))]
    state = OptimState().init(ps)
    assert [m.shape for m in state.m] == [v.shape for v in state.v] == [(2, 3), (5,)]


@settings(max_examples=25, deadline=None)
@given(st.integers(0, 2**32 - 1), st.integers(1, 6))
def test_zero_decay_is_plain_adam(seed, steps):
    rng = np.random.default_rng(seed)
    grads = [rng.standard_normal(4) for _ in range(steps)]
    w1 = param(np.ones(4))
    s1 = OptimState(lr=0.05, weight_decay=0.0)
    for g in grads:
        adamw_step([w1], [g], s1)
    # an independent Adam, written out
    m = np.zeros(4)
    v = np.zeros(4)
    w = np.ones(4)
    for t, g in enumerate(grads, 1):
        m = 0.9 * m + 0.1 * g
        v = 0.999 * v + 0.001 * g * g
        w = w - 0.05 * (m / (1 - 0.9 ** t)) / (np.sqrt(v / (1 - 0.999 ** t)) + 1e-8)
    assert np.allclose(w1.data, w, rtol=1e-13, atol=1e-15)


@settings(max_examples=20, deadline=None)
@given(st.integers(0, 2**32 - 1))
def test_replay_is_bit_exact(seed):
    rng = np.random.default_rng(seed)
    grads = [[rng.standard_normal((3, 2)), rng.standard_normal(2)] for _ in range(5)]
    results = []
    for _ in range(2):
        ps = [param(np.full((3, 2), 0.5)), param(np.zeros(2))]
        state = OptimState(lr=0.01, weight_decay=0.1)
        for g in grads:
            adamw_step(ps, [x.copy() for x in g], state)
        results.append(b"".join(p.data.tobytes() for p in ps))
    assert results[0] == results[1]


def test_nan_grad_names_parameter():
    w = param([1.0, 2.0])
    with pytest.raises(DivergenceError, match="layers.0.wq"):
        adamw_step([w], [np.array([0.0, np.nan])], OptimState(), names=["layers.0.wq"])
    assert np.array_equal(w.data, [1.0, 2.0])


def test_clip_grads():
    grads = [np.array([3.0, 4.0]), np.array([12.0])]
    clipped, hit = clip_grads(grads, 6.5)
    assert hit and abs(np.sqrt(sum((g ** 2).sum() for g in clipped)) - 6.5) < 1e-9
    same, hit = clip_grads(grads, 100.0)
    assert not hit and same is grads


# -- stage configs -------------------------------------------------------------------
def test_stage_defaults():
    pre, ft = pretrain_config(), finetune_config()
    assert (pre.lr, pre.beta1, pre.beta2, pre.batch_size, pre.epochs) == (3e-4, 0.9, 0.999, 128, 50)
    assert (ft.lr, ft.weight_decay, ft.batch_size, ft.epochs) == (1e-3, 0.0, 32, 10)
    assert {"adapters", "umaa"} <= set(ft.frozen)


def test_stage_validation():
    with pytest.raises(ConfigError):
        StageConfig(stage="warmup")
    with pytest.raises(ConfigError):
        finetune_config(frozen=("adapters",))
    with pytest.raises(ConfigError):
        pretrain(LMCAT(TINY), synth_dataset(2, 0, SYNTH), finetune_config())


# -- pretraining ---------------------------------------------------------------------
@pytest.fixture(scope="module")
def unlabeled():
    return synth_dataset(24, 3, SYNTH, labeled=False)


def test_pretrain_lr_zero_leaves_weights(unlabeled):
    model = LMCAT(TINY, seed=0)
    before = checkpoint_bytes(model)
    report = pretrain(model, unlabeled, pretrain_config(epochs=2, batch_size=8, lr=0.0, weight_decay=0.01))
    assert checkpoint_bytes(model) == before
    # same samples, different batch order: equal up to summation order
    assert len(report.losses) == 2 and abs(report.losses[0] - report.losses[1]) < 1e-12 * report.losses[0]


def test_pretrain_is_deterministic(unlabeled):
    cfg = pretrain_config(epochs=2, batch_size=8, seed=4)
    runs = []
    for _ in range(2):
        model = LMCAT(TINY, seed=1)
        runs.append((pretrain(model, unlabeled, cfg).losses, checkpoint_bytes(model)))
    assert runs[0] == runs[1]


def test_pretrain_reduces_loss(unlabeled):
    model = LMCAT(TINY, seed=2)
    report = pretrain(model, unlabeled, pretrain_config(epochs=6, batch_size=8, lr=3e-3))
    assert report.losses[-1] < report.losses[0]
    assert frozen_hash(model, ("head",)) == frozen_hash(LMCAT(TINY, seed=2), ("head",))


def test_pretrain_divergence_reports_epoch(unlabeled):
    model = LMCAT(TINY, seed=0)
    model.adapters[0].w1.data[0, 0] = np.nan
    with pytest.raises(DivergenceError, match="epoch 0, step 0"):
        pretrain(model, unlabeled, pretrain_config(epochs=1, batch_size=8))


def test_pretrain_empty_dataset():
    with pytest.raises(DataError):
        pretrain(LMCAT(TINY), synth_dataset(0, 0, SYNTH), pretrain_config(epochs=1))


# -- fine-tuning ---------------------------------------------------------------------
@pytest.fixture(scope="module")
def labeled():
    return balanced_dataset(20, 5, SYNTH)


def test_finetune_freezes_backbone(labeled):
    model = LMCAT(TINY, seed=3)
    head_before = model.head_w.data.copy()
    report = finetune(model, labeled, finetune_config(epochs=2))
    assert report.frozen_hash_before == report.frozen_hash_after
    assert frozen_hash(model, ("adapters", "umaa")) == frozen_hash(LMCAT(TINY, seed=3), ("adapters", "umaa"))
    assert not np.array_equal(head_before, model.head_w.data)


def test_cached_head_training_matches_full_forward(labeled):
    cfg = finetune_config(epochs=3, batch_size=8, lr=1e-2)
    cached = LMCAT(TINY, seed=0)
    report = finetune(cached, labeled, cfg)

    # same schedule, but the frozen backbone runs forward on every step
    manual = LMCAT(TINY, seed=0)
    params = manual.head_params()
    state = OptimState(cfg.lr, cfg.beta1, cfg.beta2, weight_decay=cfg.weight_decay).init(params)
    rng = substream(cfg.seed, "batching")
    sar, opt = labeled.sar, labeled.opt
    for _ in range(cfg.epochs):
        order = rng.permutation(len(labeled))
        for s in range(0, len(labeled), cfg.batch_size):
            idx = order[s:s + cfg.batch_size]
            manual.zero_grad()
            logits, _ = manual.forward(Tensor(sar[idx]), Tensor(opt[idx]))
            loss = T.cross_entropy(logits, labeled.labels[idx])
            loss.backward()
            grads, _ = clip_grads([p.grad for p in params], cfg.clip_norm)
            adamw_step(params, grads, state)
    assert np.allclose(cached.head_w.data, manual.head_w.data, rtol=1e-9, atol=1e-12)
    assert report.frozen_hash_before == report.frozen_hash_after


def test_finetune_lowers_training_loss(labeled):
    report = finetune(LMCAT(TINY, seed=0), labeled, finetune_config(epochs=40, lr=1e-2))
    # random 8-dim features are weak; the head only has to beat the uniform predictor
    first, last = report.epochs[0], report.epochs[-1]
    assert last.loss < min(first.loss, np.log(11)) - 0.1
    assert last.accuracy > 2 / 11


def test_finetune_end_to_end_moves_backbone(labeled):
    model = LMCAT(TINY, seed=0)
    before = frozen_hash(model, ("adapters", "umaa"))
    finetune(model, labeled.subset(list(range(22))), finetune_config(epochs=1, frozen=()))
    assert frozen_hash(model, ("adapters", "umaa")) != before


def test_finetune_rejects_bad_sets(labeled):
    with pytest.raises(DataError):
        finetune(LMCAT(TINY), labeled.subset([]))
    with pytest.raises(DataError):
        finetune(LMCAT(TINY), labeled.unlabeled())


# -- reports -------------------------------------------------------------------------
def test_report_csv_round_trip(unlabeled):
    model = LMCAT(TINY, seed=0)
    report = pretrain(model, unlabeled, pretrain_config(epochs=2, batch_size=12, seed=7))
    text = report.to_csv()
    assert text.splitlines()[0].startswith('# stage: "pretrain"')
    assert f'# code_hash: "{code_hash()}"' in text
    rows = read_report_csv(text)
    assert [float(r["loss"]) for r in rows] == report.losses
    assert [int(r["epoch"]) for r in rows] == [0, 1]
    assert rows[0].keys() == {"epoch", "loss", "lr", "wall_ms", "clip_events"}


def test_code_hash_is_git_blob_style():
    import hashlib

    from lmcat import __version__

    body = f"lmcat {__version__}".encode()
    assert code_hash() == hashlib.sha1(f"blob {len(body)}\0".encode() + body).hexdigest()
    assert isinstance(TrainReport("pretrain", 0, {}).clip_events, int)


def test_float32_training_keeps_dtype(unlabeled):
    model = LMCAT(dataclasses.replace(TINY), seed=0, dtype=np.float32)
    pretrain(model, unlabeled, pretrain_config(epochs=1, batch_size=8))
    assert all(p.data.dtype == np.float32 for p in model.parameters())
