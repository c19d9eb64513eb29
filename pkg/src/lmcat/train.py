"""Two-stage training: contrastive pretraining of the backbone, then head-only fine-tuning."""

from __future__ import annotations

import csv
import dataclasses
import hashlib
import io
import json
import logging
import math
import time
from dataclasses import dataclass, field

import numpy as np

from . import __version__
from . import tensor as T
from .data import Dataset
from .errors import ConfigError, DataError, DivergenceError
from .model import LMCAT, state_hash
from .rng import substream
from .tensor import Tensor

logger = logging.getLogger(__name__)

CLIP_NORM = 5.0


# -- optimizer ---------------------------------------------------------------------
@dataclass
class OptimState:
    """Adam/AdamW moments and hyperparameters. ``weight_decay=0`` gives plain Adam."""

    lr: float = 3e-4
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    weight_decay: float = 0.0
    step: int = 0
    m: list = field(default_factory=list)
    v: list = field(default_factory=list)

    def init(self, params) -> "OptimState":
        self.m = [np.zeros_like(p.data) for p in params]
        self.v = [np.zeros_like(p.data) for p in params]
        self.step = 0
        return self


def adamw_step(params, grads, state: OptimState, names=None):
    """One AdamW update, in place.

    Decay is decoupled: weights are multiplied by ``1 - lr * weight_decay``
    before the bias-corrected Adam step, independent of the gradient.
    """
    if not state.m:
        state.init(params)
    if len(grads) != len(params) or len(state.m) != len(params):
        raise ConfigError("params, grads and optimizer state have different lengths")
    for i, g in enumerate(grads):
        if not np.all(np.isfinite(g)):
            label = names[i] if names else f"#{i}"
            raise DivergenceError(f"non-finite gradient for parameter {label}")
    state.step += 1
    t = state.step
    b1, b2, lr = state.beta1, state.beta2, state.lr
    c1 = 1.0 - b1 ** t
    c2 = 1.0 - b2 ** t
    for p, g, m, v in zip(params, grads, state.m, state.v):
        w = p.data
        if state.weight_decay:
            w *= w.dtype.type(1.0 - lr * state.weight_decay)
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * (g * g)
        w -= (lr * (m / c1) / (np.sqrt(v / c2) + state.eps)).astype(w.dtype, copy=False)
    return params


def clip_grads(grads, max_norm: float = CLIP_NORM) -> tuple[list, bool]:
    norm = T.global_norm(grads)
    if norm > max_norm:
        scale = max_norm / (norm + 1e-12)
        return [g * g.dtype.type(scale) for g in grads], True
    return grads, False


# -- reports -----------------------------------------------------------------------
@dataclass
class EpochRecord:
    epoch: int
    loss: float
    lr: float
    wall_ms: float
    clip_events: int
    accuracy: float | None = None


@dataclass
class TrainReport:
    stage: str
    seed: int
    config: dict
    epochs: list = field(default_factory=list)
    frozen_hash_before: str | None = None
    frozen_hash_after: str | None = None
    extra: dict = field(default_factory=dict)

    @property
    def losses(self) -> list[float]:
        return [e.loss for e in self.epochs]

    @property
    def clip_events(self) -> int:
        return sum(e.clip_events for e in self.epochs)

    def header(self) -> dict:
        return {"stage": self.stage, "seed": self.seed, "config": self.config, "code_hash": code_hash(),
                "frozen_hash_before": self.frozen_hash_before, "frozen_hash_after": self.frozen_hash_after,
                **self.extra}

    def to_csv(self) -> str:
        buf = io.StringIO()
        for k, v in self.header().items():
            buf.write(f"# {k}: {json.dumps(v, sort_keys=True)}\n")
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["epoch", "loss", "lr", "wall_ms", "clip_events"])
        for e in self.epochs:
            w.writerow([e.epoch, repr(e.loss), repr(e.lr), f"{e.wall_ms:.1f}", e.clip_events])
        return buf.getvalue()

    def write(self, path) -> None:
        with open(path, "w", encoding="utf-8") as fh:
            fh.write(self.to_csv())


def read_report_csv(text: str) -> list[dict]:
    rows = [ln for ln in text.splitlines() if not ln.startswith("#")]
    return list(csv.DictReader(rows))


def code_hash() -> str:
    """Git-blob-style SHA-1 of the package version string."""
    body = f"lmcat {__version__}".encode()
    return hashlib.sha1(b"blob %d\0" % len(body) + body).hexdigest()


# -- stages ------------------------------------------------------------------------
@dataclass(frozen=True)
class StageConfig:
    """Settings of one training stage.

    ``frozen`` lists parameter groups ("adapters", "umaa", "head") left untouched.
    """

    stage: str = "pretrain"
    epochs: int = 50
    batch_size: int = 128
    lr: float = 3e-4
    weight_decay: float = 0.01
    beta1: float = 0.9
    beta2: float = 0.999
    seed: int = 0
    frozen: tuple = ("head",)
    clip_norm: float = CLIP_NORM

    def __post_init__(self):
        if self.stage not in ("pretrain", "finetune"):
            raise ConfigError(f"unknown stage {self.stage!r}")
        if self.epochs < 0 or self.batch_size < 1:
            raise ConfigError("epochs must be >= 0 and batch_size >= 1")
        object.__setattr__(self, "frozen", tuple(self.frozen))
        if self.stage == "finetune" and not {"adapters", "umaa"} <= set(self.frozen) and self.frozen != ():
            raise ConfigError("finetune freezes the adapter and alignment groups (or nothing, for end-to-end baselines)")

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)


def pretrain_config(**kw) -> StageConfig:
    """Stage-1 defaults: AdamW lr 3e-4, betas (0.9, 0.999), batch 128, 50 epochs."""
    return StageConfig(**{"stage": "pretrain", "frozen": ("head",), **kw})


def finetune_config(**kw) -> StageConfig:
    """Stage-2 defaults: Adam lr 1e-3, batch 32, 10 epochs, backbone frozen."""
    base = {"stage": "finetune", "epochs": 10, "batch_size": 32, "lr": 1e-3, "weight_decay": 0.0,
            "frozen": ("adapters", "umaa")}
    return StageConfig(**{**base, **kw})


# Desk-scale recipe. A few hundred optimizer steps replace the reference
# schedule's thousands, so both stages step harder. The pretraining temperature
# equals the attention scale sqrt(d_k); much smaller values make the deeper
# layers' scores collapse to uniform instead of aligning.
DESK_PRETRAIN = {"epochs": 20, "batch_size": 32, "lr": 1e-3}
DESK_FINETUNE = {"epochs": 100, "batch_size": 32, "lr": 1e-2}


def desk_tau(embed_dim: int = 128, n_heads: int = 4) -> float:
    return math.sqrt(embed_dim // n_heads)


def _trainable(model: LMCAT, frozen) -> tuple[list[str], list[Tensor]]:
    names, params = [], []
    for group, items in model.param_groups().items():
        if group in frozen:
            continue
        for n, p in items:
            names.append(n)
            params.append(p)
    return names, params


def frozen_hash(model: LMCAT, frozen) -> str:
    return state_hash(p for g, items in model.param_groups().items() if g in frozen for _, p in items)


def _batches(n: int, batch_size: int, rng: np.random.Generator):
    order = rng.permutation(n)
    for s in range(0, n, batch_size):
        yield order[s:s + batch_size]


def _inputs(model: LMCAT, ds: Dataset, idx):
    dt = model.dtype
    return Tensor(ds.sar[idx].astype(dt)), Tensor(ds.opt[idx].astype(dt))


def pretrain(model: LMCAT, ds: Dataset, cfg: StageConfig = StageConfig()) -> TrainReport:
    """Minimize the layer-averaged alignment loss over unlabeled pairs."""
    if cfg.stage != "pretrain":
        raise ConfigError("pretrain() needs a pretrain-stage config")
    report = TrainReport("pretrain", cfg.seed, {"stage": cfg.to_dict(), "model": model.config.to_dict()})
    names, params = _trainable(model, cfg.frozen)
    state = OptimState(cfg.lr, cfg.beta1, cfg.beta2, weight_decay=cfg.weight_decay).init(params)
    rng = substream(cfg.seed, "batching")
    if len(ds) == 0:
        raise DataError("pretraining on an empty dataset")
    for epoch in range(cfg.epochs):
        t0 = time.perf_counter()
        total, count, clips = 0.0, 0, 0
        for step, idx in enumerate(_batches(len(ds), cfg.batch_size, rng)):
            model.zero_grad()
            _, loss = model.encode(*_inputs(model, ds, idx))
            value = loss.item()
            if not math.isfinite(value):
                raise DivergenceError(f"alignment loss is {value} at epoch {epoch}, step {step}")
            total += value * len(idx)
            count += len(idx)
            if not loss.requires_grad or cfg.lr == 0:
                continue
            loss.backward()
            grads, clipped = clip_grads([p.grad for p in params], cfg.clip_norm)
            clips += int(clipped)
            adamw_step(params, grads, state, names)
        rec = EpochRecord(epoch, total / count, cfg.lr, (time.perf_counter() - t0) * 1e3, clips)
        report.epochs.append(rec)
        logger.info("pretrain epoch %d loss %.5f clips %d", epoch, rec.loss, clips)
    return report


def extract_features(model: LMCAT, ds: Dataset, batch_size: int = 64) -> np.ndarray:
    """Pooled backbone features, (n, embed_dim)."""
    out = np.zeros((len(ds), model.config.embed_dim), dtype=model.dtype)
    with T.no_grad():
        for s in range(0, len(ds), batch_size):
            idx = np.arange(s, min(s + batch_size, len(ds)))
            out[idx] = model.features(*_inputs(model, ds, idx)).data
    return out


def finetune(model: LMCAT, ds: Dataset, cfg: StageConfig | None = None) -> TrainReport:
    """Cross-entropy training of the unfrozen groups on a labeled subset.

    With the backbone frozen its pooled features are computed once; training the
    head on them is identical to running the full forward every step.
    """
    cfg = cfg or finetune_config()
    if cfg.stage != "finetune":
        raise ConfigError("finetune() needs a finetune-stage config")
    if len(ds) == 0:
        raise DataError("fine-tuning needs at least one labeled sample")
    if np.any(ds.labels < 0):
        raise DataError("fine-tuning set contains unlabeled samples")
    report = TrainReport("finetune", cfg.seed, {"stage": cfg.to_dict(), "model": model.config.to_dict()})
    report.frozen_hash_before = frozen_hash(model, cfg.frozen)
    names, params = _trainable(model, cfg.frozen)
    state = OptimState(cfg.lr, cfg.beta1, cfg.beta2, weight_decay=cfg.weight_decay).init(params)
    rng = substream(cfg.seed, "batching")
    head_only = {"adapters", "umaa"} <= set(cfg.frozen)
    feats = extract_features(model, ds) if head_only else None
    for epoch in range(cfg.epochs):
        t0 = time.perf_counter()
        total, correct, clips = 0.0, 0, 0
        for step, idx in enumerate(_batches(len(ds), cfg.batch_size, rng)):
            model.zero_grad()
            if head_only:
                logits = model.head(Tensor(feats[idx]))
            else:
                logits, _ = model.forward(*_inputs(model, ds, idx))
            loss = T.cross_entropy(logits, ds.labels[idx])
            value = loss.item()
            if not math.isfinite(value):
                raise DivergenceError(f"cross-entropy is {value} at epoch {epoch}, step {step}")
            total += value * len(idx)
            correct += int((logits.data.argmax(axis=1) == ds.labels[idx]).sum())
            if cfg.lr == 0:
                continue
            loss.backward()
            grads, clipped = clip_grads([p.grad for p in params], cfg.clip_norm)
            clips += int(clipped)
            adamw_step(params, grads, state, names)
        rec = EpochRecord(epoch, total / len(ds), cfg.lr, (time.perf_counter() - t0) * 1e3, clips, correct / len(ds))
        report.epochs.append(rec)
        logger.info("finetune epoch %d loss %.5f acc %.3f", epoch, rec.loss, rec.accuracy)
    report.frozen_hash_after = frozen_hash(model, cfg.frozen)
    return report
