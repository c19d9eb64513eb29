"""Metrics, misalignment sweeps, label-efficiency grids and the ablation harness."""

from __future__ import annotations

import csv
import dataclasses
import hashlib
import io
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

from . import tensor as T
from .data import Dataset, dataset_from_seeds, few_shot_split
from .errors import ContractError
from .model import LMCAT, ModelConfig, build_variant, clone, count_flops, count_params
from .rng import substream
from .tensor import Tensor
from .train import StageConfig, finetune, finetune_config, pretrain, pretrain_config

SWEEP_FRACS = (0.0, 0.1, 0.2, 0.3, 0.4, 0.5)
ABLATION_LABELS = {
    "full": "Full L-MCAT",
    "no_umaa": "- U-MAA",
    "no_contrastive": "- Contrastive Loss",
    "no_msa": "- MSA",
    "no_token_reduce": "- Token Reduction",
}


@dataclass
class ConfusionMatrix:
    counts: np.ndarray  # rows = truth, cols = prediction

    @classmethod
    def from_predictions(cls, truth, pred, classes: int) -> "ConfusionMatrix":
        cm = np.zeros((classes, classes), dtype=np.int64)
        np.add.at(cm, (np.asarray(truth, np.int64), np.asarray(pred, np.int64)), 1)
        return cls(cm)

    @property
    def total(self) -> int:
        return int(self.counts.sum())


def metrics(cm: ConfusionMatrix) -> tuple[float, float, float]:
    """(overall accuracy, average accuracy, macro F1).

    Average accuracy is the mean recall over classes that occur in the truth;
    per-class F1 with no support and no predictions counts as 0.
    """
    c = np.asarray(cm.counts, dtype=np.float64)
    total = c.sum()
    if total <= 0:
        raise ContractError("metrics of an empty confusion matrix")
    tp = np.diag(c)
    support = c.sum(axis=1)
    predicted = c.sum(axis=0)
    oa = tp.sum() / total
    present = support > 0
    aa = float(np.mean(tp[present] / support[present]))
    denom = support + predicted
    f1 = np.where(denom > 0, 2 * tp / np.where(denom > 0, denom, 1), 0.0)
    return float(oa), aa, float(f1.mean())


def predict(model: LMCAT, ds: Dataset, batch_size: int = 64) -> np.ndarray:
    preds = np.zeros(len(ds), dtype=np.int64)
    dt = model.dtype
    with T.no_grad():
        for s in range(0, len(ds), batch_size):
            idx = np.arange(s, min(s + batch_size, len(ds)))
            logits, _ = model.forward(Tensor(ds.sar[idx].astype(dt)), Tensor(ds.opt[idx].astype(dt)))
            preds[idx] = logits.data.argmax(axis=1)
    return preds


def evaluate(model: LMCAT, ds: Dataset) -> tuple[float, float, float]:
    truth = ds.labels if ds.labeled else ds.true_classes()
    return metrics(ConfusionMatrix.from_predictions(truth, predict(model, ds), model.config.classes))


def overall_accuracy(model: LMCAT, ds: Dataset) -> float:
    return evaluate(model, ds)[0]


@dataclass
class SweepResult:
    model_id: str
    seed: int
    points: list = field(default_factory=list)  # (offset_frac, OA)

    def oa(self, frac: float) -> float:
        for f, v in self.points:
            if abs(f - frac) < 1e-12:
                return v
        raise KeyError(frac)

    def drop(self, frac: float) -> float:
        return self.oa(0.0) - self.oa(frac)

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["model", "seed", "offset_frac", "oa"])
        for f, v in self.points:
            w.writerow([self.model_id, self.seed, f"{f:.1f}", f"{v:.6f}"])
        return buf.getvalue()


def misaligned_copy(ds: Dataset, frac: float, seed: int) -> Dataset:
    """Re-render ``ds`` from its scene seeds with SAR displaced by ``frac`` of the patch side."""
    out = dataset_from_seeds(ds.seeds, ds.synth, labeled=True, frac=frac, rng=substream(seed, "sweep"))
    out.labels = ds.labels.copy() if ds.labeled else out.labels
    out.ids = ds.ids.copy()
    return out


def robustness_sweep(model: LMCAT, test: Dataset, fracs: Sequence[float] = SWEEP_FRACS, seed: int = 0,
                     model_id: str = "model") -> SweepResult:
    fracs = [float(f) for f in fracs]
    if any(b <= a for a, b in zip(fracs, fracs[1:])):
        raise ContractError("sweep fractions must be strictly increasing")
    result = SweepResult(model_id, seed)
    for f in fracs:
        ds = test if f == 0.0 else misaligned_copy(test, f, seed)
        result.points.append((f, overall_accuracy(model, ds)))
    return result


# -- protocols ---------------------------------------------------------------------
def early_fusion_baseline(config: ModelConfig = ModelConfig(), seed: int = 0, dtype=np.float64) -> LMCAT:
    """Channel-concatenated input, one shared adapter, same depth, no cross-modal terms."""
    cfg = dataclasses.replace(config, fusion="early", contrastive=False)
    return LMCAT(cfg, seed=seed, dtype=dtype)


# end-to-end training reaches 100% train accuracy on a k=20 split well within this
DESK_BASELINE = {"epochs": 40, "batch_size": 32, "lr": 1e-3}


def baseline_finetune_config(**kw) -> StageConfig:
    """End-to-end supervised training for the early-fusion comparator (nothing frozen)."""
    return finetune_config(**{"frozen": (), **kw})


def two_stage(model: LMCAT, unlabeled: Dataset | None, labeled: Dataset, pre: StageConfig | None,
              ft: StageConfig) -> LMCAT:
    if pre is not None and unlabeled is not None and pre.epochs > 0:
        pretrain(model, unlabeled, pre)
    finetune(model, labeled, ft)
    return model


def label_efficiency_grid(make_pretrained: Callable[[int], LMCAT], pool: Dataset, test: Dataset,
                          ks: Sequence[int] = (5, 10, 20, 50), seeds: Sequence[int] = (0, 1, 2),
                          ft: StageConfig | None = None) -> dict[int, dict]:
    """Few-shot fine-tuning of a fresh pretrained model per (k, seed).

    ``make_pretrained(seed)`` must return a new, already pretrained model.
    Returns ``{k: {"oa": [...], "mean": m, "min": lo, "max": hi}}``.
    """
    table: dict[int, dict] = {}
    for k in ks:
        oas = []
        for s in seeds:
            labeled, _ = few_shot_split(pool, k, s)
            model = make_pretrained(s)
            finetune(model, labeled, dataclasses.replace(ft or finetune_config(), seed=s))
            oas.append(overall_accuracy(model, test))
        table[k] = {"oa": oas, "mean": float(np.mean(oas)), "min": float(np.min(oas)), "max": float(np.max(oas))}
    return table


@dataclass
class AblationRow:
    variant: str
    oa: list
    params: int
    flops: int

    @property
    def mean_oa(self) -> float:
        return float(np.mean(self.oa))


@dataclass
class AblationReport:
    rows: list
    split_hash: str
    seeds: tuple

    def row(self, variant: str) -> AblationRow:
        return next(r for r in self.rows if r.variant == variant)

    def delta(self, variant: str) -> float:
        return self.row(variant).mean_oa - self.row("full").mean_oa

    def to_csv(self) -> str:
        buf = io.StringIO()
        buf.write(f"# split_hash: {self.split_hash}\n# seeds: {list(self.seeds)}\n")
        buf.write("# OA = trace/total; AA = mean per-class recall; F1 = unweighted macro F1\n")
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["variant", "oa", "delta_oa", "params", "flops"])
        for r in self.rows:
            w.writerow([r.variant, f"{100 * r.mean_oa:.1f}", f"{100 * self.delta(r.variant):.1f}", r.params, r.flops])
        return buf.getvalue()

    def to_table(self) -> str:
        lines = [f"{'Variant':<22}{'OA':>8}{'dOA':>8}{'Params':>10}{'MACs (M)':>11}"]
        for r in self.rows:
            d = "-" if r.variant == "full" else f"{100 * self.delta(r.variant):+.1f}"
            lines.append(f"{ABLATION_LABELS[r.variant]:<22}{100 * r.mean_oa:>8.1f}{d:>8}{r.params:>10,}{r.flops / 1e6:>11.2f}")
        lines.append(f"split hash {self.split_hash}, seeds {list(self.seeds)}")
        return "\n".join(lines)


def ablation_suite(unlabeled: Dataset, pool: Dataset, test: Dataset, config: ModelConfig, k: int = 20,
                   seeds: Sequence[int] = (0, 1, 2), pre: StageConfig | None = None, ft: StageConfig | None = None,
                   variants: Sequence[str] = tuple(ABLATION_LABELS), dtype=np.float32,
                   pretrained: dict | None = None) -> AblationReport:
    """Train every variant under the same splits and seeds.

    ``pretrained`` may map ``(variant, seed)`` to an already pretrained model;
    a copy is fine-tuned so the caller's model is left as it was.
    """
    pre = pre or pretrain_config()
    ft = ft or finetune_config()
    rows = []
    split_hash = None
    for v in variants:
        oas = []
        model = None
        for s in seeds:
            labeled, _ = few_shot_split(pool, k, s)
            h = labeled.content_hash() + unlabeled.content_hash() + test.content_hash()
            split_hash = split_hash or {}
            split_hash.setdefault(s, h)
            if split_hash[s] != h:
                raise ContractError("ablation variants saw different splits")
            if pretrained is not None and (v, s) in pretrained:
                model = clone(pretrained[(v, s)])
            else:
                model = build_variant(v, config, seed=s, dtype=dtype)
                if model.config.contrastive and pre.epochs > 0:
                    pretrain(model, unlabeled, dataclasses.replace(pre, seed=s))
            finetune(model, labeled, dataclasses.replace(ft, seed=s))
            oas.append(overall_accuracy(model, test))
        rows.append(AblationRow(v, oas, count_params(model)["total"], count_flops(model.config)["total"]))
    digest = hashlib.sha256("".join(split_hash[s] for s in seeds).encode()).hexdigest()[:16]
    return AblationReport(rows, digest, tuple(seeds))
