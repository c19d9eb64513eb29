"""Command-line entry point: ``lmcat <command> [options]``.

Exit codes: 0 success, 1 internal error, 2 bad input (missing files, invalid
config, unsatisfiable splits).
"""

from __future__ import annotations

import argparse
import dataclasses
import json
import logging
import sys
from pathlib import Path

import numpy as np

from .data import SynthConfig, few_shot_split, load_dataset, save_dataset, synth_dataset
from .errors import ConfigError, DataError, LmcatError, ParseError
from .evaluate import SWEEP_FRACS, ablation_suite, evaluate, robustness_sweep
from .model import LMCAT, ModelConfig, count_params, load_checkpoint, reference_table_rows, save_checkpoint
from .train import DESK_FINETUNE, DESK_PRETRAIN, desk_tau, finetune, finetune_config, pretrain, pretrain_config

logger = logging.getLogger("lmcat")

def _flags(d: dict) -> dict:
    return {("batch" if k == "batch_size" else k): v for k, v in d.items()}


PRESETS = {
    "full": {"pretrain": {"epochs": 50, "batch": 128}, "finetune": {"epochs": 10, "batch": 32}},
    "desk": {"pretrain": {**_flags(DESK_PRETRAIN), "tau": desk_tau()}, "finetune": _flags(DESK_FINETUNE)},
}
STAGE_KEYS = {"epochs": int, "batch": int, "lr": float, "weight_decay": float, "seed": int, "k": int}
MODEL_KEYS = {f.name: f.type for f in dataclasses.fields(ModelConfig) if f.name not in ("modalities", "patch_size")}


class _HelpFormatter(argparse.ArgumentDefaultsHelpFormatter):
    # defaults that live in the stage config are spelled out in the help text itself
    def _get_help_string(self, action):
        if action.default is None or "default" in (action.help or ""):
            return action.help
        return super()._get_help_string(action)


class UsageError(LmcatError):
    """Bad command-line input."""


# -- config files ------------------------------------------------------------------
def _coerce(key: str, raw: str):
    kind = STAGE_KEYS.get(key) or MODEL_KEYS.get(key)
    if kind in (bool, "bool"):
        if raw.lower() in ("1", "true", "yes"):
            return True
        if raw.lower() in ("0", "false", "no"):
            return False
        raise ConfigError(f"{key}: expected a boolean, got {raw!r}")
    try:
        if kind in (int, "int"):
            return int(raw)
        if kind in (float, "float"):
            return float(raw)
    except ValueError:
        raise ConfigError(f"{key}: cannot parse {raw!r}") from None
    return raw


def parse_config(text: str, source: str = "config") -> dict:
    """``key = value`` lines; ``#`` starts a comment. Unknown keys are rejected."""
    out = {}
    for lineno, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"{source}:{lineno}: expected key = value")
        key, raw = (s.strip() for s in line.split("=", 1))
        if key not in STAGE_KEYS and key not in MODEL_KEYS:
            raise ConfigError(f"{source}:{lineno}: unknown key {key!r}")
        out[key] = _coerce(key, raw)
    return out


def effective_config(args, defaults: dict, stage: str = "pretrain") -> dict:
    """Defaults, then preset, then config file, then explicit flags."""
    cfg = dict(defaults)
    if getattr(args, "preset", None):
        preset = PRESETS[args.preset][stage]
        cfg.update({k: v for k, v in preset.items() if k in defaults or k in MODEL_KEYS})
    if getattr(args, "config", None):
        path = Path(args.config)
        if not path.is_file():
            raise UsageError(f"config file not found: {path}")
        cfg.update(parse_config(path.read_text(), str(path)))
    for key in list(STAGE_KEYS) + ["tau"]:
        val = getattr(args, key, None)
        if val is not None:
            cfg[key] = val
    return cfg


def _split(cfg: dict) -> tuple[dict, dict]:
    return ({k: v for k, v in cfg.items() if k in STAGE_KEYS}, {k: v for k, v in cfg.items() if k in MODEL_KEYS})


def _load_data(path):
    if not Path(path, "manifest.txt").is_file():
        raise UsageError(f"no dataset at {path}")
    return load_dataset(path)


def _load_ckpt(path):
    if not Path(path).is_file():
        raise UsageError(f"checkpoint not found: {path}")
    return load_checkpoint(path)


def _dtype(name: str):
    return {"float32": np.float32, "float64": np.float64}[name]


# -- commands ----------------------------------------------------------------------
def cmd_synth(args) -> int:
    synth = SynthConfig(classes=args.classes, patch=args.patch, canvas=args.canvas, world_seed=args.world_seed)
    ds = synth_dataset(args.samples, args.seed, synth, labeled=not args.unlabeled, frac=args.offset)
    save_dataset(ds, args.out)
    print(f"wrote {len(ds)} samples to {args.out} (content hash {ds.content_hash()[:16]})")
    return 0


def cmd_pretrain(args) -> int:
    cfg = effective_config(args, {"epochs": 50, "batch": 128, "lr": 3e-4, "weight_decay": 0.01, "seed": 0})
    print("effective config: " + json.dumps(cfg, sort_keys=True))
    stage, model_kw = _split(cfg)
    ds = _load_data(args.data)
    mcfg = ModelConfig(patch_size=ds.synth.patch, classes=ds.synth.classes, **model_kw)
    model = LMCAT(mcfg, seed=stage["seed"], dtype=_dtype(args.dtype))
    scfg = pretrain_config(epochs=stage["epochs"], batch_size=stage["batch"], lr=stage["lr"],
                           weight_decay=stage["weight_decay"], seed=stage["seed"])
    report = pretrain(model, ds, scfg)
    save_checkpoint(model, args.out, stage="pretrained", extra={"run": cfg})
    report_path = args.report or str(args.out) + ".csv"
    report.write(report_path)
    first, last = report.losses[0] if report.losses else float("nan"), report.losses[-1] if report.losses else float("nan")
    print(f"alignment loss {first:.4f} -> {last:.4f} over {len(report.losses)} epochs; clip events {report.clip_events}")
    print(f"checkpoint {args.out}, report {report_path}")
    return 0


def cmd_finetune(args) -> int:
    cfg = effective_config(args, {"epochs": 10, "batch": 32, "lr": 1e-3, "weight_decay": 0.0, "seed": 0, "k": 20},
                           "finetune")
    print("effective config: " + json.dumps(cfg, sort_keys=True))
    model, meta = _load_ckpt(args.ckpt)
    if meta["stage"] != "pretrained":
        logger.warning("checkpoint stage is %r, expected 'pretrained'; continuing", meta["stage"])
    pool = _load_data(args.data)
    labeled, _ = few_shot_split(pool, cfg["k"], cfg["seed"])
    print(f"labeled samples: {len(labeled)} ({cfg['k']} per class x {pool.synth.classes} classes)")
    scfg = finetune_config(epochs=cfg["epochs"], batch_size=cfg["batch"], lr=cfg["lr"],
                           weight_decay=cfg["weight_decay"], seed=cfg["seed"])
    report = finetune(model, labeled, scfg)
    same = report.frozen_hash_before == report.frozen_hash_after
    print(f"frozen hash before {report.frozen_hash_before[:16]} after {report.frozen_hash_after[:16]} "
          f"{'equal' if same else 'CHANGED'}")
    save_checkpoint(model, args.out, stage="finetuned", extra={"run": cfg, "pretrained_from": str(args.ckpt)})
    report.write(args.report or str(args.out) + ".csv")
    print(f"train accuracy {report.epochs[-1].accuracy:.3f}" if report.epochs else "no epochs run")
    return 0 if same else 1


def cmd_eval(args) -> int:
    model, _ = _load_ckpt(args.ckpt)
    ds = _load_data(args.data)
    oa, aa, f1 = evaluate(model, ds)
    print("# OA = trace/total; AA = mean per-class recall; F1 = unweighted macro F1")
    print(f"OA {100 * oa:.1f}  AA {100 * aa:.1f}  F1 {100 * f1:.1f}  (n={len(ds)})")
    return 0


def cmd_sweep(args) -> int:
    model, _ = _load_ckpt(args.ckpt)
    ds = _load_data(args.data)
    result = robustness_sweep(model, ds, SWEEP_FRACS, seed=args.seed, model_id=Path(args.ckpt).stem)
    text = result.to_csv()
    if args.out:
        Path(args.out).write_text(text)
    print(text, end="")
    return 0


def cmd_ablate(args) -> int:
    cfg = effective_config(args, {"epochs": 50, "batch": 128, "lr": 3e-4, "weight_decay": 0.01, "seed": 0, "k": 20})
    print("effective config: " + json.dumps(cfg, sort_keys=True))
    stage, model_kw = _split(cfg)
    unlabeled, pool, test = _load_data(args.unlabeled), _load_data(args.pool), _load_data(args.test)
    mcfg = ModelConfig(patch_size=pool.synth.patch, classes=pool.synth.classes, **model_kw)
    seeds = tuple(int(s) for s in args.seeds.split(","))
    pre = pretrain_config(epochs=stage["epochs"], batch_size=stage["batch"], lr=stage["lr"],
                          weight_decay=stage["weight_decay"])
    ft = finetune_config(**(dict(DESK_FINETUNE) if args.preset == "desk" else {}))
    report = ablation_suite(unlabeled, pool, test, mcfg, k=stage["k"], seeds=seeds, pre=pre, ft=ft,
                            dtype=_dtype(args.dtype))
    if args.out:
        Path(args.out).write_text(report.to_csv())
    print(report.to_table())
    return 0


def cmd_params(args) -> int:
    cfg = effective_config(args, {})
    _, model_kw = _split(cfg)
    model = LMCAT(ModelConfig(patch_size=args.patch, **model_kw))
    rows = reference_table_rows(model)
    width = max(len(r[0]) for r in rows) + 2
    print(f"{'Component':<{width}}{'Count':>12}{'Reference':>12}")
    for name, ours, ref in rows:
        print(f"{name:<{width}}{ours:>12}{ref:>12}")
    counts = count_params(model)
    print()
    print(f"U-MAA Layers: {counts['umaa']:,} (reference: 394K)")
    for name, _ in model.config.streams:
        key = f"msa_{name}"
        if key in counts:
            print(f"note: MSA {name} count {counts[key]:,} follows the 1x1 conv shapes; the reference table lists a "
                  "different figure")
    print(f"note: head Linear({model.config.embed_dim}->{model.config.classes}) has {counts['head']:,} weights, "
          "above the reference '<1000'")
    print("note: LayerNorm affine parameters are counted separately and are not in the reference table")
    return 0


# -- parser ------------------------------------------------------------------------
def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="lmcat", description=__doc__.splitlines()[0],
                                formatter_class=_HelpFormatter)
    p.add_argument("-v", "--verbose", action="store_true", help="log per-epoch progress")
    sub = p.add_subparsers(dest="command", required=True)
    fmt = _HelpFormatter

    s = sub.add_parser("synth", help="write a synthetic dataset", formatter_class=fmt)
    s.add_argument("--out", required=True, help="output directory")
    s.add_argument("--samples", type=int, default=2000, help="number of samples")
    s.add_argument("--classes", type=int, default=11, help="land-cover classes")
    s.add_argument("--seed", type=int, default=0, help="data seed")
    s.add_argument("--patch", type=int, default=16, help="patch side in pixels")
    s.add_argument("--canvas", type=int, default=None, help="canvas side (default: 2 x patch)")
    s.add_argument("--world-seed", type=int, default=0, help="seed of the class table")
    s.add_argument("--offset", type=float, default=0.0, help="SAR misalignment, fraction of the patch side")
    s.add_argument("--unlabeled", action="store_true", help="store labels as -1")
    s.set_defaults(func=cmd_synth)

    def training_flags(q, epochs, batch, lr, wd):
        q.add_argument("--config", help="key = value file (flags override it)")
        q.add_argument("--preset", choices=sorted(PRESETS),
                       help="full: reference schedule; desk: pretrain 20 epochs, batch 32, lr 0.001, tau sqrt(d_k), "
                            "fine-tune 100 epochs, lr 0.01")
        q.add_argument("--epochs", type=int, help=f"epochs (default {epochs})")
        q.add_argument("--batch", type=int, help=f"batch size (default {batch})")
        q.add_argument("--lr", type=float, help=f"learning rate (default {lr})")
        q.add_argument("--weight-decay", dest="weight_decay", type=float, help=f"decoupled weight decay (default {wd})")
        q.add_argument("--seed", type=int, help="run seed (default 0)")

    s = sub.add_parser("pretrain", help="contrastive pretraining on unlabeled pairs", formatter_class=fmt)
    s.add_argument("--data", required=True, help="dataset directory")
    s.add_argument("--out", required=True, help="checkpoint path")
    s.add_argument("--report", help="CSV report path (default: <out>.csv)")
    s.add_argument("--tau", type=float, help="alignment temperature (default 0.1)")
    s.add_argument("--dtype", choices=("float32", "float64"), default="float32", help="parameter precision")
    training_flags(s, 50, 128, 3e-4, 0.01)
    s.set_defaults(func=cmd_pretrain)

    s = sub.add_parser("finetune", help="train the head on k labels per class", formatter_class=fmt)
    s.add_argument("--ckpt", required=True, help="pretrained checkpoint")
    s.add_argument("--data", required=True, help="labeled pool directory")
    s.add_argument("--k", type=int, help="labels per class (default 20)")
    s.add_argument("--out", required=True, help="output checkpoint")
    s.add_argument("--report", help="CSV report path (default: <out>.csv)")
    training_flags(s, 10, 32, 1e-3, 0.0)
    s.set_defaults(func=cmd_finetune)

    s = sub.add_parser("eval", help="OA / AA / macro F1 on a labeled dataset", formatter_class=fmt)
    s.add_argument("--ckpt", required=True)
    s.add_argument("--data", required=True)
    s.set_defaults(func=cmd_eval)

    s = sub.add_parser("sweep", help="accuracy under SAR misalignment 0.0-0.5", formatter_class=fmt)
    s.add_argument("--ckpt", required=True)
    s.add_argument("--data", required=True, help="aligned labeled test set")
    s.add_argument("--seed", type=int, default=0, help="offset direction seed")
    s.add_argument("--out", help="CSV output path")
    s.set_defaults(func=cmd_sweep)

    s = sub.add_parser("ablate", help="train and score the five ablation variants", formatter_class=fmt)
    s.add_argument("--unlabeled", required=True, help="pretraining dataset")
    s.add_argument("--pool", required=True, help="labeled pool for few-shot splits")
    s.add_argument("--test", required=True, help="labeled test set")
    s.add_argument("--k", type=int, help="labels per class (default 20)")
    s.add_argument("--seeds", default="0,1,2", help="comma-separated run seeds")
    s.add_argument("--tau", type=float, help="alignment temperature (default 0.1)")
    s.add_argument("--dtype", choices=("float32", "float64"), default="float32", help="parameter precision")
    s.add_argument("--out", help="CSV output path")
    training_flags(s, 50, 128, 3e-4, 0.01)
    s.set_defaults(func=cmd_ablate)

    s = sub.add_parser("params", help="parameter breakdown of a configuration", formatter_class=fmt)
    s.add_argument("--config", help="key = value model config")
    s.add_argument("--patch", type=int, default=16, help="patch side in pixels")
    s.set_defaults(func=cmd_params)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    try:
        return args.func(args)
    except (UsageError, ConfigError, DataError, ParseError, FileNotFoundError, NotADirectoryError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except Exception as exc:  # noqa: BLE001 - last-resort reporting for scripts
        logger.exception("internal error")
        print(f"internal error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
