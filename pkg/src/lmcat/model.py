"""Full classifier: per-modality adapters, stacked alignment layers, mean-pooled linear head."""

from __future__ import annotations

import dataclasses
import hashlib
import json
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import tensor as T
from .adapters import LinearProjection, MsaWeights, embed_modality, msa_param_count
from .errors import ConfigError, ParseError
from .nn import Module, init_normal, zeros
from .rng import substream
from .tensor import Tensor
from .umaa import CROSS, SELF, AlignmentConfig, UmaaLayer, token_reduce, umaa_forward, umaa_weight_count

DEFAULT_MODALITIES = (("sar", 2), ("optical", 10))
VARIANTS = ("full", "no_umaa", "no_contrastive", "no_msa", "no_token_reduce")


@dataclass(frozen=True)
class ModelConfig:
    embed_dim: int = 128
    n_layers: int = 4
    n_heads: int = 4
    patch_size: int = 16
    classes: int = 11
    modalities: tuple = DEFAULT_MODALITIES
    token_reduce: bool = True
    token_reduce_after: int = 2
    token_reduce_factor: int = 2
    tau: float = 0.1
    adapter_hidden: int = 4
    adapter: str = "msa"  # "msa" | "linear"
    attention: str = CROSS  # "cross" | "self"
    contrastive: bool = True
    fusion: str = "separate"  # "separate" | "early"
    adapter_bias: bool = False
    head_bias: bool = False

    def __post_init__(self):
        object.__setattr__(self, "modalities", tuple((str(n), int(c)) for n, c in self.modalities))
        if self.embed_dim % self.n_heads:
            raise ConfigError(f"embed_dim {self.embed_dim} not divisible by n_heads {self.n_heads}")
        if self.adapter not in ("msa", "linear"):
            raise ConfigError(f"unknown adapter {self.adapter!r}")
        if self.attention not in (CROSS, SELF):
            raise ConfigError(f"unknown attention {self.attention!r}")
        if self.fusion not in ("separate", "early"):
            raise ConfigError(f"unknown fusion {self.fusion!r}")
        if self.classes < 1 or self.n_layers < 0 or self.patch_size < 1:
            raise ConfigError("classes, n_layers and patch_size must be positive")
        if not self.tau > 0:
            raise ConfigError(f"tau must be positive, got {self.tau}")
        if self.token_reduce and self.patch_size % self.token_reduce_factor:
            raise ConfigError(f"reduction factor {self.token_reduce_factor} does not divide patch {self.patch_size}")

    @property
    def streams(self) -> tuple:
        """(name, channels) of the token streams the transformer actually sees."""
        if self.fusion == "early":
            return (("fused", sum(c for _, c in self.modalities)),)
        return self.modalities

    def to_dict(self) -> dict:
        d = dataclasses.asdict(self)
        d["modalities"] = [list(m) for m in self.modalities]
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        d = dict(d)
        if "modalities" in d:
            d["modalities"] = tuple(tuple(m) for m in d["modalities"])
        unknown = set(d) - {f.name for f in dataclasses.fields(cls)}
        if unknown:
            raise ConfigError(f"unknown model config keys: {sorted(unknown)}")
        return cls(**d)


class LMCAT(Module):
    """Adapters + alignment layers + head.

    Args:
        config: architecture.
        seed: initialization seed (drawn from the ``init`` sub-stream).
        dtype: parameter precision.
    """

    def __init__(self, config: ModelConfig = ModelConfig(), seed: int = 0, dtype=np.float64):
        rng = substream(seed, "init")
        self._config = config
        self._seed = seed
        d = config.embed_dim
        adapters = []
        for _, channels in config.streams:
            if config.adapter == "msa":
                adapters.append(MsaWeights(channels, rng, d, config.adapter_hidden, config.adapter_bias, dtype))
            else:
                adapters.append(LinearProjection(channels, rng, d, dtype))
        self.adapters = adapters
        self.layers = [UmaaLayer(d, config.n_heads, rng, dtype, config.attention) for _ in range(config.n_layers)]
        self.head_w = init_normal(rng, (config.classes, d), d, dtype)
        if config.head_bias:
            self.head_b = zeros((config.classes,), dtype)

    @property
    def config(self) -> ModelConfig:
        return self._config

    @property
    def seed(self) -> int:
        return self._seed

    @property
    def dtype(self):
        return self.head_w.dtype

    # -- parameter groups ----------------------------------------------------
    def param_groups(self) -> dict[str, list[tuple[str, Tensor]]]:
        groups: dict[str, list[tuple[str, Tensor]]] = {"adapters": [], "umaa": [], "head": []}
        for name, p in self.named_parameters():
            if name.startswith("adapters."):
                groups["adapters"].append((name, p))
            elif name.startswith("layers."):
                groups["umaa"].append((name, p))
            else:
                groups["head"].append((name, p))
        return groups

    def head_params(self) -> list[Tensor]:
        return [p for _, p in self.param_groups()["head"]]

    def backbone_params(self) -> list[Tensor]:
        g = self.param_groups()
        return [p for _, p in g["adapters"] + g["umaa"]]

    # -- forward ---------------------------------------------------------------
    def _inputs(self, inputs) -> list[Tensor]:
        xs = [x if isinstance(x, Tensor) else Tensor(np.asarray(x, dtype=self.dtype)) for x in inputs]
        if len(xs) != len(self.config.modalities):
            raise ConfigError(f"expected {len(self.config.modalities)} modality inputs, got {len(xs)}")
        for x, (name, c) in zip(xs, self.config.modalities):
            axis = 0 if x.ndim == 3 else 1
            if x.ndim not in (3, 4) or x.shape[axis] != c:
                raise ConfigError(f"modality {name!r} expects {c} channels, got shape {x.shape}")
        if self.config.fusion == "early":
            xs = [T.concat(xs, axis=0 if xs[0].ndim == 3 else 1)]
        return xs

    def encode(self, *inputs) -> tuple[list[Tensor], Tensor]:
        """Token streams after the last layer and the layer-averaged alignment loss."""
        cfg = self.config
        xs = self._inputs(inputs)
        tokens = [embed_modality(x, a) for x, a in zip(xs, self.adapters)]
        align = AlignmentConfig(cfg.tau, cfg.contrastive and cfg.attention == CROSS)
        total = None
        for li, layer in enumerate(self.layers):
            tokens, loss = umaa_forward(tokens, layer, align)
            total = loss if total is None else total + loss
            if cfg.token_reduce and li + 1 == cfg.token_reduce_after:
                tokens = [token_reduce(t, cfg.token_reduce_factor) for t in tokens]
        if total is None:
            total = Tensor(np.zeros((), dtype=self.dtype))
        else:
            total = total / max(len(self.layers), 1)
        return tokens, total

    def features(self, *inputs) -> Tensor:
        """Mean over every token of every stream: (B, D) or (D,)."""
        tokens, _ = self.encode(*inputs)
        return pool(tokens)

    def head(self, feats: Tensor) -> Tensor:
        logits = T.matmul(feats, self.head_w.T) if feats.ndim == 2 else T.matmul(feats.reshape(1, -1), self.head_w.T).reshape(-1)
        if self.config.head_bias:
            logits = logits + self.head_b
        return logits

    def forward(self, *inputs) -> tuple[Tensor, Tensor]:
        """Class logits and alignment loss for one sample (C,H,W) or a batch (B,C,H,W)."""
        tokens, loss = self.encode(*inputs)
        return self.head(pool(tokens)), loss

    __call__ = forward


def pool(tokens: list[Tensor]) -> Tensor:
    z = T.stack(tokens, axis=-3)  # (..., M, N, D)
    return T.mean(z, axis=(-3, -2))


# -- accounting ------------------------------------------------------------------
def count_params(model: LMCAT) -> dict[str, int]:
    """Element counts per named group, in architecture order."""
    cfg = model.config
    out: dict[str, int] = {}
    for (name, _), a in zip(cfg.streams, model.adapters):
        prefix = "msa" if cfg.adapter == "msa" else "proj"
        out[f"{prefix}_{name}"] = sum(p.size for p in a.conv_params())
        out[f"{prefix}_{name}_norm"] = a.norm_gamma.size + a.norm_beta.size
    out["umaa"] = sum(p.size for layer in model.layers for p in layer.projection_params())
    out["umaa_norms"] = sum(p.size for layer in model.layers for p in layer.norm_params())
    out["head"] = sum(p.size for _, p in model.param_groups()["head"])
    out["total"] = sum(v for k, v in out.items())
    return out


def count_flops(config: ModelConfig) -> dict[str, int]:
    """Multiply-accumulate count of one single-sample forward pass.

    Elementwise ops, softmax and normalization are not counted.
    """
    d = config.embed_dim
    n = config.patch_size ** 2
    streams = config.streams
    m = len(streams)
    adapters = 0
    for _, c in streams:
        adapters += n * (c * config.adapter_hidden + config.adapter_hidden * d) if config.adapter == "msa" else n * c * d
    attn = mlp = proj = 0
    for li in range(config.n_layers):
        proj += 4 * m * n * d * d
        pairs = m * m if config.attention == CROSS else m
        attn += 2 * pairs * n * n * d
        mlp += 2 * m * n * d * d
        if config.token_reduce and li + 1 == config.token_reduce_after:
            n //= config.token_reduce_factor ** 2
    head = d * config.classes
    total = adapters + proj + attn + mlp + head
    return {"adapters": adapters, "projections": proj, "attention": attn, "mlp": mlp, "head": head, "total": total}


def build_variant(name: str, config: ModelConfig = ModelConfig(), seed: int = 0, dtype=np.float64) -> LMCAT:
    """Ablation models sharing one base config."""
    if name == "full":
        cfg = dataclasses.replace(config)
    elif name == "no_umaa":
        cfg = dataclasses.replace(config, attention=SELF, contrastive=False)
    elif name == "no_contrastive":
        cfg = dataclasses.replace(config, contrastive=False)
    elif name == "no_msa":
        cfg = dataclasses.replace(config, adapter="linear")
    elif name == "no_token_reduce":
        cfg = dataclasses.replace(config, token_reduce=False)
    else:
        raise ConfigError(f"unknown variant {name!r}; expected one of {VARIANTS}")
    return LMCAT(cfg, seed=seed, dtype=dtype)


def reference_table_rows(model: LMCAT) -> list[tuple[str, str, str]]:
    """(component, our count, reference figure) rows for the parameter breakdown table."""
    cfg = model.config
    counts = count_params(model)
    ref = {"sar": "640", "optical": "1280"}
    rows = [("Embedding Dimension", str(cfg.embed_dim), "128")]
    rows.append((f"U-MAA Layers ({cfg.n_layers})", f"{counts['umaa']:,}", "394K"))
    rows.append(("U-MAA LayerNorm affine", f"{counts['umaa_norms']:,}", "not listed"))
    for name, c in cfg.streams:
        key = f"msa_{name}" if cfg.adapter == "msa" else f"proj_{name}"
        label = f"MSA ({name}) Conv2D({c}->{cfg.adapter_hidden}->{cfg.embed_dim})" if cfg.adapter == "msa" else f"Linear ({name}) {c}->{cfg.embed_dim}"
        rows.append((label, f"{counts[key]:,}", ref.get(name, "-")))
        rows.append((f"  {name} output LayerNorm affine", f"{counts[key + '_norm']:,}", "not listed"))
    rows.append((f"Classification Head Linear({cfg.embed_dim}->{cfg.classes})", f"{counts['head']:,}", "<1000"))
    rows.append(("Total Parameters", f"{counts['total']:,}", "0.8 M"))
    return rows


def expected_msa_count(channels: int, config: ModelConfig = ModelConfig()) -> int:
    return msa_param_count(channels, config.adapter_bias, config.adapter_hidden, config.embed_dim)


def expected_umaa_count(config: ModelConfig = ModelConfig()) -> int:
    return config.n_layers * umaa_weight_count(config.embed_dim)


# -- checkpoints -----------------------------------------------------------------
MAGIC = "LMCAT-CKPT"
FORMAT_VERSION = 1
STAGES = ("init", "pretrained", "finetuned")


def state_hash(tensors) -> str:
    """SHA-256 over the raw bytes of an ordered tensor collection."""
    h = hashlib.sha256()
    for t in tensors:
        arr = t.data if isinstance(t, Tensor) else t
        h.update(np.ascontiguousarray(arr).tobytes())
    return h.hexdigest()


def checkpoint_bytes(model: LMCAT, stage: str = "init", extra: dict | None = None) -> bytes:
    if stage not in STAGES:
        raise ConfigError(f"unknown stage {stage!r}")
    params = list(model.named_parameters())
    meta = {"stage": stage, "seed": model.seed, "config": model.config.to_dict()}
    if extra:
        meta["extra"] = extra
    lines = [f"{MAGIC} {FORMAT_VERSION}", "meta " + json.dumps(meta, sort_keys=True), f"tensors {len(params)}"]
    blobs = []
    offset = 0
    for name, p in params:
        raw = np.ascontiguousarray(p.data, dtype=p.data.dtype.newbyteorder("<")).tobytes()
        shape = ",".join(str(s) for s in p.shape) or "-"
        lines.append(f"{name} {p.data.dtype.str.lstrip('<>=|')} {shape} {offset} {len(raw)}")
        blobs.append(raw)
        offset += len(raw)
    lines.append("end")
    return ("\n".join(lines) + "\n").encode("ascii") + b"".join(blobs)


def save_checkpoint(model: LMCAT, path, stage: str = "init", extra: dict | None = None) -> None:
    Path(path).write_bytes(checkpoint_bytes(model, stage, extra))


def load_checkpoint(path) -> tuple[LMCAT, dict]:
    """Rebuild a model from :func:`save_checkpoint` output. Returns (model, meta)."""
    return parse_checkpoint(Path(path).read_bytes())


def clone(model: LMCAT) -> LMCAT:
    """Independent copy with identical weights, via the checkpoint encoding."""
    return parse_checkpoint(checkpoint_bytes(model))[0]


def parse_checkpoint(buf: bytes) -> tuple[LMCAT, dict]:
    pos = 0

    def line() -> str:
        nonlocal pos
        end = buf.find(b"\n", pos)
        if end < 0:
            raise ParseError("unterminated header line", pos)
        text = buf[pos:end].decode("ascii", errors="replace")
        start, pos = pos, end + 1
        line.start = start
        return text

    head = line().split()
    if len(head) != 2 or head[0] != MAGIC:
        raise ParseError("not an lmcat checkpoint", 0)
    if int(head[1]) != FORMAT_VERSION:
        raise ParseError(f"unsupported checkpoint version {head[1]}", 0)
    meta_line = line()
    if not meta_line.startswith("meta "):
        raise ParseError("missing meta line", line.start)
    try:
        meta = json.loads(meta_line[5:])
    except json.JSONDecodeError as exc:
        raise ParseError(f"bad meta json: {exc}", line.start) from exc
    count_line = line().split()
    if len(count_line) != 2 or count_line[0] != "tensors":
        raise ParseError("missing tensor count", line.start)
    entries = []
    for _ in range(int(count_line[1])):
        parts = line().split()
        if len(parts) != 5:
            raise ParseError(f"bad manifest entry {' '.join(parts)!r}", line.start)
        name, dt, shape, off, nbytes = parts
        shape_t = () if shape == "-" else tuple(int(s) for s in shape.split(","))
        entries.append((name, np.dtype("<" + dt), shape_t, int(off), int(nbytes), line.start))
    if line() != "end":
        raise ParseError("manifest not terminated by 'end'", line.start)
    data_start = pos

    config = ModelConfig.from_dict(meta["config"])
    dtype = entries[0][1].newbyteorder("=") if entries else np.float64
    model = LMCAT(config, seed=int(meta.get("seed", 0)), dtype=dtype)
    params = dict(model.named_parameters())
    if [e[0] for e in entries] != list(params):
        raise ParseError("checkpoint tensor names do not match the model layout", data_start)
    for name, dt, shape_t, off, nbytes, at in entries:
        start = data_start + off
        if start + nbytes > len(buf):
            raise ParseError(f"truncated data for {name}", len(buf))
        arr = np.frombuffer(buf, dtype=dt, count=nbytes // dt.itemsize, offset=start).reshape(shape_t)
        if arr.shape != params[name].shape:
            raise ParseError(f"shape mismatch for {name}: {arr.shape} vs {params[name].shape}", at)
        params[name].data = arr.astype(dt.newbyteorder("="), copy=True)
    return model, meta
