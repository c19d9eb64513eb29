"""Synthetic SAR/optical patches, per-sensor preprocessing, misalignment and few-shot splits.

Each scene is a class-conditional latent field (smooth blobs plus fine
per-pixel texture) rendered twice: into ten optical reflectance bands (raw
units 0..10000) and two SAR backscatter amplitudes. Scenes are drawn on a canvas larger than the patch so that a
displaced SAR crop still covers real content.

Every sample is fully determined by its integer seed, which also fixes its
class; datasets therefore store only (id, label, offset, seed) plus the
preprocessed arrays, and canvases can be regenerated for re-cropping.
"""

from __future__ import annotations

import dataclasses
import hashlib
from dataclasses import dataclass, field
from functools import lru_cache
from pathlib import Path

import numpy as np

from .errors import ConfigError, DataError, ParseError
from .rng import substream

SAR_CHANNELS = 2
LATENT_FIELDS = 2
OPT_CHANNELS = 10
OPT_RANGE = 10000.0
SAR_FLOOR = 1e-6
MAX_OFFSET_FRAC = 0.5
DIRECTIONS = ((-1, -1), (-1, 0), (-1, 1), (0, -1), (0, 1), (1, -1), (1, 0), (1, 1))


# -- preprocessing -----------------------------------------------------------------
def preprocess_sar(raw: np.ndarray) -> np.ndarray:
    """Log amplitude, then per-channel min-max to [0, 1]; constant channels become zeros."""
    x = np.log(np.maximum(np.asarray(raw, dtype=np.float64), SAR_FLOOR))
    flat = x.reshape(x.shape[0], -1)
    lo = flat.min(axis=1)
    hi = flat.max(axis=1)
    span = hi - lo
    out = np.zeros_like(flat)
    ok = span > 0
    out[ok] = (flat[ok] - lo[ok, None]) / span[ok, None]
    return out.reshape(x.shape)


def preprocess_optical(raw: np.ndarray) -> np.ndarray:
    """Clamp reflectance to [0, 10000] and scale to [0, 1]."""
    return np.clip(np.asarray(raw, dtype=np.float64), 0.0, OPT_RANGE) / OPT_RANGE


# -- generator ---------------------------------------------------------------------
@dataclass(frozen=True)
class SynthConfig:
    """Generator knobs. Lengths are in pixels of a ``patch``-sided patch.

    Attributes:
        classes: number of land-cover classes.
        patch: patch side in pixels.
        canvas: canvas side; defaults to ``2 * patch`` so a 50% offset stays inside.
        world_seed: seed of the class table (spectra, responses, blob statistics).
        separation: minimum pairwise L2 distance between class mean spectra (unit reflectance).
        intra_class: per-sample, per-band std of the spectral offset from the class mean.
        opt_noise: per-pixel Gaussian noise std, as a fraction of the optical range.
        speckle: std of the lognormal multiplicative SAR speckle.
        opt_contrast, sar_contrast: field modulation strength in each sensor.
        texture: std of white per-pixel texture added to each latent field (blob
            peaks have magnitude 1). Shared by both sensors, it is what lets single
            pixels be matched across modalities.
        signal_dims: dimension of the optical subspace holding every class difference
            and the response to the shared fields.
        scene_offset: per-sample, per-direction std of an optical offset confined to
            the complement of that subspace.
        haze: amplitude of a smooth optical-only field, also confined to the complement.
    """

    classes: int = 11
    patch: int = 16
    canvas: int | None = None
    world_seed: int = 0
    separation: float = 0.15
    intra_class: float = 0.05
    opt_noise: float = 0.05
    speckle: float = 0.3
    opt_contrast: float = 0.3
    sar_contrast: float = 3.0
    texture: float = 1.0
    signal_dims: int = 3
    scene_offset: float = 0.1
    haze: float = 0.3
    blob_range: tuple = (2, 8)
    scale_range: tuple = (0.08, 0.3)

    def __post_init__(self):
        if self.classes < 1:
            raise ConfigError("classes must be >= 1")
        if not 1 <= self.signal_dims < OPT_CHANNELS:
            raise ConfigError(f"signal_dims must be in [1, {OPT_CHANNELS - 1}]")
        if self.canvas is None:
            object.__setattr__(self, "canvas", 2 * self.patch)
        need = self.patch + 2 * round(MAX_OFFSET_FRAC * self.patch)
        if self.canvas < need:
            raise ConfigError(f"canvas {self.canvas} too small for patch {self.patch} with 50% offsets (need {need})")
        object.__setattr__(self, "blob_range", tuple(self.blob_range))
        object.__setattr__(self, "scale_range", tuple(self.scale_range))

    def zero_noise(self) -> "SynthConfig":
        return dataclasses.replace(self, intra_class=0.0, opt_noise=0.0, speckle=0.0, scene_offset=0.0, haze=0.0)

    def header(self) -> dict:
        d = dataclasses.asdict(self)
        d["blob_range"] = "-".join(str(v) for v in self.blob_range)
        d["scale_range"] = "-".join(repr(v) for v in self.scale_range)
        return d

    @classmethod
    def from_header(cls, d: dict) -> "SynthConfig":
        kw = {}
        for f in dataclasses.fields(cls):
            if f.name not in d:
                continue
            v = d[f.name]
            if f.name == "blob_range":
                kw[f.name] = tuple(int(x) for x in v.split("-"))
            elif f.name == "scale_range":
                kw[f.name] = tuple(float(x) for x in v.split("-"))
            elif f.name in ("classes", "patch", "canvas", "world_seed", "signal_dims"):
                kw[f.name] = int(v)
            else:
                kw[f.name] = float(v)
        return cls(**kw)


@dataclass(frozen=True)
class ClassProfile:
    opt_mean: np.ndarray  # (10,) unit reflectance
    opt_response: np.ndarray  # (2, 10) loading of each latent field
    sar_mean: np.ndarray  # (2,) log amplitude
    sar_response: np.ndarray  # (2, 2) loading of field l on channel c
    blob_count: int
    blob_scale: float  # fraction of the patch side
    nuisance: np.ndarray  # (10, 10 - signal_dims) orthonormal, shared by all classes


@lru_cache(maxsize=32)
def class_table(cfg: SynthConfig) -> tuple[ClassProfile, ...]:
    """Deterministic class profiles.

    The optical band space is split by a random rotation into a small signal
    subspace and its complement. Class mean spectra and the optical response to
    the latent fields live in the signal subspace; the complement only carries
    per-scene nuisance that SAR never sees.

    Classes come in sibling pairs that share SAR statistics and blob shapes.
    Sibling mean spectra sit exactly ``separation`` apart, pair centres at least
    ``2 * separation``. The optical response to each latent field is a shared
    direction plus a per-class perturbation, so the pixelwise SAR/optical
    relationship also differs between classes.
    """
    rng = substream(cfg.world_seed, "classes")
    basis, _ = np.linalg.qr(rng.standard_normal((OPT_CHANNELS, OPT_CHANNELS)))
    signal, nuisance = basis[:, : cfg.signal_dims], basis[:, cfg.signal_dims:]
    n_pairs = (cfg.classes + 1) // 2
    half = cfg.separation * n_pairs ** (1.0 / cfg.signal_dims)
    centres: list[np.ndarray] = []
    tries = 0
    while len(centres) < n_pairs:
        tries += 1
        if tries > 100000:
            raise ConfigError(f"cannot place {cfg.classes} spectra at separation {cfg.separation}")
        cand = rng.uniform(-half, half, cfg.signal_dims)
        if all(np.linalg.norm(cand - m) >= 2 * cfg.separation for m in centres):
            centres.append(cand)
    common = (signal @ rng.standard_normal((cfg.signal_dims, LATENT_FIELDS))).T
    common /= np.linalg.norm(common, axis=1, keepdims=True)
    lo, hi = cfg.scale_range
    profiles = []
    for centre in centres:
        step = rng.standard_normal(cfg.signal_dims)
        step *= 0.5 * cfg.separation / np.linalg.norm(step)
        sar_mean = rng.uniform(-3.0, 0.0, SAR_CHANNELS)
        blob_count = int(rng.integers(cfg.blob_range[0], cfg.blob_range[1] + 1))
        scale = float(rng.uniform(lo, hi))
        gain = rng.uniform(0.7, 1.0, 2)
        sar_resp = np.array([[gain[0], 0.5 * gain[0]], [0.0, gain[1]]])
        for sign in (1.0, -1.0):
            jitter = (signal @ rng.standard_normal((cfg.signal_dims, LATENT_FIELDS))).T
            resp = common + 0.3 * jitter / np.sqrt(cfg.signal_dims)
            resp /= np.linalg.norm(resp, axis=1, keepdims=True)
            mean = 0.5 + signal @ (centre + sign * step)
            profiles.append(ClassProfile(mean, resp, sar_mean, sar_resp, blob_count, scale, nuisance))
    return tuple(profiles[: cfg.classes])


@dataclass(frozen=True)
class SceneRecipe:
    """One scene: class id, its profile, and the per-scene seed."""

    class_id: int
    profile: ClassProfile
    seed: int


def scene_class(seed: int, cfg: SynthConfig) -> int:
    """Class implied by a sample seed."""
    return int(substream(seed, "class").integers(cfg.classes))


def scene_recipe(seed: int, cfg: SynthConfig) -> SceneRecipe:
    c = scene_class(seed, cfg)
    return SceneRecipe(c, class_table(cfg)[c], seed)


def _blob_fields(rng: np.random.Generator, count: int, profile: ClassProfile, canvas: int, patch: int) -> np.ndarray:
    # blob density is per patch area, so the canvas holds proportionally more blobs
    n = max(1, int(round(profile.blob_count * (canvas / patch) ** 2)))
    sigma = profile.blob_scale * patch
    yy, xx = np.mgrid[0:canvas, 0:canvas].astype(np.float64)
    out = np.zeros((count, canvas, canvas))
    for f in out:
        centers = rng.uniform(0, canvas, (n, 2))
        amps = rng.uniform(0.5, 1.0, n) * rng.choice([-1.0, 1.0], n)
        for (cy, cx), a in zip(centers, amps):
            f += a * np.exp(-((yy - cy) ** 2 + (xx - cx) ** 2) / (2.0 * sigma * sigma))
        f /= np.abs(f).max()
    return out


def latent_field(recipe: SceneRecipe, canvas: int, patch: int, texture: float = 0.0) -> np.ndarray:
    """Independent sums of signed Gaussian blobs (max |blob| = 1) plus white texture: (2, canvas, canvas)."""
    f = _blob_fields(substream(recipe.seed, "field"), LATENT_FIELDS, recipe.profile, canvas, patch)
    if texture > 0:
        f = f + texture * substream(recipe.seed, "texture").standard_normal(f.shape)
    return f


def synth_scene(recipe: SceneRecipe, cfg: SynthConfig) -> tuple[np.ndarray, np.ndarray, int]:
    """Render raw canvases: SAR amplitudes (2, S, S) and optical reflectance (10, S, S)."""
    f = latent_field(recipe, cfg.canvas, cfg.patch, cfg.texture)
    dev = f - f.mean(axis=(1, 2), keepdims=True)
    p = recipe.profile
    rng = substream(recipe.seed, "noise")
    offset = rng.standard_normal(OPT_CHANNELS) * cfg.intra_class
    offset = offset + p.nuisance @ rng.standard_normal(p.nuisance.shape[1]) * cfg.scene_offset
    opt = (p.opt_mean + offset)[:, None, None] + cfg.opt_contrast * np.einsum("lc,lyx->cyx", p.opt_response, dev)
    if cfg.haze > 0:
        direction = p.nuisance @ rng.standard_normal(p.nuisance.shape[1])
        direction /= np.linalg.norm(direction)
        h = _blob_fields(substream(recipe.seed, "haze"), 1, p, cfg.canvas, cfg.patch)[0]
        opt = opt + cfg.haze * direction[:, None, None] * (h - h.mean())
    if cfg.opt_noise > 0:
        opt = opt + rng.standard_normal(opt.shape) * cfg.opt_noise
    log_amp = p.sar_mean[:, None, None] + cfg.sar_contrast * np.einsum("lc,lyx->cyx", p.sar_response, dev)
    if cfg.speckle > 0:
        log_amp = log_amp + rng.standard_normal(log_amp.shape) * cfg.speckle
    return np.exp(log_amp), opt * OPT_RANGE, recipe.class_id


# -- cropping ----------------------------------------------------------------------
@dataclass
class PatchPair:
    sar: np.ndarray  # (2, P, P) in [0, 1]
    opt: np.ndarray  # (10, P, P) in [0, 1]
    label: int | None
    offset_frac: float
    offset_px: tuple = (0, 0)


def offset_pixels(frac: float, patch: int) -> int:
    return int(round(frac * patch))


def misalign(canvases: tuple[np.ndarray, np.ndarray], frac: float, rng: np.random.Generator,
             patch: int = 16, label: int | None = None) -> PatchPair:
    """Crop both sensors and preprocess them.

    The optical crop is centred on the canvas; the SAR crop is displaced by
    ``round(frac * patch)`` pixels along one of the eight neighbour directions,
    drawn uniformly from ``rng``.
    """
    if not 0.0 <= frac <= MAX_OFFSET_FRAC:
        raise ConfigError(f"misalignment fraction must lie in [0, {MAX_OFFSET_FRAC}], got {frac}")
    sar_c, opt_c = canvases
    side = opt_c.shape[-1]
    mag = offset_pixels(frac, patch)
    start = (side - patch) // 2
    if start - mag < 0 or start + mag + patch > side:
        raise ConfigError(f"canvas {side} too small for patch {patch} at offset {mag}px")
    dy, dx = DIRECTIONS[int(rng.integers(len(DIRECTIONS)))]
    oy, ox = dy * mag, dx * mag
    opt = opt_c[:, start:start + patch, start:start + patch]
    sar = sar_c[:, start + oy:start + oy + patch, start + ox:start + ox + patch]
    return PatchPair(preprocess_sar(sar), preprocess_optical(opt), label, float(frac), (oy, ox))


def make_pair(seed: int, cfg: SynthConfig, frac: float = 0.0, labeled: bool = True) -> PatchPair:
    recipe = scene_recipe(seed, cfg)
    sar_c, opt_c, label = synth_scene(recipe, cfg)
    return misalign((sar_c, opt_c), frac, substream(seed, "misalign"), cfg.patch, label if labeled else None)


# -- datasets ----------------------------------------------------------------------
@dataclass
class Dataset:
    """Preprocessed patch arrays plus per-sample bookkeeping.

    ``labels`` uses -1 for unlabeled samples.
    """

    synth: SynthConfig
    sar: np.ndarray  # (n, 2, P, P) float32
    opt: np.ndarray  # (n, 10, P, P) float32
    labels: np.ndarray  # (n,) int64
    offsets: np.ndarray  # (n,) float64
    seeds: np.ndarray  # (n,) int64
    ids: np.ndarray = field(default=None)

    def __post_init__(self):
        if self.ids is None:
            self.ids = np.arange(len(self.seeds), dtype=np.int64)

    def __len__(self) -> int:
        return len(self.seeds)

    @property
    def labeled(self) -> bool:
        return len(self) > 0 and bool(np.all(self.labels >= 0))

    def subset(self, idx) -> "Dataset":
        idx = np.asarray(idx, dtype=np.int64)
        return Dataset(self.synth, self.sar[idx], self.opt[idx], self.labels[idx], self.offsets[idx],
                       self.seeds[idx], self.ids[idx])

    def unlabeled(self) -> "Dataset":
        out = self.subset(np.arange(len(self)))
        out.labels = np.full(len(self), -1, dtype=np.int64)
        return out

    def true_classes(self) -> np.ndarray:
        return np.array([scene_class(int(s), self.synth) for s in self.seeds], dtype=np.int64)

    def content_hash(self) -> str:
        h = hashlib.sha256()
        for a in (self.sar, self.opt, self.labels, self.offsets, self.seeds, self.ids):
            h.update(np.ascontiguousarray(a).tobytes())
        return h.hexdigest()[:16]


def synth_dataset(n: int, seed: int, cfg: SynthConfig = SynthConfig(), labeled: bool = True,
                  frac: float = 0.0) -> Dataset:
    """``n`` samples whose scene seeds are drawn from the ``data`` sub-stream of ``seed``."""
    seeds = substream(seed, "data").integers(0, 2**62, n, dtype=np.int64) if n else np.zeros(0, np.int64)
    return dataset_from_seeds(seeds, cfg, labeled, frac)


def dataset_from_seeds(seeds, cfg: SynthConfig, labeled: bool = True, frac: float = 0.0,
                       rng: np.random.Generator | None = None) -> Dataset:
    """Render samples for explicit scene seeds.

    Misalignment directions come from ``rng`` when given, else from each
    sample's own ``misalign`` sub-stream.
    """
    seeds = np.asarray(seeds, dtype=np.int64)
    n, p = len(seeds), cfg.patch
    sar = np.zeros((n, SAR_CHANNELS, p, p), np.float32)
    opt = np.zeros((n, OPT_CHANNELS, p, p), np.float32)
    labels = np.full(n, -1, np.int64)
    for i, s in enumerate(seeds):
        recipe = scene_recipe(int(s), cfg)
        sar_c, opt_c, label = synth_scene(recipe, cfg)
        pair = misalign((sar_c, opt_c), frac, rng if rng is not None else substream(int(s), "misalign"), p)
        sar[i], opt[i] = pair.sar, pair.opt
        if labeled:
            labels[i] = label
    return Dataset(cfg, sar, opt, labels, np.full(n, float(frac)), seeds)


def few_shot_split(ds: Dataset, k: int, seed: int) -> tuple[Dataset, Dataset]:
    """Exactly ``k`` labeled samples per class (without replacement) and the remainder."""
    if k < 1:
        raise DataError(f"k must be >= 1, got {k}")
    if len(ds) and np.any(ds.labels < 0):
        raise DataError("few-shot split needs a fully labeled dataset")
    rng = substream(seed, "fewshot")
    chosen = []
    for c in range(ds.synth.classes):
        members = np.flatnonzero(ds.labels == c)
        if len(members) < k:
            raise DataError(f"class {c} has only {len(members)} samples, need {k}")
        chosen.append(np.sort(rng.choice(members, size=k, replace=False)))
    picked = np.sort(np.concatenate(chosen)) if chosen else np.zeros(0, np.int64)
    rest = np.setdiff1d(np.arange(len(ds)), picked)
    return ds.subset(picked), ds.subset(rest)


def balanced_dataset(per_class: int, seed: int, cfg: SynthConfig = SynthConfig(), frac: float = 0.0) -> Dataset:
    """Labeled dataset with exactly ``per_class`` samples of every class.

    Scene seeds are scanned in sub-stream order and kept until each class is full.
    """
    rng = substream(seed, "data")
    counts = np.zeros(cfg.classes, np.int64)
    keep: list[int] = []
    while per_class > 0 and counts.min() < per_class:
        for s in rng.integers(0, 2**62, 256, dtype=np.int64):
            c = scene_class(int(s), cfg)
            if counts[c] < per_class:
                counts[c] += 1
                keep.append(int(s))
    return dataset_from_seeds(np.array(keep, np.int64), cfg, True, frac)


# -- on-disk format ----------------------------------------------------------------
MANIFEST = "manifest.txt"
SAR_BIN = "sar.bin"
OPT_BIN = "opt.bin"


def save_dataset(ds: Dataset, path) -> None:
    """Write ``manifest.txt``, ``sar.bin`` and ``opt.bin`` (little-endian float32, sample-major)."""
    root = Path(path)
    root.mkdir(parents=True, exist_ok=True)
    header = {"patch": ds.synth.patch, "sar_ch": SAR_CHANNELS, "opt_ch": OPT_CHANNELS, "count": len(ds)}
    header.update({f"synth.{k}": v for k, v in ds.synth.header().items() if v is not None})
    lines = [" ".join(f"{k}={v}" for k, v in header.items())]
    for i in range(len(ds)):
        label = "-" if ds.labels[i] < 0 else str(int(ds.labels[i]))
        lines.append(f"{int(ds.ids[i])} {label} {float(ds.offsets[i])!r} {int(ds.seeds[i])}")
    (root / MANIFEST).write_text("\n".join(lines) + "\n", encoding="ascii")
    (root / SAR_BIN).write_bytes(np.ascontiguousarray(ds.sar, dtype="<f4").tobytes())
    (root / OPT_BIN).write_bytes(np.ascontiguousarray(ds.opt, dtype="<f4").tobytes())


def load_dataset(path) -> Dataset:
    root = Path(path)
    try:
        raw = (root / MANIFEST).read_bytes()
    except OSError as exc:
        raise DataError(f"cannot read dataset manifest {root / MANIFEST}: {exc}") from exc
    text = raw.decode("ascii", errors="replace")
    lines = text.split("\n")
    if lines and lines[-1] == "":
        lines.pop()
    if not lines:
        raise ParseError("empty manifest", 0)
    header: dict[str, str] = {}
    for tok in lines[0].split():
        if "=" not in tok:
            raise ParseError(f"bad header token {tok!r}", 0)
        k, v = tok.split("=", 1)
        header[k] = v
    for key in ("patch", "sar_ch", "opt_ch", "count"):
        if key not in header:
            raise ParseError(f"manifest header missing {key!r}", 0)
    p, sc, oc, count = (int(header[k]) for k in ("patch", "sar_ch", "opt_ch", "count"))
    if sc != SAR_CHANNELS or oc != OPT_CHANNELS:
        raise ParseError(f"unsupported channel counts sar={sc} opt={oc}", 0)
    synth_kw = {k[6:]: v for k, v in header.items() if k.startswith("synth.")}
    synth_kw.setdefault("patch", str(p))
    synth = SynthConfig.from_header(synth_kw)
    records = lines[1:]
    if len(records) != count:
        raise ParseError(f"manifest declares {count} samples but lists {len(records)}", len(raw))
    ids = np.zeros(count, np.int64)
    labels = np.full(count, -1, np.int64)
    offsets = np.zeros(count)
    seeds = np.zeros(count, np.int64)
    pos = len(lines[0]) + 1
    for i, rec in enumerate(records):
        parts = rec.split()
        try:
            if len(parts) != 4:
                raise ValueError(f"expected 4 fields, got {len(parts)}")
            ids[i] = int(parts[0])
            labels[i] = -1 if parts[1] == "-" else int(parts[1])
            offsets[i] = float(parts[2])
            seeds[i] = int(parts[3])
        except ValueError as exc:
            raise ParseError(f"bad manifest record {rec!r}: {exc}", pos) from exc
        pos += len(rec) + 1

    def read(name, ch):
        want = count * ch * p * p * 4
        buf = (root / name).read_bytes()
        if len(buf) != want:
            raise ParseError(f"{name} holds {len(buf)} bytes, expected {want}", min(len(buf), want))
        return np.frombuffer(buf, dtype="<f4").reshape(count, ch, p, p).astype(np.float32)

    return Dataset(synth, read(SAR_BIN, sc), read(OPT_BIN, oc), labels, offsets, seeds, ids)
