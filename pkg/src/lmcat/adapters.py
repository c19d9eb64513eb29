"""Modality-spectral adapters: two stacked 1x1 convolutions with GELU.

A 1x1 convolution is a per-pixel channel mix, so the adapter is implemented as
two matrix products over the channel axis of the flattened pixel grid. Tokens
are the pixels in row-major ``(h, w)`` order, the same for every modality.
"""

from __future__ import annotations

import numpy as np

from . import tensor as T
from .errors import ConfigError, ContractError
from .nn import Module, init_normal, ones, zeros
from .tensor import Tensor

HIDDEN = 4
EMBED = 128


def pixels_to_tokens(x: Tensor) -> Tensor:
    """(B, C, H, W) or (C, H, W) -> (B, H*W, C) / (H*W, C)."""
    if x.ndim == 3:
        c, h, w = x.shape
        return T.transpose(x.reshape(c, h * w), (1, 0))
    if x.ndim == 4:
        b, c, h, w = x.shape
        return T.transpose(x.reshape(b, c, h * w), (0, 2, 1))
    raise ContractError(f"expected (C,H,W) or (B,C,H,W) input, got {x.shape}")


class MsaWeights(Module):
    """Adapter for one modality.

    Attributes:
        w1: (hidden, C_m) first 1x1 kernel.
        w2: (embed, hidden) second 1x1 kernel.
        b1, b2: optional biases (only when ``with_bias``).
        norm_gamma, norm_beta: per-modality LayerNorm affine applied to the output tokens.
    """

    def __init__(self, channels: int, rng: np.random.Generator, embed: int = EMBED, hidden: int = HIDDEN,
                 with_bias: bool = False, dtype=np.float64):
        if channels < 1:
            raise ConfigError(f"modality channel count must be >= 1, got {channels}")
        self.channels = channels
        self.w1 = init_normal(rng, (hidden, channels), channels, dtype)
        self.w2 = init_normal(rng, (embed, hidden), hidden, dtype)
        if with_bias:
            self.b1 = zeros((hidden,), dtype)
            self.b2 = zeros((embed,), dtype)
        self.norm_gamma = ones((embed,), dtype)
        self.norm_beta = zeros((embed,), dtype)

    @property
    def with_bias(self) -> bool:
        return hasattr(self, "b1")

    def conv_params(self) -> list[Tensor]:
        """Convolution weights only (excludes the LayerNorm affine)."""
        out = [self.w1, self.w2]
        if self.with_bias:
            out += [self.b1, self.b2]
        return out


def msa_forward(x: Tensor, w: MsaWeights, normalize: bool = True) -> Tensor:
    """Embed one modality's pixels as tokens: ``LN(W2 . GELU(W1 . x))`` per pixel.

    Args:
        x: (C_m, H, W) or (B, C_m, H, W) preprocessed patch.
        w: the modality's adapter.
        normalize: apply the modality LayerNorm (disable to inspect raw conv output).

    Returns:
        (H*W, embed) or (B, H*W, embed) tokens.
    """
    channel_axis = 0 if x.ndim == 3 else 1
    if x.ndim not in (3, 4) or x.shape[channel_axis] != w.channels:
        raise ConfigError(f"adapter expects {w.channels} channels, got input of shape {x.shape}")
    tok = pixels_to_tokens(x)
    hidden = T.matmul(tok, w.w1.T)
    if w.with_bias:
        hidden = hidden + w.b1
    hidden = T.gelu(hidden)
    z = T.matmul(hidden, w.w2.T)
    if w.with_bias:
        z = z + w.b2
    if normalize:
        z = T.layer_norm(z, w.norm_gamma, w.norm_beta)
    return z


class LinearProjection(Module):
    """Single C_m -> embed projection, the adapter-free ablation."""

    def __init__(self, channels: int, rng: np.random.Generator, embed: int = EMBED, dtype=np.float64):
        if channels < 1:
            raise ConfigError(f"modality channel count must be >= 1, got {channels}")
        self.channels = channels
        self.w = init_normal(rng, (embed, channels), channels, dtype)
        self.norm_gamma = ones((embed,), dtype)
        self.norm_beta = zeros((embed,), dtype)

    def conv_params(self) -> list[Tensor]:
        return [self.w]


def linear_forward(x: Tensor, w: LinearProjection, normalize: bool = True) -> Tensor:
    channel_axis = 0 if x.ndim == 3 else 1
    if x.ndim not in (3, 4) or x.shape[channel_axis] != w.channels:
        raise ConfigError(f"projection expects {w.channels} channels, got input of shape {x.shape}")
    z = T.matmul(pixels_to_tokens(x), w.w.T)
    if normalize:
        z = T.layer_norm(z, w.norm_gamma, w.norm_beta)
    return z


def embed_modality(x: Tensor, adapter) -> Tensor:
    if isinstance(adapter, LinearProjection):
        return linear_forward(x, adapter)
    return msa_forward(x, adapter)


def msa_param_count(channels: int, with_bias: bool = False, hidden: int = HIDDEN, embed: int = EMBED) -> int:
    """Number of convolution weights in one adapter."""
    if channels < 1:
        raise ConfigError(f"modality channel count must be >= 1, got {channels}")
    count = hidden * channels + embed * hidden
    if with_bias:
        count += hidden + embed
    return count


def param_reduction_ratio(channels: int) -> float:
    """``1 - 4 (C + 128) / (128 C)``, evaluated literally; can be negative for small C."""
    if channels < 1:
        raise ConfigError(f"modality channel count must be >= 1, got {channels}")
    return 1.0 - HIDDEN * (channels + EMBED) / (channels * EMBED)
