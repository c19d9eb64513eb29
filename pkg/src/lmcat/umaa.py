"""Cross-modal attention layer with an attention-level contrastive alignment loss.

All M modalities of a sample are processed together. Every head projects each
modality's tokens to queries, keys and values; modality ``i`` attends to every
modality ``j`` (itself included) and the per-pair outputs are summed. The raw
score matrices ``S_ij = Q_i K_j^T`` of the ordered pairs ``i != j`` double as
logits of a token-level InfoNCE whose positives are equal token indices.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .errors import ConfigError, ContractError, ShapeError
from .nn import Module, init_normal, ones, zeros
from .tensor import Tensor

CROSS = "cross"
SELF = "self"


@dataclass(frozen=True)
class AlignmentConfig:
    """Temperature and switches for the alignment objective.

    ``compute_loss=False`` keeps the attention structure but reports a zero loss.
    """

    tau: float = 0.1
    compute_loss: bool = True

    def __post_init__(self):
        if not self.tau > 0:
            raise ConfigError(f"temperature must be positive, got {self.tau}")


RESIDUAL_GAIN = 0.1


class UmaaLayer(Module):
    """Weights of one layer. Head ``h`` uses columns ``h*d_k:(h+1)*d_k`` of ``wq/wk/wv``.

    ``mode="self"`` restricts attention to within-modality pairs and never
    produces an alignment loss (standard multi-head attention per modality).
    """

    def __init__(self, dim: int, heads: int, rng: np.random.Generator, dtype=np.float64, mode: str = CROSS):
        if heads < 1 or dim % heads:
            raise ConfigError(f"embedding dim {dim} not divisible by {heads} heads")
        if mode not in (CROSS, SELF):
            raise ConfigError(f"unknown attention mode {mode!r}")
        self.dim = dim
        self.heads = heads
        self.mode = mode
        self.wq = init_normal(rng, (dim, dim), dim, dtype)
        self.wk = init_normal(rng, (dim, dim), dim, dtype)
        self.wv = init_normal(rng, (dim, dim), dim, dtype)
        # residual branches start small so stacked layers begin close to identity
        self.wo = init_normal(rng, (dim, dim), dim, dtype, gain=RESIDUAL_GAIN)
        self.mlp_w1 = init_normal(rng, (dim, dim), dim, dtype)
        self.mlp_w2 = init_normal(rng, (dim, dim), dim, dtype, gain=RESIDUAL_GAIN)
        self.ln1_gamma = ones((dim,), dtype)
        self.ln1_beta = zeros((dim,), dtype)
        self.ln2_gamma = ones((dim,), dtype)
        self.ln2_beta = zeros((dim,), dtype)

    @property
    def d_k(self) -> int:
        return self.dim // self.heads

    def projection_params(self) -> list[Tensor]:
        return [self.wq, self.wk, self.wv, self.wo, self.mlp_w1, self.mlp_w2]

    def norm_params(self) -> list[Tensor]:
        return [self.ln1_gamma, self.ln1_beta, self.ln2_gamma, self.ln2_beta]


def umaa_weight_count(dim: int = 128) -> int:
    """Projection weights per layer: Q/K/V, output, and the two MLP matrices."""
    return 6 * dim * dim


def attention(q: Tensor, k: Tensor, v: Tensor) -> tuple[Tensor, Tensor]:
    """Scaled dot-product attention of ``q`` over ``k/v``; returns ``(A, A @ v)``."""
    if q.shape[-2] == 0 or k.shape[-2] == 0:
        raise ContractError("attention over zero tokens")
    if q.shape[-1] != k.shape[-1] or k.shape[-2] != v.shape[-2]:
        raise ShapeError(f"attention shapes q={q.shape} k={k.shape} v={v.shape}")
    a = T.softmax_rows(T.matmul(q, k.T), 1.0 / math.sqrt(q.shape[-1]))
    return a, T.matmul(a, v)


def alignment_loss(q: Tensor, k: Tensor, tau: float) -> Tensor:
    """Mean over tokens of ``-log softmax(Q K^T / tau)[n, n]``. Nonnegative."""
    if not tau > 0:
        raise ConfigError(f"temperature must be positive, got {tau}")
    if q.shape != k.shape:
        raise ContractError(f"alignment requires equal token counts, got {q.shape} vs {k.shape}")
    return T.mean(T.info_nce_rows(T.matmul(q, k.T), tau))


def _split_heads(x: Tensor, heads: int) -> Tensor:
    # (B, M, N, D) -> (B, H, M, N, d_k)
    b, m, n, d = x.shape
    return T.transpose(x.reshape(b, m, n, heads, d // heads), (0, 3, 1, 2, 4))


def umaa_forward(tokens: list[Tensor], layer: UmaaLayer, cfg: AlignmentConfig) -> tuple[list[Tensor], Tensor]:
    """Run one layer over all modalities.

    Args:
        tokens: M tensors of shape (N, D) or (B, N, D), same N and D.
        layer: layer weights.
        cfg: alignment settings.

    Returns:
        Updated tokens (same shapes) and the alignment loss averaged over heads,
        ordered modality pairs and the batch.
    """
    if not tokens:
        raise ContractError("umaa_forward needs at least one modality")
    shapes = {t.shape for t in tokens}
    if len(shapes) != 1:
        raise ContractError(f"all modalities must share token count and dim, got {sorted(shapes)}")
    unbatched = tokens[0].ndim == 2
    if unbatched:
        tokens = [t.reshape((1,) + t.shape) for t in tokens]
    b, n, d = tokens[0].shape
    if d != layer.dim:
        raise ShapeError(f"token dim {d} != layer dim {layer.dim}")
    m, h, dk = len(tokens), layer.heads, layer.d_k

    z = T.stack(tokens, axis=1)
    q = _split_heads(T.matmul(z, layer.wq), h)
    k = _split_heads(T.matmul(z, layer.wk), h)
    v = _split_heads(T.matmul(z, layer.wv), h)
    kt = T.swapaxes(k, -1, -2)

    loss = Tensor(np.zeros((), dtype=z.dtype))
    if layer.mode == CROSS:
        # (B,H,M,1,N,dk) @ (B,H,1,M,dk,N) -> scores for every ordered pair (i, j)
        s = T.matmul(q.reshape(b, h, m, 1, n, dk), kt.reshape(b, h, 1, m, dk, n))
        a = T.softmax_rows(s, 1.0 / math.sqrt(dk))
        out = T.tsum(T.matmul(a, v.reshape(b, h, 1, m, n, dk)), axis=3)
        if cfg.compute_loss and m > 1:
            ii, jj = np.nonzero(~np.eye(m, dtype=bool))
            pairs = T.gather_unique(s, (slice(None), slice(None), ii, jj))  # (B,H,P,N,N)
            per_row = T.info_nce_rows(pairs, cfg.tau)
            loss = T.tsum(per_row) / (b * n * h * m * (m - 1))
    else:
        a = T.softmax_rows(T.matmul(q, kt), 1.0 / math.sqrt(dk))
        out = T.matmul(a, v)

    delta = T.transpose(out, (0, 2, 3, 1, 4)).reshape(b, m, n, d)
    z = T.layer_norm(z + T.matmul(delta, layer.wo), layer.ln1_gamma, layer.ln1_beta)
    mlp = T.matmul(T.gelu(T.matmul(z, layer.mlp_w1)), layer.mlp_w2)
    z = T.layer_norm(z + mlp, layer.ln2_gamma, layer.ln2_beta)

    outs = [z[:, i] for i in range(m)]
    if unbatched:
        outs = [o.reshape(n, d) for o in outs]
    return outs, loss


def token_reduce(tokens: Tensor, factor: int) -> Tensor:
    """Average-pool a row-major square token grid with window = stride = ``factor``."""
    n = tokens.shape[-2]
    side = math.isqrt(n)
    if side * side != n:
        raise ContractError(f"token count {n} is not a square grid")
    if factor < 1 or side % factor:
        raise ContractError(f"reduction factor {factor} does not divide grid side {side}")
    if factor == 1:
        return tokens
    return T.avg_pool_grid(tokens, side, factor)
