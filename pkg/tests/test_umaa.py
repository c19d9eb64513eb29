import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from lmcat import tensor as T
from lmcat.errors import ConfigError, ContractError
from lmcat.tensor import Tensor
from lmcat.umaa import (AlignmentConfig, UmaaLayer, alignment_loss, attention, token_reduce, umaa_forward,
                        umaa_weight_count)

from oracles import central_difference, matmul, naive_alignment, naive_umaa, rel_err, softmax, transpose


def randomized_layer(dim, heads, rng):
    layer = UmaaLayer(dim, heads, rng)
    for p in layer.norm_params():
        p.data[...] = rng.standard_normal(p.shape) * 0.5 + (1.0 if p is layer.ln1_gamma or p is layer.ln2_gamma else 0.0)
    return layer


def layer_dict(layer):
    return {name: p.data for name, p in layer.named_parameters()}


# -- attention -----------------------------------------------------------------------
def test_single_token_attention(rng):
    q, k, v = (Tensor(rng.standard_normal((1, 3))) for _ in range(3))
    a, out = attention(q, k, v)
    assert np.array_equal(a.data, [[1.0]])
    assert np.allclose(out.data, v.data, atol=1e-15)


def test_hardmax_limit(rng):
    k = Tensor(np.eye(3))
    v = Tensor(rng.standard_normal((3, 3)))
    q = Tensor([[1e4, 0.0, 0.0]])
    _, out = attention(q, k, v)
    assert np.allclose(out.data[0], v.data[0], atol=1e-12)


def test_attention_matches_hand_computation(rng):
    q, k, v = (rng.standard_normal((3, 2)) for _ in range(3))
    _, out = attention(Tensor(q), Tensor(k), Tensor(v))
    s = matmul(q, transpose(k))
    a = [softmax([x / math.sqrt(2) for x in row]) for row in s]
    assert np.allclose(out.data, matmul(a, v), atol=1e-6)
    assert np.allclose(out.data, matmul(a, v), atol=1e-14)


def test_attention_zero_tokens():
    with pytest.raises(ContractError):
        attention(Tensor(np.zeros((0, 2))), Tensor(np.zeros((0, 2))), Tensor(np.zeros((0, 2))))


def test_attention_permutation_equivariance(rng):
    q, k, v = (rng.standard_normal((4, 3)) for _ in range(3))
    perm = rng.permutation(4)
    a, out = attention(Tensor(q), Tensor(k), Tensor(v))
    ap, outp = attention(Tensor(q), Tensor(k[perm]), Tensor(v[perm]))
    assert np.allclose(ap.data, a.data[:, perm], atol=1e-15)
    assert np.allclose(outp.data, out.data, atol=1e-14)


# -- alignment loss ------------------------------------------------------------------
def test_alignment_perfect_limit():
    s = Tensor(np.eye(4) * 1e3)
    loss = alignment_loss(s, Tensor(np.eye(4)), 0.1).item()
    assert 0.0 <= loss < 1e-12


def test_alignment_zero_scores_is_log_n():
    q = Tensor(np.zeros((4, 3)))
    assert abs(alignment_loss(q, Tensor(np.ones((4, 3))), 0.1).item() - math.log(4)) < 1e-15


def test_alignment_matches_oracle(rng):
    q, k = rng.standard_normal((3, 2)), rng.standard_normal((3, 2))
    assert abs(alignment_loss(Tensor(q), Tensor(k), 0.1).item() - naive_alignment(q, k, 0.1)) < 1e-6


@pytest.mark.parametrize("tau", [0.0, -0.5])
def test_alignment_rejects_nonpositive_tau(tau):
    with pytest.raises(ConfigError):
        alignment_loss(Tensor(np.zeros((2, 2))), Tensor(np.zeros((2, 2))), tau)
    with pytest.raises(ConfigError):
        AlignmentConfig(tau=tau)


def test_lower_temperature_sharpens():
    s = np.array([[3.0, 1.0, 0.5], [0.2, 2.0, 1.0], [0.0, 0.4, 1.5]])
    q, k = Tensor(s), Tensor(np.eye(3))
    losses = [alignment_loss(q, k, tau).item() for tau in (2.0, 1.0, 0.5, 0.1)]
    assert all(a > b for a, b in zip(losses, losses[1:]))


@settings(max_examples=40, deadline=None)
@given(st.integers(1, 6), st.integers(1, 4), st.floats(0.05, 5.0), st.integers(0, 2**31 - 1))
def test_alignment_nonnegative(n, dk, tau, seed):
    r = np.random.default_rng(seed)
    q, k = r.standard_normal((n, dk)) * 3, r.standard_normal((n, dk)) * 3
    assert alignment_loss(Tensor(q), Tensor(k), tau).item() >= 0.0


# -- layer forward -------------------------------------------------------------------
@pytest.mark.parametrize("m", [2, 3])
@pytest.mark.parametrize("heads", [1, 2, 4])
def test_forward_matches_naive_loops(m, heads, rng):
    dim, n, tau = 8, 3, 0.5
    layer = randomized_layer(dim, heads, rng)
    tokens = [rng.standard_normal((n, dim)) for _ in range(m)]
    out, loss = umaa_forward([Tensor(t) for t in tokens], layer, AlignmentConfig(tau))
    ref_out, ref_loss = naive_umaa(tokens, layer_dict(layer), heads, tau)
    for a, b in zip(out, ref_out):
        assert np.max(np.abs(a.data - b)) < 1e-6
    assert abs(loss.item() - ref_loss) < 1e-6


def test_batched_equals_per_sample(rng):
    layer = randomized_layer(8, 2, rng)
    batch = [rng.standard_normal((3, 4, 8)) for _ in range(2)]
    out, loss = umaa_forward([Tensor(b) for b in batch], layer, AlignmentConfig(0.3))
    per = [umaa_forward([Tensor(b[s]) for b in batch], layer, AlignmentConfig(0.3)) for s in range(3)]
    for mi in range(2):
        assert np.allclose(out[mi].data, np.stack([p[0][mi].data for p in per]), atol=1e-13)
    assert abs(loss.item() - np.mean([p[1].item() for p in per])) < 1e-13


def test_single_modality_zero_loss_but_updated(rng):
    layer = randomized_layer(8, 2, rng)
    z = rng.standard_normal((4, 8))
    out, loss = umaa_forward([Tensor(z)], layer, AlignmentConfig())
    assert loss.item() == 0.0
    assert not np.allclose(out[0].data, z)
    ref, _ = naive_umaa([z], layer_dict(layer), 2, 0.1)
    assert np.max(np.abs(out[0].data - ref[0])) < 1e-6


@pytest.mark.parametrize("n", [1, 2, 4, 9])
def test_zero_query_weights_give_log_n(n, rng):
    layer = randomized_layer(8, 2, rng)
    layer.wq.data[...] = 0.0
    tokens = [Tensor(rng.standard_normal((n, 8))) for _ in range(3)]
    _, loss = umaa_forward(tokens, layer, AlignmentConfig(0.1))
    assert abs(loss.item() - math.log(n)) < 1e-9


def test_mismatched_token_counts(rng):
    layer = UmaaLayer(8, 2, rng)
    with pytest.raises(ContractError):
        umaa_forward([Tensor(np.zeros((4, 8))), Tensor(np.zeros((3, 8)))], layer, AlignmentConfig())


def test_loss_disabled_keeps_tokens(rng):
    layer = randomized_layer(8, 2, rng)
    tokens = [Tensor(rng.standard_normal((4, 8))) for _ in range(2)]
    out_on, loss_on = umaa_forward(tokens, layer, AlignmentConfig(0.1, compute_loss=True))
    out_off, loss_off = umaa_forward(tokens, layer, AlignmentConfig(0.1, compute_loss=False))
    assert loss_on.item() > 0 and loss_off.item() == 0.0
    for a, b in zip(out_on, out_off):
        assert np.array_equal(a.data, b.data)


def test_modality_order_symmetry(rng):
    layer = randomized_layer(8, 4, rng)
    a, b = rng.standard_normal((4, 8)), rng.standard_normal((4, 8))
    (oa, ob), l1 = umaa_forward([Tensor(a), Tensor(b)], layer, AlignmentConfig())
    (pb, pa), l2 = umaa_forward([Tensor(b), Tensor(a)], layer, AlignmentConfig())
    assert np.allclose(oa.data, pa.data, atol=1e-13) and np.allclose(ob.data, pb.data, atol=1e-13)
    assert abs(l1.item() - l2.item()) < 1e-13


def test_self_mode_has_no_cross_talk(rng):
    layer = randomized_layer(8, 2, rng)
    layer.mode = "self"
    a, b, c = (rng.standard_normal((4, 8)) for _ in range(3))
    (oa, _), loss = umaa_forward([Tensor(a), Tensor(b)], layer, AlignmentConfig())
    (oa2, _), _ = umaa_forward([Tensor(a), Tensor(c)], layer, AlignmentConfig())
    assert loss.item() == 0.0
    assert np.array_equal(oa.data, oa2.data)


def test_weight_count():
    assert umaa_weight_count(128) == 98_304
    layer = UmaaLayer(128, 4, np.random.default_rng(0))
    assert sum(p.size for p in layer.projection_params()) == 98_304
    assert 4 * umaa_weight_count() == 393_216


def test_head_divisibility():
    with pytest.raises(ConfigError):
        UmaaLayer(10, 4, np.random.default_rng(0))


@pytest.mark.parametrize("m", [2, 3])
def test_layer_gradients(m, rng):
    dim, n = 4, 3
    layer = randomized_layer(dim, 2, rng)
    tokens = [rng.standard_normal((n, dim)) for _ in range(m)]
    target = [rng.standard_normal((n, dim)) for _ in range(m)]
    cfg = AlignmentConfig(0.7)

    def scalar(ts):
        out, loss = umaa_forward(ts, layer, cfg)
        total = loss
        for o, t in zip(out, target):
            total = total + T.tsum(o * Tensor(t))
        return total

    ts = [Tensor(t, requires_grad=True) for t in tokens]
    layer.zero_grad()
    scalar(ts).backward()
    params = layer.parameters()
    analytic = [p.grad.copy() for p in params] + [t.grad for t in ts]
    numeric = central_difference(lambda: scalar([Tensor(t) for t in tokens]).item(), [p.data for p in params] + tokens)
    for a, b in zip(analytic, numeric):
        assert rel_err(a, b) < 1e-6


def test_loss_only_gradients(rng):
    layer = randomized_layer(4, 1, rng)
    tokens = [rng.standard_normal((4, 4)) for _ in range(2)]
    cfg = AlignmentConfig(0.2)
    layer.zero_grad()
    umaa_forward([Tensor(t) for t in tokens], layer, cfg)[1].backward()
    analytic = [layer.wq.grad.copy(), layer.wk.grad.copy()]
    numeric = central_difference(lambda: umaa_forward([Tensor(t) for t in tokens], layer, cfg)[1].item(),
                                 [layer.wq.data, layer.wk.data])
    for a, b in zip(analytic, numeric):
        assert rel_err(a, b) < 1e-6
    # value, output and MLP weights do not influence the loss
    assert not np.any(layer.wv.grad) and not np.any(layer.mlp_w2.grad)


# -- token reduction -----------------------------------------------------------------
def test_token_reduce_shapes(rng):
    assert token_reduce(Tensor(rng.standard_normal((256, 128))), 2).shape == (64, 128)
    assert token_reduce(Tensor(rng.standard_normal((2, 16, 3))), 4).shape == (2, 1, 3)


def test_token_reduce_constant_and_identity(rng):
    c = Tensor(np.tile(rng.standard_normal(5), (16, 1)))
    assert np.allclose(token_reduce(c, 2).data, c.data[:4], atol=1e-15)
    x = Tensor(rng.standard_normal((16, 5)))
    assert token_reduce(x, 1) is x


def test_token_reduce_averages_grid_blocks(rng):
    x = rng.standard_normal((16, 2))
    out = token_reduce(Tensor(x), 2).data
    grid = x.reshape(4, 4, 2)
    assert np.allclose(out[0], grid[:2, :2].mean(axis=(0, 1)))
    assert np.allclose(out[3], grid[2:, 2:].mean(axis=(0, 1)))


def test_token_reduce_errors():
    with pytest.raises(ContractError):
        token_reduce(Tensor(np.zeros((15, 2))), 2)
    with pytest.raises(ContractError):
        token_reduce(Tensor(np.zeros((9, 2))), 2)
