import math

import numpy as np
import pytest
import torch
from hypothesis import given, settings, strategies as st

from hierpaint.errors import ConfigurationError
from hierpaint.tam import (
    CrossSliceAttention,
    GatedConv2d,
    TissueAwareAttention,
    broadcast_tokens,
    pool_slice_tokens,
)


def _randomized(channels=8, heads=4, seed=0):
    torch.manual_seed(seed)
    tam = TissueAwareAttention(channels, heads).double()
    with torch.no_grad():
        tam.proj.weight.normal_(0, 0.3)
        tam.proj.bias.normal_(0, 0.1)
    return tam


def test_pool_constant_and_half_split():
    fm = torch.full((2, 3, 4, 4), 2.5)
    assert torch.equal(pool_slice_tokens(fm), torch.full((2, 3), 2.5))
    half = torch.zeros(1, 1, 4, 4)
    half[..., 2:] = 2.0
    assert pool_slice_tokens(half).item() == 1.0


def test_pool_matches_double_loop():
    fm = torch.randn(3, 2, 4, 4, dtype=torch.float64)
    tokens = pool_slice_tokens(fm)
    for b in range(3):
        for c in range(2):
            acc = 0.0
            for i in range(4):
                for j in range(4):
                    acc += fm[b, c, i, j].item()
            assert abs(tokens[b, c].item() - acc / 16) <= 1e-7


def test_broadcast_properties():
    tokens = torch.randn(3, 5)
    out = broadcast_tokens(tokens, (3, 5, 6, 7))
    assert out.shape == (3, 5, 6, 7)
    assert torch.all(out.var(dim=(2, 3)) == 0)
    assert torch.equal(pool_slice_tokens(out), tokens)
    assert torch.equal(broadcast_tokens(tokens, (3, 5, 1, 1))[:, :, 0, 0], tokens)
    assert torch.count_nonzero(broadcast_tokens(torch.zeros(2, 2), (2, 2, 3, 3))) == 0
    with pytest.raises(ConfigurationError):
        broadcast_tokens(tokens, (4, 5, 2, 2))


def test_attention_indivisible_heads():
    with pytest.raises(ConfigurationError):
        CrossSliceAttention(6, heads=4)


def test_attention_singleton_is_value_projection():
    torch.manual_seed(1)
    att = CrossSliceAttention(8, 4).double()
    tok = torch.randn(1, 8, dtype=torch.float64)
    w = att.attention_weights(tok)
    assert torch.allclose(w, torch.ones_like(w))
    assert torch.allclose(att(tok), att.out(att.v(tok)))


def test_attention_identical_tokens_uniform():
    att = CrossSliceAttention(8, 2)
    tok = torch.randn(1, 8).expand(5, 8)
    w = att.attention_weights(tok)
    assert torch.allclose(w, torch.full_like(w, 0.2), atol=1e-6)


def test_attention_matches_hand_computation():
    att = CrossSliceAttention(4, heads=1).double()
    g = torch.Generator().manual_seed(2)
    with torch.no_grad():
        for lin in (att.q, att.k, att.v, att.out):
            lin.weight.copy_(0.5 * torch.randn(4, 4, generator=g, dtype=torch.float64))
            lin.bias.copy_(0.1 * torch.randn(4, generator=g, dtype=torch.float64))
    tok = torch.randn(3, 4, generator=g, dtype=torch.float64)
    X = tok.numpy()

    def lin(layer, a):
        return a @ layer.weight.detach().numpy().T + layer.bias.detach().numpy()

    Q, K, V = lin(att.q, X), lin(att.k, X), lin(att.v, X)
    S = Q @ K.T / math.sqrt(4)
    A = np.exp(S - S.max(axis=1, keepdims=True))
    A /= A.sum(axis=1, keepdims=True)
    expected = lin(att.out, A @ V)
    np.testing.assert_allclose(att(tok).detach().numpy(), expected, atol=1e-6)


def test_gated_conv_initial_gate():
    gc = GatedConv2d(2, 3)
    with torch.no_grad():
        gc.gate.weight.zero_()
    x = torch.randn(2, 2, 5, 5)
    gate = torch.sigmoid(gc.gate(x))
    assert torch.allclose(gate, torch.full_like(gate, 1 / (1 + math.exp(-5))))
    assert abs(gate.mean().item() - 0.9933) < 1e-4


def test_gated_conv_suppression():
    gc = GatedConv2d(1, 1)
    with torch.no_grad():
        gc.gate.weight.zero_()
        gc.gate.bias.fill_(-200.0)
    assert gc(torch.randn(1, 1, 4, 4)).abs().max() < 1e-30


def test_gated_conv_matches_elementwise_recomputation():
    torch.manual_seed(3)
    gc = GatedConv2d(1, 1).double()
    x = torch.randn(1, 1, 2, 2, dtype=torch.float64)
    xp = np.pad(x[0, 0].numpy(), 1)

    def conv(layer):
        k = layer.weight.detach().numpy()[0, 0]
        out = np.empty((2, 2))
        for i in range(2):
            for j in range(2):
                out[i, j] = (xp[i : i + 3, j : j + 3] * k).sum() + layer.bias.item()
        return out

    expected = conv(gc.feature) / (1 + np.exp(-conv(gc.gate)))
    np.testing.assert_allclose(gc(x)[0, 0].detach().numpy(), expected, atol=1e-6)


def test_identity_at_init():
    torch.manual_seed(4)
    for i in range(100):
        tam = TissueAwareAttention(8, 4)
        x = torch.randn(1 + i % 7, 8, 4 + i % 3, 4)
        assert (tam(x) - x).abs().max() <= 1e-6


@settings(max_examples=25, deadline=None)
@given(b=st.integers(2, 7), seed=st.integers(0, 2**16))
def test_permutation_equivariance(b, seed):
    tam = _randomized(seed=seed % 7)
    g = torch.Generator().manual_seed(seed)
    x = torch.randn(b, 8, 4, 4, generator=g, dtype=torch.float64)
    perm = torch.randperm(b, generator=g)
    assert (tam(x[perm]) - tam(x)[perm]).abs().max() <= 1e-6


def test_singleton_depth_is_per_slice():
    tam = _randomized()
    x = torch.randn(3, 8, 4, 4, dtype=torch.float64)
    alone = torch.cat([tam(x[i : i + 1]) for i in range(3)])
    assert torch.isfinite(alone).all()
    # with more than one slice, tokens mix and the result differs
    assert (tam(x) - alone).abs().max() > 1e-6


def test_shape_preserved():
    tam = _randomized()
    x = torch.randn(5, 8, 6, 3, dtype=torch.float64)
    assert tam(x).shape == x.shape
