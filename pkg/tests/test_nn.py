import math

import numpy as np
import pytest

from scnet import nn
from scnet.params import ParameterStore
from scnet.tensor import Tensor


def brute_attention(q, k, v, mask, heads):
    """Loop-per-head oracle with explicit softmax."""
    lq, d = q.shape
    dh = d // heads
    dvh = v.shape[1] // heads
    out = np.zeros((lq, v.shape[1]))
    for h in range(heads):
        qs, ks = q[:, h * dh:(h + 1) * dh], k[:, h * dh:(h + 1) * dh]
        vs = v[:, h * dvh:(h + 1) * dvh]
        for i in range(lq):
            logits = [qs[i] @ ks[j] / math.sqrt(dh) for j in range(k.shape[0])]
            allowed = [j for j in range(k.shape[0]) if mask[j]]
            if not allowed:
                continue
            m = max(logits[j] for j in allowed)
            w = {j: math.exp(logits[j] - m) for j in allowed}
            z = sum(w.values())
            out[i, h * dvh:(h + 1) * dvh] = sum(w[j] / z * vs[j] for j in allowed)
    return out


@pytest.mark.parametrize("heads", [1, 2, 4])
def test_attention_matches_oracle(heads, rng):
    q, k, v = rng.normal(size=(3, 8)), rng.normal(size=(5, 8)), rng.normal(size=(5, 4))
    mask = np.array([True, False, True, True, False])
    out = nn.attention(Tensor(q), Tensor(k), Tensor(v), mask[None, :], num_heads=heads).data
    assert np.allclose(out, brute_attention(q, k, v, mask, heads), atol=1e-12)


def test_attention_examples(rng):
    v = rng.normal(size=(1, 4))
    out = nn.attention(Tensor(rng.normal(size=(3, 4))), Tensor(rng.normal(size=(1, 4))), Tensor(v))
    assert np.allclose(out.data, np.repeat(v, 3, 0), atol=1e-15)
    key = rng.normal(size=(1, 4))
    v2 = rng.normal(size=(2, 4))
    out = nn.attention(Tensor(rng.normal(size=(2, 4))), Tensor(np.repeat(key, 2, 0)), Tensor(v2))
    assert np.allclose(out.data, v2.mean(0), atol=1e-14)
    out = nn.attention(Tensor(rng.normal(size=(2, 4))), Tensor(rng.normal(size=(2, 4))), Tensor(v2),
                       np.array([[True, False]]))
    assert np.array_equal(out.data, np.repeat(v2[:1], 2, 0))


def test_attention_weights_are_convex(rng):
    q, k, v = (Tensor(rng.normal(size=(2, 3, 8))) for _ in range(3))
    mask = np.ones((2, 1, 3), bool)
    mask[1, 0, 2] = False
    _, w = nn.attention(q, k, v, mask, num_heads=2, return_weights=True)
    assert (w.data >= 0).all()
    assert np.allclose(w.data.sum(-1), 1.0)
    assert np.array_equal(w.data[1, :, :, 2], np.zeros((2, 3)))


def test_attention_fully_masked_query_gives_zero(rng):
    q, k, v = (Tensor(rng.normal(size=(2, 4))) for _ in range(3))
    out = nn.attention(q, k, v, np.array([[True, True], [False, False]]))
    assert np.array_equal(out.data[1], np.zeros(4))


def test_attention_errors(rng):
    t = Tensor(rng.normal(size=(2, 4)))
    with pytest.raises(ValueError):
        nn.attention(t, t, t, num_heads=0)
    with pytest.raises(ValueError):
        nn.attention(t, Tensor(rng.normal(size=(2, 3))), t)
    with pytest.raises(ValueError):
        nn.attention(t, t, t, num_heads=3)


def test_linear_and_layers_register_parameters(rng):
    store = ParameterStore()
    nn.init_transformer_layer(store, rng, "blk", 8, 16)
    names = store.names()
    assert names == sorted(names)
    assert "blk.attn.query.weight" in store and "blk.ffn.fc2.bias" in store
    x = Tensor(rng.normal(size=(2, 3, 8)))
    y = nn.transformer_layer(store, "blk", x, nn.key_mask_to_attn(np.ones((2, 3), bool)), 2)
    assert y.shape == x.shape and np.isfinite(y.data).all()
