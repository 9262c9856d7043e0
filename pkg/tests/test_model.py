from __future__ import annotations

import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from faultloc.model import (
    EMBED_POS,
    EMBED_TOK,
    UNEMBED,
    ConfigError,
    InputError,
    ModelConfig,
    forward,
    init_model,
    model_digest,
    parse_tensor_name,
    reset_alpha,
    run_blocks,
    sublayer_tensor_names,
    tensor_schema,
    with_alpha,
)
from faultloc.tensor import digest_tensor

TINY = ModelConfig(n_blocks=2, d_model=8, n_heads=2, d_ff=16, vocab_size=16, max_seq_len=8, seed=7)
SMALL = ModelConfig(n_blocks=3, d_model=16, n_heads=4, d_ff=32, vocab_size=32, max_seq_len=12, seed=1)


def reference_logits(m, tokens, alpha=None):
    """Straight-line float64 forward written from the block equations, one
    position and one head at a time, sharing nothing with the runtime."""
    cfg = m.config
    W = {k: t.values(np.float64) for k, t in m.tensors.items()}
    alpha = list(m.alpha) if alpha is None else alpha
    dh = cfg.d_model // cfg.n_heads

    def norm(vec):
        return vec / math.sqrt(sum(x * x for x in vec) / len(vec) + 1e-5)

    def silu(x):
        return x / (1.0 + math.exp(-x))

    T = len(tokens)
    h = [W[EMBED_TOK][tokens[t]] + W[EMBED_POS][t] for t in range(T)]
    for i in range(cfg.n_blocks):
        p = lambda tag: W[f"block.{i}.{tag}"]  # noqa: E731
        xs = [norm(v) for v in h]
        q = [x @ p("attn.q") for x in xs]
        k = [x @ p("attn.k") for x in xs]
        v = [x @ p("attn.v") for x in xs]
        attn = []
        for t in range(T):
            ctx = np.zeros(cfg.d_model)
            for hd in range(cfg.n_heads):
                sl = slice(hd * dh, (hd + 1) * dh)
                s = [float(q[t][sl] @ k[j][sl]) / math.sqrt(dh) for j in range(t + 1)]
                mx = max(s)
                w = [math.exp(x - mx) for x in s]
                z = sum(w)
                ctx[sl] = sum((w[j] / z) * v[j][sl] for j in range(t + 1))
            attn.append(ctx @ p("attn.o"))
        new_h = []
        for t in range(T):
            u = h[t] + attn[t]
            y = norm(u)
            g = np.array([silu(x) for x in y @ p("mlp.gate")])
            f = (g * (y @ p("mlp.up"))) @ p("mlp.down")
            new_h.append(h[t] + alpha[i] * (attn[t] + f))
        h = new_h
    return np.array([norm(v) @ W[UNEMBED] for v in h])


@pytest.mark.parametrize("dtype", ["float32", "int8"])
@pytest.mark.parametrize("alpha", [None, [0.6, 1.3], [0.0, 1.0]])
def test_forward_matches_reference(dtype, alpha):
    m = init_model(TINY, dtype=dtype)
    # unit-scale weights so that the comparison is not dominated by tiny logits
    m = m.with_tensors({k: t.replace_data(t.data * 40) if dtype == "float32" else t for k, t in m.tensors.items()})
    if alpha is not None:
        m = m.with_alpha_vector(alpha)
    toks = [3, 15, 0, 7, 7, 1]
    got = forward(m, toks).logits[0].astype(np.float64)
    ref = reference_logits(m, toks)
    np.testing.assert_allclose(got, ref, rtol=1e-5, atol=1e-5 * np.abs(ref).max())


def test_config_validation():
    with pytest.raises(ConfigError):
        ModelConfig(2, 10, 3, 16, 16, 8)
    with pytest.raises(ConfigError):
        ModelConfig(0, 8, 2, 16, 16, 8)
    assert TINY.head_dim == 4


def test_init_deterministic_and_seeded():
    a, b = init_model(TINY), init_model(TINY)
    assert model_digest(a) == model_digest(b)
    c = init_model(ModelConfig(**{**TINY.to_dict(), "seed": 8}))
    assert any(
        digest_tensor(a.tensors[n]).digest != digest_tensor(c.tensors[n]).digest for n in a.names()
    )
    assert a.alpha == (1.0, 1.0)


def test_schema_names():
    schema = tensor_schema(TINY)
    assert len(schema) == 3 + 7 * TINY.n_blocks
    assert parse_tensor_name("block.1.mlp.up") == (1, "mlp.up")
    assert parse_tensor_name(EMBED_TOK) is None
    assert sublayer_tensor_names(0, "attn") == [f"block.0.attn.{p}" for p in "qkvo"]
    with pytest.raises(ValueError):
        sublayer_tensor_names(0, "norm")


def test_state_rejects_wrong_tensors():
    m = init_model(TINY)
    t = dict(m.tensors)
    del t[UNEMBED]
    with pytest.raises(ConfigError):
        type(m)(m.config, t)
    with pytest.raises(ConfigError):
        m.with_alpha_vector([1.0])
    with pytest.raises(ConfigError):
        m.with_alpha_vector([1.0, -0.5])


@pytest.mark.parametrize(
    "tokens",
    [[16], [-1], list(range(9)), [[]], [1.5, 2.0]],
)
def test_bad_tokens(tokens):
    with pytest.raises(InputError):
        forward(init_model(TINY), tokens)


def test_alpha_one_equals_scaling_disabled():
    m = init_model(SMALL, dtype="int8")
    toks = np.arange(10) % SMALL.vocab_size
    np.testing.assert_array_equal(forward(m, toks).logits, forward(m, toks, apply_alpha=False).logits)
    np.testing.assert_array_equal(forward(with_alpha(m, 1, 1.0), toks).logits, forward(m, toks).logits)


@settings(max_examples=25, deadline=None)
@given(st.integers(0, SMALL.n_blocks - 1), st.integers(0, 2**31))
def test_alpha_zero_residual_identity(block, seed):
    m = with_alpha(init_model(SMALL), block, 0.0)
    toks = np.random.default_rng(seed).integers(0, SMALL.vocab_size, size=(2, 9))
    tr = forward(m, toks, capture_hidden=True)
    assert len(tr.block_outputs) == SMALL.n_blocks + 1
    np.testing.assert_array_equal(tr.block_outputs[block + 1], tr.block_outputs[block])


def test_block_delta_linear_in_alpha():
    m = init_model(SMALL)
    toks = np.random.default_rng(0).integers(0, SMALL.vocab_size, size=(2, 9))
    h = forward(m, toks, capture_hidden=True).block_outputs[1]
    deltas = {}
    for a in (0.5, 1.0, 2.0):
        mm = with_alpha(m, 1, a)
        out = run_blocks(mm, h, start=1, block_outputs=(bo := []))
        deltas[a] = bo[0].astype(np.float64) - h
    np.testing.assert_allclose(deltas[0.5] * 2, deltas[1.0], rtol=1e-4, atol=1e-6)
    np.testing.assert_allclose(deltas[2.0] / 2, deltas[1.0], rtol=1e-4, atol=1e-6)


def test_with_alpha_semantics():
    m = init_model(SMALL)
    m2 = with_alpha(m, 2, 0.6)
    assert m2.alpha == (1.0, 1.0, 0.6)
    assert m.alpha == (1.0, 1.0, 1.0)
    assert m2.tensors[UNEMBED] is m.tensors[UNEMBED]
    a = with_alpha(with_alpha(m, 0, 0.7), 2, 1.3)
    b = with_alpha(with_alpha(m, 2, 1.3), 0, 0.7)
    assert a.alpha == b.alpha
    assert reset_alpha(a).alpha == m.alpha
    with pytest.raises(IndexError):
        with_alpha(m, 3, 1.0)
    with pytest.raises(ValueError):
        with_alpha(m, 0, -0.1)


def test_forward_deterministic_and_capture_flags():
    m = init_model(SMALL, dtype="int8")
    toks = np.arange(12).reshape(2, 6)
    a = forward(m, toks, capture_sublayers=True, sublayer_blocks=[1])
    b = forward(m, toks)
    assert a.logits.tobytes() == b.logits.tobytes()
    assert set(a.sublayer_outputs) == {1} and set(a.sublayer_outputs[1]) == {"attn", "mlp"}
    assert b.block_outputs == [] and b.sublayer_outputs == {}
    assert a.logits.dtype == np.float32
    assert not a.nonfinite


def test_nonfinite_is_flagged_not_raised():
    m = init_model(SMALL)
    name = "block.1.mlp.down"
    data = m.tensors[name].data.copy()
    data[0] = np.inf
    bad = m.with_tensors({name: m.tensors[name].replace_data(data)})
    tr = forward(bad, np.arange(6), capture_hidden=True)
    assert tr.nonfinite
