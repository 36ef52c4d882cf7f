import math

import numpy as np
import pytest

from config import Config
from srnmt import tensor as tn
from srnmt.errors import ConfigurationError, DimensionError
from srnmt.recurrent_units import (
    BiLstmEncoderLayer,
    DecoderLayer,
    EncoderLayer,
    LstmLayer,
    MlpAttention,
    dynamic_average_pool,
    encoder_layer_forward,
)
from srnmt.tensor import Tape, Tensor


def numeric_grad(f, x: np.ndarray, h: float = 1e-6) -> np.ndarray:
    grad = np.zeros_like(x)
    for idx in np.ndindex(*x.shape):
        original = x[idx]
        x[idx] = original + h
        plus = f()
        x[idx] = original - h
        minus = f()
        x[idx] = original
        grad[idx] = (plus - minus) / (2 * h)
    return grad


def param_count(layer) -> int:
    return sum(t.values.size for _, t in layer.params.named())


def perturb(layer, rng, scale=0.3):
    for _, t in layer.params.named():
        t.values = t.values + rng.normal(0.0, scale, size=t.shape).astype(t.dtype)


def reference_encoder(layer: EncoderLayer, X: np.ndarray) -> np.ndarray:
    """Timestep-by-timestep evaluation of an SR encoder layer"""
    p, d, half = layer.params, layer.d, layer.d // 2
    rows = []
    for t in range(X.shape[0]):
        pre = X[t] @ p.W.values
        if p.ln_gain is not None:
            mu = pre.mean()
            var = ((pre - mu) ** 2).mean()
            pre = (pre - mu) / np.sqrt(var + Config.LN_EPS) * p.ln_gain.values + p.ln_bias.values
        rows.append(pre)
    P = np.stack(rows)
    xf, xb, gf, gb = (P[:, i * half:(i + 1) * half] for i in range(4))
    sig = tn._logistic
    hf, hb = np.zeros_like(xf), np.zeros_like(xb)
    state = np.zeros(half, dtype=X.dtype)
    for t in range(X.shape[0]):
        state = (1 - sig(gf[t])) * state + sig(gf[t]) * xf[t]
        hf[t] = state
    state = np.zeros(half, dtype=X.dtype)
    for t in reversed(range(X.shape[0])):
        state = (1 - sig(gb[t])) * state + sig(gb[t]) * xb[t]
        hb[t] = state
    h = np.concatenate([hf, hb], axis=-1)
    if not layer.use_highway:
        return h
    z = sig(P[:, 2 * d:])
    return (1 - z) * h + z * X


# ---------------------------------------------------------------------------
# dynamic average pooling
# ---------------------------------------------------------------------------

def test_pool_known_values():
    x = Tensor(np.array([[2.0], [4.0]]))
    g = Tensor(np.zeros((2, 1)))
    h = dynamic_average_pool(x, g, Tensor(np.zeros(1)), "forward").values
    np.testing.assert_allclose(h[:, 0], [1.0, 2.5])
    hb = dynamic_average_pool(x, g, Tensor(np.zeros(1)), "backward").values
    np.testing.assert_allclose(hb[:, 0], [2.0, 2.0])


def test_pool_open_gate_copies_candidate():
    x = np.random.default_rng(0).normal(size=(4, 3))
    h = dynamic_average_pool(Tensor(x), Tensor(np.full((4, 3), 60.0)), Tensor(np.zeros(3))).values
    np.testing.assert_allclose(h, x, atol=1e-12)


def test_pool_reversal_symmetry_is_exact():
    rng = np.random.default_rng(1)
    for _ in range(20):
        T, k = int(rng.integers(1, 9)), int(rng.integers(1, 6))
        x, g, h0 = rng.normal(size=(T, k)), rng.normal(size=(T, k)), rng.normal(size=k)
        forward = dynamic_average_pool(Tensor(x), Tensor(g), Tensor(h0), "forward").values
        backward = dynamic_average_pool(Tensor(x[::-1].copy()), Tensor(g[::-1].copy()), Tensor(h0), "backward").values
        assert np.array_equal(forward, backward[::-1])


def test_pool_mask_holds_state_through_padding():
    rng = np.random.default_rng(2)
    x, g = rng.normal(size=(2, 5, 3)), rng.normal(size=(2, 5, 3))
    mask = np.array([[True] * 5, [True, True, True, False, False]])
    h = dynamic_average_pool(Tensor(x), Tensor(g), Tensor(np.zeros((2, 3))), "forward", mask).values
    np.testing.assert_array_equal(h[1, 3], h[1, 2])
    np.testing.assert_array_equal(h[1, 4], h[1, 2])
    hb = dynamic_average_pool(Tensor(x), Tensor(g), Tensor(np.zeros((2, 3))), "backward", mask).values
    np.testing.assert_array_equal(hb[1, 3:], 0.0)
    short = dynamic_average_pool(Tensor(x[1, :3]), Tensor(g[1, :3]), Tensor(np.zeros(3)), "backward").values
    np.testing.assert_allclose(hb[1, :3], short, atol=1e-15)


@pytest.mark.parametrize("direction", ["forward", "backward"])
def test_pool_gradient(direction):
    rng = np.random.default_rng(3)
    x = tn.parameter(rng.normal(size=(2, 4, 3)))
    g = tn.parameter(rng.normal(size=(2, 4, 3)))
    h0 = tn.parameter(rng.normal(size=(2, 3)))
    mask = np.array([[True] * 4, [True, True, True, False]])
    R = rng.normal(size=(2, 4, 3))

    def loss():
        out = dynamic_average_pool(x, g, h0, direction, mask)
        return tn.sum_all(tn.mul(out, tn.constant(R)))

    with Tape() as tape:
        tape.backward(loss())
    for t in (x, g, h0):
        np.testing.assert_allclose(t.grad, numeric_grad(lambda: loss().item(), t.values), atol=1e-7)


def test_pool_rejects_bad_direction_and_shapes():
    x = Tensor(np.zeros((3, 2)))
    with pytest.raises(ConfigurationError):
        dynamic_average_pool(x, x, Tensor(np.zeros(2)), "sideways")
    with pytest.raises(DimensionError):
        dynamic_average_pool(x, Tensor(np.zeros((3, 3))), Tensor(np.zeros(2)))


# ---------------------------------------------------------------------------
# encoder
# ---------------------------------------------------------------------------

def test_encoder_matches_timestep_reference():
    rng = np.random.default_rng(4)
    for i in range(50):
        d = int(rng.choice([2, 4, 8]))
        T = int(rng.integers(1, 7))
        layer = EncoderLayer(d, rng, use_layer_norm=bool(i % 3), use_highway=bool(i % 2), dtype=np.float32)
        X = rng.normal(size=(T, d)).astype(np.float32)
        out = layer.forward(Tensor(X)).values
        np.testing.assert_allclose(out, reference_encoder(layer, X), atol=1e-6, rtol=1e-5)


def test_encoder_single_and_batched_agree_under_padding():
    rng = np.random.default_rng(5)
    layer = EncoderLayer(8, rng, dtype=np.float64)
    X = rng.normal(size=(2, 5, 8))
    mask = np.array([[True] * 5, [True, True, True, False, False]])
    batched = layer.forward(Tensor(X), mask=mask).values
    for row, length in ((0, 5), (1, 3)):
        single = layer.forward(Tensor(X[row, :length])).values
        np.testing.assert_allclose(batched[row, :length], single, atol=1e-12)


def test_encoder_reversal_symmetry_with_tied_slices():
    rng = np.random.default_rng(6)
    d, half = 6, 3
    for _ in range(20):
        layer = EncoderLayer(d, rng, dtype=np.float64)
        W = layer.params.W.values
        W[:, half:2 * half] = W[:, :half]
        W[:, 3 * half:4 * half] = W[:, 2 * half:3 * half]
        X = rng.normal(size=(int(rng.integers(1, 8)), d))
        hf, _, _, _, _ = layer.scan_states(Tensor(X))
        _, hb, _, _, _ = layer.scan_states(Tensor(X[::-1].copy()))
        np.testing.assert_allclose(hf.values[0], hb.values[0][::-1], atol=1e-13, rtol=0)


def test_encoder_shapes_and_errors():
    rng = np.random.default_rng(7)
    layer = EncoderLayer(4, rng)
    assert layer.forward(Tensor(np.zeros((3, 4), dtype=np.float32))).shape == (3, 4)
    assert encoder_layer_forward(Tensor(np.zeros((2, 3, 4), dtype=np.float32)), layer).shape == (2, 3, 4)
    with pytest.raises(DimensionError):
        layer.forward(Tensor(np.zeros((3, 6), dtype=np.float32)))
    with pytest.raises(ConfigurationError):
        EncoderLayer(5, rng)


def test_encoder_dropout_only_when_training():
    rng = np.random.default_rng(8)
    layer = EncoderLayer(8, rng, dropout_p=0.5, dtype=np.float64)
    X = Tensor(rng.normal(size=(4, 8)))
    a = layer.forward(X).values
    b = layer.forward(X).values
    c = layer.forward(X, training=True, rng=0).values
    np.testing.assert_array_equal(a, b)
    assert not np.allclose(a, c)


@pytest.mark.parametrize("d", [8, 64, 500])
def test_layer_parameter_counts(d):
    rng = np.random.default_rng(9)
    assert param_count(EncoderLayer(d, rng)) == 3 * d * d + 6 * d
    assert param_count(DecoderLayer(d, rng)) == 7 * d * d + 15 * d


def test_ablation_parameter_deltas():
    rng = np.random.default_rng(10)
    d = 8
    assert param_count(EncoderLayer(d, rng, use_layer_norm=False)) == 3 * d * d
    assert param_count(EncoderLayer(d, rng, use_highway=False)) == 2 * d * d + 4 * d
    assert param_count(DecoderLayer(d, rng, use_layer_norm=False)) == 7 * d * d + d
    assert param_count(DecoderLayer(d, rng, use_highway=False)) == 6 * d * d + 13 * d
    assert param_count(DecoderLayer(d, rng, with_attention=False)) == 4 * d * d + 8 * d


# ---------------------------------------------------------------------------
# attention and decoder
# ---------------------------------------------------------------------------

def test_attention_masks_padded_sources():
    rng = np.random.default_rng(11)
    attention = MlpAttention(6, rng, dtype=np.float64)
    attention.params.v.values = rng.normal(size=6)
    S, H = Tensor(rng.normal(size=(2, 3, 6))), Tensor(rng.normal(size=(2, 4, 6)))
    mask = np.array([[True] * 4, [True, True, False, False]])
    context, weights = attention.forward(S, H, mask)
    w = weights.values
    assert context.shape == (2, 3, 6)
    np.testing.assert_allclose(w.sum(axis=-1), 1.0)
    assert np.all(w[1, :, 2:] == 0.0)
    np.testing.assert_allclose(context.values[1], w[1, :, :2] @ H.values[1, :2])


def test_attention_precomputed_memory_is_equivalent():
    rng = np.random.default_rng(12)
    attention = MlpAttention(4, rng, dtype=np.float64)
    attention.params.v.values = rng.normal(size=4)
    S, H = Tensor(rng.normal(size=(1, 2, 4))), Tensor(rng.normal(size=(1, 5, 4)))
    direct, _ = attention.forward(S, H)
    cached, _ = attention.forward(S, H, memory=attention.precompute(H))
    np.testing.assert_array_equal(direct.values, cached.values)


def test_decoder_context_is_scaled():
    rng = np.random.default_rng(13)
    layer = DecoderLayer(16, rng, dtype=np.float64)
    out = layer.forward_detailed(Tensor(rng.normal(size=(3, 16))), Tensor(rng.normal(size=(4, 16))))
    assert layer.context_scale == pytest.approx(1 / math.sqrt(16))
    np.testing.assert_allclose(out.scaled_context.values, out.context.values / 4.0)
    assert out.s.shape == (3, 16)
    assert out.weights.shape == (3, 4)


def test_decoder_steps_replay_batched_forward():
    rng = np.random.default_rng(14)
    for with_attention in (True, False):
        layer = DecoderLayer(8, rng, with_attention=with_attention, dtype=np.float64)
        perturb(layer, rng)
        Y = rng.normal(size=(2, 5, 8))
        H = Tensor(rng.normal(size=(2, 4, 8)))
        mask = np.array([[True] * 4, [True, True, True, False]])
        full = layer.forward_detailed(Tensor(Y), H, mask)
        s_prev = tn.zeros((2, 8), dtype=np.float64)
        for t in range(5):
            s_t, s_prev = layer.step(Tensor(Y[:, t]), s_prev, H, mask)
            np.testing.assert_allclose(s_t.values, full.s.values[:, t], atol=1e-10)
            np.testing.assert_allclose(s_prev.values, full.s_tilde.values[:, t], atol=1e-10)


def test_decoder_attention_flag():
    rng = np.random.default_rng(15)
    plain = DecoderLayer(4, rng, with_attention=False, dtype=np.float64)
    Y = Tensor(rng.normal(size=(3, 4)))
    assert plain.forward(Y, None).shape == (3, 4)
    assert not any("attention" in name for name, _ in plain.params.named())
    with pytest.raises(ConfigurationError):
        plain.forward(Y, Tensor(np.zeros((2, 4))), attention_enabled=True)


def test_decoder_layer_gradient():
    rng = np.random.default_rng(16)
    layer = DecoderLayer(4, rng, dtype=np.float64)
    perturb(layer, rng, scale=0.1)
    Y, H = Tensor(rng.normal(size=(2, 3, 4))), Tensor(rng.normal(size=(2, 2, 4)))
    mask = np.array([[True, True], [True, False]])
    R = rng.normal(size=(2, 3, 4))

    def loss():
        return tn.sum_all(tn.mul(layer.forward(Y, H, mask), tn.constant(R)))

    with Tape() as tape:
        tape.backward(loss())
    for name, t in layer.params.named():
        np.testing.assert_allclose(t.grad, numeric_grad(lambda: loss().item(), t.values),
                                   atol=1e-7, rtol=1e-5, err_msg=name)


# ---------------------------------------------------------------------------
# LSTM baseline
# ---------------------------------------------------------------------------

def test_lstm_mask_and_gradient():
    rng = np.random.default_rng(17)
    layer = LstmLayer(3, 2, rng, dtype=np.float64)
    X = Tensor(rng.normal(size=(2, 3, 3)))
    mask = np.array([[True, True, True], [True, True, False]])
    out = layer.forward(X, mask=mask).values
    np.testing.assert_array_equal(out[1, 2], out[1, 1])
    R = rng.normal(size=(2, 3, 2))

    def loss():
        return tn.sum_all(tn.mul(layer.forward(X, mask=mask), tn.constant(R)))

    with Tape() as tape:
        tape.backward(loss())
    for name, t in layer.params.named():
        np.testing.assert_allclose(t.grad, numeric_grad(lambda: loss().item(), t.values), atol=1e-7, err_msg=name)


def test_bidirectional_lstm_encoder():
    rng = np.random.default_rng(18)
    layer = BiLstmEncoderLayer(6, rng, dtype=np.float64)
    X = rng.normal(size=(2, 4, 6))
    mask = np.array([[True] * 4, [True, True, False, False]])
    out = layer.forward(Tensor(X), mask=mask).values
    assert out.shape == (2, 4, 6)
    single = layer.forward(Tensor(X[1, :2])).values
    np.testing.assert_allclose(out[1, :2], single, atol=1e-12)
    assert sum(t.values.size for _, t in layer.named()) == 6 * 36 + 4 * 6
