"""Weakly-recurrent encoder/decoder layers, layer-normalized MLP attention and the LSTM baseline.

Layers take batches shaped [B, T, d]; a single sentence [T, d] is accepted too and
returned in the same rank. The only time-sequential computation in the SR layers is
the parameterless gated scan; every parameter matmul runs once over all timesteps.
"""

import logging
import math
from dataclasses import dataclass, field
from typing import Dict, Iterator, List, Optional, Tuple

import numpy as np

from config import Config
from srnmt import tensor as tn
from srnmt.errors import ConfigurationError, DimensionError
from srnmt.tensor import Tensor

logger = logging.getLogger(__name__)


# ---------------------------------------------------------------------------
# Parameter containers
# ---------------------------------------------------------------------------

def glorot(rng: np.random.Generator, fan_in: int, fan_out: int, dtype) -> np.ndarray:
    limit = math.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-limit, limit, size=(fan_in, fan_out)).astype(dtype)


def _ln_pair(width: int, dtype) -> Tuple[Tensor, Tensor]:
    return tn.parameter(np.ones(width, dtype=dtype)), tn.parameter(np.zeros(width, dtype=dtype))


class _Params:
    def named(self) -> Iterator[Tuple[str, Tensor]]:
        for name, value in vars(self).items():
            if isinstance(value, Tensor):
                yield name, value
            elif isinstance(value, _Params):
                for sub_name, sub_value in value.named():
                    yield f"{name}.{sub_name}", sub_value


@dataclass
class EncoderLayerParams(_Params):
    W: Tensor
    ln_gain: Optional[Tensor] = None
    ln_bias: Optional[Tensor] = None


@dataclass
class AttentionParams(_Params):
    W_as: Tensor
    W_ah: Tensor
    v: Tensor
    ln_as_gain: Optional[Tensor] = None
    ln_as_bias: Optional[Tensor] = None
    ln_ah_gain: Optional[Tensor] = None
    ln_ah_bias: Optional[Tensor] = None


@dataclass
class DecoderLayerParams(_Params):
    W: Tensor
    W_s: Tensor
    ln_gain: Optional[Tensor] = None
    ln_bias: Optional[Tensor] = None
    ln_s_gain: Optional[Tensor] = None
    ln_s_bias: Optional[Tensor] = None
    W_c: Optional[Tensor] = None
    ln_c_gain: Optional[Tensor] = None
    ln_c_bias: Optional[Tensor] = None
    attention: Optional[AttentionParams] = None


@dataclass
class LstmLayerParams(_Params):
    W_x: Tensor
    W_h: Tensor
    b: Tensor


# ---------------------------------------------------------------------------
# Shared pieces
# ---------------------------------------------------------------------------

def _as_batch(x: Tensor) -> Tuple[Tensor, bool]:
    if x.ndim == 2:
        return tn.reshape(x, (1,) + x.shape), True
    if x.ndim != 3:
        raise DimensionError(f"expected [T, d] or [B, T, d], got {x.shape}")
    return x, False


def _unbatch(x: Tensor, squeeze: bool) -> Tensor:
    return tn.reshape(x, x.shape[1:]) if squeeze else x


def _batch_mask(mask, squeeze: bool) -> Optional[np.ndarray]:
    if mask is None:
        return None
    mask = np.asarray(mask, dtype=bool)
    return mask[None] if squeeze and mask.ndim == 1 else mask


def project(x: Tensor, W: Tensor, gain: Optional[Tensor], bias: Optional[Tensor]) -> Tensor:
    """LN(x W) over all leading positions at once; LN skipped when gain is None"""
    lead = x.shape[:-1]
    flat = tn.reshape(x, (int(np.prod(lead)), x.shape[-1]))
    out = tn.matmul(flat, W)
    if gain is not None:
        out = tn.layer_norm(out, gain, bias)
    return tn.reshape(out, lead + (W.shape[1],))


def highway(candidate: Tensor, inputs: Tensor, z: Tensor) -> Tensor:
    gate = tn.sigmoid(z)
    return tn.add(tn.mul(tn.one_minus(gate), candidate), tn.mul(gate, inputs))


def _scan_forward(x: np.ndarray, f: np.ndarray, h0: np.ndarray, reverse: bool) -> np.ndarray:
    h = np.empty_like(x)
    prev = h0
    steps = range(x.shape[1] - 1, -1, -1) if reverse else range(x.shape[1])
    for t in steps:
        prev = (1.0 - f[:, t]) * prev + f[:, t] * x[:, t]
        h[:, t] = prev
    return h


def _scan_backward(dh_out, x, f, h, h0, reverse):
    dx = np.zeros_like(x)
    df = np.zeros_like(x)
    carry = np.zeros_like(h0)
    T = x.shape[1]
    steps = range(T) if reverse else range(T - 1, -1, -1)
    for t in steps:
        dh = dh_out[:, t] + carry
        if reverse:
            before = h[:, t + 1] if t + 1 < T else h0
        else:
            before = h[:, t - 1] if t > 0 else h0
        dx[:, t] = f[:, t] * dh
        df[:, t] = (x[:, t] - before) * dh
        carry = (1.0 - f[:, t]) * dh
    return dx, df, carry


def dynamic_average_pool(x: Tensor, g: Tensor, h0: Tensor, direction: str = "forward",
                         mask=None) -> Tensor:
    """h_t = (1 - sigmoid(g_t)) * h_{t-1} + sigmoid(g_t) * x_t in the given time direction.

    ``mask`` ([T] or [B, T], True at real tokens) closes the gate at padded steps so the
    state passes through them unchanged.
    """
    if direction not in ("forward", "backward"):
        raise ConfigurationError(f"direction must be 'forward' or 'backward', got {direction!r}")
    if x.shape != g.shape:
        raise DimensionError(f"dynamic_average_pool: candidate {x.shape} and gate {g.shape} differ")
    squeeze = x.ndim == 2
    xv = x.values[None] if squeeze else x.values
    gv = g.values[None] if squeeze else g.values
    h0v = h0.values[None] if squeeze else h0.values
    if xv.ndim != 3 or xv.shape[1] < 1 or h0v.shape != (xv.shape[0], xv.shape[2]):
        raise DimensionError(f"dynamic_average_pool: state {h0.shape} does not fit sequence {x.shape}")

    s = tn._logistic(gv)
    m = None
    f = s
    if mask is not None:
        m = _batch_mask(mask, squeeze).astype(xv.dtype)[..., None]
        if m.shape[:2] != xv.shape[:2]:
            raise DimensionError(f"dynamic_average_pool: mask {np.shape(mask)} does not fit {x.shape}")
        f = s * m
    reverse = direction == "backward"
    h = _scan_forward(xv, f, h0v, reverse)

    def backward(grad):
        grad = grad[None] if squeeze else grad
        dx, df, dh0 = _scan_backward(grad, xv, f, h, h0v, reverse)
        dg = df * s * (1.0 - s)
        if m is not None:
            dg = dg * m
        if squeeze:
            return dx[0], dg[0], dh0[0]
        return dx, dg, dh0

    return tn.custom_op(h[0] if squeeze else h, (x, g, h0), backward)


# ---------------------------------------------------------------------------
# Encoder
# ---------------------------------------------------------------------------

class EncoderLayer:
    """Bidirectional weakly-recurrent encoder layer with one fused, normalized projection"""

    def __init__(self, d: int, rng: np.random.Generator, dropout_p: float = 0.0,
                 use_layer_norm: bool = True, use_highway: bool = True, dtype=np.float32):
        if d % 2:
            raise ConfigurationError(f"encoder width must be even, got {d}")
        self.d = d
        self.dropout_p = dropout_p
        self.use_layer_norm = use_layer_norm
        self.use_highway = use_highway
        width = 3 * d if use_highway else 2 * d
        gain, bias = _ln_pair(width, dtype) if use_layer_norm else (None, None)
        self.params = EncoderLayerParams(W=tn.parameter(glorot(rng, d, width, dtype)), ln_gain=gain, ln_bias=bias)

    @property
    def slice_sizes(self) -> List[int]:
        half = self.d // 2
        return [half] * 4 + ([self.d] if self.use_highway else [])

    def fused_projection(self, X: Tensor, training: bool = False, rng=None, dropout_p: float = None) -> Tensor:
        p = self.params
        rate = self.dropout_p if dropout_p is None else dropout_p
        return project(tn.dropout(X, rate, training, rng), p.W, p.ln_gain, p.ln_bias)

    def scan_states(self, X: Tensor, mask=None, training: bool = False, rng=None, dropout_p: float = None):
        """Directional states (forward, backward) and the highway pre-activation z"""
        X3, squeeze = _as_batch(X)
        pieces = tn.split(self.fused_projection(X3, training, rng, dropout_p), self.slice_sizes, axis=-1)
        xf, xb, gf, gb = pieces[:4]
        h0 = tn.zeros((X3.shape[0], self.d // 2), dtype=X3.dtype)
        mask = _batch_mask(mask, squeeze)
        hf = dynamic_average_pool(xf, gf, h0, "forward", mask)
        hb = dynamic_average_pool(xb, gb, h0, "backward", mask)
        z = pieces[4] if self.use_highway else None
        return hf, hb, z, X3, squeeze

    def forward(self, X: Tensor, mask=None, training: bool = False, rng=None, dropout_p: float = None) -> Tensor:
        if X.shape[-1] != self.d:
            raise DimensionError(f"encoder layer of width {self.d} got input {X.shape}")
        hf, hb, z, X3, squeeze = self.scan_states(X, mask, training, rng, dropout_p)
        h = tn.concat([hf, hb], axis=-1)
        out = highway(h, X3, z) if self.use_highway else h
        return _unbatch(out, squeeze)


def encoder_layer_forward(X: Tensor, layer: EncoderLayer, dropout_p: float = None,
                          training: bool = False, rng=None, mask=None) -> Tensor:
    return layer.forward(X, mask=mask, training=training, rng=rng, dropout_p=dropout_p)


# ---------------------------------------------------------------------------
# Attention
# ---------------------------------------------------------------------------

class MlpAttention:
    """scores_ij = v . tanh(LN(s_i W_as) + LN(h_j W_ah)), masked row softmax, weighted sum of h"""

    def __init__(self, d: int, rng: np.random.Generator, dropout_p: float = 0.0,
                 use_layer_norm: bool = True, dtype=np.float32):
        self.d = d
        self.dropout_p = dropout_p
        as_gain, as_bias = _ln_pair(d, dtype) if use_layer_norm else (None, None)
        ah_gain, ah_bias = _ln_pair(d, dtype) if use_layer_norm else (None, None)
        self.params = AttentionParams(
            W_as=tn.parameter(glorot(rng, d, d, dtype)),
            W_ah=tn.parameter(glorot(rng, d, d, dtype)),
            v=tn.parameter(np.zeros(d, dtype=dtype)),
            ln_as_gain=as_gain, ln_as_bias=as_bias,
            ln_ah_gain=ah_gain, ln_ah_bias=ah_bias,
        )

    def precompute(self, H: Tensor, training: bool = False, rng=None, dropout_p: float = None) -> Tensor:
        """Memory term LN(H W_ah), computed once per source and reused at every target step"""
        p = self.params
        rate = self.dropout_p if dropout_p is None else dropout_p
        return project(tn.dropout(H, rate, training, rng), p.W_ah, p.ln_ah_gain, p.ln_ah_bias)

    def forward(self, s_tilde: Tensor, H: Tensor, src_mask=None, memory: Tensor = None,
                training: bool = False, rng=None, dropout_p: float = None) -> Tuple[Tensor, Tensor]:
        S3, squeeze = _as_batch(s_tilde)
        H3, _ = _as_batch(H)
        if S3.shape[-1] != self.d or H3.shape[-1] != self.d or S3.shape[0] != H3.shape[0]:
            raise DimensionError(f"attention: query {s_tilde.shape} and memory {H.shape} do not match width {self.d}")
        p = self.params
        rate = self.dropout_p if dropout_p is None else dropout_p
        if memory is None:
            memory = self.precompute(H3, training, rng, rate)
        query = project(tn.dropout(S3, rate, training, rng), p.W_as, p.ln_as_gain, p.ln_as_bias)
        scores = tn.mlp_scores(query, memory, p.v)
        mask = None
        if src_mask is not None:
            src = _batch_mask(src_mask, squeeze)
            mask = np.broadcast_to(src[:, None, :], scores.shape)
        weights = tn.softmax_rows(scores, mask)
        context = tn.batched_matmul(weights, H3)
        return _unbatch(context, squeeze), _unbatch(weights, squeeze)


def mlp_attention(s_tilde: Tensor, H: Tensor, attention: MlpAttention, src_mask=None):
    return attention.forward(s_tilde, H, src_mask)


# ---------------------------------------------------------------------------
# Decoder
# ---------------------------------------------------------------------------

@dataclass
class DecoderLayerOutput:
    s: Tensor
    s_tilde: Tensor
    context: Optional[Tensor] = None
    scaled_context: Optional[Tensor] = None
    weights: Optional[Tensor] = None


class DecoderLayer:
    """Unidirectional weakly-recurrent decoder layer with its own attention over the encoder output"""

    def __init__(self, d: int, rng: np.random.Generator, dropout_p: float = 0.0,
                 use_layer_norm: bool = True, use_highway: bool = True,
                 with_attention: bool = True, dtype=np.float32):
        self.d = d
        self.dropout_p = dropout_p
        self.use_layer_norm = use_layer_norm
        self.use_highway = use_highway
        width = 3 * d if use_highway else 2 * d
        ln = (lambda w: _ln_pair(w, dtype)) if use_layer_norm else (lambda w: (None, None))
        gain, bias = ln(width)
        s_gain, s_bias = ln(d)
        self.params = DecoderLayerParams(
            W=tn.parameter(glorot(rng, d, width, dtype)),
            W_s=tn.parameter(glorot(rng, d, d, dtype)),
            ln_gain=gain, ln_bias=bias, ln_s_gain=s_gain, ln_s_bias=s_bias,
        )
        self.attention = None
        if with_attention:
            c_gain, c_bias = ln(d)
            self.params.W_c = tn.parameter(glorot(rng, d, d, dtype))
            self.params.ln_c_gain, self.params.ln_c_bias = c_gain, c_bias
            self.attention = MlpAttention(d, rng, dropout_p, use_layer_norm, dtype)
            self.params.attention = self.attention.params
        self.context_scale = 1.0 / math.sqrt(d)

    def forward_detailed(self, Y: Tensor, H: Tensor, src_mask=None, s0: Tensor = None,
                         training: bool = False, rng=None, memory: Tensor = None,
                         attention_enabled: bool = None, dropout_p: float = None) -> DecoderLayerOutput:
        Y3, squeeze = _as_batch(Y)
        if Y3.shape[-1] != self.d:
            raise DimensionError(f"decoder layer of width {self.d} got input {Y.shape}")
        if attention_enabled is None:
            attention_enabled = self.attention is not None
        if attention_enabled and self.attention is None:
            raise ConfigurationError("attention requested on a decoder layer built without attention parameters")
        p = self.params
        rate = self.dropout_p if dropout_p is None else dropout_p

        def drop(x):
            return tn.dropout(x, rate, training, rng)

        B = Y3.shape[0]
        fused = project(drop(Y3), p.W, p.ln_gain, p.ln_bias)
        sizes = [self.d] * (3 if self.use_highway else 2)
        pieces = tn.split(fused, sizes, axis=-1)
        y_cand, g = pieces[0], pieces[1]
        if s0 is None:
            s0 = tn.zeros((B, self.d), dtype=Y3.dtype)
        elif s0.ndim == 1:
            s0 = tn.reshape(s0, (1, self.d))
        s_tilde = dynamic_average_pool(y_cand, g, s0, "forward")

        o_pre = project(drop(s_tilde), p.W_s, p.ln_s_gain, p.ln_s_bias)
        out = DecoderLayerOutput(s=None, s_tilde=s_tilde)
        if attention_enabled:
            H3, _ = _as_batch(H)
            context, weights = self.attention.forward(s_tilde, H3, _batch_mask(src_mask, squeeze),
                                                      memory, training, rng, dropout_p=rate)
            scaled = tn.scale(context, self.context_scale)
            o_pre = tn.add(o_pre, project(drop(scaled), p.W_c, p.ln_c_gain, p.ln_c_bias))
            out.context, out.scaled_context, out.weights = context, scaled, weights
        o = tn.tanh(o_pre)
        out.s = highway(o, Y3, pieces[2]) if self.use_highway else o
        if squeeze:
            for name in ("s", "s_tilde", "context", "scaled_context", "weights"):
                value = getattr(out, name)
                if value is not None:
                    setattr(out, name, _unbatch(value, True))
        return out

    def forward(self, Y: Tensor, H: Tensor, src_mask=None, training: bool = False, rng=None,
                memory: Tensor = None, attention_enabled: bool = None, dropout_p: float = None) -> Tensor:
        return self.forward_detailed(Y, H, src_mask, None, training, rng, memory,
                                     attention_enabled, dropout_p).s

    def step(self, y_t: Tensor, s_prev: Tensor, H: Tensor, src_mask=None,
             memory: Tensor = None) -> Tuple[Tensor, Tensor]:
        """One incremental decoding step: returns (s_t, s_tilde_t), each [B, d] (or [d])"""
        single = y_t.ndim == 1
        B = 1 if single else y_t.shape[0]
        y3 = tn.reshape(y_t, (B, 1, self.d))
        s0 = tn.reshape(s_prev, (B, self.d))
        H3, _ = _as_batch(H)
        out = self.forward_detailed(y3, H3, _batch_mask(src_mask, True), s0, training=False, memory=memory)
        shape = (self.d,) if single else (B, self.d)
        return tn.reshape(out.s, shape), tn.reshape(out.s_tilde, shape)


def decoder_layer_forward(Y: Tensor, H_src: Tensor, layer: DecoderLayer, src_mask=None,
                          dropout_p: float = None, training: bool = False, rng=None,
                          attention_enabled: bool = None) -> Tensor:
    return layer.forward(Y, H_src, src_mask, training, rng, attention_enabled=attention_enabled,
                         dropout_p=dropout_p)


def decoder_layer_step(y_t: Tensor, s_prev: Tensor, H_src: Tensor, layer: DecoderLayer, src_mask=None):
    return layer.step(y_t, s_prev, H_src, src_mask)


# ---------------------------------------------------------------------------
# LSTM baseline
# ---------------------------------------------------------------------------

class LstmLayer:
    """Standard LSTM; gate blocks ordered [input, forget, cell, output]"""

    def __init__(self, d_in: int, hidden: int, rng: np.random.Generator, dtype=np.float32):
        self.d_in = d_in
        self.hidden = hidden
        self.params = LstmLayerParams(
            W_x=tn.parameter(glorot(rng, d_in, 4 * hidden, dtype)),
            W_h=tn.parameter(glorot(rng, hidden, 4 * hidden, dtype)),
            b=tn.parameter(np.zeros(4 * hidden, dtype=dtype)),
        )

    def step(self, x_t: Tensor, h: Tensor, c: Tensor) -> Tuple[Tensor, Tensor]:
        p = self.params
        gates = tn.bias_add(tn.add(tn.matmul(x_t, p.W_x), tn.matmul(h, p.W_h)), p.b)
        i, f, g, o = tn.split(gates, [self.hidden] * 4, axis=-1)
        c_new = tn.add(tn.mul(tn.sigmoid(f), c), tn.mul(tn.sigmoid(i), tn.tanh(g)))
        h_new = tn.mul(tn.sigmoid(o), tn.tanh(c_new))
        return h_new, c_new

    def forward(self, X: Tensor, h0: Tensor = None, c0: Tensor = None, mask=None,
                reverse: bool = False) -> Tensor:
        X3, squeeze = _as_batch(X)
        B, T, d_in = X3.shape
        if d_in != self.d_in:
            raise DimensionError(f"LSTM layer expects input width {self.d_in}, got {X.shape}")
        h = h0 if h0 is not None else tn.zeros((B, self.hidden), dtype=X3.dtype)
        c = c0 if c0 is not None else tn.zeros((B, self.hidden), dtype=X3.dtype)
        if h.ndim == 1:
            h, c = tn.reshape(h, (1, self.hidden)), tn.reshape(c, (1, self.hidden))
        if h.shape != (B, self.hidden) or c.shape != (B, self.hidden):
            raise DimensionError(f"LSTM initial state {h.shape}/{c.shape} does not fit batch {B}")
        mask = _batch_mask(mask, squeeze)
        steps = [tn.reshape(x, (B, d_in)) for x in tn.split(X3, [1] * T, axis=1)]
        outputs = [None] * T
        for t in (range(T - 1, -1, -1) if reverse else range(T)):
            h_new, c_new = self.step(steps[t], h, c)
            if mask is not None and not mask[:, t].all():
                keep = tn.constant(np.broadcast_to(mask[:, t, None], (B, self.hidden)).astype(X3.dtype))
                h_new = tn.add(tn.mul(keep, h_new), tn.mul(tn.one_minus(keep), h))
                c_new = tn.add(tn.mul(keep, c_new), tn.mul(tn.one_minus(keep), c))
            h, c = h_new, c_new
            outputs[t] = tn.reshape(h, (B, 1, self.hidden))
        return _unbatch(tn.concat(outputs, axis=1), squeeze)


def lstm_layer_forward(X: Tensor, layer: LstmLayer, h0: Tensor = None, c0: Tensor = None) -> Tensor:
    return layer.forward(X, h0, c0)


class BiLstmEncoderLayer:
    """Two LSTMs of width d/2 reading in opposite directions, outputs concatenated"""

    def __init__(self, d: int, rng: np.random.Generator, dropout_p: float = 0.0, dtype=np.float32):
        if d % 2:
            raise ConfigurationError(f"encoder width must be even, got {d}")
        self.d = d
        self.dropout_p = dropout_p
        self.forward_lstm = LstmLayer(d, d // 2, rng, dtype)
        self.backward_lstm = LstmLayer(d, d // 2, rng, dtype)

    def named(self) -> Iterator[Tuple[str, Tensor]]:
        for prefix, lstm in (("fwd", self.forward_lstm), ("bwd", self.backward_lstm)):
            for name, value in lstm.params.named():
                yield f"{prefix}.{name}", value

    def forward(self, X: Tensor, mask=None, training: bool = False, rng=None) -> Tensor:
        X3, squeeze = _as_batch(X)
        mask = _batch_mask(mask, squeeze)
        x = tn.dropout(X3, self.dropout_p, training, rng)
        hf = self.forward_lstm.forward(x, mask=mask)
        hb = self.backward_lstm.forward(x, mask=mask, reverse=True)
        return _unbatch(tn.concat([hf, hb], axis=-1), squeeze)


def layer_parameters(layer) -> Dict[str, Tensor]:
    if isinstance(layer, BiLstmEncoderLayer):
        return dict(layer.named())
    return dict(layer.params.named())
