"""Embeddings, N-layer encoder/decoder stacks and the output softmax assembled into a translation model."""

import logging
import math
from dataclasses import dataclass, field
from typing import Dict, List, Optional, Tuple

import numpy as np

from config import Config
from models import ModelConfig
from srnmt import tensor as tn
from srnmt.errors import EmptyBatchError, VocabularyError
from srnmt.recurrent_units import (
    BiLstmEncoderLayer,
    DecoderLayer,
    EncoderLayer,
    LstmLayer,
    MlpAttention,
    glorot,
    layer_parameters,
    project,
)
from srnmt.tensor import Tensor

logger = logging.getLogger(__name__)


# ---------------------------------------------------------------------------
# Loss
# ---------------------------------------------------------------------------

def log_softmax(x: np.ndarray) -> np.ndarray:
    shifted = x - x.max(axis=-1, keepdims=True)
    return shifted - np.log(np.exp(shifted).sum(axis=-1, keepdims=True))


def nll_loss(logits: Tensor, gold_ids, pad_id: int = Config.PAD_ID) -> Tensor:
    """Mean negative log-likelihood over non-pad positions"""
    gold = np.asarray(gold_ids, dtype=np.int64)
    if gold.shape != logits.shape[:-1]:
        raise VocabularyError(f"gold ids {gold.shape} do not match logits {logits.shape}")
    vocab = logits.shape[-1]
    if gold.size and (gold.min() < 0 or gold.max() >= vocab):
        raise VocabularyError(f"gold ids outside target vocabulary of size {vocab}")
    valid = gold != pad_id
    count = int(valid.sum())
    if count == 0:
        raise EmptyBatchError("every target position is padding")

    logp = log_softmax(logits.values)
    picked = np.take_along_axis(logp, gold[..., None], axis=-1)[..., 0]
    loss = -(picked * valid).sum() / count
    weight = (valid / count).astype(logits.dtype)[..., None]

    def backward(g):
        grad = np.exp(logp)
        np.put_along_axis(grad, gold[..., None], np.take_along_axis(grad, gold[..., None], axis=-1) - 1.0, axis=-1)
        return (grad * weight * g,)

    return tn.custom_op(np.asarray(loss, dtype=logits.dtype), (logits,), backward)


def perplexity(loss: float) -> float:
    return math.exp(min(loss, 700.0))


# ---------------------------------------------------------------------------
# LSTM baseline decoder
# ---------------------------------------------------------------------------

class LstmDecoderStack:
    """LSTM layers, MLP attention on the top layer, deep-output combination tanh(h W_s + c W_c).

    With input feeding the first layer reads [y_t; o_{t-1}], which forces a step loop
    during training as well.
    """

    def __init__(self, d: int, n_layers: int, rng: np.random.Generator, dropout_p: float,
                 input_feed: bool = False, dtype=np.float32):
        self.d = d
        self.dropout_p = dropout_p
        self.input_feed = input_feed
        self.layers = [LstmLayer(2 * d if (i == 0 and input_feed) else d, d, rng, dtype) for i in range(n_layers)]
        self.attention = MlpAttention(d, rng, dropout_p, use_layer_norm=False, dtype=dtype)
        self.W_s = tn.parameter(glorot(rng, d, d, dtype))
        self.W_c = tn.parameter(glorot(rng, d, d, dtype))

    def named(self):
        for i, layer in enumerate(self.layers):
            for name, value in layer.params.named():
                yield f"{i}.{name}", value
        for name, value in self.attention.params.named():
            yield f"attention.{name}", value
        yield "W_s", self.W_s
        yield "W_c", self.W_c

    def _combine(self, h: Tensor, context: Tensor, training, rng) -> Tensor:
        drop = lambda x: tn.dropout(x, self.dropout_p, training, rng)
        return tn.tanh(tn.add(project(drop(h), self.W_s, None, None), project(drop(context), self.W_c, None, None)))

    def init_state(self, B: int, dtype) -> dict:
        zero = lambda: tn.zeros((B, self.d), dtype=dtype)
        return {"h": [zero() for _ in self.layers], "c": [zero() for _ in self.layers], "o": zero()}

    def step(self, y_t: Tensor, state: dict, H: Tensor, src_mask, memory: Tensor = None,
             training: bool = False, rng=None) -> Tuple[Tensor, dict]:
        B = y_t.shape[0]
        x = tn.concat([y_t, state["o"]], axis=-1) if self.input_feed else y_t
        hs, cs = [], []
        for i, layer in enumerate(self.layers):
            h, c = layer.step(tn.dropout(x, self.dropout_p, training, rng), state["h"][i], state["c"][i])
            hs.append(h)
            cs.append(c)
            x = h
        top = tn.reshape(x, (B, 1, self.d))
        context, _ = self.attention.forward(top, H, src_mask, memory, training, rng)
        o = self._combine(top, context, training, rng)
        o = tn.reshape(o, (B, self.d))
        return o, {"h": hs, "c": cs, "o": o}

    def forward(self, Y: Tensor, H: Tensor, src_mask, training: bool = False, rng=None) -> Tensor:
        B, T, _ = Y.shape
        if self.input_feed:
            state = self.init_state(B, Y.dtype)
            memory = self.attention.precompute(H, training, rng)
            steps = [tn.reshape(y, (B, self.d)) for y in tn.split(Y, [1] * T, axis=1)]
            outputs = []
            for y_t in steps:
                o, state = self.step(y_t, state, H, src_mask, memory, training, rng)
                outputs.append(tn.reshape(o, (B, 1, self.d)))
            return tn.concat(outputs, axis=1)
        x = Y
        for layer in self.layers:
            x = layer.forward(tn.dropout(x, self.dropout_p, training, rng))
        context, _ = self.attention.forward(x, H, src_mask, None, training, rng)
        return self._combine(x, context, training, rng)


# ---------------------------------------------------------------------------
# Incremental decoding state
# ---------------------------------------------------------------------------

@dataclass
class DecoderState:
    H: Tensor
    src_mask: np.ndarray
    memories: List[Optional[Tensor]]
    scan: List[Tensor] = field(default_factory=list)
    lstm: Optional[dict] = None

    def select(self, index) -> "DecoderState":
        """Gather batch rows (used by beam search to follow surviving hypotheses)"""
        index = np.asarray(index, dtype=np.int64)
        pick = lambda t: None if t is None else tn.constant(t.values[index])
        lstm = None
        if self.lstm is not None:
            lstm = {"h": [pick(t) for t in self.lstm["h"]], "c": [pick(t) for t in self.lstm["c"]],
                    "o": pick(self.lstm["o"])}
        return DecoderState(
            H=pick(self.H),
            src_mask=self.src_mask[index],
            memories=[pick(m) for m in self.memories],
            scan=[pick(s) for s in self.scan],
            lstm=lstm,
        )


# ---------------------------------------------------------------------------
# Model
# ---------------------------------------------------------------------------

class Seq2SeqModel:
    def __init__(self, config: ModelConfig):
        self.config = config
        self.dtype = np.dtype(config.precision)
        init_rng = np.random.default_rng(config.seed)
        self.rng = np.random.default_rng([config.seed, 1])
        d, p = config.d, config.dropout_p

        self.src_embedding = tn.parameter(glorot(init_rng, config.src_vocab_size, d, self.dtype))
        self.tgt_embedding = tn.parameter(glorot(init_rng, config.tgt_vocab_size, d, self.dtype))

        if config.cell_kind == "sr":
            self.encoder_layers = [
                EncoderLayer(d, init_rng, p, config.use_layer_norm, config.use_highway, self.dtype)
                for _ in range(config.n_layers)
            ]
            self.decoder_layers = [
                DecoderLayer(d, init_rng, p, config.use_layer_norm, config.use_highway,
                             with_attention=config.multi_attention or i == config.n_layers - 1,
                             dtype=self.dtype)
                for i in range(config.n_layers)
            ]
            self.lstm_decoder = None
        else:
            self.encoder_layers = [BiLstmEncoderLayer(d, init_rng, p, self.dtype) for _ in range(config.n_layers)]
            self.decoder_layers = []
            self.lstm_decoder = LstmDecoderStack(d, config.n_layers, init_rng, p, config.input_feed, self.dtype)

        self.output_W = tn.parameter(glorot(init_rng, d, config.tgt_vocab_size, self.dtype))
        self.output_b = tn.parameter(np.zeros(config.tgt_vocab_size, dtype=self.dtype))
        self.parameters = self._register()

    def _register(self) -> Dict[str, Tensor]:
        named = {"src_embedding": self.src_embedding, "tgt_embedding": self.tgt_embedding}
        for i, layer in enumerate(self.encoder_layers):
            for name, value in layer_parameters(layer).items():
                named[f"encoder.{i}.{name}"] = value
        for i, layer in enumerate(self.decoder_layers):
            for name, value in layer_parameters(layer).items():
                named[f"decoder.{i}.{name}"] = value
        if self.lstm_decoder is not None:
            for name, value in self.lstm_decoder.named():
                named[f"decoder.{name}"] = value
        named["output.W"] = self.output_W
        named["output.b"] = self.output_b
        for name, value in named.items():
            value.name = name
        return named

    def named_parameters(self) -> Dict[str, Tensor]:
        return self.parameters

    def num_parameters(self) -> int:
        return sum(t.values.size for t in self.parameters.values())

    def zero_grad(self):
        for t in self.parameters.values():
            t.grad = None

    # -- batched (training) path ------------------------------------------

    def encode(self, src_ids, src_mask=None, training: bool = False) -> Tensor:
        ids = np.asarray(src_ids, dtype=np.int64)
        single = ids.ndim == 1
        if single:
            ids = ids[None]
        mask = ids != Config.PAD_ID if src_mask is None else np.asarray(src_mask, dtype=bool).reshape(ids.shape)
        x = tn.embedding(self.src_embedding, ids)
        for layer in self.encoder_layers:
            x = layer.forward(x, mask=mask, training=training, rng=self.rng)
        return tn.reshape(x, x.shape[1:]) if single else x

    def _output(self, states: Tensor, training: bool) -> Tensor:
        x = tn.dropout(states, self.config.dropout_p, training, self.rng)
        lead = x.shape[:-1]
        flat = tn.reshape(x, (int(np.prod(lead)), self.config.d))
        logits = tn.bias_add(tn.matmul(flat, self.output_W), self.output_b)
        return tn.reshape(logits, lead + (self.config.tgt_vocab_size,))

    def decode_train(self, tgt_in, H: Tensor, src_mask=None, training: bool = False) -> Tensor:
        ids = np.asarray(tgt_in, dtype=np.int64)
        single = ids.ndim == 1
        if single:
            ids = ids[None]
            H = tn.reshape(H, (1,) + H.shape)
        if src_mask is None:
            src_mask = np.ones(H.shape[:2], dtype=bool)
        src_mask = np.asarray(src_mask, dtype=bool).reshape(H.shape[:2])
        y = tn.embedding(self.tgt_embedding, ids)
        if self.lstm_decoder is not None:
            y = self.lstm_decoder.forward(y, H, src_mask, training, self.rng)
        else:
            for layer in self.decoder_layers:
                y = layer.forward(y, H, src_mask, training=training, rng=self.rng)
        logits = self._output(y, training)
        return tn.reshape(logits, logits.shape[1:]) if single else logits

    def forward_loss(self, batch, training: bool = False) -> Tuple[Tensor, int]:
        H = self.encode(batch.src, batch.src_mask, training)
        logits = self.decode_train(batch.tgt_in, H, batch.src_mask, training)
        return nll_loss(logits, batch.tgt_out), int(batch.tgt_mask.sum())

    # -- incremental (inference) path --------------------------------------

    def init_decoder_state(self, H: Tensor, src_mask=None) -> DecoderState:
        if H.ndim == 2:
            H = tn.reshape(H, (1,) + H.shape)
        B = H.shape[0]
        src_mask = np.ones(H.shape[:2], dtype=bool) if src_mask is None else np.asarray(src_mask, dtype=bool).reshape(H.shape[:2])
        if self.lstm_decoder is not None:
            return DecoderState(H=H, src_mask=src_mask,
                                memories=[self.lstm_decoder.attention.precompute(H)],
                                lstm=self.lstm_decoder.init_state(B, self.dtype))
        memories = [layer.attention.precompute(H) if layer.attention is not None else None
                    for layer in self.decoder_layers]
        scan = [tn.zeros((B, self.config.d), dtype=self.dtype) for _ in self.decoder_layers]
        return DecoderState(H=H, src_mask=src_mask, memories=memories, scan=scan)

    def decode_step(self, tokens, state: DecoderState) -> Tuple[np.ndarray, DecoderState]:
        """Feed one target token per row; returns next-token logits [B, V] and the advanced state"""
        ids = np.asarray(tokens, dtype=np.int64).reshape(-1)
        y = tn.embedding(self.tgt_embedding, ids)
        if self.lstm_decoder is not None:
            o, lstm_state = self.lstm_decoder.step(y, state.lstm, state.H, state.src_mask, state.memories[0])
            new_state = DecoderState(H=state.H, src_mask=state.src_mask, memories=state.memories, lstm=lstm_state)
            return self._output(o, False).values, new_state
        scan = []
        for layer, s_prev, memory in zip(self.decoder_layers, state.scan, state.memories):
            y, s_tilde = layer.step(y, s_prev, state.H, state.src_mask, memory)
            scan.append(s_tilde)
        new_state = DecoderState(H=state.H, src_mask=state.src_mask, memories=state.memories, scan=scan)
        return self._output(y, False).values, new_state


def encode(src_tokens, model: Seq2SeqModel) -> Tensor:
    return model.encode(src_tokens)


def decode_train(tgt_tokens, H: Tensor, src_mask, model: Seq2SeqModel) -> Tensor:
    return model.decode_train(tgt_tokens, H, src_mask)


def parameter_count(config: ModelConfig) -> int:
    """Closed-form parameter total from the configuration alone"""
    d, n = config.d, config.n_layers
    src, tgt = config.src_vocab_size, config.tgt_vocab_size
    total = (src + tgt) * d + d * tgt + tgt
    if config.cell_kind == "lstm":
        total += n * (6 * d * d + 4 * d)
        for i in range(n):
            d_in = 2 * d if (i == 0 and config.input_feed) else d
            total += 4 * d * (d_in + d) + 4 * d
        return total + 2 * d * d + d + 2 * d * d

    slices = 3 if config.use_highway else 2
    ln = 2 if config.use_layer_norm else 0
    encoder_layer = slices * d * d + ln * slices * d
    decoder_core = slices * d * d + ln * slices * d + d * d + ln * d
    attention = d * d + ln * d + 2 * d * d + 2 * ln * d + d
    n_attention = n if config.multi_attention else 1
    return total + n * (encoder_layer + decoder_core) + n_attention * attention
