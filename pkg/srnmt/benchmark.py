"""Throughput benchmark: SR versus LSTM models of equal width on synthetic batches."""

import itertools
import logging
import time
from typing import Sequence

import numpy as np

from config import Config
from models import BenchReport, BenchRow, ModelConfig
from srnmt.data_toolkit import Batch, make_batch
from srnmt.seq2seq_model import Seq2SeqModel
from srnmt.tensor import Tape

logger = logging.getLogger(__name__)

BENCH_VOCAB = 100


def synthetic_batch(T: int, B: int, vocab: int, seed: int = 0) -> Batch:
    rng = np.random.default_rng(seed)
    first = len(Config.RESERVED_TOKENS)
    pairs = [(rng.integers(first, vocab, size=T).tolist(), rng.integers(first, vocab, size=T - 1).tolist())
             for _ in range(B)]
    return make_batch(pairs)


def _timed(fn, warmup: int, repeats: int) -> float:
    for _ in range(warmup):
        fn()
    elapsed = []
    for _ in range(repeats):
        start = time.perf_counter()
        fn()
        elapsed.append(time.perf_counter() - start)
    return float(np.mean(elapsed))


def bench_configuration(kind: str, layers: int, d: int, T: int, B: int,
                        warmup: int = Config.BENCH_WARMUP, repeats: int = Config.BENCH_REPEATS,
                        input_feed: bool = False, vocab: int = BENCH_VOCAB, seed: int = 0) -> BenchRow:
    """Time one (kind, layers, d, T, B) cell. Tokens are non-pad target positions."""
    config = ModelConfig(d=d, n_layers=layers, src_vocab_size=vocab, tgt_vocab_size=vocab, dropout_p=0.0,
                         cell_kind=kind, input_feed=input_feed, seed=seed)
    model = Seq2SeqModel(config)
    batch = synthetic_batch(T, B, vocab, seed)
    tokens = batch.n_tgt_tokens
    peak = {"bytes": 0}

    def forward():
        model.forward_loss(batch, training=False)

    def train():
        model.zero_grad()
        with Tape() as tape:
            loss, _ = model.forward_loss(batch, training=True)
            tape.backward(loss)
        peak["bytes"] = max(peak["bytes"], tape.recorded_bytes)

    fwd_time = _timed(forward, warmup, repeats)
    train_time = _timed(train, warmup, repeats)
    param_bytes = sum(p.values.nbytes for p in model.named_parameters().values())
    row = BenchRow(kind=kind, layers=layers, d=d, T=T, B=B,
                   fwd_tok_s=tokens / fwd_time, train_tok_s=tokens / train_time,
                   peak_bytes=peak["bytes"] + param_bytes)
    logger.info("bench %s L=%d d=%d T=%d B=%d: fwd %.0f tok/s, train %.0f tok/s",
                kind, layers, d, T, B, row.fwd_tok_s, row.train_tok_s)
    return row


def run_bench(widths: Sequence[int] = (256,), layer_counts: Sequence[int] = (1, 2, 3, 4),
              seq_lens: Sequence[int] = (64,), kinds: Sequence[str] = ("sr", "lstm"), batch_size: int = 32,
              warmup: int = Config.BENCH_WARMUP, repeats: int = Config.BENCH_REPEATS,
              input_feed: bool = False, seed: int = 0) -> BenchReport:
    """One row per element of kinds x layer_counts x widths x seq_lens"""
    rows = [
        bench_configuration(kind, layers, d, T, batch_size, warmup, repeats, input_feed, seed=seed)
        for kind, layers, d, T in itertools.product(kinds, layer_counts, widths, seq_lens)
    ]
    return BenchReport(rows=rows, threads=Config.BENCH_THREADS, warmup=warmup, repeats=repeats,
                       input_feed=input_feed)
