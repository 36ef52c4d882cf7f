import logging
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from typing import List, Sequence, Tuple

import numpy as np

from config import Config
from srnmt.data_toolkit import Vocabulary
from srnmt.errors import ConfigurationError
from srnmt.seq2seq_model import DecoderState, Seq2SeqModel, log_softmax

logger = logging.getLogger(__name__)


@dataclass
class Hypothesis:
    """Partial or finished output; decoder states for live hypotheses travel batched in a DecoderState"""

    tokens: Tuple[int, ...]
    score: float
    finished: bool = False

    @property
    def length(self) -> int:
        return len(self.tokens)

    def rank_key(self, length_penalty: float = 0.0):
        score = self.score / (self.length ** length_penalty) if length_penalty and self.length else self.score
        return (-score, self.length, self.tokens)


def _check_search(beam: int, max_len: int):
    if beam < 1:
        raise ConfigurationError(f"beam width must be >= 1, got {beam}")
    if max_len < 1:
        raise ConfigurationError(f"max_len must be >= 1, got {max_len}")


def _start(model: Seq2SeqModel, src_tokens) -> DecoderState:
    src = np.asarray(src_tokens, dtype=np.int64).reshape(1, -1)
    if src.shape[1] == 0:
        raise ConfigurationError("cannot decode an empty source sentence")
    H = model.encode(src, src != Config.PAD_ID, training=False)
    return model.init_decoder_state(H, src != Config.PAD_ID)


def greedy_decode(model: Seq2SeqModel, src_tokens, max_len: int = 100) -> List[int]:
    """Argmax decoding; ties go to the lowest token id. The EOS token, when produced, is included."""
    state = _start(model, src_tokens)
    tokens: List[int] = []
    score = 0.0
    prev = Config.BOS_ID
    for _ in range(max_len):
        logits, state = model.decode_step([prev], state)
        cumulative = score + log_softmax(logits[0].astype(np.float64))
        prev = int(np.argmax(cumulative))
        score = float(cumulative[prev])
        tokens.append(prev)
        if prev == Config.EOS_ID:
            break
    return tokens


def beam_search(model: Seq2SeqModel, src_tokens, beam: int = 5, max_len: int = 100,
                length_penalty: float = 0.0) -> Tuple[List[int], List[Hypothesis]]:
    """Vanilla beam search.

    Every live hypothesis is expanded over the whole vocabulary and the top ``beam`` candidates
    survive, ranked by (higher cumulative log-probability, fewer tokens, lexicographic ids).
    Candidates ending in EOS retire to the finished pool. Search runs until nothing is live or
    ``max_len`` tokens were produced (live hypotheses then join the pool). Without a length
    penalty it also stops once the best pooled score reaches the best live score, as cumulative
    log-probabilities never rise. Returns the best token sequence and the pool, best first.
    """
    _check_search(beam, max_len)
    state = _start(model, src_tokens)
    live = [Hypothesis(tokens=(), score=0.0)]
    pool: List[Hypothesis] = []

    for _ in range(max_len):
        last = [h.tokens[-1] if h.tokens else Config.BOS_ID for h in live]
        logits, state = model.decode_step(last, state)
        logp = log_softmax(logits.astype(np.float64))
        scores = np.array([h.score for h in live])[:, None] + logp

        flat = scores.reshape(-1)
        vocab = logp.shape[1]
        # rows are visited in live order, so equal scores keep (parent, token) order before the full sort
        order = np.argsort(-flat, kind="stable")
        keep = []
        for position in order:
            if len(keep) >= beam and flat[position] < keep[-1][0]:
                break
            parent, token = divmod(int(position), vocab)
            keep.append((float(flat[position]), parent, token))
        candidates = [
            (Hypothesis(tokens=live[parent].tokens + (token,), score=score, finished=token == Config.EOS_ID), parent)
            for score, parent, token in keep
        ]
        candidates.sort(key=lambda item: item[0].rank_key())
        candidates = candidates[:beam]

        survivors, parents = [], []
        for hyp, parent in candidates:
            if hyp.finished:
                pool.append(hyp)
            else:
                survivors.append(hyp)
                parents.append(parent)
        live = survivors
        if not live:
            break
        # live[0] is the best live hypothesis after the rank sort
        if not length_penalty and pool and max(h.score for h in pool) >= live[0].score:
            break
        state = state.select(parents)
    else:
        pool.extend(live)

    pool.sort(key=lambda h: h.rank_key(length_penalty))
    pool = pool[:beam]
    logger.debug("beam search kept %d hypotheses, best score %.4f", len(pool), pool[0].score)
    return list(pool[0].tokens), pool


def decode(model: Seq2SeqModel, src_tokens, beam: int = 1, max_len: int = 100,
           length_penalty: float = 0.0) -> List[int]:
    if beam == 1 and not length_penalty:
        return greedy_decode(model, src_tokens, max_len)
    return beam_search(model, src_tokens, beam, max_len, length_penalty)[0]


def translate_lines(model: Seq2SeqModel, vocab_src: Vocabulary, vocab_tgt: Vocabulary, lines: Sequence[str],
                    beam: int = 1, max_len: int = 100, length_penalty: float = 0.0, workers: int = 1) -> List[str]:
    """Decode one sentence per line; blank lines stay blank. Output is aligned with the input."""
    _check_search(beam, max_len)

    def translate(line: str) -> str:
        ids = vocab_src.encode(line)
        if not ids:
            return ""
        return " ".join(vocab_tgt.decode(decode(model, ids, beam, max_len, length_penalty)))

    if workers > 1:
        with ThreadPoolExecutor(max_workers=workers) as executor:
            return list(executor.map(translate, lines))
    return [translate(line) for line in lines]


def exact_match(hypotheses: Sequence[str], references: Sequence[str]) -> float:
    if len(hypotheses) != len(references):
        raise ConfigurationError(f"{len(hypotheses)} hypotheses for {len(references)} references")
    if not references:
        return 0.0
    hits = sum(h.split() == r.split() for h, r in zip(hypotheses, references))
    return hits / len(references)
