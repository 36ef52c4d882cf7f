import logging
import queue
import threading
from collections import Counter
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, Iterator, List, Optional, Sequence, Tuple

import numpy as np

from config import Config
from srnmt.errors import ConfigurationError, ContractError, DataError

logger = logging.getLogger(__name__)

Pair = Tuple[str, str]


class Vocabulary:
    """Token <-> id bijection with reserved ids PAD=0, UNK=1, BOS=2, EOS=3"""

    def __init__(self, tokens: Sequence[str]):
        self.itos = list(Config.RESERVED_TOKENS) + list(tokens)
        self.stoi = {token: i for i, token in enumerate(self.itos)}
        if len(self.stoi) != len(self.itos):
            raise DataError("vocabulary tokens must be unique and distinct from the reserved tokens")

    def __len__(self) -> int:
        return len(self.itos)

    def __eq__(self, other) -> bool:
        return isinstance(other, Vocabulary) and self.itos == other.itos

    def __contains__(self, token: str) -> bool:
        return token in self.stoi

    def encode(self, sentence) -> List[int]:
        tokens = sentence.split() if isinstance(sentence, str) else sentence
        return [self.stoi.get(token, Config.UNK_ID) for token in tokens]

    def decode(self, ids: Iterable[int], strip_special: bool = True) -> List[str]:
        tokens = []
        for i in ids:
            i = int(i)
            if strip_special and i in (Config.PAD_ID, Config.BOS_ID, Config.EOS_ID):
                if i == Config.EOS_ID:
                    break
                continue
            tokens.append(self.itos[i] if 0 <= i < len(self.itos) else self.itos[Config.UNK_ID])
        return tokens

    def save(self, path):
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_text("".join(f"{token}\n" for token in self.itos[len(Config.RESERVED_TOKENS):]), encoding="utf-8")

    @classmethod
    def load(cls, path) -> "Vocabulary":
        lines = Path(path).read_text(encoding="utf-8").splitlines()
        for number, line in enumerate(lines, start=1):
            # line n holds id n + 3, so a gap would shift every later id
            if not line.strip():
                raise DataError(f"{path}:{number}: blank line in vocabulary file")
        return cls(lines)


def build_vocab(lines: Iterable[str], max_size: int) -> Vocabulary:
    """Most frequent tokens up to max_size - 4, ties broken lexicographically"""
    if max_size <= len(Config.RESERVED_TOKENS):
        raise ConfigurationError(f"max_size must exceed {len(Config.RESERVED_TOKENS)}, got {max_size}")
    counts = Counter()
    for line in lines:
        counts.update(line.split())
    for reserved in Config.RESERVED_TOKENS:
        counts.pop(reserved, None)
    if not counts:
        raise DataError("cannot build a vocabulary from an empty corpus")
    ranked = sorted(counts.items(), key=lambda item: (-item[1], item[0]))
    return Vocabulary([token for token, _ in ranked[:max_size - len(Config.RESERVED_TOKENS)]])


def generate_task(kind: str, vocab_size: int, length_range: Tuple[int, int], n_pairs: int,
                  seed: int = 0, permutation: Optional[Sequence[int]] = None) -> List[Pair]:
    """Synthetic parallel corpus over the symbols "0" .. str(vocab_size - 1).

    copy: target = source; reverse: target = reversed source; toy-translation: every
    symbol mapped through a fixed random permutation, then reversed.
    """
    if kind not in ("copy", "reverse", "toy-translation"):
        raise ConfigurationError(f"unknown task kind {kind!r}")
    lo, hi = length_range
    if vocab_size < 5 or lo < 1 or hi < lo or n_pairs < 0:
        raise ConfigurationError(f"invalid task parameters vocab_size={vocab_size} lengths={length_range} n_pairs={n_pairs}")
    rng = np.random.default_rng(seed)
    if permutation is None:
        permutation = rng.permutation(vocab_size)
    permutation = np.asarray(permutation)
    if sorted(permutation.tolist()) != list(range(vocab_size)):
        raise ConfigurationError("permutation must rearrange range(vocab_size)")

    pairs = []
    for _ in range(n_pairs):
        source = rng.integers(0, vocab_size, size=int(rng.integers(lo, hi + 1)))
        if kind == "copy":
            target = source
        elif kind == "reverse":
            target = source[::-1]
        else:
            target = permutation[source][::-1]
        pairs.append((" ".join(map(str, source)), " ".join(map(str, target))))
    return pairs


def read_parallel(src_path, tgt_path) -> List[Pair]:
    src = Path(src_path).read_text(encoding="utf-8").splitlines()
    tgt = Path(tgt_path).read_text(encoding="utf-8").splitlines()
    if len(src) != len(tgt):
        raise DataError(f"{src_path} has {len(src)} lines but {tgt_path} has {len(tgt)}")
    return list(zip(src, tgt))


def write_parallel(pairs: Sequence[Pair], src_path, tgt_path):
    for path, side in ((src_path, 0), (tgt_path, 1)):
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_text("".join(pair[side] + "\n" for pair in pairs), encoding="utf-8")


@dataclass
class Batch:
    src: np.ndarray       # [B, T_src], PAD-filled
    tgt_in: np.ndarray    # [B, T_tgt], BOS-prefixed
    tgt_out: np.ndarray   # [B, T_tgt], EOS-suffixed
    src_mask: np.ndarray
    tgt_mask: np.ndarray

    def __post_init__(self):
        if not np.array_equal(self.src_mask, self.src != Config.PAD_ID):
            raise ContractError("source mask disagrees with padding")
        if not np.array_equal(self.tgt_mask, self.tgt_out != Config.PAD_ID):
            raise ContractError("target mask disagrees with padding")
        if not self.src_mask.any(axis=1).all() or not self.tgt_mask.any(axis=1).all():
            raise ContractError("every batch row needs at least one real token")

    @property
    def size(self) -> int:
        return self.src.shape[0]

    @property
    def n_tgt_tokens(self) -> int:
        return int(self.tgt_mask.sum())

    @property
    def n_src_tokens(self) -> int:
        return int(self.src_mask.sum())


def make_batch(id_pairs: Sequence[Tuple[Sequence[int], Sequence[int]]]) -> Batch:
    B = len(id_pairs)
    T_src = max(len(s) for s, _ in id_pairs)
    T_tgt = max(len(t) for _, t in id_pairs) + 1
    src = np.full((B, T_src), Config.PAD_ID, dtype=np.int64)
    tgt_in = np.full((B, T_tgt), Config.PAD_ID, dtype=np.int64)
    tgt_out = np.full((B, T_tgt), Config.PAD_ID, dtype=np.int64)
    for row, (s, t) in enumerate(id_pairs):
        src[row, :len(s)] = s
        tgt_in[row, :len(t) + 1] = [Config.BOS_ID] + list(t)
        tgt_out[row, :len(t) + 1] = list(t) + [Config.EOS_ID]
    return Batch(src, tgt_in, tgt_out, src != Config.PAD_ID, tgt_out != Config.PAD_ID)


class BatchStream:
    """Length-filtered, source-length-bucketed batches with a seeded shuffle per epoch"""

    def __init__(self, pairs: Sequence[Pair], vocab_src: Vocabulary, vocab_tgt: Vocabulary,
                 batch_size: int = Config.BATCH_SIZE, max_len: int = Config.MAX_SENTENCE_LEN, seed: int = 0):
        if batch_size < 1:
            raise ConfigurationError(f"batch_size must be positive, got {batch_size}")
        self.batch_size = batch_size
        self.seed = seed
        self.examples = []
        for src_line, tgt_line in pairs:
            s, t = vocab_src.encode(src_line), vocab_tgt.encode(tgt_line)
            if 1 <= len(s) <= max_len and len(t) <= max_len:
                self.examples.append((s, t))
        self.n_filtered = len(pairs) - len(self.examples)
        if not self.examples:
            raise DataError(f"no sentence pairs survive the length filter (max_len={max_len})")
        if self.n_filtered:
            logger.info("Filtered %d of %d pairs longer than %d tokens", self.n_filtered, len(pairs), max_len)

    def __len__(self) -> int:
        return -(-len(self.examples) // self.batch_size)

    @property
    def n_src_tokens(self) -> int:
        return sum(len(s) for s, _ in self.examples)

    def epoch(self, index: int = 0) -> List[Batch]:
        rng = np.random.default_rng([self.seed, index])
        order = rng.permutation(len(self.examples))
        order = sorted(order, key=lambda i: len(self.examples[i][0]))
        chunks = [order[i:i + self.batch_size] for i in range(0, len(order), self.batch_size)]
        return [make_batch([self.examples[i] for i in chunks[j]]) for j in rng.permutation(len(chunks))]

    def __iter__(self) -> Iterator[Tuple[int, Batch]]:
        index = 0
        while True:
            for batch in self.epoch(index):
                yield index, batch
            index += 1


def make_batches(pairs: Sequence[Pair], vocab_src: Vocabulary, vocab_tgt: Vocabulary,
                 batch_size: int = Config.BATCH_SIZE, max_len: int = Config.MAX_SENTENCE_LEN,
                 seed: int = 0) -> List[Batch]:
    return BatchStream(pairs, vocab_src, vocab_tgt, batch_size, max_len, seed).epoch(0)


_DONE = object()


def prefetch(iterable: Iterable, depth: int = 4) -> Iterator:
    """Run the producer on a background thread, handing items over through a bounded queue"""
    buffer = queue.Queue(maxsize=depth)
    stop = threading.Event()

    def produce():
        try:
            for item in iterable:
                while not stop.is_set():
                    try:
                        buffer.put(item, timeout=0.1)
                        break
                    except queue.Full:
                        continue
                if stop.is_set():
                    return
            buffer.put(_DONE)
        except Exception as exc:
            buffer.put(exc)

    worker = threading.Thread(target=produce, name="batch-prefetch", daemon=True)
    worker.start()
    try:
        while True:
            item = buffer.get()
            if item is _DONE:
                return
            if isinstance(item, Exception):
                raise item
            yield item
    finally:
        stop.set()
