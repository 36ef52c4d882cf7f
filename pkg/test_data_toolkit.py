import numpy as np
import pytest

from config import Config
from srnmt.data_toolkit import (
    Batch,
    BatchStream,
    Vocabulary,
    build_vocab,
    generate_task,
    make_batch,
    make_batches,
    read_parallel,
    write_parallel,
)
from srnmt.errors import ConfigurationError, ContractError, DataError


def test_reserved_ids():
    vocab = Vocabulary(["a", "b"])
    assert vocab.itos[:4] == ["<pad>", "<unk>", "<s>", "</s>"]
    assert (Config.PAD_ID, Config.UNK_ID, Config.BOS_ID, Config.EOS_ID) == (0, 1, 2, 3)
    assert len(vocab) == 6
    assert "a" in vocab and "z" not in vocab


def test_build_vocab_orders_by_frequency_then_token():
    vocab = build_vocab(["b a c", "a b", "a d"], max_size=7)
    assert vocab.itos[4:] == ["a", "b", "c"]
    assert vocab.encode("a d q") == [4, Config.UNK_ID, Config.UNK_ID]


def test_build_vocab_errors():
    with pytest.raises(ConfigurationError):
        build_vocab(["a b"], max_size=4)
    with pytest.raises(DataError):
        build_vocab(["", "   "], max_size=10)


def test_decode_stops_at_eos_and_skips_padding():
    vocab = Vocabulary(["x", "y"])
    assert vocab.decode([Config.BOS_ID, 4, 5, Config.EOS_ID, 4]) == ["x", "y"]
    assert vocab.decode([4, Config.PAD_ID, 5]) == ["x", "y"]
    assert vocab.decode([4, Config.EOS_ID], strip_special=False) == ["x", "</s>"]


def test_vocabulary_save_and_load(tmp_path):
    vocab = build_vocab(["one two two three"], max_size=20)
    vocab.save(tmp_path / "v.txt")
    assert (tmp_path / "v.txt").read_text(encoding="utf-8") == "two\none\nthree\n"
    assert Vocabulary.load(tmp_path / "v.txt") == vocab


def test_vocabulary_load_rejects_blank_lines(tmp_path):
    path = tmp_path / "v.txt"
    path.write_text("two\n\none\n", encoding="utf-8")
    with pytest.raises(DataError, match=":2:"):
        Vocabulary.load(path)
    path.write_text("two\none\n", encoding="utf-8")
    assert Vocabulary.load(path).encode("one") == [5]


@pytest.mark.parametrize("kind", ["copy", "reverse", "toy-translation"])
def test_generate_task(kind):
    permutation = [3, 1, 4, 0, 2, 5]
    pairs = generate_task(kind, 6, (2, 7), 50, seed=4, permutation=permutation)
    assert len(pairs) == 50
    for source, target in pairs:
        s, t = source.split(), target.split()
        assert 2 <= len(s) <= 7
        if kind == "copy":
            assert t == s
        elif kind == "reverse":
            assert t == s[::-1]
        else:
            assert t == [str(permutation[int(x)]) for x in s][::-1]
    assert generate_task(kind, 6, (2, 7), 50, seed=4, permutation=permutation) == pairs


def test_generate_task_rejects_bad_parameters():
    with pytest.raises(ConfigurationError):
        generate_task("sort", 6, (1, 3), 5)
    with pytest.raises(ConfigurationError):
        generate_task("copy", 6, (4, 3), 5)
    with pytest.raises(ConfigurationError):
        generate_task("toy-translation", 6, (1, 3), 5, permutation=[0, 1, 2, 3, 4, 4])


def test_make_batch_layout():
    batch = make_batch([([5, 6, 7], [8, 9]), ([5, 6, 7, 8, 9], [4])])
    np.testing.assert_array_equal(batch.src, [[5, 6, 7, 0, 0], [5, 6, 7, 8, 9]])
    np.testing.assert_array_equal(batch.tgt_in, [[2, 8, 9], [2, 4, 0]])
    np.testing.assert_array_equal(batch.tgt_out, [[8, 9, 3], [4, 3, 0]])
    np.testing.assert_array_equal(batch.src_mask.sum(axis=1), [3, 5])
    assert batch.n_tgt_tokens == 5
    assert batch.n_src_tokens == 8
    assert batch.size == 2


def test_batch_rejects_inconsistent_masks():
    good = make_batch([([5, 6], [7])])
    with pytest.raises(ContractError):
        Batch(good.src, good.tgt_in, good.tgt_out, np.ones_like(good.src_mask), good.tgt_mask)
    empty = np.zeros((1, 2), dtype=np.int64)
    with pytest.raises(ContractError):
        Batch(empty, good.tgt_in, good.tgt_out, empty != 0, good.tgt_mask)


@pytest.fixture
def corpus():
    pairs = generate_task("reverse", 10, (1, 9), 60, seed=2)
    vocab = build_vocab((s for s, _ in pairs), 30)
    return pairs, vocab


def test_batch_stream_filters_long_pairs(corpus):
    pairs, vocab = corpus
    stream = BatchStream(pairs, vocab, vocab, batch_size=8, max_len=5, seed=0)
    kept = sum(1 for s, _ in pairs if len(s.split()) <= 5)
    assert stream.n_filtered == len(pairs) - kept
    assert sum(batch.size for batch in stream.epoch(0)) == kept
    with pytest.raises(DataError):
        BatchStream([("1 2 3", "3 2 1")], vocab, vocab, max_len=2)


def test_batch_stream_conserves_tokens(corpus):
    pairs, vocab = corpus
    stream = BatchStream(pairs, vocab, vocab, batch_size=7, max_len=50, seed=0)
    batches = stream.epoch(0)
    assert len(batches) == len(stream) == 9
    assert sum(b.n_src_tokens for b in batches) == stream.n_src_tokens
    assert sum(b.n_tgt_tokens for b in batches) == sum(len(t.split()) + 1 for _, t in pairs)


def test_batches_group_similar_lengths(corpus):
    pairs, vocab = corpus
    batches = BatchStream(pairs, vocab, vocab, batch_size=10, max_len=50, seed=0).epoch(0)
    spans = sorted((b.src_mask.sum(axis=1).min(), b.src_mask.sum(axis=1).max()) for b in batches)
    for (_, hi), (lo, _) in zip(spans, spans[1:]):
        assert hi <= lo


def test_epoch_shuffle_is_seeded(corpus):
    pairs, vocab = corpus
    first = BatchStream(pairs, vocab, vocab, batch_size=5, max_len=50, seed=3)
    second = BatchStream(pairs, vocab, vocab, batch_size=5, max_len=50, seed=3)
    order = lambda batches: [b.src.tobytes() for b in batches]
    assert order(first.epoch(1)) == order(second.epoch(1))
    assert order(first.epoch(0)) != order(first.epoch(1))


def test_stream_iterates_epochs(corpus):
    pairs, vocab = corpus
    stream = BatchStream(pairs, vocab, vocab, batch_size=20, max_len=50)
    iterator = iter(stream)
    epochs = [next(iterator)[0] for _ in range(2 * len(stream) + 1)]
    assert epochs == [0] * len(stream) + [1] * len(stream) + [2]


def test_make_batches_worked_example():
    vocab = Vocabulary([str(i) for i in range(10)])
    batches = make_batches([("1 2 3", "3 2 1"), ("1 2 3 4 5", "5 4 3 2 1")], vocab, vocab, batch_size=2)
    assert len(batches) == 1
    assert batches[0].src.shape == (2, 5)
    assert batches[0].tgt_in.shape == (2, 6)
    np.testing.assert_array_equal(batches[0].tgt_mask.sum(axis=1), [4, 6])


def test_parallel_files(tmp_path):
    pairs = [("a b", "b a"), ("c", "c")]
    write_parallel(pairs, tmp_path / "x.src", tmp_path / "x.tgt")
    assert read_parallel(tmp_path / "x.src", tmp_path / "x.tgt") == pairs
    (tmp_path / "x.tgt").write_text("only one\n", encoding="utf-8")
    with pytest.raises(DataError):
        read_parallel(tmp_path / "x.src", tmp_path / "x.tgt")
