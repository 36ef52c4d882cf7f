import math
import struct
import zlib

import numpy as np
import pytest

from config import Config
from models import ModelConfig
from srnmt import tensor as tn
from srnmt.checkpoint import from_bytes, load_checkpoint, save_checkpoint, to_bytes
from srnmt.data_toolkit import make_batch
from srnmt.errors import ConfigurationError, CorruptCheckpointError, EmptyBatchError, VocabularyError
from srnmt.gradcheck import perturb_parameters
from srnmt.seq2seq_model import Seq2SeqModel, decode_train, encode, nll_loss, parameter_count, perplexity


def tiny_config(**overrides) -> ModelConfig:
    values = dict(d=8, n_layers=2, src_vocab_size=11, tgt_vocab_size=13, dropout_p=0.0,
                  precision="float64", seed=3)
    values.update(overrides)
    return ModelConfig(**values)


def sample_batch():
    return make_batch([([4, 5, 6, 7], [8, 9, 10]), ([6, 5], [4])])


def test_nll_loss_uniform_logits():
    logits = tn.Tensor(np.zeros((2, 3, 10)))
    gold = np.array([[4, 5, 0], [3, 0, 0]])
    loss = nll_loss(logits, gold)
    assert loss.item() == pytest.approx(math.log(10))
    assert perplexity(loss.item()) == pytest.approx(10.0)


def test_nll_loss_errors():
    with pytest.raises(EmptyBatchError):
        nll_loss(tn.Tensor(np.zeros((1, 2, 5))), np.zeros((1, 2), dtype=int))
    with pytest.raises(VocabularyError):
        nll_loss(tn.Tensor(np.zeros((1, 2, 5))), np.array([[1, 7]]))


def test_model_config_validation():
    with pytest.raises(ConfigurationError):
        tiny_config(d=7)
    with pytest.raises(ConfigurationError):
        tiny_config(src_vocab_size=4)
    with pytest.raises(ConfigurationError):
        tiny_config(dropout_p=1.0)


@pytest.mark.parametrize("overrides", [
    {},
    {"d": 64, "n_layers": 1},
    {"use_layer_norm": False},
    {"use_highway": False},
    {"multi_attention": False, "n_layers": 3},
    {"use_layer_norm": False, "use_highway": False, "multi_attention": False},
    {"cell_kind": "lstm"},
    {"cell_kind": "lstm", "input_feed": True},
])
def test_parameter_count_closed_form(overrides):
    config = tiny_config(**overrides)
    assert Seq2SeqModel(config).num_parameters() == parameter_count(config)


def test_per_layer_totals():
    for d in (8, 64):
        one = parameter_count(tiny_config(d=d, n_layers=1))
        two = parameter_count(tiny_config(d=d, n_layers=2))
        assert two - one == (3 * d * d + 6 * d) + (7 * d * d + 15 * d)


def test_multi_attention_delta():
    d = 8
    full = parameter_count(tiny_config(n_layers=3))
    single = parameter_count(tiny_config(n_layers=3, multi_attention=False))
    # attention parameters (W_as, W_ah, v, two LN pairs) plus W_c and its LN pair, in two layers
    assert full - single == 2 * (3 * d * d + 7 * d)


def test_single_attention_sits_in_the_last_layer():
    names = set(Seq2SeqModel(tiny_config(n_layers=3, multi_attention=False)).named_parameters())
    assert "decoder.2.attention.W_as" in names
    assert not any(name.startswith(("decoder.0.attention", "decoder.1.attention")) for name in names)


def test_same_seed_same_parameters():
    a, b = Seq2SeqModel(tiny_config()), Seq2SeqModel(tiny_config())
    for name, tensor in a.named_parameters().items():
        np.testing.assert_array_equal(tensor.values, b.named_parameters()[name].values)


def test_parameter_names():
    names = set(Seq2SeqModel(tiny_config()).named_parameters())
    assert {"src_embedding", "tgt_embedding", "output.W", "output.b"} <= names
    assert "encoder.1.W" in names
    assert "decoder.1.attention.W_as" in names
    assert "decoder.0.ln_c_gain" in names
    lstm = set(Seq2SeqModel(tiny_config(cell_kind="lstm")).named_parameters())
    assert "encoder.0.fwd.W_x" in lstm
    assert "decoder.attention.v" in lstm


def test_forward_loss_counts_target_tokens():
    model = Seq2SeqModel(tiny_config())
    batch = sample_batch()
    loss, n_tokens = model.forward_loss(batch)
    assert n_tokens == 4 + 2
    assert loss.ndim == 0
    assert np.isfinite(loss.item())


def test_encode_single_sentence_matches_batch():
    model = Seq2SeqModel(tiny_config())
    perturb_parameters(model)
    batch = sample_batch()
    H = model.encode(batch.src, batch.src_mask).values
    single = model.encode(np.array([6, 5])).values
    np.testing.assert_allclose(H[1, :2], single, atol=1e-12)


@pytest.mark.parametrize("overrides", [
    {},
    {"multi_attention": False},
    {"use_layer_norm": False, "use_highway": False},
    {"cell_kind": "lstm"},
    {"cell_kind": "lstm", "input_feed": True, "n_layers": 1},
])
def test_incremental_decoding_replays_training_logits(overrides):
    model = Seq2SeqModel(tiny_config(**overrides))
    perturb_parameters(model, seed=1)
    batch = sample_batch()
    H = model.encode(batch.src, batch.src_mask)
    full = model.decode_train(batch.tgt_in, H, batch.src_mask).values
    state = model.init_decoder_state(H, batch.src_mask)
    for t in range(batch.tgt_in.shape[1]):
        logits, state = model.decode_step(batch.tgt_in[:, t], state)
        np.testing.assert_allclose(logits, full[:, t], atol=1e-9)


def test_decoder_state_select_follows_rows():
    model = Seq2SeqModel(tiny_config())
    batch = sample_batch()
    H = model.encode(batch.src, batch.src_mask)
    state = model.init_decoder_state(H, batch.src_mask)
    _, state = model.decode_step([Config.BOS_ID, Config.BOS_ID], state)
    picked = state.select([1, 1, 0])
    assert picked.H.shape[0] == 3
    np.testing.assert_array_equal(picked.scan[0].values[2], state.scan[0].values[0])
    np.testing.assert_array_equal(picked.src_mask[0], batch.src_mask[1])


# ---------------------------------------------------------------------------
# checkpoints
# ---------------------------------------------------------------------------

@pytest.mark.parametrize("overrides", [{}, {"precision": "float32"}, {"cell_kind": "lstm"}])
def test_checkpoint_round_trip_is_bitwise(tmp_path, overrides):
    model = Seq2SeqModel(tiny_config(**overrides))
    perturb_parameters(model)
    path = save_checkpoint(tmp_path / "model.ckpt", model)
    loaded = load_checkpoint(path)
    assert loaded.config == model.config
    for name, tensor in model.named_parameters().items():
        assert np.array_equal(loaded.named_parameters()[name].values, tensor.values)
    assert to_bytes(loaded) == path.read_bytes()


def test_checkpoint_layout():
    model = Seq2SeqModel(tiny_config())
    data = to_bytes(model)
    assert data.startswith(Config.CHECKPOINT_MAGIC)
    header = data[len(Config.CHECKPOINT_MAGIC):data.index(b"\n", len(Config.CHECKPOINT_MAGIC))].decode()
    assert "d=8" in header.split()
    assert "precision=float64" in header.split()
    assert struct.unpack("<I", data[-4:])[0] == zlib.crc32(data[:-4]) & 0xFFFFFFFF


def test_checkpoint_corruption_is_detected():
    data = bytearray(to_bytes(Seq2SeqModel(tiny_config())))
    data[len(data) // 2] ^= 0x01
    with pytest.raises(CorruptCheckpointError):
        from_bytes(bytes(data))
    with pytest.raises(CorruptCheckpointError):
        from_bytes(b"SRNMT")
    body = b"NOTSRN\nd=8\n"
    with pytest.raises(CorruptCheckpointError):
        from_bytes(body + struct.pack("<I", zlib.crc32(body) & 0xFFFFFFFF))


def test_module_level_entry_points():
    model = Seq2SeqModel(tiny_config())
    batch = sample_batch()
    H = encode(batch.src, model)
    assert H.shape == (2, 4, 8)
    logits = decode_train(batch.tgt_in, H, batch.src_mask, model)
    assert logits.shape == (2, 4, 13)
    np.testing.assert_allclose(encode([4, 5, 6, 7], model).values, H.values[0], atol=1e-12)
