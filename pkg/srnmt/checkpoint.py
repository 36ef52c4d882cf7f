"""Binary checkpoint format.

Layout: magic ``SRNMT1\\n``; one header line of space-separated key=value pairs; then per
parameter a u32 name length, the UTF-8 name, a u32 rank, u32 extents and the raw
little-endian IEEE-754 values; finally a u32 CRC32 of every preceding byte.
All integers are little-endian.
"""

import logging
import struct
import zlib
from pathlib import Path
from typing import Dict, Union

import numpy as np

from config import Config
from models import ModelConfig
from srnmt.errors import CorruptCheckpointError
from srnmt.seq2seq_model import Seq2SeqModel

logger = logging.getLogger(__name__)

HEADER_KEYS = [
    "d", "n_layers", "src_vocab_size", "tgt_vocab_size", "dropout_p", "cell_kind",
    "use_layer_norm", "multi_attention", "use_highway", "input_feed", "precision", "seed",
]


def _header(config: ModelConfig) -> bytes:
    values = config.model_dump()
    parts = []
    for key in HEADER_KEYS:
        value = values[key]
        if isinstance(value, bool):
            value = int(value)
        elif isinstance(value, float):
            value = repr(value)
        parts.append(f"{key}={value}")
    return (" ".join(parts) + "\n").encode("utf-8")


def to_bytes(model: Seq2SeqModel) -> bytes:
    fmt = Config.PRECISIONS[model.config.precision]
    chunks = [Config.CHECKPOINT_MAGIC, _header(model.config)]
    for name, tensor in model.named_parameters().items():
        encoded = name.encode("utf-8")
        chunks.append(struct.pack("<I", len(encoded)))
        chunks.append(encoded)
        chunks.append(struct.pack("<I", tensor.ndim))
        chunks.append(struct.pack(f"<{tensor.ndim}I", *tensor.shape))
        chunks.append(np.ascontiguousarray(tensor.values, dtype=fmt).tobytes())
    body = b"".join(chunks)
    return body + struct.pack("<I", zlib.crc32(body) & 0xFFFFFFFF)


def save_checkpoint(path: Union[str, Path], model: Seq2SeqModel) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_bytes(to_bytes(model))
    logger.info("Saved checkpoint %s (%d parameters)", path, model.num_parameters())
    return path


def _parse_header(line: bytes) -> ModelConfig:
    try:
        pairs = dict(item.split("=", 1) for item in line.decode("utf-8").split())
    except ValueError as exc:
        raise CorruptCheckpointError(f"malformed checkpoint header: {exc}")
    missing = [key for key in HEADER_KEYS if key not in pairs]
    if missing:
        raise CorruptCheckpointError(f"checkpoint header lacks keys {missing}")
    return ModelConfig(**pairs)


def from_bytes(data: bytes) -> Seq2SeqModel:
    if len(data) < len(Config.CHECKPOINT_MAGIC) + 4:
        raise CorruptCheckpointError("checkpoint is truncated")
    body, stored = data[:-4], struct.unpack("<I", data[-4:])[0]
    if zlib.crc32(body) & 0xFFFFFFFF != stored:
        raise CorruptCheckpointError("checkpoint CRC32 mismatch")
    if not body.startswith(Config.CHECKPOINT_MAGIC):
        raise CorruptCheckpointError("not an SRNMT1 checkpoint")
    offset = len(Config.CHECKPOINT_MAGIC)
    end = body.find(b"\n", offset)
    if end < 0:
        raise CorruptCheckpointError("checkpoint header is not terminated")
    config = _parse_header(body[offset:end])
    offset = end + 1

    dtype = np.dtype(Config.PRECISIONS[config.precision])
    tensors: Dict[str, np.ndarray] = {}
    try:
        while offset < len(body):
            (name_len,) = struct.unpack_from("<I", body, offset)
            offset += 4
            name = body[offset:offset + name_len].decode("utf-8")
            offset += name_len
            (rank,) = struct.unpack_from("<I", body, offset)
            offset += 4
            shape = struct.unpack_from(f"<{rank}I", body, offset)
            offset += 4 * rank
            count = int(np.prod(shape)) if rank else 1
            values = np.frombuffer(body, dtype=dtype, count=count, offset=offset)
            offset += count * dtype.itemsize
            tensors[name] = values.reshape(shape).astype(config.precision)
    except (struct.error, ValueError) as exc:
        raise CorruptCheckpointError(f"checkpoint body is malformed: {exc}")

    model = Seq2SeqModel(config)
    expected = model.named_parameters()
    if set(expected) != set(tensors):
        raise CorruptCheckpointError(
            f"checkpoint parameters differ from model: missing {sorted(set(expected) - set(tensors))}, "
            f"unexpected {sorted(set(tensors) - set(expected))}"
        )
    for name, tensor in expected.items():
        if tensors[name].shape != tensor.shape:
            raise CorruptCheckpointError(f"{name}: stored shape {tensors[name].shape} != {tensor.shape}")
        tensor.values = tensors[name]
    return model


def load_checkpoint(path: Union[str, Path]) -> Seq2SeqModel:
    model = from_bytes(Path(path).read_bytes())
    logger.info("Loaded checkpoint %s", path)
    return model


def snapshot(model: Seq2SeqModel) -> Dict[str, np.ndarray]:
    return {name: t.values.copy() for name, t in model.named_parameters().items()}


def restore(model: Seq2SeqModel, values: Dict[str, np.ndarray]):
    for name, tensor in model.named_parameters().items():
        tensor.values = values[name].copy()
