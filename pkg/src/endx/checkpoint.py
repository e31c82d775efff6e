"""Binary checkpoint format.

Layout (all integers little-endian)::

    b"ENDX" | u32 version | u64 header length | header JSON (UTF-8, sorted keys)
    then per parameter, sorted by name:
    u32 name length | name (UTF-8) | u32 rank | rank x u64 extents | float32 values

The vocabulary lives in a ``vocab.txt`` next to the checkpoint and is pinned by
its SHA-256 in the header.
"""
from __future__ import annotations

import json
import struct
from pathlib import Path

import numpy as np

from .aggregator import AggregatorConfig
from .cross_attention import CrossAttentionConfig
from .encoders import EncoderConfig, Vocabulary
from .model import EndxModel

MAGIC = b"ENDX"
VERSION = 1
VOCAB_FILE = "vocab.txt"
_LE_F32 = np.dtype("<f4")


class CheckpointError(ValueError):
    pass


def vocab_path(checkpoint_path) -> Path:
    return Path(checkpoint_path).parent / VOCAB_FILE


def encode_checkpoint(model: EndxModel, extra: dict | None = None, step: int = 0) -> bytes:
    header = {
        "format_version": VERSION,
        **model.config_dict(),
        "vocab_sha256": model.vocab.digest(),
        "vocab_size": len(model.vocab),
        "step": int(step),
        **(extra or {}),
    }
    blob = json.dumps(header, sort_keys=True, separators=(",", ":")).encode("utf-8")
    parts = [MAGIC, struct.pack("<I", VERSION), struct.pack("<Q", len(blob)), blob]
    for name in sorted(model.params.names()):
        values = np.ascontiguousarray(model.params[name].data, dtype=_LE_F32)
        raw_name = name.encode("utf-8")
        parts.append(struct.pack("<I", len(raw_name)))
        parts.append(raw_name)
        parts.append(struct.pack("<I", values.ndim))
        parts.append(struct.pack(f"<{values.ndim}Q", *values.shape))
        parts.append(values.tobytes())
    return b"".join(parts)


BASE_KEYS = ("format_version", "encoder", "aggregator", "cross_attention", "vocab_sha256",
             "vocab_size", "step")


def header_extras(header: dict) -> dict:
    """Header entries beyond the model description (training configs and the like)."""
    return {k: v for k, v in header.items() if k not in BASE_KEYS}


def save_checkpoint(model: EndxModel, path, extra: dict | None = None, step: int = 0) -> None:
    """Write the checkpoint and its vocabulary sidecar."""
    path = Path(path)
    data = encode_checkpoint(model, extra, step)
    try:
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_bytes(data)
        sidecar = vocab_path(path)
        if not sidecar.exists() or Vocabulary.load(sidecar).digest() != model.vocab.digest():
            model.vocab.save(sidecar)
    except OSError as exc:
        raise CheckpointError(f"cannot write checkpoint {path}: {exc}") from exc


class _Reader:
    def __init__(self, data: bytes, path):
        self.data, self.pos, self.path = data, 0, path

    def take(self, n: int) -> bytes:
        if self.pos + n > len(self.data):
            raise CheckpointError(f"{self.path}: truncated checkpoint")
        chunk = self.data[self.pos:self.pos + n]
        self.pos += n
        return chunk

    def unpack(self, fmt: str):
        return struct.unpack(fmt, self.take(struct.calcsize(fmt)))


def decode_checkpoint(data: bytes, path="<bytes>") -> tuple[dict, dict]:
    """Header and name -> float32 array, without building a model."""
    reader = _Reader(data, path)
    if len(data) < 4 or reader.take(4) != MAGIC:
        raise CheckpointError(f"{path}: not a checkpoint")
    (version,) = reader.unpack("<I")
    if version != VERSION:
        raise CheckpointError(
            f"{path}: checkpoint format version {version} is incompatible with "
            f"this reader (expects {VERSION})")
    (length,) = reader.unpack("<Q")
    try:
        header = json.loads(reader.take(length).decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise CheckpointError(f"{path}: corrupt header ({exc})") from exc
    params = {}
    while reader.pos < len(data):
        (name_len,) = reader.unpack("<I")
        name = reader.take(name_len).decode("utf-8")
        (rank,) = reader.unpack("<I")
        shape = reader.unpack(f"<{rank}Q") if rank else ()
        count = int(np.prod(shape)) if rank else 1
        values = np.frombuffer(reader.take(4 * count), dtype=_LE_F32).reshape(shape)
        params[name] = values.astype(np.float32)
    return header, params


def load_checkpoint(path, vocab: Vocabulary | None = None) -> tuple[EndxModel, dict]:
    """Rebuild the model; every expected parameter must be present with its shape."""
    path = Path(path)
    try:
        data = path.read_bytes()
    except OSError as exc:
        raise CheckpointError(f"cannot read checkpoint {path}: {exc}") from exc
    header, params = decode_checkpoint(data, path)
    if vocab is None:
        sidecar = vocab_path(path)
        if not sidecar.exists():
            raise CheckpointError(f"{path}: vocabulary file {sidecar} is missing")
        vocab = Vocabulary.load(sidecar)
    if vocab.digest() != header["vocab_sha256"]:
        raise CheckpointError(f"{path}: vocabulary does not match the checkpoint")
    model = EndxModel.initialize(
        vocab,
        EncoderConfig(**header["encoder"]),
        AggregatorConfig(**header["aggregator"]),
        CrossAttentionConfig(**header["cross_attention"]),
        seed=0, dtype="float32")
    expected = set(model.params.names())
    if set(params) != expected:
        missing = sorted(expected - set(params))
        unexpected = sorted(set(params) - expected)
        raise CheckpointError(f"{path}: parameter mismatch; missing {missing}, "
                              f"unexpected {unexpected}")
    for name, value in params.items():
        if value.shape != model.params[name].shape:
            raise CheckpointError(f"{path}: parameter {name} has shape {value.shape}, "
                                  f"expected {model.params[name].shape}")
        model.params.assign(name, value)
    return model, header
