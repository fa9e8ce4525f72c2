"""Versioned binary checkpoint files.

Layout (all integers little-endian):

    magic             4 bytes  b"RGMM"
    version           u32      currently 1
    config length     u32      followed by that many UTF-8 JSON bytes
    array count       u32
    per array:        name length u16 + UTF-8 name, ndim u8, each dim u32,
                      then the float64 little-endian row-major payload
    optimizer flag    u8       0 or 1
    if 1:             step count u64, array count u32, arrays as above
    checksum          u32      CRC32 of every preceding byte

Serialization is canonical (sorted JSON keys, caller-fixed array order), so
saving what was just loaded reproduces the file byte for byte. Writes go to a
temporary sibling and are renamed into place.
"""

from __future__ import annotations

import io
import json
import struct
import zlib
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .errors import CheckpointError, ShapeError
from .model import (ClassifierHead, DecoderConfig, EncoderConfig, init_parameters)

MAGIC = b"RGMM"
VERSION = 1


@dataclass
class Checkpoint:
    version: int
    config: dict
    arrays: dict[str, np.ndarray]
    optimizer_step: int | None = None
    optimizer_arrays: dict[str, np.ndarray] | None = None


def _write_array(buf: io.BytesIO, name: str, values: np.ndarray) -> None:
    encoded = name.encode("utf-8")
    buf.write(struct.pack("<H", len(encoded)))
    buf.write(encoded)
    buf.write(struct.pack("<B", values.ndim))
    for dim in values.shape:
        buf.write(struct.pack("<I", dim))
    buf.write(np.ascontiguousarray(values, dtype="<f8").tobytes())


def save_checkpoint(path, config: dict, arrays: dict[str, np.ndarray],
                    optimizer_state=None) -> None:
    """Write a checkpoint atomically; `optimizer_state` is (step, array dict) or None."""
    names = list(arrays)
    if len(set(names)) != len(names):
        raise CheckpointError("duplicate array names in checkpoint payload")
    buf = io.BytesIO()
    buf.write(MAGIC)
    buf.write(struct.pack("<I", VERSION))
    config_bytes = json.dumps(config, sort_keys=True, separators=(",", ":")).encode("utf-8")
    buf.write(struct.pack("<I", len(config_bytes)))
    buf.write(config_bytes)
    buf.write(struct.pack("<I", len(names)))
    for name in names:
        _write_array(buf, name, np.asarray(arrays[name]))
    if optimizer_state is None:
        buf.write(struct.pack("<B", 0))
    else:
        step, opt_arrays = optimizer_state
        buf.write(struct.pack("<B", 1))
        buf.write(struct.pack("<Q", int(step)))
        buf.write(struct.pack("<I", len(opt_arrays)))
        for name in opt_arrays:
            _write_array(buf, name, np.asarray(opt_arrays[name]))
    payload = buf.getvalue()
    payload += struct.pack("<I", zlib.crc32(payload) & 0xFFFFFFFF)

    path = Path(path)
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_bytes(payload)
    tmp.replace(path)


class _Reader:
    def __init__(self, raw: bytes, path):
        self.raw = raw
        self.pos = 0
        self.path = path

    def take(self, count: int) -> bytes:
        if self.pos + count > len(self.raw):
            raise CheckpointError(f"truncated checkpoint file {self.path}")
        out = self.raw[self.pos:self.pos + count]
        self.pos += count
        return out

    def unpack(self, fmt: str):
        return struct.unpack(fmt, self.take(struct.calcsize(fmt)))[0]


def _read_array_table(reader: _Reader) -> dict[str, np.ndarray]:
    count = reader.unpack("<I")
    arrays: dict[str, np.ndarray] = {}
    for _ in range(count):
        name = reader.take(reader.unpack("<H")).decode("utf-8")
        if name in arrays:
            raise CheckpointError(f"array {name!r} appears twice in checkpoint")
        ndim = reader.unpack("<B")
        shape = tuple(reader.unpack("<I") for _ in range(ndim))
        size = int(np.prod(shape, dtype=np.int64)) if ndim else 1
        data = reader.take(size * 8)
        arrays[name] = np.frombuffer(data, dtype="<f8").reshape(shape).copy()
    return arrays


def load_checkpoint(path) -> Checkpoint:
    path = Path(path)
    try:
        raw = path.read_bytes()
    except OSError as exc:
        raise CheckpointError(f"cannot read checkpoint {path}: {exc}") from exc
    if len(raw) < len(MAGIC) + 8:
        raise CheckpointError(f"truncated checkpoint file {path}")
    stored = struct.unpack("<I", raw[-4:])[0]
    if zlib.crc32(raw[:-4]) & 0xFFFFFFFF != stored:
        raise CheckpointError(f"checksum mismatch in {path}: file is corrupt")
    reader = _Reader(raw[:-4], path)
    if reader.take(4) != MAGIC:
        raise CheckpointError(f"{path} is not a checkpoint file (bad magic)")
    version = reader.unpack("<I")
    if version != VERSION:
        raise CheckpointError(f"{path}: unknown checkpoint version {version}, expected {VERSION}")
    config = json.loads(reader.take(reader.unpack("<I")).decode("utf-8"))
    arrays = _read_array_table(reader)
    optimizer_step = None
    optimizer_arrays = None
    if reader.unpack("<B"):
        optimizer_step = reader.unpack("<Q")
        optimizer_arrays = _read_array_table(reader)
    if reader.pos != len(reader.raw):
        raise CheckpointError(f"{path}: {len(reader.raw) - reader.pos} trailing bytes")
    return Checkpoint(version, config, arrays, optimizer_step, optimizer_arrays)


# ---------------------------------------------------------------------------
# model binding
# ---------------------------------------------------------------------------


def encoder_config_dict(cfg: EncoderConfig) -> dict:
    return {"blocks": cfg.blocks, "latent_dim": cfg.latent_dim, "heads": cfg.heads,
            "mlp_dim": cfg.mlp_dim, "patch_size": cfg.patch_size,
            "channels": cfg.channels, "max_tokens": cfg.max_tokens}


def decoder_config_dict(cfg: DecoderConfig) -> dict:
    return {"blocks": cfg.blocks, "latent_dim": cfg.latent_dim,
            "heads": cfg.heads, "mlp_dim": cfg.mlp_dim}


def model_config(encoder_cfg: EncoderConfig, decoder_cfg: DecoderConfig | None = None,
                 classes: int | None = None) -> dict:
    config = {"encoder": encoder_config_dict(encoder_cfg)}
    if decoder_cfg is not None:
        config["decoder"] = decoder_config_dict(decoder_cfg)
    if classes is not None:
        config["classes"] = classes
    return config


def collect_arrays(*param_objects) -> dict[str, np.ndarray]:
    arrays: dict[str, np.ndarray] = {}
    for obj in param_objects:
        for name, tensor in obj.named_parameters():
            if name in arrays:
                raise CheckpointError(f"parameter name {name!r} collected twice")
            arrays[name] = tensor.data
    return arrays


def restore_parameters(param_object, arrays: dict[str, np.ndarray]) -> None:
    """Copy checkpoint arrays into an existing parameter container by name."""
    for name, tensor in param_object.named_parameters():
        if name not in arrays:
            raise CheckpointError(f"checkpoint is missing parameter {name!r}")
        stored = arrays[name]
        if stored.shape != tensor.data.shape:
            raise ShapeError(
                f"checkpoint array {name!r} has shape {stored.shape}, "
                f"model expects {tensor.data.shape}")
        tensor.data = np.ascontiguousarray(stored, dtype=np.float64)


def params_from_checkpoint(ckpt: Checkpoint):
    """Rebuild parameter containers from a checkpoint's stored configuration.

    Returns (encoder, decoder or None, head or None).
    """
    enc_cfg = EncoderConfig(**ckpt.config["encoder"])
    dec_dict = ckpt.config.get("decoder")
    dec_cfg = DecoderConfig(**dec_dict) if dec_dict else DecoderConfig(1, enc_cfg.latent_dim, 1, 1)
    classes = ckpt.config.get("classes", 1)
    encoder, decoder, head = init_parameters(enc_cfg, dec_cfg, classes, seed=0)
    restore_parameters(encoder, ckpt.arrays)
    if dec_dict:
        restore_parameters(decoder, ckpt.arrays)
    else:
        decoder = None
    if "classes" in ckpt.config:
        restore_parameters(head, ckpt.arrays)
    else:
        head = None
    return encoder, decoder, head


def head_from_checkpoint(ckpt: Checkpoint) -> ClassifierHead | None:
    _, _, head = params_from_checkpoint(ckpt)
    return head
