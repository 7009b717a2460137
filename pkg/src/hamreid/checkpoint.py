"""Binary checkpoints: model config + hash + named tensors, CRC-protected.

Layout (little-endian)::

    b"HAMRCKPT" | version u32 | config_len u32 | config utf-8 | sha256 (32 bytes)
    | count u32 | count × (kind u8, name_len u16, name, tensor) | crc32 u32

``kind`` is 0 for parameters and 1 for buffers; each tensor uses the plain
tensor serialization (rank, extents, float64 payload).
"""
from __future__ import annotations

import hashlib
import struct
import warnings
import zlib
from pathlib import Path

from .config import config_hash, model_config_from_text, model_section_text
from .model import Model, ModelConfig
from .params import ParamStore
from .tensor import tensor_from_bytes, tensor_to_bytes

MAGIC = b"HAMRCKPT"
VERSION = 1


class CheckpointError(ValueError):
    pass


class ConfigMismatchWarning(UserWarning):
    pass


def save_checkpoint(model: Model, path: str | Path) -> None:
    text = model_section_text(model.cfg).encode()
    parts = [MAGIC, struct.pack("<II", VERSION, len(text)), text,
             bytes.fromhex(config_hash(model.cfg))]
    entries = [(0, k, v) for k, v in model.store.params.items()]
    entries += [(1, k, v) for k, v in model.store.buffers.items()]
    parts.append(struct.pack("<I", len(entries)))
    for kind, name, value in entries:
        raw = name.encode()
        parts.append(struct.pack("<BH", kind, len(raw)) + raw + tensor_to_bytes(value))
    body = b"".join(parts)
    Path(path).write_bytes(body + struct.pack("<I", zlib.crc32(body)))


def load_checkpoint(path: str | Path, expected: ModelConfig | None = None,
                    override: bool = False) -> Model:
    """Rebuild the stored model.

    If ``expected`` hashes differently from the stored config a
    :class:`ConfigMismatchWarning` is issued; loading then proceeds only with
    ``override`` set and otherwise raises.
    """
    buf = Path(path).read_bytes()
    if len(buf) < len(MAGIC) + 12 or buf[: len(MAGIC)] != MAGIC:
        raise CheckpointError(f"{path}: not a checkpoint (bad magic)")
    body, (crc,) = buf[:-4], struct.unpack("<I", buf[-4:])
    if zlib.crc32(body) != crc:
        raise CheckpointError(f"{path}: checksum mismatch (truncated or corrupt)")
    version, clen = struct.unpack_from("<II", body, len(MAGIC))
    if version != VERSION:
        raise CheckpointError(f"{path}: unknown checkpoint version {version}")
    off = len(MAGIC) + 8
    text = body[off : off + clen].decode()
    off += clen
    stored_hash = body[off : off + 32].hex()
    off += 32
    if hashlib.sha256(text.encode()).hexdigest() != stored_hash:
        raise CheckpointError(f"{path}: config hash does not match stored config")
    cfg = model_config_from_text(text)
    if expected is not None and config_hash(expected) != stored_hash:
        warnings.warn(f"{path}: checkpoint config hash {stored_hash[:12]} differs from run "
                      f"config {config_hash(expected)[:12]}", ConfigMismatchWarning, stacklevel=2)
        if not override:
            raise CheckpointError(f"{path}: config hash mismatch (pass override to load anyway)")
    (count,) = struct.unpack_from("<I", body, off)
    off += 4
    store = ParamStore()
    try:
        for _ in range(count):
            kind, nlen = struct.unpack_from("<BH", body, off)
            off += 3
            name = body[off : off + nlen].decode()
            off += nlen
            arr, off = tensor_from_bytes(body, off)
            if kind == 0:
                store.params[name] = arr
            elif kind == 1:
                store.buffers[name] = arr
            else:
                raise CheckpointError(f"{path}: bad entry kind {kind}")
    except struct.error as exc:
        raise CheckpointError(f"{path}: truncated entry table") from exc
    if off != len(body):
        raise CheckpointError(f"{path}: {len(body) - off} unexpected trailing bytes")
    fresh = Model(cfg).store
    if set(fresh.params) != set(store.params) or set(fresh.buffers) != set(store.buffers):
        raise CheckpointError(f"{path}: tensor names do not match the stored config")
    for k, v in store.params.items():
        if v.shape != fresh.params[k].shape:
            raise CheckpointError(f"{path}: {k} has shape {v.shape}, expected {fresh.params[k].shape}")
    return Model(cfg, store=store)
