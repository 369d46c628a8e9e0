"""
LNCR binary container for encoders, the projection module and gallery indexes.

Layout (all integers unsigned 32-bit little-endian):
    b"LNCR" | version | metadata length | metadata (UTF-8 JSON, sorted keys)
    | float32 little-endian payload of every tensor, in manifest order
    | for each string: length | UTF-8 bytes

The metadata holds the object kind, its config, the ordered tensor
name/shape manifest and the string count. Tensors are stored as float32 and
loaded back into float64.
"""
from __future__ import annotations

import hashlib
import json
import logging
import os
import struct
from dataclasses import dataclass, field
from typing import Dict, List, Sequence, Tuple

import numpy as np

from .encoders import DualEncoder, EncoderConfig, Module
from .errors import CorruptCheckpointError
from .projection import ProjectionConfig, ProjectionModule
from .text_pipeline import RESERVED_TOKENS, Vocabulary

logger = logging.getLogger(__name__)

MAGIC = b"LNCR"
VERSION = 1
_U32 = struct.Struct("<I")


@dataclass
class Container:
    kind: str
    meta: Dict
    tensors: Dict[str, np.ndarray] = field(default_factory=dict)
    strings: List[str] = field(default_factory=list)


def write_container(path: str, kind: str, meta: Dict, tensors: Sequence[Tuple[str, np.ndarray]],
                    strings: Sequence[str] = ()) -> None:
    header = {
        "kind": kind,
        "meta": meta,
        "tensors": [{"name": name, "shape": list(np.shape(arr))} for name, arr in tensors],
        "n_strings": len(strings),
    }
    payload = json.dumps(header, sort_keys=True, separators=(",", ":"), ensure_ascii=False).encode("utf-8")

    directory = os.path.dirname(os.path.abspath(path))
    os.makedirs(directory, exist_ok=True)
    tmp_path = path + ".tmp"
    with open(tmp_path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(_U32.pack(VERSION))
        fh.write(_U32.pack(len(payload)))
        fh.write(payload)
        for _, arr in tensors:
            fh.write(np.ascontiguousarray(arr, dtype="<f4").tobytes(order="C"))
        for text in strings:
            raw = text.encode("utf-8")
            fh.write(_U32.pack(len(raw)))
            fh.write(raw)
    os.replace(tmp_path, path)


def _take(buf: bytes, offset: int, size: int, what: str) -> Tuple[bytes, int]:
    if offset + size > len(buf):
        raise CorruptCheckpointError(f"truncated file while reading {what}")
    return buf[offset:offset + size], offset + size


def read_container(path: str) -> Container:
    try:
        with open(path, "rb") as fh:
            buf = fh.read()
    except OSError as e:
        raise CorruptCheckpointError(f"cannot read {path}: {e}") from e

    raw, offset = _take(buf, 0, 4, "magic")
    if raw != MAGIC:
        raise CorruptCheckpointError(f"{path}: bad magic {raw!r}")
    raw, offset = _take(buf, offset, 4, "version")
    version = _U32.unpack(raw)[0]
    if version != VERSION:
        raise CorruptCheckpointError(f"{path}: unsupported version {version}")
    raw, offset = _take(buf, offset, 4, "metadata length")
    raw, offset = _take(buf, offset, _U32.unpack(raw)[0], "metadata")
    try:
        header = json.loads(raw.decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as e:
        raise CorruptCheckpointError(f"{path}: unreadable metadata ({e})") from e

    container = Container(kind=header.get("kind", ""), meta=header.get("meta", {}))
    for entry in header.get("tensors", []):
        shape = tuple(entry["shape"])
        count = int(np.prod(shape)) if shape else 1
        raw, offset = _take(buf, offset, 4 * count, f"tensor {entry['name']}")
        container.tensors[entry["name"]] = np.frombuffer(raw, dtype="<f4").astype(np.float64).reshape(shape)
    for i in range(header.get("n_strings", 0)):
        raw, offset = _take(buf, offset, 4, f"string {i} length")
        raw, offset = _take(buf, offset, _U32.unpack(raw)[0], f"string {i}")
        container.strings.append(raw.decode("utf-8"))
    if offset != len(buf):
        raise CorruptCheckpointError(f"{path}: {len(buf) - offset} trailing bytes")
    return container


def _load_parameters(module: Module, container: Container, path: str) -> None:
    for name, param in module.named_parameters():
        if name not in container.tensors:
            raise CorruptCheckpointError(f"{path}: missing tensor '{name}'")
        values = container.tensors[name]
        if values.shape != param.shape:
            raise CorruptCheckpointError(
                f"{path}: tensor '{name}' has shape {values.shape}, config expects {param.shape}")
        param.assign(values)


# ==============================================
# Encoders
# ==============================================

def save_encoders(path: str, encoders: DualEncoder) -> None:
    meta = {"config": encoders.cfg.to_dict(),
            "vocab": encoders.vocab.tokens()[len(RESERVED_TOKENS):]}
    write_container(path, "dual-encoder", meta, [(n, p.data) for n, p in encoders.named_parameters()])
    logger.info(f"Saved encoder checkpoint to {path}")


def load_encoders(path: str) -> DualEncoder:
    """Rebuild the dual encoder from a checkpoint; the result is frozen"""
    container = read_container(path)
    if container.kind != "dual-encoder":
        raise CorruptCheckpointError(f"{path}: expected a dual-encoder checkpoint, found '{container.kind}'")
    try:
        cfg = EncoderConfig.from_dict(container.meta["config"])
        vocab = Vocabulary(container.meta["vocab"])
    except (KeyError, TypeError) as e:
        raise CorruptCheckpointError(f"{path}: incomplete metadata ({e})") from e
    if len(vocab) != cfg.vocab_size:
        raise CorruptCheckpointError(f"{path}: vocabulary of {len(vocab)} tokens, config says {cfg.vocab_size}")
    encoders = DualEncoder(cfg, vocab)
    _load_parameters(encoders, container, path)
    encoders.freeze()
    return encoders


# ==============================================
# Projection module
# ==============================================

def save_projection(path: str, phi: ProjectionModule) -> None:
    write_container(path, "projection", {"config": phi.cfg.to_dict()},
                    [(n, p.data) for n, p in phi.named_parameters()])
    logger.info(f"Saved projection checkpoint to {path}")


def load_projection(path: str) -> ProjectionModule:
    container = read_container(path)
    if container.kind != "projection":
        raise CorruptCheckpointError(f"{path}: expected a projection checkpoint, found '{container.kind}'")
    phi = ProjectionModule(ProjectionConfig.from_dict(container.meta.get("config", {})))
    _load_parameters(phi, container, path)
    return phi


# ==============================================
# Digests
# ==============================================

def parameter_digest(module: Module) -> str:
    """sha256 over every parameter's name and float64 bytes"""
    digest = hashlib.sha256()
    for name, param in module.named_parameters():
        digest.update(name.encode("utf-8"))
        digest.update(np.ascontiguousarray(param.data, dtype="<f8").tobytes())
    return digest.hexdigest()


def file_digest(path: str) -> str:
    with open(path, "rb") as fh:
        return hashlib.sha256(fh.read()).hexdigest()
