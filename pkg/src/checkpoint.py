# src/checkpoint.py
"""
Binary checkpoint format (little-endian):

    b"MSHR"  u32 version  u64 header length  header JSON {"config", "meta"}
    then per tensor: u32 name length, name (utf-8), u8 dtype tag (1 = f32),
                     u8 ndim, u64 dims..., f32 payload

Writes go to a temporary file in the target directory followed by an atomic
rename. Loading reads the whole file, audits it against the embedded config and
only then builds the ParamSet.
"""

import json
import logging
import os
import tempfile
from pathlib import Path

import numpy as np

from src.errors import CheckpointError, ConfigError
from src.model import ModelConfig, ParamSet, param_shapes

logger = logging.getLogger(__name__)

MAGIC = b"MSHR"
VERSION = 1
DTYPE_TAGS = {1: np.dtype("<f4")}
F32_TAG = 1


def _u(value: int, code: str) -> bytes:
    return np.array([value], dtype=code).tobytes()


def encode_checkpoint(params: ParamSet) -> bytes:
    header = json.dumps({"config": params.config.to_dict(), "meta": params.meta},
                        sort_keys=True).encode("utf-8")
    chunks = [MAGIC, _u(VERSION, "<u4"), _u(len(header), "<u8"), header]
    for name, tensor in params.tensors.items():
        if tensor.dtype != np.float32:
            raise CheckpointError(f"tensor {name} is {tensor.dtype}; checkpoints store float32 only")
        encoded = name.encode("utf-8")
        chunks += [_u(len(encoded), "<u4"), encoded, _u(F32_TAG, "u1"), _u(tensor.ndim, "u1"),
                   np.asarray(tensor.shape, dtype="<u8").tobytes(),
                   np.ascontiguousarray(tensor, dtype="<f4").tobytes()]
    return b"".join(chunks)


def save_checkpoint(params: ParamSet, path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    payload = encode_checkpoint(params)
    fd, tmp = tempfile.mkstemp(prefix=path.name + ".", suffix=".tmp", dir=path.parent)
    try:
        with os.fdopen(fd, "wb") as f:
            f.write(payload)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise
    logger.info("Saved checkpoint %s (%d tensors, %d bytes)", path, len(params.tensors), len(payload))
    return path


class _Reader:
    def __init__(self, data: bytes):
        self.data = data
        self.pos = 0

    def take(self, n: int, what: str) -> bytes:
        if self.pos + n > len(self.data):
            raise CheckpointError(f"truncated checkpoint while reading {what}")
        chunk = self.data[self.pos:self.pos + n]
        self.pos += n
        return chunk

    def uint(self, code: str, what: str) -> int:
        size = np.dtype(code).itemsize
        return int(np.frombuffer(self.take(size, what), dtype=code)[0])


def decode_checkpoint(data: bytes) -> ParamSet:
    reader = _Reader(data)
    if reader.take(len(MAGIC), "magic") != MAGIC:
        raise CheckpointError("bad magic: not an MSHR checkpoint")
    version = reader.uint("<u4", "version")
    if version != VERSION:
        raise CheckpointError(f"unsupported checkpoint version {version} (expected {VERSION})")
    header_len = reader.uint("<u8", "header length")
    try:
        header = json.loads(reader.take(header_len, "header").decode("utf-8"))
        config = ModelConfig.from_dict(header["config"])
    except (ValueError, KeyError, TypeError, ConfigError) as exc:
        raise CheckpointError(f"corrupt checkpoint header: {exc}") from exc

    tensors = {}
    while reader.pos < len(data):
        name_len = reader.uint("<u4", "name length")
        try:
            name = reader.take(name_len, "name").decode("utf-8")
        except UnicodeDecodeError as exc:
            raise CheckpointError(f"corrupt tensor name: {exc}") from exc
        tag = reader.uint("u1", f"{name} dtype")
        if tag not in DTYPE_TAGS:
            raise CheckpointError(f"tensor {name} has unknown dtype tag {tag}")
        ndim = reader.uint("u1", f"{name} ndim")
        shape = tuple(int(d) for d in np.frombuffer(reader.take(8 * ndim, f"{name} dims"), dtype="<u8"))
        count = int(np.prod(shape)) if shape else 1
        dtype = DTYPE_TAGS[tag]
        raw = reader.take(count * dtype.itemsize, f"{name} payload")
        if name in tensors:
            raise CheckpointError(f"duplicate tensor {name}")
        tensors[name] = np.frombuffer(raw, dtype=dtype).astype(np.float32).reshape(shape)

    expected = param_shapes(config)
    missing = [n for n in expected if n not in tensors]
    extra = [n for n in tensors if n not in expected]
    wrong = [f"{n} {tensors[n].shape} != {s}" for n, s in expected.items()
             if n in tensors and tensors[n].shape != s]
    if missing or extra or wrong:
        raise CheckpointError(f"checkpoint audit failed: missing={missing} extra={extra} "
                              f"shape={wrong}")
    ordered = {name: tensors[name] for name in expected}
    return ParamSet(config, ordered, dict(header.get("meta") or {}))


def load_checkpoint(path) -> ParamSet:
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(f"checkpoint not found: {path}")
    params = decode_checkpoint(path.read_bytes())
    logger.info("Loaded checkpoint %s (depth %d, hidden %d)", path, params.config.depth,
                params.config.hidden)
    return params
