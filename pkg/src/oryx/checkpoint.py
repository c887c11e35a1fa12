"""Binary checkpoint format: fixed little-endian layout with a magic tag,
format version, config digest, and a tensor directory followed by raw
payloads. Round-trips are byte-identical; any structural damage (bad magic,
version, digest, or truncation) rejects the whole file before any tensor is
returned."""

from __future__ import annotations

import dataclasses
import hashlib
import json
import struct

import numpy as np

MAGIC = b"ORYX"
VERSION = 1

_DTYPE_CODES = {"f32": 0, "f64": 1}
_DTYPE_NP = {0: np.dtype("<f4"), 1: np.dtype("<f8")}


class CheckpointError(RuntimeError):
    """Malformed or mismatched checkpoint file."""


def config_digest(config) -> bytes:
    """sha256 over the canonical JSON form of a (dataclass) config."""
    d = dataclasses.asdict(config)
    blob = json.dumps(d, sort_keys=True, separators=(",", ":")).encode()
    return hashlib.sha256(blob).digest()


def save_checkpoint(named_tensors, path, digest: bytes, precision: str) -> None:
    """Write (name, array) pairs in the given order. ``digest`` identifies
    the producing configuration (32 bytes)."""
    if len(digest) != 32:
        raise ValueError("digest must be 32 bytes")
    if precision not in _DTYPE_CODES:
        raise ValueError(f"unknown precision {precision!r}")
    items = []
    for name, a in named_tensors:
        arr = np.asarray(a)
        if arr.ndim and not arr.flags["C_CONTIGUOUS"]:
            arr = np.ascontiguousarray(arr)  # 0-d stays 0-d (always contiguous)
        items.append((name, arr))
    directory = bytearray()
    payload = bytearray()
    for name, arr in items:
        if arr.dtype == np.float32:
            code, arr = 0, arr.astype("<f4", copy=False)
        elif arr.dtype == np.float64:
            code, arr = 1, arr.astype("<f8", copy=False)
        else:
            raise ValueError(f"unsupported dtype {arr.dtype} for {name!r}")
        raw = arr.tobytes()
        nb = name.encode()
        directory += struct.pack("<H", len(nb)) + nb
        directory += struct.pack("<BB", code, arr.ndim)
        directory += struct.pack(f"<{arr.ndim}I", *arr.shape)
        directory += struct.pack("<QQ", len(payload), len(raw))
        payload += raw
    header = MAGIC + struct.pack("<I", VERSION) + digest
    header += struct.pack("<B", _DTYPE_CODES[precision])
    header += struct.pack("<I", len(items))
    with open(path, "wb") as f:
        f.write(header)
        f.write(directory)
        f.write(payload)


class _Reader:
    def __init__(self, blob: bytes):
        self.blob = blob
        self.off = 0

    def take(self, n: int) -> bytes:
        if self.off + n > len(self.blob):
            raise CheckpointError("truncated checkpoint")
        out = self.blob[self.off : self.off + n]
        self.off += n
        return out

    def unpack(self, fmt: str):
        return struct.unpack(fmt, self.take(struct.calcsize(fmt)))


def load_checkpoint(path, expected_digest: bytes | None = None):
    """Read a checkpoint; returns (tensors dict, header dict). Raises
    CheckpointError on any format defect or digest mismatch; nothing is
    returned from a damaged file."""
    with open(path, "rb") as f:
        blob = f.read()
    r = _Reader(blob)
    if r.take(4) != MAGIC:
        raise CheckpointError("bad magic: not a checkpoint file")
    (version,) = r.unpack("<I")
    if version != VERSION:
        raise CheckpointError(f"unsupported checkpoint version {version}")
    digest = r.take(32)
    if expected_digest is not None and digest != expected_digest:
        raise CheckpointError("config digest mismatch")
    (prec_code,) = r.unpack("<B")
    if prec_code not in _DTYPE_NP:
        raise CheckpointError(f"unknown precision code {prec_code}")
    (count,) = r.unpack("<I")
    entries = []
    for _ in range(count):
        (name_len,) = r.unpack("<H")
        name = r.take(name_len).decode()
        code, ndim = r.unpack("<BB")
        if code not in _DTYPE_NP:
            raise CheckpointError(f"unknown dtype code {code} for {name!r}")
        shape = r.unpack(f"<{ndim}I")
        offset, nbytes = r.unpack("<QQ")
        entries.append((name, code, shape, offset, nbytes))
    payload = blob[r.off :]
    tensors = {}
    for name, code, shape, offset, nbytes in entries:
        dt = _DTYPE_NP[code]
        expected = int(np.prod(shape, dtype=np.int64)) * dt.itemsize if shape else dt.itemsize
        if nbytes != expected:
            raise CheckpointError(f"size mismatch for {name!r}")
        if offset + nbytes > len(payload):
            raise CheckpointError("truncated checkpoint payload")
        if name in tensors:
            raise CheckpointError(f"duplicate tensor {name!r}")
        tensors[name] = np.frombuffer(
            payload, dtype=dt, count=int(np.prod(shape, dtype=np.int64)) if shape else 1, offset=offset
        ).reshape(shape).copy()
    header = {
        "version": version,
        "digest": digest,
        "precision": "f32" if prec_code == 0 else "f64",
        "n_tensors": count,
    }
    return tensors, header


def save_params(params, config, path) -> None:
    """Checkpoint a model's parameters keyed by the config digest."""
    named = [(name, p.data) for name, p in params.named_parameters()]
    save_checkpoint(named, path, config_digest(config), config.precision)


def load_params(params, config, path) -> None:
    """Load a checkpoint into an existing parameter container in place,
    validating the digest and every shape."""
    tensors, _ = load_checkpoint(path, expected_digest=config_digest(config))
    names = set()
    for name, p in params.named_parameters():
        if name not in tensors:
            raise CheckpointError(f"missing tensor {name!r}")
        arr = tensors[name]
        if tuple(arr.shape) != tuple(p.data.shape):
            raise CheckpointError(f"shape mismatch for {name!r}")
        p.data = arr.astype(p.data.dtype, copy=False)
        names.add(name)
    extra = set(tensors) - names
    if extra:
        raise CheckpointError(f"unexpected tensors: {sorted(extra)}")
