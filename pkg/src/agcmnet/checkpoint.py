"""Framed binary checkpoints with bitwise float64 round-trip.

Layout (all integers little-endian)::

    magic "AGCM" | version u32 | config-hash 8 bytes | param-count u32
    per param: path-len u16 | path utf-8 | rank u8 | dims u32 * rank | f64 values
    optimizer: present u8 | t u64 | beta1 f64 | beta2 f64 | eps f64
               | per param (same order): m f64 values, v f64 values
    rng: length u32 | JSON bit-generator state (length 0 = absent)
    epoch u32
    crc32 u32 over every preceding byte
"""

from __future__ import annotations

import json
import struct
import zlib
from dataclasses import dataclass
from typing import Optional

import numpy as np

from .errors import CheckpointError
from .nn import ParameterStore
from .optim import AdamState

MAGIC = b"AGCM"
VERSION = 1


@dataclass
class Checkpoint:
    config_hash: bytes
    params: dict[str, np.ndarray]
    optimizer: Optional[AdamState] = None
    rng_state: Optional[dict] = None
    epoch: int = 0


def encode(ckpt: Checkpoint) -> bytes:
    if len(ckpt.config_hash) != 8:
        raise CheckpointError("config hash must be 8 bytes")
    if not ckpt.params:
        raise CheckpointError("refusing to save an empty parameter set")
    paths = sorted(ckpt.params)
    out = [MAGIC, struct.pack("<I", VERSION), ckpt.config_hash, struct.pack("<I", len(paths))]
    for path in paths:
        arr = np.ascontiguousarray(ckpt.params[path], dtype="<f8")
        name = path.encode()
        out.append(struct.pack("<H", len(name)) + name + struct.pack("<B", arr.ndim))
        out.append(struct.pack(f"<{arr.ndim}I", *arr.shape))
        out.append(arr.tobytes())
    opt = ckpt.optimizer
    if opt is None:
        out.append(b"\x00")
    else:
        out.append(b"\x01" + struct.pack("<Qddd", opt.t, opt.beta1, opt.beta2, opt.eps))
        for path in paths:
            shape = np.shape(ckpt.params[path])
            for moments in (opt.m, opt.v):
                arr = moments.get(path)
                arr = np.zeros(shape) if arr is None else arr
                out.append(np.ascontiguousarray(arr, dtype="<f8").tobytes())
    rng = b"" if ckpt.rng_state is None else json.dumps(ckpt.rng_state, sort_keys=True).encode()
    out.append(struct.pack("<I", len(rng)) + rng)
    out.append(struct.pack("<I", ckpt.epoch))
    blob = b"".join(out)
    return blob + struct.pack("<I", zlib.crc32(blob))


class _Reader:
    def __init__(self, buf: bytes):
        self.buf = buf
        self.pos = 0

    def take(self, n: int) -> bytes:
        if n < 0 or self.pos + n > len(self.buf):
            raise CheckpointError(f"truncated checkpoint: need {n} bytes at offset {self.pos}")
        chunk = self.buf[self.pos:self.pos + n]
        self.pos += n
        return chunk

    def unpack(self, fmt: str):
        return struct.unpack(fmt, self.take(struct.calcsize(fmt)))

    def floats(self, shape) -> np.ndarray:
        n = int(np.prod(shape)) if shape else 1
        return np.frombuffer(self.take(8 * n), dtype="<f8").astype(np.float64).reshape(shape)


def decode(buf: bytes, expected_hash: Optional[bytes] = None) -> Checkpoint:
    if len(buf) < 4 or buf[:4] != MAGIC:
        raise CheckpointError("not an AGCM checkpoint (bad magic)")
    if len(buf) < 8:
        raise CheckpointError("truncated checkpoint header")
    (crc,) = struct.unpack("<I", buf[-4:])
    if zlib.crc32(buf[:-4]) != crc:
        raise CheckpointError("checksum mismatch: checkpoint is corrupted or truncated")
    r = _Reader(buf[:-4])
    r.take(4)
    (version,) = r.unpack("<I")
    if version != VERSION:
        raise CheckpointError(f"unsupported checkpoint version {version}")
    config_hash = r.take(8)
    if expected_hash is not None and config_hash != expected_hash:
        raise CheckpointError(
            f"config hash mismatch: checkpoint {config_hash.hex()} vs model {expected_hash.hex()}")
    (count,) = r.unpack("<I")
    params, shapes = {}, []
    for _ in range(count):
        (n,) = r.unpack("<H")
        path = r.take(n).decode()
        (rank,) = r.unpack("<B")
        shape = r.unpack(f"<{rank}I") if rank else ()
        params[path] = r.floats(shape)
        shapes.append((path, shape))
    (present,) = r.unpack("<B")
    opt = None
    if present:
        t, b1, b2, eps = r.unpack("<Qddd")
        opt = AdamState(beta1=b1, beta2=b2, eps=eps, t=t)
        for path, shape in shapes:
            opt.m[path] = r.floats(shape)
            opt.v[path] = r.floats(shape)
    (n_rng,) = r.unpack("<I")
    rng_state = json.loads(r.take(n_rng)) if n_rng else None
    (epoch,) = r.unpack("<I")
    if r.pos != len(r.buf):
        raise CheckpointError(f"{len(r.buf) - r.pos} unexpected trailing bytes")
    return Checkpoint(config_hash, params, opt, rng_state, epoch)


def save_checkpoint(path, store: ParameterStore, config_hash: bytes, optimizer: Optional[AdamState] = None,
                    rng_state: Optional[dict] = None, epoch: int = 0) -> None:
    params = {p: np.array(store[p].data) for p in store}
    blob = encode(Checkpoint(config_hash, params, optimizer, rng_state, epoch))
    with open(path, "wb") as fh:
        fh.write(blob)


def load_checkpoint(path, store: Optional[ParameterStore] = None,
                    expected_hash: Optional[bytes] = None) -> Checkpoint:
    """Decode ``path``; when ``store`` is given, copy parameters into it.

    The whole file is validated before ``store`` is touched.
    """
    with open(path, "rb") as fh:
        ckpt = decode(fh.read(), expected_hash)
    if store is not None:
        declared = set(store)
        if declared != set(ckpt.params):
            missing = sorted(declared - set(ckpt.params))
            extra = sorted(set(ckpt.params) - declared)
            raise CheckpointError(f"parameter mismatch: missing {missing}, unexpected {extra}")
        for p in sorted(declared):
            if store.declaration(p).shape != ckpt.params[p].shape:
                raise CheckpointError(f"{p}: shape {ckpt.params[p].shape} != declared {store.declaration(p).shape}")
        for p in sorted(declared):
            store[p] = ckpt.params[p]
    return ckpt
