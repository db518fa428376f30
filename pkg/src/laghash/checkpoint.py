"""Binary checkpoints.

Layout (all integers little-endian)::

    b"LAGH"  u16 version
    u32 n    RunConfig JSON (n bytes, UTF-8)
    u64 p    parameters, p float32
    u32 n    TrainState JSON (step, hyperparameters, RNG state)
             Adam first moments, p float32
             Adam second moments, p float32
    32 bytes SHA-256 of everything above
"""

from __future__ import annotations

import hashlib
import json
import struct
from pathlib import Path

import numpy as np

from laghash.config import RunConfig, from_dict
from laghash.errors import CheckpointError, ContractError
from laghash.hashfield import empty_store, ParameterStore
from laghash.optim import TrainState

MAGIC = b"LAGH"
VERSION = 1
_DIGEST = 32
_F32 = np.dtype("<f4")


def _state_header(state: TrainState) -> dict:
    return {
        "step": state.step,
        "lr": state.lr,
        "lr_gaussian": state.lr_gaussian,
        "beta1": state.beta1,
        "beta2": state.beta2,
        "eps": state.eps,
        "seed": state.seed,
        "rng_state": state.rng_state,
    }


def encode_checkpoint(config: RunConfig, params: ParameterStore, state: TrainState) -> bytes:
    if params.values.dtype != np.float32:
        raise ContractError("checkpoints hold float32 parameters; cast before saving")
    n = len(params.values)
    m = state.m if state.m is not None else np.zeros(n, np.float32)
    v = state.v if state.v is not None else np.zeros(n, np.float32)
    if len(m) != n or len(v) != n:
        raise ContractError("optimizer moments do not match the parameter count")
    cfg = config.to_json().encode()
    st = json.dumps(_state_header(state)).encode()
    parts = [
        MAGIC,
        struct.pack("<H", VERSION),
        struct.pack("<I", len(cfg)),
        cfg,
        struct.pack("<Q", n),
        params.values.astype(_F32).tobytes(),
        struct.pack("<I", len(st)),
        st,
        np.asarray(m).astype(_F32).tobytes(),
        np.asarray(v).astype(_F32).tobytes(),
    ]
    body = b"".join(parts)
    return body + hashlib.sha256(body).digest()


def save_checkpoint(path: str | Path, config: RunConfig, params: ParameterStore, state: TrainState) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_bytes(encode_checkpoint(config, params, state))


class _Reader:
    def __init__(self, data: bytes):
        self.data, self.pos = data, 0

    def take(self, n: int) -> bytes:
        if self.pos + n > len(self.data):
            raise CheckpointError("checkpoint ends early")
        out = self.data[self.pos : self.pos + n]
        self.pos += n
        return out

    def unpack(self, fmt: str):
        return struct.unpack(fmt, self.take(struct.calcsize(fmt)))[0]


def decode_checkpoint(data: bytes) -> tuple[RunConfig, ParameterStore, TrainState]:
    if len(data) < 6 or data[:4] != MAGIC:
        raise CheckpointError("not a checkpoint (bad magic)")
    version = struct.unpack("<H", data[4:6])[0]
    if version != VERSION:
        raise CheckpointError(f"unsupported checkpoint version {version} (this build reads version {VERSION})")
    body, digest = data[:-_DIGEST], data[-_DIGEST:]
    if len(data) < 6 + _DIGEST or hashlib.sha256(body).digest() != digest:
        raise CheckpointError("checksum mismatch: checkpoint is truncated or corrupted")
    r = _Reader(body)
    r.take(6)
    config = from_dict(json.loads(r.take(r.unpack("<I")).decode()))
    n = r.unpack("<Q")
    values = np.frombuffer(r.take(4 * n), dtype=_F32).astype(np.float32)
    header = json.loads(r.take(r.unpack("<I")).decode())
    m = np.frombuffer(r.take(4 * n), dtype=_F32).astype(np.float32)
    v = np.frombuffer(r.take(4 * n), dtype=_F32).astype(np.float32)
    if r.pos != len(body):
        raise CheckpointError("trailing bytes after the optimizer state")
    store = empty_store(config.field, np.float32)
    if len(store.values) != n:
        raise CheckpointError(f"parameter count {n} does not match the stored config ({len(store.values)})")
    params = store.with_values(values)
    state = TrainState(m=m, v=v, **header)
    return config, params, state


def load_checkpoint(path: str | Path) -> tuple[RunConfig, ParameterStore, TrainState]:
    path = Path(path)
    if not path.is_file():
        raise CheckpointError(f"checkpoint not found: {path}")
    return decode_checkpoint(path.read_bytes())
