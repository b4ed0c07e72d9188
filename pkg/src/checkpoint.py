"""
Binary checkpoint format (all integers little-endian):

    magic        4 bytes  b"FNCK"
    version      u32
    config       u32 length + UTF-8 canonical config text
    counters     u64 epoch, u64 step, u64 cursor, u64 adam step
    tensors      u32 count, then per tensor:
                   u16 name length + UTF-8 name
                   u8 rank, rank x u64 extents
                   u8 element size (4 or 8)
                   raw little-endian IEEE floats, row-major

Tensors are the model parameters followed by the Adam moments `m.<name>` and
`v.<name>`. Nothing may follow the last tensor.
"""
from __future__ import annotations

import math
import os
import struct
from dataclasses import dataclass, field
from typing import Dict, List, Tuple

import numpy as np

from .errors import CheckpointFormatError
from .log import get_logger
from .model import FusionNetParams
from .run_config import TrainConfig, dump_config, parse_config
from .tensor import AdamState, Tensor

log = get_logger("checkpoint")

MAGIC = b"FNCK"
FORMAT_VERSION = 1

_HEADER = struct.Struct("<4sI")
_COUNTERS = struct.Struct("<QQQQ")
_ELEMENT = {4: np.dtype("<f4"), 8: np.dtype("<f8")}
_NATIVE = {4: np.float32, 8: np.float64}


@dataclass
class Checkpoint:
    config: TrainConfig
    params: FusionNetParams
    adam: AdamState = field(default_factory=AdamState)
    epoch: int = 0  # epochs fully completed
    step: int = 0  # optimizer steps taken so far
    cursor: int = 0  # position inside the current epoch's order
    version: int = FORMAT_VERSION

    @property
    def rng_state(self) -> Tuple[int, int, int]:
        """(seed, epoch, cursor): enough to regenerate the data order from here on."""
        return self.config.seed, self.epoch, self.cursor


def _tensor_record(name: str, arr: np.ndarray) -> bytes:
    arr = np.asarray(arr)
    size = arr.dtype.itemsize
    if size not in _ELEMENT:
        raise CheckpointFormatError(f"{name}: cannot store dtype {arr.dtype}")
    encoded = name.encode("utf-8")
    parts = [
        struct.pack("<H", len(encoded)),
        encoded,
        struct.pack("<B", arr.ndim),
        struct.pack(f"<{arr.ndim}Q", *arr.shape),
        struct.pack("<B", size),
        np.ascontiguousarray(arr, dtype=_ELEMENT[size]).tobytes(),
    ]
    return b"".join(parts)


def encode_checkpoint(ckpt: Checkpoint) -> bytes:
    config_text = dump_config(ckpt.config, include_paths=False).encode("utf-8")
    named = ckpt.params.named_parameters()
    records: List[bytes] = [_tensor_record(name, t.data) for name, t in named.items()]
    for prefix, moments in (("m", ckpt.adam.m), ("v", ckpt.adam.v)):
        for name in named:
            if name in moments:
                records.append(_tensor_record(f"{prefix}.{name}", moments[name]))
    return b"".join(
        [
            _HEADER.pack(MAGIC, ckpt.version),
            struct.pack("<I", len(config_text)),
            config_text,
            _COUNTERS.pack(ckpt.epoch, ckpt.step, ckpt.cursor, ckpt.adam.step),
            struct.pack("<I", len(records)),
            *records,
        ]
    )


def save_checkpoint(ckpt: Checkpoint, path: str) -> None:
    data = encode_checkpoint(ckpt)
    parent = os.path.dirname(path)
    if parent:
        os.makedirs(parent, exist_ok=True)
    tmp = f"{path}.tmp"
    with open(tmp, "wb") as f:
        f.write(data)
    os.replace(tmp, path)
    log.info("Saved checkpoint %s (step %d, %d bytes)", path, ckpt.step, len(data))


class _Reader:
    def __init__(self, data: bytes, source: str):
        self.data = data
        self.pos = 0
        self.source = source

    def fail(self, what: str, at: int | None = None) -> CheckpointFormatError:
        return CheckpointFormatError(f"{self.source}: {what} at byte offset {self.pos if at is None else at}")

    def take(self, n: int, what: str) -> bytes:
        if self.pos + n > len(self.data):
            raise self.fail(f"truncated {what} (need {n} bytes, {len(self.data) - self.pos} left)")
        chunk = self.data[self.pos : self.pos + n]
        self.pos += n
        return chunk

    def unpack(self, fmt: str | struct.Struct, what: str) -> tuple:
        s = fmt if isinstance(fmt, struct.Struct) else struct.Struct(fmt)
        return s.unpack(self.take(s.size, what))


def decode_checkpoint(data: bytes, source: str = "<bytes>") -> Checkpoint:
    r = _Reader(data, source)
    magic, version = r.unpack(_HEADER, "header")
    if magic != MAGIC:
        raise r.fail(f"bad magic {magic!r}", at=0)
    if version != FORMAT_VERSION:
        raise r.fail(f"unsupported version {version} (expected {FORMAT_VERSION})", at=4)

    (config_len,) = r.unpack("<I", "config length")
    config_at = r.pos
    try:
        config_text = r.take(config_len, "config").decode("utf-8")
        config = parse_config(config_text, source=f"{source} config")
    except (UnicodeDecodeError, ValueError) as e:
        if isinstance(e, CheckpointFormatError):
            raise
        raise r.fail(f"invalid config block ({e})", at=config_at) from e

    epoch, step, cursor, adam_step = r.unpack(_COUNTERS, "counters")
    (count,) = r.unpack("<I", "tensor count")
    tensors: Dict[str, np.ndarray] = {}
    for _ in range(count):
        at = r.pos
        (name_len,) = r.unpack("<H", "tensor name length")
        try:
            name = r.take(name_len, "tensor name").decode("utf-8")
        except UnicodeDecodeError as e:
            raise r.fail("tensor name is not UTF-8", at=at) from e
        if name in tensors:
            raise r.fail(f"duplicate tensor {name!r}", at=at)
        (rank,) = r.unpack("<B", f"{name} rank")
        shape = r.unpack(f"<{rank}Q", f"{name} extents") if rank else ()
        (size,) = r.unpack("<B", f"{name} element size")
        if size not in _ELEMENT:
            raise r.fail(f"{name}: unsupported element size {size}", at=r.pos - 1)
        n = math.prod(shape)
        left = len(r.data) - r.pos
        if n * size > left:
            raise r.fail(f"{name}: extents {shape} need {n * size} data bytes, {left} left")
        raw = r.take(n * size, f"{name} data")
        tensors[name] = np.frombuffer(raw, dtype=_ELEMENT[size]).reshape(shape).astype(_NATIVE[size])
    if r.pos != len(data):
        raise r.fail(f"{len(data) - r.pos} trailing byte(s)")

    params_raw = {k: v for k, v in tensors.items() if not k.startswith(("m.", "v."))}
    try:
        params = FusionNetParams.from_named(
            {k: Tensor(v, requires_grad=True, name=k, dtype=v.dtype) for k, v in params_raw.items()}
        )
    except ValueError as e:
        raise CheckpointFormatError(f"{source}: parameters do not form a model ({e})") from e
    if set(params_raw) != set(params.named_parameters()):
        extra = sorted(set(params_raw) - set(params.named_parameters()))
        raise CheckpointFormatError(f"{source}: unexpected tensor(s) {', '.join(extra)}")

    adam = AdamState(step=adam_step, beta1=config.beta1, beta2=config.beta2, epsilon=config.epsilon)
    for key, arr in tensors.items():
        if key.startswith(("m.", "v.")):
            target = key[2:]
            if target not in params_raw:
                raise CheckpointFormatError(f"{source}: moment {key} has no parameter")
            if arr.shape != params_raw[target].shape:
                raise CheckpointFormatError(f"{source}: moment {key} shape {arr.shape} != {params_raw[target].shape}")
            (adam.m if key[0] == "m" else adam.v)[target] = arr
    return Checkpoint(config, params, adam, epoch, step, cursor, version)


def load_checkpoint(path: str) -> Checkpoint:
    try:
        with open(path, "rb") as f:
            data = f.read()
    except OSError as e:
        raise CheckpointFormatError(f"{path}: cannot read checkpoint ({e.strerror or e})") from e
    ckpt = decode_checkpoint(data, source=path)
    log.info("Loaded checkpoint %s (epoch %d, step %d)", path, ckpt.epoch, ckpt.step)
    return ckpt
