"""Stage checkpoints and their binary container.

Layout (little-endian)::

    magic      8 bytes  b"CLCKPT\\x00\\x01"
    version    u32
    stage_tag  8 bytes  ASCII, NUL padded
    T          u32
    betas      T x f64
    meta_len   u32, then meta_len bytes of JSON (trainable flags, model config)
    n_arrays   u32
    per array: name_len u16, name utf-8, dtype u8 (0=f4, 1=f8), ndim u8,
               shape ndim x u32, row-major data
"""
from __future__ import annotations

import hashlib
import json
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

MAGIC = b"CLCKPT\x00\x01"
VERSION = 1
GROUPS = ("unet", "encoder", "adaptor", "mask_head")
STAGES = ("init", "S1", "S2", "S3", "S4", "S5", "S6")
_DTYPES = {0: np.dtype("<f4"), 1: np.dtype("<f8")}
_CODES = {np.dtype("float32"): 0, np.dtype("float64"): 1}


class CheckpointError(ValueError):
    pass


class BadMagicError(CheckpointError):
    pass


class VersionMismatchError(CheckpointError):
    pass


class TruncatedCheckpointError(CheckpointError):
    pass


def group_of(name: str) -> str:
    group = name.split(".", 1)[0]
    if group not in GROUPS:
        raise CheckpointError(f"parameter {name!r} is outside the known groups {GROUPS}")
    return group


@dataclass
class StageCheckpoint:
    parameters: dict[str, np.ndarray]
    stage_tag: str
    betas: np.ndarray
    trainable_flags: dict[str, bool] = field(default_factory=lambda: {g: False for g in GROUPS})
    model_config: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.stage_tag not in STAGES:
            raise CheckpointError(f"unknown stage tag {self.stage_tag!r}")
        missing = set(GROUPS) - set(self.trainable_flags)
        if missing:
            raise CheckpointError(f"trainable flags missing groups {sorted(missing)}")
        self.betas = np.asarray(self.betas, dtype=np.float64)
        for name in self.parameters:
            group_of(name)

    @property
    def T(self) -> int:
        return int(self.betas.shape[0])

    def group(self, group: str) -> dict[str, np.ndarray]:
        return {k: v for k, v in self.parameters.items() if group_of(k) == group}

    def content_hash(self) -> str:
        return hashlib.sha256(to_bytes(self)).hexdigest()

    def replace(self, **kw) -> "StageCheckpoint":
        d = dict(parameters=self.parameters, stage_tag=self.stage_tag, betas=self.betas,
                 trainable_flags=dict(self.trainable_flags), model_config=dict(self.model_config))
        d.update(kw)
        return StageCheckpoint(**d)


def to_bytes(ckpt: StageCheckpoint) -> bytes:
    out = [MAGIC, struct.pack("<I", VERSION), ckpt.stage_tag.encode("ascii").ljust(8, b"\x00")]
    out.append(struct.pack("<I", ckpt.T))
    out.append(ckpt.betas.astype("<f8").tobytes())
    meta = json.dumps({"trainable_flags": ckpt.trainable_flags, "model_config": ckpt.model_config},
                      sort_keys=True).encode()
    out.append(struct.pack("<I", len(meta)))
    out.append(meta)
    out.append(struct.pack("<I", len(ckpt.parameters)))
    for name, arr in ckpt.parameters.items():
        arr = np.asarray(arr)
        if arr.dtype not in _CODES:
            raise CheckpointError(f"{name}: unsupported dtype {arr.dtype}")
        raw = name.encode()
        out.append(struct.pack("<H", len(raw)) + raw)
        out.append(struct.pack("<BB", _CODES[arr.dtype], arr.ndim))
        out.append(struct.pack(f"<{arr.ndim}I", *arr.shape))
        out.append(np.ascontiguousarray(arr, dtype=_DTYPES[_CODES[arr.dtype]]).tobytes())
    return b"".join(out)


class _Reader:
    def __init__(self, data: bytes):
        self.data = data
        self.pos = 0

    def take(self, n: int) -> bytes:
        if self.pos + n > len(self.data):
            raise TruncatedCheckpointError(f"truncated payload: need {n} bytes at offset {self.pos}, file has {len(self.data)}")
        chunk = self.data[self.pos:self.pos + n]
        self.pos += n
        return chunk

    def unpack(self, fmt: str):
        return struct.unpack(fmt, self.take(struct.calcsize(fmt)))


def from_bytes(data: bytes) -> StageCheckpoint:
    r = _Reader(data)
    if len(data) >= len(MAGIC) and data[: len(MAGIC)] != MAGIC:
        raise BadMagicError("not a checkpoint file (bad magic)")
    r.take(len(MAGIC))
    (version,) = r.unpack("<I")
    if version != VERSION:
        raise VersionMismatchError(f"checkpoint format version {version}, expected {VERSION}")
    tag = r.take(8).rstrip(b"\x00").decode("ascii")
    (T,) = r.unpack("<I")
    betas = np.frombuffer(r.take(8 * T), dtype="<f8").copy()
    (meta_len,) = r.unpack("<I")
    meta = json.loads(r.take(meta_len))
    (n,) = r.unpack("<I")
    params: dict[str, np.ndarray] = {}
    for _ in range(n):
        (name_len,) = r.unpack("<H")
        name = r.take(name_len).decode()
        code, ndim = r.unpack("<BB")
        if code not in _DTYPES:
            raise CheckpointError(f"{name}: unknown dtype code {code}")
        shape = r.unpack(f"<{ndim}I")
        dt = _DTYPES[code]
        count = int(np.prod(shape, dtype=np.int64))
        params[name] = np.frombuffer(r.take(count * dt.itemsize), dtype=dt).reshape(shape).copy()
    if r.pos != len(data):
        raise CheckpointError(f"{len(data) - r.pos} trailing bytes after last array")
    return StageCheckpoint(params, tag, betas, meta["trainable_flags"], meta["model_config"])


def save_checkpoint(ckpt: StageCheckpoint, path: Path | str) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_bytes(to_bytes(ckpt))
    return path


def load_checkpoint(path: Path | str) -> StageCheckpoint:
    return from_bytes(Path(path).read_bytes())
