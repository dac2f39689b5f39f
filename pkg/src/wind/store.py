"""On-disk formats: binary latent tensors and the append-only generation log."""

from __future__ import annotations

import json
import os
import struct
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Iterable

import numpy as np

TENSOR_MAGIC = b"WNDT"
TENSOR_VERSION = 1
DTYPE_F32 = 1
_TENSOR_HEADER = struct.Struct("<4sHHIII")


class TensorFormatError(ValueError):
    """A tensor file is malformed."""


def tensor_to_bytes(x: np.ndarray) -> bytes:
    x = np.asarray(x)
    if x.ndim != 3:
        raise ValueError(f"expected a (C, H, W) tensor, got shape {x.shape}")
    if not np.all(np.isfinite(x)):
        raise ValueError("tensor contains non-finite values")
    return _TENSOR_HEADER.pack(TENSOR_MAGIC, TENSOR_VERSION, DTYPE_F32, *x.shape) + x.astype("<f4").tobytes()


def tensor_from_bytes(data: bytes) -> np.ndarray:
    if len(data) < _TENSOR_HEADER.size:
        raise TensorFormatError("file too short for a tensor header")
    magic, version, dtype, c, h, w = _TENSOR_HEADER.unpack_from(data)
    if magic != TENSOR_MAGIC:
        raise TensorFormatError("bad magic, not a tensor file")
    if version != TENSOR_VERSION:
        raise TensorFormatError(f"unsupported tensor version {version}")
    if dtype != DTYPE_F32:
        raise TensorFormatError(f"unsupported dtype tag {dtype}")
    payload = data[_TENSOR_HEADER.size:]
    if len(payload) != 4 * c * h * w:
        raise TensorFormatError("payload size does not match the header dims")
    x = np.frombuffer(payload, dtype="<f4").reshape(c, h, w).astype(np.float32)
    if not np.all(np.isfinite(x)):
        raise TensorFormatError("tensor contains non-finite values")
    return x


def write_tensor(path, x: np.ndarray) -> None:
    path = Path(path)
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_bytes(tensor_to_bytes(x))
    tmp.replace(path)


def read_tensor(path) -> np.ndarray:
    return tensor_from_bytes(Path(path).read_bytes())


@dataclass
class GenerationRecord:
    """One generation, as kept in the log. Only seeds and hashes, never noises."""

    timestamp: float
    seq: int
    index: int
    group: int
    nonce: int
    config_fingerprint: str
    prompt_hash: str = ""
    path: str = ""
    attack: list[str] = field(default_factory=list)

    def to_json(self) -> str:
        return json.dumps(asdict(self), sort_keys=True, separators=(",", ":"))

    @classmethod
    def from_dict(cls, d: dict) -> "GenerationRecord":
        return cls(**{k: d[k] for k in cls.__dataclass_fields__ if k in d})


@dataclass
class LogReadResult:
    records: list[GenerationRecord]
    skipped_tail: bool = False
    skipped_lines: int = 0


class GenerationLog:
    """Single-writer JSON Lines log.

    Each record is written with one ``write`` on an ``O_APPEND`` descriptor
    and fsynced. A reader only trusts newline-terminated lines that parse, so
    a torn final write is skipped and reported rather than misread.
    """

    def __init__(self, path):
        self.path = Path(path)

    def read(self) -> LogReadResult:
        if not self.path.exists():
            return LogReadResult([])
        data = self.path.read_bytes()
        lines = data.split(b"\n")
        tail = lines.pop()  # empty when the file ends with a newline
        records, bad = [], 0
        for line in lines:
            if not line.strip():
                continue
            try:
                records.append(GenerationRecord.from_dict(json.loads(line)))
            except (ValueError, TypeError, KeyError):
                bad += 1
        return LogReadResult(records, skipped_tail=bool(tail.strip()), skipped_lines=bad)

    def _repair_tail(self) -> None:
        """Cut a torn final line so the next append starts on a clean boundary."""
        if not self.path.exists():
            return
        data = self.path.read_bytes()
        if data and not data.endswith(b"\n"):
            keep = data.rfind(b"\n") + 1
            with open(self.path, "r+b") as fh:
                fh.truncate(keep)
                fh.flush()
                os.fsync(fh.fileno())

    def append(self, records: Iterable[GenerationRecord]) -> list[GenerationRecord]:
        """Append records, assigning sequence numbers after the current last one."""
        self._repair_tail()
        existing = self.read().records
        seq = existing[-1].seq + 1 if existing else 0
        written = []
        self.path.parent.mkdir(parents=True, exist_ok=True)
        fd = os.open(self.path, os.O_WRONLY | os.O_APPEND | os.O_CREAT, 0o644)
        try:
            for rec in records:
                rec.seq = seq
                seq += 1
                os.write(fd, (rec.to_json() + "\n").encode())
                os.fsync(fd)
                written.append(rec)
        finally:
            os.close(fd)
        return written

    def query(
        self,
        index: int | None = None,
        start: float | None = None,
        end: float | None = None,
    ) -> list[GenerationRecord]:
        """Records matching an index and/or a half-open time range ``[start, end)``."""
        out = []
        for rec in self.read().records:
            if index is not None and rec.index != index:
                continue
            if start is not None and rec.timestamp < start:
                continue
            if end is not None and rec.timestamp >= end:
                continue
            out.append(rec)
        return sorted(out, key=lambda r: (r.timestamp, r.seq))


def log_query(log_path, index: int | None = None, start: float | None = None, end: float | None = None):
    return GenerationLog(log_path).query(index, start, end)


def now() -> float:
    return time.time()
