"""Reproducible codebook of Gaussian initial noises.

Every noise is regenerated on demand from ``SHA-256(LE64(i) || salt)``; nothing
about the codebook is ever materialised on disk.
"""

from __future__ import annotations

import hashlib
import struct
from dataclasses import dataclass
from typing import Iterator

import numpy as np
from cryptography.hazmat.primitives.ciphers import Cipher, algorithms

MIN_SALT_BYTES = 32
DEFAULT_SHAPE = (4, 64, 64)

_TWO_PI = 2.0 * np.pi
_U53 = 2.0 ** -53

# Alias for documentation: a real (C, H, W) array.
LatentTensor = np.ndarray


@dataclass(frozen=True)
class CodebookSpec:
    """N noises split into M groups, keyed by a secret salt."""

    n: int
    m: int
    salt: bytes
    shape: tuple[int, int, int] = DEFAULT_SHAPE

    def __post_init__(self):
        if self.n < 1:
            raise ValueError(f"n must be positive, got {self.n}")
        if not 1 <= self.m <= self.n:
            raise ValueError(f"m must satisfy 1 <= m <= n, got m={self.m}, n={self.n}")
        if len(self.salt) < MIN_SALT_BYTES:
            raise ValueError(f"salt must be at least {MIN_SALT_BYTES} bytes, got {len(self.salt)}")
        shape = tuple(int(s) for s in self.shape)
        if len(shape) != 3 or min(shape) < 1:
            raise ValueError(f"shape must be three positive integers, got {self.shape}")
        object.__setattr__(self, "shape", shape)
        object.__setattr__(self, "salt", bytes(self.salt))

    @property
    def dim(self) -> int:
        c, h, w = self.shape
        return c * h * w

    @property
    def fingerprint(self) -> bytes:
        """32-byte digest identifying (n, m, shape, salt)."""
        h = hashlib.sha256(b"wind-codebook-v1")
        h.update(struct.pack("<QQIII", self.n, self.m, *self.shape))
        h.update(hashlib.sha256(self.salt).digest())
        return h.digest()

    def group_indices(self, g: int) -> range:
        if not 0 <= g < self.m:
            raise ValueError(f"group {g} out of range [0, {self.m})")
        return range(g, self.n, self.m)

    def group_size(self, g: int) -> int:
        return len(self.group_indices(g))


def derive_seed(i: int, salt: bytes, n: int | None = None) -> bytes:
    """Return ``SHA-256(LE64(i) || salt)``.

    ``n`` is optional; when given, ``i`` is checked against ``[0, n)``.
    """
    if i < 0 or (n is not None and i >= n):
        raise IndexError(f"index {i} out of range [0, {n})")
    if len(salt) < MIN_SALT_BYTES:
        raise ValueError(f"salt must be at least {MIN_SALT_BYTES} bytes, got {len(salt)}")
    return hashlib.sha256(struct.pack("<Q", i) + salt).digest()


def chacha20_keystream(key: bytes, nbytes: int) -> bytes:
    """ChaCha20 keystream, zero nonce, block counter starting at 0."""
    # cryptography takes a 16-byte nonce: LE32 counter followed by the 96-bit nonce.
    enc = Cipher(algorithms.ChaCha20(key, b"\x00" * 16), mode=None).encryptor()
    return enc.update(b"\x00" * nbytes)


def sample_noise(seed: bytes, shape: tuple[int, int, int] = DEFAULT_SHAPE) -> LatentTensor:
    """Deterministic standard-normal tensor from a 32-byte seed.

    ChaCha20 keystream -> LE u64 words -> u = ((w >> 11) + 1) * 2^-53 -> Box-Muller
    on consecutive pairs, filled in C order. A trailing unused sample is dropped.
    """
    if len(seed) != 32:
        raise ValueError(f"seed must be 32 bytes, got {len(seed)}")
    count = int(np.prod(shape))
    if count < 1:
        raise ValueError(f"invalid shape {shape}")
    pairs = (count + 1) // 2
    words = np.frombuffer(chacha20_keystream(seed, 16 * pairs), dtype="<u8")
    u = ((words >> np.uint64(11)) + np.uint64(1)).astype(np.float64) * _U53
    radius = np.sqrt(-2.0 * np.log(u[0::2]))
    theta = _TWO_PI * u[1::2]
    out = np.empty(2 * pairs)
    out[0::2] = radius * np.cos(theta)
    out[1::2] = radius * np.sin(theta)
    return out[:count].reshape(shape)


def noise_for_index(spec: CodebookSpec, i: int) -> LatentTensor:
    return sample_noise(derive_seed(i, spec.salt, spec.n), spec.shape)


def group_of(i: int, m: int) -> int:
    if m < 1:
        raise ValueError("m must be >= 1")
    return i % m


def stream_group(
    spec: CodebookSpec, g: int, shard: int = 0, num_shards: int = 1
) -> Iterator[tuple[int, LatentTensor]]:
    """Yield ``(i, z_i)`` for every index in group ``g``, ascending.

    With ``num_shards > 1`` only every ``num_shards``-th member starting at
    ``shard`` is produced; the union over shards is the whole group.
    """
    if not 0 <= shard < num_shards:
        raise ValueError(f"shard {shard} out of range [0, {num_shards})")
    for i in spec.group_indices(g)[shard::num_shards]:
        yield i, noise_for_index(spec, i)


def noise_batches(
    spec: CodebookSpec, indices, batch: int = 256, dtype=np.float32
) -> Iterator[tuple[np.ndarray, np.ndarray]]:
    """Yield ``(idx, Z)`` where ``Z[k]`` is the flattened noise of ``idx[k]``.

    Memory is bounded by ``batch * dim`` regardless of how many indices are given.
    """
    indices = np.asarray(indices, dtype=np.int64)
    for start in range(0, len(indices), batch):
        idx = indices[start:start + batch]
        out = np.empty((len(idx), spec.dim), dtype=dtype)
        for row, i in enumerate(idx):
            out[row] = noise_for_index(spec, int(i)).ravel()
        yield idx, out


class NoiseSource:
    """Streams codebook rows as float32 matrices; optionally keeps them in memory.

    With ``cache_bytes`` > 0, rows are materialised once and reused until the
    cap would be exceeded; beyond that the source falls back to streaming.
    """

    def __init__(self, spec: CodebookSpec, cache_bytes: int = 0):
        self.spec = spec
        self.cache_bytes = cache_bytes
        self._full: np.ndarray | None = None
        self.generated = 0

    def _materialise(self) -> np.ndarray | None:
        need = self.spec.n * self.spec.dim * 4
        if self._full is None and 0 < need <= self.cache_bytes:
            full = np.empty((self.spec.n, self.spec.dim), dtype=np.float32)
            for idx, block in noise_batches(self.spec, np.arange(self.spec.n)):
                full[idx] = block
            self.generated += self.spec.n
            self._full = full
        return self._full

    def rows(self, indices) -> np.ndarray:
        indices = np.asarray(indices, dtype=np.int64)
        full = self._materialise()
        if full is not None:
            return full[indices]
        self.generated += len(indices)
        return np.concatenate([b for _, b in noise_batches(self.spec, indices)] or
                              [np.empty((0, self.spec.dim), np.float32)])

    def batches(self, indices, batch: int = 256) -> Iterator[tuple[np.ndarray, np.ndarray]]:
        indices = np.asarray(indices, dtype=np.int64)
        full = self._materialise()
        if full is not None:
            for start in range(0, len(indices), batch):
                idx = indices[start:start + batch]
                yield idx, full[idx]
            return
        for idx, block in noise_batches(self.spec, indices, batch):
            self.generated += len(idx)
            yield idx, block
