"""Random-projection sketch index for shortlisting codebook candidates.

Every codebook noise is projected to ``k`` dimensions with a fixed Gaussian
matrix. A query ranks all sketches by cosine and the caller verifies the top
few exactly by regenerating their full noises.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field
from functools import lru_cache
from pathlib import Path

import numpy as np

from wind.codebook import CodebookSpec, NoiseSource

MAGIC = b"WNDX"
VERSION = 1
_HEADER = struct.Struct("<4sHIQQ32s")
DEFAULT_MEMORY_CAP = 1 << 30


class StaleIndexError(ValueError):
    """The index was built for a different codebook."""


class MemoryBudgetError(MemoryError):
    """Building the index would exceed the configured memory cap."""


@lru_cache(maxsize=4)
def projection_matrix(dim: int, k_dims: int, projection_seed: int) -> np.ndarray:
    """Fixed (dim, k) Gaussian projection, scaled by 1/sqrt(k)."""
    rng = np.random.default_rng(projection_seed)
    mat = rng.standard_normal((dim, k_dims), dtype=np.float32) / np.float32(np.sqrt(k_dims))
    mat.setflags(write=False)
    return mat


@dataclass
class SearchOutcome:
    index: int
    cos: float
    l2: float
    shortlist: np.ndarray
    regenerated: int


@dataclass
class SketchIndex:
    k_dims: int
    projection_seed: int
    sketches: np.ndarray
    fingerprint: bytes
    _norms: np.ndarray = field(init=False, repr=False)

    def __post_init__(self):
        self.sketches = np.ascontiguousarray(self.sketches, dtype=np.float32)
        if self.sketches.ndim != 2 or self.sketches.shape[1] != self.k_dims:
            raise ValueError("sketch matrix must have shape (N, k_dims)")
        self._norms = np.linalg.norm(self.sketches, axis=1)

    @property
    def n(self) -> int:
        return self.sketches.shape[0]

    @classmethod
    def build(
        cls,
        spec: CodebookSpec,
        k_dims: int = 256,
        projection_seed: int = 0,
        memory_cap: int = DEFAULT_MEMORY_CAP,
        source: NoiseSource | None = None,
        batch: int = 512,
    ) -> "SketchIndex":
        """Stream every codebook noise through the projection.

        Raises:
            MemoryBudgetError: if ``N * k_dims`` float32 values exceed ``memory_cap`` bytes.
        """
        if not 1 <= k_dims <= spec.dim:
            raise ValueError(f"k_dims must be in [1, {spec.dim}], got {k_dims}")
        need = spec.n * k_dims * 4
        if need > memory_cap:
            raise MemoryBudgetError(f"index needs {need} bytes, cap is {memory_cap}")
        source = source or NoiseSource(spec)
        proj = projection_matrix(spec.dim, k_dims, projection_seed)
        sketches = np.empty((spec.n, k_dims), dtype=np.float32)
        for idx, block in source.batches(np.arange(spec.n), batch):
            sketches[idx] = block @ proj
        return cls(k_dims, projection_seed, sketches, spec.fingerprint)

    def check(self, spec: CodebookSpec) -> None:
        if spec.fingerprint != self.fingerprint or spec.n != self.n:
            raise StaleIndexError("index fingerprint does not match the codebook")

    def sketch(self, q: np.ndarray) -> np.ndarray:
        q = np.asarray(q, dtype=np.float32).reshape(-1)
        return q @ projection_matrix(q.size, self.k_dims, self.projection_seed)

    def sketch_cosines(self, q: np.ndarray, candidates=None) -> np.ndarray:
        s = self.sketch(q)
        rows = self.sketches if candidates is None else self.sketches[candidates]
        norms = self._norms if candidates is None else self._norms[candidates]
        return (rows @ s) / np.maximum(norms * np.linalg.norm(s), 1e-30)

    def query(self, q: np.ndarray, top_k: int, candidates=None, spec: CodebookSpec | None = None) -> np.ndarray:
        """Indices of the ``top_k`` best sketch cosines, best first, ties by index."""
        if top_k < 1:
            raise ValueError("top_k must be >= 1")
        if spec is not None:
            self.check(spec)
        pool = np.arange(self.n) if candidates is None else np.asarray(candidates, dtype=np.int64)
        scores = self.sketch_cosines(q, pool)
        k = min(top_k, len(pool))
        if k < len(pool):
            part = np.argpartition(-scores, k - 1)[:k]
        else:
            part = np.arange(len(pool))
        order = np.lexsort((pool[part], -scores[part]))
        return pool[part[order]]

    def search(
        self,
        q: np.ndarray,
        spec: CodebookSpec,
        top_k: int,
        source: NoiseSource | None = None,
        candidates=None,
    ) -> SearchOutcome:
        """Shortlist by sketch, then score each shortlisted noise exactly."""
        self.check(spec)
        shortlist = self.query(q, top_k, candidates)
        source = source or NoiseSource(spec)
        rows = source.rows(np.sort(shortlist))
        idx = np.sort(shortlist)
        qv = np.asarray(q, dtype=np.float32).reshape(-1)
        dots = rows @ qv
        norms = np.linalg.norm(rows, axis=1)
        qn = float(np.linalg.norm(qv))
        cos = dots / np.maximum(norms * qn, 1e-30)
        best = int(np.argmax(cos))
        l2 = float(np.sqrt(max(qn**2 + norms[best] ** 2 - 2 * dots[best], 0.0)))
        return SearchOutcome(int(idx[best]), float(cos[best]), l2, shortlist, len(shortlist))

    def to_bytes(self) -> bytes:
        header = _HEADER.pack(MAGIC, VERSION, self.k_dims, self.n, self.projection_seed, self.fingerprint)
        return header + self.sketches.astype("<f4").tobytes()

    def save(self, path) -> None:
        path = Path(path)
        tmp = path.with_suffix(path.suffix + ".tmp")
        tmp.write_bytes(self.to_bytes())
        tmp.replace(path)

    @classmethod
    def load(cls, path, spec: CodebookSpec | None = None) -> "SketchIndex":
        data = Path(path).read_bytes()
        if len(data) < _HEADER.size:
            raise ValueError("index file is truncated")
        magic, version, k_dims, n, seed, fingerprint = _HEADER.unpack_from(data)
        if magic != MAGIC:
            raise ValueError("not an index file")
        if version != VERSION:
            raise ValueError(f"unsupported index version {version}")
        payload = np.frombuffer(data, dtype="<f4", offset=_HEADER.size)
        if payload.size != n * k_dims:
            raise ValueError("index payload size does not match its header")
        index = cls(k_dims, seed, payload.reshape(n, k_dims).astype(np.float32), fingerprint)
        if spec is not None:
            index.check(spec)
        return index
