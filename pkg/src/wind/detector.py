"""Two-stage detection: decode the group, then match codebook noises.

The fast variant only scans the decoded group. The full variant falls back to
the whole codebook when the group scan finds nothing above threshold, first
through the sketch shortlist when an index is available, then by exhaustive
scan, and finally by a crop-and-rescale registration search.
"""

from __future__ import annotations

import enum
import math
import time
from dataclasses import dataclass, field, replace
from functools import lru_cache
from typing import Sequence

import numpy as np
import scipy.fft as sfft

from wind import _geometry
from wind.channel import ChannelParams, invert_private
from wind.codebook import CodebookSpec, NoiseSource
from wind.identifier import RingGeometry, SearchConfig, extract_detailed, remove_pattern
from wind.sim_index import SketchIndex


class Variant(str, enum.Enum):
    FAST = "fast"
    FULL = "full"


@dataclass(frozen=True)
class DetectionConfig:
    """Detector settings.

    ``confidence`` is the family-wise null probability below which a
    sub-threshold best match is trusted as the global best, which stops the
    full variant from running its crop search.
    """

    tau_cos: float = 0.5
    l2_gate: float | None = None
    variant: Variant = Variant.FAST
    search: SearchConfig = SearchConfig()
    stage2_rotation_search: bool = True
    geometry: RingGeometry | None = None
    use_identifier: bool = True
    crop_fractions: tuple[float, ...] = (0.875, 0.75, 0.625, 0.5)
    shortlist_top_k: int = 32
    index_crossover: int = 4096
    confidence: float = 1e-6
    batch_size: int = 256

    def __post_init__(self):
        if not 0.0 < self.tau_cos < 1.0:
            raise ValueError(f"tau_cos must lie in (0, 1), got {self.tau_cos}")
        object.__setattr__(self, "variant", Variant(self.variant))
        if any(not 0 < f <= 1 for f in self.crop_fractions):
            raise ValueError("crop fractions must lie in (0, 1]")
        if self.shortlist_top_k < 1:
            raise ValueError("shortlist_top_k must be >= 1")

    def geometry_for(self, spec: CodebookSpec) -> RingGeometry:
        return self.geometry or RingGeometry.for_groups(spec.m)


@dataclass
class DetectionResult:
    """Outcome of one detection.

    ``index`` is set only for a positive decision; ``best_index`` is always the
    highest-scoring candidate seen.
    """

    decision: bool
    index: int | None
    best_index: int | None
    group: int | None
    score: float
    l2: float
    p_value: float
    candidates_scanned: int
    wall_time: float
    alignment: str = "identity"
    stage: str = "group"
    identifier_score: float = 0.0

    @property
    def label(self) -> str:
        return "watermarked" if self.decision else "not_watermarked"

    def to_record(self) -> dict:
        return {
            "decision": self.label,
            "index": self.index,
            "group": self.group,
            "cos": self.score,
            "l2": None if math.isnan(self.l2) else self.l2,
            "p_value": self.p_value,
            "scanned": self.candidates_scanned,
            "ms": self.wall_time * 1e3,
        }


def cosine_similarity(a: np.ndarray, b: np.ndarray) -> float:
    a = np.asarray(a, dtype=np.float64).ravel()
    b = np.asarray(b, dtype=np.float64).ravel()
    if a.shape != b.shape:
        raise ValueError(f"shape mismatch {a.shape} vs {b.shape}")
    na, nb = np.linalg.norm(a), np.linalg.norm(b)
    if na == 0 or nb == 0:
        raise ValueError("cosine similarity is undefined for a zero vector")
    return float(a @ b / (na * nb))


def l2_distance(a: np.ndarray, b: np.ndarray) -> float:
    a = np.asarray(a, dtype=np.float64).ravel()
    b = np.asarray(b, dtype=np.float64).ravel()
    if a.shape != b.shape:
        raise ValueError(f"shape mismatch {a.shape} vs {b.shape}")
    return float(np.linalg.norm(a - b))


def null_pvalue(c: float, d: int) -> float:
    """Gaussian tail bound ``exp(-c^2 d / 2)`` for a cosine under the null N(0, 1/d)."""
    if d < 2:
        raise ValueError("dimension must be >= 2")
    if c <= 0:
        return 1.0
    return float(min(1.0, max(0.0, np.exp(-c * c * d / 2.0))))


@dataclass
class _Best:
    cos: float = -np.inf
    index: int | None = None
    l2: float = np.inf
    alignment: str = "identity"
    stage: str = "group"
    dim: int = 0

    def offer(self, cos: float, index: int, l2: float, alignment: str, stage: str, dim: int) -> None:
        # Strict improvement only, so ties keep whatever was offered first.
        if cos > self.cos:
            self.cos, self.index, self.l2 = cos, index, l2
            self.alignment, self.stage, self.dim = alignment, stage, dim


@dataclass
class _Query:
    rec: np.ndarray
    clean: np.ndarray
    group: int | None
    id_score: float
    best: _Best = field(default_factory=_Best)
    scanned: set = field(default_factory=set)
    scanned_count: int = 0
    compared: int = 0
    elapsed: float = 0.0
    done: bool = False


def _score_rows(rows: np.ndarray, queries: np.ndarray, row_norms=None):
    """Cosine and l2 between each query (q, d) and each row (b, d)."""
    dots = queries @ rows.T
    rn = np.linalg.norm(rows, axis=1) if row_norms is None else row_norms
    qn = np.linalg.norm(queries, axis=1)
    cos = dots / np.maximum(qn[:, None] * rn[None, :], 1e-30)
    l2 = np.sqrt(np.maximum(qn[:, None] ** 2 + rn[None, :] ** 2 - 2 * dots, 0.0))
    return cos, l2


@lru_cache(maxsize=32)
def _group_rows(spec: CodebookSpec, g: int) -> tuple[np.ndarray, np.ndarray]:
    idx = np.fromiter(spec.group_indices(g), dtype=np.int64)
    rows = NoiseSource(spec).rows(idx)
    return idx, rows


def _confident(q: _Query, cfg: DetectionConfig) -> bool:
    """True when a null codebook noise beating the current best is implausible."""
    best = q.best
    if best.index is None or best.dim < 2:
        return False
    return null_pvalue(best.cos, best.dim) * max(q.compared, 1) <= cfg.confidence


def _accepted(best: _Best, cfg: DetectionConfig) -> bool:
    if best.cos < cfg.tau_cos:
        return False
    # Crop-stage matches have no comparable l2 (NaN) and bypass the gate.
    return cfg.l2_gate is None or math.isnan(best.l2) or best.l2 <= cfg.l2_gate


def _group_stage(q: _Query, spec: CodebookSpec, cfg: DetectionConfig, index: SketchIndex | None, source: NoiseSource | None):
    g = q.group
    members = spec.group_indices(g)
    d = spec.dim
    if index is not None and len(members) > cfg.index_crossover:
        out = index.search(q.clean, spec, cfg.shortlist_top_k, source, candidates=np.fromiter(members, np.int64))
        q.best.offer(out.cos, out.index, out.l2, "identity", "group", d)
        q.scanned.update(int(i) for i in out.shortlist)
        q.scanned_count += out.regenerated
        return
    if source is not None and source.cache_bytes:
        idx = np.fromiter(members, dtype=np.int64)
        rows = source.rows(idx)
    else:
        idx, rows = _group_rows(spec, g)
    q.scanned_count += len(idx)
    q.scanned.update(range(g, spec.n, spec.m))
    norms = np.linalg.norm(rows, axis=1)
    cos, l2 = _score_rows(rows, q.clean.reshape(1, -1).astype(np.float32), norms)
    k = int(np.argmax(cos[0]))
    q.best.offer(float(cos[0, k]), int(idx[k]), float(l2[0, k]), "identity", "group", d)
    q.compared = len(idx)
    if cfg.stage2_rotation_search and not _accepted(q.best, cfg):
        angles = cfg.search.rotation_angles()
        rotated = _geometry.rotate_many(q.clean.astype(np.float32), angles).reshape(len(angles), -1)
        cos, l2 = _score_rows(rows, rotated, norms)
        a, k = np.unravel_index(int(np.argmax(cos)), cos.shape)
        q.best.offer(float(cos[a, k]), int(idx[k]), float(l2[a, k]), f"rotation:{angles[a]:g}", "group", d)
        q.compared = len(idx) * (1 + len(angles))


def _prepare(rec: np.ndarray, spec: CodebookSpec, cfg: DetectionConfig) -> _Query:
    if rec.shape != spec.shape:
        raise ValueError(f"tensor shape {rec.shape} does not match codebook shape {spec.shape}")
    geo = cfg.geometry_for(spec)
    group, id_score = None, 0.0
    if cfg.use_identifier:
        group, id_score, _ = extract_detailed(rec, spec.m, geo, cfg.search)
    return _Query(rec, remove_pattern(rec, geo), group, id_score)


def _exhaustive_pass(queries: list[_Query], spec: CodebookSpec, cfg: DetectionConfig, source: NoiseSource) -> None:
    qmat = np.stack([q.clean.ravel() for q in queries]).astype(np.float32)
    d = spec.dim
    for idx, rows in source.batches(np.arange(spec.n), cfg.batch_size):
        cos, l2 = _score_rows(rows, qmat)
        best_cols = np.argmax(cos, axis=1)
        for j, q in enumerate(queries):
            k = best_cols[j]
            q.best.offer(float(cos[j, k]), int(idx[k]), float(l2[j, k]), "identity", "exhaustive", d)
    for q in queries:
        q.scanned_count += spec.n - len(q.scanned)
        q.scanned = set()
        q.compared = spec.n


def _box_sums(x: np.ndarray, s: int) -> np.ndarray:
    """Sum of ``x`` over every s-by-s window of the last two axes (valid positions)."""
    c = np.cumsum(np.cumsum(x, axis=-2), axis=-1)
    c = np.pad(c, [(0, 0)] * (x.ndim - 2) + [(1, 0), (1, 0)])
    return c[..., s:, s:] - c[..., :-s, s:] - c[..., s:, :-s] + c[..., :-s, :-s]


def _crop_pass(queries: list[_Query], spec: CodebookSpec, cfg: DetectionConfig, source: NoiseSource) -> None:
    """Undo a crop-and-rescale by matching a downscaled query against every window of every noise.

    Fractions are tried in configured order, one codebook sweep each; a query
    leaves the search as soon as its best match is accepted or confident.
    """
    c, h, w = spec.shape
    offsets = 0
    for frac in cfg.crop_fractions:
        s = max(2, int(round(frac * min(h, w))))
        active = [q for q in queries if not (_accepted(q.best, cfg) or (q.compared > spec.n and _confident(q, cfg)))]
        if s >= min(h, w) or not active:
            continue
        offsets += (h - s + 1) * (w - s + 1)
        templates, tnorms = [], []
        for q in active:
            t = _geometry.resize(q.rec, (s, s))
            padded = np.zeros((c, h, w), dtype=np.float32)
            padded[:, :s, :s] = t
            templates.append(np.conj(sfft.rfft2(padded)))
            tnorms.append(max(float(np.linalg.norm(t)), 1e-30))
        for idx, rows in source.batches(np.arange(spec.n), cfg.batch_size):
            z = rows.reshape(len(idx), c, h, w)
            fz = sfft.rfft2(z)
            energy = np.sqrt(np.maximum(_box_sums(z.astype(np.float64) ** 2, s).sum(axis=1), 1e-30))
            for q, ft, tn in zip(active, templates, tnorms):
                corr = sfft.irfft2(np.einsum("bcij,cij->bij", fz, ft), s=(h, w))[:, : h - s + 1, : w - s + 1]
                flat = (corr / (energy * tn)).reshape(len(idx), -1)
                k, pos = np.unravel_index(int(np.argmax(flat)), flat.shape)
                oy, ox = divmod(int(pos), w - s + 1)
                q.best.offer(float(flat[k, pos]), int(idx[k]), float("nan"), f"crop:{frac:g}@{oy},{ox}", "cropscale", c * s * s)
        for q in active:
            q.compared = spec.n * max(offsets, 1)


def _finish(q: _Query, cfg: DetectionConfig, spec: CodebookSpec) -> DetectionResult:
    best = q.best
    accepted = _accepted(best, cfg)
    return DetectionResult(
        decision=accepted,
        index=best.index if accepted else None,
        best_index=best.index,
        group=q.group,
        score=float(best.cos) if best.index is not None else 0.0,
        l2=float(best.l2),
        p_value=null_pvalue(best.cos, best.dim or spec.dim) if best.index is not None else 1.0,
        candidates_scanned=min(q.scanned_count, spec.n),
        wall_time=q.elapsed,
        alignment=best.alignment,
        stage=best.stage,
        identifier_score=q.id_score,
    )


def detect_reconstructed_many(
    recs: Sequence[np.ndarray],
    spec: CodebookSpec,
    cfg: DetectionConfig = DetectionConfig(),
    index: SketchIndex | None = None,
    source: NoiseSource | None = None,
) -> list[DetectionResult]:
    """Detect from already-inverted tensors, sharing codebook sweeps across queries."""
    if index is not None:
        index.check(spec)
    source = source or NoiseSource(spec)
    queries: list[_Query] = []
    for rec in recs:
        t0 = time.perf_counter()
        q = _prepare(np.asarray(rec, dtype=np.float64), spec, cfg)
        if q.group is not None:
            _group_stage(q, spec, cfg, index, source)
        q.done = _accepted(q.best, cfg) or cfg.variant is Variant.FAST
        if not q.done and index is not None:
            out = index.search(q.clean, spec, cfg.shortlist_top_k, source)
            q.best.offer(out.cos, out.index, out.l2, "identity", "shortlist", spec.dim)
            new = set(int(i) for i in out.shortlist) - q.scanned
            q.scanned.update(new)
            q.scanned_count += len(new)
            q.compared = spec.n
            q.done = _accepted(q.best, cfg) or _confident(q, cfg)
        q.elapsed = time.perf_counter() - t0
        queries.append(q)

    for sweep in (_exhaustive_pass, _crop_pass):
        pending = [q for q in queries if not q.done]
        if not pending or (sweep is _crop_pass and not cfg.crop_fractions):
            continue
        t0 = time.perf_counter()
        sweep(pending, spec, cfg, source)
        share = (time.perf_counter() - t0) / len(pending)
        for q in pending:
            q.elapsed += share
            q.done = _accepted(q.best, cfg) or _confident(q, cfg)
    return [_finish(q, cfg, spec) for q in queries]


def detect_many(
    images: Sequence[np.ndarray],
    spec: CodebookSpec,
    cfg: DetectionConfig = DetectionConfig(),
    params: ChannelParams = ChannelParams(),
    nonces: Sequence[int] | None = None,
    index: SketchIndex | None = None,
    source: NoiseSource | None = None,
) -> list[DetectionResult]:
    """Invert each image with the private channel and detect."""
    recs, times = [], []
    for k, img in enumerate(images):
        t0 = time.perf_counter()
        recs.append(invert_private(img, params, None if nonces is None else nonces[k]))
        times.append(time.perf_counter() - t0)
    results = detect_reconstructed_many(recs, spec, cfg, index, source)
    for r, t in zip(results, times):
        r.wall_time += t
    return results


def detect(
    img: np.ndarray,
    spec: CodebookSpec,
    cfg: DetectionConfig = DetectionConfig(),
    params: ChannelParams = ChannelParams(),
    nonce: int | None = None,
    index: SketchIndex | None = None,
    source: NoiseSource | None = None,
) -> DetectionResult:
    """Detect a watermark in one image."""
    return detect_many([img], spec, cfg, params, None if nonce is None else [nonce], index, source)[0]


def calibrate_l2_gate(
    spec: CodebookSpec,
    params: ChannelParams = ChannelParams(),
    geometry: RingGeometry | None = None,
    queries: int = 200,
    candidates: int = 64,
    quantile: float = 1e-4,
    seed: int = 0,
) -> float:
    """Low quantile of the l2 distance between unrelated reconstructions and codebook noises."""
    geo = geometry or RingGeometry.for_groups(spec.m)
    rng = np.random.default_rng(seed)
    idx = rng.choice(spec.n, size=min(candidates, spec.n), replace=False)
    rows = NoiseSource(spec).rows(np.sort(idx)).astype(np.float64)
    dists = []
    for k in range(queries):
        img = rng.standard_normal(spec.shape)
        q = remove_pattern(invert_private(img, params, k), geo).ravel()
        dists.append(np.linalg.norm(rows - q, axis=1))
    return float(np.quantile(np.concatenate(dists), quantile))


def with_variant(cfg: DetectionConfig, variant: Variant | str) -> DetectionConfig:
    return replace(cfg, variant=Variant(variant))
