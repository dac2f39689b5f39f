import math
from dataclasses import replace

import numpy as np
import pytest
from hypothesis import HealthCheck, given, settings
from hypothesis import strategies as st

from wind._geometry import rotate, rotate_many
from wind.attacks import apply_transform
from wind.channel import ChannelParams, invert_private
from wind.codebook import CodebookSpec, NoiseSource
from wind.detector import (
    DetectionConfig,
    Variant,
    calibrate_l2_gate,
    cosine_similarity,
    detect,
    detect_many,
    detect_reconstructed_many,
    l2_distance,
    null_pvalue,
)
from wind.generation import generate_unwatermarked, generate_watermarked

SALT = bytes(range(32, 64))
SPEC = CodebookSpec(n=100, m=8, salt=SALT)
FAST = DetectionConfig()
FULL = DetectionConfig(variant=Variant.FULL)
PARAMS = ChannelParams()


def _recs(spec, indices, attack=None, seed=0):
    out = []
    for k, i in enumerate(indices):
        img = generate_watermarked(spec, int(i), nonce=k).image
        if attack:
            img = apply_transform(img, attack, seed + k)
        out.append(invert_private(img, PARAMS, seed + k))
    return out


def test_metric_definitions(rng):
    a = rng.standard_normal((4, 8, 8))
    assert cosine_similarity(a, a) == pytest.approx(1.0)
    assert cosine_similarity(a, -a) == pytest.approx(-1.0)
    assert l2_distance(a, a) == 0.0
    assert l2_distance(a, a + 1) == pytest.approx(16.0)
    with pytest.raises(ValueError):
        cosine_similarity(a, np.zeros_like(a))
    with pytest.raises(ValueError):
        cosine_similarity(a, a[:2])


def test_null_pvalue_values():
    assert null_pvalue(0.0, 16384) == 1.0
    assert null_pvalue(-0.3, 16384) == 1.0
    assert null_pvalue(0.5, 16384) < 1e-19
    assert null_pvalue(0.1, 100) == pytest.approx(math.exp(-0.5))
    with pytest.raises(ValueError):
        null_pvalue(0.1, 1)


@pytest.mark.parametrize("c", [0.02, 0.03])
def test_null_pvalue_bounds_empirical_rate(c):
    spec = CodebookSpec(450, 1, SALT)
    z = NoiseSource(spec).rows(np.arange(450)).astype(np.float64)
    z /= np.linalg.norm(z, axis=1, keepdims=True)
    sims = (z @ z.T)[np.triu_indices(450, 1)]
    assert sims.size >= 10**5
    assert np.mean(sims >= c) <= 10 * null_pvalue(c, spec.dim)


def test_config_validation():
    with pytest.raises(ValueError):
        DetectionConfig(tau_cos=1.0)
    with pytest.raises(ValueError):
        DetectionConfig(crop_fractions=(0.0,))
    assert DetectionConfig(variant="full").variant is Variant.FULL


def test_rotate_many_matches_rotate(rng):
    x = rng.standard_normal((2, 16, 16))
    stack = rotate_many(x, [10, 75, 200])
    for k, a in enumerate((10, 75, 200)):
        np.testing.assert_allclose(stack[k], rotate(x, a), atol=1e-12)
    stack32 = rotate_many(x.astype(np.float32), [75])
    assert stack32.dtype == np.float32
    np.testing.assert_allclose(stack32[0], rotate(x, 75), atol=1e-5)


def test_clean_detection_fast_and_full():
    idx = [0, 7, 8, 55, 99]
    for cfg in (FAST, FULL):
        for i, r in zip(idx, detect_reconstructed_many(_recs(SPEC, idx), SPEC, cfg)):
            assert r.decision and r.index == i and r.group == i % SPEC.m
            assert r.score >= 0.5 and r.p_value < 1e-19
            assert r.stage == "group"


def test_detect_single_image_path():
    gen = generate_watermarked(SPEC, 42, nonce=1)
    r = detect(gen.image, SPEC, FAST, PARAMS, nonce=3)
    assert r.decision and r.index == 42
    rec = r.to_record()
    assert set(rec) == {"decision", "index", "group", "cos", "l2", "p_value", "scanned", "ms"}
    assert rec["decision"] == "watermarked" and rec["ms"] > 0


@pytest.mark.parametrize("n, m", [(100, 8), (100, 7), (64, 64), (10, 3)])
def test_fast_scans_group_size(n, m):
    spec = CodebookSpec(n, m, SALT)
    idx = list(range(min(n, 12)))
    for i, r in zip(idx, detect_reconstructed_many(_recs(spec, idx), spec, FAST)):
        assert r.index == i
        assert r.candidates_scanned == len(range(i % m, n, m))
        if i % m < n % m or n % m == 0:
            assert r.candidates_scanned == math.ceil(n / m)


def test_null_images_rejected():
    spec = CodebookSpec(64, 8, SALT)
    rng = np.random.default_rng(99)
    imgs = [generate_unwatermarked(spec.shape, rng) for _ in range(1000)]
    results = detect_many(imgs, spec, FAST, PARAMS)
    rejected = sum(not r.decision for r in results)
    assert rejected / 1000 >= 0.999
    assert all(r.candidates_scanned == 8 for r in results)


def test_full_scans_at_most_n_on_null():
    rng = np.random.default_rng(5)
    imgs = [generate_unwatermarked(SPEC.shape, rng) for _ in range(5)]
    for r in detect_many(imgs, SPEC, FULL, PARAMS):
        assert not r.decision and r.index is None
        assert r.candidates_scanned == SPEC.n


def test_crop_scale_full_beats_fast():
    spec = CodebookSpec(64, 8, SALT)
    idx = list(range(0, 64, 8))[:6]
    recs = _recs(spec, idx, "cropscale:0.75", seed=10)
    fast = sum(r.index == i for i, r in zip(idx, detect_reconstructed_many(recs, spec, FAST)))
    full_results = detect_reconstructed_many(recs, spec, FULL)
    full = sum(r.best_index == i for i, r in zip(idx, full_results))
    assert full > fast
    assert any(r.stage == "cropscale" for r in full_results)


def test_rotation_recovered_by_stage2_search():
    idx = [3, 50]
    for i, r in zip(idx, detect_reconstructed_many(_recs(SPEC, idx, "rotate:75"), SPEC, FAST)):
        assert r.decision and r.index == i
        assert r.alignment.startswith("rotation:")


def test_full_falls_back_when_identifier_destroyed():
    spec = CodebookSpec(64, 8, SALT)
    idx = [5, 17]
    recs = _recs(spec, idx, "blur:8", seed=3)
    fast = detect_reconstructed_many(recs, spec, FAST)
    full = detect_reconstructed_many(recs, spec, FULL)
    for i, a, b in zip(idx, fast, full):
        assert b.best_index == i
        assert (a.best_index == i) <= (b.best_index == i)


def test_identifier_off_uses_exhaustive_scan():
    cfg = replace(FULL, use_identifier=False)
    idx = [1, 98]
    for i, r in zip(idx, detect_reconstructed_many(_recs(SPEC, idx), SPEC, cfg)):
        assert r.index == i and r.group is None and r.stage == "exhaustive"
        assert r.candidates_scanned == SPEC.n


@pytest.fixture(scope="module")
def mixed_queries():
    rng = np.random.default_rng(17)
    idx = [int(i) for i in rng.integers(0, SPEC.n, 6)]
    recs = _recs(SPEC, idx) + _recs(SPEC, idx[:2], "blur:8", seed=50)
    recs += [invert_private(generate_unwatermarked(SPEC.shape, rng), PARAMS, 7) for _ in range(2)]
    return recs


@settings(max_examples=8, deadline=None, suppress_health_check=[HealthCheck.function_scoped_fixture])
@given(scale=st.floats(1e-3, 1e3), k=st.integers(0, 9))
def test_scale_invariance(mixed_queries, scale, k):
    cfg = replace(FAST, stage2_rotation_search=False)
    base = detect_reconstructed_many([mixed_queries[k]], SPEC, cfg)[0]
    scaled = detect_reconstructed_many([scale * mixed_queries[k]], SPEC, cfg)[0]
    assert (scaled.decision, scaled.index, scaled.best_index) == (base.decision, base.index, base.best_index)
    assert scaled.score == pytest.approx(base.score, abs=1e-5)


@settings(max_examples=10, deadline=None, suppress_health_check=[HealthCheck.function_scoped_fixture])
@given(t1=st.floats(0.01, 0.98), t2=st.floats(0.01, 0.98))
def test_threshold_monotone(mixed_queries, t1, t2):
    lo, hi = sorted((t1, t2))
    cfg = replace(FAST, stage2_rotation_search=False)
    a = detect_reconstructed_many(mixed_queries, SPEC, replace(cfg, tau_cos=lo))
    b = detect_reconstructed_many(mixed_queries, SPEC, replace(cfg, tau_cos=hi))
    for ra, rb in zip(a, b):
        assert ra.decision or not rb.decision


def test_group_consistency_and_full_dominates(mixed_queries):
    fast = detect_reconstructed_many(mixed_queries, SPEC, FAST)
    full = detect_reconstructed_many(mixed_queries, SPEC, FULL)
    for r in fast:
        if r.decision:
            assert r.index % SPEC.m == r.group
    assert sum(r.decision for r in full) >= sum(r.decision for r in fast)
    for rf, rF in zip(fast, full):
        assert rF.candidates_scanned <= SPEC.n
        if rf.decision:
            assert rF.index == rf.index


def test_l2_gate_calibration():
    gate = calibrate_l2_gate(SPEC, PARAMS, queries=50, candidates=32)
    assert 0 < gate < 2 * math.sqrt(SPEC.dim)
    cfg = replace(FAST, l2_gate=gate)
    idx = [4, 9]
    for i, r in zip(idx, detect_reconstructed_many(_recs(SPEC, idx), SPEC, cfg)):
        assert r.decision and r.index == i and r.l2 <= gate


def test_shape_mismatch_raises():
    with pytest.raises(ValueError):
        detect_reconstructed_many([np.zeros((4, 32, 32))], SPEC)
