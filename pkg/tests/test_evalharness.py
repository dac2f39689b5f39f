import csv
import json
import math

import pytest

from wind.codebook import CodebookSpec, NoiseSource
from wind.detector import DetectionConfig, Variant
from wind.evalharness import (
    EXPERIMENTS,
    canonical_json,
    derived_seed,
    git_blob_hash,
    run_regeneration_curve,
    run_robustness,
    run_separation,
    run_steganalysis,
    wilson_interval,
)

SPEC = CodebookSpec(64, 8, bytes(range(7, 39)))
CFGS = {"fast": DetectionConfig(), "full": DetectionConfig(variant=Variant.FULL)}


def _wilson_reference(k, n, z=1.959963984540054):
    p = k / n
    centre = (p + z * z / (2 * n)) / (1 + z * z / n)
    half = z * math.sqrt(p * (1 - p) / n + z * z / (4 * n * n)) / (1 + z * z / n)
    return centre - half, centre + half


@pytest.mark.parametrize("k, n", [(0, 10), (10, 10), (93, 100), (1, 200)])
def test_wilson_interval(k, n):
    lo, hi = wilson_interval(k, n)
    ref = _wilson_reference(k, n)
    assert lo == pytest.approx(max(ref[0], 0.0), abs=1e-9)
    assert hi == pytest.approx(min(ref[1], 1.0), abs=1e-9)
    assert wilson_interval(0, 0) == (0.0, 1.0)


def test_hash_helpers():
    assert git_blob_hash(b"hello\n") == "ce013625030ba8dba906f756967f9e9ca394464a"
    assert canonical_json({"b": 1, "a": (1, 2)}) == '{"a":[1,2],"b":1}'
    assert derived_seed(1, 2) == derived_seed(1, 2) != derived_seed(2, 1)
    assert 0 <= derived_seed(5) < 2**64


@pytest.fixture(scope="module")
def source():
    return NoiseSource(SPEC, cache_bytes=1 << 28)


def test_robustness_replays_bit_exact(source):
    a = run_robustness(SPEC, CFGS, ["jpeg:25", "noise:0.1"], 4, seed=3, source=source)
    b = run_robustness(SPEC, CFGS, ["jpeg:25", "noise:0.1"], 4, seed=3, source=NoiseSource(SPEC))
    c = run_robustness(SPEC, CFGS, ["jpeg:25", "noise:0.1"], 4, seed=4, source=source)
    assert a.results_hash() == b.results_hash() != c.results_hash()
    assert a.inputs_hash() == b.inputs_hash() != c.inputs_hash()
    clean = [r for r in a.rows if r["attack"] == "clean"]
    assert [r["accuracy"] for r in clean] == [1.0, 1.0]
    assert set(a.summary) == {"fast_attack_mean", "full_attack_mean"}
    assert all(r["ci_low"] <= r["accuracy"] <= r["ci_high"] for r in a.rows)


def test_report_files(tmp_path, source):
    rep = run_separation(SPEC, 20, seed=1, null_trials=50)
    paths = rep.write(tmp_path, svg=True)
    manifest = json.loads(paths["manifest"].read_text())
    assert manifest["results_hash"] == rep.results_hash()
    assert manifest["seeds"] == {"seed": 1}
    assert manifest["config"]["context"]["n"] == 64
    with open(paths["trials"]) as fh:
        assert len(list(csv.DictReader(fh))) == 20
    assert paths["svg"].read_text().lstrip().startswith("<?xml")


def test_separation_summary():
    rep = run_separation(SPEC, 60, seed=2, null_trials=200)
    s = rep.summary
    assert s["correct_mean"] > 0.8 and abs(s["random_mean"]) < 0.01
    assert s["z_gap_pooled"] > 5 and s["null_false_positives"] == 0
    assert s["analytic_p_at_tau"] < 1e-19


def test_steganalysis_small(source):
    rep = run_steganalysis(SPEC, 32, 6, seed=1, source=source)
    s = rep.summary
    assert s["identifier_forgery_rate"] >= 0.8
    assert s["full_forgery_rate"] == 0.0
    assert s["full_detection_after_removal"] == 1.0
    assert len(rep.rows) == 4 and len(rep.trials) == 6


def test_regeneration_small(source):
    rep = run_regeneration_curve(SPEC, 12, 6, checkpoints=(1, 10), seed=1, source=source)
    assert rep.summary["monotone_nonincreasing"]
    assert [r["iteration"] for r in rep.rows] == [1, 10]
    assert all(r["accuracy"] == 1.0 for r in rep.rows)
    assert len(rep.series["similarity"]["y"]) == 12


def test_registry():
    assert set(EXPERIMENTS) == {"robustness", "separation", "steganalysis", "regeneration"}
