"""Scripted experiments with replayable reports.

Each ``run_*`` function returns an :class:`ExperimentReport` whose numbers are
a pure function of its recorded inputs and seeds. Wall-clock timings are kept
apart so they never enter the result hash.
"""

from __future__ import annotations

import csv
import hashlib
import json
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Callable, Mapping, Sequence

import numpy as np
from scipy import stats

from wind import attacks as atk
from wind.channel import ChannelParams, invert_private
from wind.codebook import CodebookSpec, NoiseSource, noise_for_index
from wind.detector import DetectionConfig, Variant, cosine_similarity, detect_many, null_pvalue
from wind.generation import generate_unwatermarked, generate_watermarked, sample_index
from wind.identifier import RingGeometry, extract
from wind.sim_index import SketchIndex


def derived_seed(*words: int) -> int:
    """64-bit seed derived from a tuple of integers."""
    return int(np.random.SeedSequence([int(w) for w in words]).generate_state(1, np.uint64)[0])


def wilson_interval(successes: int, trials: int, level: float = 0.95) -> tuple[float, float]:
    if trials == 0:
        return 0.0, 1.0
    ci = stats.binomtest(successes, trials).proportion_ci(level, method="wilson")
    return float(ci.low), float(ci.high)


def _jsonable(v):
    if isinstance(v, (np.integer,)):
        return int(v)
    if isinstance(v, (np.floating,)):
        return float(v)
    if isinstance(v, np.ndarray):
        return v.tolist()
    if isinstance(v, bytes):
        return v.hex()
    if isinstance(v, (tuple, list)):
        return [_jsonable(x) for x in v]
    if isinstance(v, dict):
        return {str(k): _jsonable(x) for k, x in v.items()}
    if hasattr(v, "value") and isinstance(getattr(v, "value"), str):
        return v.value
    return v


def canonical_json(obj) -> str:
    return json.dumps(_jsonable(obj), sort_keys=True, separators=(",", ":"))


def git_blob_hash(data: bytes) -> str:
    """Content hash in the form git uses for blobs."""
    return hashlib.sha1(b"blob %d\0" % len(data) + data).hexdigest()


@dataclass
class ExperimentReport:
    experiment: str
    config: dict
    seeds: dict
    rows: list[dict] = field(default_factory=list)
    summary: dict = field(default_factory=dict)
    trials: list[dict] = field(default_factory=list)
    series: dict = field(default_factory=dict)
    timings: dict = field(default_factory=dict)
    invocation: dict = field(default_factory=dict)

    def results_hash(self) -> str:
        payload = canonical_json({"rows": self.rows, "summary": self.summary, "trials": self.trials, "series": self.series})
        return hashlib.sha256(payload.encode()).hexdigest()

    def inputs_hash(self) -> str:
        return git_blob_hash(canonical_json({"config": self.config, "seeds": self.seeds}).encode())

    def manifest(self) -> dict:
        return {
            "experiment": self.experiment,
            "config": _jsonable(self.config),
            "seeds": _jsonable(self.seeds),
            "summary": _jsonable(self.summary),
            "inputs_hash": self.inputs_hash(),
            "results_hash": self.results_hash(),
            "timings": _jsonable(self.timings),
            "invocation": _jsonable(self.invocation),
        }

    def write(self, out_dir, svg: bool = False) -> dict[str, Path]:
        """Write ``<id>.csv``, ``<id>_trials.csv`` and ``<id>_manifest.json`` (plus SVG if asked)."""
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        paths = {}
        for name, table in (("rows", self.rows), ("trials", self.trials)):
            if not table:
                continue
            p = out / (f"{self.experiment}.csv" if name == "rows" else f"{self.experiment}_trials.csv")
            keys = list(dict.fromkeys(k for r in table for k in r))
            with open(p, "w", newline="") as fh:
                writer = csv.DictWriter(fh, fieldnames=keys)
                writer.writeheader()
                for r in table:
                    writer.writerow({k: _jsonable(r.get(k, "")) for k in keys})
            paths[name] = p
        mp = out / f"{self.experiment}_manifest.json"
        mp.write_text(json.dumps(self.manifest(), indent=2, sort_keys=True))
        paths["manifest"] = mp
        if svg and self.series:
            paths["svg"] = self._plot(out / f"{self.experiment}.svg")
        return paths

    def _plot(self, path: Path) -> Path:
        import matplotlib

        matplotlib.use("Agg")
        import matplotlib.pyplot as plt

        fig, ax = plt.subplots(figsize=(6, 4))
        for name, s in self.series.items():
            if "edges" in s:
                edges = np.asarray(s["edges"])
                ax.stairs(s["counts"], edges, label=name)
            else:
                ax.plot(s["x"], s["y"], marker="o", label=name)
        ax.legend()
        ax.set_title(self.experiment)
        fig.tight_layout()
        fig.savefig(path, format="svg")
        plt.close(fig)
        return path


def _context(spec: CodebookSpec, geometry: RingGeometry, params: ChannelParams) -> dict:
    return {
        "n": spec.n,
        "m": spec.m,
        "shape": list(spec.shape),
        "codebook_fingerprint": spec.fingerprint.hex(),
        "geometry": asdict(geometry),
        "channel": params.to_dict(),
    }


def _detection_snapshot(cfg: DetectionConfig) -> dict:
    d = asdict(cfg)
    d["variant"] = cfg.variant.value
    return d


def _make_attacked(spec, geometry, params, attack: str, trials: int, seed: int, column: int):
    """Watermarked images from fresh indices, each attacked with its own seed."""
    rng = np.random.default_rng(derived_seed(seed, column, 0))
    images, truth, seeds = [], [], []
    for t in range(trials):
        i = sample_index(spec, rng)
        gen = generate_watermarked(spec, i, geometry, params)
        s = derived_seed(seed, column, 1, t)
        img = gen.image if attack == "clean" else atk.apply_attack(gen.image, attack, s, params)
        images.append(img)
        truth.append(i)
        seeds.append(s)
    return images, truth, seeds


def run_robustness(
    spec: CodebookSpec,
    cfgs: Mapping[str, DetectionConfig],
    attacks: Sequence[str],
    trials: int,
    *,
    params: ChannelParams = ChannelParams(),
    geometry: RingGeometry | None = None,
    seed: int = 0,
    index: SketchIndex | None = None,
    source: NoiseSource | None = None,
    include_clean: bool = True,
) -> ExperimentReport:
    """Accuracy of each detector variant under each attack.

    A trial counts as correct when the detector's best-matching index is the
    index the image was generated from.
    """
    geometry = geometry or RingGeometry.for_groups(spec.m)
    source = source or NoiseSource(spec)
    columns = (["clean"] if include_clean else []) + [str(atk.AttackSpec.parse(a)) for a in attacks]
    report = ExperimentReport(
        "robustness",
        {
            "context": _context(spec, geometry, params),
            "variants": {k: _detection_snapshot(c) for k, c in cfgs.items()},
            "attacks": columns,
            "trials": trials,
        },
        {"seed": seed},
    )
    for col, attack in enumerate(columns):
        images, truth, seeds = _make_attacked(spec, geometry, params, attack, trials, seed, col)
        nonces = [derived_seed(seed, col, 2, t) for t in range(trials)]
        for name, cfg in cfgs.items():
            results = detect_many(images, spec, cfg, params, nonces, index, source)
            correct = [r.best_index == i for r, i in zip(results, truth)]
            k = int(sum(correct))
            lo, hi = wilson_interval(k, trials)
            report.rows.append(
                {
                    "variant": name,
                    "attack": attack,
                    "trials": trials,
                    "correct": k,
                    "accuracy": k / trials,
                    "ci_low": lo,
                    "ci_high": hi,
                    "declared": int(sum(r.decision for r in results)),
                    "mean_cos": float(np.mean([r.score for r in results])),
                    "mean_scanned": float(np.mean([r.candidates_scanned for r in results])),
                }
            )
            report.timings[f"{name}/{attack}"] = float(np.mean([r.wall_time for r in results]))
            for t, (r, i, s) in enumerate(zip(results, truth, seeds)):
                report.trials.append(
                    {
                        "variant": name,
                        "attack": attack,
                        "trial": t,
                        "true_index": i,
                        "attack_seed": s,
                        "nonce": nonces[t],
                        "best_index": r.best_index,
                        "decision": r.label,
                        "cos": r.score,
                        "group": r.group,
                        "scanned": r.candidates_scanned,
                        "stage": r.stage,
                    }
                )
    by_variant = {}
    for row in report.rows:
        if row["attack"] != "clean":
            by_variant.setdefault(row["variant"], []).append(row["accuracy"])
    report.summary = {f"{v}_attack_mean": float(np.mean(a)) for v, a in by_variant.items()}
    return report


def _hist(values, lo=-0.2, hi=1.0, bins=120):
    counts, edges = np.histogram(values, bins=bins, range=(lo, hi))
    return {"counts": counts.tolist(), "edges": edges.tolist()}


def run_separation(
    spec: CodebookSpec,
    trials: int,
    *,
    params: ChannelParams = ChannelParams(),
    geometry: RingGeometry | None = None,
    seed: int = 0,
    tau: float = 0.5,
    null_trials: int = 0,
) -> ExperimentReport:
    """Similarity of the generating noise, an attacker's chain and an unrelated noise to the reconstruction.

    The generating noise is the tensor actually fed to generation, identifier
    included. ``null_trials`` extra unrelated pairs estimate the false-positive
    rate at ``tau``.
    """
    geometry = geometry or RingGeometry.for_groups(spec.m)
    rng = np.random.default_rng(derived_seed(seed, 0))
    correct, chain, wrong = [], [], []
    for t in range(trials):
        i = sample_index(spec, rng)
        j = (i + 1 + int(rng.integers(0, spec.n - 1))) % spec.n if spec.n > 1 else i
        gen = generate_watermarked(spec, i, geometry, params)
        z_emb = gen.initial
        nonce = derived_seed(seed, 1, t)
        rec = invert_private(gen.image, params, nonce)
        forged = atk.reconstruction_forgery(gen.image, params, nonce)
        correct.append(cosine_similarity(z_emb, rec))
        chain.append(cosine_similarity(z_emb, invert_private(forged, params, nonce)))
        wrong.append(cosine_similarity(noise_for_index(spec, j), rec))
    correct, chain, wrong = map(np.asarray, (correct, chain, wrong))

    false_pos, null_max = 0, float("nan")
    if null_trials:
        nrng = np.random.default_rng(derived_seed(seed, 2))
        sims = []
        for t in range(null_trials):
            img = generate_unwatermarked(spec.shape, nrng)
            rec = invert_private(img, params, derived_seed(seed, 3, t))
            z = noise_for_index(spec, sample_index(spec, nrng))
            sims.append(cosine_similarity(z, rec))
        sims = np.asarray(sims)
        false_pos = int((sims >= tau).sum())
        null_max = float(sims.max())

    s = lambda a: float(a.std(ddof=1))
    pooled = np.sqrt((s(correct) ** 2 + s(wrong) ** 2) / 2)
    summary = {
        "correct_mean": float(correct.mean()),
        "correct_std": s(correct),
        "chain_mean": float(chain.mean()),
        "chain_std": s(chain),
        "random_mean": float(wrong.mean()),
        "random_std": s(wrong),
        "z_gap_pooled": float((correct.mean() - wrong.mean()) / pooled),
        "z_chain_below_tau": float((tau - chain.mean()) / s(chain)),
        "z_correct_above_tau": float((correct.mean() - tau) / s(correct)),
        "z_random_below_tau": float((tau - wrong.mean()) / s(wrong)),
        "null_trials": null_trials,
        "null_false_positives": false_pos,
        "null_max": null_max,
        "analytic_p_at_tau": null_pvalue(tau, spec.dim),
    }
    report = ExperimentReport(
        "separation",
        {"context": _context(spec, geometry, params), "trials": trials, "tau": tau, "null_trials": null_trials},
        {"seed": seed},
        summary=summary,
        series={"reconstructed": _hist(correct), "reconstruction_attack": _hist(chain), "random": _hist(wrong)},
    )
    report.trials = [
        {"trial": t, "correct": float(c), "chain": float(h), "random": float(w)}
        for t, (c, h, w) in enumerate(zip(correct, chain, wrong))
    ]
    return report


def run_steganalysis(
    spec: CodebookSpec,
    k_pairs: int,
    trials: int,
    *,
    cfg: DetectionConfig = DetectionConfig(variant=Variant.FULL),
    params: ChannelParams = ChannelParams(),
    geometry: RingGeometry | None = None,
    seed: int = 0,
    index: SketchIndex | None = None,
    source: NoiseSource | None = None,
) -> ExperimentReport:
    """Averaging attack per trial: estimate one group's pattern from ``k_pairs`` pairs, then forge and remove.

    Rates reported: identifier forgery (forged clean image decodes to the
    attacked group), identifier removal (cleaned watermarked image no longer
    decodes to it), full forgery (forged image declared watermarked) and full
    detection after removal (cleaned image still matched to its true index).
    """
    geometry = geometry or RingGeometry.for_groups(spec.m)
    source = source or NoiseSource(spec)
    rng = np.random.default_rng(derived_seed(seed, 0))
    forged_imgs, removed_imgs, removed_truth, recs = [], [], [], []
    id_forge, id_remove = [], []
    for t in range(trials):
        g = int(rng.integers(0, spec.m))
        members = np.arange(g, spec.n, spec.m)
        picks = rng.choice(members, size=k_pairs, replace=True)
        uniq, counts = np.unique(picks, return_counts=True)
        gens = {int(i): generate_watermarked(spec, int(i), geometry, params).image for i in uniq}
        watermarked = [gens[int(i)] for i in picks]
        clean = [generate_unwatermarked(spec.shape, rng) for _ in range(k_pairs)]
        est = atk.steganalysis_estimate(watermarked, clean)
        del watermarked, clean

        target = generate_unwatermarked(spec.shape, rng)
        forged = atk.steganalysis_forge(target, est)
        victim = int(rng.choice(members))
        removed = atk.steganalysis_remove(generate_watermarked(spec, victim, geometry, params).image, est)
        n1, n2 = derived_seed(seed, 1, t), derived_seed(seed, 2, t)
        g_forged, _ = extract(invert_private(forged, params, n1), spec.m, geometry, cfg.search)
        g_removed, _ = extract(invert_private(removed, params, n2), spec.m, geometry, cfg.search)
        id_forge.append(g_forged == g)
        id_remove.append(g_removed != g)
        forged_imgs.append((forged, n1))
        removed_imgs.append((removed, n2))
        removed_truth.append(victim)
        recs.append({"trial": t, "group": g, "victim": victim, "distinct_noises": int(len(uniq)),
                     "forged_group": g_forged, "removed_group": g_removed})

    res_f = detect_many([f for f, _ in forged_imgs], spec, cfg, params, [n for _, n in forged_imgs], index, source)
    res_r = detect_many([r for r, _ in removed_imgs], spec, cfg, params, [n for _, n in removed_imgs], index, source)
    full_forge = [r.decision for r in res_f]
    full_detect = [r.decision and r.index == v for r, v in zip(res_r, removed_truth)]
    for rec, rf, rr in zip(recs, res_f, res_r):
        rec.update({"forged_decision": rf.label, "forged_cos": rf.score,
                    "removed_decision": rr.label, "removed_index": rr.best_index, "removed_cos": rr.score})
    rate = lambda xs: float(np.mean(xs))
    summary = {
        "identifier_forgery_rate": rate(id_forge),
        "identifier_removal_rate": rate(id_remove),
        "full_forgery_rate": rate(full_forge),
        "full_detection_after_removal": rate(full_detect),
        "k_pairs": k_pairs,
        "trials": trials,
    }
    rows = []
    for name, xs in (("identifier_forgery", id_forge), ("identifier_removal", id_remove),
                     ("full_forgery", full_forge), ("full_detection_after_removal", full_detect)):
        lo, hi = wilson_interval(int(sum(xs)), len(xs))
        rows.append({"measure": name, "successes": int(sum(xs)), "trials": len(xs), "rate": rate(xs),
                     "ci_low": lo, "ci_high": hi})
    return ExperimentReport(
        "steganalysis",
        {"context": _context(spec, geometry, params), "detection": _detection_snapshot(cfg),
         "k_pairs": k_pairs, "trials": trials},
        {"seed": seed},
        rows=rows,
        summary=summary,
        trials=recs,
    )


def run_regeneration_curve(
    spec: CodebookSpec,
    max_iters: int = 50,
    trials: int = 100,
    *,
    checkpoints: Sequence[int] = (1, 10, 20, 30, 40, 50),
    cfg: DetectionConfig = DetectionConfig(variant=Variant.FULL),
    params: ChannelParams = ChannelParams(),
    geometry: RingGeometry | None = None,
    seed: int = 0,
    index: SketchIndex | None = None,
    source: NoiseSource | None = None,
) -> ExperimentReport:
    """Similarity after every regeneration step and detection accuracy at the checkpoints.

    Similarity is between the tensor fed to generation and the private
    reconstruction of the regenerated image.
    """
    geometry = geometry or RingGeometry.for_groups(spec.m)
    source = source or NoiseSource(spec)
    rng = np.random.default_rng(derived_seed(seed, 0))
    gens = [generate_watermarked(spec, sample_index(spec, rng), geometry, params) for _ in range(trials)]
    regen_nonces = [derived_seed(seed, 1, t) for t in range(trials)]
    inv_nonces = [derived_seed(seed, 2, t) for t in range(trials)]
    z_embs = [g.initial for g in gens]
    current = [g.image for g in gens]
    sims = np.zeros((max_iters, trials))
    rows = []
    for it in range(1, max_iters + 1):
        current = [atk.regenerate(img, 1, params, regen_nonces[t], start_step=it - 1) for t, img in enumerate(current)]
        recs = [invert_private(img, params, inv_nonces[t]) for t, img in enumerate(current)]
        sims[it - 1] = [cosine_similarity(z, r) for z, r in zip(z_embs, recs)]
        if it in checkpoints:
            res = detect_many(current, spec, cfg, params, inv_nonces, index, source)
            k = int(sum(r.best_index == g.index for r, g in zip(res, gens)))
            lo, hi = wilson_interval(k, trials)
            rows.append({"iteration": it, "similarity": float(sims[it - 1].mean()),
                         "similarity_std": float(sims[it - 1].std(ddof=1)), "correct": k, "trials": trials,
                         "accuracy": k / trials, "ci_low": lo, "ci_high": hi,
                         "declared": int(sum(r.decision for r in res))})
    means = sims.mean(axis=1)
    return ExperimentReport(
        "regeneration",
        {"context": _context(spec, geometry, params), "detection": _detection_snapshot(cfg),
         "max_iters": max_iters, "trials": trials, "checkpoints": list(checkpoints)},
        {"seed": seed},
        rows=rows,
        summary={"monotone_nonincreasing": bool(np.all(np.diff(means) <= 0)),
                 "similarity_iter1": float(means[0]), "similarity_last": float(means[-1])},
        series={"similarity": {"x": list(range(1, max_iters + 1)), "y": means.tolist()}},
    )


EXPERIMENTS: dict[str, Callable[..., ExperimentReport]] = {
    "robustness": run_robustness,
    "separation": run_separation,
    "steganalysis": run_steganalysis,
    "regeneration": run_regeneration_curve,
}
