"""Command-line interface: ``wind gen|detect|attack|bench|calibrate|log|init``."""

from __future__ import annotations

import argparse
import hashlib
import json
import secrets
import sys
from contextlib import nullcontext
from dataclasses import replace
from pathlib import Path

import numpy as np

from wind import attacks as atk
from wind import config as wconfig
from wind import evalharness as harness
from wind.channel import calibrate as calibrate_channel
from wind.codebook import NoiseSource
from wind.detector import Variant, calibrate_l2_gate, detect
from wind.generation import generate_watermarked, sample_index
from wind.identifier import calibrate_amplitude
from wind.sim_index import SketchIndex
from wind.store import GenerationLog, GenerationRecord, TensorFormatError, now, read_tensor, write_tensor

EXIT_WATERMARKED, EXIT_NOT_WATERMARKED, EXIT_ERROR = 0, 1, 2

DEFAULT_TARGETS = {"private": (0.888, 0.053), "public": (0.166, 0.063)}


class CliError(Exception):
    pass


def _print(obj) -> None:
    print(json.dumps(harness._jsonable(obj), sort_keys=True))


def _load_config(args) -> wconfig.WindConfig:
    if not args.config:
        raise CliError("--config is required for this command")
    return wconfig.load(args.config)


def _log_path(args, cfg) -> Path | None:
    path = getattr(args, "log", None) or cfg.log_path
    if not path:
        return None
    p = Path(path)
    return p if p.is_absolute() or not args.config else Path(args.config).parent / p


def cmd_init(args) -> int:
    out = Path(args.out)
    if out.exists() and not args.force:
        raise CliError(f"{out} exists; pass --force to overwrite")
    salt = secrets.token_bytes(32)
    cfg = wconfig.WindConfig(n=args.n, m=args.m, salt=salt)
    if args.salt_file:
        sf = Path(args.salt_file)
        sf.write_text(salt.hex() + "\n")
        cfg = replace(cfg, salt_file=str(sf))
    cfg.save(out)
    _print({"config": str(out), "n": cfg.n, "m": cfg.m, "fingerprint": cfg.fingerprint()})
    return 0


def cmd_gen(args) -> int:
    cfg = _load_config(args)
    spec, geo, params = cfg.spec, cfg.geometry, cfg.channel
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    rng = np.random.default_rng(args.seed)
    prompt_hash = hashlib.sha256(args.prompt.encode()).hexdigest() if args.prompt else ""
    records = []
    for k in range(args.count):
        i = sample_index(spec, rng)
        nonce = harness.derived_seed(args.seed, k)
        gen = generate_watermarked(spec, i, geo, params, nonce)
        path = out / f"gen_{args.seed}_{k:05d}.wndt"
        write_tensor(path, gen.image)
        records.append(
            GenerationRecord(now(), 0, i, gen.group, nonce, cfg.fingerprint(), prompt_hash, str(path))
        )
    log_path = _log_path(args, cfg)
    if log_path is not None:
        records = GenerationLog(log_path).append(records)
    for r in records:
        _print({"path": r.path, "index": r.index, "group": r.group, "nonce": r.nonce, "seq": r.seq})
    return 0


def _index_for(args, cfg, spec, source):
    path = args.index or (cfg.index_path if args.use_config_index else "")
    if not path:
        return None
    p = Path(path)
    if p.exists():
        return SketchIndex.load(p, spec)
    index = SketchIndex.build(spec, cfg.k_dims, cfg.projection_seed, source=source)
    index.save(p)
    return index


def cmd_detect(args) -> int:
    cfg = _load_config(args)
    spec = cfg.spec
    img = read_tensor(args.path)
    if img.shape != spec.shape:
        raise CliError(f"tensor shape {img.shape} does not match codebook shape {spec.shape}")
    source = NoiseSource(spec)
    index = _index_for(args, cfg, spec, source)
    dcfg = cfg.detection(args.variant)
    result = detect(img, spec, dcfg, cfg.channel, args.nonce, index, source)
    record = result.to_record()
    record["path"] = str(args.path)
    _print(record)
    return EXIT_WATERMARKED if result.decision else EXIT_NOT_WATERMARKED


def cmd_attack(args) -> int:
    cfg = _load_config(args) if args.config else None
    spec = atk.AttackSpec.parse(args.spec)
    src = Path(args.path)
    img = read_tensor(src).astype(np.float64)
    params = cfg.channel if cfg else None
    out_img = atk.apply_attack(img, spec, args.seed, params)
    out = Path(args.out)
    write_tensor(out, out_img)
    provenance = {
        "source": str(src),
        "source_sha256": hashlib.sha256(src.read_bytes()).hexdigest(),
        "attack": str(spec),
        "seed": args.seed,
        "output": str(out),
    }
    out.with_name(out.name + ".json").write_text(json.dumps(provenance, sort_keys=True, indent=2))
    _print(provenance)
    return 0


def _bench_kwargs(cfg, experiment: str, args) -> dict:
    trials = args.trials or cfg.bench_trials
    if experiment == "robustness":
        return {"attacks": list(cfg.bench_attacks), "trials": trials, "variants": ["fast", "full"]}
    if experiment == "separation":
        return {"trials": trials, "null_trials": args.null_trials}
    if experiment == "steganalysis":
        return {"k_pairs": args.pairs, "trials": trials}
    if experiment == "regeneration":
        return {"max_iters": args.max_iters, "trials": trials}
    raise CliError(f"unknown experiment {experiment!r}")


def _run_experiment(cfg, experiment: str, kwargs: dict, seed: int, index, source):
    spec, geo, params = cfg.spec, cfg.geometry, cfg.channel
    common = {"params": params, "geometry": geo, "seed": seed}
    full = cfg.detection("full")
    if experiment == "robustness":
        variants = {v: cfg.detection(v) for v in kwargs["variants"]}
        return harness.run_robustness(spec, variants, kwargs["attacks"], kwargs["trials"],
                                      index=index, source=source, **common)
    if experiment == "separation":
        return harness.run_separation(spec, kwargs["trials"], null_trials=kwargs["null_trials"],
                                      tau=cfg.tau_cos, **common)
    if experiment == "steganalysis":
        return harness.run_steganalysis(spec, kwargs["k_pairs"], kwargs["trials"], cfg=full,
                                        index=index, source=source, **common)
    if experiment == "regeneration":
        return harness.run_regeneration_curve(spec, kwargs["max_iters"], kwargs["trials"], cfg=full,
                                              index=index, source=source, **common)
    raise CliError(f"unknown experiment {experiment!r}")


def cmd_bench(args) -> int:
    cfg = _load_config(args)
    spec = cfg.spec
    source = NoiseSource(spec, cache_bytes=args.cache_mb << 20)
    index = _index_for(args, cfg, spec, source)
    if args.replay:
        manifest = json.loads(Path(args.replay).read_text())
        inv = manifest["invocation"]
        if inv["config_fingerprint"] != cfg.fingerprint():
            raise CliError("config does not match the one recorded in the manifest")
        report = _run_experiment(cfg, inv["experiment"], inv["kwargs"], inv["seed"], index, source)
        same = report.results_hash() == manifest["results_hash"]
        _print({"experiment": inv["experiment"], "replayed": same, "results_hash": report.results_hash()})
        return 0 if same else 1
    out = Path(args.out)
    for experiment in args.experiments.split(","):
        experiment = experiment.strip()
        kwargs = _bench_kwargs(cfg, experiment, args)
        report = _run_experiment(cfg, experiment, kwargs, args.seed, index, source)
        report.invocation = {"experiment": experiment, "kwargs": kwargs, "seed": args.seed,
                             "config_fingerprint": cfg.fingerprint()}
        paths = report.write(out, svg=args.svg)
        _print({"experiment": experiment, "summary": report.summary, "rows": len(report.rows),
                "manifest": str(paths["manifest"]), "results_hash": report.results_hash()})
    return 0


def _parse_target(text: str) -> tuple[str, tuple[float, float]]:
    try:
        role, values = text.split("=", 1)
        mean, std = (float(v) for v in values.split(","))
    except ValueError as exc:
        raise CliError(f"targets look like role=mean,std, got {text!r}") from exc
    return role.strip(), (mean, std)


def cmd_calibrate(args) -> int:
    cfg = _load_config(args)
    targets = dict(DEFAULT_TARGETS)
    targets.update(_parse_target(t) for t in args.target or [])
    params = calibrate_channel(targets, args.trials, cfg.channel, cfg.shape, seed=args.seed)
    new = cfg.with_channel(params)
    amplitude = calibrate_amplitude(cfg.shape, cfg.m, replace(cfg.geometry, amplitude=1.0), seed=args.seed)
    new = replace(new, amplitude=amplitude)
    if args.l2_gate:
        gate = calibrate_l2_gate(new.spec, params, new.geometry, seed=args.seed)
        new = replace(new, l2_gate=gate)
    if not args.dry_run:
        new.save(args.config)
    _print({"channel": params.to_dict(), "amplitude": amplitude, "l2_gate": new.l2_gate,
            "targets": targets, "written": not args.dry_run})
    return 0


def cmd_log(args) -> int:
    cfg = _load_config(args)
    path = _log_path(args, cfg)
    if path is None:
        raise CliError("no log path configured; pass --log")
    log = GenerationLog(path)
    result = log.read()
    if result.skipped_tail or result.skipped_lines:
        print(f"warning: skipped torn tail={result.skipped_tail} bad lines={result.skipped_lines}", file=sys.stderr)
    for rec in log.query(args.index, args.since, args.until):
        _print(rec.__dict__)
    return 0


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="wind", description="Seeded-noise watermark generation and detection.")
    p.add_argument("--config", help="config file (key = value)")
    p.add_argument("--seed", type=int, default=0, help="run seed (unsigned 64-bit)")
    p.add_argument("--threads", type=int, default=None, help="cap on BLAS/FFT threads")
    sub = p.add_subparsers(dest="command", required=True)

    s = sub.add_parser("init", help="write a fresh config with a random salt")
    s.add_argument("--out", required=True)
    s.add_argument("--n", type=int, default=100_000)
    s.add_argument("--m", type=int, default=2048)
    s.add_argument("--salt-file", help="keep the salt in this file instead of the config")
    s.add_argument("--force", action="store_true")
    s.set_defaults(func=cmd_init)

    s = sub.add_parser("gen", help="generate watermarked latent tensors")
    s.add_argument("--count", type=int, default=1)
    s.add_argument("--out", required=True)
    s.add_argument("--log", help="generation log (overrides log_path)")
    s.add_argument("--prompt", default="", help="opaque label, stored only as a hash")
    s.set_defaults(func=cmd_gen)

    s = sub.add_parser("detect", help="detect a watermark in a tensor file")
    s.add_argument("path")
    s.add_argument("--variant", choices=[v.value for v in Variant], default=None)
    s.add_argument("--index", help="sketch index file; built if missing")
    s.add_argument("--use-config-index", action="store_true", help="use index_path from the config")
    s.add_argument("--nonce", type=int, default=None, help="channel nonce (default: content hash)")
    s.set_defaults(func=cmd_detect)

    s = sub.add_parser("attack", help="apply an attack such as rotate:75 to a tensor file")
    s.add_argument("path")
    s.add_argument("spec")
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_attack)

    s = sub.add_parser("bench", help="run experiments and write reports")
    s.add_argument("--experiments", default="robustness,separation,steganalysis,regeneration")
    s.add_argument("--out", default="bench_out")
    s.add_argument("--trials", type=int, default=None)
    s.add_argument("--null-trials", type=int, default=1000)
    s.add_argument("--pairs", type=int, default=512)
    s.add_argument("--max-iters", type=int, default=50)
    s.add_argument("--index", help="sketch index file; built if missing")
    s.add_argument("--use-config-index", action="store_true")
    s.add_argument("--cache-mb", type=int, default=1024, help="keep the codebook in memory up to this size")
    s.add_argument("--svg", action="store_true")
    s.add_argument("--replay", help="manifest to replay; exits 0 when results match")
    s.set_defaults(func=cmd_bench)

    s = sub.add_parser("calibrate", help="fit channel parameters and amplitude, rewrite the config")
    s.add_argument("--target", action="append", help="role=mean,std (roles: private, public, regen)")
    s.add_argument("--trials", type=int, default=500)
    s.add_argument("--l2-gate", action="store_true", help="also pin the l2 gate")
    s.add_argument("--dry-run", action="store_true")
    s.set_defaults(func=cmd_calibrate)

    s = sub.add_parser("log", help="query the generation log")
    s.add_argument("--log")
    s.add_argument("--index", type=int)
    s.add_argument("--since", type=float)
    s.add_argument("--until", type=float)
    s.set_defaults(func=cmd_log)
    return p


def _thread_limit(n):
    if not n:
        return nullcontext()
    try:
        from threadpoolctl import threadpool_limits
    except ImportError:
        return nullcontext()
    return threadpool_limits(n)


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    if not 0 <= args.seed < 2**64:
        print("error: --seed must be an unsigned 64-bit integer", file=sys.stderr)
        return EXIT_ERROR
    try:
        with _thread_limit(args.threads):
            return args.func(args)
    except (CliError, wconfig.ConfigError, TensorFormatError, ValueError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_ERROR


if __name__ == "__main__":
    sys.exit(main())
