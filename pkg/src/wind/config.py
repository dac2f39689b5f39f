"""Flat ``key = value`` configuration covering codebook, identifier, channel and detector."""

from __future__ import annotations

import hashlib
import os
from dataclasses import dataclass, fields, replace
from pathlib import Path

from wind.channel import ChannelParams
from wind.codebook import DEFAULT_SHAPE, CodebookSpec
from wind.detector import DetectionConfig, Variant
from wind.identifier import RingGeometry, SearchConfig, n_rings_for

SALT_ENV = "WIND_SALT_FILE"
CONFIG_VERSION = 1


class ConfigError(ValueError):
    """Missing or malformed configuration."""


def _floats(text: str) -> tuple[float, ...]:
    return tuple(float(v) for v in text.replace(",", " ").split())


def _bool(text: str) -> bool:
    low = text.strip().lower()
    if low in ("1", "true", "yes", "on"):
        return True
    if low in ("0", "false", "no", "off"):
        return False
    raise ConfigError(f"not a boolean: {text!r}")


@dataclass(frozen=True)
class WindConfig:
    n: int
    m: int
    salt: bytes
    shape: tuple[int, int, int] = DEFAULT_SHAPE
    salt_file: str = ""
    ring_channel: int = 0
    r_min: float = 4.0
    ring_width: float = 2.0
    amplitude: float = 64.0
    rho_private_mean: float = 0.888
    rho_private_spread: float = 0.05
    rho_public_mean: float = 0.166
    rho_public_spread: float = 0.06
    regen_decay: float = 0.955
    channel_seed: int = 0
    tau_cos: float = 0.5
    l2_gate: float | None = None
    variant: str = "fast"
    rotation_step_deg: float = 2.0
    window_size: int = 32
    window_stride: int = 8
    enable_rotation: bool = False
    enable_window: bool = True
    stage2_rotation_search: bool = True
    crop_fractions: tuple[float, ...] = (0.875, 0.75, 0.625, 0.5)
    shortlist_top_k: int = 32
    index_crossover: int = 4096
    k_dims: int = 256
    projection_seed: int = 0
    index_path: str = ""
    log_path: str = ""
    bench_trials: int = 100
    bench_attacks: tuple[str, ...] = ("rotate:75", "jpeg:25", "cropscale:0.75", "blur:8", "noise:0.1", "bright:6")
    # Original salt line, kept verbatim when the salt was overridden from the environment.
    salt_line: str = ""

    @property
    def spec(self) -> CodebookSpec:
        return CodebookSpec(self.n, self.m, self.salt, self.shape)

    @property
    def geometry(self) -> RingGeometry:
        return RingGeometry(self.ring_channel, self.r_min, self.ring_width, n_rings_for(self.m), self.amplitude)

    @property
    def channel(self) -> ChannelParams:
        return ChannelParams(
            self.rho_private_mean,
            self.rho_private_spread,
            self.rho_public_mean,
            self.rho_public_spread,
            self.regen_decay,
            self.channel_seed,
        )

    @property
    def search(self) -> SearchConfig:
        return SearchConfig(
            self.rotation_step_deg, self.window_size, self.window_stride, self.enable_rotation, self.enable_window
        )

    def detection(self, variant: str | None = None) -> DetectionConfig:
        return DetectionConfig(
            tau_cos=self.tau_cos,
            l2_gate=self.l2_gate,
            variant=Variant(variant or self.variant),
            search=self.search,
            stage2_rotation_search=self.stage2_rotation_search,
            geometry=self.geometry,
            crop_fractions=self.crop_fractions,
            shortlist_top_k=self.shortlist_top_k,
            index_crossover=self.index_crossover,
        )

    def with_channel(self, params: ChannelParams) -> "WindConfig":
        return replace(
            self,
            rho_private_mean=params.rho_private_mean,
            rho_private_spread=params.rho_private_spread,
            rho_public_mean=params.rho_public_mean,
            rho_public_spread=params.rho_public_spread,
            regen_decay=params.regen_decay,
            channel_seed=params.channel_seed,
        )

    def fingerprint(self) -> str:
        """Digest of everything except the salt value itself."""
        return hashlib.sha256(self.dumps(include_salt=False).encode() + self.spec.fingerprint).hexdigest()[:16]

    def dumps(self, include_salt: bool = True) -> str:
        lines = [f"version = {CONFIG_VERSION}"]
        for f in fields(self):
            v = getattr(self, f.name)
            if f.name == "salt_line":
                continue
            if f.name == "salt":
                if include_salt and self.salt_line:
                    lines.append(self.salt_line)
                elif include_salt and not self.salt_file:
                    lines.append(f"salt_hex = {v.hex()}")
                continue
            if f.name == "salt_file" and not v:
                continue
            if v is None:
                continue
            if isinstance(v, bool):
                v = "true" if v else "false"
            elif isinstance(v, tuple):
                v = " ".join(str(x) for x in v) if f.name != "bench_attacks" else ",".join(v)
            lines.append(f"{f.name} = {v}")
        return "\n".join(lines) + "\n"

    def save(self, path) -> None:
        path = Path(path)
        tmp = path.with_name(path.name + ".tmp")
        tmp.write_text(self.dumps())
        tmp.replace(path)


def parse_pairs(text: str) -> dict[str, str]:
    out = {}
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"line {lineno}: expected key = value")
        key, value = (s.strip() for s in line.split("=", 1))
        out[key] = value
    return out


def read_salt_file(path) -> bytes:
    try:
        text = Path(path).read_text().strip()
        return bytes.fromhex(text)
    except (OSError, ValueError) as exc:
        raise ConfigError(f"cannot read hex salt from {path}: {exc}") from exc


def load(path, env: dict | None = None) -> WindConfig:
    """Read a config file. ``WIND_SALT_FILE`` in ``env`` overrides the salt source."""
    env = os.environ if env is None else env
    path = Path(path)
    try:
        pairs = parse_pairs(path.read_text())
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from exc
    return from_pairs(pairs, base_dir=path.parent, env=env)


def from_pairs(pairs: dict[str, str], base_dir=Path("."), env: dict | None = None) -> WindConfig:
    env = {} if env is None else env
    pairs = dict(pairs)
    version = int(pairs.pop("version", CONFIG_VERSION))
    if version != CONFIG_VERSION:
        raise ConfigError(f"unsupported config version {version}")
    for key in ("n", "m"):
        if key not in pairs:
            raise ConfigError(f"missing required key {key!r}")

    salt_hex = pairs.pop("salt_hex", "")
    salt_file = pairs.get("salt_file", "")
    if env.get(SALT_ENV):
        salt = read_salt_file(env[SALT_ENV])
    elif salt_file:
        p = Path(salt_file)
        salt = read_salt_file(p if p.is_absolute() else Path(base_dir) / p)
    elif salt_hex:
        try:
            salt = bytes.fromhex(salt_hex)
        except ValueError as exc:
            raise ConfigError(f"salt_hex is not hex: {exc}") from exc
    else:
        raise ConfigError("config needs salt_hex or salt_file (or WIND_SALT_FILE)")

    kwargs: dict = {"salt": salt}
    if env.get(SALT_ENV):
        kwargs["salt_line"] = f"salt_hex = {salt_hex}" if salt_hex else f"# salt supplied by {SALT_ENV}"
    types = {f.name: f.type for f in fields(WindConfig)}
    for key, value in pairs.items():
        if key not in types or key == "salt_line":
            raise ConfigError(f"unknown config key {key!r}")
        t = types[key]
        try:
            if key == "shape":
                kwargs[key] = tuple(int(v) for v in _floats(value))
            elif key == "crop_fractions":
                kwargs[key] = _floats(value)
            elif key == "bench_attacks":
                kwargs[key] = tuple(a.strip() for a in value.split(",") if a.strip())
            elif key == "l2_gate":
                kwargs[key] = None if value.lower() in ("", "none") else float(value)
            else:
                cast = {"int": int, "float": float, "bool": _bool, "str": str}[str(t)]
                kwargs[key] = cast(value)
        except (ValueError, KeyError) as exc:
            raise ConfigError(f"bad value for {key!r}: {value!r}") from exc
    try:
        cfg = WindConfig(**kwargs)
        cfg.spec
        cfg.geometry.check_fits(cfg.shape)
        cfg.channel
        cfg.detection()
    except ValueError as exc:
        raise ConfigError(str(exc)) from exc
    return cfg
