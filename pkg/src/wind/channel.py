"""Synthetic generation and inversion channel.

Generation is the identity in latent coordinates. All loss of the round trip
is charged to inversion, which mixes the normalised image with fresh noise at
a per-image correlation ``rho``. The statistics of ``rho`` are the only knobs,
and :func:`calibrate` fits them to target similarity bands.
"""

from __future__ import annotations

import hashlib
from dataclasses import asdict, dataclass, replace

import numpy as np
from scipy import stats

ROLE_PRIVATE = 1
ROLE_PUBLIC = 2
ROLE_REGEN = 3


class ChannelError(ValueError):
    """Input the channel cannot invert."""


class CalibrationError(RuntimeError):
    """Calibration did not converge within the allowed rounds."""


@dataclass(frozen=True)
class ChannelParams:
    rho_private_mean: float = 0.888
    rho_private_spread: float = 0.05
    rho_public_mean: float = 0.166
    rho_public_spread: float = 0.06
    regen_decay: float = 0.955
    channel_seed: int = 0

    def __post_init__(self):
        for name in ("rho_private_mean", "rho_public_mean"):
            v = getattr(self, name)
            if not 0.0 <= v <= 1.0:
                raise ValueError(f"{name} must lie in [0, 1], got {v}")
        for name in ("rho_private_spread", "rho_public_spread"):
            v = getattr(self, name)
            if not 0.0 <= v < 1.0:
                raise ValueError(f"{name} must lie in [0, 1), got {v}")
        if not 0.0 < self.regen_decay <= 1.0:
            raise ValueError(f"regen_decay must lie in (0, 1], got {self.regen_decay}")
        if not 0 <= self.channel_seed < 2**64:
            raise ValueError("channel_seed must be an unsigned 64-bit integer")

    def to_dict(self) -> dict:
        return asdict(self)


def channel_rng(params: ChannelParams, role: int, nonce: int, step: int = 0) -> np.random.Generator:
    """Generator keyed by (channel_seed, role, nonce, step)."""
    return np.random.default_rng(np.random.SeedSequence([params.channel_seed, role, int(nonce), step]))


def nonce_for(x: np.ndarray) -> int:
    """Content-derived nonce, used when the caller does not supply one."""
    data = np.ascontiguousarray(x, dtype="<f8").tobytes()
    return int.from_bytes(hashlib.sha256(data).digest()[:8], "little")


def draw_rho(mean: float, spread: float, u: float) -> float:
    """Quantile ``u`` of Normal(mean, spread) truncated to (0, 1).

    With zero spread the mean is returned unchanged, so 0 and 1 are reachable.
    """
    if spread == 0.0:
        return float(mean)
    a, b = (0.0 - mean) / spread, (1.0 - mean) / spread
    return float(stats.truncnorm.ppf(u, a, b, loc=mean, scale=spread))


def normalise(img: np.ndarray) -> np.ndarray:
    x = np.asarray(img, dtype=np.float64)
    if not np.all(np.isfinite(x)):
        raise ChannelError("input contains non-finite values")
    std = x.std()
    if std == 0.0:
        raise ChannelError("input has zero variance")
    return x / std


def mix(img: np.ndarray, rho: float, rng: np.random.Generator) -> np.ndarray:
    """``rho * normalise(img) + sqrt(1 - rho^2) * eps``."""
    x = normalise(img)
    eps = rng.standard_normal(x.shape)
    return rho * x + np.sqrt(max(0.0, 1.0 - rho * rho)) * eps


def generate(z_emb: np.ndarray, params: ChannelParams | None = None, nonce: int = 0) -> np.ndarray:
    """Latent-space generation: the identity, returned as a fresh array."""
    out = np.array(z_emb, dtype=np.float64, copy=True)
    if not np.all(np.isfinite(out)):
        raise ChannelError("input contains non-finite values")
    return out


def _invert(img, mean, spread, params, role, nonce):
    if nonce is None:
        nonce = nonce_for(img)
    rng = channel_rng(params, role, nonce)
    rho = draw_rho(mean, spread, rng.random())
    return mix(img, rho, rng)


def invert_private(img: np.ndarray, params: ChannelParams, nonce: int | None = None) -> np.ndarray:
    """Owner's reconstruction of the initial noise from an image."""
    return _invert(img, params.rho_private_mean, params.rho_private_spread, params, ROLE_PRIVATE, nonce)


def invert_public(img: np.ndarray, params: ChannelParams, nonce: int | None = None) -> np.ndarray:
    """Attacker's reconstruction through a mismatched public model."""
    return _invert(img, params.rho_public_mean, params.rho_public_spread, params, ROLE_PUBLIC, nonce)


def regenerate(
    img: np.ndarray, iterations: int, params: ChannelParams, nonce: int = 0, start_step: int = 0
) -> np.ndarray:
    """Iterated noise-and-resynthesise; correlation with the input decays by ``regen_decay`` per step.

    ``start_step`` continues an earlier chain: regenerating k steps and then
    j more from ``start_step=k`` equals regenerating k + j steps at once.
    """
    if iterations < 1:
        raise ValueError("iterations must be >= 1")
    out = np.asarray(img, dtype=np.float64)
    for step in range(start_step, start_step + iterations):
        out = mix(out, params.regen_decay, channel_rng(params, ROLE_REGEN, nonce, step))
    return out


@dataclass
class SyntheticChannel:
    """Bundles the channel operations with one parameter set."""

    params: ChannelParams = ChannelParams()

    def generate(self, z_emb, nonce: int = 0):
        return generate(z_emb, self.params, nonce)

    def invert_private(self, img, nonce: int | None = None):
        return invert_private(img, self.params, nonce)

    def invert_public(self, img, nonce: int | None = None):
        return invert_public(img, self.params, nonce)

    def regenerate(self, img, iterations: int, nonce: int = 0):
        return regenerate(img, iterations, self.params, nonce)


def _cos(a: np.ndarray, b: np.ndarray) -> float:
    a, b = a.ravel(), b.ravel()
    return float(a @ b / np.sqrt((a @ a) * (b @ b)))


def observed_stats(role: str, params: ChannelParams, noises: np.ndarray, nonce0: int = 0) -> tuple[float, float]:
    """Mean and std of the similarity a role produces over the given noises.

    ``private``: noise vs private inversion. ``public``: noise vs private
    inversion of the attacker's public round trip. ``regen``: noise vs private
    inversion after one regeneration step.
    """
    sims = []
    for k, z in enumerate(noises):
        nonce = nonce0 + k
        if role == "private":
            rec = invert_private(z, params, nonce)
        elif role == "public":
            rec = invert_private(generate(invert_public(z, params, nonce)), params, nonce)
        elif role == "regen":
            rec = invert_private(regenerate(z, 1, params, nonce), params, nonce)
        else:
            raise ValueError(f"unknown role {role!r}")
        sims.append(_cos(z, rec))
    sims = np.asarray(sims)
    return float(sims.mean()), float(sims.std(ddof=1))


def calibrate(
    targets: dict[str, tuple[float, float]],
    trials: int = 500,
    base: ChannelParams | None = None,
    shape: tuple[int, int, int] = (4, 64, 64),
    tol: float = 0.002,
    max_rounds: int = 40,
    seed: int = 0,
) -> ChannelParams:
    """Fit channel parameters so observed similarity statistics hit ``targets``.

    ``targets`` maps a role (``private``, ``public``, ``regen``) to a
    ``(mean, std)`` pair. Roles are fitted in that order since the public and
    regeneration chains pass through the private inversion. The same noises and
    nonces are reused every round, so the objective is deterministic. For the
    ``regen`` role only the decay is fitted; its std is not a free parameter.

    Raises:
        CalibrationError: if any role misses its target after ``max_rounds``.
    """
    if trials < 100:
        raise ValueError("calibration needs at least 100 trials")
    params = base or ChannelParams()
    noises = np.random.default_rng(seed).standard_normal((trials, *shape))

    for role in ("private", "public", "regen"):
        if role not in targets:
            continue
        t_mean, t_std = targets[role]
        if role == "private" and t_std == 0.0 and t_mean in (0.0, 1.0):
            params = replace(params, rho_private_mean=t_mean, rho_private_spread=0.0)
            continue
        if role == "public" and t_std == 0.0 and t_mean == 0.0:
            params = replace(params, rho_public_mean=0.0, rho_public_spread=0.0)
            continue
        for _ in range(max_rounds):
            o_mean, o_std = observed_stats(role, params, noises)
            fit_mean = abs(o_mean - t_mean) <= tol
            fit_std = role == "regen" or abs(o_std - t_std) <= tol
            if fit_mean and fit_std:
                break
            params = _refine(role, params, o_mean, o_std, t_mean, t_std)
        else:
            raise CalibrationError(
                f"role {role!r} did not reach target ({t_mean}, {t_std}) in {max_rounds} rounds"
            )
    return params


def _refine(role, params, o_mean, o_std, t_mean, t_std) -> ChannelParams:
    clip = lambda v, hi=0.999: float(min(max(v, 1e-4), hi))
    if role == "private":
        mean = clip(params.rho_private_mean * t_mean / max(o_mean, 1e-6), 1.0)
        spread = clip(params.rho_private_spread * t_std / max(o_std, 1e-6) if params.rho_private_spread else t_std)
        return replace(params, rho_private_mean=mean, rho_private_spread=spread)
    if role == "public":
        mean = clip(params.rho_public_mean * t_mean / max(o_mean, 1e-6), 1.0)
        spread = clip(params.rho_public_spread * t_std / max(o_std, 1e-6) if params.rho_public_spread else t_std)
        return replace(params, rho_public_mean=mean, rho_public_spread=spread)
    decay = clip(params.regen_decay * t_mean / max(o_mean, 1e-6), 1.0)
    return replace(params, regen_decay=decay)
