"""Image-space attacks: common transformations, averaging steganalysis,
regeneration and reconstruction forgery.

Every attack acts on latent-shaped (C, H, W) arrays. Randomised attacks take
an explicit seed so any run can be replayed.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np
import scipy.fft as sfft
import scipy.ndimage as ndi

from wind import _geometry
from wind import channel as _channel
from wind.channel import ChannelParams

TRANSFORMS = ("rotate", "jpeg", "cropscale", "blur", "noise", "bright")
ADVERSARIAL = ("regen", "steganalysis", "forgery")

_ALIASES = {
    "rotation": "rotate",
    "crop": "cropscale",
    "crop_scale": "cropscale",
    "gaussnoise": "noise",
    "brightness": "bright",
    "regenerate": "regen",
    "steg": "steganalysis",
    "reconstruction": "forgery",
}

# Default strengths for the six transformations.
DEFAULT_BATTERY = ("rotate:75", "jpeg:25", "cropscale:0.75", "blur:8", "noise:0.1", "bright:6")


@dataclass(frozen=True)
class AttackSpec:
    """One attack and its parameter, e.g. ``AttackSpec("jpeg", 25)``.

    ``mode`` and ``pairs`` are used only by steganalysis.
    """

    kind: str
    value: float = 0.0
    mode: str = ""
    pairs: int = 0

    def __post_init__(self):
        kind = _ALIASES.get(self.kind.lower(), self.kind.lower())
        object.__setattr__(self, "kind", kind)
        v = self.value
        if kind == "rotate" and not 0 < v <= 360:
            raise ValueError(f"rotation must be in (0, 360], got {v}")
        elif kind == "jpeg" and not 1 <= v <= 100:
            raise ValueError(f"jpeg quality must be in [1, 100], got {v}")
        elif kind == "cropscale" and not 0 < v <= 1:
            raise ValueError(f"crop fraction must be in (0, 1], got {v}")
        elif kind == "blur" and (v < 1 or v != int(v)):
            raise ValueError(f"blur kernel must be a positive integer, got {v}")
        elif kind in ("noise", "bright") and v < 0:
            raise ValueError(f"{kind} parameter must be non-negative, got {v}")
        elif kind == "regen" and (v < 1 or v != int(v)):
            raise ValueError(f"regeneration iterations must be a positive integer, got {v}")
        elif kind == "steganalysis":
            if self.mode not in ("forge", "remove"):
                raise ValueError("steganalysis mode must be 'forge' or 'remove'")
            if self.pairs < 1:
                raise ValueError("steganalysis needs at least one pair")
        elif kind not in TRANSFORMS + ADVERSARIAL:
            raise ValueError(f"unknown attack kind {self.kind!r}")

    @classmethod
    def parse(cls, text: str) -> "AttackSpec":
        """Parse ``kind:value`` strings such as ``rotate:75`` or ``steganalysis:forge:512``."""
        parts = text.strip().split(":")
        kind = _ALIASES.get(parts[0].lower(), parts[0].lower())
        if kind == "steganalysis":
            if len(parts) != 3:
                raise ValueError("expected steganalysis:<forge|remove>:<pairs>")
            return cls(kind, mode=parts[1], pairs=int(parts[2]))
        if kind == "forgery":
            return cls(kind)
        if len(parts) != 2:
            raise ValueError(f"expected kind:value, got {text!r}")
        return cls(kind, float(parts[1]))

    def __str__(self) -> str:
        if self.kind == "steganalysis":
            return f"steganalysis:{self.mode}:{self.pairs}"
        if self.kind == "forgery":
            return "forgery"
        return f"{self.kind}:{self.value:g}"

    @property
    def is_transform(self) -> bool:
        return self.kind in TRANSFORMS


def jpeg_like(x: np.ndarray, quality: float) -> np.ndarray:
    """Blockwise 8x8 orthonormal DCT quantised with a flat table scaled by 50/quality."""
    step = 50.0 / quality
    c, h, w = x.shape
    ph, pw = -h % 8, -w % 8
    padded = np.pad(x, ((0, 0), (0, ph), (0, pw)), mode="reflect") if ph or pw else x
    hh, ww = padded.shape[1:]
    blocks = padded.reshape(c, hh // 8, 8, ww // 8, 8).transpose(0, 1, 3, 2, 4)
    coef = sfft.dctn(blocks, axes=(-2, -1), norm="ortho")
    coef = np.round(coef / step) * step
    out = sfft.idctn(coef, axes=(-2, -1), norm="ortho")
    out = out.transpose(0, 1, 3, 2, 4).reshape(c, hh, ww)
    return out[:, :h, :w]


def crop_scale(x: np.ndarray, fraction: float, rng: np.random.Generator) -> tuple[np.ndarray, tuple[int, int, int]]:
    """Crop ``round(fraction * H)`` pixels at a uniform offset and rescale back.

    Returns the attacked tensor and ``(offset_y, offset_x, size)``.
    """
    _, h, w = x.shape
    size = max(1, int(round(fraction * min(h, w))))
    oy = int(rng.integers(0, h - size + 1))
    ox = int(rng.integers(0, w - size + 1))
    crop = x[:, oy:oy + size, ox:ox + size]
    return _geometry.resize(crop, (h, w)), (oy, ox, size)


def apply_transform(img: np.ndarray, spec: AttackSpec | str, seed: int = 0) -> np.ndarray:
    """Apply one of the six image transformations.

    Randomised transformations (crop offset, noise, brightness factor) draw
    from ``default_rng(seed)``.
    """
    if isinstance(spec, str):
        spec = AttackSpec.parse(spec)
    if not spec.is_transform:
        raise ValueError(f"{spec} is not an image transformation")
    x = np.asarray(img, dtype=np.float64)
    rng = np.random.default_rng(seed)
    if spec.kind == "rotate":
        out = _geometry.rotate(x, spec.value)
    elif spec.kind == "jpeg":
        out = jpeg_like(x, spec.value)
    elif spec.kind == "cropscale":
        out, _ = crop_scale(x, spec.value, rng)
    elif spec.kind == "blur":
        k = int(spec.value)
        out = ndi.uniform_filter(x, size=(1, k, k), mode="reflect")
    elif spec.kind == "noise":
        out = x + spec.value * rng.standard_normal(x.shape) if spec.value else x.copy()
    else:
        out = x * rng.uniform(0.0, spec.value)
    return out


@dataclass(frozen=True)
class PatternEstimate:
    """Mean difference between watermarked and clean images."""

    data: np.ndarray
    k: int


def steganalysis_estimate(watermarked: Sequence[np.ndarray], clean: Sequence[np.ndarray]) -> PatternEstimate:
    if len(watermarked) == 0 or len(clean) == 0:
        raise ValueError("steganalysis needs at least one watermarked and one clean image")
    wm = np.mean(np.asarray(watermarked, dtype=np.float64), axis=0)
    cl = np.mean(np.asarray(clean, dtype=np.float64), axis=0)
    if wm.shape != cl.shape:
        raise ValueError("watermarked and clean images differ in shape")
    return PatternEstimate(wm - cl, min(len(watermarked), len(clean)))


def _check_shape(img, est):
    if np.shape(img) != est.data.shape:
        raise ValueError(f"shape mismatch: image {np.shape(img)} vs estimate {est.data.shape}")


def steganalysis_forge(target: np.ndarray, est: PatternEstimate) -> np.ndarray:
    _check_shape(target, est)
    return np.asarray(target, dtype=np.float64) + est.data


def steganalysis_remove(img: np.ndarray, est: PatternEstimate) -> np.ndarray:
    _check_shape(img, est)
    return np.asarray(img, dtype=np.float64) - est.data


def regenerate(
    img: np.ndarray, iterations: int, params: ChannelParams, nonce: int = 0, start_step: int = 0
) -> np.ndarray:
    return _channel.regenerate(img, iterations, params, nonce, start_step)


def reconstruction_forgery(img: np.ndarray, params: ChannelParams, nonce: int | None = None) -> np.ndarray:
    """Recover the noise with the public model and generate from it again."""
    return _channel.generate(_channel.invert_public(img, params, nonce), params)


def apply_attack(img: np.ndarray, spec: AttackSpec | str, seed: int = 0, params: ChannelParams | None = None) -> np.ndarray:
    """Apply a transformation, a regeneration or a reconstruction forgery to one image.

    Steganalysis needs whole image sets and is not available here.
    """
    if isinstance(spec, str):
        spec = AttackSpec.parse(spec)
    if spec.is_transform:
        return apply_transform(img, spec, seed)
    params = params or ChannelParams()
    if spec.kind == "regen":
        return regenerate(img, int(spec.value), params, seed)
    if spec.kind == "forgery":
        return reconstruction_forgery(img, params, seed)
    raise ValueError(f"{spec} needs image sets; use the steganalysis functions")
