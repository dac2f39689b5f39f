"""Watermarked generation: pick an index, derive its noise, stamp the group, generate."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from wind.channel import ChannelParams, generate
from wind.codebook import CodebookSpec, group_of, noise_for_index
from wind.identifier import RingGeometry, embed


@dataclass(frozen=True)
class Generation:
    """``noise`` is the codebook entry, ``initial`` the tensor actually fed to generation."""

    index: int
    group: int
    nonce: int
    noise: np.ndarray
    initial: np.ndarray
    image: np.ndarray


def sample_index(spec: CodebookSpec, rng: np.random.Generator) -> int:
    """Uniform index in [0, N); the caller owns and records the generator seed."""
    return int(rng.integers(0, spec.n))


def generate_watermarked(
    spec: CodebookSpec,
    index: int,
    geometry: RingGeometry | None = None,
    params: ChannelParams | None = None,
    nonce: int = 0,
) -> Generation:
    """Image generated from codebook noise ``index`` with its group stamped in."""
    geo = geometry or RingGeometry.for_groups(spec.m)
    z = noise_for_index(spec, index)
    g = group_of(index, spec.m)
    initial = embed(z, g, geo)
    return Generation(index, g, nonce, z, initial, generate(initial, params, nonce))


def generate_unwatermarked(shape: tuple[int, int, int], rng: np.random.Generator) -> np.ndarray:
    """Image from fresh, non-codebook Gaussian noise."""
    return generate(rng.standard_normal(shape))
