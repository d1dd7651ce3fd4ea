"""Optical-to-SAR image bridge via fully developed multiplicative speckle.

SAR intensity is modeled as clean reflectivity times unit-mean Gamma noise:
I = R * S with S ~ Gamma(shape=L, rate=L), so E[S] = 1 and Var[S] = 1/L.
Higher look counts L mean weaker speckle.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import ConfigurationError, DataError

LUMINANCE_MODES = ("per_channel", "luminance_then_replicate")

# Diagnostic only: number of optical_to_sar calls that had to clamp negative
# input pixels. Not synchronized; meaningful in single-writer use.
_negative_clamp_count = 0


def negative_clamp_count() -> int:
    return _negative_clamp_count


def reset_negative_clamp_count() -> None:
    global _negative_clamp_count
    _negative_clamp_count = 0


@dataclass(frozen=True)
class SpeckleConfig:
    """Number of looks, seed, and channel handling for the speckle bridge.

    The default L = 1 is the strongest (single-look) speckle; it is a
    deliberate worst-case bridge setting and can be raised for ablation.
    """

    looks: float = 1.0
    seed: int = 0
    luminance_mode: str = "luminance_then_replicate"

    def __post_init__(self):
        if not (self.looks > 0):
            raise ConfigurationError(f"looks must be positive, got {self.looks}")
        if self.luminance_mode not in LUMINANCE_MODES:
            raise ConfigurationError(
                f"luminance_mode must be one of {LUMINANCE_MODES}, got {self.luminance_mode!r}"
            )


def _resolve_rng(config: SpeckleConfig, rng: np.random.Generator | None) -> np.random.Generator:
    if rng is not None:
        return rng
    return np.random.default_rng(config.seed)


def sample_speckle(
    shape: tuple[int, ...],
    config: SpeckleConfig,
    rng: np.random.Generator | None = None,
) -> np.ndarray:
    """Draw i.i.d. unit-mean Gamma(L, rate=L) speckle of the given shape.

    Integer look counts are sampled exactly as a sum of L unit-mean
    exponentials; non-integer L falls back to the generic Gamma sampler.
    Passing an explicit ``rng`` lets a training loop resample fresh speckle
    each iteration while staying reproducible.
    """
    if len(shape) == 0:
        raise ValueError("shape must have at least one dimension")
    if any(int(s) < 1 for s in shape):
        raise ValueError(f"all shape entries must be >= 1, got {shape}")
    shape = tuple(int(s) for s in shape)
    gen = _resolve_rng(config, rng)
    looks = config.looks
    if float(looks).is_integer():
        n = int(looks)
        draws = gen.standard_exponential(size=(n,) + shape)
        s = draws.sum(axis=0) / n
    else:
        s = gen.gamma(shape=looks, scale=1.0 / looks, size=shape)
    return s.astype(np.float32)


def optical_to_sar(
    optical: np.ndarray,
    config: SpeckleConfig,
    rng: np.random.Generator | None = None,
    clamp_negative: bool = True,
) -> np.ndarray:
    """Corrupt a clean optical image into a simulated SAR intensity image.

    ``optical`` is (C, H, W) or (H, W), values expected in [0, inf). In
    ``luminance_then_replicate`` mode the channels are first averaged into a
    single luminance plane, speckled once, and replicated back to the input
    channel count (single-look SAR has one physical channel). ``per_channel``
    speckles every channel independently.

    Output has the input's shape, is nonnegative, and is deliberately not
    re-clipped to [0, 1]: speckle legitimately exceeds the clean intensity.
    """
    global _negative_clamp_count
    optical = np.asarray(optical, dtype=np.float32)
    if optical.ndim not in (2, 3):
        raise ValueError(f"expected (H, W) or (C, H, W) image, got shape {optical.shape}")
    if np.any(optical < 0):
        if not clamp_negative:
            raise DataError("optical input contains negative values and clamping is disabled")
        _negative_clamp_count += 1
        optical = np.clip(optical, 0.0, None)

    gen = _resolve_rng(config, rng)
    if optical.ndim == 2 or config.luminance_mode == "per_channel":
        s = sample_speckle(optical.shape, config, rng=gen)
        return optical * s
    lum = optical.mean(axis=0)
    s = sample_speckle(lum.shape, config, rng=gen)
    speckled = lum * s
    return np.repeat(speckled[None, :, :], optical.shape[0], axis=0)


def optical_to_sar_batch(
    batch: np.ndarray,
    config: SpeckleConfig,
    rng: np.random.Generator | None = None,
) -> np.ndarray:
    """Vectorized optical_to_sar over a (B, C, H, W) batch, one draw per item."""
    batch = np.asarray(batch, dtype=np.float32)
    if batch.ndim != 4:
        raise ValueError(f"expected (B, C, H, W) batch, got shape {batch.shape}")
    gen = _resolve_rng(config, rng)
    out = np.empty_like(batch)
    for i in range(batch.shape[0]):
        out[i] = optical_to_sar(batch[i], config, rng=gen)
    return out
