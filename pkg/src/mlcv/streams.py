"""Deterministic stream-keyed input sampling.

Every random input vector consumed anywhere in the package is addressed by a
:class:`StreamKey`: (master seed, purpose label, level, sample index).  The
key is hashed into the state of a counter-based generator, so replaying a key
reproduces the sample bit for bit, independent of how many other samples were
drawn, in which order, or from how many workers.

Gaussian variates are produced by applying the inverse normal CDF to one
uniform draw each; no rejection steps, so every variate consumes exactly one
counter increment and streams stay aligned across purposes.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.special import ndtri

from .errors import ConfigError

PURPOSE_PILOT = "pilot"
PURPOSE_MAIN_Y = "main_y"
PURPOSE_ZBAR = "zbar"
PURPOSE_ORACLE = "oracle"

_PURPOSE_CODES = {
    PURPOSE_PILOT: 0,
    PURPOSE_MAIN_Y: 1,
    PURPOSE_ZBAR: 2,
    PURPOSE_ORACLE: 3,
}

# Samples per keyed block.  Fixed by design: changing it would change every
# stream, so it is a module constant rather than a configuration knob.
_BLOCK = 1024

_INV_53 = 1.0 / (1 << 53)


@dataclass(frozen=True)
class DistributionTag:
    """Per-coordinate marginal distribution label."""

    kind: str
    low: float = 0.0
    high: float = 1.0


def standard_gaussian() -> DistributionTag:
    return DistributionTag("standard_gaussian")


def uniform(low: float, high: float) -> DistributionTag:
    if not (np.isfinite(low) and np.isfinite(high) and low < high):
        raise ConfigError(f"uniform bounds must be finite with low < high, got ({low}, {high})")
    return DistributionTag("uniform", float(low), float(high))


@dataclass(frozen=True)
class StreamKey:
    """Address of a single input sample.

    ``level`` is meaningful for the per-level purposes (``main_y``, ``zbar``)
    and fixed at 0 for the others.
    """

    master_seed: int
    purpose: str
    level: int = 0
    sample_index: int = 0


@dataclass(frozen=True)
class InputSample:
    values: np.ndarray
    tags: tuple[DistributionTag, ...]


def _check_key_fields(master_seed: int, purpose: str, level: int, sample_index: int) -> None:
    if purpose not in _PURPOSE_CODES:
        raise ConfigError(f"unknown stream purpose {purpose!r}")
    if master_seed < 0 or master_seed >= 1 << 64:
        raise ConfigError(f"master_seed must fit in 64 unsigned bits, got {master_seed}")
    if level < 0:
        raise ConfigError(f"level must be non-negative, got {level}")
    if sample_index < 0:
        raise ConfigError(f"sample_index must be non-negative, got {sample_index}")


def _block_uniforms(master_seed: int, purpose: str, level: int, block: int, dim: int) -> np.ndarray:
    """Uniforms for one keyed block, shape (_BLOCK, dim), open interval (0, 1)."""
    seq = np.random.SeedSequence(
        entropy=master_seed,
        spawn_key=(_PURPOSE_CODES[purpose], level, block),
    )
    gen = np.random.Generator(np.random.Philox(seq))
    raw = gen.integers(0, 1 << 53, size=(_BLOCK, dim), dtype=np.uint64)
    # Midpoint mapping keeps draws strictly inside (0, 1): the quantile
    # transform below must never see 0 or 1 exactly.
    return (raw.astype(np.float64) + 0.5) * _INV_53


def _transform(u: np.ndarray, tags: tuple[DistributionTag, ...]) -> np.ndarray:
    out = np.empty_like(u)
    for j, tag in enumerate(tags):
        if tag.kind == "standard_gaussian":
            out[:, j] = ndtri(u[:, j])
        elif tag.kind == "uniform":
            out[:, j] = tag.low + (tag.high - tag.low) * u[:, j]
        else:
            raise ConfigError(f"unsupported distribution tag {tag.kind!r}")
    return out


def draw_inputs(
    master_seed: int,
    purpose: str,
    level: int,
    start: int,
    count: int,
    tags: tuple[DistributionTag, ...],
) -> np.ndarray:
    """Input matrix of shape (count, len(tags)) for sample_index start..start+count-1.

    Values depend only on the per-sample keys, so any partition of an index
    range into calls returns the same rows.
    """
    _check_key_fields(master_seed, purpose, level, start)
    if count < 0:
        raise ConfigError(f"count must be non-negative, got {count}")
    tags = tuple(tags)
    if not tags:
        raise ConfigError("at least one distribution tag is required")
    dim = len(tags)
    out = np.empty((count, dim))
    filled = 0
    index = start
    while filled < count:
        block, offset = divmod(index, _BLOCK)
        take = min(_BLOCK - offset, count - filled)
        u = _block_uniforms(master_seed, purpose, level, block, dim)
        out[filled : filled + take] = u[offset : offset + take]
        filled += take
        index += take
    return _transform(out, tags)


def draw_input(key: StreamKey, tags: tuple[DistributionTag, ...]) -> InputSample:
    """Single input vector for one stream key."""
    values = draw_inputs(
        key.master_seed, key.purpose, key.level, key.sample_index, 1, tuple(tags)
    )[0]
    return InputSample(values=values, tags=tuple(tags))
