"""Seedable random streams, Gaussian noise coupling, and minibatch sampling.

Every random quantity in the package is drawn from a stream addressed by a
master seed plus an integer key tuple.  Distinct keys give statistically
independent streams, and the same (seed, key) always reproduces the same
sequence no matter how many other streams were consumed in between.  This is
what makes sampling embarrassingly parallel yet bitwise reproducible.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

# Key domains.  Every stream key starts with one of these so that different
# subsystems can never collide in key space.
DOMAIN_LEVEL = 0  # coupled-level / level-0 sampling: (level, replicate, phase)
DOMAIN_MALA = 1  # MALA chains: (rep, phase)
DOMAIN_DATA = 2  # dataset generation: (purpose,)
DOMAIN_REFERENCE = 3  # standalone single-path runs used as references

# Phases of one level sample.  Each (level, replicate) owns one sub-stream
# per phase so the draws of one phase never shift another phase's draws.
PHASE_BURNIN_NOISE = 0
PHASE_BURNIN_BATCH = 1
PHASE_COUPLED_NOISE = 2
PHASE_COUPLED_BATCH = 3
PHASE_COARSE_SELECT = 4


def substream(seed: int, *key: int) -> np.random.Generator:
    """Generator for the sub-stream addressed by ``key`` under ``seed``."""
    ss = np.random.SeedSequence(seed, spawn_key=tuple(int(k) for k in key))
    return np.random.Generator(np.random.PCG64(ss))


@dataclass
class RngStream:
    """A live random stream identified by (seed, key).

    The underlying generator is created lazily and advances as it is
    consumed.  Re-creating an RngStream with the same seed and key replays
    the identical sequence.
    """

    seed: int
    key: tuple[int, ...] = ()
    _gen: np.random.Generator | None = field(default=None, repr=False)

    @property
    def generator(self) -> np.random.Generator:
        if self._gen is None:
            self._gen = substream(self.seed, *self.key)
        return self._gen


@dataclass(frozen=True)
class NoisePair:
    """The two fine-step Gaussian increments backing one coarse step."""

    xi1: np.ndarray
    xi2: np.ndarray


@dataclass
class SampleStreams:
    """The five per-replicate sub-streams used by one level sample."""

    seed: int
    level: int
    replicate: int
    domain: int = DOMAIN_LEVEL

    def phase(self, phase: int) -> np.random.Generator:
        return substream(self.seed, self.domain, self.level, self.replicate, phase)


def gaussian_vector(rng: RngStream, d: int) -> np.ndarray:
    """Draw d i.i.d. standard normal coordinates, advancing the stream."""
    if d < 1:
        raise ValueError(f"dimension must be >= 1, got {d}")
    return rng.generator.standard_normal(d)


def coarse_noise(pair: NoisePair) -> np.ndarray:
    """Coarse-step increment (xi1 + xi2) / sqrt(2).

    If both inputs are standard normal the output is standard normal, so the
    coarse path sees a statistically identical driving noise.
    """
    xi1 = np.asarray(pair.xi1)
    xi2 = np.asarray(pair.xi2)
    if xi1.shape != xi2.shape:
        raise ValueError(f"noise shapes differ: {xi1.shape} vs {xi2.shape}")
    return (xi1 + xi2) / np.sqrt(2.0)


def sample_batch(rng: RngStream, n_items: int, batch_size: int) -> np.ndarray:
    """Sample ``batch_size`` i.i.d. uniform indices on [0, n_items)."""
    if n_items < 1 or batch_size < 1:
        raise ValueError("n_items and batch_size must be >= 1")
    return rng.generator.integers(0, n_items, size=batch_size)


def coarse_batch(rng: RngStream, tau_f1: np.ndarray, tau_f2: np.ndarray) -> np.ndarray:
    """Draw the coarse batch from the two fine batches.

    Takes ``n`` samples without replacement from the pooled multiset of the
    2n fine indices.  Because the positions are chosen independently of the
    values, the result has exactly the same law as a fine batch, which is
    what keeps the telescoping identity valid under subsampling.
    """
    tau_f1 = np.asarray(tau_f1)
    tau_f2 = np.asarray(tau_f2)
    if tau_f1.shape != tau_f2.shape:
        raise ValueError(f"batch shapes differ: {tau_f1.shape} vs {tau_f2.shape}")
    pool = np.concatenate([tau_f1, tau_f2])
    n = tau_f1.shape[0]
    # Uniform random keys + argsort = uniform selection without replacement.
    # The same construction is used by the vectorized sampler.
    u = rng.generator.random(2 * n)
    return pool[np.argsort(u)[:n]]


def coarse_select_positions(u: np.ndarray, n: int) -> np.ndarray:
    """Positions of the coarse draw given uniform keys of shape (..., 2n)."""
    return np.argsort(u, axis=-1)[..., :n]
