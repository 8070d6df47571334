"""Coupled fine/coarse level samplers and the level schedule.

A level ``l`` pairs a fine path (step size h_l, horizon T_l) with a coarse
path (step size 2 h_l, horizon T_{l-1}), where T_l = m (l+1) h0.  The fine
path first burns in alone over the horizon difference, then both evolve
jointly: two fine steps per coarse step, the coarse step driven by the
scaled sum of the two fine Gaussian increments, and the coarse batch chosen
so its law matches the fine batch law.  The g-difference of the endpoints is
one sample of the telescoping increment.

Three couplings are provided: plain (one coarse path, pooled coarse batch),
antithetic (two coarse paths, one per fine batch, whose g-values are
averaged), and trajectory-averaged variants of both, where each endpoint
g-evaluation is replaced by the running mean of g over the tail of that
path's own states.
"""

from __future__ import annotations

from collections import deque
from dataclasses import dataclass

import numpy as np

from .gradients import DriftEstimator
from .models import PosteriorModel
from .parallel import CHUNK_SIZE, index_chunks, run_chunked
from .paths import DIVERGENCE_BOUND
from .streams import (
    DOMAIN_LEVEL,
    PHASE_BURNIN_BATCH,
    PHASE_BURNIN_NOISE,
    PHASE_COARSE_SELECT,
    PHASE_COUPLED_BATCH,
    PHASE_COUPLED_NOISE,
    SampleStreams,
    coarse_select_positions,
)


@dataclass(frozen=True)
class LevelConfig:
    """Step sizes, horizons, and step counts of one level."""

    level: int
    h_fine: float
    h_coarse: float  # = 2 * h_fine; unused at level 0
    horizon_fine: float  # T_l
    horizon_coarse: float  # T_{l-1}, zero at level 0
    burnin_steps: int  # fine steps before coupling starts
    coupled_steps: int  # joint iterations = coarse steps
    total_fine_steps: int  # burnin_steps + 2 * coupled_steps


def level_schedule(level: int, m: int, h0: float) -> LevelConfig:
    """Derive the step counts of level ``level`` from (m, h0).

    Horizons grow as T_l = m (l+1) h0 while steps shrink as h_l = h0 2^-l,
    so every count below is an exact integer: the fine path takes
    m (l+1) 2^l steps in total, of which m 2^l are burn-in, and the coarse
    path takes m l 2^(l-1) steps.
    """
    if level < 0:
        raise ValueError("level must be >= 0")
    if m < 1:
        raise ValueError("m must be >= 1")
    if not h0 > 0:
        raise ValueError("h0 must be positive")
    h_fine = h0 * 2.0**-level
    burnin = m * 2**level
    coupled = m * level * 2 ** (level - 1) if level >= 1 else 0
    return LevelConfig(
        level=level,
        h_fine=h_fine,
        h_coarse=2.0 * h_fine,
        horizon_fine=m * (level + 1) * h0,
        horizon_coarse=m * level * h0,
        burnin_steps=burnin,
        coupled_steps=coupled,
        total_fine_steps=burnin + 2 * coupled,
    )


@dataclass(frozen=True)
class CouplingVariant:
    """Which coupling to run and whether endpoints are trajectory averages."""

    antithetic: bool = False
    averaged: bool = False
    window_fraction: float = 0.5

    @classmethod
    def parse(cls, name: str, window_fraction: float = 0.5) -> "CouplingVariant":
        table = {
            "plain": (False, False),
            "antithetic": (True, False),
            "plain-avg": (False, True),
            "antithetic-avg": (True, True),
        }
        if name not in table:
            raise ValueError(f"unknown coupling variant {name!r}")
        anti, avg = table[name]
        return cls(antithetic=anti, averaged=avg, window_fraction=window_fraction)

    @property
    def name(self) -> str:
        base = "antithetic" if self.antithetic else "plain"
        return base + ("-avg" if self.averaged else "")


def averaging_windows(cfg: LevelConfig, variant: CouplingVariant) -> tuple[int, int]:
    """Number of trailing states averaged on the fine and coarse paths.

    Both windows cover the same span of simulated time, a fraction of the
    burn-in horizon: ``floor(frac * burnin_steps)`` fine steps and half as
    many coarse steps.  Time matching keeps the averaged fine and coarse
    terms paired (so averaging reduces the increment variance instead of
    injecting unmatched fluctuations), and the coarse window of level l
    equals the fine window of level l-1 exactly, which preserves the
    telescoping identity.  At level 0 the window is floor(frac * s_0) steps.
    Returns (1, 1) for the non-averaged variants (the endpoint itself).
    """
    if not variant.averaged:
        return 1, 1
    frac = variant.window_fraction
    if not 0.0 <= frac <= 1.0:
        raise ValueError("window_fraction must be in [0, 1]")
    p_fine = int(np.floor(frac * cfg.burnin_steps))
    if cfg.level == 0:
        return p_fine + 1, 1
    p_coarse = int(np.floor(frac * cfg.burnin_steps / 2))
    if p_fine > 2 * cfg.coupled_steps or p_coarse > cfg.coupled_steps:
        raise ValueError(
            f"averaging window exceeds the coupled phase at level {cfg.level}"
        )
    return p_fine + 1, p_coarse + 1


@dataclass(frozen=True)
class DeltaSample:
    """One realization of the level increment and its cost."""

    value: float
    cost: int
    diverged: bool


@dataclass
class DeltaBlock:
    """Per-replicate level-increment samples in lane order."""

    values: np.ndarray  # (R,), NaN where diverged
    costs: np.ndarray  # (R,) item evaluations
    diverged: np.ndarray  # (R,) bool
    g_fine: np.ndarray  # (R,) fine endpoint term
    g_coarse: np.ndarray  # (R,) coarse endpoint term (NaN at level 0)
    distance_trace: np.ndarray | None = None  # (coupled_steps + 1, R)

    def __len__(self) -> int:
        return self.values.shape[0]

    def sample(self, lane: int) -> DeltaSample:
        return DeltaSample(
            value=float(self.values[lane]),
            cost=int(self.costs[lane]),
            diverged=bool(self.diverged[lane]),
        )


def concat_blocks(blocks: list[DeltaBlock]) -> DeltaBlock:
    trace = None
    if blocks and blocks[0].distance_trace is not None:
        trace = np.concatenate([b.distance_trace for b in blocks], axis=1)
    return DeltaBlock(
        values=np.concatenate([b.values for b in blocks]),
        costs=np.concatenate([b.costs for b in blocks]),
        diverged=np.concatenate([b.diverged for b in blocks]),
        g_fine=np.concatenate([b.g_fine for b in blocks]),
        g_coarse=np.concatenate([b.g_coarse for b in blocks]),
        distance_trace=trace,
    )


class _TailMean:
    """Running mean of g over the last ``window`` recorded states per lane."""

    def __init__(self, window: int):
        self.buf: deque[np.ndarray] = deque(maxlen=window)

    def push(self, g_values: np.ndarray):
        self.buf.append(g_values)

    def mean(self) -> np.ndarray:
        return np.mean(np.stack(self.buf, axis=0), axis=0)


def _stack_draws(streams_list, phase, draw):
    return np.stack([draw(s.phase(phase)) for s in streams_list], axis=0)


def _step_lanes(model, est, thetas, taus, h, xi, costs, alive):
    """One Euler update for all lanes; returns updated (thetas, alive)."""
    drift, cost = est.drift_lanes(thetas, taus)
    thetas = thetas + h * drift + np.sqrt(2.0 * h) * xi
    costs += cost
    with np.errstate(invalid="ignore"):
        ok = np.isfinite(thetas).all(axis=-1) & (
            np.max(np.abs(thetas), axis=-1) <= DIVERGENCE_BOUND
        )
    return thetas, alive & ok


def _run_uncoupled(model, est, thetas, h, noises, batches, costs, alive, tail=None, g=None):
    """Advance all lanes ``noises.shape[1]`` steps, recording g if asked."""
    for k in range(noises.shape[1]):
        taus = None if batches is None else batches[:, k]
        thetas, alive = _step_lanes(model, est, thetas, taus, h, noises[:, k], costs, alive)
        if tail is not None:
            tail.push(g(thetas))
    return thetas, alive


def _sample_level0_block(model, g, theta0, cfg, est, streams_list, window) -> DeltaBlock:
    r = len(streams_list)
    d = model.dim
    steps = cfg.total_fine_steps
    noises = _stack_draws(
        streams_list, PHASE_BURNIN_NOISE, lambda rng: rng.standard_normal((steps, d))
    )
    batches = None
    if est.needs_batch:
        batches = _stack_draws(
            streams_list,
            PHASE_BURNIN_BATCH,
            lambda rng: rng.integers(0, model.n_items, size=(steps, est.batch_size)),
        )
    thetas = np.tile(np.asarray(theta0, dtype=float), (r, 1))
    costs = np.zeros(r, dtype=np.int64)
    alive = np.ones(r, dtype=bool)
    tail = _TailMean(window)
    tail.push(g(thetas))
    thetas, alive = _run_uncoupled(
        model, est, thetas, cfg.h_fine, noises, batches, costs, alive, tail, g
    )
    values = tail.mean() if window > 1 else g(thetas)
    values = np.where(alive, values, np.nan)
    return DeltaBlock(
        values=values,
        costs=costs,
        diverged=~alive,
        g_fine=values.copy(),
        g_coarse=np.full(r, np.nan),
    )


def _evolve_coupled(
    model,
    g,
    est,
    cfg: LevelConfig,
    theta_fine: np.ndarray,
    theta0: np.ndarray,
    antithetic: bool,
    coupled_noise: np.ndarray,  # (R, cc, 2, d)
    coupled_batches: np.ndarray | None,  # (R, cc, 2, n)
    select_u: np.ndarray | None,  # (R, cc, 2n), plain coupling only
    windows: tuple[int, int],
    costs: np.ndarray,
    alive: np.ndarray,
    trace: bool = False,
):
    """Joint evolution after burn-in; returns endpoint g-terms per lane.

    Per joint iteration the fine path takes two steps with (tau1, xi1) and
    (tau2, xi2); every coarse path takes one step with noise
    (xi1 + xi2) / sqrt(2).  Plain coupling drives one coarse path with a
    batch drawn without replacement from the pooled fine batches; the
    antithetic coupling drives two coarse paths, one with tau1 and one with
    tau2, each advancing from its own previous state.
    """
    r = theta_fine.shape[0]
    cc = cfg.coupled_steps
    window_f, window_c = windows
    inv_sqrt2 = 1.0 / np.sqrt(2.0)

    coarse_states = [np.tile(theta0, (r, 1))]
    coarse_batch_sel = None
    if antithetic:
        coarse_states.append(np.tile(theta0, (r, 1)))
    elif coupled_batches is not None:
        pool = np.concatenate(
            [coupled_batches[:, :, 0, :], coupled_batches[:, :, 1, :]], axis=-1
        )
        positions = coarse_select_positions(select_u, est.batch_size)
        coarse_batch_sel = np.take_along_axis(pool, positions, axis=-1)

    tail_f = _TailMean(window_f)
    tail_f.push(g(theta_fine))
    tails_c = [_TailMean(window_c) for _ in coarse_states]
    for t in tails_c:
        t.push(g(coarse_states[0]))

    distances = None
    if trace:
        distances = np.empty((cc + 1, r))
        distances[0] = np.sqrt(((theta_fine - coarse_states[0]) ** 2).sum(axis=-1))

    for k in range(cc):
        for j in (0, 1):
            taus = None if coupled_batches is None else coupled_batches[:, k, j]
            theta_fine, alive = _step_lanes(
                model, est, theta_fine, taus, cfg.h_fine, coupled_noise[:, k, j], costs, alive
            )
            tail_f.push(g(theta_fine))
        xi_c = (coupled_noise[:, k, 0] + coupled_noise[:, k, 1]) * inv_sqrt2
        if antithetic:
            for side in (0, 1):
                taus = None if coupled_batches is None else coupled_batches[:, k, side]
                coarse_states[side], alive = _step_lanes(
                    model, est, coarse_states[side], taus, cfg.h_coarse, xi_c, costs, alive
                )
                tails_c[side].push(g(coarse_states[side]))
        else:
            taus = None if coupled_batches is None else coarse_batch_sel[:, k]
            coarse_states[0], alive = _step_lanes(
                model, est, coarse_states[0], taus, cfg.h_coarse, xi_c, costs, alive
            )
            tails_c[0].push(g(coarse_states[0]))
        if trace:
            distances[k + 1] = np.sqrt(
                ((theta_fine - coarse_states[0]) ** 2).sum(axis=-1)
            )

    g_fine = tail_f.mean() if window_f > 1 else g(theta_fine)
    coarse_terms = [
        t.mean() if window_c > 1 else g(s) for t, s in zip(tails_c, coarse_states)
    ]
    g_coarse = coarse_terms[0] if not antithetic else 0.5 * (
        coarse_terms[0] + coarse_terms[1]
    )
    return g_fine, g_coarse, alive, distances


def _sample_coupled_block(
    model, g, theta0, cfg, est, variant, streams_list, trace=False
) -> DeltaBlock:
    r = len(streams_list)
    d = model.dim
    theta0 = np.asarray(theta0, dtype=float)
    windows = averaging_windows(cfg, variant)

    burn_noise = _stack_draws(
        streams_list,
        PHASE_BURNIN_NOISE,
        lambda rng: rng.standard_normal((cfg.burnin_steps, d)),
    )
    coupled_noise = _stack_draws(
        streams_list,
        PHASE_COUPLED_NOISE,
        lambda rng: rng.standard_normal((cfg.coupled_steps, 2, d)),
    )
    burn_batches = coupled_batches = select_u = None
    if est.needs_batch:
        n = est.batch_size
        burn_batches = _stack_draws(
            streams_list,
            PHASE_BURNIN_BATCH,
            lambda rng: rng.integers(0, model.n_items, size=(cfg.burnin_steps, n)),
        )
        coupled_batches = _stack_draws(
            streams_list,
            PHASE_COUPLED_BATCH,
            lambda rng: rng.integers(0, model.n_items, size=(cfg.coupled_steps, 2, n)),
        )
        if not variant.antithetic:
            select_u = _stack_draws(
                streams_list,
                PHASE_COARSE_SELECT,
                lambda rng: rng.random((cfg.coupled_steps, 2 * n)),
            )

    thetas = np.tile(theta0, (r, 1))
    costs = np.zeros(r, dtype=np.int64)
    alive = np.ones(r, dtype=bool)
    thetas, alive = _run_uncoupled(
        model, est, thetas, cfg.h_fine, burn_noise, burn_batches, costs, alive
    )
    g_fine, g_coarse, alive, distances = _evolve_coupled(
        model,
        g,
        est,
        cfg,
        thetas,
        theta0,
        variant.antithetic,
        coupled_noise,
        coupled_batches,
        select_u,
        windows,
        costs,
        alive,
        trace=trace,
    )
    values = np.where(alive, g_fine - g_coarse, np.nan)
    return DeltaBlock(
        values=values,
        costs=costs,
        diverged=~alive,
        g_fine=g_fine,
        g_coarse=g_coarse,
        distance_trace=distances,
    )


def sample_delta_block(
    model: PosteriorModel,
    g,
    theta0: np.ndarray,
    cfg: LevelConfig,
    estimator: DriftEstimator,
    variant: CouplingVariant,
    seed: int,
    replicates,
    threads: int = 1,
    domain: int = DOMAIN_LEVEL,
    trace: bool = False,
) -> DeltaBlock:
    """Draw the level increments for the given replicate indices.

    Replicate ``i`` depends only on (seed, level, i), so any chunking or
    thread count yields the same per-replicate results; chunks are merged in
    index order.
    """
    replicates = list(replicates)
    if not replicates:
        empty = np.empty(0)
        return DeltaBlock(
            values=empty,
            costs=np.empty(0, dtype=np.int64),
            diverged=np.empty(0, dtype=bool),
            g_fine=empty.copy(),
            g_coarse=empty.copy(),
        )

    def run(chunk_indices) -> DeltaBlock:
        streams = [
            SampleStreams(seed=seed, level=cfg.level, replicate=i, domain=domain)
            for i in chunk_indices
        ]
        if cfg.level == 0:
            window, _ = averaging_windows(cfg, variant)
            return _sample_level0_block(model, g, theta0, cfg, estimator, streams, window)
        return _sample_coupled_block(
            model, g, theta0, cfg, estimator, variant, streams, trace=trace
        )

    chunks = [
        replicates[i : i + CHUNK_SIZE] for i in range(0, len(replicates), CHUNK_SIZE)
    ]
    return concat_blocks(run_chunked(run, chunks, threads))


def _single_sample(theta0, cfg, estimator, streams, model, g, variant) -> DeltaSample:
    if cfg.level == 0:
        window, _ = averaging_windows(cfg, variant)
        block = _sample_level0_block(model, g, theta0, cfg, estimator, [streams], window)
    else:
        block = _sample_coupled_block(
            model, g, theta0, cfg, estimator, variant, [streams]
        )
    return block.sample(0)


def sample_level0(theta0, cfg: LevelConfig, estimator, streams: SampleStreams, model, g) -> DeltaSample:
    """g at the end of a single level-0 path (the telescoping base term)."""
    if cfg.level != 0:
        raise ValueError("sample_level0 requires a level-0 config")
    return _single_sample(theta0, cfg, estimator, streams, model, g, CouplingVariant())


def sample_delta_plain(theta0, cfg, estimator, streams, model, g) -> DeltaSample:
    """One plain-coupling increment g(fine end) - g(coarse end)."""
    if cfg.level < 1:
        raise ValueError("coupled sampling requires level >= 1")
    return _single_sample(theta0, cfg, estimator, streams, model, g, CouplingVariant())


def sample_delta_antithetic(theta0, cfg, estimator, streams, model, g) -> DeltaSample:
    """One antithetic increment g(fine) - (g(c+) + g(c-)) / 2."""
    if cfg.level < 1:
        raise ValueError("coupled sampling requires level >= 1")
    return _single_sample(
        theta0, cfg, estimator, streams, model, g, CouplingVariant(antithetic=True)
    )


def sample_delta_averaged(
    variant: CouplingVariant, theta0, cfg, estimator, streams, model, g
) -> DeltaSample:
    """One increment with trajectory-averaged endpoint terms."""
    if not variant.averaged:
        variant = CouplingVariant(
            antithetic=variant.antithetic,
            averaged=True,
            window_fraction=variant.window_fraction,
        )
    return _single_sample(theta0, cfg, estimator, streams, model, g, variant)


def run_single_level_block(
    model,
    g,
    theta0,
    level: int,
    m: int,
    h0: float,
    estimator,
    seed: int,
    replicates,
    threads: int = 1,
    domain: int = DOMAIN_LEVEL,
    window: int = 1,
) -> DeltaBlock:
    """Independent single paths at level ``level`` run over the full horizon.

    Marginally distributed like the fine path of that level; used as the
    reference side of telescoping checks.
    """
    cfg = level_schedule(level, m, h0)
    flat = LevelConfig(
        level=0,
        h_fine=cfg.h_fine,
        h_coarse=cfg.h_fine,
        horizon_fine=cfg.horizon_fine,
        horizon_coarse=0.0,
        burnin_steps=cfg.total_fine_steps,
        coupled_steps=0,
        total_fine_steps=cfg.total_fine_steps,
    )
    variant = CouplingVariant()

    def run(chunk_indices) -> DeltaBlock:
        streams = [
            SampleStreams(seed=seed, level=level, replicate=i, domain=domain)
            for i in chunk_indices
        ]
        return _sample_level0_block(model, g, theta0, flat, estimator, streams, window)

    replicates = list(replicates)
    chunks = [
        replicates[i : i + CHUNK_SIZE] for i in range(0, len(replicates), CHUNK_SIZE)
    ]
    return concat_blocks(run_chunked(run, chunks, threads))
