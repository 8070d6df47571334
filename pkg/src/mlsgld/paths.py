"""The Euler transition and single-path simulation.

One step moves theta to theta + h * drift + sqrt(2h) * xi.  Paths keep a
running count of steps and item evaluations and carry a sticky divergence
flag; a flagged path keeps running (the sampler layer decides what to do
with flagged results) but its value is treated as unusable.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .gradients import DriftEstimate, DriftEstimator
from .models import PosteriorModel
from .streams import RngStream, gaussian_vector, sample_batch

DIVERGENCE_BOUND = 1e8


@dataclass(frozen=True)
class PathState:
    theta: np.ndarray
    step_count: int = 0
    item_evals: int = 0
    diverged: bool = False


def euler_step(state: PathState, h: float, drift: DriftEstimate, xi: np.ndarray) -> PathState:
    """One Euler transition: theta + h * drift + sqrt(2h) * xi."""
    if h < 0:
        raise ValueError("step size must be nonnegative")
    xi = np.asarray(xi, dtype=float)
    theta = state.theta + h * drift.drift + np.sqrt(2.0 * h) * xi
    bad = bool(np.max(np.abs(theta)) > DIVERGENCE_BOUND) or not np.all(
        np.isfinite(theta)
    )
    return PathState(
        theta=theta,
        step_count=state.step_count + 1,
        item_evals=state.item_evals + drift.cost,
        diverged=state.diverged or bad,
    )


def run_path(
    theta_init: np.ndarray,
    steps: int,
    h: float,
    estimator: DriftEstimator,
    rng: RngStream,
    model: PosteriorModel,
) -> PathState:
    """Run ``steps`` Euler transitions from ``theta_init``.

    Per step the stream yields one batch (when the estimator subsamples) and
    then one noise vector, so two runs with the same stream key see exactly
    the same randomness.
    """
    if steps < 0:
        raise ValueError("steps must be nonnegative")
    state = PathState(theta=np.asarray(theta_init, dtype=float).copy())
    d = model.dim
    for _ in range(steps):
        tau = None
        if estimator.needs_batch:
            tau = sample_batch(rng, model.n_items, estimator.batch_size)
        xi = gaussian_vector(rng, d)
        drift_lane, cost_lane = estimator.drift_lanes(
            state.theta[None, :], None if tau is None else tau[None, :]
        )
        drift = DriftEstimate(drift=drift_lane[0], cost=int(cost_lane[0]))
        state = euler_step(state, h, drift, xi)
    return state
