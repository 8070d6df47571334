"""Metropolis-adjusted Langevin baseline.

The proposal is one Euler step of the posterior Langevin dynamics; the
Metropolis correction makes the chain exact for the posterior, so no step
size decay is needed.  One step costs 2N item evaluations (gradient and
density at the current point and at the proposal; gradient and density of
the same item at the same point share the touch).
"""

from __future__ import annotations

import math
import warnings
from dataclasses import dataclass, field

import numpy as np

from .models import PosteriorModel
from .paths import DIVERGENCE_BOUND
from .streams import DOMAIN_MALA, RngStream, substream

PHASE_TUNE_NOISE = 0
PHASE_TUNE_UNIF = 1
PHASE_CHAIN_NOISE = 2
PHASE_CHAIN_UNIF = 3


@dataclass
class MalaChain:
    theta: np.ndarray
    h: float
    accept_count: int = 0
    step_count: int = 0
    item_evals: int = 0


def _log_posterior_lanes(model: PosteriorModel, thetas: np.ndarray) -> np.ndarray:
    prior = -0.5 * (thetas**2).sum(axis=-1)
    return prior + model.item_log_density_sum(thetas)


def _drift_lanes(model: PosteriorModel, thetas: np.ndarray) -> np.ndarray:
    return model.prior_grads(thetas) + model.item_grad_sum(thetas)


def mala_log_accept(
    model: PosteriorModel, theta: np.ndarray, theta_prop: np.ndarray, h: float
) -> float:
    """Log Metropolis ratio log[pi(x') q(x'->x)] - log[pi(x) q(x->x')].

    q(a -> b) is the Gaussian density of one Euler step from a; the shared
    normalization cancels.  Zero when the proposal equals the current state.
    """
    if not h > 0:
        raise ValueError("step size must be positive")
    theta = np.asarray(theta, dtype=float)[None, :]
    prop = np.asarray(theta_prop, dtype=float)[None, :]
    logp = _log_posterior_lanes(model, theta)[0]
    logp_prop = _log_posterior_lanes(model, prop)[0]
    drift = _drift_lanes(model, theta)[0]
    drift_prop = _drift_lanes(model, prop)[0]
    fwd = -np.sum((prop[0] - theta[0] - h * drift) ** 2) / (4.0 * h)
    bwd = -np.sum((theta[0] - prop[0] - h * drift_prop) ** 2) / (4.0 * h)
    out = (logp_prop + bwd) - (logp + fwd)
    if not np.isfinite(out):
        raise FloatingPointError("non-finite Metropolis ratio")
    return float(out)


def mala_step(chain: MalaChain, rng: RngStream, model: PosteriorModel) -> MalaChain:
    """One proposal/accept step; divergent proposals are auto-rejected."""
    theta = np.asarray(chain.theta, dtype=float)
    drift = _drift_lanes(model, theta[None, :])[0]
    xi = rng.generator.standard_normal(model.dim)
    prop = theta + chain.h * drift + math.sqrt(2.0 * chain.h) * xi
    u = rng.generator.random()
    accept = False
    if np.all(np.isfinite(prop)) and np.max(np.abs(prop)) <= DIVERGENCE_BOUND:
        try:
            log_acc = mala_log_accept(model, theta, prop, chain.h)
            accept = math.log(max(u, 1e-300)) < log_acc
        except FloatingPointError:
            accept = False
    return MalaChain(
        theta=prop if accept else theta,
        h=chain.h,
        accept_count=chain.accept_count + int(accept),
        step_count=chain.step_count + 1,
        item_evals=chain.item_evals + 2 * model.n_items,
    )


def tune_step(
    model: PosteriorModel,
    theta_init: np.ndarray,
    target_accept: float,
    rng: RngStream,
    h_init: float | None = None,
    phase_steps: int = 2000,
    trailing: int = 500,
    tol: float = 0.05,
    max_phases: int = 5,
) -> float:
    """Robbins-Monro step-size tuning toward ``target_accept``.

    Runs phases of ``phase_steps`` steps, nudging log h by
    (alpha_t - target) / sqrt(t) after each step, until the realized
    acceptance rate over the trailing ``trailing`` steps is within ``tol``
    of the target.  If no phase satisfies the check the best step size seen
    is returned with a warning.
    """
    if not 0.0 < target_accept < 1.0:
        raise ValueError("target_accept must be in (0, 1)")
    theta = np.asarray(theta_init, dtype=float)
    if h_init is None:
        h_init = 1.0 / (model.n_items + 1)
    log_h = math.log(h_init)
    accepts: list[bool] = []
    t = 0
    best_h, best_gap = h_init, math.inf
    for _ in range(max_phases):
        for _ in range(phase_steps):
            t += 1
            h = math.exp(log_h)
            chain = mala_step(MalaChain(theta=theta, h=h), rng, model)
            accepted = chain.accept_count == 1
            theta = chain.theta
            # The realized accept indicator is an unbiased estimate of the
            # acceptance probability, which is all Robbins-Monro needs.
            log_h += (float(accepted) - target_accept) / math.sqrt(t)
            accepts.append(accepted)
        rate = float(np.mean(accepts[-trailing:]))
        gap = abs(rate - target_accept)
        if gap < best_gap:
            best_gap, best_h = gap, math.exp(log_h)
        if gap <= tol:
            return math.exp(log_h)
    warnings.warn(
        f"step-size tuning missed target {target_accept} by {best_gap:.3f}; "
        f"returning best step size {best_h:.3e}"
    )
    return best_h


@dataclass
class MalaExperimentResult:
    estimates: np.ndarray  # per-repetition averages of g
    step_sizes: np.ndarray
    accept_rates: np.ndarray
    steps: int
    burnin: int
    n_items: int
    tuning_item_evals: int
    mean: float = field(init=False)
    spread: float = field(init=False)

    def __post_init__(self):
        self.mean = float(self.estimates.mean())
        self.spread = float(self.estimates.std(ddof=1)) if len(self.estimates) > 1 else 0.0

    @property
    def item_evals(self) -> int:
        """Sampling cost: 2N per step per repetition (tuning excluded)."""
        return 2 * self.n_items * self.steps * len(self.estimates)

    @property
    def epochs(self) -> float:
        return self.item_evals / max(1, self.n_items)

    def relative_mse(self, reference: float) -> float:
        return float(np.mean(((self.estimates - reference) / reference) ** 2))


def _run_lanes(
    model,
    thetas: np.ndarray,
    log_h: np.ndarray,
    noise: np.ndarray,
    unif: np.ndarray,
    adapt_target: float | None,
    g=None,
    burnin: int = 0,
):
    """Advance all chains; optionally adapt per-lane step sizes or record g."""
    r, steps, _ = noise.shape
    accepts = np.zeros(r)
    g_sum = np.zeros(r)
    drift = _drift_lanes(model, thetas)
    logp = _log_posterior_lanes(model, thetas)
    for k in range(steps):
        h = np.exp(log_h)
        prop = thetas + h[:, None] * drift + np.sqrt(2.0 * h)[:, None] * noise[:, k]
        with np.errstate(over="ignore", invalid="ignore"):
            drift_prop = _drift_lanes(model, prop)
            logp_prop = _log_posterior_lanes(model, prop)
            fwd = -((prop - thetas - h[:, None] * drift) ** 2).sum(axis=-1) / (4.0 * h)
            bwd = -((thetas - prop - h[:, None] * drift_prop) ** 2).sum(axis=-1) / (
                4.0 * h
            )
            log_acc = (logp_prop + bwd) - (logp + fwd)
        ok = (
            np.isfinite(prop).all(axis=-1)
            & (np.max(np.abs(prop), axis=-1) <= DIVERGENCE_BOUND)
            & np.isfinite(log_acc)
        )
        with np.errstate(divide="ignore"):
            acc = ok & (np.log(unif[:, k]) < np.where(ok, log_acc, -np.inf))
        thetas = np.where(acc[:, None], prop, thetas)
        drift = np.where(acc[:, None], drift_prop, drift)
        logp = np.where(acc, logp_prop, logp)
        accepts += acc
        if adapt_target is not None:
            log_h = log_h + (acc.astype(float) - adapt_target) / math.sqrt(k + 1)
        if g is not None and k >= burnin:
            g_sum += g(thetas)
    return thetas, log_h, accepts / steps, g_sum


def run_mala_experiment(
    model: PosteriorModel,
    g,
    theta0: np.ndarray,
    steps: int = 10_000,
    burnin: int = 1_000,
    reps: int = 50,
    seed: int = 0,
    target_accept: float = 0.574,
    tune_steps: int = 2000,
    h_init: float | None = None,
) -> MalaExperimentResult:
    """Repeated tuned MALA runs estimating E[g].

    Each repetition tunes its own step size from ``theta0``, runs ``steps``
    steps, and averages g over the post-burn-in states.  Repetitions use
    disjoint streams keyed by their index, so results do not depend on how
    the work is scheduled.
    """
    if steps <= burnin:
        raise ValueError("steps must exceed burnin")
    theta0 = np.asarray(theta0, dtype=float)
    d = model.dim
    if h_init is None:
        h_init = 1.0 / (model.n_items + 1)

    tune_noise = np.stack(
        [
            substream(seed, DOMAIN_MALA, r, PHASE_TUNE_NOISE).standard_normal(
                (tune_steps, d)
            )
            for r in range(reps)
        ]
    )
    tune_unif = np.stack(
        [
            substream(seed, DOMAIN_MALA, r, PHASE_TUNE_UNIF).random(tune_steps)
            for r in range(reps)
        ]
    )
    chain_noise = np.stack(
        [
            substream(seed, DOMAIN_MALA, r, PHASE_CHAIN_NOISE).standard_normal(
                (steps, d)
            )
            for r in range(reps)
        ]
    )
    chain_unif = np.stack(
        [
            substream(seed, DOMAIN_MALA, r, PHASE_CHAIN_UNIF).random(steps)
            for r in range(reps)
        ]
    )

    thetas = np.tile(theta0, (reps, 1))
    log_h = np.full(reps, math.log(h_init))
    thetas, log_h, _, _ = _run_lanes(
        model, thetas, log_h, tune_noise, tune_unif, adapt_target=target_accept
    )
    _, _, accept_rates, g_sum = _run_lanes(
        model,
        np.tile(theta0, (reps, 1)),
        log_h,
        chain_noise,
        chain_unif,
        adapt_target=None,
        g=g,
        burnin=burnin,
    )
    estimates = g_sum / (steps - burnin)
    return MalaExperimentResult(
        estimates=estimates,
        step_sizes=np.exp(log_h),
        accept_rates=accept_rates,
        steps=steps,
        burnin=burnin,
        n_items=model.n_items,
        tuning_item_evals=2 * model.n_items * tune_steps * reps,
    )


def batch_means_se(samples: np.ndarray, n_batches: int = 50) -> float:
    """Autocorrelation-adjusted standard error of a chain average."""
    samples = np.asarray(samples, dtype=float)
    usable = (len(samples) // n_batches) * n_batches
    batches = samples[:usable].reshape(n_batches, -1).mean(axis=1)
    return float(batches.std(ddof=1) / math.sqrt(n_batches))
