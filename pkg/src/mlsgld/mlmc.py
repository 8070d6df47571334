"""The multilevel estimator: allocation, adaptive depth, cost accounting.

The estimate is the sum of per-level sample means of the coupled increments.
Sample counts follow the variance-optimal rule N_l proportional to
sqrt(V_l / C_l), sized so the estimator variance stays below eps^2 / 2; the
remaining eps^2 / 2 budget is for squared bias, which is controlled by the
mean of the deepest level.  Costs are counted in item evaluations and
reported in epochs (N item evaluations = one epoch).
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .coupling import CouplingVariant, level_schedule, sample_delta_block
from .gradients import build_estimator, parse_estimator_spec, taylor_center
from .models import PosteriorModel

# Bias decay exponent used by the stopping rule; the observed mean decay of
# both couplings is at least first order, so 1 is the conservative choice.
BIAS_ALPHA = 1.0

# Smallest admissible absolute accuracy when converting a relative target;
# guards the degenerate case of a vanishing running estimate.
EPS_ABS_FLOOR = 1e-12


@dataclass(frozen=True)
class LevelStats:
    """Summary of the samples drawn at one level."""

    level: int
    n_samples: int
    mean: float
    variance: float
    cost_per_sample: float
    n_rejected: int = 0


@dataclass(frozen=True)
class MlmcCaps:
    """Hard bounds on the adaptive driver."""

    max_level: int = 10
    max_samples_per_level: int = 4_000_000
    max_rounds: int = 60


@dataclass
class MlmcResult:
    estimate: float
    target_eps_rel: float
    eps_target: float  # absolute accuracy target at the final iteration
    statistical_error_bound: float
    bias_bound: float
    levels: list[LevelStats]
    total_cost: int
    epochs: float
    converged: bool

    @property
    def eps_achieved_bound(self) -> float:
        return math.hypot(self.statistical_error_bound, self.bias_bound)


def optimal_allocation(stats: list[LevelStats], eps: float, pilot_min: int = 2) -> list[int]:
    """Sample counts bounding the estimator variance by eps^2 / 2.

    N_l = ceil(2 eps^-2 sqrt(V_l / C_l) * sum_j sqrt(V_j C_j)).  A level with
    zero variance keeps the pilot minimum instead of dividing by zero.
    """
    if not eps > 0:
        raise ValueError("eps must be positive")
    sqrt_vc = sum(math.sqrt(s.variance * s.cost_per_sample) for s in stats)
    counts = []
    for s in stats:
        if s.variance <= 0.0:
            counts.append(pilot_min)
            continue
        n = 2.0 * eps**-2 * math.sqrt(s.variance / s.cost_per_sample) * sqrt_vc
        counts.append(max(pilot_min, int(math.ceil(n))))
    return counts


def cost_report(result: MlmcResult, n_items: int) -> float:
    """Total cost in epochs: item evaluations divided by the dataset size."""
    if n_items < 1:
        raise ValueError("n_items must be >= 1")
    return result.total_cost / n_items


def result_to_dict(result: MlmcResult) -> dict:
    """JSON-ready view of a result."""
    return {
        "estimate": result.estimate,
        "eps_target": result.eps_target,
        "eps_achieved_bound": result.eps_achieved_bound,
        "levels": [
            {
                "l": s.level,
                "N_l": s.n_samples,
                "mean": s.mean,
                "var": s.variance,
                "cost_per_sample": s.cost_per_sample,
            }
            for s in result.levels
        ],
        "total_item_evals": result.total_cost,
        "epochs": result.epochs,
        "converged": result.converged,
    }


@dataclass
class _LevelState:
    level: int
    values: np.ndarray = field(default_factory=lambda: np.empty(0))
    total_cost: int = 0
    attempts: int = 0
    rejected: int = 0
    next_replicate: int = 0
    capped: bool = False

    @property
    def n_samples(self) -> int:
        return self.values.shape[0]

    def stats(self) -> LevelStats:
        n = self.n_samples
        return LevelStats(
            level=self.level,
            n_samples=n,
            mean=float(self.values.mean()) if n else math.nan,
            variance=float(self.values.var(ddof=1)) if n >= 2 else 0.0,
            cost_per_sample=self.total_cost / max(1, self.attempts),
            n_rejected=self.rejected,
        )


def _fit_variance_decay(stats: list[LevelStats]) -> float:
    """log2 decay rate of the increment variance, clipped to [0.5, 3]."""
    pts = [(s.level, s.variance) for s in stats if s.level >= 1 and s.variance > 0]
    if len(pts) < 2:
        return 1.0
    ls = np.array([p[0] for p in pts], dtype=float)
    lv = np.log2([p[1] for p in pts])
    slope = np.polyfit(ls, lv, 1)[0]
    return float(np.clip(-slope, 0.5, 3.0))


def _safeguarded(stats: list[LevelStats]) -> list[LevelStats]:
    """Floor small-sample variances by extrapolating the fitted decay.

    Protects the allocation from a lucky pilot underestimating a level's
    variance; level 0 is left as measured.
    """
    beta = _fit_variance_decay(stats)
    out = [stats[0]]
    for cur in stats[1:]:
        floor = 0.5 * out[-1].variance * 2.0**-beta
        if cur.variance < floor:
            cur = LevelStats(
                level=cur.level,
                n_samples=cur.n_samples,
                mean=cur.mean,
                variance=floor,
                cost_per_sample=cur.cost_per_sample,
                n_rejected=cur.n_rejected,
            )
        out.append(cur)
    return out


def run_mlmc(
    target_eps_rel: float,
    variant: CouplingVariant | str,
    estimator_spec: str,
    model: PosteriorModel,
    g,
    theta0: np.ndarray,
    m: int = 5,
    h0: float | None = None,
    seed: int = 0,
    caps: MlmcCaps | None = None,
    batch_size: int | None = None,
    pilot: int = 100,
    threads: int = 1,
) -> MlmcResult:
    """Adaptive multilevel estimate of E[g] over the posterior.

    Pilot samples are drawn at levels 0..2, the relative target is converted
    to an absolute one against the running estimate, and the driver then
    alternates optimal reallocation with a bias test on the deepest level,
    adding levels until both the statistical and bias bounds fit inside the
    eps budget or a cap is hit (in which case the result is flagged
    unconverged).
    """
    if not target_eps_rel > 0:
        raise ValueError("target_eps_rel must be positive")
    caps = caps or MlmcCaps()
    if isinstance(variant, str):
        variant = CouplingVariant.parse(variant)
    if h0 is None:
        if model.n_items < 1:
            raise ValueError("h0 must be given for a model without data items")
        h0 = 1.0 / model.n_items
    if batch_size is None:
        batch_size = max(1, math.ceil(model.n_items ** (1.0 / 3.0)))
    theta0 = np.asarray(theta0, dtype=float)

    est_name, _ = parse_estimator_spec(estimator_spec)
    center = None
    center_cost = 0
    if est_name in ("taylor", "switched"):
        center = taylor_center(model, theta0)
        center_cost = center.build_cost
    estimator = build_estimator(estimator_spec, model, batch_size, center)

    levels: list[_LevelState] = []

    def add_level(level: int):
        levels.append(_LevelState(level=level))
        extend_level(levels[-1], pilot)

    def extend_level(ls: _LevelState, target_accepted: int):
        target_accepted = min(target_accepted, caps.max_samples_per_level)
        if target_accepted > caps.max_samples_per_level - 1:
            ls.capped = True
        cfg = level_schedule(ls.level, m, h0)
        stalled_rounds = 0
        while ls.n_samples < target_accepted:
            want = target_accepted - ls.n_samples
            block = sample_delta_block(
                model,
                g,
                theta0,
                cfg,
                estimator,
                variant,
                seed,
                range(ls.next_replicate, ls.next_replicate + want),
                threads=threads,
            )
            ls.next_replicate += want
            ls.attempts += want
            ls.total_cost += int(block.costs.sum())
            ok = ~block.diverged
            ls.rejected += int(block.diverged.sum())
            stalled_rounds = 0 if ok.any() else stalled_rounds + 1
            if stalled_rounds >= 8:
                raise RuntimeError(
                    f"samples at level {ls.level} keep diverging; "
                    f"h0={h0} is too large for this posterior"
                )
            ls.values = np.concatenate([ls.values, block.values[ok]])

    n_pilot_levels = min(3, caps.max_level + 1)
    for l in range(n_pilot_levels):
        add_level(l)

    eps_abs = math.nan
    stat_bound = math.inf
    bias_bound = math.inf
    converged = False
    for _round in range(caps.max_rounds):
        stats = [ls.stats() for ls in levels]
        estimate = sum(s.mean for s in stats)
        eps_abs = target_eps_rel * max(abs(estimate), EPS_ABS_FLOOR)
        alloc = optimal_allocation(_safeguarded(stats), eps_abs, pilot_min=pilot)
        for ls, n_target in zip(levels, alloc):
            if n_target > ls.n_samples:
                extend_level(ls, n_target)

        stats = [ls.stats() for ls in levels]
        estimate = sum(s.mean for s in stats)
        eps_abs = target_eps_rel * max(abs(estimate), EPS_ABS_FLOOR)
        stat_bound = math.sqrt(
            sum(s.variance / s.n_samples for s in stats if s.n_samples)
        )
        bias_bound = abs(stats[-1].mean) / (2.0**BIAS_ALPHA - 1.0)
        budget = eps_abs / math.sqrt(2.0)

        if bias_bound > budget and levels[-1].level < caps.max_level:
            add_level(levels[-1].level + 1)
            continue
        if stat_bound <= budget and bias_bound <= budget:
            converged = True
            break
        if stat_bound > budget and all(
            ls.capped or ls.n_samples >= caps.max_samples_per_level for ls in levels
        ):
            break
        if bias_bound > budget and levels[-1].level >= caps.max_level:
            if stat_bound <= budget:
                break
            # keep tightening the statistical side; one more round

    stats = [ls.stats() for ls in levels]
    estimate = sum(s.mean for s in stats)
    total_cost = center_cost + sum(ls.total_cost for ls in levels)
    return MlmcResult(
        estimate=float(estimate),
        target_eps_rel=target_eps_rel,
        eps_target=float(eps_abs),
        statistical_error_bound=float(stat_bound),
        bias_bound=float(bias_bound),
        levels=stats,
        total_cost=total_cost,
        epochs=total_cost / max(1, model.n_items),
        converged=converged,
    )
