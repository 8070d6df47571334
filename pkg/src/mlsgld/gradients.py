"""Drift estimators for the Euler transition.

All estimators target the full-data drift grad log prior + sum_i grad log
p(x_i | theta) and report their cost in item evaluations (one evaluation =
one item touched at one point; a combined gradient-plus-Hessian touch of the
same item counts once).  The lane API evaluates a block of parameter vectors
(R, d) against a block of batches (R, n) and returns per-lane drifts and
costs; the single-vector functions are thin wrappers over one lane.

The Taylor estimator replaces the plain subsampled sum by the exact first
and second order sums at a fixed center plus a subsampled correction of the
remainder, which has small variance while the state stays near the center.
Only the summed center quantities are kept, so memory stays O(d^2)
regardless of the dataset size.
"""

from __future__ import annotations

import re
from dataclasses import dataclass

import numpy as np

from .models import PosteriorModel


@dataclass(frozen=True)
class TaylorCenter:
    """Precomputed center sums for the Taylor-remainder estimator."""

    theta0: np.ndarray  # (d,)
    grad_sum: np.ndarray  # (d,) sum of item gradients at theta0
    hess_sum: np.ndarray  # (d, d) sum of item Hessians at theta0
    build_cost: int  # item evaluations spent building the center


@dataclass(frozen=True)
class DriftEstimate:
    drift: np.ndarray
    cost: int

    @property
    def finite(self) -> bool:
        return bool(np.all(np.isfinite(self.drift)))


def taylor_center(model: PosteriorModel, theta0: np.ndarray) -> TaylorCenter:
    """Build the exact gradient/Hessian sums at the center (cost N)."""
    theta0 = np.asarray(theta0, dtype=float)
    grad_sum = model.item_grad_sum(theta0[None, :])[0]
    hess_sum = model.item_hessian_sum(theta0)
    if not (np.all(np.isfinite(grad_sum)) and np.all(np.isfinite(hess_sum))):
        raise FloatingPointError("non-finite center sums")
    return TaylorCenter(
        theta0=theta0,
        grad_sum=grad_sum,
        hess_sum=hess_sum,
        build_cost=model.n_items,
    )


class DriftEstimator:
    """Base class: per-lane drift and per-lane cost."""

    needs_batch = True
    batch_size: int = 0

    def __init__(self, model: PosteriorModel):
        self.model = model

    def drift_lanes(
        self, thetas: np.ndarray, taus: np.ndarray | None
    ) -> tuple[np.ndarray, np.ndarray]:
        raise NotImplementedError


class FullDrift(DriftEstimator):
    """Exact drift using all N items per call."""

    needs_batch = False

    def drift_lanes(self, thetas, taus=None):
        drift = self.model.prior_grads(thetas) + self.model.item_grad_sum(thetas)
        cost = np.full(thetas.shape[0], self.model.n_items, dtype=np.int64)
        return drift, cost


class SubsampledDrift(DriftEstimator):
    """Standard minibatch drift: prior grad + (N/n) * batch gradient sum."""

    def __init__(self, model, batch_size: int):
        super().__init__(model)
        self.batch_size = int(batch_size)

    def drift_lanes(self, thetas, taus):
        scale = self.model.n_items / self.batch_size
        grads = self.model.item_grads(thetas, taus)
        drift = self.model.prior_grads(thetas) + scale * grads.sum(axis=1)
        cost = np.full(thetas.shape[0], self.batch_size, dtype=np.int64)
        return drift, cost


class TaylorDrift(DriftEstimator):
    """Center sums plus a subsampled remainder correction (cost 2n per call)."""

    def __init__(self, model, center: TaylorCenter, batch_size: int):
        super().__init__(model)
        self.center = center
        self.batch_size = int(batch_size)

    def _taylor_part(self, thetas):
        deltas = thetas - self.center.theta0[None, :]
        hess_delta = (deltas[:, None, :] * self.center.hess_sum[None, :, :]).sum(
            axis=-1
        )
        return self.center.grad_sum[None, :] + hess_delta, deltas

    def drift_lanes(self, thetas, taus):
        taylor_sum, deltas = self._taylor_part(thetas)
        grads = self.model.item_grads(thetas, taus)
        linear = self.model.item_linearized_grads(self.center.theta0, taus, deltas)
        remainder = (grads - linear).sum(axis=1)
        scale = self.model.n_items / self.batch_size
        drift = self.model.prior_grads(thetas) + taylor_sum + scale * remainder
        cost = np.full(thetas.shape[0], 2 * self.batch_size, dtype=np.int64)
        return drift, cost


class SwitchedDrift(DriftEstimator):
    """Taylor drift within ``radius`` of the center, plain subsampling outside."""

    def __init__(self, model, center: TaylorCenter, batch_size: int, radius: float):
        super().__init__(model)
        if not radius > 0:
            raise ValueError("radius must be positive (may be inf)")
        self.center = center
        self.radius = float(radius)
        self.batch_size = int(batch_size)
        self._taylor = TaylorDrift(model, center, batch_size)
        self._plain = SubsampledDrift(model, batch_size)

    def drift_lanes(self, thetas, taus):
        dist = np.sqrt(((thetas - self.center.theta0[None, :]) ** 2).sum(axis=-1))
        near = dist <= self.radius
        drift_t, cost_t = self._taylor.drift_lanes(thetas, taus)
        drift_s, cost_s = self._plain.drift_lanes(thetas, taus)
        drift = np.where(near[:, None], drift_t, drift_s)
        cost = np.where(near, cost_t, cost_s)
        return drift, cost


def _single(estimator: DriftEstimator, theta, tau) -> DriftEstimate:
    theta = np.asarray(theta, dtype=float)
    if tau is not None:
        tau = np.asarray(tau, dtype=np.int64)
        if np.any(tau < 0) or np.any(tau >= estimator.model.n_items):
            raise IndexError("batch index out of range")
    taus = None if tau is None else tau[None, :]
    drift, cost = estimator.drift_lanes(theta[None, :], taus)
    return DriftEstimate(drift=drift[0], cost=int(cost[0]))


def drift_full(model: PosteriorModel, theta) -> DriftEstimate:
    return _single(FullDrift(model), theta, None)


def drift_subsampled(model: PosteriorModel, theta, tau) -> DriftEstimate:
    tau = np.asarray(tau, dtype=np.int64)
    return _single(SubsampledDrift(model, tau.shape[0]), theta, tau)


def drift_taylor(model: PosteriorModel, center: TaylorCenter, theta, tau) -> DriftEstimate:
    tau = np.asarray(tau, dtype=np.int64)
    return _single(TaylorDrift(model, center, tau.shape[0]), theta, tau)


def drift_switched(
    model: PosteriorModel, center: TaylorCenter, theta, tau, radius: float
) -> DriftEstimate:
    tau = np.asarray(tau, dtype=np.int64)
    return _single(SwitchedDrift(model, center, tau.shape[0], radius), theta, tau)


_SWITCHED_RE = re.compile(r"^switched\(([^)]+)\)$")


def parse_estimator_spec(spec: str) -> tuple[str, float | None]:
    """Parse 'full' | 'subsample' | 'taylor' | 'switched(radius)'."""
    spec = spec.strip()
    if spec in ("full", "subsample", "taylor"):
        return spec, None
    m = _SWITCHED_RE.match(spec)
    if m:
        return "switched", float(m.group(1))
    raise ValueError(f"unknown estimator spec {spec!r}")


def build_estimator(
    spec: str,
    model: PosteriorModel,
    batch_size: int,
    center: TaylorCenter | None = None,
) -> DriftEstimator:
    """Instantiate the estimator named by ``spec``.

    The Taylor-family estimators require a prebuilt center; its build cost is
    accounted by the caller, once per run.
    """
    name, radius = parse_estimator_spec(spec)
    if name == "full":
        return FullDrift(model)
    if name == "subsample":
        return SubsampledDrift(model, batch_size)
    if center is None:
        raise ValueError(f"estimator {spec!r} requires a Taylor center")
    if name == "taylor":
        return TaylorDrift(model, center, batch_size)
    return SwitchedDrift(model, center, batch_size, radius)
