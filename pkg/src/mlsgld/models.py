"""Posterior models, the MAP solver, and the quantity of interest.

A posterior is prior(theta) * prod_i p(x_i | theta).  Models expose per-item
log densities, gradients and Hessians both one item at a time (the reference
surface) and as vectorized kernels over lanes of parameter vectors, which is
what the samplers use.  Lane kernels take a block of parameter vectors with
shape (R, d) plus a block of item indices with shape (R, n) and return one
result per lane; all reductions run over fixed-length trailing axes, so a
lane's result never depends on how many other lanes ride along.  Both models
use a standard normal prior on theta.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass

import numpy as np

from .streams import DOMAIN_DATA, substream


def sigmoid(z: np.ndarray) -> np.ndarray:
    """Numerically stable logistic function 1 / (1 + exp(-z))."""
    out = np.empty_like(z, dtype=float)
    pos = z >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-z[pos]))
    ez = np.exp(z[~pos])
    out[~pos] = ez / (1.0 + ez)
    return out


@dataclass(frozen=True)
class Dataset:
    """Covariate rows plus labels; the conditioning data of the posterior."""

    kind: str  # "logistic" or "gaussian"
    covariates: np.ndarray  # (N, d)
    labels: np.ndarray  # (N,); in {-1, +1} for logistic, reals for gaussian

    def __post_init__(self):
        cov = np.asarray(self.covariates, dtype=float)
        lab = np.asarray(self.labels, dtype=float)
        if cov.ndim != 2 or cov.shape[0] < 1:
            raise ValueError("covariates must be a non-empty N x d matrix")
        if lab.shape != (cov.shape[0],):
            raise ValueError("labels must have one entry per covariate row")
        if not np.all(np.isfinite(cov)):
            raise ValueError("covariates must be finite")
        if self.kind == "logistic" and not np.all(np.isin(lab, (-1.0, 1.0))):
            raise ValueError("logistic labels must be exactly -1 or +1")
        object.__setattr__(self, "covariates", cov)
        object.__setattr__(self, "labels", lab)

    @property
    def n_items(self) -> int:
        return self.covariates.shape[0]

    @property
    def dim(self) -> int:
        return self.covariates.shape[1]


class PosteriorModel:
    """Contract shared by the concrete models.

    Scalar surface: ``item_grad``, ``item_hessian``, ``item_log_density``,
    ``prior_grad``, ``log_posterior``.  Lane kernels: ``item_grads``,
    ``item_linearized_grads``, ``item_grad_sum``, ``prior_grads``.
    """

    dim: int
    n_items: int

    # -- prior: standard normal ------------------------------------------
    def prior_grad(self, theta: np.ndarray) -> np.ndarray:
        return -np.asarray(theta, dtype=float)

    def prior_grads(self, thetas: np.ndarray) -> np.ndarray:
        return -thetas

    def prior_log_density(self, theta: np.ndarray) -> float:
        return -0.5 * float(np.sum(np.asarray(theta, dtype=float) ** 2))

    # -- per-item quantities (implemented by subclasses) -----------------
    def item_log_density(self, i: int, theta: np.ndarray) -> float:
        raise NotImplementedError

    def item_grad(self, i: int, theta: np.ndarray) -> np.ndarray:
        raise NotImplementedError

    def item_hessian(self, i: int, theta: np.ndarray) -> np.ndarray:
        raise NotImplementedError

    def item_grads(self, thetas: np.ndarray, idx: np.ndarray) -> np.ndarray:
        raise NotImplementedError

    def item_linearized_grads(
        self, theta0: np.ndarray, idx: np.ndarray, deltas: np.ndarray
    ) -> np.ndarray:
        """grad at theta0 plus Hessian-at-theta0 times delta, per sampled item."""
        raise NotImplementedError

    def item_grad_sum(self, thetas: np.ndarray) -> np.ndarray:
        """Sum of all per-item gradients, one row per lane of ``thetas``."""
        raise NotImplementedError

    def item_hessian_sum(self, theta: np.ndarray) -> np.ndarray:
        raise NotImplementedError

    def item_log_density_sum(self, thetas: np.ndarray) -> np.ndarray:
        raise NotImplementedError

    # -- derived ----------------------------------------------------------
    def log_posterior(self, theta: np.ndarray) -> float:
        """Unnormalized log posterior density."""
        theta = np.asarray(theta, dtype=float)
        return self.prior_log_density(theta) + float(
            self.item_log_density_sum(theta[None, :])[0]
        )

    def _check_index(self, i: int):
        if not 0 <= i < self.n_items:
            raise IndexError(f"item index {i} out of range [0, {self.n_items})")


class LogisticRegressionModel(PosteriorModel):
    """Bayesian logistic regression: p(y | iota, theta) = f(y * theta.iota).

    Labels y are in {-1, +1}, f is the logistic function, and the prior on
    theta is standard normal.
    """

    def __init__(self, dataset: Dataset):
        if dataset.kind != "logistic":
            raise ValueError("expected a logistic dataset")
        self.dataset = dataset
        self.iota = dataset.covariates
        self.y = dataset.labels
        self.dim = dataset.dim
        self.n_items = dataset.n_items

    def _margin(self, i: int, theta: np.ndarray) -> float:
        return float(self.y[i] * np.dot(self.iota[i], theta))

    def item_log_density(self, i, theta):
        self._check_index(i)
        z = self._margin(i, np.asarray(theta, dtype=float))
        # log f(z) = -log(1 + exp(-z)), stable for large |z|
        return -float(np.logaddexp(0.0, -z))

    def item_grad(self, i, theta):
        self._check_index(i)
        theta = np.asarray(theta, dtype=float)
        z = self._margin(i, theta)
        return self.y[i] * sigmoid(np.array(-z)) * self.iota[i]

    def item_hessian(self, i, theta):
        self._check_index(i)
        theta = np.asarray(theta, dtype=float)
        z = self._margin(i, theta)
        w = float(sigmoid(np.array(z)) * sigmoid(np.array(-z)))
        return -w * np.outer(self.iota[i], self.iota[i])

    # -- lane kernels ------------------------------------------------------
    def item_grads(self, thetas, idx):
        io = self.iota[idx]  # (R, n, d)
        yy = self.y[idx]  # (R, n)
        z = yy * (io * thetas[:, None, :]).sum(axis=-1)
        return (yy * sigmoid(-z))[..., None] * io

    def item_linearized_grads(self, theta0, idx, deltas):
        io = self.iota[idx]
        yy = self.y[idx]
        z0 = yy * (io * theta0[None, None, :]).sum(axis=-1)
        grad0 = (yy * sigmoid(-z0))[..., None] * io
        w0 = sigmoid(z0) * sigmoid(-z0)
        proj = (io * deltas[:, None, :]).sum(axis=-1)  # iota . delta per item
        return grad0 - (w0 * proj)[..., None] * io

    def item_grad_sum(self, thetas):
        z = self.y[None, :] * (self.iota[None, :, :] * thetas[:, None, :]).sum(axis=-1)
        return ((self.y[None, :] * sigmoid(-z))[..., None] * self.iota[None, :, :]).sum(
            axis=1
        )

    def item_hessian_sum(self, theta):
        z = self.y * (self.iota @ np.asarray(theta, dtype=float))
        w = sigmoid(z) * sigmoid(-z)
        return -(self.iota.T * w) @ self.iota

    def item_log_density_sum(self, thetas):
        z = self.y[None, :] * (self.iota[None, :, :] * thetas[:, None, :]).sum(axis=-1)
        return -np.logaddexp(0.0, -z).sum(axis=-1)


class GaussianConjugateModel(PosteriorModel):
    """Toy model with closed-form posterior: observations x_i ~ N(theta, I).

    With the standard normal prior the posterior is
    N(sum(x_i) / (N + 1), I / (N + 1)), which makes this the main oracle for
    sampler correctness.  ``n_items`` may be zero, leaving the prior itself
    as the target.
    """

    def __init__(self, observations: np.ndarray):
        obs = np.atleast_2d(np.asarray(observations, dtype=float))
        if obs.size == 0:
            obs = obs.reshape(0, max(1, obs.shape[-1] if obs.ndim else 1))
        self.observations = obs
        self.n_items = obs.shape[0]
        self.dim = obs.shape[1]

    @classmethod
    def prior_only(cls, dim: int) -> "GaussianConjugateModel":
        return cls(np.empty((0, dim)))

    @classmethod
    def from_dataset(cls, dataset: Dataset) -> "GaussianConjugateModel":
        if dataset.kind != "gaussian":
            raise ValueError("expected a gaussian dataset")
        return cls(dataset.covariates)

    def posterior_mean(self) -> np.ndarray:
        return self.observations.sum(axis=0) / (self.n_items + 1)

    def posterior_variance(self) -> float:
        """Per-coordinate posterior variance."""
        return 1.0 / (self.n_items + 1)

    def item_log_density(self, i, theta):
        self._check_index(i)
        r = self.observations[i] - np.asarray(theta, dtype=float)
        return -0.5 * float(np.sum(r**2))

    def item_grad(self, i, theta):
        self._check_index(i)
        return self.observations[i] - np.asarray(theta, dtype=float)

    def item_hessian(self, i, theta):
        self._check_index(i)
        return -np.eye(self.dim)

    def item_grads(self, thetas, idx):
        return self.observations[idx] - thetas[:, None, :]

    def item_linearized_grads(self, theta0, idx, deltas):
        # Quadratic log likelihood: the linearization is exact.
        return self.observations[idx] - theta0[None, None, :] - deltas[:, None, :]

    def item_grad_sum(self, thetas):
        if self.n_items == 0:
            return np.zeros_like(thetas)
        return self.observations.sum(axis=0)[None, :] - self.n_items * thetas

    def item_hessian_sum(self, theta):
        return -self.n_items * np.eye(self.dim)

    def item_log_density_sum(self, thetas):
        if self.n_items == 0:
            return np.zeros(thetas.shape[0])
        r = self.observations[None, :, :] - thetas[:, None, :]
        return -0.5 * (r**2).sum(axis=(1, 2))


@dataclass(frozen=True)
class MapEstimate:
    theta0: np.ndarray
    gradient_norm: float
    iterations: int


def log_posterior_grad_full(model: PosteriorModel, theta: np.ndarray) -> np.ndarray:
    """Full-data gradient of the log posterior: prior part + all item parts."""
    theta = np.asarray(theta, dtype=float)
    if theta.shape != (model.dim,):
        raise ValueError(f"theta must have shape ({model.dim},)")
    grad = model.prior_grad(theta) + model.item_grad_sum(theta[None, :])[0]
    if not np.all(np.isfinite(grad)):
        raise FloatingPointError("log posterior gradient overflowed")
    return grad


def map_newton(
    model: PosteriorModel,
    theta_init: np.ndarray,
    tol: float = 1e-8,
    max_iter: int = 100,
) -> MapEstimate:
    """Newton-Raphson ascent to the posterior mode.

    Iterates theta <- theta - H(theta)^{-1} grad(theta) on the full log
    posterior until the gradient norm drops below ``tol``.  Both models are
    strongly log-concave, so no step-size control is needed.
    """
    if tol <= 0:
        raise ValueError("tol must be positive")
    if max_iter < 1:
        raise ValueError("max_iter must be >= 1")
    theta = np.asarray(theta_init, dtype=float).copy()
    for it in range(1, max_iter + 1):
        grad = log_posterior_grad_full(model, theta)
        hess = -np.eye(model.dim) + model.item_hessian_sum(theta)
        try:
            step = np.linalg.solve(hess, grad)
        except np.linalg.LinAlgError as exc:
            raise np.linalg.LinAlgError(
                f"singular posterior Hessian at iteration {it}"
            ) from exc
        theta = theta - step
        gnorm = float(np.linalg.norm(log_posterior_grad_full(model, theta)))
        if gnorm <= tol:
            return MapEstimate(theta0=theta, gradient_norm=gnorm, iterations=it)
    raise RuntimeError(
        f"Newton did not reach gradient norm {tol} in {max_iter} iterations "
        f"(last norm {gnorm:.3e})"
    )


def g_quadratic(theta: np.ndarray, theta0: np.ndarray) -> float:
    """Squared Euclidean distance ||theta - theta0||^2."""
    theta = np.asarray(theta, dtype=float)
    theta0 = np.asarray(theta0, dtype=float)
    if theta.shape != theta0.shape:
        raise ValueError(f"dimension mismatch: {theta.shape} vs {theta0.shape}")
    return float(np.sum((theta - theta0) ** 2))


def make_quadratic_g(theta0: np.ndarray):
    """Vectorized ||theta - theta0||^2 over trailing-axis parameter blocks."""
    theta0 = np.asarray(theta0, dtype=float)

    def g(thetas: np.ndarray) -> np.ndarray:
        return ((thetas - theta0) ** 2).sum(axis=-1)

    return g


def generate_dataset(kind: str, n_items: int, dim: int, seed: int) -> Dataset:
    """Draw a synthetic dataset, deterministic in ``seed``.

    logistic: covariate columns 0..d-2 are i.i.d. standard normal, the last
    column is the constant 1; a ground-truth parameter is drawn once from
    the prior and labels are +1 with probability f(theta_true . iota).

    gaussian: observations are theta_true + standard normal noise; the label
    column mirrors the first observation coordinate (the toy has no separate
    response).
    """
    if n_items < 1 or dim < 1:
        raise ValueError("n_items and dim must be >= 1")
    cov_rng = substream(seed, DOMAIN_DATA, 0)
    theta_rng = substream(seed, DOMAIN_DATA, 1)
    label_rng = substream(seed, DOMAIN_DATA, 2)
    theta_true = theta_rng.standard_normal(dim)
    if kind == "logistic":
        covariates = cov_rng.standard_normal((n_items, dim))
        covariates[:, dim - 1] = 1.0
        p_plus = sigmoid(covariates @ theta_true)
        labels = np.where(label_rng.random(n_items) < p_plus, 1.0, -1.0)
        return Dataset(kind="logistic", covariates=covariates, labels=labels)
    if kind == "gaussian":
        observations = theta_true[None, :] + cov_rng.standard_normal((n_items, dim))
        return Dataset(
            kind="gaussian", covariates=observations, labels=observations[:, 0].copy()
        )
    raise ValueError(f"unknown dataset kind {kind!r}")


def save_dataset(path, dataset: Dataset):
    """Write a dataset as CSV with header y,iota1,...,iotad."""
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["y"] + [f"iota{j + 1}" for j in range(dataset.dim)])
        for y, row in zip(dataset.labels, dataset.covariates):
            label = str(int(y)) if dataset.kind == "logistic" else repr(float(y))
            writer.writerow([label] + [repr(float(v)) for v in row])


def load_dataset(path, kind: str) -> Dataset:
    """Read a dataset written by :func:`save_dataset`."""
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader)
        dim = len(header) - 1
        labels, rows = [], []
        for rec in reader:
            labels.append(float(rec[0]))
            rows.append([float(v) for v in rec[1:]])
    return Dataset(
        kind=kind,
        covariates=np.array(rows, dtype=float).reshape(len(rows), dim),
        labels=np.array(labels, dtype=float),
    )


def build_model(dataset: Dataset) -> PosteriorModel:
    if dataset.kind == "logistic":
        return LogisticRegressionModel(dataset)
    return GaussianConjugateModel.from_dataset(dataset)
