"""End-to-end experiment drivers emitting plot-ready CSV/JSON.

Every command is a deterministic function of (config, seed): outputs carry
no timestamps, floats are written with full round-trip precision, and all
randomness flows through keyed streams, so rerunning a command byte-for-byte
reproduces its files regardless of the thread count.
"""

from __future__ import annotations

import csv
import json
import math
import subprocess
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from .coupling import CouplingVariant, level_schedule, sample_delta_block
from .gradients import build_estimator, parse_estimator_spec, taylor_center
from .mala import run_mala_experiment
from .mlmc import MlmcCaps, run_mlmc
from .models import (
    GaussianConjugateModel,
    build_model,
    generate_dataset,
    make_quadratic_g,
    map_newton,
    save_dataset,
)
from .streams import DOMAIN_REFERENCE, substream


def derive_seed(seed: int, tag: int, index: int) -> int:
    """A child seed for replicate runs, disjoint from all sampler streams."""
    ss = np.random.SeedSequence(seed, spawn_key=(97, tag, index))
    return int(ss.generate_state(1, np.uint64)[0])


DEFAULT_EPS_GRID = [2.0 ** (-k / 2.0) for k in range(2, 11)]
DEFAULT_COMPLEXITY_N = [100, 316, 1000]


@dataclass
class ExperimentConfig:
    """Shared settings of all experiment subcommands."""

    model: str = "logistic"
    n_data: int = 100
    dim: int = 3
    batch_size: int | None = None  # default: ceil(N^(1/3))
    m: int = 5
    h0: float | None = None  # default: 1/N
    variant: str = "antithetic"
    estimator: str = "taylor"
    window_fraction: float = 0.5
    seed: int = 0
    levels: int = 6  # deepest level for decay/paths
    samples: int = 1000  # per-level sample count for decay/paths
    eps_list: list[float] = field(default_factory=lambda: list(DEFAULT_EPS_GRID))
    reps: int = 50  # replicates per eps in the accuracy sweep
    max_level: int = 10
    pilot: int = 100
    complexity_n_list: list[int] = field(
        default_factory=lambda: list(DEFAULT_COMPLEXITY_N)
    )
    complexity_seeds: int = 10
    complexity_eps: float = 2.0**-5
    mala_steps: int = 10_000
    mala_burnin: int = 1_000
    mala_reps: int = 50
    target_accept: float = 0.574
    threads: int = 1
    out: str = "results"

    def resolved_batch_size(self) -> int:
        if self.batch_size is not None:
            return self.batch_size
        return max(1, math.ceil(self.n_data ** (1.0 / 3.0)))

    def resolved_h0(self) -> float:
        return self.h0 if self.h0 is not None else 1.0 / self.n_data


@dataclass
class Problem:
    """A dataset, its model, the posterior mode, and the quantity g."""

    model: object
    theta0: np.ndarray
    g: object
    dataset: object


def build_problem(config: ExperimentConfig, n_data: int | None = None) -> Problem:
    n = n_data if n_data is not None else config.n_data
    dataset = generate_dataset(config.model, n, config.dim, config.seed)
    model = build_model(dataset)
    mode = map_newton(model, np.zeros(model.dim))
    return Problem(
        model=model,
        theta0=mode.theta0,
        g=make_quadratic_g(mode.theta0),
        dataset=dataset,
    )


def _build_estimator(config: ExperimentConfig, problem: Problem, n_data=None):
    batch = (
        config.batch_size
        if config.batch_size is not None
        else max(1, math.ceil((n_data or config.n_data) ** (1.0 / 3.0)))
    )
    name, _ = parse_estimator_spec(config.estimator)
    center = None
    if name in ("taylor", "switched"):
        center = taylor_center(problem.model, problem.theta0)
    return build_estimator(config.estimator, problem.model, batch, center), center


def git_describe() -> str:
    try:
        out = subprocess.run(
            ["git", "describe", "--always", "--dirty"],
            cwd=Path(__file__).resolve().parent,
            capture_output=True,
            text=True,
            timeout=10,
        )
        if out.returncode == 0:
            return out.stdout.strip()
    except OSError:
        pass
    return "unknown"


def write_csv(path: Path, header: list[str], rows: list[tuple]):
    """CSV writer using round-trip float formatting."""
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(header)
        for row in rows:
            writer.writerow(
                [repr(v) if isinstance(v, float) else str(v) for v in row]
            )


def read_csv(path: Path) -> tuple[list[str], list[list[str]]]:
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader)
        return header, [row for row in reader]


def write_meta(path: Path, command: str, config: ExperimentConfig, extra: dict):
    meta = {
        "command": command,
        "config": asdict(config),
        "git": git_describe(),
        "seed": config.seed,
    }
    meta.update(extra)
    with open(path, "w") as fh:
        json.dump(meta, fh, indent=2, sort_keys=True)
        fh.write("\n")


def _fit_slope(levels: np.ndarray, values: np.ndarray) -> float:
    return float(np.polyfit(levels, np.log2(values), 1)[0])


def cmd_gen_data(config: ExperimentConfig, out_dir: Path) -> bool:
    dataset = generate_dataset(config.model, config.n_data, config.dim, config.seed)
    save_dataset(out_dir / "dataset.csv", dataset)
    write_meta(out_dir / "dataset_meta.json", "gen-data", config, {})
    return True


def level_decay_table(
    config: ExperimentConfig,
    problem: Problem,
    variant: CouplingVariant,
    levels: range,
    samples: int,
):
    """Per-level increment mean/variance/cost for one coupling variant."""
    estimator, _ = _build_estimator(config, problem)
    rows = []
    for level in levels:
        cfg = level_schedule(level, config.m, config.resolved_h0())
        block = sample_delta_block(
            problem.model,
            problem.g,
            problem.theta0,
            cfg,
            estimator,
            variant,
            config.seed,
            range(samples),
            threads=config.threads,
        )
        ok = ~block.diverged
        vals = block.values[ok]
        rows.append(
            (
                level,
                float(vals.mean()),
                float(vals.var(ddof=1)),
                float(block.costs.mean()),
                int(ok.sum()),
            )
        )
    return rows


def decay_slopes(rows, fit_from: int = 2) -> dict:
    pts = [(r[0], abs(r[1]), r[2]) for r in rows if r[0] >= fit_from]
    levels = np.array([p[0] for p in pts], dtype=float)
    return {
        "fit_levels": [int(l) for l in levels],
        "mean_slope": _fit_slope(levels, np.array([p[1] for p in pts])),
        "var_slope": _fit_slope(levels, np.array([p[2] for p in pts])),
    }


def cmd_decay(config: ExperimentConfig, out_dir: Path) -> bool:
    problem = build_problem(config)
    variant = CouplingVariant.parse(config.variant, config.window_fraction)
    rows = level_decay_table(
        config, problem, variant, range(1, config.levels + 1), config.samples
    )
    write_csv(
        out_dir / "decay.csv",
        ["level", "mean_delta", "var_delta", "cost_per_sample", "samples"],
        rows,
    )
    write_meta(out_dir / "decay_meta.json", "decay", config, decay_slopes(rows))
    return True


def _reference_value(config: ExperimentConfig, problem: Problem) -> float:
    """Ground truth for E[g]: analytic for the toy, long tuned MALA otherwise."""
    if isinstance(problem.model, GaussianConjugateModel):
        return problem.model.dim * problem.model.posterior_variance()
    ref = run_mala_experiment(
        problem.model,
        problem.g,
        problem.theta0,
        steps=10 * config.mala_steps,
        burnin=10 * config.mala_burnin,
        reps=max(8, config.mala_reps // 2),
        seed=derive_seed(config.seed, 1, 0),
        target_accept=config.target_accept,
    )
    return ref.mean


def cmd_mse(config: ExperimentConfig, out_dir: Path) -> bool:
    problem = build_problem(config)
    reference = _reference_value(config, problem)
    caps = MlmcCaps(max_level=config.max_level)
    rows = []
    all_converged = True
    for eps in config.eps_list:
        results = [
            run_mlmc(
                eps,
                CouplingVariant.parse(config.variant, config.window_fraction),
                config.estimator,
                problem.model,
                problem.g,
                problem.theta0,
                m=config.m,
                h0=config.resolved_h0(),
                seed=derive_seed(config.seed, 2, r),
                caps=caps,
                batch_size=config.resolved_batch_size(),
                pilot=config.pilot,
                threads=config.threads,
            )
            for r in range(config.reps)
        ]
        all_converged &= all(res.converged for res in results)
        estimates = np.array([res.estimate for res in results])
        epochs = float(np.mean([res.epochs for res in results]))
        rel_mse = float(np.mean(((estimates - reference) / reference) ** 2))
        rows.append((f"mlsgld-{config.variant}-{config.estimator}", config.n_data, epochs, rel_mse))

        mala_steps = max(20, int(round(epochs / 2.0)))
        mala = run_mala_experiment(
            problem.model,
            problem.g,
            problem.theta0,
            steps=mala_steps,
            burnin=max(1, mala_steps // 10),
            reps=config.reps,
            seed=derive_seed(config.seed, 3, 0),
            target_accept=config.target_accept,
        )
        rows.append(
            (
                "mala",
                config.n_data,
                mala.epochs / config.reps,
                mala.relative_mse(reference),
            )
        )
    write_csv(out_dir / "mse.csv", ["method", "N", "epochs", "relative_mse"], rows)
    write_meta(
        out_dir / "mse_meta.json",
        "mse",
        config,
        {"reference": reference, "converged": all_converged},
    )
    return all_converged


def cmd_complexity(config: ExperimentConfig, out_dir: Path) -> bool:
    rows = []
    all_converged = True
    for n_data in config.complexity_n_list:
        problem = build_problem(config, n_data=n_data)
        h0 = config.h0 if config.h0 is not None else 1.0 / n_data
        batch = (
            config.batch_size
            if config.batch_size is not None
            else max(1, math.ceil(n_data ** (1.0 / 3.0)))
        )
        costs = []
        for j in range(config.complexity_seeds):
            res = run_mlmc(
                config.complexity_eps,
                CouplingVariant.parse(config.variant, config.window_fraction),
                config.estimator,
                problem.model,
                problem.g,
                problem.theta0,
                m=config.m,
                h0=h0,
                seed=derive_seed(config.seed, 4, j),
                caps=MlmcCaps(max_level=config.max_level),
                batch_size=batch,
                pilot=config.pilot,
                threads=config.threads,
            )
            all_converged &= res.converged
            costs.append(res.total_cost)
        mean_cost = float(np.mean(costs))
        rows.append(
            (
                f"mlsgld-{config.variant}-{config.estimator}",
                n_data,
                mean_cost,
                mean_cost / n_data,
                config.complexity_eps,
            )
        )
        mala = run_mala_experiment(
            problem.model,
            problem.g,
            problem.theta0,
            steps=config.mala_steps,
            burnin=config.mala_burnin,
            reps=config.mala_reps,
            seed=derive_seed(config.seed, 5, n_data),
            target_accept=config.target_accept,
        )
        rows.append(
            (
                "mala",
                n_data,
                float(mala.item_evals),
                mala.epochs,
                config.complexity_eps,
            )
        )
    write_csv(
        out_dir / "complexity.csv",
        ["method", "N", "total_item_evals", "epochs", "eps"],
        rows,
    )
    write_meta(out_dir / "complexity_meta.json", "complexity", config, {})
    return all_converged


def coupled_distance_trace(
    config: ExperimentConfig, problem: Problem, level: int
) -> np.ndarray:
    """Fine-to-coarse distance after each coarse step of one replicate."""
    estimator, _ = _build_estimator(config, problem)
    cfg = level_schedule(level, config.m, config.resolved_h0())
    block = sample_delta_block(
        problem.model,
        problem.g,
        problem.theta0,
        cfg,
        estimator,
        CouplingVariant(),
        config.seed,
        range(1),
        trace=True,
    )
    return block.distance_trace[:, 0]


def contraction_distance_trace(
    config: ExperimentConfig, problem: Problem, level: int, offset: float = 1.0
) -> np.ndarray:
    """Distance of two same-step paths driven by identical noise and batches.

    The second path starts ``offset`` away from the mode in every coordinate;
    under a log-concave posterior the distance contracts geometrically.
    """
    estimator, _ = _build_estimator(config, problem)
    model = problem.model
    cfg = level_schedule(level, config.m, config.resolved_h0())
    steps = cfg.total_fine_steps
    rng_noise = substream(config.seed, DOMAIN_REFERENCE, level, 0)
    rng_batch = substream(config.seed, DOMAIN_REFERENCE, level, 1)
    noises = rng_noise.standard_normal((steps, model.dim))
    batches = None
    if estimator.needs_batch:
        batches = rng_batch.integers(
            0, model.n_items, size=(steps, estimator.batch_size)
        )
    thetas = np.stack([problem.theta0, problem.theta0 + offset])
    out = np.empty(steps + 1)
    out[0] = float(np.linalg.norm(thetas[0] - thetas[1]))
    for k in range(steps):
        taus = None if batches is None else np.tile(batches[k], (2, 1))
        drift, _ = estimator.drift_lanes(thetas, taus)
        thetas = thetas + cfg.h_fine * drift + math.sqrt(2.0 * cfg.h_fine) * noises[k]
        out[k + 1] = float(np.linalg.norm(thetas[0] - thetas[1]))
    return out


def cmd_paths(config: ExperimentConfig, out_dir: Path) -> bool:
    problem = build_problem(config)
    rows = []
    for level in range(1, config.levels + 1):
        for k, dist in enumerate(coupled_distance_trace(config, problem, level)):
            rows.append(("coupled", level, k, float(dist)))
        for k, dist in enumerate(contraction_distance_trace(config, problem, level)):
            rows.append(("contraction", level, k, float(dist)))
    write_csv(out_dir / "paths.csv", ["kind", "level", "step", "distance"], rows)
    trailing = {}
    for level in range(1, config.levels + 1):
        tail = [r[3] for r in rows if r[0] == "coupled" and r[1] == level]
        tail = tail[len(tail) // 2 :]
        trailing[str(level)] = float(np.mean(tail))
    write_meta(
        out_dir / "paths_meta.json", "paths", config, {"trailing_mean_distance": trailing}
    )
    return True


def cmd_mala(config: ExperimentConfig, out_dir: Path) -> bool:
    problem = build_problem(config)
    result = run_mala_experiment(
        problem.model,
        problem.g,
        problem.theta0,
        steps=config.mala_steps,
        burnin=config.mala_burnin,
        reps=config.mala_reps,
        seed=config.seed,
        target_accept=config.target_accept,
    )
    rows = [
        (
            r,
            float(result.estimates[r]),
            float(result.step_sizes[r]),
            float(result.accept_rates[r]),
            2.0 * config.mala_steps,
        )
        for r in range(len(result.estimates))
    ]
    write_csv(
        out_dir / "mala.csv",
        ["rep", "estimate", "step_size", "accept_rate", "epochs"],
        rows,
    )
    ok = bool(
        np.all(np.abs(result.accept_rates - config.target_accept) <= 0.1)
    )
    write_meta(
        out_dir / "mala_meta.json",
        "mala",
        config,
        {
            "mean": result.mean,
            "spread": result.spread,
            "epochs_total": result.epochs,
            "tuning_item_evals": result.tuning_item_evals,
            "acceptance_ok": ok,
        },
    )
    return ok
