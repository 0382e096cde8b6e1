"""Hold-out evaluation of kernel ridge models on Coulomb features.

Splits come from a SplitMix64 generator driving a Fisher-Yates shuffle, so
they are reproducible bit for bit in any language:

* ``state`` starts at ``seed mod 2**64``;
* each draw adds ``0x9E3779B97F4A7C15`` to ``state`` (mod 2**64), then
  mixes ``z = state``: ``z = (z ^ (z >> 30)) * 0xBF58476D1CE4E5B9``,
  ``z = (z ^ (z >> 27)) * 0x94D049BB133111EB``, ``z ^ (z >> 31)``, all
  mod 2**64;
* the shuffle starts from ``[0, 1, ..., m-1]`` and for ``i = m-1 .. 1``
  swaps positions ``i`` and ``draw() % (i + 1)``.

The first ``floor(fraction * m + 0.5)`` shuffled indices form the training
side. Hyperparameter validation splits the training side again with seed
``seed + 1``; the coarse-stage subsample takes the head of a shuffle of the
training side with seed ``seed + 2``.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field

import numpy as np

from .descriptor import FeatureMatrix, featurize
from .ingest import Dataset, convert_energy
from .krr import (
    KernelConfig,
    SingularSystemError,
    fit,
    gaussian,
    predict,
    solve_ridge,
    squared_distances,
)
from .spectral import to_domain

log = logging.getLogger(__name__)

_MASK = (1 << 64) - 1

DEFAULT_GAMMA_GRID = tuple(2.0 ** k for k in range(-24, -3))
DEFAULT_LAMBDA_GRID = tuple(2.0 ** k for k in range(-20, -3, 2))

VALIDATION_SEED_OFFSET = 1
SUBSAMPLE_SEED_OFFSET = 2


class PipelineError(RuntimeError):
    """An error raised inside one named stage of the experiment."""

    def __init__(self, stage: str, message: str):
        super().__init__(message)
        self.stage = stage


class SplitMix64:
    def __init__(self, seed: int):
        self.state = seed & _MASK

    def next(self) -> int:
        self.state = (self.state + 0x9E3779B97F4A7C15) & _MASK
        z = self.state
        z = ((z ^ (z >> 30)) * 0xBF58476D1CE4E5B9) & _MASK
        z = ((z ^ (z >> 27)) * 0x94D049BB133111EB) & _MASK
        return z ^ (z >> 31)


def shuffled_indices(m: int, seed: int) -> list[int]:
    rng = SplitMix64(seed)
    idx = list(range(m))
    for i in range(m - 1, 0, -1):
        j = rng.next() % (i + 1)
        idx[i], idx[j] = idx[j], idx[i]
    return idx


@dataclass(frozen=True)
class SplitPlan:
    train_indices: tuple[int, ...]
    test_indices: tuple[int, ...]
    seed: int
    train_fraction: float

    def to_dict(self) -> dict:
        return {"seed": self.seed, "train_fraction": self.train_fraction,
                "train_indices": list(self.train_indices),
                "test_indices": list(self.test_indices)}


def n_train_for(m: int, fraction: float) -> int:
    return int(math.floor(fraction * m + 0.5))


def make_split(m: int, fraction: float, seed: int) -> SplitPlan:
    if not 0 < fraction < 1:
        raise ValueError(f"train fraction must lie in (0, 1), got {fraction}")
    if m < 2:
        raise ValueError("a split needs at least two samples")
    n_train = n_train_for(m, fraction)
    if n_train in (0, m):
        raise ValueError(
            f"train fraction {fraction} of {m} samples leaves one side empty")
    idx = shuffled_indices(m, seed)
    return SplitPlan(tuple(idx[:n_train]), tuple(idx[n_train:]), int(seed), float(fraction))


def _pair(ref, pred) -> tuple[np.ndarray, np.ndarray]:
    a = np.asarray(ref, dtype=np.float64).reshape(-1)
    b = np.asarray(pred, dtype=np.float64).reshape(-1)
    if a.shape != b.shape:
        raise ValueError(f"length mismatch: {a.size} references vs {b.size} predictions")
    if a.size == 0:
        raise ValueError("metrics need at least one sample")
    return a, b


def rmse(ref, pred) -> float:
    a, b = _pair(ref, pred)
    return float(np.sqrt(np.mean((a - b) ** 2)))


def mae(ref, pred) -> float:
    a, b = _pair(ref, pred)
    return float(np.mean(np.abs(a - b)))


def pearson(ref, pred) -> float:
    """Pearson correlation; raises ValueError if either input is constant."""
    a, b = _pair(ref, pred)
    if a.size < 2:
        raise ValueError("correlation needs at least two samples")
    da, db = a - a.mean(), b - b.mean()
    sa, sb = np.sqrt(np.sum(da * da)), np.sqrt(np.sum(db * db))
    if sa == 0 or sb == 0:
        raise ValueError("correlation is undefined for a constant vector")
    r = float(np.sum(da * db) / (sa * sb))
    return min(1.0, max(-1.0, r))


@dataclass(frozen=True)
class Metrics:
    rmse: float
    mae: float
    pearson_r: float
    unit: str
    n: int

    @classmethod
    def compute(cls, ref, pred, unit: str = "kcal_per_mol") -> "Metrics":
        a, b = _pair(ref, pred)
        return cls(rmse(a, b), mae(a, b), pearson(a, b), unit, int(a.size))

    def to_unit(self, unit: str) -> "Metrics":
        conv = lambda v: float(convert_energy(v, self.unit, unit))  # noqa: E731
        return Metrics(conv(self.rmse), conv(self.mae), self.pearson_r, unit, self.n)

    def to_dict(self) -> dict:
        return {"rmse": self.rmse, "mae": self.mae, "pearson_r": self.pearson_r,
                "unit": self.unit, "n": self.n}


@dataclass(frozen=True)
class GridSearchResult:
    table: tuple[tuple[float, float, float], ...]
    best: tuple[float, float]
    domain: str
    n_fit: int = 0
    n_validation: int = 0

    def to_dict(self) -> dict:
        return {"domain": self.domain, "best": {"gamma": self.best[0], "lambda": self.best[1]},
                "n_fit": self.n_fit, "n_validation": self.n_validation,
                "table": [{"gamma": g, "lambda": lam, "mae": (v if math.isfinite(v) else None)}
                          for g, lam, v in self.table]}


def _check_grid(values, name: str) -> tuple[float, ...]:
    vals = tuple(float(v) for v in values)
    if not vals:
        raise ValueError(f"{name} grid is empty")
    if not all(v > 0 and math.isfinite(v) for v in vals):
        raise ValueError(f"{name} grid values must be positive and finite")
    return vals


def score_grid(d_fit: np.ndarray, y_fit: np.ndarray, d_eval: np.ndarray, y_eval: np.ndarray,
               gamma_grid, lambda_grid) -> list[tuple[float, float, float]]:
    """Validation MAE for every (gamma, lambda) cell.

    ``d_fit`` holds squared distances among fitting rows, ``d_eval`` from
    evaluation rows to fitting rows. Cells whose system cannot be solved
    score ``inf``.
    """
    table = []
    for gamma in gamma_grid:
        k_fit = gaussian(d_fit, gamma)
        k_eval = gaussian(d_eval, gamma)
        for lam in lambda_grid:
            try:
                beta = solve_ridge(k_fit, y_fit, lam, check_residual=False)
                score = mae(y_eval, k_eval @ beta)
            except SingularSystemError:
                score = math.inf
            if not math.isfinite(score):
                score = math.inf
            table.append((gamma, lam, score))
    return table


def best_cell(table) -> tuple[float, float]:
    """Lowest MAE; ties go to the smaller gamma, then the smaller lambda."""
    finite = [row for row in table if math.isfinite(row[2])]
    if not finite:
        raise SingularSystemError("no grid cell produced a solvable system")
    g, lam, _ = min(finite, key=lambda row: (row[2], row[0], row[1]))
    return g, lam


def _search_training_side(x_train: np.ndarray, y_train: np.ndarray, seed: int,
                          gamma_grid, lambda_grid, subsample: int | None,
                          validation_fraction: float, sq_dist: np.ndarray | None,
                          threads: int) -> tuple[list, int, int]:
    work = np.arange(len(y_train))
    if subsample is not None and subsample < len(work):
        work = np.array(shuffled_indices(len(work), seed + SUBSAMPLE_SEED_OFFSET)[:subsample])
    inner = make_split(len(work), 1.0 - validation_fraction, seed + VALIDATION_SEED_OFFSET)
    fit_idx = work[list(inner.train_indices)]
    val_idx = work[list(inner.test_indices)]
    if sq_dist is None:
        rows = np.concatenate([fit_idx, val_idx])
        d = squared_distances(x_train[rows], threads=threads)
        n = len(fit_idx)
        d_fit, d_val = d[:n, :n], d[n:, :n]
    else:
        d_fit = sq_dist[np.ix_(fit_idx, fit_idx)]
        d_val = sq_dist[np.ix_(val_idx, fit_idx)]
    table = score_grid(d_fit, y_train[fit_idx], d_val, y_train[val_idx],
                       gamma_grid, lambda_grid)
    return table, len(fit_idx), len(val_idx)


def grid_search(features: FeatureMatrix, targets, split: SplitPlan, gamma_grid, lambda_grid,
                subsample: int | None = None, *, validation_fraction: float = 0.25,
                sq_dist: np.ndarray | None = None, threads: int = 1) -> GridSearchResult:
    """Brute-force search over (gamma, lambda) using only the training side.

    Each cell is fit on ``1 - validation_fraction`` of the training rows (or of
    a seeded subsample of them) and scored by MAE on the rest. ``sq_dist``
    may carry squared distances among the training rows, ordered as
    ``split.train_indices``.
    """
    gammas = _check_grid(gamma_grid, "gamma")
    lambdas = _check_grid(lambda_grid, "lambda")
    train = list(split.train_indices)
    # Only the training rows go further; test rows are never handed on.
    x_train = features.values[train]
    y_train = np.asarray(targets, dtype=np.float64)[train]
    table, n_fit, n_val = _search_training_side(
        x_train, y_train, split.seed, gammas, lambdas, subsample,
        validation_fraction, sq_dist, threads)
    return GridSearchResult(tuple(table), best_cell(table), features.domain, n_fit, n_val)


def octave_grid(center: float, octaves: int) -> tuple[float, ...]:
    return tuple(center * 2.0 ** k for k in range(-octaves, octaves + 1))


@dataclass(frozen=True)
class ExperimentConfig:
    seed: int = 0
    train_fraction: float = 0.8
    domains: tuple[str, ...] = ("raw", "dft_magnitude")
    gamma_grid: tuple[float, ...] = DEFAULT_GAMMA_GRID
    lambda_grid: tuple[float, ...] = DEFAULT_LAMBDA_GRID
    staged: bool = True
    coarse_subsample: int | None = 1000
    fine_octaves: int = 2
    validation_fraction: float = 0.25
    paper_mode: bool = False
    target: str | None = None
    threads: int = 1

    def to_dict(self) -> dict:
        return {"seed": self.seed, "train_fraction": self.train_fraction,
                "domains": list(self.domains), "gamma_grid": list(self.gamma_grid),
                "lambda_grid": list(self.lambda_grid), "staged": self.staged,
                "coarse_subsample": self.coarse_subsample, "fine_octaves": self.fine_octaves,
                "validation_fraction": self.validation_fraction,
                "paper_mode": self.paper_mode, "target": self.target, "threads": self.threads}


@dataclass
class DomainResult:
    domain: str
    best: tuple[float, float]
    grids: dict[str, GridSearchResult]
    metrics: dict[str, Metrics]
    reference: np.ndarray
    predicted: np.ndarray

    def to_dict(self) -> dict:
        return {"best": {"gamma": self.best[0], "lambda": self.best[1]},
                "metrics": {u: m.to_dict() for u, m in self.metrics.items()},
                "grids": {stage: g.to_dict() for stage, g in self.grids.items()}}


@dataclass
class EvalReport:
    config: ExperimentConfig
    split: SplitPlan
    target_name: str
    results: dict[str, DomainResult] = field(default_factory=dict)

    @property
    def metrics_raw(self) -> dict[str, Metrics]:
        return self.results["raw"].metrics

    @property
    def metrics_dft(self) -> dict[str, Metrics]:
        return self.results["dft_magnitude"].metrics

    def to_dict(self) -> dict:
        return {"config": self.config.to_dict(), "target": self.target_name,
                "split": self.split.to_dict(),
                "domains": {d: r.to_dict() for d, r in self.results.items()}}

    def summary(self) -> str:
        """Side-by-side metric table, one column per domain."""
        domains = list(self.results)
        lines = [f"{'':22}" + "".join(f"{d:>16}" for d in domains)]
        for unit, label in (("kcal_per_mol", "kcal/mol"), ("eV", "eV")):
            for stat in ("rmse", "mae"):
                vals = [getattr(self.results[d].metrics[unit], stat) for d in domains]
                lines.append(f"{stat.upper() + ' (' + label + ')':22}"
                             + "".join(f"{v:16.4f}" for v in vals))
        vals = [self.results[d].metrics["kcal_per_mol"].pearson_r for d in domains]
        lines.append(f"{'Pearson r':22}" + "".join(f"{v:16.6f}" for v in vals))
        for i, name in enumerate(("gamma", "lambda")):
            lines.append(f"{name:22}" + "".join(f"{self.results[d].best[i]:16.6g}"
                                                 for d in domains))
        return "\n".join(lines)


def _stage(name: str, fn, *args, **kwargs):
    try:
        return fn(*args, **kwargs)
    except PipelineError:
        raise
    except (ValueError, ArithmeticError, KeyError) as exc:
        raise PipelineError(name, str(exc)) from exc


def _run_domain(raw: FeatureMatrix, y: np.ndarray, split: SplitPlan,
                cfg: ExperimentConfig, domain: str) -> DomainResult:
    fm = _stage("transform", to_domain, raw, domain)
    train, test = list(split.train_indices), list(split.test_indices)
    d_train = _stage("distances", squared_distances, fm.values[train], threads=cfg.threads)
    grids = {}
    if cfg.paper_mode:
        d_test = _stage("distances", squared_distances, fm.values[test], fm.values[train],
                        threads=cfg.threads)
        table = score_grid(d_train, y[train], d_test, y[test], cfg.gamma_grid, cfg.lambda_grid)
        best = _stage("gridsearch", best_cell, table)
        grids["test_scored"] = GridSearchResult(tuple(table), best, domain, len(train), len(test))
    else:
        coarse = _stage("gridsearch", grid_search, fm, y, split, cfg.gamma_grid,
                        cfg.lambda_grid, cfg.coarse_subsample if cfg.staged else None,
                        validation_fraction=cfg.validation_fraction, sq_dist=d_train,
                        threads=cfg.threads)
        grids["coarse" if cfg.staged else "full"] = coarse
        best = coarse.best
        log.info("%s coarse best gamma=%g lambda=%g", domain, *best)
        if cfg.staged:
            fine = _stage("gridsearch", grid_search, fm, y, split,
                          octave_grid(best[0], cfg.fine_octaves),
                          octave_grid(best[1], cfg.fine_octaves), None,
                          validation_fraction=cfg.validation_fraction, sq_dist=d_train,
                          threads=cfg.threads)
            grids["fine"] = fine
            best = fine.best
            log.info("%s fine best gamma=%g lambda=%g", domain, *best)

    model = _stage("fit", fit, fm.rows(train), y[train], KernelConfig(best[0]), best[1],
                   sq_dist=d_train)
    pred = _stage("predict", predict, model, fm.rows(test), threads=cfg.threads)
    ref = y[test]
    kcal = _stage("metrics", Metrics.compute, ref, pred, "kcal_per_mol")
    metrics = {"kcal_per_mol": kcal, "eV": kcal.to_unit("eV")}
    log.info("%s test MAE %.3f kcal/mol", domain, kcal.mae)
    return DomainResult(domain, best, grids, metrics, ref, pred)


def run_experiment(ds: Dataset, config: ExperimentConfig = ExperimentConfig()) -> EvalReport:
    """Featurize, split, tune, refit and evaluate each configured domain."""
    if len(ds) < 10:
        raise PipelineError("ingest", f"need at least 10 molecules, got {len(ds)}")
    try:
        idx = ds.column_index(config.target)
    except KeyError as exc:
        raise PipelineError("ingest", str(exc.args[0])) from None
    y = ds.target(idx, "kcal_per_mol")
    raw = _stage("featurize", featurize, ds)
    split = _stage("split", make_split, len(ds), config.train_fraction, config.seed)
    report = EvalReport(config, split, ds.property_names[idx])
    for domain in config.domains:
        report.results[domain] = _run_domain(raw, y, split, config, domain)
    return report
