"""Gaussian kernel ridge regression.

The kernel is parameterized by its sharpness ``gamma``,

    K(x, x') = exp(-gamma * |x - x'|^2),

which is ``exp(-|x - x'|^2 / (2 sigma^2))`` for ``gamma = 1 / (2 sigma^2)``.
Weights solve ``(K + lambda I) beta = P`` by Cholesky factorization, and a
prediction is ``sum_m beta_m K(x, x_m)``.
"""

from __future__ import annotations

import json
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np
from scipy.linalg import LinAlgError, cho_factor, cho_solve
from scipy.spatial.distance import cdist

from .descriptor import DOMAINS, FeatureMatrix

FORMAT_VERSION = 1
RESIDUAL_TOLERANCE = 1e-8
_BLOCK_ROWS = 512


class SingularSystemError(ArithmeticError):
    pass


class ModelFormatError(ValueError):
    pass


@dataclass(frozen=True)
class KernelConfig:
    gamma: float
    input_sigma: float | None = None

    def __post_init__(self):
        g = float(self.gamma)
        if not (g > 0 and math.isfinite(g)):
            raise ValueError(f"gamma must be positive and finite, got {self.gamma!r}")
        object.__setattr__(self, "gamma", g)
        if self.input_sigma is not None:
            s = float(self.input_sigma)
            if not (s > 0 and math.isfinite(s)):
                raise ValueError(f"sigma must be positive and finite, got {self.input_sigma!r}")
            object.__setattr__(self, "input_sigma", s)

    @classmethod
    def from_sigma(cls, sigma: float) -> "KernelConfig":
        return cls(1.0 / (2.0 * float(sigma) ** 2), float(sigma))


def squared_distances(a: np.ndarray, b: np.ndarray | None = None,
                      threads: int = 1) -> np.ndarray:
    """Pairwise squared Euclidean distances between rows.

    Each entry is summed directly over coordinates, so identical rows give
    exactly zero and ``squared_distances(a)`` is exactly symmetric. Row
    blocks are independent, so the result does not depend on ``threads``.
    """
    a = np.asarray(a, dtype=np.float64)
    b = a if b is None else np.asarray(b, dtype=np.float64)
    if a.shape[1] != b.shape[1]:
        raise ValueError(f"row lengths differ: {a.shape[1]} vs {b.shape[1]}")
    out = np.empty((a.shape[0], b.shape[0]))
    if out.size == 0:
        return out
    starts = range(0, a.shape[0], _BLOCK_ROWS)

    def block(start):
        stop = min(start + _BLOCK_ROWS, a.shape[0])
        out[start:stop] = cdist(a[start:stop], b, "sqeuclidean")

    if threads > 1 and a.shape[0] > _BLOCK_ROWS:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            list(pool.map(block, starts))
    else:
        for s in starts:
            block(s)
    if not np.all(np.isfinite(out)):
        raise ValueError("non-finite pairwise distance")
    return out


def _check_compatible(a: FeatureMatrix, b: FeatureMatrix) -> None:
    if a.domain != b.domain:
        raise ValueError(f"feature domains differ: {a.domain!r} vs {b.domain!r}")
    if a.values.shape[1] != b.values.shape[1]:
        raise ValueError(
            f"feature widths differ: {a.values.shape[1]} vs {b.values.shape[1]}")


def gaussian(sq_dist: np.ndarray, gamma: float) -> np.ndarray:
    return np.exp(-gamma * sq_dist)


def kernel_matrix(a: FeatureMatrix, b: FeatureMatrix | None, cfg: KernelConfig,
                  threads: int = 1) -> np.ndarray:
    """Gaussian kernel between the rows of ``a`` and ``b`` (``b=None`` for a self-kernel)."""
    if b is not None:
        _check_compatible(a, b)
    return gaussian(squared_distances(a.values, None if b is None else b.values, threads),
                    cfg.gamma)


@dataclass(frozen=True, eq=False)
class KrrModel:
    training_features: FeatureMatrix
    weights: np.ndarray
    kernel: KernelConfig
    ridge_lambda: float
    target_name: str = "energy"
    energy_unit: str = "kcal_per_mol"
    descriptor_meta: dict = field(default_factory=dict)

    def __post_init__(self):
        w = np.asarray(self.weights, dtype=np.float64).reshape(-1)
        if len(w) != len(self.training_features):
            raise ValueError(
                f"{len(w)} weights for {len(self.training_features)} training rows")
        if not self.ridge_lambda >= 0:
            raise ValueError("ridge lambda must be non-negative")
        object.__setattr__(self, "weights", w)

    @property
    def domain(self) -> str:
        return self.training_features.domain


def solve_ridge(kernel: np.ndarray, targets: np.ndarray, ridge_lambda: float,
                check_residual: bool = True) -> np.ndarray:
    """Solve ``(K + lambda I) beta = P`` for symmetric positive-definite systems."""
    p = np.asarray(targets, dtype=np.float64)
    system = kernel + ridge_lambda * np.eye(kernel.shape[0])
    try:
        factor = cho_factor(system, lower=True, check_finite=False)
    except LinAlgError:
        raise SingularSystemError(
            "kernel system is not positive definite; use a ridge lambda > 0") from None
    beta = cho_solve(factor, p, check_finite=False)
    if check_residual:
        residual = np.max(np.abs(system @ beta - p))
        scale = np.max(np.abs(p))
        if not residual <= RESIDUAL_TOLERANCE * scale:
            raise SingularSystemError(
                f"kernel system is numerically singular (residual {residual:.3g} "
                f"against targets of size {scale:.3g}); increase the ridge lambda")
    return beta


def fit(features: FeatureMatrix, targets, cfg: KernelConfig, ridge_lambda: float,
        *, target_name: str = "energy", energy_unit: str = "kcal_per_mol",
        sq_dist: np.ndarray | None = None, threads: int = 1) -> KrrModel:
    """Train a kernel ridge model.

    ``sq_dist`` may carry precomputed training-set squared distances so a
    grid search does not recompute them per cell.
    """
    y = np.asarray(targets, dtype=np.float64).reshape(-1)
    if len(features) < 1:
        raise ValueError("at least one training sample is required")
    if len(y) != len(features):
        raise ValueError(f"{len(y)} targets for {len(features)} feature rows")
    if not ridge_lambda >= 0:
        raise ValueError("ridge lambda must be non-negative")
    d2 = squared_distances(features.values, threads=threads) if sq_dist is None else sq_dist
    if ridge_lambda == 0 and len(y) > 1:
        off_diag = d2 + np.diag(np.full(len(y), np.inf))
        if np.min(off_diag) == 0:
            raise SingularSystemError(
                "duplicate training rows make the lambda = 0 system singular; use lambda > 0")
    beta = solve_ridge(gaussian(d2, cfg.gamma), y, ridge_lambda)
    meta = {"n_max": features.n_max, "sort_order": "descending_column_norm",
            "transform": features.domain}
    return KrrModel(features, beta, cfg, float(ridge_lambda), target_name, energy_unit, meta)


def predict(model: KrrModel, features: FeatureMatrix, *, threads: int = 1,
            return_max_kernel: bool = False):
    """Predicted targets for each feature row, in ``model.energy_unit``.

    With ``return_max_kernel`` the largest kernel value against any training
    row is returned per query as well; values near zero flag queries far from
    all training data.
    """
    _check_compatible(model.training_features, features)
    k = kernel_matrix(features, model.training_features, model.kernel, threads)
    pred = k @ model.weights
    if return_max_kernel:
        return pred, (k.max(axis=1) if k.size else np.zeros(len(features)))
    return pred


def model_to_dict(model: KrrModel) -> dict:
    tf = model.training_features
    return {
        "format_version": FORMAT_VERSION,
        "kernel": {"gamma": model.kernel.gamma, "input_sigma": model.kernel.input_sigma},
        "ridge_lambda": model.ridge_lambda,
        "domain_tag": tf.domain,
        "descriptor_meta": model.descriptor_meta,
        "target_name": model.target_name,
        "energy_unit": model.energy_unit,
        "n_max": tf.n_max,
        "training_features": tf.values.tolist(),
        "weights": model.weights.tolist(),
    }


def save_model(model: KrrModel, sink) -> None:
    """Write the model as JSON to a path or text stream.

    Floats are written with their shortest round-trip repr, so a loaded
    model predicts bit-identically.
    """
    doc = model_to_dict(model)
    if hasattr(sink, "write"):
        json.dump(doc, sink)
    else:
        with open(sink, "w", encoding="utf-8") as fh:
            json.dump(doc, fh)


def model_from_dict(doc: dict) -> KrrModel:
    version = doc.get("format_version")
    if version != FORMAT_VERSION:
        raise ModelFormatError(
            f"unsupported model format_version {version!r} (this build reads {FORMAT_VERSION})")
    try:
        domain = doc["domain_tag"]
        if domain not in DOMAINS:
            raise ModelFormatError(f"unknown domain_tag {domain!r}")
        rows = doc["training_features"]
        weights = np.asarray(doc["weights"], dtype=np.float64)
        values = np.asarray(rows, dtype=np.float64)
        if values.ndim != 2 or weights.ndim != 1:
            raise ModelFormatError("training_features must be a matrix and weights a vector")
        if len(weights) != values.shape[0]:
            raise ModelFormatError(
                f"{len(weights)} weights for {values.shape[0]} training rows")
        kernel = KernelConfig(doc["kernel"]["gamma"], doc["kernel"].get("input_sigma"))
        features = FeatureMatrix(values, domain, doc.get("n_max"))
        return KrrModel(features, weights, kernel, float(doc["ridge_lambda"]),
                        doc["target_name"], doc["energy_unit"], dict(doc["descriptor_meta"]))
    except (KeyError, TypeError) as exc:
        raise ModelFormatError(f"malformed model file: {exc!r}") from None
    except ValueError as exc:
        if isinstance(exc, ModelFormatError):
            raise
        raise ModelFormatError(f"malformed model file: {exc}") from None


def load_model(source) -> KrrModel:
    try:
        if hasattr(source, "read"):
            doc = json.load(source)
        else:
            with open(source, encoding="utf-8") as fh:
                doc = json.load(fh)
    except json.JSONDecodeError as exc:
        raise ModelFormatError(f"model file is not valid JSON (truncated?): {exc}") from None
    if not isinstance(doc, dict):
        raise ModelFormatError("model file must hold a JSON object")
    return model_from_dict(doc)
