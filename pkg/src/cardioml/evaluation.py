"""Performance metrics and k-fold cross-validation with grid search."""

from __future__ import annotations

import csv
import json
from dataclasses import dataclass

import numpy as np


@dataclass
class MetricReport:
    mse: float
    rmse: float
    mae: float
    rel_l2_time: float
    r_squared: float
    normalized_rmse: float | None
    cross_entropy: float | None = None

    def as_dict(self) -> dict:
        return {k: getattr(self, k) for k in (
            "mse", "rmse", "mae", "rel_l2_time", "r_squared",
            "normalized_rmse", "cross_entropy")}


def metrics(pred: np.ndarray, truth: np.ndarray,
            class_probs: bool = False) -> MetricReport:
    """Regression metrics between prediction and target arrays.

    mse averages squared residuals over every entry (samples and
    components alike); rmse is its square root; normalized_rmse divides by
    the target range. With class_probs=True, rows of `pred` are treated as
    class probabilities against one-hot `truth` rows and the
    cross-entropy is reported as well.
    """
    pred = np.asarray(pred, dtype=float)
    truth = np.asarray(truth, dtype=float)
    if pred.shape != truth.shape:
        raise ValueError("pred/truth shape mismatch")
    diff = pred - truth
    mse = float(np.mean(diff**2))
    rmse = float(np.sqrt(mse))
    mae = float(np.mean(np.abs(diff)))
    denom = float(np.linalg.norm(truth))
    rel_l2 = float(np.linalg.norm(diff) / denom) if denom > 0 else np.inf
    ss_res = float(np.sum(diff**2))
    ss_tot = float(np.sum((truth - truth.mean())**2))
    r2 = 1.0 - ss_res / ss_tot if ss_tot > 0 else (1.0 if ss_res == 0 else -np.inf)
    t_range = float(truth.max() - truth.min())
    nrmse = rmse / t_range if t_range > 0 else None

    ce = None
    if class_probs:
        p2 = np.atleast_2d(pred)
        t2 = np.atleast_2d(truth)
        if np.any(np.abs(p2.sum(axis=1) - 1.0) > 1e-8):
            raise ValueError("probability rows must sum to 1")
        ce = float(-np.mean(np.sum(t2 * np.log(np.clip(p2, 1e-300, None)), axis=1)))
    return MetricReport(mse, rmse, mae, rel_l2, r2, nrmse, ce)


def normalized_rmse(pred: np.ndarray, truth: np.ndarray) -> float:
    """RMSE divided by (max - min) of the target values."""
    rep = metrics(pred, truth)
    if rep.normalized_rmse is None:
        raise ValueError("target range is zero")
    return rep.normalized_rmse


@dataclass
class FoldPlan:
    k: int
    folds: list[np.ndarray]   # disjoint index lists covering the dataset

    def __post_init__(self):
        if self.k < 2:
            raise ValueError("k must be >= 2")
        all_idx = np.concatenate(self.folds)
        if len(np.unique(all_idx)) != all_idx.size:
            raise ValueError("folds overlap")


def make_folds(n: int, k: int, seed: int = 0) -> FoldPlan:
    """Disjoint folds covering range(n); sizes differ by at most 1."""
    if not 2 <= k <= n:
        raise ValueError("need 2 <= k <= n")
    order = np.random.default_rng(np.random.SeedSequence(seed)).permutation(n)
    return FoldPlan(k, [np.sort(chunk) for chunk in np.array_split(order, k)])


def kfold(n: int, k: int, thetas: list, trainer, seed: int = 0
          ) -> tuple[object, np.ndarray]:
    """Grid-searched k-fold cross-validation.

    `trainer(theta, train_idx, valid_idx)` must return the validation
    error for one (hyperparameter, fold) cell. Returns the argmin theta
    (first occurrence wins on ties) and the full (len(thetas), k) error
    table.
    """
    if not thetas:
        raise ValueError("hyperparameter grid is empty")
    plan = make_folds(n, k, seed)
    table = np.empty((len(thetas), k))
    for i, theta in enumerate(thetas):
        for j, valid_idx in enumerate(plan.folds):
            train_idx = np.setdiff1d(np.arange(n), valid_idx)
            try:
                table[i, j] = trainer(theta, train_idx, valid_idx)
            except Exception as exc:
                raise RuntimeError(
                    f"trainer failed for theta index {i} fold {j}") from exc
    means = table.mean(axis=1)
    best = int(np.argmin(means))  # np.argmin returns the first minimum
    return thetas[best], table


def write_error_table(path, thetas: list, table: np.ndarray) -> None:
    """CSV (theta_id, fold, error)."""
    with open(path, "w", newline="") as f:
        writer = csv.writer(f)
        writer.writerow(["theta_id", "fold", "error"])
        for i in range(table.shape[0]):
            for j in range(table.shape[1]):
                writer.writerow([i, j, format(table[i, j], ".17g")])


def write_selection(path, thetas: list, best_theta, table: np.ndarray) -> None:
    with open(path, "w") as f:
        json.dump({
            "thetas": [str(t) for t in thetas],
            "selected": str(best_theta),
            "mean_errors": [float(v) for v in table.mean(axis=1)],
        }, f, indent=2)
