"""Sigmoid outcome model and per-path likelihood functions on the rate grid."""

from __future__ import annotations

import csv
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from scipy.optimize import minimize_scalar

from .chirp import ChirpObservation
from .grid import RateGrid

DEFAULT_ALPHA = -0.27
DEFAULT_EPSILON = 5.0


def log_sigmoid(x):
    return -np.logaddexp(0.0, -np.asarray(x, dtype=float))


def sigmoid(x):
    x = np.asarray(x, dtype=float)
    return np.exp(log_sigmoid(x))


@dataclass(frozen=True)
class LikelihoodModel:
    alpha: float = DEFAULT_ALPHA
    epsilon: float = DEFAULT_EPSILON

    def __post_init__(self):
        if not self.alpha < 0:
            raise ValueError(f"alpha must be negative, got {self.alpha}")

    def success_probability(self, rate, pab):
        """Pr(z = 1 | probing rate, PAB) = sigmoid(alpha (rate - pab))."""
        return sigmoid(self.alpha * (np.asarray(rate) - np.asarray(pab)))

    def log_point(self, rate, pab, z):
        x = self.alpha * (np.asarray(rate, dtype=float) - np.asarray(pab, dtype=float))
        z = np.asarray(z)
        return np.where(z == 1, log_sigmoid(x), log_sigmoid(-x))


def point_likelihood(model: LikelihoodModel, rate: float, pab: float, z: int) -> float:
    return float(np.exp(model.log_point(rate, pab, z)))


@dataclass
class PathLikelihood:
    """Likelihood over the rate grid for one path, kept in the log domain.

    Only ratios are meaningful: ``values`` is scaled so its maximum is 1.
    """

    path: int
    grid: RateGrid
    log_values: np.ndarray

    @classmethod
    def ones(cls, path: int, grid: RateGrid) -> "PathLikelihood":
        return cls(path, grid, np.zeros(grid.size))

    @property
    def values(self) -> np.ndarray:
        return np.exp(self.log_values - self.log_values.max())

    @property
    def is_flat(self) -> bool:
        return bool(np.all(self.log_values == self.log_values[0]))

    def copy(self) -> "PathLikelihood":
        return PathLikelihood(self.path, self.grid, self.log_values.copy())


def chirp_log_likelihood(model: LikelihoodModel, rates, outcomes, grid: RateGrid) -> np.ndarray:
    """Sum over windows of log Pr(z(k) | y) for every grid rate y (unnormalized)."""
    rates = np.asarray(rates, dtype=float)
    outcomes = np.asarray(outcomes)
    if rates.size == 0:
        return np.zeros(grid.size)
    x = model.alpha * (rates[:, None] - grid.rates[None, :])
    sign = np.where(outcomes == 1, 1.0, -1.0)[:, None]
    return log_sigmoid(sign * x).sum(axis=0)


def chirp_likelihood(model: LikelihoodModel, obs: ChirpObservation, grid: RateGrid) -> PathLikelihood:
    if len(obs) == 0:
        raise ValueError("empty chirp observation")
    log_l = chirp_log_likelihood(model, obs.rates, obs.outcomes, grid)
    return PathLikelihood(obs.path, grid, log_l - log_l.max())


def accumulate(existing: PathLikelihood, new: PathLikelihood) -> PathLikelihood:
    """Pointwise product of two likelihoods for the same path (renormalized)."""
    if existing.grid != new.grid:
        raise ValueError("likelihood grids differ")
    if existing.path != new.path:
        raise ValueError(f"likelihoods belong to paths {existing.path} and {new.path}")
    log_l = existing.log_values + new.log_values
    return PathLikelihood(existing.path, existing.grid, log_l - log_l.max())


class DegenerateDataError(ValueError):
    pass


def fit_alpha(samples, bin_width: float = 1.0) -> tuple[float, float]:
    """Least-squares fit of the sigmoid slope to binned success frequencies.

    ``samples`` is an iterable of ``(rate - pab, z)`` pairs.  Returns
    ``(alpha, mse)`` where the MSE is taken over the occupied bins.
    """
    data = np.asarray(list(samples), dtype=float)
    if data.ndim != 2 or data.shape[0] < 2 or data.shape[1] != 2:
        raise DegenerateDataError("need at least two (delta, z) samples")
    delta, z = data[:, 0], data[:, 1]
    if np.all(z == z[0]):
        raise DegenerateDataError("all samples share one outcome; slope is unidentifiable")

    bins = np.round(delta / bin_width).astype(np.int64)
    keys, inverse, counts = np.unique(bins, return_inverse=True, return_counts=True)
    freq = np.bincount(inverse, weights=z) / counts
    centers = keys * bin_width

    def mse(alpha):
        return float(np.mean((sigmoid(alpha * centers) - freq) ** 2))

    res = minimize_scalar(mse, bounds=(-20.0, -1e-6), method="bounded",
                          options={"xatol": 1e-8})
    return float(res.x), float(res.fun)


def read_samples(path: str | Path) -> list[tuple[float, int]]:
    """Rows of ``delta_mbps, z`` (header line optional)."""
    rows = []
    with open(path, newline="") as fh:
        for row in csv.reader(fh):
            if not row or row[0].strip().startswith("#"):
                continue
            try:
                rows.append((float(row[0]), int(float(row[1]))))
            except ValueError:
                if rows:
                    raise
                continue  # header
    return rows


def write_samples(path: str | Path, samples) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["delta_mbps", "z"])
        for delta, z in samples:
            writer.writerow([f"{delta:.6g}", int(z)])
