"""Integer rate grid and helpers for discrete probability mass functions.

A ``Pmf`` throughout the package is a 1-D float array aligned with a
:class:`RateGrid` (index ``i`` holds the mass of rate ``grid.b_min + i``).
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

PMF_TOL = 1e-9


@dataclass(frozen=True)
class RateGrid:
    b_min: int = 1
    b_max: int = 100

    def __post_init__(self):
        if int(self.b_min) != self.b_min or int(self.b_max) != self.b_max:
            raise ValueError("grid bounds must be integers")
        if self.b_min < 1:
            raise ValueError(f"b_min must be >= 1, got {self.b_min}")
        if self.b_max <= self.b_min:
            raise ValueError(f"b_max must exceed b_min, got [{self.b_min}, {self.b_max}]")

    @property
    def size(self) -> int:
        return self.b_max - self.b_min + 1

    @property
    def rates(self) -> np.ndarray:
        return np.arange(self.b_min, self.b_max + 1, dtype=float)

    def index(self, rate: float) -> int:
        """Grid index of an integer rate (clipped into range)."""
        return int(np.clip(round(rate) - self.b_min, 0, self.size - 1))

    def rate(self, index: int) -> int:
        return self.b_min + int(index)


def normalize(values: np.ndarray) -> np.ndarray:
    """Scale non-negative values to sum 1; an all-zero vector becomes uniform."""
    values = np.asarray(values, dtype=float)
    total = values.sum(axis=-1, keepdims=True)
    ok = total > 0
    if ok.all():
        return values / total
    out = values / np.where(ok, total, 1.0)
    out[np.broadcast_to(~ok, out.shape)] = 1.0 / values.shape[-1]
    return out


def normalize_log(log_values: np.ndarray) -> np.ndarray:
    """Exponentiate log-weights along the last axis and normalize to sum 1."""
    log_values = np.asarray(log_values, dtype=float)
    peak = np.max(log_values, axis=-1, keepdims=True)
    peak = np.where(np.isfinite(peak), peak, 0.0)
    return normalize(np.exp(log_values - peak))


def uniform_pmf(grid: RateGrid) -> np.ndarray:
    return np.full(grid.size, 1.0 / grid.size)


def point_mass(grid: RateGrid, rate: int) -> np.ndarray:
    pmf = np.zeros(grid.size)
    pmf[grid.index(rate)] = 1.0
    return pmf


def survival(pmf: np.ndarray) -> np.ndarray:
    """S(r) = Pr(X >= r) along the last axis."""
    return np.cumsum(pmf[..., ::-1], axis=-1)[..., ::-1]


def from_survival(surv: np.ndarray) -> np.ndarray:
    """Inverse of :func:`survival`: Pr(X = r) = S(r) - S(r + 1)."""
    nxt = np.zeros_like(surv)
    nxt[..., :-1] = surv[..., 1:]
    return np.clip(surv - nxt, 0.0, None)


def is_pmf(values: np.ndarray, tol: float = PMF_TOL) -> bool:
    values = np.asarray(values)
    return bool(np.all(values >= 0) and abs(values.sum() - 1.0) <= tol)
