"""Confidence intervals, estimate selection, active sampling and the trackers.

Three estimator kinds share the factor-graph machinery:

* ``bp-pf``  - Gaussian-mixture particle filter feeding per-slice BP;
* ``bb``     - static block-based estimate from every measurement so far;
* ``bb-r``   - block-based estimate re-run on the last slice only.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from .belief import BeliefState, FilterConfig, ObservationWindow, init_beliefs, link_rngs
from .chirp import ChirpObservation, ChirpSpec, solve_chirp
from .factor_graph import BPConfig, BPResult, FactorGraph
from .grid import RateGrid, normalize, uniform_pmf
from .likelihood import LikelihoodModel, chirp_likelihood
from .topology import Topology

ESTIMATOR_KINDS = ("bp-pf", "bb", "bb-r")
SELECTION_MODES = ("lower-bound", "percentile-25", "median")
_MODE_Q = {"percentile-25": 0.25, "median": 0.5}
_MASS_TOL = 1e-12


@dataclass(frozen=True)
class ConfidenceInterval:
    path: int
    lo: int
    hi: int
    mass: float
    method: str = "smallest-mass"

    @property
    def width(self) -> int:
        """Number of grid points covered (hi - lo + 1)."""
        return self.hi - self.lo + 1


def _interval_indices(pmf: np.ndarray, eta: float) -> tuple[int, int, float]:
    cdf = np.concatenate([[0.0], np.cumsum(pmf)])
    size = pmf.size
    # for every start, the first end reaching mass eta
    ends = np.searchsorted(cdf, cdf[:-1] + eta - _MASS_TOL, side="left")
    valid = ends <= size
    widths = np.where(valid, ends - np.arange(size), size + 1)
    lo = int(np.argmin(widths))  # argmin keeps the lowest start on ties
    hi = int(max(ends[lo], lo + 1)) - 1
    return lo, hi, float(cdf[hi + 1] - cdf[lo])


def confidence_interval(marginal: np.ndarray, eta: float, grid: RateGrid, path: int = 0) -> ConfidenceInterval:
    """Shortest contiguous grid interval carrying at least ``eta`` of the mass."""
    if not 0 < eta <= 1:
        raise ValueError("eta must lie in (0, 1]")
    lo, hi, mass = _interval_indices(np.asarray(marginal, dtype=float), eta)
    return ConfidenceInterval(path, grid.rate(lo), grid.rate(hi), mass)


def fixed_width_interval(marginal: np.ndarray, beta: int, grid: RateGrid, path: int = 0) -> ConfidenceInterval:
    """Width-``beta`` interval holding the most mass (lowest start on ties)."""
    pmf = np.asarray(marginal, dtype=float)
    beta = int(min(max(beta, 1), pmf.size))
    sums = np.convolve(pmf, np.ones(beta), mode="valid")
    lo = int(np.argmax(sums))
    return ConfidenceInterval(path, grid.rate(lo), grid.rate(lo + beta - 1), float(sums[lo]), "fixed-width")


def _interval_indices_batch(pmfs: np.ndarray, eta: float) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Row-wise :func:`_interval_indices` without a Python loop."""
    n, size = pmfs.shape
    cdf = np.concatenate([np.zeros((n, 1)), np.cumsum(pmfs, axis=1)], axis=1)
    target = cdf[:, :-1] + eta - _MASS_TOL
    reach = cdf[:, None, :] >= target[:, :, None]  # (n, start, end)
    ends = np.where(reach.any(axis=2), reach.argmax(axis=2), size + 1)
    widths = np.where(ends <= size, ends - np.arange(size), size + 1)
    lo = widths.argmin(axis=1)
    rows = np.arange(n)
    hi = np.maximum(ends[rows, lo], lo + 1) - 1
    return lo, hi, cdf[rows, hi + 1] - cdf[rows, lo]


def confidence_intervals(marginals: np.ndarray, eta: float, grid: RateGrid) -> list[ConfidenceInterval]:
    if not 0 < eta <= 1:
        raise ValueError("eta must lie in (0, 1]")
    lo, hi, mass = _interval_indices_batch(np.atleast_2d(np.asarray(marginals, dtype=float)), eta)
    return [
        ConfidenceInterval(p, grid.rate(a), grid.rate(b), float(m))
        for p, (a, b, m) in enumerate(zip(lo.tolist(), hi.tolist(), mass.tolist()))
    ]


def select_estimate(marginal: np.ndarray, ci: ConfidenceInterval, mode: str, grid: RateGrid) -> int:
    """Point estimate inside the interval: its lower bound or a within-interval percentile."""
    if mode == "lower-bound":
        return ci.lo
    if mode not in _MODE_Q:
        raise ValueError(f"unknown selection mode {mode!r}")
    a, b = grid.index(ci.lo), grid.index(ci.hi)
    inside = np.asarray(marginal, dtype=float)[a : b + 1]
    cdf = np.cumsum(normalize(inside))
    k = int(np.searchsorted(cdf, _MODE_Q[mode] - _MASS_TOL, side="left"))
    return ci.lo + min(k, b - a)


def pick_path(cis: list[ConfidenceInterval], rng: np.random.Generator) -> int:
    """Draw a path with probability proportional to its interval width."""
    if not cis:
        raise ValueError("no paths to choose from")
    widths = np.array([ci.width for ci in cis], dtype=float)
    probs = np.full(widths.size, 1.0 / widths.size) if widths.sum() <= 0 else widths / widths.sum()
    return int(cis[int(rng.choice(len(cis), p=probs))].path)


def pick_rates(ci: ConfidenceInterval) -> tuple[int, int]:
    return ci.lo, ci.hi


@dataclass(frozen=True)
class TrackerConfig:
    grid: RateGrid = field(default_factory=RateGrid)
    model: LikelihoodModel = field(default_factory=LikelihoodModel)
    filter: FilterConfig = field(default_factory=FilterConfig)
    bp: BPConfig = field(default_factory=BPConfig)
    lam: int = 10
    eta: float = 0.95
    chirp_k: int = 75
    chirp_kmin: int = 15
    packet_bits: float = 8000.0
    estimators: tuple[str, ...] = ESTIMATOR_KINDS
    modes: tuple[str, ...] = SELECTION_MODES
    # "posterior": last in-slice BP marginals; "predictive": next-slice priors
    estimate_from: str = "predictive"

    def __post_init__(self):
        if self.lam < 1:
            raise ValueError("lam must be >= 1")
        if self.estimate_from not in ("posterior", "predictive"):
            raise ValueError(f"unknown estimate source {self.estimate_from!r}")
        bad = [k for k in self.estimators if k not in ESTIMATOR_KINDS]
        if bad:
            raise ValueError(f"unknown estimators {bad}")
        bad = [m for m in self.modes if m not in SELECTION_MODES]
        if bad:
            raise ValueError(f"unknown selection modes {bad}")


@dataclass
class Estimate:
    """Per-path intervals and point estimates published by one estimator."""

    marginals: np.ndarray
    cis: list[ConfidenceInterval]
    values: dict[str, np.ndarray]
    converged: bool = True

    @property
    def widths(self) -> np.ndarray:
        return np.array([ci.width for ci in self.cis])


def make_estimate(marginals: np.ndarray, cfg: TrackerConfig, converged: bool = True) -> Estimate:
    cis = confidence_intervals(marginals, cfg.eta, cfg.grid)
    values = {
        mode: np.array([select_estimate(m, ci, mode, cfg.grid) for m, ci in zip(marginals, cis)])
        for mode in cfg.modes
    }
    return Estimate(marginals, cis, values, converged)


def uniform_priors(topology: Topology, grid: RateGrid) -> np.ndarray:
    return np.tile(uniform_pmf(grid), (topology.n_links, 1))


class BlockEstimator:
    """BB (``window=None``: keep every measurement) or BB-R (last slice only)."""

    def __init__(self, topology: Topology, cfg: TrackerConfig, recent_only: bool):
        self.topology = topology
        self.cfg = cfg
        self.recent_only = recent_only
        self.graph = FactorGraph(topology, uniform_priors(topology, cfg.grid), cfg.grid, cfg.bp)
        self.last_result: BPResult | None = None

    def add(self, path: int, log_lik: np.ndarray) -> None:
        self.graph.update_likelihood(path, log_lik)

    def estimate(self) -> Estimate:
        res = self.last_result = self.graph.run()
        est = make_estimate(res.path_marginals, self.cfg, res.converged)
        if self.recent_only:
            self.graph.set_priors(self.graph.priors, reset_likelihoods=True)
        return est

    def initial_estimate(self) -> Estimate:
        return make_estimate(self.graph.path_marginals(), self.cfg)


@dataclass
class StepRecord:
    t: int
    path: int
    rate_range: tuple[int, int]
    n_windows: int
    converged: bool
    bp_iterations: int
    slice_end: bool


class Tracker:
    """Active-sampling BP-PF tracking loop with optional BB/BB-R shadows.

    All estimators consume the same measurement stream, which is driven
    by the BP-PF intervals.  Estimates are republished at every slice
    boundary and held for the following ``lam`` measurements.
    """

    def __init__(self, topology: Topology, cfg: TrackerConfig, seed=0):
        self.topology = topology
        self.cfg = cfg
        seq = seed if isinstance(seed, np.random.SeedSequence) else np.random.SeedSequence(seed)
        pick_seq, filter_seq = seq.spawn(2)
        self.rng = np.random.default_rng(pick_seq)
        self.beliefs: BeliefState = init_beliefs(cfg.filter, topology, link_rngs(filter_seq, topology.n_links))
        self.graph = FactorGraph(topology, self.beliefs.priors(), cfg.grid, cfg.bp)
        self.window = ObservationWindow(topology.n_paths)
        self.blocks: dict[str, BlockEstimator] = {}
        if "bb" in cfg.estimators:
            self.blocks["bb"] = BlockEstimator(topology, cfg, recent_only=False)
        if "bb-r" in cfg.estimators:
            self.blocks["bb-r"] = BlockEstimator(topology, cfg, recent_only=True)
        self.t = 0
        self.n_slices = 0
        self.marginals = self.graph.path_marginals()
        self.cis = confidence_intervals(self.marginals, cfg.eta, cfg.grid)
        self.estimates: dict[str, Estimate] = {}
        if "bp-pf" in cfg.estimators:
            self.estimates["bp-pf"] = make_estimate(self.marginals, cfg)
        for kind, block in self.blocks.items():
            self.estimates[kind] = block.initial_estimate()

    def next_probe(self) -> tuple[int, ChirpSpec]:
        path = pick_path(self.cis, self.rng)
        lo, hi = pick_rates(self.cis[path])
        spec = solve_chirp(lo, hi, self.cfg.chirp_k, self.cfg.chirp_kmin, self.cfg.packet_bits)
        return path, spec

    def observe(self, obs: ChirpObservation) -> BPResult:
        """Fold one chirp into every estimator and refresh BP-PF intervals."""
        lik = chirp_likelihood(self.cfg.model, obs, self.cfg.grid)
        self.graph.update_likelihood(obs.path, lik)
        self.window.add(obs.path, obs.rates, obs.outcomes)
        for block in self.blocks.values():
            block.add(obs.path, lik.log_values)
        res = self.graph.run()
        self.marginals = res.path_marginals
        self.cis = confidence_intervals(self.marginals, self.cfg.eta, self.cfg.grid)
        return res

    def end_slice(self) -> None:
        """Transition, likelihood weighting, resampling and new slice priors."""
        posterior = self.marginals
        b = self.beliefs
        b.transition()
        observed = b.update_weights(self.topology, self.window.log_likelihoods(self.cfg.model, self.cfg.grid))
        b.resample_if_needed(observed)
        self.graph.set_priors(b.priors(), reset_likelihoods=True)
        self.window = ObservationWindow(self.topology.n_paths)
        self.n_slices += 1
        self.marginals = self.graph.path_marginals()
        self.cis = confidence_intervals(self.marginals, self.cfg.eta, self.cfg.grid)
        if "bp-pf" in self.cfg.estimators:
            source = posterior if self.cfg.estimate_from == "posterior" else self.marginals
            self.estimates["bp-pf"] = make_estimate(source, self.cfg)
        for kind, block in self.blocks.items():
            self.estimates[kind] = block.estimate()

    def step(self, measure: Callable[[int, ChirpSpec], ChirpObservation]) -> StepRecord:
        path, spec = self.next_probe()
        rate_range = pick_rates(self.cis[path])
        self.t += 1
        obs = measure(path, spec)
        obs.t = self.t
        res = self.observe(obs)
        slice_end = self.t % self.cfg.lam == 0
        if slice_end:
            self.end_slice()
        return StepRecord(self.t, path, rate_range, len(obs), res.converged, res.iterations, slice_end)


def track_loop(tracker: Tracker, measure, steps: int, on_step=None) -> list[StepRecord]:
    records = []
    for _ in range(steps):
        rec = tracker.step(measure)
        if on_step is not None:
            on_step(tracker, rec)
        records.append(rec)
    return records


def bb_estimate(observations: list[ChirpObservation], topology: Topology, cfg: TrackerConfig) -> np.ndarray:
    """Static block-based path marginals from a full measurement history."""
    graph = FactorGraph(topology, uniform_priors(topology, cfg.grid), cfg.grid, cfg.bp)
    for obs in observations:
        if len(obs):
            graph.update_likelihood(obs.path, chirp_likelihood(cfg.model, obs, cfg.grid))
    return graph.run().path_marginals


def bbr_estimate(observations: list[ChirpObservation], topology: Topology, cfg: TrackerConfig) -> np.ndarray:
    """Block-based marginals from the trailing ``lam`` measurements only."""
    return bb_estimate(observations[-cfg.lam :] if observations else [], topology, cfg)
