"""Per-link Gaussian-mixture belief state and its sequential importance updates.

Each link carries ``N_v`` equal-variance Gaussian components.  Between
slices the means diffuse, component weights are multiplied by the
evidence of every observed path through the link, and a link whose
effective component count collapses is resampled.
"""

from __future__ import annotations

import json
import logging
from dataclasses import dataclass, field

import numpy as np

from .grid import RateGrid, from_survival, normalize, survival
from .likelihood import LikelihoodModel, chirp_log_likelihood
from .topology import Topology

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class FilterConfig:
    n_particles: int = 100
    sigma_h: float = 4.0
    neff_threshold: float = 10.0
    sigma_mu: float = 1.0
    grid: RateGrid = field(default_factory=RateGrid)
    seed: int = 0

    def __post_init__(self):
        if self.n_particles < 1:
            raise ValueError("need at least one particle")
        if self.neff_threshold > self.n_particles:
            raise ValueError("neff_threshold cannot exceed n_particles")
        if self.sigma_h < 0 or self.sigma_mu <= 0:
            raise ValueError("sigma_h must be >= 0 and sigma_mu > 0")


@dataclass
class LinkBelief:
    means: np.ndarray
    weights: np.ndarray
    sigma_mu: float = 1.0

    def __post_init__(self):
        self.means = np.asarray(self.means, dtype=float)
        self.weights = np.asarray(self.weights, dtype=float)
        if self.means.shape != self.weights.shape or self.means.ndim != 1 or self.means.size < 1:
            raise ValueError("means and weights must be equal-length non-empty vectors")
        if np.any(self.weights < 0) or abs(self.weights.sum() - 1.0) > 1e-9:
            raise ValueError("weights must be non-negative and sum to 1")


def component_pmfs(means, sigma_mu: float, grid: RateGrid) -> np.ndarray:
    """Each Gaussian component discretized on the grid and normalized.

    Works in the log domain so components far outside the grid collapse
    onto the nearest edge instead of underflowing.
    """
    means = np.asarray(means, dtype=float)
    z = (grid.rates - means[..., None]) / sigma_mu
    log_d = -0.5 * z * z
    log_d -= log_d.max(axis=-1, keepdims=True)
    return normalize(np.exp(log_d))


def discretize(belief: LinkBelief, grid: RateGrid) -> np.ndarray:
    """Mixture pmf on the grid: sum_v w_v * component_v."""
    return normalize(belief.weights @ component_pmfs(belief.means, belief.sigma_mu, grid))


def effective_count(weights) -> float:
    w = np.asarray(weights, dtype=float)
    return float(1.0 / np.dot(w, w))


def resample(belief: LinkBelief, rng: np.random.Generator) -> LinkBelief:
    """Multinomial resampling of means; weights reset to uniform."""
    n = belief.means.size
    idx = rng.choice(n, size=n, replace=True, p=belief.weights / belief.weights.sum())
    return LinkBelief(belief.means[idx], np.full(n, 1.0 / n), belief.sigma_mu)


def reflect(means: np.ndarray, lo: float, hi: float) -> np.ndarray:
    out = np.where(means < lo, 2 * lo - means, means)
    out = np.where(out > hi, 2 * hi - out, out)
    return np.clip(out, lo, hi)


class ObservationWindow:
    """(rate, outcome) pairs collected per path during one slice."""

    def __init__(self, n_paths: int):
        self.rates: list[list[np.ndarray]] = [[] for _ in range(n_paths)]
        self.outcomes: list[list[np.ndarray]] = [[] for _ in range(n_paths)]
        self.n_chirps = 0

    def add(self, path: int, rates, outcomes) -> None:
        self.rates[path].append(np.asarray(rates, dtype=float))
        self.outcomes[path].append(np.asarray(outcomes))
        self.n_chirps += 1

    def observed_paths(self) -> list[int]:
        return [p for p, chunks in enumerate(self.rates) if chunks]

    def pairs(self, path: int) -> tuple[np.ndarray, np.ndarray]:
        if not self.rates[path]:
            return np.empty(0), np.empty(0, dtype=np.int8)
        return np.concatenate(self.rates[path]), np.concatenate(self.outcomes[path])

    def log_likelihoods(self, model: LikelihoodModel, grid: RateGrid) -> dict[int, np.ndarray]:
        out = {}
        for p in self.observed_paths():
            ll = chirp_log_likelihood(model, *self.pairs(p), grid)
            out[p] = ll - ll.max()
        return out


def partial_weights(comp_surv: np.ndarray, other_mixture_pmfs: np.ndarray, lik: np.ndarray) -> np.ndarray:
    """Pr(window evidence of a path | link follows component v), for every v.

    ``comp_surv`` is the ``(N_v, B)`` survival matrix of the link's
    components, ``other_mixture_pmfs`` the ``(n, B)`` mixtures of the other
    links on the path (``n`` may be 0) and ``lik`` the path likelihood on
    the grid (any positive scale).
    """
    rest = np.prod(survival(np.atleast_2d(other_mixture_pmfs)), axis=0) if len(other_mixture_pmfs) else 1.0
    pmin = from_survival(comp_surv * rest)
    return pmin @ lik


def partial_weights_matrix(comp_pmfs: np.ndarray, other_mixture_pmfs: np.ndarray, lik: np.ndarray) -> np.ndarray:
    """Same quantity as :func:`partial_weights` evaluated as ``D (M L)``.

    ``M[x, y] = Pr(min(x, R) = y)`` with ``R`` the minimum of the other
    links, so ``M L`` is the evidence given ``x_l = x`` and ``D`` holds the
    component pmfs.  This is the B x B matrix formulation; it is O(B^2)
    and kept as a cross-check of the survival-product route.
    """
    size = comp_pmfs.shape[-1]
    if len(other_mixture_pmfs):
        rest_surv = np.prod(survival(np.atleast_2d(other_mixture_pmfs)), axis=0)
    else:
        rest_surv = np.ones(size)  # no other links: min(x, R) = x
    rest_pmf = from_survival(rest_surv)
    x = np.arange(size)
    trans = np.where(x[None, :] < x[:, None], rest_pmf[None, :], 0.0)
    trans[x, x] = rest_surv
    return comp_pmfs @ (trans @ lik)


class BeliefState:
    """Gaussian mixtures for every link, stored as ``(N, N_v)`` arrays."""

    def __init__(self, means: np.ndarray, weights: np.ndarray, config: FilterConfig,
                 rngs: list[np.random.Generator]):
        self.means = np.asarray(means, dtype=float)
        self.weights = np.asarray(weights, dtype=float)
        self.config = config
        self.rngs = rngs
        self._components = None
        self._stale: set[int] = set()
        self.n_resampled = 0

    @property
    def n_links(self) -> int:
        return self.means.shape[0]

    def link(self, l: int) -> LinkBelief:
        return LinkBelief(self.means[l].copy(), self.weights[l].copy(), self.config.sigma_mu)

    def invalidate(self, links=None) -> None:
        if links is None:
            self._components = None
        else:
            self._stale.update(links)

    def components(self) -> np.ndarray:
        """Cached ``(N, N_v, B)`` component pmfs, refreshed per stale link."""
        cfg = self.config
        if self._components is None:
            self._components = component_pmfs(self.means, cfg.sigma_mu, cfg.grid)
            self._stale.clear()
        elif self._stale:
            idx = sorted(self._stale)
            self._components[idx] = component_pmfs(self.means[idx], cfg.sigma_mu, cfg.grid)
            self._stale.clear()
        return self._components

    def priors(self) -> np.ndarray:
        """Per-link mixture pmfs ``(N, B)``: the factorized prior handed to BP."""
        return normalize(np.einsum("lv,lvb->lb", self.weights, self.components()))

    def transition(self) -> None:
        cfg = self.config
        if cfg.sigma_h > 0:
            noise = np.stack([rng.normal(0.0, cfg.sigma_h, size=self.means.shape[1]) for rng in self.rngs])
            lo = cfg.grid.b_min - 3 * cfg.sigma_h
            hi = cfg.grid.b_max + 3 * cfg.sigma_h
            self.means = reflect(self.means + noise, lo, hi)
        self.invalidate()

    def log_partial_weights(self, topology: Topology, log_liks: dict[int, np.ndarray]) -> dict[int, np.ndarray]:
        """Sum over observed paths of log partial weights, for each observed link."""
        comps = self.components()
        mixtures = self.priors()
        out: dict[int, np.ndarray] = {}
        for p, log_l in log_liks.items():
            lik = np.exp(log_l - log_l.max())
            links = topology.path_links[p]
            for l in links:
                others = [o for o in links if o != l]
                w = partial_weights(survival(comps[l]), mixtures[others], lik)
                with np.errstate(divide="ignore"):
                    contrib = np.log(w)
                out[l] = out[l] + contrib if l in out else contrib
        return out

    def update_weights(self, topology: Topology, log_liks: dict[int, np.ndarray]) -> list[int]:
        """Likelihood-weighting update; returns the observed links."""
        partials = self.log_partial_weights(topology, log_liks)
        for l, contrib in partials.items():
            with np.errstate(divide="ignore"):
                log_w = np.log(self.weights[l]) + contrib
            if not np.any(np.isfinite(log_w)):
                log.warning("link %d: all component weights vanished; resetting to uniform", l)
                self.weights[l] = 1.0 / self.weights.shape[1]
                continue
            log_w -= log_w[np.isfinite(log_w)].max()
            w = np.exp(log_w)
            self.weights[l] = w / w.sum()
        return sorted(partials)

    def resample_if_needed(self, links=None) -> list[int]:
        links = range(self.n_links) if links is None else links
        done = []
        for l in links:
            if effective_count(self.weights[l]) < self.config.neff_threshold:
                new = resample(self.link(l), self.rngs[l])
                self.means[l] = new.means
                self.weights[l] = new.weights
                done.append(l)
        if done:
            self.invalidate(done)
            self.n_resampled += len(done)
        return done

    def snapshot(self, slice_index: int) -> list[dict]:
        return [
            {"slice": slice_index, "link": l, "means": self.means[l].tolist(), "weights": self.weights[l].tolist()}
            for l in range(self.n_links)
        ]

    def dump_jsonl(self, fh, slice_index: int) -> None:
        for rec in self.snapshot(slice_index):
            fh.write(json.dumps(rec) + "\n")


def link_rngs(seed, n_links: int) -> list[np.random.Generator]:
    seq = seed if isinstance(seed, np.random.SeedSequence) else np.random.SeedSequence(seed)
    return [np.random.default_rng(s) for s in seq.spawn(n_links)]


def init_beliefs(config: FilterConfig, topology: Topology, rngs=None) -> BeliefState:
    """Means uniform over the grid range, weights uniform."""
    rngs = link_rngs(config.seed, topology.n_links) if rngs is None else rngs
    grid = config.grid
    means = np.stack([r.uniform(grid.b_min, grid.b_max, size=config.n_particles) for r in rngs])
    weights = np.full_like(means, 1.0 / config.n_particles)
    return BeliefState(means, weights, config, rngs)


def transition(beliefs: BeliefState) -> None:
    beliefs.transition()


def update_weights(beliefs: BeliefState, topology: Topology, window: ObservationWindow,
                   model: LikelihoodModel) -> list[int]:
    return beliefs.update_weights(topology, window.log_likelihoods(model, beliefs.config.grid))
