"""Sum-product belief propagation over one slice of the link/path factor graph.

Variables are link PABs ``x_l`` (with a prior each) and path PABs ``y_p``.
Each path has a min-factor ``1[y_p = min_{l in L_p} x_l]`` and a likelihood
factor on ``y_p``.  Because ``y_p`` touches only those two factors, the
message ``y_p -> min-factor`` is just the likelihood, and the min-factor
message to one of its links has the closed form

    m(x) = sum_{y < x} L(y) Pr(R = y) + L(x) Pr(R >= x),

where ``R`` is the minimum of the other links under their incoming
messages.  ``Pr(R >= x)`` is a product of survival functions, so a whole
factor costs O(B |L_p|) instead of O(B^|L_p|).
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy import sparse

from .grid import RateGrid, from_survival, normalize, normalize_log, survival
from .likelihood import PathLikelihood
from .topology import Topology

_TINY = np.finfo(float).tiny


@dataclass(frozen=True)
class BPConfig:
    tol: float = 1e-6
    max_iters: int = 50
    damping: float = 0.0

    def __post_init__(self):
        if self.tol <= 0 or self.max_iters < 1:
            raise ValueError("tol must be positive and max_iters >= 1")
        if not 0.0 <= self.damping < 1.0:
            raise ValueError("damping must lie in [0, 1)")


@dataclass
class BPResult:
    path_marginals: np.ndarray
    link_marginals: np.ndarray
    converged: bool
    iterations: int
    max_change: float


def min_pmf(link_pmfs) -> np.ndarray:
    """Distribution of the minimum of independent variables on a common grid."""
    pmfs = np.atleast_2d(np.asarray(link_pmfs, dtype=float))
    if pmfs.shape[0] == 0:
        raise ValueError("min_pmf needs at least one pmf")
    surv = np.prod(survival(normalize(pmfs)), axis=0)
    return from_survival(surv)


def _exclusive_products(surv: np.ndarray) -> np.ndarray:
    """For each position along axis 1, the product of all other positions."""
    ones = np.ones_like(surv[:, :1])
    prefix = np.cumprod(np.concatenate([ones, surv[:, :-1]], axis=1), axis=1)
    rev = surv[:, ::-1]
    suffix = np.cumprod(np.concatenate([ones, rev[:, :-1]], axis=1), axis=1)[:, ::-1]
    return prefix * suffix


def min_factor_messages(lik: np.ndarray, incoming: np.ndarray) -> np.ndarray:
    """Messages from min-factors to their links.

    ``lik`` is ``(F, B)`` (linear scale), ``incoming`` is ``(F, n, B)`` of
    variable-to-factor pmfs; padding slots must be all-ones survival, i.e.
    a point mass on the top grid value.  Returns unnormalized ``(F, n, B)``.
    """
    rest = _exclusive_products(survival(incoming))
    lik = lik[:, None, :]
    below = np.cumsum(lik * from_survival(rest), axis=-1)
    below = np.concatenate([np.zeros_like(below[..., :1]), below[..., :-1]], axis=-1)
    return below + lik * rest


def factor_message(lik: np.ndarray, incoming) -> np.ndarray:
    """Normalized min-factor message to every link of a single factor."""
    incoming = np.asarray(incoming, dtype=float)
    msgs = min_factor_messages(np.asarray(lik, dtype=float)[None, :], normalize(incoming)[None])
    return normalize(msgs[0])


class FactorGraph:
    """One DBN slice: link priors, per-path likelihood factors and BP messages."""

    def __init__(self, topology: Topology, priors, grid: RateGrid, config: BPConfig | None = None):
        self.topology = topology
        self.grid = grid
        self.config = config or BPConfig()
        n_paths, size = topology.n_paths, grid.size
        width = max(len(ls) for ls in topology.path_links)

        self.edge_link = np.full((n_paths, width), -1, dtype=np.int64)
        for p, links in enumerate(topology.path_links):
            self.edge_link[p, : len(links)] = links
        self.mask = self.edge_link >= 0
        self._flat_links = self.edge_link[self.mask]
        n_edges = self._flat_links.size
        # scatter-add of edge messages onto their links
        self._scatter = sparse.csr_matrix(
            (np.ones(n_edges), (self._flat_links, np.arange(n_edges))), shape=(topology.n_links, n_edges)
        )

        # padding slots carry a point mass at the top of the grid: survival == 1
        self._pad = np.zeros(size)
        self._pad[-1] = 1.0

        self.log_lik = np.zeros((n_paths, size))
        self.n_updates = np.zeros(n_paths, dtype=np.int64)
        self.set_priors(priors)

    @property
    def n_links(self) -> int:
        return self.topology.n_links

    @property
    def n_paths(self) -> int:
        return self.topology.n_paths

    def set_priors(self, priors, reset_likelihoods: bool = False) -> None:
        priors = np.asarray(priors, dtype=float)
        if priors.shape != (self.n_links, self.grid.size):
            raise ValueError(
                f"need one prior per link: expected {(self.n_links, self.grid.size)}, got {priors.shape}"
            )
        self.priors = normalize(priors)
        with np.errstate(divide="ignore"):
            self._log_priors = np.log(self.priors)
        if reset_likelihoods:
            self.log_lik[:] = 0.0
            self.n_updates[:] = 0
        self.reset_messages()

    def reset_messages(self) -> None:
        size = self.grid.size
        self.fac_to_var = np.full((self.n_paths, self.mask.shape[1], size), 1.0 / size)
        self.fac_to_var[~self.mask] = 1.0
        self._var_to_fac()

    def update_likelihood(self, path: int, lik: PathLikelihood | np.ndarray) -> None:
        """Multiply a new measurement likelihood into the path's factor."""
        if not 0 <= path < self.n_paths:
            raise IndexError(f"unknown path {path}")
        log_new = lik.log_values if isinstance(lik, PathLikelihood) else np.asarray(lik, dtype=float)
        if isinstance(lik, PathLikelihood) and lik.grid != self.grid:
            raise ValueError("likelihood grid does not match the graph")
        updated = self.log_lik[path] + log_new
        self.log_lik[path] = updated - updated.max()
        self.n_updates[path] += 1

    def likelihood(self, path: int) -> np.ndarray:
        return np.exp(self.log_lik[path])

    def _link_totals(self, log_msgs: np.ndarray) -> np.ndarray:
        return self._log_priors + self._scatter @ log_msgs[self.mask]

    def _var_to_fac(self, active: np.ndarray | None = None) -> None:
        """Recompute link-to-factor messages (only for ``active`` paths if given)."""
        log_msgs = np.log(np.maximum(self.fac_to_var, _TINY))
        totals = self._link_totals(log_msgs)
        if active is None:
            out = np.empty_like(self.fac_to_var)
            out[self.mask] = normalize_log(totals[self._flat_links] - log_msgs[self.mask])
            out[~self.mask] = self._pad
            self.var_to_fac = out
            return
        mask = self.mask[active]
        sub = np.empty((active.size,) + self.fac_to_var.shape[1:])
        sub[mask] = normalize_log(totals[self.edge_link[active][mask]] - log_msgs[active][mask])
        sub[~mask] = self._pad
        self.var_to_fac[active] = sub

    def _fac_to_var(self) -> np.ndarray:
        # a factor with a flat likelihood sends a constant message, so only
        # paths carrying evidence need recomputing
        active = np.flatnonzero(self.n_updates > 0)
        msgs = self.fac_to_var.copy()
        if active.size:
            lik = np.exp(self.log_lik[active])
            sub = normalize(min_factor_messages(lik, self.var_to_fac[active]))
            sub[~self.mask[active]] = 1.0
            msgs[active] = sub
        return msgs

    def run(self, config: BPConfig | None = None) -> BPResult:
        """Synchronous flooding until the L-inf message change drops below tol."""
        cfg = config or self.config
        change = np.inf
        converged = False
        it = 0
        active = np.flatnonzero(self.n_updates > 0)
        for it in range(1, cfg.max_iters + 1):
            new = self._fac_to_var()
            if cfg.damping:
                new = cfg.damping * self.fac_to_var + (1.0 - cfg.damping) * new
                new[~self.mask] = 1.0
            change = float(np.max(np.abs(new - self.fac_to_var)))
            self.fac_to_var = new
            self._var_to_fac(active)
            if change < cfg.tol:
                converged = True
                break
        self._var_to_fac()
        return BPResult(self.path_marginals(), self.link_marginals(), converged, it, change)

    def link_marginals(self) -> np.ndarray:
        log_msgs = np.log(np.maximum(self.fac_to_var, _TINY))
        return normalize_log(self._link_totals(log_msgs))

    def path_priors(self) -> np.ndarray:
        """Distribution of each path minimum under the current link messages."""
        surv = np.prod(survival(self.var_to_fac), axis=1)
        return from_survival(surv)

    def path_marginals(self) -> np.ndarray:
        with np.errstate(divide="ignore"):
            log_prior = np.log(self.path_priors())
        return normalize_log(log_prior + self.log_lik)


def build(topology: Topology, priors, grid: RateGrid, config: BPConfig | None = None) -> FactorGraph:
    return FactorGraph(topology, priors, grid, config)


def run_bp(graph: FactorGraph, config: BPConfig | None = None) -> BPResult:
    return graph.run(config)
