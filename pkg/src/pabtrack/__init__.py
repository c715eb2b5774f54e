"""Probabilistic available-bandwidth tracking over many network paths.

Chirp probes give noisy binary evidence about each path's PAB; a factor
graph ties paths to the links they share, and a Gaussian-mixture particle
filter carries per-link beliefs from one batch of measurements to the next.
"""

from .chirp import ChirpObservation, ChirpSpec, interpret, solve_chirp, spacings, window_rates
from .config import RunConfig, load_config
from .estimators import Tracker, TrackerConfig, confidence_interval, select_estimate
from .factor_graph import BPConfig, FactorGraph, min_pmf
from .grid import RateGrid
from .likelihood import LikelihoodModel, chirp_likelihood, fit_alpha
from .topology import Topology, generate_random_topology, load_topology

__version__ = "0.1.0"

__all__ = [
    "BPConfig",
    "ChirpObservation",
    "ChirpSpec",
    "FactorGraph",
    "LikelihoodModel",
    "RateGrid",
    "RunConfig",
    "Topology",
    "Tracker",
    "TrackerConfig",
    "chirp_likelihood",
    "confidence_interval",
    "fit_alpha",
    "generate_random_topology",
    "interpret",
    "load_config",
    "load_topology",
    "min_pmf",
    "select_estimate",
    "solve_chirp",
    "spacings",
    "window_rates",
]
