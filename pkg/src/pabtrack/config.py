"""Run configuration: flat keys, JSON files, CLI overrides and validation."""

from __future__ import annotations

import dataclasses
import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any

from .belief import FilterConfig
from .estimators import ESTIMATOR_KINDS, SELECTION_MODES, TrackerConfig
from .factor_graph import BPConfig
from .grid import RateGrid
from .likelihood import LikelihoodModel

MODES = ("simulate", "track-live", "fit-alpha", "analyze")
DEFAULT_DYNAMICS = (0.0625, 0.25, 0.375, 0.25, 0.0625)


class ConfigError(ValueError):
    """Invalid configuration; ``field`` names the offending key."""

    def __init__(self, field_name: str, message: str):
        super().__init__(f"{field_name}: {message}")
        self.field = field_name


@dataclass
class RunConfig:
    mode: str = "simulate"
    seed: int = 0
    # topology
    topology: str | None = None
    n_end_nodes: int = 9
    topology_seed: int = 0
    # experiment size
    steps: int = 1000
    replicas: int = 30
    workers: int = 1
    # rate grid and outcome model
    b_min: int = 1
    b_max: int = 100
    alpha: float = -0.27
    epsilon: float = 5.0
    gamma: float = 0.8
    gamma_cp: float = 0.8
    # estimation
    lam: int = 10
    eta: float = 0.95
    estimators: list[str] = field(default_factory=lambda: list(ESTIMATOR_KINDS))
    selection_modes: list[str] = field(default_factory=lambda: list(SELECTION_MODES))
    estimate_from: str = "predictive"
    # particle filter
    n_particles: int = 100
    neff_threshold: float = 10.0
    sigma_h: float = 4.0
    sigma_mu: float = 1.0
    # belief propagation
    bp_tol: float = 1e-6
    bp_max_iters: int = 50
    bp_damping: float = 0.0
    # chirps
    chirp_k: int = 75
    chirp_kmin: int = 15
    packet_bytes: int = 1000
    # simulated link dynamics: probabilities of delta = -2..+2
    dynamics: list[float] = field(default_factory=lambda: list(DEFAULT_DYNAMICS))
    # outputs
    output_dir: str = "runs/latest"
    write_steps: bool = True
    write_beliefs: bool = False
    # analyze / fit-alpha input, live probing
    input: str | None = None
    port: int = 9876
    probe_timeout: float = 2.0
    max_retries: int = 3
    probe_realtime: bool = False

    def validate(self) -> "RunConfig":
        def need(cond, name, msg):
            if not cond:
                raise ConfigError(name, msg)

        need(self.mode in MODES, "mode", f"must be one of {MODES}")
        need(self.b_min >= 1, "b_min", "must be >= 1")
        need(self.b_max > self.b_min, "b_max", "must exceed b_min")
        need(self.lam >= 1, "lam", "must be >= 1")
        need(0 < self.gamma < 1, "gamma", "must lie in (0, 1)")
        need(0 < self.gamma_cp < 1, "gamma_cp", "must lie in (0, 1)")
        need(0 < self.eta < 1, "eta", "must lie in (0, 1)")
        need(self.alpha < 0, "alpha", "must be negative")
        need(self.epsilon >= 0, "epsilon", "must be >= 0")
        need(self.n_particles >= 1, "n_particles", "must be >= 1")
        need(0 < self.neff_threshold <= self.n_particles, "neff_threshold", "must lie in (0, n_particles]")
        need(self.sigma_h >= 0, "sigma_h", "must be >= 0")
        need(self.sigma_mu > 0, "sigma_mu", "must be > 0")
        need(self.steps >= 1, "steps", "must be >= 1")
        need(self.replicas >= 1, "replicas", "must be >= 1")
        need(self.workers >= 1, "workers", "must be >= 1")
        need(self.n_end_nodes >= 2, "n_end_nodes", "must be >= 2")
        need(self.chirp_k > self.chirp_kmin + 1 and self.chirp_kmin >= 1, "chirp_k", "need K > K_min + 1, K_min >= 1")
        need(self.packet_bytes >= 20, "packet_bytes", "must hold the 20-byte probe header")
        need(self.bp_tol > 0, "bp_tol", "must be > 0")
        need(self.bp_max_iters >= 1, "bp_max_iters", "must be >= 1")
        need(0 <= self.bp_damping < 1, "bp_damping", "must lie in [0, 1)")
        need(len(self.dynamics) == 5 and all(p >= 0 for p in self.dynamics), "dynamics", "need 5 probabilities")
        need(abs(sum(self.dynamics) - 1) < 1e-9, "dynamics", "probabilities must sum to 1")
        need(self.estimate_from in ("posterior", "predictive"), "estimate_from", "posterior or predictive")
        bad = [k for k in self.estimators if k not in ESTIMATOR_KINDS]
        need(not bad and self.estimators, "estimators", f"unknown or empty: {bad}")
        bad = [m for m in self.selection_modes if m not in SELECTION_MODES]
        need(not bad and self.selection_modes, "selection_modes", f"unknown or empty: {bad}")
        return self

    # -- derived component configs -------------------------------------
    def grid(self) -> RateGrid:
        return RateGrid(self.b_min, self.b_max)

    def model(self) -> LikelihoodModel:
        return LikelihoodModel(self.alpha, self.epsilon)

    def filter_config(self) -> FilterConfig:
        return FilterConfig(self.n_particles, self.sigma_h, self.neff_threshold, self.sigma_mu, self.grid(), self.seed)

    def bp_config(self) -> BPConfig:
        return BPConfig(self.bp_tol, self.bp_max_iters, self.bp_damping)

    def tracker_config(self) -> TrackerConfig:
        return TrackerConfig(
            grid=self.grid(),
            model=self.model(),
            filter=self.filter_config(),
            bp=self.bp_config(),
            lam=self.lam,
            eta=self.eta,
            chirp_k=self.chirp_k,
            chirp_kmin=self.chirp_kmin,
            packet_bits=8.0 * self.packet_bytes,
            estimators=tuple(self.estimators),
            modes=tuple(self.selection_modes),
            estimate_from=self.estimate_from,
        )

    def to_dict(self) -> dict[str, Any]:
        return dataclasses.asdict(self)

    def dump(self, path: str | Path) -> None:
        Path(path).write_text(json.dumps(self.to_dict(), indent=2, sort_keys=True) + "\n")


FIELDS = {f.name: f for f in dataclasses.fields(RunConfig)}


def _coerce(name: str, value):
    f = FIELDS[name]
    default = f.default if f.default is not dataclasses.MISSING else f.default_factory()
    try:
        if value is None:
            return None
        if isinstance(default, bool):
            if isinstance(value, str):
                return value.lower() in ("1", "true", "yes", "on")
            return bool(value)
        if isinstance(default, list):
            if isinstance(value, str):
                value = [v.strip() for v in value.split(",") if v.strip()]
            return [type(default[0])(v) for v in value] if default else list(value)
        if isinstance(default, int):
            if isinstance(value, float) and not value.is_integer():
                raise ValueError("expected an integer")
            return int(value)
        if isinstance(default, float):
            return float(value)
        return value
    except (TypeError, ValueError) as exc:
        raise ConfigError(name, f"bad value {value!r}: {exc}") from None


def load_config(path: str | Path | None = None, overrides: dict | None = None) -> RunConfig:
    """Built-in defaults, then the JSON file, then explicit overrides."""
    data: dict = {}
    if path is not None:
        text = Path(path).read_text()
        try:
            data = json.loads(text) if text.strip() else {}
        except json.JSONDecodeError as exc:
            raise ConfigError("<file>", f"cannot parse {path}: {exc}") from None
        if not isinstance(data, dict):
            raise ConfigError("<file>", "top level must be an object")
    merged = dict(data)
    merged.update({k: v for k, v in (overrides or {}).items() if v is not None})
    unknown = sorted(set(merged) - set(FIELDS))
    if unknown:
        raise ConfigError(unknown[0], "unknown configuration key")
    kwargs = {k: _coerce(k, v) for k, v in merged.items()}
    return RunConfig(**kwargs).validate()
