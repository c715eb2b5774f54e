"""Ground-truth link dynamics, synthetic chirp outcomes and evaluation metrics."""

from __future__ import annotations

import csv
import json
import logging
import time
import warnings
from dataclasses import dataclass, field
from multiprocessing import Pool
from pathlib import Path

import numpy as np

from .chirp import ChirpObservation, ChirpSpec, window_rates
from .config import DEFAULT_DYNAMICS, RunConfig
from .estimators import Tracker
from .grid import RateGrid
from .likelihood import LikelihoodModel
from .topology import Topology, generate_random_topology, load_topology

log = logging.getLogger(__name__)

DELTAS = np.array([-2, -1, 0, 1, 2])


@dataclass(frozen=True)
class DynamicsModel:
    probs: tuple[float, ...] = DEFAULT_DYNAMICS
    deltas: tuple[int, ...] = tuple(DELTAS.tolist())

    def __post_init__(self):
        if len(self.probs) != len(self.deltas) or abs(sum(self.probs) - 1) > 1e-9:
            raise ValueError("dynamics probabilities must match deltas and sum to 1")


class GroundTruth:
    """Integer link PABs; path PAB is the minimum over its links."""

    def __init__(self, topology: Topology, link_pab: np.ndarray, grid: RateGrid):
        self.topology = topology
        self.grid = grid
        self.x = np.asarray(link_pab, dtype=np.int64)
        self._rows = [np.asarray(ls) for ls in topology.path_links]

    def path_pab(self) -> np.ndarray:
        return np.array([self.x[ls].min() for ls in self._rows])


def init_truth(topology: Topology, rng: np.random.Generator, grid: RateGrid) -> GroundTruth:
    return GroundTruth(topology, rng.integers(grid.b_min, grid.b_max + 1, size=topology.n_links), grid)


def step_truth(truth: GroundTruth, dynamics: DynamicsModel, rng: np.random.Generator) -> None:
    delta = rng.choice(np.asarray(dynamics.deltas), size=truth.x.size, p=np.asarray(dynamics.probs))
    truth.x = np.clip(truth.x + delta, truth.grid.b_min, truth.grid.b_max)


def synth_measure(truth: GroundTruth, path: int, spec: ChirpSpec, model: LikelihoodModel,
                  rng: np.random.Generator) -> ChirpObservation:
    """Draw every window outcome from the sigmoid model at the true path PAB."""
    rates = window_rates(spec)
    pab = truth.path_pab()[path]
    z = (rng.random(rates.size) < model.success_probability(rates, pab)).astype(np.int8)
    out_rates = np.where(z == 1, rates, rates - model.epsilon - 1.0)
    return ChirpObservation(path=path, rates=rates, out_rates=out_rates, outcomes=z)


class MetricSeries:
    """PS / CR / CP bookkeeping for one estimator and selection mode.

    Keeps the per-step, per-path hit mask and ``estimate - truth`` gaps;
    PS, CR and CP are all derived from those two arrays.
    """

    def __init__(self, steps: int, n_paths: int, gamma: float, model: LikelihoodModel):
        self.hits = np.zeros((steps, n_paths), dtype=bool)
        self.gaps = np.zeros((steps, n_paths))
        self.gamma = gamma
        self.model = model
        self.t = 0

    def update(self, estimate, truth) -> None:
        estimate = np.asarray(estimate, dtype=float)
        truth = np.asarray(truth, dtype=float)
        self.hits[self.t] = estimate <= truth
        self.gaps[self.t] = estimate - truth
        self.t += 1

    @property
    def ps(self) -> np.ndarray:
        """Running-average success probability per step and path."""
        steps = np.arange(1, self.t + 1)[:, None]
        return np.cumsum(self.hits[: self.t], axis=0) / steps

    def cr_values(self) -> np.ndarray:
        """CR where the estimate is feasible, NaN elsewhere."""
        return np.where(self.hits[: self.t], self.gaps[: self.t], np.nan)

    def cp_values(self) -> np.ndarray:
        """CP where the estimate overshoots, NaN elsewhere."""
        cp = self.model.success_probability(self.gaps[: self.t], 0.0) - self.gamma
        return np.where(self.hits[: self.t], np.nan, cp)

    def summary(self) -> dict[str, np.ndarray]:
        """Per-step series averaged over paths (running averages as in the plots)."""
        cr = self.cr_values()
        cp = self.cp_values()
        cr_cnt = np.sum(~np.isnan(cr), axis=1)
        cp_cnt = np.sum(~np.isnan(cp), axis=1)
        cr_sum = np.nansum(cr, axis=1)
        cp_sum = np.nansum(cp, axis=1)
        with np.errstate(invalid="ignore", divide="ignore"):
            cr_run = np.cumsum(cr_sum) / np.cumsum(cr_cnt)
            cp_run = np.cumsum(cp_sum) / np.cumsum(cp_cnt)
        return {
            "ps": self.ps.mean(axis=1),
            "cr": cr_run,
            "cp": cp_run,
            "cr_sum": cr_sum,
            "cr_cnt": cr_cnt.astype(float),
            "cp_sum": cp_sum,
            "cp_cnt": cp_cnt.astype(float),
        }


def _nanmean_rows(rows) -> np.ndarray:
    # steps where no replica has a value stay NaN without a warning
    with warnings.catch_warnings():
        warnings.simplefilter("ignore", RuntimeWarning)
        return np.nanmean(np.stack(rows), axis=0)


def metrics_update(series: MetricSeries, estimate, truth) -> None:
    series.update(estimate, truth)


@dataclass
class ReplicaResult:
    replica: int
    series: dict[tuple[str, str], dict[str, np.ndarray]]
    ci_width: dict[str, np.ndarray]
    n_slices: int
    n_resampled: int
    bp_iterations: np.ndarray
    steps: list[dict] = field(default_factory=list)
    beliefs: list[dict] = field(default_factory=list)
    seconds: float = 0.0


def build_topology(cfg: RunConfig) -> Topology:
    if cfg.topology:
        return load_topology(cfg.topology)
    return generate_random_topology(cfg.n_end_nodes, cfg.topology_seed)


def replica_seeds(cfg: RunConfig) -> list[np.random.SeedSequence]:
    return np.random.SeedSequence(cfg.seed).spawn(cfg.replicas)


def run_replica(cfg: RunConfig, topology: Topology, replica: int,
                keep_steps: bool = False, keep_beliefs: bool = False) -> ReplicaResult:
    started = time.perf_counter()
    seq = replica_seeds(cfg)[replica]
    truth_seq, measure_seq, tracker_seq = seq.spawn(3)
    truth_rng = np.random.default_rng(truth_seq)
    measure_rng = np.random.default_rng(measure_seq)

    tcfg = cfg.tracker_config()
    grid, model = tcfg.grid, tcfg.model
    dynamics = DynamicsModel(tuple(cfg.dynamics))
    truth = init_truth(topology, truth_rng, grid)
    tracker = Tracker(topology, tcfg, tracker_seq)

    combos = [(k, m) for k in tcfg.estimators for m in tcfg.modes]
    series = {c: MetricSeries(cfg.steps, topology.n_paths, cfg.gamma_cp, model) for c in combos}
    widths = {k: np.zeros(cfg.steps) for k in tcfg.estimators}
    iters = np.zeros(cfg.steps, dtype=np.int64)
    steps, beliefs = [], []

    def measure(path, spec):
        return synth_measure(truth, path, spec, model, measure_rng)

    for i in range(cfg.steps):
        y = truth.path_pab()
        for kind, mode in combos:
            series[kind, mode].update(tracker.estimates[kind].values[mode], y)
        for kind in tcfg.estimators:
            widths[kind][i] = tracker.estimates[kind].widths.mean()
        if keep_steps:
            steps.append(step_record(replica, i + 1, y, tracker))
        rec = tracker.step(measure)
        iters[i] = rec.bp_iterations
        if keep_steps:
            steps[-1].update(path=rec.path, rate_range=list(rec.rate_range), converged=rec.converged)
        if keep_beliefs and rec.slice_end:
            for b in tracker.beliefs.snapshot(tracker.n_slices):
                b["replica"] = replica
                beliefs.append(b)
        step_truth(truth, dynamics, truth_rng)

    return ReplicaResult(
        replica=replica,
        series={c: s.summary() for c, s in series.items()},
        ci_width=widths,
        n_slices=tracker.n_slices,
        n_resampled=tracker.beliefs.n_resampled,
        bp_iterations=iters,
        steps=steps,
        beliefs=beliefs,
        seconds=time.perf_counter() - started,
    )


def step_record(replica: int, t: int, truth: np.ndarray, tracker: Tracker) -> dict:
    return {
        "replica": replica,
        "t": t,
        "truth": truth.tolist(),
        "estimates": {k: {m: v.tolist() for m, v in e.values.items()} for k, e in tracker.estimates.items()},
        "ci": {k: [[ci.lo, ci.hi] for ci in e.cis] for k, e in tracker.estimates.items()},
    }


@dataclass
class ExperimentResult:
    config: RunConfig
    topology: Topology
    replicas: list[ReplicaResult]

    def curve(self, kind: str, mode: str, metric: str) -> np.ndarray:
        """Replica-averaged running-average series for ``metric`` in ps/cr/cp."""
        return _nanmean_rows([r.series[kind, mode][metric] for r in self.replicas])

    def final_ps(self, kind: str, mode: str) -> float:
        return float(self.curve(kind, mode, "ps")[-1])

    def window_mean(self, kind: str, mode: str, metric: str = "cr", start: int = 0, stop: int | None = None) -> float:
        """Mean of raw CR (or CP) values recorded in steps ``start..stop`` across paths and replicas."""
        total = sum(r.series[kind, mode][f"{metric}_sum"][start:stop].sum() for r in self.replicas)
        count = sum(r.series[kind, mode][f"{metric}_cnt"][start:stop].sum() for r in self.replicas)
        return float(total / count) if count else float("nan")

    def mean_width(self, kind: str, start: int = 0, stop: int | None = None) -> float:
        return float(np.mean([r.ci_width[kind][start:stop].mean() for r in self.replicas]))

    def report(self) -> dict:
        cfg = self.config
        out = {
            "n_links": self.topology.n_links,
            "n_paths": self.topology.n_paths,
            "steps": cfg.steps,
            "replicas": len(self.replicas),
            "slices_per_replica": self.replicas[0].n_slices if self.replicas else 0,
            "seconds": sum(r.seconds for r in self.replicas),
            "results": {},
        }
        half = cfg.steps // 2
        for kind in cfg.estimators:
            out["results"][kind] = {"mean_ci_width": self.mean_width(kind)}
            for mode in cfg.selection_modes:
                out["results"][kind][mode] = {
                    "final_ps": self.final_ps(kind, mode),
                    "final_cr": float(self.curve(kind, mode, "cr")[-1]),
                    "final_cp": float(self.curve(kind, mode, "cp")[-1]),
                    "cr_last_half": self.window_mean(kind, mode, "cr", half),
                    "cp_last_half": self.window_mean(kind, mode, "cp", half),
                }
        return out


def _replica_job(args):
    cfg, topology, replica, keep_steps, keep_beliefs = args
    return run_replica(cfg, topology, replica, keep_steps, keep_beliefs)


def run_experiment(cfg: RunConfig, topology: Topology | None = None,
                   keep_steps: bool = False, keep_beliefs: bool = False) -> ExperimentResult:
    cfg.validate()
    topology = build_topology(cfg) if topology is None else topology
    jobs = [(cfg, topology, r, keep_steps, keep_beliefs) for r in range(cfg.replicas)]
    if cfg.workers > 1 and cfg.replicas > 1:
        with Pool(min(cfg.workers, cfg.replicas)) as pool:
            results = pool.map(_replica_job, jobs)
    else:
        results = []
        for job in jobs:
            results.append(_replica_job(job))
            log.info("replica %d done in %.1fs", job[2], results[-1].seconds)
    return ExperimentResult(cfg, topology, results)


# -- output files -------------------------------------------------------

def write_metric_csvs(result_or_curves, out_dir: str | Path) -> list[Path]:
    """One CSV per (estimator, mode) with replica-averaged PS/CR/CP versus t."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    curves = result_or_curves if isinstance(result_or_curves, dict) else curves_from_result(result_or_curves)
    written = []
    for (kind, mode), cols in sorted(curves.items()):
        path = out_dir / f"metrics_{kind}_{mode}.csv"
        with open(path, "w", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(["t", "ps", "cr", "cp"])
            for i, (ps, cr, cp) in enumerate(zip(cols["ps"], cols["cr"], cols["cp"]), start=1):
                writer.writerow([i, repr(float(ps)), repr(float(cr)), repr(float(cp))])
        written.append(path)
    return written


def curves_from_result(result: ExperimentResult) -> dict:
    cfg = result.config
    return {
        (k, m): {metric: result.curve(k, m, metric) for metric in ("ps", "cr", "cp")}
        for k in cfg.estimators
        for m in cfg.selection_modes
    }


def write_jsonl(records, path: str | Path) -> None:
    with open(path, "w") as fh:
        for rec in records:
            fh.write(json.dumps(rec) + "\n")


def read_jsonl(path: str | Path) -> list[dict]:
    with open(path) as fh:
        return [json.loads(line) for line in fh if line.strip()]


def curves_from_steps(records: list[dict], gamma: float, model: LikelihoodModel) -> dict:
    """Recompute replica-averaged PS/CR/CP curves from logged step records."""
    by_replica: dict[int, list[dict]] = {}
    for rec in records:
        by_replica.setdefault(int(rec["replica"]), []).append(rec)
    per_replica = []
    for replica in sorted(by_replica):
        recs = sorted(by_replica[replica], key=lambda r: r["t"])
        n_paths = len(recs[0]["truth"])
        series = {}
        for rec in recs:
            for kind, modes in rec["estimates"].items():
                for mode, est in modes.items():
                    s = series.setdefault((kind, mode), MetricSeries(len(recs), n_paths, gamma, model))
                    s.update(est, rec["truth"])
        per_replica.append({c: s.summary() for c, s in series.items()})
    combos = per_replica[0].keys() if per_replica else []
    return {
        c: {m: _nanmean_rows([r[c][m] for r in per_replica]) for m in ("ps", "cr", "cp")}
        for c in combos
    }
