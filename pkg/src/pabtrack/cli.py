"""``pabtrack`` command line: simulate, track-live, probe, fit-alpha, analyze.

Every configuration key is also a flag (``b_max`` -> ``--b-max``); flags
override the JSON file given with ``--config``, which overrides the
built-in defaults.  Exit codes: 0 success, 2 configuration error,
3 measurement failure, 4 I/O error.
"""

from __future__ import annotations

import argparse
import dataclasses
import json
import logging
import sys
import time
from pathlib import Path

from .chirp import ChirpError, solve_chirp
from .config import FIELDS, ConfigError, RunConfig, load_config
from .likelihood import DegenerateDataError, fit_alpha, read_samples
from .topology import TopologyError

log = logging.getLogger("pabtrack")

EXIT_OK, EXIT_CONFIG, EXIT_MEASUREMENT, EXIT_IO = 0, 2, 3, 4

_HELP = {
    "seed": "master seed for every random stream",
    "topology": "topology JSON file (default: generate a random one)",
    "n_end_nodes": "end hosts of the generated topology",
    "replicas": "independent simulation replicas",
    "workers": "processes used for replicas",
    "gamma": "success-probability level of the PAB definition",
    "gamma_cp": "gamma used when scoring the CP metric",
    "lam": "measurements per slice",
    "eta": "confidence-interval mass",
    "estimators": "comma-separated subset of bp-pf,bb,bb-r",
    "selection_modes": "comma-separated subset of lower-bound,percentile-25,median",
    "estimate_from": "BP-PF estimate source: predictive (next-slice prior) or posterior",
    "dynamics": "five comma-separated probabilities of a -2..+2 PAB change per step",
    "output_dir": "directory receiving CSV/JSONL/JSON outputs",
    "input": "input file for analyze (steps JSONL) or fit-alpha (CSV)",
    "probe_realtime": "pace chirps under SCHED_FIFO where permitted",
}


def _add_config_flags(parser: argparse.ArgumentParser) -> None:
    parser.add_argument("--config", help="JSON file with configuration keys")
    for name, f in FIELDS.items():
        if name == "mode":
            continue
        flag = "--" + name.replace("_", "-")
        default = f.default if f.default is not dataclasses.MISSING else f.default_factory()
        help_text = _HELP.get(name, "") + f" (default: {default})"
        if isinstance(default, bool):
            parser.add_argument(flag, dest=name, action=argparse.BooleanOptionalAction, default=None,
                                help=help_text)
        else:
            parser.add_argument(flag, dest=name, default=None, metavar=name.upper(), help=help_text)


def _config_from_args(args, mode: str) -> RunConfig:
    overrides = {name: getattr(args, name, None) for name in FIELDS if name != "mode"}
    overrides["mode"] = mode
    return load_config(args.config, overrides)


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="pabtrack", description="Multi-path available bandwidth tracking.")
    parser.add_argument("-v", "--verbose", action="count", default=0)
    sub = parser.add_subparsers(dest="command", required=True)

    for name, text in (
        ("simulate", "run the simulated tracking experiment"),
        ("track-live", "track real paths with UDP chirps"),
        ("fit-alpha", "fit the sigmoid slope to (delta, z) samples"),
        ("analyze", "recompute metric curves from a steps JSONL log"),
    ):
        _add_config_flags(sub.add_parser(name, help=text))

    probe = sub.add_parser("probe", help="raw chirp sender/receiver")
    psub = probe.add_subparsers(dest="probe_command", required=True)
    recv = psub.add_parser("recv", help="receive chirps and return receipts")
    recv.add_argument("--host", default="0.0.0.0")
    recv.add_argument("--port", type=int, default=9876)
    recv.add_argument("--log", help="receipt JSONL file (default: stdout)")
    recv.add_argument("--count", type=int, default=0, help="exit after this many receipts (0 = forever)")
    recv.add_argument("--duration", type=float, default=0.0, help="exit after this many seconds (0 = forever)")
    recv.add_argument("--no-kernel-timestamps", action="store_true")

    send = psub.add_parser("send", help="send chirps and print observations")
    send.add_argument("--dest", required=True, help="host:port of a running receiver")
    send.add_argument("--rmin", type=float, default=10.0)
    send.add_argument("--rmax", type=float, default=100.0)
    send.add_argument("--k", type=int, default=75)
    send.add_argument("--kmin", type=int, default=15)
    send.add_argument("--packet-bytes", type=int, default=1000)
    send.add_argument("--epsilon", type=float, default=5.0)
    send.add_argument("--timeout", type=float, default=2.0)
    send.add_argument("--count", type=int, default=1)
    send.add_argument("--log", help="receipt JSONL file")
    send.add_argument("--realtime", action="store_true", help="pace under SCHED_FIFO where permitted")
    return parser


def parse_address(text: str, default_port: int | None = None) -> tuple[str, int]:
    host, _, port = str(text).rpartition(":")
    if not host:
        if default_port is None:
            raise ConfigError("dest", f"expected host:port, got {text!r}")
        return str(text), int(default_port)
    try:
        return host, int(port)
    except ValueError:
        raise ConfigError("dest", f"bad port in {text!r}") from None


# -- subcommands --------------------------------------------------------

def cmd_simulate(cfg: RunConfig) -> int:
    from .simulator import run_experiment, write_jsonl, write_metric_csvs

    out = Path(cfg.output_dir)
    out.mkdir(parents=True, exist_ok=True)
    cfg.dump(out / "effective_config.json")
    result = run_experiment(cfg, keep_steps=cfg.write_steps, keep_beliefs=cfg.write_beliefs)
    write_metric_csvs(result, out)
    if cfg.write_steps:
        write_jsonl((s for r in result.replicas for s in r.steps), out / "steps.jsonl")
    if cfg.write_beliefs:
        write_jsonl((b for r in result.replicas for b in r.beliefs), out / "beliefs.jsonl")
    report = result.report()
    report.pop("seconds")
    (out / "summary.json").write_text(json.dumps(report, indent=2, sort_keys=True) + "\n")
    _print_summary(report, cfg)
    return EXIT_OK


def _print_summary(report: dict, cfg: RunConfig) -> None:
    print(f"{report['n_paths']} paths, {report['n_links']} links, "
          f"{report['replicas']} replicas x {report['steps']} steps")
    for kind in cfg.estimators:
        res = report["results"][kind]
        print(f"{kind:6s} mean CI width {res['mean_ci_width']:.1f}")
        for mode in cfg.selection_modes:
            m = res[mode]
            print(f"  {mode:14s} PS {m['final_ps']:.3f}  CR {m['final_cr']:7.2f}  CP {m['final_cp']:7.3f}")


def cmd_track_live(cfg: RunConfig) -> int:
    from .estimators import Tracker
    from .probe import LiveProber
    from .simulator import build_topology

    if not cfg.topology:
        raise ConfigError("topology", "track-live needs a topology file whose nodes carry addresses")
    topology = build_topology(cfg)
    addresses = {}
    for p, (_src, dst) in enumerate(topology.path_endpoints):
        if dst not in topology.nodes:
            raise ConfigError("topology", f"node {dst!r} (end of path {topology.path_names[p]}) has no address")
        addresses[p] = parse_address(topology.nodes[dst], cfg.port)

    out = Path(cfg.output_dir)
    out.mkdir(parents=True, exist_ok=True)
    cfg.dump(out / "effective_config.json")
    tracker = Tracker(topology, cfg.tracker_config(), cfg.seed)
    with open(out / "receipts.jsonl", "w") as receipts, open(out / "steps.jsonl", "w") as steps, \
            open(out / "beliefs.jsonl", "w") if cfg.write_beliefs else _Null() as beliefs:
        prober = LiveProber(addresses, cfg.epsilon, cfg.probe_timeout, cfg.max_retries, receipts,
                            cfg.probe_realtime)
        for _ in range(cfg.steps):
            rec = tracker.step(prober)
            steps.write(json.dumps({
                "t": rec.t,
                "path": rec.path,
                "rate_range": list(rec.rate_range),
                "windows": rec.n_windows,
                "converged": rec.converged,
                "ci": {k: [[c.lo, c.hi] for c in e.cis] for k, e in tracker.estimates.items()},
                "estimates": {k: {m: v.tolist() for m, v in e.values.items()} for k, e in tracker.estimates.items()},
            }) + "\n")
            steps.flush()
            if rec.slice_end and cfg.write_beliefs:
                tracker.beliefs.dump_jsonl(beliefs, tracker.n_slices)
    print(f"{cfg.steps} measurements, median wall time "
          f"{sorted(prober.wall_times)[len(prober.wall_times) // 2]:.3f} s")
    return EXIT_OK


class _Null:
    def __enter__(self):
        return None

    def __exit__(self, *exc):
        return False


def cmd_fit_alpha(cfg: RunConfig) -> int:
    if not cfg.input:
        raise ConfigError("input", "fit-alpha needs --input samples.csv")
    try:
        alpha, mse = fit_alpha(read_samples(cfg.input))
    except DegenerateDataError as exc:
        raise ConfigError("input", str(exc)) from None
    print(json.dumps({"alpha": alpha, "mse": mse}))
    return EXIT_OK


def cmd_analyze(cfg: RunConfig) -> int:
    from .simulator import curves_from_steps, read_jsonl, write_metric_csvs

    if not cfg.input:
        raise ConfigError("input", "analyze needs --input steps.jsonl")
    records = read_jsonl(cfg.input)
    if not records:
        raise ConfigError("input", f"{cfg.input} holds no step records")
    if "truth" not in records[0]:
        raise ConfigError("input", "step records carry no ground truth; only simulate logs can be scored")
    curves = curves_from_steps(records, cfg.gamma_cp, cfg.model())
    write_metric_csvs(curves, cfg.output_dir)
    for (kind, mode), cols in sorted(curves.items()):
        print(f"{kind:6s} {mode:14s} PS {cols['ps'][-1]:.6f}")
    return EXIT_OK


def cmd_probe_recv(args) -> int:
    from .probe import Receiver, write_receipt

    fh = open(args.log, "a") if args.log else sys.stdout
    started = time.monotonic()
    n = 0
    try:
        with Receiver(args.host, args.port, kernel_timestamps=not args.no_kernel_timestamps) as rx:
            print(f"listening on {rx.address[0]}:{rx.address[1]}", file=sys.stderr, flush=True)
            while not args.count or n < args.count:
                if args.duration and time.monotonic() - started > args.duration:
                    break
                try:
                    receipt = rx.receipts.get(timeout=0.1)
                except Exception:  # queue.Empty
                    continue
                write_receipt(fh, receipt)
                n += 1
    except KeyboardInterrupt:
        pass
    finally:
        if fh is not sys.stdout:
            fh.close()
    return EXIT_OK


def cmd_probe_send(args) -> int:
    from .probe import measure_path, write_receipt

    dest = parse_address(args.dest)
    spec = solve_chirp(args.rmin, args.rmax, args.k, args.kmin, 8.0 * args.packet_bytes)
    fh = open(args.log, "a") if args.log else None
    try:
        for i in range(args.count):
            res = measure_path(dest, spec, args.epsilon, args.timeout, t=i + 1, realtime=args.realtime)
            if fh is not None:
                write_receipt(fh, res)
            obs = res.observation
            print(json.dumps({
                "chirp_id": res.receipt.chirp_id,
                "wall_time": res.wall_time,
                "lost": int(res.receipt.n_lost),
                "windows": len(obs),
                "rates": [round(r, 3) for r in obs.rates.tolist()],
                "outcomes": obs.outcomes.tolist(),
            }), flush=True)
    finally:
        if fh is not None:
            fh.close()
    return EXIT_OK


COMMANDS = {
    "simulate": cmd_simulate,
    "track-live": cmd_track_live,
    "fit-alpha": cmd_fit_alpha,
    "analyze": cmd_analyze,
}


def main(argv: list[str] | None = None) -> int:
    from .probe import MeasurementError, PacingError

    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.WARNING - 10 * min(args.verbose, 2),
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        if args.command == "probe":
            return cmd_probe_recv(args) if args.probe_command == "recv" else cmd_probe_send(args)
        cfg = _config_from_args(args, args.command)
        return COMMANDS[args.command](cfg)
    except (ConfigError, TopologyError, ChirpError, PacingError) as exc:
        print(f"configuration error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except MeasurementError as exc:
        print(f"measurement failed: {exc}", file=sys.stderr)
        return EXIT_MEASUREMENT
    except OSError as exc:
        print(f"I/O error: {exc}", file=sys.stderr)
        return EXIT_IO


if __name__ == "__main__":
    sys.exit(main())
