import argparse
import logging
import os
import sys
from concurrent.futures import ProcessPoolExecutor
from typing import Any, Dict, List, Optional, Sequence, Tuple

import numpy as np
from rich.console import Console
from rich.table import Table

from engine import PacerOptions, run
from policies import canonical_name, load_policy
from report import COMPARE_METRICS, SimulationReport, cdf, compare, read_requests
from utils import (
    EXIT_CONFIG_ERROR,
    EXIT_OK,
    EXIT_RUNTIME_ERROR,
    ConfigError,
    SimulationError,
    TraceFormatError,
    configure_logging,
    fmt_float,
    parse_float_list,
    parse_name_list,
)
from validator import GAIN_KEYS, QOE_AWARE_KEYS, ExperimentConfig, is_valid_report, load_config
from workload import TraceRecord, gen_cyclic_burst, gen_poisson, load_trace

logger = logging.getLogger(__name__)

CALIBRATE_QUEUE_BOUND = 5.0
CALIBRATE_MAX_DOUBLINGS = 12
SAVINGS_QOE_TARGET = 0.95
SAVINGS_POLICIES = ("andes", "fcfs")


# ------------------------
# EXPERIMENTS
# ------------------------
def build_workload(cfg: ExperimentConfig) -> List[TraceRecord]:
    rng = np.random.default_rng(cfg.seed)
    speeds = cfg.speed_distribution()
    if cfg.workload == "trace":
        return load_trace(cfg.trace_path, speeds, rng)
    lengths = cfg.length_distribution()
    if cfg.workload == "poisson":
        return gen_poisson(cfg.rate_rps, cfg.duration, lengths, rng, speeds)
    return gen_cyclic_burst(cfg.burst_spec(), cfg.duration, lengths, rng, speeds)


def simulate(cfg: ExperimentConfig) -> SimulationReport:
    profile = cfg.profile()
    policy = load_policy(cfg.policy_name, cfg.policy_settings())
    workload = build_workload(cfg)
    options = PacerOptions(
        chunk_size=cfg.chunk_size,
        network_delay=cfg.network_delay,
        surplus_staleness=cfg.surplus_staleness,
        bypass=cfg.pacer_bypass,
    )
    report = run(workload, policy, profile, cfg.until, options, record_surplus=cfg.verbose)
    report.seed = cfg.seed
    if not is_valid_report(report):
        raise SimulationError("simulation produced an inconsistent report")
    return report


def run_experiment(cfg: ExperimentConfig) -> Tuple[SimulationReport, Dict[str, str]]:
    report = simulate(cfg)
    paths = report.write(cfg.resolved_output_dir(), verbose=cfg.verbose)
    logger.info(f"Wrote {', '.join(sorted(paths.values()))}")
    return report, paths


def _sweep_one(cfg_values: Dict[str, Any]) -> str:
    configure_logging(bool(cfg_values.get("verbose")))
    cfg = ExperimentConfig.model_validate(cfg_values)
    report, _ = run_experiment(cfg)
    return report.one_line()


def sweep(cfg: ExperimentConfig, key: str, values: Sequence[Any], jobs: int = 1) -> List[str]:
    """One run per value of `key`, each into <output_dir>/<key>=<value>."""
    if key not in ExperimentConfig.model_fields:
        raise ConfigError(f"unknown sweep key '{key}'")
    base = cfg.model_dump(exclude_unset=True)
    root = cfg.resolved_output_dir()
    runs = []
    for v in values:
        item = dict(base)
        item[key] = v
        item["output_dir"] = os.path.join(root, f"{key}={v}")
        try:
            ExperimentConfig.model_validate(item)
        except ValueError as e:
            raise ConfigError(f"sweep value {key}={v} is invalid: {e}") from e
        runs.append(item)

    if jobs <= 1:
        return [_sweep_one(item) for item in runs]
    with ProcessPoolExecutor(max_workers=jobs) as pool:
        return list(pool.map(_sweep_one, runs))


def queue_is_bounded(report: SimulationReport, bound: float = CALIBRATE_QUEUE_BOUND) -> bool:
    """Mean waiting-queue length over the last quarter of the run stays within `bound`."""
    if not report.timeseries:
        return True
    cut = report.end_time * 0.75
    tail = [s.queue_len + s.preempted for s in report.timeseries if s.time >= cut]
    return not tail or float(np.mean(tail)) <= bound


def calibrate(
    cfg: ExperimentConfig, iterations: int = 8, bound: float = CALIBRATE_QUEUE_BOUND
) -> float:
    """Highest Poisson rate at which FCFS keeps the waiting queue bounded."""
    base = cfg.model_dump(exclude_unset=True)
    for k in ("mean_rate_rps", "intensity", "duration_frac", "cycle_len_s", "trace_path"):
        base.pop(k, None)
    for k in QOE_AWARE_KEYS | GAIN_KEYS:
        base.pop(k, None)
    base.update({"workload": "poisson", "policy": "fcfs"})
    base.setdefault("until", cfg.duration)
    if base.get("seed") is None:
        base["seed"] = 0

    def bounded(rate: float) -> bool:
        trial = ExperimentConfig.model_validate({**base, "rate_rps": rate})
        ok = queue_is_bounded(simulate(trial), bound)
        logger.info(f"Calibrate: rate {rate:.4f} req/s -> {'bounded' if ok else 'unbounded'}")
        return ok

    lo, hi = 0.0, float(base.get("rate_rps") or 1.0)
    for _ in range(CALIBRATE_MAX_DOUBLINGS):
        if not bounded(hi):
            break
        lo, hi = hi, hi * 2
    else:
        return hi
    for _ in range(iterations):
        mid = (lo + hi) / 2
        if mid <= 0:
            break
        if bounded(mid):
            lo = mid
        else:
            hi = mid
    return lo


def _policy_config(base: Dict[str, Any], policy: str) -> Dict[str, Any]:
    """`base` with the options the given policy does not accept removed."""
    item = dict(base, policy=policy)
    name = canonical_name(policy)
    if name != "qoe_aware":
        for k in QOE_AWARE_KEYS:
            item.pop(k, None)
    if name == "fcfs":
        for k in GAIN_KEYS:
            item.pop(k, None)
    return item


def meets_target(report: SimulationReport, target: float = SAVINGS_QOE_TARGET) -> bool:
    avg = report.summary()["avg_qoe"]
    return avg is not None and avg >= target


def min_capacity(
    cfg: ExperimentConfig,
    target: float = SAVINGS_QOE_TARGET,
    iterations: int = 8,
) -> Optional[int]:
    """
    Smallest KV capacity, in tokens, at which `cfg` reaches an average QoE of
    `target`, found by doubling then bisecting. No capacity below the largest
    request is tried, so nothing is rejected at ingestion. None when doubling
    never reaches the target.
    """
    base = cfg.model_dump(exclude_unset=True)
    largest = max((r.input_len + r.output_len for r in build_workload(cfg)), default=1)

    def enough(capacity: int) -> bool:
        trial = ExperimentConfig.model_validate({**base, "kv_capacity": capacity})
        ok = meets_target(simulate(trial), target)
        logger.info(
            f"Savings: {cfg.policy_name} at {capacity} KV tokens -> "
            f"{'meets' if ok else 'misses'} QoE {target}"
        )
        return ok

    lo, hi = largest - 1, max(largest, cfg.profile().kv_capacity)
    for _ in range(CALIBRATE_MAX_DOUBLINGS):
        if enough(hi):
            break
        lo, hi = hi, hi * 2
    else:
        return None
    for _ in range(iterations):
        if hi - lo <= 1:
            break
        mid = (lo + hi) // 2
        if enough(mid):
            hi = mid
        else:
            lo = mid
    return hi


def resource_savings(
    cfg: ExperimentConfig,
    policies: Sequence[str] = SAVINGS_POLICIES,
    target: float = SAVINGS_QOE_TARGET,
    iterations: int = 8,
) -> Tuple[Dict[str, Optional[int]], Dict[str, Optional[float]]]:
    """
    Minimum KV capacity per policy for an average QoE of `target`, and how much
    less of it the first policy needs than each of the others
    (1 - its capacity / the other's capacity).
    """
    if not 0 < target <= 1:
        raise ConfigError(f"QoE target must be in (0, 1], got {target}")
    if len(policies) < 2:
        raise ConfigError("savings needs a policy and at least one baseline")
    base = cfg.model_dump(exclude_unset=True)
    capacities: Dict[str, Optional[int]] = {}
    for name in policies:
        try:
            trial = ExperimentConfig.model_validate(_policy_config(base, name))
        except ValueError as e:
            raise ConfigError(f"invalid config for policy '{name}': {e}") from e
        capacities[name] = min_capacity(trial, target, iterations)

    subject = capacities[policies[0]]
    savings: Dict[str, Optional[float]] = {}
    for name in policies[1:]:
        other = capacities[name]
        savings[name] = None if subject is None or other is None else 1.0 - subject / other
    return capacities, savings


# ------------------------
# CLI
# ------------------------
def _add_experiment_args(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", help="JSON config file; flags override its keys")
    g = p.add_argument_group("workload")
    g.add_argument("--workload", choices=["trace", "poisson", "cyclic-burst"])
    g.add_argument("--trace", dest="trace_path", help="Trace CSV (workload 'trace')")
    g.add_argument("--seed", type=int)
    g.add_argument("--duration", dest="duration_s", type=float, help="Generated trace length, s")
    g.add_argument("--rate", dest="rate_rps", type=float, help="Poisson rate, req/s")
    g.add_argument("--mean-rate", dest="mean_rate_rps", type=float, help="Cyclic-burst mean rate, req/s")
    g.add_argument("--intensity", type=float)
    g.add_argument("--duration-frac", type=float)
    g.add_argument("--cycle-len", dest="cycle_len_s", type=float)
    g.add_argument("--dataset", help="Length preset: sharegpt, arxiv, code")
    g.add_argument("--input-mean", type=float)
    g.add_argument("--input-std", type=float)
    g.add_argument("--output-mean", type=float)
    g.add_argument("--output-std", type=float)
    g.add_argument("--max-len", type=int)
    g.add_argument("--speeds", type=parse_float_list, help="Reading speeds, tok/s, comma separated")
    g.add_argument("--speed-weights", type=parse_float_list)

    s = p.add_argument_group("scheduling")
    s.add_argument("--policy", help="andes (qoe_aware), fcfs, lqsf")
    s.add_argument("--solver", choices=["greedy", "dp"])
    s.add_argument("--objective", choices=["average", "maxmin", "perfect-count"])
    s.add_argument("--delta-t", type=float)
    s.add_argument("--watermark", type=float)
    s.add_argument("--greedy-skip", action="store_const", const=True)
    s.add_argument("--dp-budget", type=float)
    s.add_argument("--no-refiner", dest="refiner", action="store_const", const=False)
    s.add_argument(
        "--overhead-budget", type=float, help="Share of engine time preemption round trips may take"
    )

    e = p.add_argument_group("engine")
    e.add_argument("--profile", dest="profile_path", help="Latency profile JSON")
    e.add_argument("--kv-capacity", type=int)
    e.add_argument("--chunk-size", type=int)
    e.add_argument("--network-delay", type=float)
    e.add_argument("--surplus-staleness", type=float)
    e.add_argument("--pacer-bypass", action="store_const", const=True)
    e.add_argument("--until", type=float, help="Stop the simulation at this time, s")

    p.add_argument("--output-dir", help="Artifact directory (default $STREAMSCHED_OUTPUT_DIR or ./runs)")
    p.add_argument("--verbose", action="store_const", const=True)


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="streamsched", description="QoE-aware LLM text-streaming serving simulator"
    )
    sub = parser.add_subparsers(dest="command", required=True)

    _add_experiment_args(sub.add_parser("run", help="Run one experiment"))

    p = sub.add_parser("compare", help="Compare run summaries side by side")
    p.add_argument("summaries", nargs="+", help="summary.json files or run directories")

    p = sub.add_parser("cdf", help="Empirical CDF of a per-request metric")
    p.add_argument("report", help="requests.csv or a run directory")
    p.add_argument("--metric", choices=["qoe", "ttft", "tds"], default="qoe")

    p = sub.add_parser("sweep", help="Run one experiment per value of a config key")
    _add_experiment_args(p)
    p.add_argument("--key", required=True)
    p.add_argument("--values", required=True, type=parse_float_list)
    p.add_argument("--jobs", type=int, default=1)

    p = sub.add_parser("calibrate", help="Find the FCFS-sustainable Poisson rate")
    _add_experiment_args(p)
    p.add_argument("--iterations", type=int, default=8)
    p.add_argument("--queue-bound", type=float, default=CALIBRATE_QUEUE_BOUND)

    p = sub.add_parser(
        "savings", help="KV capacity each policy needs for a target average QoE"
    )
    _add_experiment_args(p)
    p.add_argument(
        "--policies",
        type=parse_name_list,
        default=list(SAVINGS_POLICIES),
        help="Policy under test first, then baselines (default andes,fcfs)",
    )
    p.add_argument("--target", type=float, default=SAVINGS_QOE_TARGET)
    p.add_argument("--iterations", type=int, default=8)
    return parser


EXPERIMENT_EXTRAS = {
    "command",
    "config",
    "key",
    "values",
    "jobs",
    "iterations",
    "queue_bound",
    "summaries",
    "report",
    "metric",
    "policies",
    "target",
}


def _config_from_args(
    args: argparse.Namespace, defaults: Optional[Dict[str, Any]] = None
) -> ExperimentConfig:
    values = {k: v for k, v in vars(args).items() if k not in EXPERIMENT_EXTRAS}
    return load_config(values, args.config, defaults)


def _print_compare(paths: Sequence[str], console: Console) -> None:
    labels, rows = compare(paths)
    table = Table(title="Policy comparison")
    table.add_column("metric")
    for label in labels:
        table.add_column(label, justify="right")
    for label in labels:
        table.add_column(f"ratio {label}", justify="right")
    for metric, row in zip(COMPARE_METRICS, rows):
        table.add_row(metric, *[("" if v is None else f"{v:.4f}") for v in row])
    console.print(table)


def _print_savings(
    capacities: Dict[str, Optional[int]], target: float, console: Console
) -> None:
    table = Table(title=f"KV capacity for average QoE >= {target}")
    table.add_column("policy")
    table.add_column("kv_capacity", justify="right")
    for name, cap in capacities.items():
        table.add_row(name, "unreachable" if cap is None else str(cap))
    console.print(table)


def main(argv: Optional[Sequence[str]] = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as e:
        return EXIT_OK if e.code in (0, None) else EXIT_CONFIG_ERROR
    configure_logging(bool(getattr(args, "verbose", False)))
    console = Console()

    try:
        if args.command == "run":
            cfg = _config_from_args(args)
            report, _ = run_experiment(cfg)
            print(report.one_line())
        elif args.command == "compare":
            _print_compare(args.summaries, console)
        elif args.command == "cdf":
            table = Table(title=f"{args.metric} CDF")
            table.add_column("value", justify="right")
            table.add_column("fraction", justify="right")
            for value, frac in cdf(read_requests(args.report), args.metric):
                table.add_row(fmt_float(value), fmt_float(frac))
            console.print(table)
        elif args.command == "sweep":
            cfg = _config_from_args(args)
            values = [int(v) if args.key in ("seed", "chunk_size", "kv_capacity") else v for v in args.values]
            for line in sweep(cfg, args.key, values, args.jobs):
                print(line)
        elif args.command == "calibrate":
            cfg = _config_from_args(
                args, {"workload": "poisson", "rate_rps": 1.0, "policy": "fcfs", "seed": 0}
            )
            rate = calibrate(cfg, args.iterations, args.queue_bound)
            print(f"sustainable rate: {rate:.4f} req/s")
        elif args.command == "savings":
            cfg = _config_from_args(args)
            capacities, savings = resource_savings(
                cfg, args.policies, args.target, args.iterations
            )
            _print_savings(capacities, args.target, console)
            subject = args.policies[0]
            for name, saving in savings.items():
                shown = "n/a" if saving is None else f"{saving * 100:.1f}%"
                print(f"resource savings of {subject} vs {name}: {shown}")
        return EXIT_OK
    except (ConfigError, TraceFormatError) as ce:
        print(f"Error: {ce}", file=sys.stderr)
        return EXIT_CONFIG_ERROR
    except Exception as e:
        print(f"Unexpected error: {e}", file=sys.stderr)
        return EXIT_RUNTIME_ERROR


if __name__ == "__main__":
    sys.exit(main())
