"""
Simulation results and their on-disk form.

  requests.csv    one row per request
  timeseries.csv  time, queue_len, preempted, running, kv_frac, cpu_kv
  summary.json    aggregate statistics, all recomputable from the two CSVs
  surplus.csv     time, request id, surplus seconds (verbose runs only)
"""

import csv
import json
import logging
import os
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Any, Dict, List, Optional, Sequence, Tuple

import numpy as np

from qoe import QoeParams
from utils import ConfigError, fmt_float, safe_div

logger = logging.getLogger(__name__)

REQUEST_COLUMNS = [
    "id",
    "arrival",
    "input_len",
    "output_len",
    "generated",
    "state",
    "ttft",
    "qoe",
    "avg_tds",
    "preemptions",
    "finish_time",
    "ttft_target",
    "consumption_speed",
]
TIMESERIES_COLUMNS = ["time", "queue_len", "preempted", "running", "kv_frac", "cpu_kv"]
SUMMARY_KEYS = [
    "policy",
    "seed",
    "n_requests",
    "n_finished",
    "n_rejected",
    "avg_qoe",
    "frac_qoe_ge_0_95",
    "avg_ttft",
    "p50_ttft",
    "p90_ttft",
    "p99_ttft",
    "avg_tds",
    "peak_queue",
    "peak_preempted",
    "peak_cpu_kv",
    "preemptions_per_request",
]
# rows shown by `compare`, in order
COMPARE_METRICS = [
    "avg_qoe",
    "frac_qoe_ge_0_95",
    "avg_ttft",
    "p50_ttft",
    "p90_ttft",
    "p99_ttft",
    "avg_tds",
    "peak_queue",
    "preemptions_per_request",
]
CDF_METRICS = {"qoe": "qoe", "ttft": "ttft", "tds": "avg_tds"}
QOE_GOOD = 0.95


@dataclass(frozen=True)
class TimeSample:
    time: float
    queue_len: int  # arrived, never started
    running: int
    kv_frac: float
    cpu_kv: int
    preempted: int = 0  # waiting to resume after a preemption


@dataclass(frozen=True)
class RequestResult:
    id: int
    arrival: float
    input_len: int
    output_len: int
    generated: int
    state: str  # finished | unfinished | rejected
    ttft: Optional[float]
    qoe: Optional[float]
    avg_tds: Optional[float]
    preemptions: int
    finish_time: Optional[float]
    ttft_target: float
    consumption_speed: float

    @classmethod
    def rejected(
        cls, rid: int, arrival: float, input_len: int, output_len: int, params: QoeParams
    ) -> "RequestResult":
        return cls(
            id=rid,
            arrival=arrival,
            input_len=input_len,
            output_len=output_len,
            generated=0,
            state="rejected",
            ttft=None,
            qoe=None,
            avg_tds=None,
            preemptions=0,
            finish_time=None,
            ttft_target=params.ttft_target,
            consumption_speed=params.consumption_speed,
        )

    def row(self) -> List[str]:
        out = []
        for key, value in asdict(self).items():
            if isinstance(value, float) or value is None:
                out.append(fmt_float(value))
            else:
                out.append(str(value))
        return out


def _mean(values: Sequence[float]) -> Optional[float]:
    return float(np.mean(values)) if len(values) else None


def _pct(values: Sequence[float], q: float) -> Optional[float]:
    return float(np.percentile(values, q)) if len(values) else None


def summarize(
    requests: Sequence[RequestResult],
    timeseries: Sequence[TimeSample],
    policy: str = "",
    seed: Optional[int] = None,
) -> Dict[str, Any]:
    served = [r for r in requests if r.state != "rejected"]
    qoes = [r.qoe for r in served if r.qoe is not None]
    ttfts = [r.ttft for r in served if r.ttft is not None]
    tds = [r.avg_tds for r in served if r.avg_tds is not None]
    return {
        "policy": policy,
        "seed": seed,
        "n_requests": len(requests),
        "n_finished": sum(1 for r in requests if r.state == "finished"),
        "n_rejected": sum(1 for r in requests if r.state == "rejected"),
        "avg_qoe": _mean(qoes),
        "frac_qoe_ge_0_95": safe_div(sum(1 for q in qoes if q >= QOE_GOOD), len(qoes)),
        "avg_ttft": _mean(ttfts),
        "p50_ttft": _pct(ttfts, 50),
        "p90_ttft": _pct(ttfts, 90),
        "p99_ttft": _pct(ttfts, 99),
        "avg_tds": _mean(tds),
        "peak_queue": max((s.queue_len for s in timeseries), default=0),
        "peak_preempted": max((s.preempted for s in timeseries), default=0),
        "peak_cpu_kv": max((s.cpu_kv for s in timeseries), default=0),
        "preemptions_per_request": safe_div(
            sum(r.preemptions for r in served), len(served)
        ),
    }


@dataclass
class SimulationReport:
    requests: List[RequestResult] = field(default_factory=list)
    timeseries: List[TimeSample] = field(default_factory=list)
    surplus: List[Tuple[float, int, float]] = field(default_factory=list)
    policy: str = ""
    end_time: float = 0.0
    seed: Optional[int] = None

    def summary(self) -> Dict[str, Any]:
        return summarize(self.requests, self.timeseries, self.policy, self.seed)

    def one_line(self) -> str:
        s = self.summary()

        def f(v: Optional[float]) -> str:
            return "n/a" if v is None else f"{v:.4f}"

        return (
            f"{s['policy']}: avg_qoe={f(s['avg_qoe'])} avg_ttft={f(s['avg_ttft'])}s "
            f"avg_tds={f(s['avg_tds'])}tok/s peak_queue={s['peak_queue']}"
        )

    def write(self, out_dir: str, verbose: bool = False) -> Dict[str, str]:
        """Writes every artifact through a temp file so a crash never leaves half a CSV."""
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        paths = {
            "requests": str(out / "requests.csv"),
            "timeseries": str(out / "timeseries.csv"),
            "summary": str(out / "summary.json"),
        }
        _write_csv(paths["requests"], REQUEST_COLUMNS, (r.row() for r in self.requests))
        _write_csv(
            paths["timeseries"],
            TIMESERIES_COLUMNS,
            (
                [
                    fmt_float(s.time),
                    str(s.queue_len),
                    str(s.preempted),
                    str(s.running),
                    fmt_float(s.kv_frac),
                    str(s.cpu_kv),
                ]
                for s in self.timeseries
            ),
        )
        if verbose:
            paths["surplus"] = str(out / "surplus.csv")
            _write_csv(
                paths["surplus"],
                ["time", "id", "surplus_s"],
                ([fmt_float(t), str(i), fmt_float(v)] for t, i, v in self.surplus),
            )
        _atomic_write(paths["summary"], json.dumps(self.summary(), indent=2) + "\n")
        return paths


def _atomic_write(path: str, text: str) -> None:
    tmp = f"{path}.tmp"
    try:
        with open(tmp, "w", encoding="utf-8", newline="") as fh:
            fh.write(text)
        os.replace(tmp, path)
    finally:
        if os.path.exists(tmp):
            os.unlink(tmp)
            logger.info(f"Cleaned up temporary file: {tmp}")


def _write_csv(path: str, header: List[str], rows) -> None:
    tmp = f"{path}.tmp"
    try:
        with open(tmp, "w", encoding="utf-8", newline="") as fh:
            writer = csv.writer(fh, lineterminator="\n")
            writer.writerow(header)
            writer.writerows(rows)
        os.replace(tmp, path)
    finally:
        if os.path.exists(tmp):
            os.unlink(tmp)
            logger.info(f"Cleaned up temporary file: {tmp}")


# ------------------------
# READING BACK
# ------------------------
def _opt_float(raw: str) -> Optional[float]:
    return float(raw) if raw not in ("", None) else None


def read_requests(path: str) -> List[RequestResult]:
    p = Path(path)
    if p.is_dir():
        p = p / "requests.csv"
    if not p.exists():
        raise ConfigError(f"per-request CSV not found: {p}")
    out: List[RequestResult] = []
    with p.open(newline="", encoding="utf-8") as fh:
        reader = csv.DictReader(fh)
        if reader.fieldnames != REQUEST_COLUMNS:
            raise ConfigError(f"{p} does not have the per-request CSV header")
        for row in reader:
            out.append(
                RequestResult(
                    id=int(row["id"]),
                    arrival=float(row["arrival"]),
                    input_len=int(row["input_len"]),
                    output_len=int(row["output_len"]),
                    generated=int(row["generated"]),
                    state=row["state"],
                    ttft=_opt_float(row["ttft"]),
                    qoe=_opt_float(row["qoe"]),
                    avg_tds=_opt_float(row["avg_tds"]),
                    preemptions=int(row["preemptions"]),
                    finish_time=_opt_float(row["finish_time"]),
                    ttft_target=float(row["ttft_target"]),
                    consumption_speed=float(row["consumption_speed"]),
                )
            )
    return out


def load_summary(path: str) -> Dict[str, Any]:
    p = Path(path)
    if p.is_dir():
        p = p / "summary.json"
    try:
        doc = json.loads(p.read_text(encoding="utf-8"))
    except FileNotFoundError as e:
        raise ConfigError(f"summary not found: {p}") from e
    except json.JSONDecodeError as e:
        raise ConfigError(f"summary {p} is not valid JSON: {e}") from e
    if not isinstance(doc, dict):
        raise ConfigError(f"summary {p} is not a JSON object")
    missing = [k for k in SUMMARY_KEYS if k not in doc]
    if missing:
        raise ConfigError(f"summary {p} does not match the schema; missing {missing}")
    return doc


# ------------------------
# COMPARE / CDF
# ------------------------
def compare(paths: Sequence[str]) -> Tuple[List[str], List[List[Optional[float]]]]:
    """
    Returns (labels, rows): one row per metric in COMPARE_METRICS holding each
    report's value followed by its ratio to the first report.
    """
    if len(paths) < 2:
        raise ConfigError("compare needs at least two summaries")
    docs = [load_summary(p) for p in paths]
    labels = [f"{d.get('policy') or '?'} ({Path(p).name})" for d, p in zip(docs, paths)]
    rows: List[List[Optional[float]]] = []
    for metric in COMPARE_METRICS:
        values = [d[metric] for d in docs]
        base = values[0]
        ratios = [
            None if v is None or base in (None, 0) else v / base for v in values
        ]
        rows.append(values + ratios)
    return labels, rows


def cdf(requests: Sequence[RequestResult], metric: str) -> List[Tuple[float, float]]:
    """Empirical CDF at every distinct value of `metric`."""
    column = CDF_METRICS.get(metric)
    if column is None:
        raise ConfigError(f"unknown CDF metric '{metric}' (choose from {', '.join(CDF_METRICS)})")
    values = np.array(
        [getattr(r, column) for r in requests if getattr(r, column) is not None], dtype=float
    )
    if values.size == 0:
        return []
    uniq, counts = np.unique(values, return_counts=True)
    frac = np.cumsum(counts) / values.size
    return [(float(v), float(f)) for v, f in zip(uniq, frac)]
