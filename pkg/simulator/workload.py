"""
Request ingestion and synthesis: trace replay, Poisson and cyclic-burst
generators, and QoE-parameter assignment.
"""

import csv
import logging
import math
from dataclasses import dataclass
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np
from pydantic import BaseModel, Field, ValidationError, model_validator

from qoe import QoeParams
from utils import (
    DEFAULT_CYCLE_LEN_S,
    TTFT_FLOOR_S,
    TTFT_PREFILL_RATE,
    ConfigError,
    TraceFormatError,
    fmt_float,
)

logger = logging.getLogger(__name__)

TRACE_COLUMNS = [
    "arrival_s",
    "input_len",
    "output_len",
    "ttft_target_s",
    "consumption_speed_tps",
]
REQUIRED_COLUMNS = TRACE_COLUMNS[:3]

# ------------------------
# DEFAULT DISTRIBUTIONS
# ------------------------

# Reading/listening speed buckets (tokens/s -> weight). These are configuration,
# anchored on the 3.3 tok/s listening and 4.8 tok/s reading speeds.
DEFAULT_SPEED_BUCKETS: Tuple[Tuple[float, float], ...] = (
    (3.3, 0.25),
    (4.0, 0.25),
    (4.8, 0.35),
    (6.0, 0.15),
)

# (input mean, input std, output mean, output std) per request dataset
DATASET_MOMENTS: Dict[str, Tuple[float, float, float, float]] = {
    "sharegpt": (3171.0, 7943.0, 385.0, 300.0),
    "arxiv": (17855.0, 11401.0, 605.0, 153.0),
    "code": (675.0, 1552.0, 5423.0, 21293.0),
}


class TraceRecord(BaseModel):
    arrival_s: float = Field(ge=0)
    input_len: int = Field(ge=1)
    output_len: int = Field(ge=1)
    ttft_target_s: Optional[float] = Field(default=None, gt=0)
    consumption_speed_tps: Optional[float] = Field(default=None, gt=0)

    model_config = {"frozen": True}

    def qoe_params(self) -> QoeParams:
        if self.ttft_target_s is None or self.consumption_speed_tps is None:
            raise ValueError("record has no QoE parameters; run assign_qoe_params first")
        return QoeParams(self.ttft_target_s, self.consumption_speed_tps)


class BurstSpec(BaseModel):
    intensity: float = Field(default=2.0, ge=1.0)
    duration_frac: float = Field(default=0.35, gt=0.0, lt=1.0)
    cycle_len_s: float = Field(default=DEFAULT_CYCLE_LEN_S, gt=0)
    mean_rate_rps: float = Field(gt=0)

    @model_validator(mode="after")
    def _mass_conserved(self) -> "BurstSpec":
        if self.intensity * self.duration_frac > 1.0 + 1e-12:
            raise ValueError(
                f"intensity*duration_frac = {self.intensity * self.duration_frac:.3f} > 1: "
                "the non-burst rate would be negative"
            )
        return self

    @property
    def burst_rate(self) -> float:
        return self.intensity * self.mean_rate_rps

    @property
    def base_rate(self) -> float:
        rest = 1.0 - self.intensity * self.duration_frac
        return max(0.0, rest) / (1.0 - self.duration_frac) * self.mean_rate_rps


@dataclass(frozen=True)
class SpeedDistribution:
    speeds: Tuple[float, ...]
    weights: Tuple[float, ...]

    def __post_init__(self) -> None:
        if not self.speeds or len(self.speeds) != len(self.weights):
            raise ConfigError("speed distribution needs matching speeds and weights")
        if any(s <= 0 for s in self.speeds) or any(w < 0 for w in self.weights):
            raise ConfigError("speeds must be > 0 and weights >= 0")
        if sum(self.weights) <= 0:
            raise ConfigError("speed weights must not all be zero")

    @classmethod
    def default(cls) -> "SpeedDistribution":
        return cls(
            tuple(s for s, _ in DEFAULT_SPEED_BUCKETS),
            tuple(w for _, w in DEFAULT_SPEED_BUCKETS),
        )

    @classmethod
    def single(cls, speed: float) -> "SpeedDistribution":
        return cls((speed,), (1.0,))

    def sample(self, rng: np.random.Generator) -> float:
        if len(self.speeds) == 1:
            return float(self.speeds[0])
        p = np.asarray(self.weights, dtype=float)
        return float(rng.choice(np.asarray(self.speeds), p=p / p.sum()))


@dataclass(frozen=True)
class LengthDistribution:
    """Lognormal input/output lengths matching the given moments, clamped to [1, max_len]."""

    input_mean: float
    input_std: float
    output_mean: float
    output_std: float
    max_len: int = 32768

    def __post_init__(self) -> None:
        if min(self.input_mean, self.output_mean) <= 0 or min(self.input_std, self.output_std) < 0:
            raise ConfigError("length means must be > 0 and stds >= 0")
        if self.max_len < 2:
            raise ConfigError("max_len must be >= 2")

    @classmethod
    def preset(cls, name: str, max_len: int = 32768) -> "LengthDistribution":
        try:
            im, isd, om, osd = DATASET_MOMENTS[name]
        except KeyError as e:
            raise ConfigError(
                f"unknown dataset preset '{name}' (choose from {sorted(DATASET_MOMENTS)})"
            ) from e
        return cls(im, isd, om, osd, max_len)

    @staticmethod
    def _lognormal(rng: np.random.Generator, mean: float, std: float, size: int) -> np.ndarray:
        if std == 0:
            return np.full(size, mean)
        sigma2 = math.log1p((std / mean) ** 2)
        mu = math.log(mean) - sigma2 / 2.0
        return rng.lognormal(mu, math.sqrt(sigma2), size)

    def sample(self, rng: np.random.Generator, size: int) -> Tuple[np.ndarray, np.ndarray]:
        ins = self._lognormal(rng, self.input_mean, self.input_std, size)
        outs = self._lognormal(rng, self.output_mean, self.output_std, size)
        ins = np.clip(np.rint(ins), 1, self.max_len - 1).astype(int)
        outs = np.clip(np.rint(outs), 1, self.max_len - 1).astype(int)
        return ins, outs


# ------------------------
# QOE PARAMETERS
# ------------------------
def ttft_target_for(input_len: int) -> float:
    return max(input_len / TTFT_PREFILL_RATE, TTFT_FLOOR_S)


def assign_qoe_params(
    input_len: int, speed_dist: SpeedDistribution, rng: np.random.Generator
) -> QoeParams:
    if input_len < 1:
        raise ValueError(f"input_len must be >= 1, got {input_len}")
    return QoeParams(ttft_target_for(input_len), speed_dist.sample(rng))


def _with_qoe(
    record: TraceRecord, speed_dist: SpeedDistribution, rng: np.random.Generator
) -> TraceRecord:
    if record.ttft_target_s is not None and record.consumption_speed_tps is not None:
        return record
    params = assign_qoe_params(record.input_len, speed_dist, rng)
    return record.model_copy(
        update={
            "ttft_target_s": record.ttft_target_s or params.ttft_target,
            "consumption_speed_tps": record.consumption_speed_tps
            or params.consumption_speed,
        }
    )


# ------------------------
# TRACE FILES
# ------------------------
def load_trace(
    path: str,
    speed_dist: Optional[SpeedDistribution] = None,
    rng: Optional[np.random.Generator] = None,
) -> List[TraceRecord]:
    speed_dist = speed_dist or SpeedDistribution.default()
    rng = rng if rng is not None else np.random.default_rng(0)
    p = Path(path)
    if not p.exists():
        raise TraceFormatError(f"trace file not found: {path}")

    records: List[TraceRecord] = []
    with p.open(newline="", encoding="utf-8") as fh:
        reader = csv.DictReader(fh)
        header = reader.fieldnames or []
        missing = [c for c in REQUIRED_COLUMNS if c not in header]
        if missing:
            raise TraceFormatError(f"{path}: header is missing columns {missing}")
        for row in reader:
            line = reader.line_num
            cleaned = {k: (v.strip() if v is not None else "") for k, v in row.items() if k}
            cleaned = {k: v for k, v in cleaned.items() if v != "" and k in TRACE_COLUMNS}
            try:
                records.append(TraceRecord.model_validate(cleaned))
            except ValidationError as e:
                first = e.errors()[0]
                field = ".".join(str(x) for x in first.get("loc", ()))
                raise TraceFormatError(
                    f"{path}: line {line}: invalid {field or 'row'}: {first.get('msg')}"
                ) from e

    arrivals = [r.arrival_s for r in records]
    if arrivals != sorted(arrivals):
        logger.warning(f"Trace {path} is not sorted by arrival; sorting")
        records.sort(key=lambda r: r.arrival_s)

    return [_with_qoe(r, speed_dist, rng) for r in records]


def save_trace(records: Sequence[TraceRecord], path: str) -> None:
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(TRACE_COLUMNS)
        for r in records:
            writer.writerow(
                [
                    fmt_float(r.arrival_s),
                    r.input_len,
                    r.output_len,
                    fmt_float(r.ttft_target_s),
                    fmt_float(r.consumption_speed_tps),
                ]
            )


# ------------------------
# GENERATORS
# ------------------------
def _poisson_arrivals(
    rate: float, start: float, end: float, rng: np.random.Generator
) -> np.ndarray:
    if rate <= 0 or end <= start:
        return np.empty(0)
    out: List[np.ndarray] = []
    t = start
    batch = max(16, int(rate * (end - start) * 1.2) + 16)
    while True:
        gaps = rng.exponential(1.0 / rate, batch)
        times = t + np.cumsum(gaps)
        keep = times[times < end]
        out.append(keep)
        if keep.size < times.size:
            break
        t = float(times[-1])
    return np.concatenate(out)


def _records(
    arrivals: np.ndarray,
    len_dist: LengthDistribution,
    speed_dist: SpeedDistribution,
    rng: np.random.Generator,
) -> List[TraceRecord]:
    ins, outs = len_dist.sample(rng, arrivals.size)
    records = []
    for t, i, o in zip(arrivals, ins, outs):
        params = assign_qoe_params(int(i), speed_dist, rng)
        records.append(
            TraceRecord(
                arrival_s=float(t),
                input_len=int(i),
                output_len=int(o),
                ttft_target_s=params.ttft_target,
                consumption_speed_tps=params.consumption_speed,
            )
        )
    return records


def gen_poisson(
    rate_rps: float,
    duration_s: float,
    len_dist: LengthDistribution,
    rng: np.random.Generator,
    speed_dist: Optional[SpeedDistribution] = None,
) -> List[TraceRecord]:
    if rate_rps <= 0:
        raise ConfigError(f"rate must be > 0, got {rate_rps}")
    arrivals = _poisson_arrivals(rate_rps, 0.0, duration_s, rng)
    return _records(arrivals, len_dist, speed_dist or SpeedDistribution.default(), rng)


def burst_phases(burst: BurstSpec, duration_s: float) -> List[Tuple[float, float, float]]:
    """(start, end, rate) for each phase; every cycle opens with its burst."""
    phases = []
    burst_len = burst.duration_frac * burst.cycle_len_s
    t = 0.0
    while t < duration_s:
        b_end = min(t + burst_len, duration_s)
        phases.append((t, b_end, burst.burst_rate))
        c_end = min(t + burst.cycle_len_s, duration_s)
        if c_end > b_end:
            phases.append((b_end, c_end, burst.base_rate))
        t += burst.cycle_len_s
    return phases


def gen_cyclic_burst(
    burst: BurstSpec,
    duration_s: float,
    len_dist: LengthDistribution,
    rng: np.random.Generator,
    speed_dist: Optional[SpeedDistribution] = None,
) -> List[TraceRecord]:
    chunks = [
        _poisson_arrivals(rate, start, end, rng)
        for start, end, rate in burst_phases(burst, duration_s)
    ]
    arrivals = np.concatenate(chunks) if chunks else np.empty(0)
    return _records(arrivals, len_dist, speed_dist or SpeedDistribution.default(), rng)


def make_burst_spec(
    intensity: float, duration_frac: float, cycle_len_s: float, mean_rate_rps: float
) -> BurstSpec:
    try:
        return BurstSpec(
            intensity=intensity,
            duration_frac=duration_frac,
            cycle_len_s=cycle_len_s,
            mean_rate_rps=mean_rate_rps,
        )
    except ValidationError as e:
        raise ConfigError(f"invalid burst parameters: {e.errors()[0].get('msg')}") from e
