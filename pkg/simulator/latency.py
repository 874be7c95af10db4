"""
Cost models for the simulated executor.

Decode-iteration latency depends on batch size only (total context length tracks
batch size almost perfectly, so it is dropped from the model). Prefill cost is
linear in prompt length. Preemption either swaps KV state over a fixed bandwidth
or drops it and pays one prefill on resume.
"""

import json
import logging
import math
from dataclasses import dataclass
from enum import Enum
from pathlib import Path
from typing import List, Tuple

import numpy as np
from pydantic import BaseModel, Field, ValidationError, field_validator

from utils import ConfigError

logger = logging.getLogger(__name__)

# tau(B) = 0.02 + 0.0008 * B seconds; synthetic, not measured on hardware
DEFAULT_DECODE_BASE_S = 0.02
DEFAULT_DECODE_SLOPE_S = 0.0008
DEFAULT_MAX_PROFILED_BATCH = 1024
DEFAULT_PREFILL_THROUGHPUT = 5000.0
DEFAULT_SWAP_BANDWIDTH = 20000.0
DEFAULT_KV_CAPACITY = 65536


class PreemptMechanism(str, Enum):
    SWAP = "swap"
    RECOMPUTE = "recompute"


@dataclass(frozen=True)
class LatencyProfile:
    decode_points: Tuple[Tuple[int, float], ...]
    prefill_throughput: float  # tokens / second
    swap_bandwidth: float  # KV tokens moved / second
    kv_capacity: int  # M, token slots

    def __post_init__(self) -> None:
        if not self.decode_points:
            raise ConfigError("decode_points must not be empty")
        sizes = [b for b, _ in self.decode_points]
        lats = [t for _, t in self.decode_points]
        if sizes != sorted(sizes) or len(set(sizes)) != len(sizes):
            raise ConfigError("decode_points must be strictly increasing in batch size")
        if any(b < 1 for b in sizes):
            raise ConfigError("decode_points batch sizes must be >= 1")
        if any(t < 0 for t in lats) or lats != sorted(lats):
            raise ConfigError("decode latencies must be >= 0 and nondecreasing")
        if not self.prefill_throughput > 0:
            raise ConfigError("prefill_throughput must be > 0")
        if not self.swap_bandwidth > 0:
            raise ConfigError("swap_bandwidth must be > 0")
        if not self.kv_capacity > 0:
            raise ConfigError("kv_capacity must be > 0")
        # cached arrays for interpolation
        object.__setattr__(self, "_xs", np.asarray(sizes, dtype=float))
        object.__setattr__(self, "_ys", np.asarray(lats, dtype=float))

    def with_capacity(self, kv_capacity: int) -> "LatencyProfile":
        return LatencyProfile(
            self.decode_points, self.prefill_throughput, self.swap_bandwidth, kv_capacity
        )


def default_profile(kv_capacity: int = DEFAULT_KV_CAPACITY) -> LatencyProfile:
    points = tuple(
        (b, DEFAULT_DECODE_BASE_S + DEFAULT_DECODE_SLOPE_S * b)
        for b in (1, DEFAULT_MAX_PROFILED_BATCH)
    )
    return LatencyProfile(
        decode_points=points,
        prefill_throughput=DEFAULT_PREFILL_THROUGHPUT,
        swap_bandwidth=DEFAULT_SWAP_BANDWIDTH,
        kv_capacity=kv_capacity,
    )


# ------------------------
# PROFILE FILE
# ------------------------
class ProfileFile(BaseModel):
    """JSON document: decode_points [[B, seconds], ...] plus three scalars."""

    decode_points: List[Tuple[int, float]] = Field(min_length=1)
    prefill_throughput: float = Field(gt=0)
    swap_bandwidth: float = Field(gt=0)
    kv_capacity: int = Field(gt=0)

    @field_validator("decode_points")
    @classmethod
    def _sorted(cls, points: List[Tuple[int, float]]) -> List[Tuple[int, float]]:
        return sorted(points)


def load_profile(path: str) -> LatencyProfile:
    try:
        raw = json.loads(Path(path).read_text(encoding="utf-8"))
        doc = ProfileFile.model_validate(raw)
    except FileNotFoundError as e:
        raise ConfigError(f"latency profile not found: {path}") from e
    except json.JSONDecodeError as e:
        raise ConfigError(f"latency profile {path} is not valid JSON: {e}") from e
    except ValidationError as e:
        raise ConfigError(f"latency profile {path} is invalid: {e}") from e
    profile = LatencyProfile(
        decode_points=tuple((int(b), float(t)) for b, t in doc.decode_points),
        prefill_throughput=doc.prefill_throughput,
        swap_bandwidth=doc.swap_bandwidth,
        kv_capacity=doc.kv_capacity,
    )
    logger.info(f"Loaded latency profile {path} ({len(profile.decode_points)} points)")
    return profile


# ------------------------
# COST FUNCTIONS
# ------------------------
def decode_latency(profile: LatencyProfile, batch_size: int) -> float:
    """Piecewise linear; flat past the last point, extended through the first two below the first."""
    xs: np.ndarray = profile._xs  # type: ignore[attr-defined]
    ys: np.ndarray = profile._ys  # type: ignore[attr-defined]
    b = float(max(batch_size, 1))
    if b >= xs[0] or xs.size == 1:
        return float(np.interp(b, xs, ys))
    slope = (ys[1] - ys[0]) / (xs[1] - xs[0])
    return max(0.0, float(ys[0] + slope * (b - xs[0])))


def decode_latencies(profile: LatencyProfile, batch_sizes: np.ndarray) -> np.ndarray:
    xs: np.ndarray = profile._xs  # type: ignore[attr-defined]
    ys: np.ndarray = profile._ys  # type: ignore[attr-defined]
    b = np.maximum(np.asarray(batch_sizes, dtype=float), 1.0)
    out = np.interp(b, xs, ys)
    if xs.size > 1:
        below = b < xs[0]
        slope = (ys[1] - ys[0]) / (xs[1] - xs[0])
        out[below] = np.maximum(0.0, ys[0] + slope * (b[below] - xs[0]))
    return out


def prefill_latency(profile: LatencyProfile, input_len: int) -> float:
    if input_len <= 0 or math.isinf(profile.prefill_throughput):
        return 0.0
    return input_len / profile.prefill_throughput


def preemption_overhead(
    profile: LatencyProfile, context_len: int, mechanism: PreemptMechanism
) -> Tuple[float, float]:
    """(preempt_cost, resume_cost) in seconds."""
    if mechanism == PreemptMechanism.RECOMPUTE:
        return 0.0, prefill_latency(profile, context_len)
    if math.isinf(profile.swap_bandwidth):
        return 0.0, 0.0
    move = context_len / profile.swap_bandwidth
    return move, move


def select_mechanism(profile: LatencyProfile, context_len: int) -> PreemptMechanism:
    """Cheaper round trip wins; swap on ties since it keeps computed state."""
    swap_total = sum(preemption_overhead(profile, context_len, PreemptMechanism.SWAP))
    recompute_total = sum(
        preemption_overhead(profile, context_len, PreemptMechanism.RECOMPUTE)
    )
    if recompute_total < swap_total:
        return PreemptMechanism.RECOMPUTE
    return PreemptMechanism.SWAP


def round_trip_overhead(profile: LatencyProfile, context_len: int) -> Tuple[float, float]:
    return preemption_overhead(
        profile, context_len, select_mechanism(profile, context_len)
    )
