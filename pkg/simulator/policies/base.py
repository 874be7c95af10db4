"""
Shared scheduling types: request snapshots, gain estimates, decisions, and the
engine view handed to every policy.
"""

import logging
from dataclasses import dataclass, field
from enum import Enum
from typing import Dict, Iterable, List, Optional, Sequence, Set

import numpy as np

from latency import (
    LatencyProfile,
    PreemptMechanism,
    decode_latencies,
    preemption_overhead,
    prefill_latency,
    round_trip_overhead,
)
from qoe import QoeParams, TokenTimeline, evaluate_partial, evaluate_partial_many, tokens_due
from utils import (
    DEFAULT_DELTA_T,
    DEFAULT_DP_BUDGET,
    DEFAULT_OVERHEAD_BUDGET,
    DEFAULT_WATERMARK,
    EPS,
)

logger = logging.getLogger(__name__)

SOLVERS = ("greedy", "dp")
OBJECTIVES = ("average", "maxmin", "perfect-count")


class RequestState(str, Enum):
    QUEUED = "queued"
    RUNNING = "running"
    PREEMPTED = "preempted"
    FINISHED = "finished"


@dataclass(frozen=True)
class RequestSnapshot:
    id: int
    arrival: float
    context_len: int  # prompt + generated
    timeline: TokenTimeline
    params: QoeParams
    state: RequestState
    generated: int
    expected_total: int
    swapped_out: bool = False  # KV held in host memory (resume = swap in)

    def __post_init__(self) -> None:
        if self.context_len < 1:
            raise ValueError(f"request {self.id}: context_len must be >= 1")
        if self.generated > self.expected_total:
            raise ValueError(f"request {self.id}: generated exceeds expected_total")

    @property
    def is_running(self) -> bool:
        return self.state == RequestState.RUNNING

    @property
    def is_waiting(self) -> bool:
        return self.state in (RequestState.QUEUED, RequestState.PREEMPTED)


@dataclass(frozen=True)
class GainEstimate:
    q_serve_by_batch: Dict[int, float]
    q_wait: float
    horizon: float

    def q_serve(self, batch_size: int) -> float:
        try:
            return self.q_serve_by_batch[batch_size]
        except KeyError as e:
            raise KeyError(f"batch size {batch_size} was not estimated") from e

    def gain(self, batch_size: int) -> float:
        return self.q_serve(batch_size) - self.q_wait


@dataclass(frozen=True)
class ScheduleDecision:
    serve_set: frozenset
    batch_size: int
    admit_list: List[int] = field(default_factory=list)
    preempt_list: List[int] = field(default_factory=list)
    objective_value: float = 0.0
    gains: Dict[int, float] = field(default_factory=dict)
    # None: the engine picks the cheaper mechanism per request
    preempt_mechanism: Optional[PreemptMechanism] = None

    def __post_init__(self) -> None:
        if set(self.admit_list) & set(self.preempt_list):
            raise ValueError("a request cannot be admitted and preempted at once")

    @property
    def is_noop(self) -> bool:
        return not self.admit_list and not self.preempt_list


@dataclass(frozen=True)
class SolverBounds:
    b_min: int
    b_max: int

    @property
    def empty(self) -> bool:
        return self.b_max == 0

    def sizes(self) -> range:
        return range(self.b_min, self.b_max + 1) if self.b_max else range(0)


@dataclass(frozen=True)
class PolicySettings:
    name: str = "qoe_aware"
    solver: str = "greedy"
    objective: str = "average"
    delta_t: float = DEFAULT_DELTA_T
    watermark: float = DEFAULT_WATERMARK
    greedy_skip: bool = False
    dp_budget: float = DEFAULT_DP_BUDGET
    refiner: bool = True
    overhead_budget: Optional[float] = DEFAULT_OVERHEAD_BUDGET


@dataclass(frozen=True)
class EngineView:
    """What a policy sees at an iteration boundary."""

    now: float
    snapshots: Sequence[RequestSnapshot]
    profile: LatencyProfile
    kv_used: int
    decode_latency: float  # latency of the batch currently running
    headroom: int = 1  # slots reserved per served request for the next token

    @property
    def capacity(self) -> int:
        return self.profile.kv_capacity

    @property
    def kv_occupancy(self) -> float:
        return min(1.0, self.kv_used / self.capacity)

    def running(self) -> List[RequestSnapshot]:
        return [s for s in self.snapshots if s.is_running]

    def waiting(self) -> List[RequestSnapshot]:
        return [s for s in self.snapshots if s.is_waiting]


# ------------------------
# COSTS
# ------------------------
def start_delay(snapshot: RequestSnapshot, profile: LatencyProfile) -> float:
    """Engine time before this request can join a decode iteration."""
    if snapshot.is_running:
        return 0.0
    if snapshot.swapped_out:
        return preemption_overhead(
            profile, snapshot.context_len, PreemptMechanism.SWAP
        )[1]
    return prefill_latency(profile, snapshot.context_len)


def preempt_cost(
    snapshot: RequestSnapshot,
    profile: LatencyProfile,
    mechanism: Optional[PreemptMechanism] = None,
) -> float:
    if mechanism is None:
        return round_trip_overhead(profile, snapshot.context_len)[0]
    return preemption_overhead(profile, snapshot.context_len, mechanism)[0]


# ------------------------
# GAIN ESTIMATION
# ------------------------
def current_qoe(snapshot: RequestSnapshot, now: float) -> float:
    return evaluate_partial(
        snapshot.timeline, snapshot.params, now, snapshot.expected_total
    ).value


def estimate_gain(
    req: RequestSnapshot,
    now: float,
    horizon: float,
    profile: LatencyProfile,
    batch_sizes: Iterable[int],
) -> GainEstimate:
    """
    Q_wait: QoE at now+horizon if nothing more is delivered. Q_serve(B): QoE at
    now+horizon if one token arrives every decode_latency(B) once the request can
    run. Q_serve is kept >= Q_wait and nonincreasing in B.
    """
    if not horizon > 0:
        raise ValueError(f"horizon must be > 0, got {horizon}")
    sizes = sorted({int(b) for b in batch_sizes})
    eval_time = now + horizon
    q_wait = evaluate_partial(req.timeline, req.params, eval_time, req.expected_total).value

    if q_wait >= 1.0 - EPS:
        return GainEstimate({b: 1.0 for b in sizes}, 1.0, horizon)
    if not sizes:
        return GainEstimate({}, q_wait, horizon)

    start = now + start_delay(req, profile)
    remaining = req.expected_total - req.generated
    due = tokens_due(req.arrival, req.params, eval_time, max(req.expected_total, 1))
    width = min(remaining, max(1, due) - req.timeline.n)
    if width <= 0 or start > eval_time + EPS:
        return GainEstimate({b: q_wait for b in sizes}, q_wait, horizon)

    taus = decode_latencies(profile, np.asarray(sizes))
    safe = np.where(taus > 0, taus, 1.0)
    counts = np.where(taus > 0, np.floor((eval_time - start) / safe + EPS), width)
    counts = np.clip(counts, 0, width).astype(int)
    steps = np.arange(1, width + 1, dtype=float)
    extra = start + taus[:, None] * steps[None, :]
    extra[steps[None, :] > counts[:, None]] = np.inf

    values = evaluate_partial_many(
        req.timeline, req.params, eval_time, req.expected_total, extra
    )
    values = np.minimum.accumulate(np.maximum(values, q_wait))
    return GainEstimate(
        {b: float(v) for b, v in zip(sizes, values)}, q_wait, horizon
    )


def priority(gain: GainEstimate, batch_size: int, context_len: int) -> float:
    if context_len < 1:
        raise ValueError(f"context_len must be >= 1, got {context_len}")
    return gain.gain(batch_size) / context_len


# ------------------------
# DECISIONS
# ------------------------
def build_decision(
    snapshots: Sequence[RequestSnapshot],
    chosen: Iterable[int],
    values: np.ndarray,
    batch_size: Optional[int] = None,
    normalize: bool = True,
    mechanism: Optional[PreemptMechanism] = None,
) -> ScheduleDecision:
    """
    Turns selected snapshot indices into admit/preempt lists. Admits are ordered by
    descending priority, preempts by ascending priority; ties go to the earlier
    arrival for admits and the later arrival for preempts.
    """
    chosen_set: Set[int] = set(int(i) for i in chosen)
    keys = [
        float(values[i]) / (snapshots[i].context_len if normalize else 1)
        for i in range(len(snapshots))
    ]
    admits = sorted(
        (i for i in chosen_set if not snapshots[i].is_running),
        key=lambda i: (-keys[i], snapshots[i].arrival, snapshots[i].id),
    )
    preempts = sorted(
        (i for i, s in enumerate(snapshots) if s.is_running and i not in chosen_set),
        key=lambda i: (keys[i], -snapshots[i].arrival, -snapshots[i].context_len, -snapshots[i].id),
    )
    return ScheduleDecision(
        serve_set=frozenset(snapshots[i].id for i in chosen_set),
        batch_size=len(chosen_set) if batch_size is None else batch_size,
        admit_list=[snapshots[i].id for i in admits],
        preempt_list=[snapshots[i].id for i in preempts],
        objective_value=float(sum(values[i] for i in chosen_set)),
        gains={snapshots[i].id: float(values[i]) for i in range(len(snapshots))},
        preempt_mechanism=mechanism,
    )


def keep_running(snapshots: Sequence[RequestSnapshot]) -> ScheduleDecision:
    running = [s.id for s in snapshots if s.is_running]
    return ScheduleDecision(serve_set=frozenset(running), batch_size=len(running))


def fcfs_admission(
    snapshots: Sequence[RequestSnapshot],
    capacity: int,
    headroom: int = 0,
    keep: Optional[Sequence[RequestSnapshot]] = None,
) -> ScheduleDecision:
    """
    Keeps `keep` (default: every running request) and admits waiting requests in
    arrival order while they fit, stopping at the first one that does not.
    """
    kept = [s for s in snapshots if s.is_running] if keep is None else list(keep)
    used = sum(s.context_len + headroom for s in kept)
    admits: List[int] = []
    waiting = sorted(
        (s for s in snapshots if s.is_waiting), key=lambda s: (s.arrival, s.id)
    )
    for s in waiting:
        need = s.context_len + headroom
        if used + need > capacity:
            break
        admits.append(s.id)
        used += need
    serve = [s.id for s in kept] + admits
    return ScheduleDecision(
        serve_set=frozenset(serve), batch_size=len(serve), admit_list=admits
    )


def fastest_speed(snapshots: Iterable[RequestSnapshot]) -> float:
    return max((s.params.consumption_speed for s in snapshots), default=0.0)


def slot_total(snapshots: Iterable[RequestSnapshot], headroom: int = 0) -> int:
    return sum(s.context_len + headroom for s in snapshots)


def arrays(snapshots: Sequence[RequestSnapshot]):
    """(lengths, arrivals, ids) as numpy arrays, in snapshot order."""
    lengths = np.fromiter((s.context_len for s in snapshots), dtype=np.int64, count=len(snapshots))
    arrivals = np.fromiter((s.arrival for s in snapshots), dtype=float, count=len(snapshots))
    ids = np.fromiter((s.id for s in snapshots), dtype=np.int64, count=len(snapshots))
    return lengths, arrivals, ids


def running_mask(snapshots: Sequence[RequestSnapshot]) -> np.ndarray:
    return np.fromiter((s.is_running for s in snapshots), dtype=bool, count=len(snapshots))
