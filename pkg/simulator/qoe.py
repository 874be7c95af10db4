"""
Quality-of-experience metric for streamed text.

A user expects token i at T_i^Ideal = arrival + ttft_target + (i-1)/speed and can
read no faster than `speed`. T_i^Actual is when the user actually reads token i:

    T_1^Actual = max(delivery_1, T_1^Ideal)
    T_i^Actual = max(delivery_i, T_{i-1}^Actual + 1/speed)

    S_delay = sum(T_i^Actual - T_i^Ideal)
    S_whole = sum(T_n^Actual - T_i^Ideal)
    QoE     = 1 - S_delay / S_whole          (1 when S_whole == 0)
"""

import logging
from dataclasses import dataclass, field
from typing import List, Optional, Sequence

import numpy as np

from utils import EPS, EmptyTimelineError

logger = logging.getLogger(__name__)


@dataclass(frozen=True)
class QoeParams:
    ttft_target: float  # seconds
    consumption_speed: float  # tokens / second

    def __post_init__(self) -> None:
        if not self.ttft_target > 0:
            raise ValueError(f"ttft_target must be > 0, got {self.ttft_target}")
        if not (self.consumption_speed > 0 and np.isfinite(self.consumption_speed)):
            raise ValueError(
                f"consumption_speed must be a finite value > 0, got {self.consumption_speed}"
            )

    @property
    def token_interval(self) -> float:
        return 1.0 / self.consumption_speed


@dataclass(frozen=True)
class QoeScore:
    s_delay: float  # token-seconds
    s_whole: float  # token-seconds
    value: float


@dataclass
class TokenTimeline:
    """Delivery history of one request as seen by its client."""

    arrival_time: float
    params: QoeParams
    delivery_times: List[float] = field(default_factory=list)
    _actual_cache: Optional[np.ndarray] = field(
        default=None, init=False, repr=False, compare=False
    )

    def __post_init__(self) -> None:
        for prev, cur in zip(self.delivery_times, self.delivery_times[1:]):
            if cur < prev - EPS:
                raise ValueError("delivery_times must be nondecreasing")

    @property
    def n(self) -> int:
        return len(self.delivery_times)

    def record(self, at: float, count: int = 1) -> None:
        if self.delivery_times and at < self.delivery_times[-1] - EPS:
            raise ValueError(
                f"delivery at {at} precedes previous delivery {self.delivery_times[-1]}"
            )
        self.delivery_times.extend([at] * count)
        self._actual_cache = None

    def ideal_times(self, n: Optional[int] = None) -> np.ndarray:
        return ideal_timeline(self.arrival_time, self.params, self.n if n is None else n)

    def actual_consumption_times(self) -> np.ndarray:
        if self._actual_cache is None or len(self._actual_cache) != self.n:
            self._actual_cache = actual_consumption(
                self.delivery_times,
                self.ideal_times(min(self.n, 1)),
                self.params.consumption_speed,
            )
        return self._actual_cache

    def truncated(self, until: float) -> "TokenTimeline":
        """Copy holding only deliveries made no later than `until`."""
        kept = [t for t in self.delivery_times if t <= until + EPS]
        return TokenTimeline(self.arrival_time, self.params, kept)


# ------------------------
# TIMELINES
# ------------------------
def ideal_timeline(arrival: float, params: QoeParams, n: int) -> np.ndarray:
    if n <= 0:
        return np.empty(0, dtype=float)
    start = arrival + params.ttft_target
    return start + np.arange(n, dtype=float) / params.consumption_speed


def actual_consumption(
    delivery_times: Sequence[float], ideal_times: Sequence[float], speed: float
) -> np.ndarray:
    """
    Earliest reading schedule given deliveries and reading speed.
    Only ideal_times[0] is needed; the rest of the recurrence is speed-driven.
    """
    d = np.asarray(delivery_times, dtype=float)
    if d.size == 0:
        return np.empty(0, dtype=float)
    d = d.copy()
    d[0] = max(d[0], float(ideal_times[0]))
    offsets = np.arange(d.size, dtype=float) / speed
    return np.maximum.accumulate(d - offsets) + offsets


# ------------------------
# SCORING
# ------------------------
def score(actual: np.ndarray, ideal: np.ndarray) -> QoeScore:
    if actual.size == 0:
        raise EmptyTimelineError("no consumed tokens; use evaluate_partial")
    s_delay = float(np.maximum(actual - ideal, 0.0).sum())
    s_whole = float(np.maximum(actual[-1] - ideal, 0.0).sum())
    if s_whole <= EPS:
        return QoeScore(s_delay=min(s_delay, s_whole), s_whole=s_whole, value=1.0)
    value = 1.0 - s_delay / s_whole
    return QoeScore(s_delay=s_delay, s_whole=s_whole, value=min(1.0, max(0.0, value)))


def qoe(timeline: TokenTimeline) -> QoeScore:
    if timeline.n == 0:
        raise EmptyTimelineError(
            "timeline has no delivered tokens; use evaluate_partial"
        )
    return score(timeline.actual_consumption_times(), timeline.ideal_times())


def tokens_due(arrival: float, params: QoeParams, eval_time: float, cap: int) -> int:
    """Number of tokens whose ideal consumption instant is <= eval_time, at most `cap`."""
    start = arrival + params.ttft_target
    if eval_time < start - EPS:
        return 0
    speed = params.consumption_speed
    m = int(np.floor((eval_time - start) * speed)) + 1
    m = max(0, min(m, cap))
    # correct float rounding at the boundary in either direction
    while m < cap and start + m / speed <= eval_time + EPS:
        m += 1
    while m > 0 and start + (m - 1) / speed > eval_time + EPS:
        m -= 1
    return m


def evaluate_partial(
    timeline: TokenTimeline,
    params: QoeParams,
    eval_time: float,
    total_expected: int,
    extra_deliveries: Optional[Sequence[float]] = None,
) -> QoeScore:
    """
    QoE at `eval_time` over the tokens the user should have read by then.

    Tokens not readable by eval_time count as read exactly at eval_time, without
    cascading among themselves. `extra_deliveries` appends hypothetical future
    deliveries (used for serve-vs-wait estimates).
    """
    if eval_time < timeline.arrival_time - EPS:
        raise ValueError(
            f"eval_time {eval_time} precedes arrival {timeline.arrival_time}"
        )
    if extra_deliveries is None or len(extra_deliveries) == 0:
        actual_all = (
            timeline.actual_consumption_times()
            if params == timeline.params
            else actual_consumption(
                timeline.delivery_times,
                ideal_timeline(timeline.arrival_time, params, 1),
                params.consumption_speed,
            )
        )
    else:
        actual_all = actual_consumption(
            list(timeline.delivery_times) + list(extra_deliveries),
            ideal_timeline(timeline.arrival_time, params, 1),
            params.consumption_speed,
        )

    cap = max(total_expected, 1)
    m = max(1, tokens_due(timeline.arrival_time, params, eval_time, cap))
    ideal = ideal_timeline(timeline.arrival_time, params, m)

    actual = np.full(m, eval_time, dtype=float)
    k = min(m, actual_all.size)
    if k:
        actual[:k] = np.minimum(actual_all[:k], eval_time)
    actual = np.maximum(actual, ideal)
    return score(actual, ideal)


def evaluate_partial_many(
    timeline: TokenTimeline,
    params: QoeParams,
    eval_time: float,
    total_expected: int,
    extra_deliveries: np.ndarray,
) -> np.ndarray:
    """
    Row-wise evaluate_partial over several hypothetical futures at once.

    `extra_deliveries` has one row per future; np.inf marks a token that is not
    delivered in that future. Returns one QoE value per row.
    """
    extra = np.atleast_2d(np.asarray(extra_deliveries, dtype=float))
    rows = extra.shape[0]
    if eval_time < timeline.arrival_time - EPS:
        raise ValueError(
            f"eval_time {eval_time} precedes arrival {timeline.arrival_time}"
        )

    cap = max(total_expected, 1)
    m = max(1, tokens_due(timeline.arrival_time, params, eval_time, cap))
    ideal = ideal_timeline(timeline.arrival_time, params, m)

    known = np.asarray(timeline.delivery_times[:m], dtype=float)
    d = np.full((rows, m), np.inf)
    d[:, : known.size] = known
    fill = min(m - known.size, extra.shape[1])
    if fill > 0:
        d[:, known.size : known.size + fill] = extra[:, :fill]
    d[:, 0] = np.maximum(d[:, 0], ideal[0])

    offsets = np.arange(m, dtype=float) / params.consumption_speed
    actual = np.maximum.accumulate(d - offsets, axis=1) + offsets
    actual = np.maximum(np.minimum(actual, eval_time), ideal)

    s_delay = (actual - ideal).sum(axis=1)
    s_whole = np.maximum(actual[:, -1:] - ideal, 0.0).sum(axis=1)
    flat = s_whole <= EPS
    value = 1.0 - s_delay / np.where(flat, 1.0, s_whole)
    return np.clip(np.where(flat, 1.0, value), 0.0, 1.0)
