"""
Per-request gain functions for the packing objective.

  average        Q_serve(B) - Q_wait                    (maximise mean QoE)
  maxmin         max(Q_min - Q_wait, 0)                 (lift the worst request)
  perfect-count  [1(Q_serve=1) - 1(Q_wait=1)] * 1(Q_now=1)
"""

import logging
from typing import Dict, Optional, Sequence

import numpy as np

from latency import LatencyProfile
from qoe import evaluate_partial
from policies.base import (
    OBJECTIVES,
    GainEstimate,
    RequestSnapshot,
    current_qoe,
    estimate_gain,
)
from utils import EPS, ConfigError

logger = logging.getLogger(__name__)


def _perfect(value: float) -> bool:
    return value >= 1.0 - EPS


def gain_average(estimate: GainEstimate, batch_size: int) -> float:
    return estimate.gain(batch_size)


def gain_maxmin(
    req: RequestSnapshot,
    snapshots: Sequence[RequestSnapshot],
    now: float,
    horizon: float,
    q_min: Optional[float] = None,
    estimate: Optional[GainEstimate] = None,
) -> float:
    if not horizon > 0:
        raise ValueError(f"horizon must be > 0, got {horizon}")
    if q_min is None:
        q_min = min((current_qoe(s, now) for s in snapshots), default=1.0)
    if estimate is None:
        q_wait = evaluate_partial(
            req.timeline, req.params, now + horizon, req.expected_total
        ).value
    else:
        q_wait = estimate.q_wait
    return max(q_min - q_wait, 0.0)


def gain_perfect_count(
    req: RequestSnapshot,
    now: float,
    horizon: float,
    profile: LatencyProfile,
    batch_size: int,
    estimate: Optional[GainEstimate] = None,
    q_now: Optional[float] = None,
) -> float:
    if not horizon > 0:
        raise ValueError(f"horizon must be > 0, got {horizon}")
    if q_now is None:
        q_now = current_qoe(req, now)
    if not _perfect(q_now):
        return 0.0
    if estimate is None:
        estimate = estimate_gain(req, now, horizon, profile, [batch_size])
    return float(_perfect(estimate.q_serve(batch_size))) - float(_perfect(estimate.q_wait))


class ObjectiveTable:
    """Gain vectors for one scheduling round, one per candidate batch size."""

    def __init__(
        self,
        objective: str,
        snapshots: Sequence[RequestSnapshot],
        estimates: Sequence[GainEstimate],
        now: float,
        profile: LatencyProfile,
    ) -> None:
        if objective not in OBJECTIVES:
            raise ConfigError(
                f"unknown objective '{objective}' (choose from {', '.join(OBJECTIVES)})"
            )
        self.objective = objective
        self.snapshots = snapshots
        self.estimates = estimates
        self.now = now
        self.profile = profile
        self._q_now: Optional[np.ndarray] = None
        self._cache: Dict[int, np.ndarray] = {}

    @property
    def q_now(self) -> np.ndarray:
        if self._q_now is None:
            self._q_now = np.array(
                [current_qoe(s, self.now) for s in self.snapshots], dtype=float
            )
        return self._q_now

    def values(self, batch_size: int) -> np.ndarray:
        if batch_size in self._cache:
            return self._cache[batch_size]
        if self.objective == "average":
            out = np.array([gain_average(e, batch_size) for e in self.estimates])
        elif self.objective == "maxmin":
            q_min = float(self.q_now.min()) if self.q_now.size else 1.0
            out = np.array(
                [
                    gain_maxmin(s, self.snapshots, self.now, e.horizon, q_min, e)
                    for s, e in zip(self.snapshots, self.estimates)
                ]
            )
        else:
            out = np.array(
                [
                    gain_perfect_count(
                        s, self.now, e.horizon, self.profile, batch_size, e, q
                    )
                    for s, e, q in zip(self.snapshots, self.estimates, self.q_now)
                ]
            )
        out = out.astype(float)
        self._cache[batch_size] = out
        return out
