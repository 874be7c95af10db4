import logging
from typing import Optional, Sequence

import numpy as np

from latency import LatencyProfile
from policies.base import (
    EngineView,
    GainEstimate,
    PolicySettings,
    RequestSnapshot,
    ScheduleDecision,
    arrays,
    build_decision,
    estimate_gain,
    fcfs_admission,
    keep_running,
    running_mask,
)
from policies.qoe_aware.greedy import select
from policies.qoe_aware.refiner import refine
from policies.qoe_aware.universal import batch_bounds, should_trigger
from utils import EPS

logger = logging.getLogger(__name__)


def lqsf_policy(
    snapshots: Sequence[RequestSnapshot],
    gains: Sequence[GainEstimate],
    M: int,
    batch_size: Optional[int] = None,
    headroom: int = 0,
) -> ScheduleDecision:
    """
    Least QoE slack first: greedy packing on raw gain, no division by context
    length, batch bounded only by memory. All-zero gains keep the current set.
    `batch_size` picks which Q_serve column the gains are read from.
    """
    if not snapshots:
        return keep_running(snapshots)
    b = batch_size if batch_size is not None else len(snapshots)
    values = np.array([g.gain(b) for g in gains], dtype=float)
    if not (values > EPS).any():
        return keep_running(snapshots)
    lengths, arrivals, ids = arrays(snapshots)
    chosen = select(
        values,
        lengths + headroom,
        arrivals,
        ids,
        len(snapshots),
        M,
        normalize=False,
        running=running_mask(snapshots),
    )
    return build_decision(snapshots, chosen, values, normalize=False)


def gains_at(
    snapshots: Sequence[RequestSnapshot],
    profile: LatencyProfile,
    horizon: float,
    now: float,
    batch_size: int,
):
    return [estimate_gain(s, now, horizon, profile, [batch_size]) for s in snapshots]


def decide(view: EngineView, settings: PolicySettings) -> ScheduleDecision:
    snapshots = view.snapshots
    if not snapshots:
        return keep_running(snapshots)
    if not should_trigger(
        view.kv_occupancy, view.decode_latency, snapshots, settings.watermark
    ):
        return fcfs_admission(snapshots, view.capacity, view.headroom)

    bounds = batch_bounds(snapshots, view.profile, view.capacity, view.headroom)
    if bounds.empty:
        return keep_running(snapshots)
    gains = gains_at(
        snapshots, view.profile, settings.delta_t, view.now, bounds.b_max
    )
    decision = lqsf_policy(snapshots, gains, view.capacity, bounds.b_max, view.headroom)
    if decision.is_noop:
        return fcfs_admission(snapshots, view.capacity, view.headroom)
    if settings.refiner:
        decision = refine(
            decision,
            snapshots,
            view.profile,
            settings.delta_t,
            view.now,
            view.capacity,
            view.headroom,
            settings.overhead_budget,
        )
    return decision
