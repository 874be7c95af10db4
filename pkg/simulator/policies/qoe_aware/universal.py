import logging
from typing import List, Optional, Sequence

import numpy as np

from latency import LatencyProfile, decode_latencies
from policies.base import (
    EngineView,
    GainEstimate,
    PolicySettings,
    RequestSnapshot,
    ScheduleDecision,
    SolverBounds,
    arrays,
    build_decision,
    estimate_gain,
    fastest_speed,
    fcfs_admission,
    keep_running,
    running_mask,
)
from utils import DEFAULT_DP_BUDGET, DEFAULT_WATERMARK, EPS, ConfigError, InfeasibleBatchError

from . import dp, greedy
from .objectives import ObjectiveTable
from .refiner import refine

logger = logging.getLogger(__name__)


# ------------------------
# SEARCH SPACE
# ------------------------
def batch_bounds(
    snapshots: Sequence[RequestSnapshot],
    profile: LatencyProfile,
    capacity: Optional[int] = None,
    headroom: int = 0,
) -> SolverBounds:
    """
    b_max: how many of the shortest contexts fit together.
    b_min: the largest batch still decoding at least as fast as the fastest reader.
    """
    if not snapshots:
        raise ValueError("batch_bounds needs at least one request")
    capacity = profile.kv_capacity if capacity is None else capacity
    lengths = np.sort(np.array([s.context_len + headroom for s in snapshots]))
    b_max = int(np.searchsorted(np.cumsum(lengths), capacity, side="right"))
    if b_max == 0:
        return SolverBounds(0, 0)

    sizes = np.arange(1, b_max + 1)
    need = 1.0 / fastest_speed(snapshots)
    fast_enough = np.nonzero(decode_latencies(profile, sizes) <= need + EPS)[0]
    b_min = int(sizes[fast_enough[-1]]) if fast_enough.size else 1
    return SolverBounds(max(1, min(b_min, b_max)), b_max)


def should_trigger(
    kv_occupancy: float,
    current_decode_latency: float,
    snapshots: Sequence[RequestSnapshot],
    watermark: float = DEFAULT_WATERMARK,
) -> bool:
    if kv_occupancy >= watermark:
        return True
    ongoing = [s for s in snapshots if s.is_running]
    if not ongoing:
        return False
    return current_decode_latency > 1.0 / fastest_speed(ongoing) + EPS


# ------------------------
# SOLVE
# ------------------------
def solve(
    snapshots: Sequence[RequestSnapshot],
    profile: LatencyProfile,
    horizon: float,
    solver: str = "greedy",
    *,
    now: float,
    objective: str = "average",
    capacity: Optional[int] = None,
    headroom: int = 0,
    skip: bool = False,
    dp_budget: float = DEFAULT_DP_BUDGET,
) -> ScheduleDecision:
    """
    Tries every batch size in the pruned range and keeps the best packing. Each
    served request reserves `headroom` extra slots. Equal objectives keep the
    larger serve set. The decision's batch size is the size of its serve set.
    """
    if not snapshots:
        raise ValueError("solve needs at least one request")
    if solver not in ("greedy", "dp"):
        raise ConfigError(f"unknown solver '{solver}' (choose greedy or dp)")
    capacity = profile.kv_capacity if capacity is None else capacity
    bounds = batch_bounds(snapshots, profile, capacity, headroom)
    if bounds.empty:
        logger.debug("No request fits in the KV cache; empty schedule")
        return keep_running(snapshots)

    sizes = list(bounds.sizes())
    estimates: List[GainEstimate] = [
        estimate_gain(s, now, horizon, profile, sizes) for s in snapshots
    ]
    table = ObjectiveTable(objective, snapshots, estimates, now, profile)
    lengths, arrivals, ids = arrays(snapshots)
    slots = lengths + headroom
    running = running_mask(snapshots)

    best: Optional[ScheduleDecision] = None
    for b in sizes:
        values = table.values(b)
        if solver == "dp":
            try:
                chosen, _ = dp.select(values, slots, b, capacity, dp_budget)
            except InfeasibleBatchError:
                continue
        else:
            chosen = greedy.select(
                values, slots, arrivals, ids, b, capacity, skip=skip, running=running
            )
        decision = build_decision(snapshots, chosen, values)
        if _improves(decision, best):
            best = decision

    if best is None:
        return keep_running(snapshots)
    logger.debug(
        f"Solved B={best.batch_size} in [{bounds.b_min},{bounds.b_max}] "
        f"objective={best.objective_value:.4f} admit={len(best.admit_list)} "
        f"preempt={len(best.preempt_list)}"
    )
    return best


def _improves(decision: ScheduleDecision, best: Optional[ScheduleDecision]) -> bool:
    if best is None:
        return True
    diff = decision.objective_value - best.objective_value
    if abs(diff) > EPS:
        return diff > 0
    return len(decision.serve_set) >= len(best.serve_set)


# ------------------------
# POLICY ENTRY
# ------------------------
def decide(
    view: EngineView, settings: PolicySettings, solver: Optional[str] = None
) -> ScheduleDecision:
    snapshots = view.snapshots
    if not snapshots:
        return keep_running(snapshots)
    if not should_trigger(
        view.kv_occupancy, view.decode_latency, snapshots, settings.watermark
    ):
        return fcfs_admission(snapshots, view.capacity, view.headroom)

    decision = solve(
        snapshots,
        view.profile,
        settings.delta_t,
        solver or settings.solver,
        now=view.now,
        objective=settings.objective,
        capacity=view.capacity,
        headroom=view.headroom,
        skip=settings.greedy_skip,
        dp_budget=settings.dp_budget,
    )
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
