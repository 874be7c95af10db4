"""
Overhead-aware refinement of a scheduling decision.

Each admit is paired with the shortest run of preemptions that frees room for it.
The pair stalls the engine for the preempt costs plus the admit's prefill/swap-in
cost; every request that keeps running loses the QoE that stall costs it. Requests
still waiting are pushed back by the victims' full round trip, and each victim
gives up the gain the solver credited it with. A pair survives only when its gain
beats that loss. The first pair that does not survive cancels every later admit
and preempt.

With an overhead budget, a running request is only a victim when its buffered
reading time outlasts the horizon by enough to pay back its round trip.
"""

import logging
from dataclasses import replace
from typing import Dict, List, Optional, Sequence

from latency import (
    LatencyProfile,
    PreemptMechanism,
    preemption_overhead,
    round_trip_overhead,
)
from policies.base import (
    RequestSnapshot,
    ScheduleDecision,
    current_qoe,
    estimate_gain,
    preempt_cost,
    slot_total,
    start_delay,
)
from utils import EPS

logger = logging.getLogger(__name__)


def stall_loss(snapshot: RequestSnapshot, now: float, stall: float) -> float:
    """QoE a request gives up if nothing reaches it for `stall` seconds."""
    if stall <= EPS:
        return 0.0
    before = current_qoe(snapshot, now)
    after = current_qoe(snapshot, now + stall)
    return max(0.0, before - after)


def reading_surplus(snapshot: RequestSnapshot, now: float) -> float:
    """Seconds of delivered text the user has not read yet."""
    if snapshot.timeline.n == 0:
        return 0.0
    last = float(snapshot.timeline.actual_consumption_times()[-1])
    return max(0.0, last + snapshot.params.token_interval - now)


def round_trip(
    snapshot: RequestSnapshot,
    profile: LatencyProfile,
    mechanism: Optional[PreemptMechanism] = None,
) -> float:
    if mechanism is None:
        return sum(round_trip_overhead(profile, snapshot.context_len))
    return sum(preemption_overhead(profile, snapshot.context_len, mechanism))


def pays_back(
    snapshot: RequestSnapshot,
    now: float,
    horizon: float,
    trip: float,
    batch: int,
    budget: float,
) -> bool:
    """
    A victim is off until its buffer drains back to the horizon. Over `batch`
    such rotations the round trips may use at most `budget` of engine time.
    """
    if trip <= EPS:
        return True
    return reading_surplus(snapshot, now) - horizon >= trip * max(batch, 1) / budget


def refine(
    decision: ScheduleDecision,
    snapshots: Sequence[RequestSnapshot],
    profile: LatencyProfile,
    horizon: float,
    now: float,
    capacity: Optional[int] = None,
    headroom: int = 0,
    overhead_budget: Optional[float] = None,
) -> ScheduleDecision:
    if not decision.admit_list:
        return decision
    if overhead_budget is not None and not overhead_budget > 0:
        raise ValueError(f"overhead_budget must be > 0, got {overhead_budget}")
    capacity = profile.kv_capacity if capacity is None else capacity
    by_id: Dict[int, RequestSnapshot] = {s.id: s for s in snapshots}
    running = [s for s in snapshots if s.is_running]
    waiting = [s for s in snapshots if not s.is_running]
    free = capacity - slot_total(running, headroom)

    trips = {
        pid: round_trip(by_id[pid], profile, decision.preempt_mechanism)
        for pid in decision.preempt_list
    }
    preempts = list(decision.preempt_list)
    if overhead_budget is not None:
        preempts = [
            pid
            for pid in preempts
            if pays_back(by_id[pid], now, horizon, trips[pid], len(running), overhead_budget)
        ]
        if len(preempts) < len(decision.preempt_list):
            logger.debug(
                f"Refiner spared {len(decision.preempt_list) - len(preempts)} victims "
                f"whose buffers do not cover their round trip"
            )

    taken = 0
    accepted: List[int] = []
    rejected: Optional[int] = None

    for aid in decision.admit_list:
        admit = by_id[aid]
        need = admit.context_len + headroom
        stall = 0.0
        churn = 0.0
        start = taken
        room = free
        while room < need and taken < len(preempts):
            victim = by_id[preempts[taken]]
            room += victim.context_len + headroom
            stall += preempt_cost(victim, profile, decision.preempt_mechanism)
            churn += trips[victim.id]
            taken += 1
        if room < need:
            rejected = aid
            taken = start
            break
        stall += start_delay(admit, profile)

        gain = decision.gains.get(aid)
        if gain is None:
            gain = estimate_gain(
                admit, now, horizon, profile, [decision.batch_size]
            ).gain(decision.batch_size)
        victims = preempts[start:taken]
        stopped = set(preempts[:taken])
        loss = sum(
            stall_loss(s, now, stall) for s in running if s.id not in stopped
        )
        passed = set(accepted) | {aid}
        loss += sum(
            stall_loss(s, now, churn) for s in waiting if s.id not in passed
        )
        loss += sum(max(0.0, decision.gains.get(v, 0.0)) for v in victims)
        freeing = taken > start

        keep = stall <= EPS or gain > loss or (not freeing and loss <= EPS)
        logger.debug(
            f"Refiner pair admit={aid} preempt={victims} stall={stall:.4f}s "
            f"churn={churn:.4f}s gain={gain:.4f} loss={loss:.4f} keep={keep}"
        )
        if not keep:
            rejected = aid
            taken = start
            break
        accepted.append(aid)
        free = room - need

    if rejected is None:
        if len(preempts) == len(decision.preempt_list):
            return decision
        kept_preempts = preempts
    else:
        kept_preempts = preempts[:taken]
    dropped = set(decision.preempt_list) - set(kept_preempts)
    serve = (set(decision.serve_set) - set(decision.admit_list)) | set(accepted) | dropped
    logger.debug(
        f"Refiner cancelled {len(decision.admit_list) - len(accepted)} admits and "
        f"{len(dropped)} preemptions"
    )
    return replace(
        decision,
        serve_set=frozenset(serve),
        batch_size=len(serve),
        admit_list=accepted,
        preempt_list=kept_preempts,
        objective_value=sum(decision.gains.get(i, 0.0) for i in serve),
    )
