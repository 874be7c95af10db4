import logging
from typing import List, Sequence

from latency import PreemptMechanism
from policies.base import (
    EngineView,
    PolicySettings,
    RequestSnapshot,
    ScheduleDecision,
    fcfs_admission,
    slot_total,
)

logger = logging.getLogger(__name__)


def fcfs_policy(
    snapshots: Sequence[RequestSnapshot], M: int, headroom: int = 0
) -> ScheduleDecision:
    """
    Serve in arrival order. When running requests outgrow M, the most recently
    arrived ones are preempted by recomputation; then waiting requests are admitted
    in arrival order up to the first that does not fit.
    """
    running = sorted(
        (s for s in snapshots if s.is_running), key=lambda s: (s.arrival, s.id)
    )
    preempted: List[RequestSnapshot] = []
    while running and slot_total(running, headroom) > M:
        preempted.append(running.pop())

    admitted = fcfs_admission(snapshots, M, headroom, keep=running)
    if preempted:
        logger.debug(f"FCFS overflow: preempting {[s.id for s in preempted]}")
    return ScheduleDecision(
        serve_set=admitted.serve_set,
        batch_size=admitted.batch_size,
        admit_list=admitted.admit_list,
        preempt_list=[s.id for s in preempted],
        preempt_mechanism=PreemptMechanism.RECOMPUTE,
    )


def decide(view: EngineView, settings: PolicySettings) -> ScheduleDecision:
    return fcfs_policy(view.snapshots, view.capacity, view.headroom)
