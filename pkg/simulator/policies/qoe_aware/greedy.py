"""Priority-based greedy packing."""

from typing import List, Optional, Sequence

import numpy as np

from policies.base import (
    GainEstimate,
    RequestSnapshot,
    ScheduleDecision,
    arrays,
    build_decision,
    running_mask,
)


def pack_order(
    values: np.ndarray,
    lengths: np.ndarray,
    arrivals: np.ndarray,
    ids: np.ndarray,
    normalize: bool = True,
    running: Optional[np.ndarray] = None,
) -> np.ndarray:
    """
    Indices by descending value (per slot when normalized); equal values put running
    requests first, then earlier arrivals, then lower ids.
    """
    key = values / lengths if normalize else np.asarray(values, dtype=float)
    idle = np.zeros(len(key), dtype=bool) if running is None else ~np.asarray(running, dtype=bool)
    return np.lexsort((ids, arrivals, idle, -key))


def select(
    values: np.ndarray,
    lengths: np.ndarray,
    arrivals: np.ndarray,
    ids: np.ndarray,
    batch_size: int,
    capacity: int,
    normalize: bool = True,
    skip: bool = False,
    running: Optional[np.ndarray] = None,
) -> List[int]:
    """
    Takes requests in priority order while the count stays <= batch_size and the
    slot total <= capacity. Stops at the first request that does not fit unless
    `skip` is set, in which case it moves on to the next one.
    """
    if batch_size < 1 or capacity < 1 or len(values) == 0:
        return []
    order = pack_order(values, lengths, arrivals, ids, normalize, running)

    if not skip:
        cum = np.cumsum(lengths[order])
        fit = int(np.searchsorted(cum, capacity, side="right"))
        return order[: min(fit, batch_size)].tolist()

    chosen: List[int] = []
    used = 0
    for i in order:
        if len(chosen) >= batch_size:
            break
        if used + lengths[i] <= capacity:
            chosen.append(int(i))
            used += int(lengths[i])
    return chosen


def greedy_pack(
    snapshots: Sequence[RequestSnapshot],
    gains: Sequence[GainEstimate],
    B: int,
    M: int,
    skip: bool = False,
) -> ScheduleDecision:
    """
    Packs at most B requests into M slots by gain per slot. Equal priorities keep
    requests that are already running ahead of waiting ones, then go by earlier
    arrival and lower id, so a tie never causes a preemption.
    """
    if B < 1 or M < 1:
        raise ValueError(f"B and M must be >= 1, got B={B}, M={M}")
    values = np.array([g.gain(B) for g in gains], dtype=float)
    lengths, arrivals, ids = arrays(snapshots)
    chosen = select(
        values, lengths, arrivals, ids, B, M, skip=skip, running=running_mask(snapshots)
    )
    return build_decision(snapshots, chosen, values)
