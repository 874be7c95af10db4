"""
Exact packing for a fixed batch size.

dp[i][b][m] is the best total gain over the first i requests choosing exactly b of
them with exactly m slots used. The table is rolled over i with numpy; a boolean
choice table per request drives the backtrack from argmax over dp[N][B][:].
"""

import logging
from typing import List, Sequence, Tuple

import numpy as np

from policies.base import GainEstimate, RequestSnapshot, ScheduleDecision, arrays, build_decision
from utils import DEFAULT_DP_BUDGET, DpBudgetError, InfeasibleBatchError

logger = logging.getLogger(__name__)


def check_budget(n: int, capacity: int, budget: float) -> None:
    if capacity * n * n > budget:
        raise DpBudgetError(
            f"DP table too large: M*N^2 = {capacity}*{n}^2 = {capacity * n * n:.3g} "
            f"exceeds budget {budget:.3g}; use --solver greedy or raise --dp-budget"
        )


def select(
    values: np.ndarray,
    lengths: np.ndarray,
    batch_size: int,
    capacity: int,
    budget: float = DEFAULT_DP_BUDGET,
) -> Tuple[List[int], float]:
    """Indices of the optimal size-`batch_size` subset and its total value."""
    n = len(values)
    check_budget(n, capacity, budget)
    if batch_size < 1 or batch_size > n:
        raise InfeasibleBatchError(f"cannot pick {batch_size} of {n} requests")

    dp = np.full((batch_size + 1, capacity + 1), -np.inf)
    dp[0, 0] = 0.0
    take = np.zeros((n, batch_size + 1, capacity + 1), dtype=bool)

    for i in range(n):
        length = int(lengths[i])
        if length > capacity:
            continue
        cand = np.full_like(dp, -np.inf)
        cand[1:, length:] = dp[:-1, : capacity + 1 - length] + float(values[i])
        better = cand > dp
        take[i] = better
        dp = np.where(better, cand, dp)

    row = dp[batch_size]
    if not np.isfinite(row).any():
        raise InfeasibleBatchError(
            f"no {batch_size} requests fit in {capacity} KV slots"
        )
    m = int(np.argmax(row))
    best = float(row[m])

    chosen: List[int] = []
    b = batch_size
    for i in range(n - 1, -1, -1):
        if b == 0:
            break
        if take[i, b, m]:
            chosen.append(i)
            b -= 1
            m -= int(lengths[i])
    chosen.reverse()
    return chosen, best


def dp_solve(
    snapshots: Sequence[RequestSnapshot],
    gains: Sequence[GainEstimate],
    B: int,
    M: int,
    budget: float = DEFAULT_DP_BUDGET,
) -> ScheduleDecision:
    if B < 1 or M < 1:
        raise ValueError(f"B and M must be >= 1, got B={B}, M={M}")
    values = np.array([g.gain(B) for g in gains], dtype=float)
    lengths, _, _ = arrays(snapshots)
    chosen, best = select(values, lengths, B, M, budget)
    decision = build_decision(snapshots, chosen, values, batch_size=B)
    logger.debug(f"DP optimum at B={B}: {best:.6f}")
    return decision
