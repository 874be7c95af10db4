from itertools import combinations

import numpy as np
import pytest

from conftest import make_snapshot
from policies.base import GainEstimate, RequestState
from policies.qoe_aware import dp, greedy
from utils import DpBudgetError, InfeasibleBatchError


def brute_force(values, lengths, batch_size, capacity):
    best = None
    for combo in combinations(range(len(values)), batch_size):
        if sum(lengths[i] for i in combo) <= capacity:
            total = sum(values[i] for i in combo)
            best = total if best is None else max(best, total)
    return best


def greedy_select(values, lengths, batch_size, capacity, skip=False):
    n = len(values)
    return greedy.select(
        np.asarray(values, dtype=float),
        np.asarray(lengths, dtype=np.int64),
        np.zeros(n),
        np.arange(n),
        batch_size,
        capacity,
        skip=skip,
    )


# ------------------------
# GREEDY
# ------------------------
def test_greedy_takes_densest_first():
    # densities 3, 2, 1 per slot
    assert greedy_select([15.0, 10.0, 5.0], [5, 5, 5], 3, 10) == [0, 1]


def test_greedy_takes_everything_when_it_fits():
    assert sorted(greedy_select([1.0, 2.0, 3.0], [4, 4, 4], 3, 100)) == [0, 1, 2]


def test_greedy_pack_keeps_the_running_request_on_a_tie():
    snaps = [
        make_snapshot(0, 10, arrival=0.0),
        make_snapshot(1, 10, RequestState.RUNNING, deliveries=[2.0], arrival=1.0),
    ]
    gains = [GainEstimate({1: 0.5}, 0.0, 2.0)] * 2
    decision = greedy.greedy_pack(snaps, gains, 1, 10)
    assert decision.serve_set == frozenset({1})
    assert decision.is_noop


def test_greedy_respects_batch_size():
    assert greedy_select([3.0, 2.0, 1.0], [1, 1, 1], 2, 100) == [0, 1]


def test_greedy_stops_at_first_misfit_unless_skipping():
    values, lengths = [60.0, 40.0, 10.0], [6, 5, 2]
    assert greedy_select(values, lengths, 3, 8) == [0]
    assert greedy_select(values, lengths, 3, 8, skip=True) == [0, 2]


def test_greedy_ties_go_to_earlier_arrival():
    chosen = greedy.select(
        np.array([1.0, 1.0]), np.array([1, 1]), np.array([5.0, 2.0]), np.array([0, 1]), 1, 10
    )
    assert chosen == [1]


def test_greedy_pack_builds_a_decision():
    snaps = [
        make_snapshot(0, 10, RequestState.RUNNING, deliveries=[1.0]),
        make_snapshot(1, 10),
    ]
    gains = [GainEstimate({1: 0.0}, 1.0, 2.0), GainEstimate({1: 0.9}, 0.1, 2.0)]
    decision = greedy.greedy_pack(snaps, gains, 1, 15)
    assert decision.serve_set == frozenset({1})
    assert decision.admit_list == [1]
    assert decision.preempt_list == [0]


# ------------------------
# DP
# ------------------------
def test_dp_single_request():
    chosen, best = dp.select(np.array([0.4]), np.array([3]), 1, 5)
    assert chosen == [0]
    assert best == pytest.approx(0.4)


def test_dp_picks_the_pair_that_fits():
    chosen, best = dp.select(np.array([0.5, 0.4, 0.35]), np.array([4, 3, 2]), 2, 6)
    assert chosen == [0, 2]
    assert best == pytest.approx(0.85)


def test_dp_infeasible_batch():
    with pytest.raises(InfeasibleBatchError):
        dp.select(np.array([1.0, 1.0]), np.array([4, 4]), 2, 6)
    with pytest.raises(InfeasibleBatchError):
        dp.select(np.array([1.0]), np.array([1]), 2, 6)


def test_dp_budget():
    with pytest.raises(DpBudgetError):
        dp.select(np.ones(10), np.ones(10, dtype=int), 2, 1000, budget=1e4)


def test_dp_matches_brute_force(rng):
    for _ in range(500):
        n = int(rng.integers(1, 11))
        capacity = int(rng.integers(1, 31))
        values = rng.uniform(0, 1, size=n)
        lengths = rng.integers(1, 12, size=n)
        for b in range(1, n + 1):
            expected = brute_force(values, lengths, b, capacity)
            if expected is None:
                with pytest.raises(InfeasibleBatchError):
                    dp.select(values, lengths, b, capacity)
                continue
            chosen, best = dp.select(values, lengths, b, capacity)
            assert len(chosen) == b
            assert int(lengths[chosen].sum()) <= capacity
            assert best == pytest.approx(expected, abs=1e-9)
            assert float(values[chosen].sum()) == pytest.approx(best, abs=1e-9)


def test_greedy_never_beats_the_exact_optimum(rng):
    for _ in range(300):
        n = int(rng.integers(1, 11))
        capacity = int(rng.integers(1, 31))
        values = rng.uniform(0, 1, size=n)
        lengths = rng.integers(1, 12, size=n)
        b = int(rng.integers(1, n + 1))
        chosen = greedy_select(values, lengths, b, capacity)
        assert len(chosen) <= b
        assert int(lengths[chosen].sum()) <= capacity if chosen else True
        optimum = max(
            (v for k in range(1, b + 1) if (v := brute_force(values, lengths, k, capacity)) is not None),
            default=0.0,
        )
        assert float(values[chosen].sum()) <= optimum + 1e-9


def test_dp_solve_builds_a_decision():
    snaps = [make_snapshot(i, 10) for i in range(3)]
    gains = [GainEstimate({2: v}, 0.0, 2.0) for v in (0.1, 0.5, 0.3)]
    decision = dp.dp_solve(snaps, gains, 2, 25)
    assert decision.serve_set == frozenset({1, 2})
    assert decision.admit_list == [1, 2]
    assert decision.batch_size == 2
