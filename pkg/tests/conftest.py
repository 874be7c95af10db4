from typing import Iterable, Optional

import numpy as np
import pytest

from latency import LatencyProfile
from policies.base import RequestSnapshot, RequestState
from qoe import QoeParams, TokenTimeline
from workload import TraceRecord


@pytest.fixture
def rng() -> np.random.Generator:
    return np.random.default_rng(1234)


def make_snapshot(
    rid: int,
    context_len: int,
    state: RequestState = RequestState.QUEUED,
    deliveries: Iterable[float] = (),
    arrival: float = 0.0,
    ttft: float = 1.0,
    speed: float = 1.0,
    expected_total: int = 100,
    generated: Optional[int] = None,
    swapped_out: bool = False,
) -> RequestSnapshot:
    params = QoeParams(ttft, speed)
    deliveries = list(deliveries)
    return RequestSnapshot(
        id=rid,
        arrival=arrival,
        context_len=context_len,
        timeline=TokenTimeline(arrival, params, deliveries),
        params=params,
        state=state,
        generated=len(deliveries) if generated is None else generated,
        expected_total=expected_total,
        swapped_out=swapped_out,
    )


def make_profile(
    points=((1, 0.02), (1024, 0.8392)),
    prefill: float = 5000.0,
    swap: float = 20000.0,
    kv: int = 65536,
) -> LatencyProfile:
    return LatencyProfile(tuple(points), prefill, swap, kv)


def make_record(
    arrival: float,
    input_len: int,
    output_len: int,
    ttft: float = 1.0,
    speed: float = 4.0,
) -> TraceRecord:
    return TraceRecord(
        arrival_s=arrival,
        input_len=input_len,
        output_len=output_len,
        ttft_target_s=ttft,
        consumption_speed_tps=speed,
    )


@pytest.fixture
def snapshot_factory():
    return make_snapshot


@pytest.fixture
def profile_factory():
    return make_profile


@pytest.fixture
def record_factory():
    return make_record
