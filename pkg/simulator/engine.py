"""
Deterministic discrete-event model of a continuous-batching serving engine.

One executor runs either a serialized operation (prefill, swap-in, swap-out) or a
decode iteration at a time. Scheduling decisions are taken only at iteration
boundaries, or when the executor is idle.
"""

import heapq
import logging
from collections import deque
from dataclasses import dataclass, field
from enum import IntEnum
from typing import Any, Deque, Dict, List, Optional, Sequence, Tuple

from latency import (
    LatencyProfile,
    PreemptMechanism,
    decode_latency,
    preemption_overhead,
    prefill_latency,
    select_mechanism,
)
from pacer import TokenPacer
from policies import Policy
from policies.base import EngineView, RequestSnapshot, RequestState, ScheduleDecision
from qoe import QoeParams, TokenTimeline, evaluate_partial, qoe
from report import RequestResult, SimulationReport, TimeSample
from utils import EPS, SimulationError
from workload import TraceRecord

logger = logging.getLogger(__name__)

IDLE_TICK_S = 0.05
MAX_IDLE_TICKS = 200_000


class EventKind(IntEnum):
    # value doubles as the tie-break rank at equal timestamps
    SWAP_COMPLETE = 0
    PREFILL_COMPLETE = 1
    ITERATION_COMPLETE = 2
    ARRIVAL = 3
    SCHEDULE_TICK = 4


@dataclass(order=True)
class SimEvent:
    time: float
    kind: EventKind
    key: int
    seq: int
    payload: Any = field(default=None, compare=False)


class EventQueue:
    def __init__(self) -> None:
        self._heap: List[SimEvent] = []
        self._seq = 0

    def push(self, time: float, kind: EventKind, key: int = -1, payload: Any = None) -> None:
        heapq.heappush(self._heap, SimEvent(time, kind, key, self._seq, payload))
        self._seq += 1

    def pop(self) -> SimEvent:
        return heapq.heappop(self._heap)

    def peek_time(self) -> float:
        return self._heap[0].time

    def __len__(self) -> int:
        return len(self._heap)


@dataclass(frozen=True)
class TokenEvent:
    request_id: int
    index: int  # 1-based output token index
    generated_at: float


@dataclass(frozen=True)
class PacerOptions:
    chunk_size: int = 1
    network_delay: float = 0.0
    surplus_staleness: float = 0.0  # how far behind the server's view of deliveries lags
    bypass: bool = False


@dataclass
class Request:
    id: int
    arrival: float
    input_len: int
    output_len: int
    params: QoeParams
    pacer: TokenPacer
    timeline: TokenTimeline
    state: RequestState = RequestState.QUEUED
    generated: int = 0
    preemptions: int = 0
    swapped_out: bool = False
    arrived: bool = False
    finish_time: Optional[float] = None
    gen_times: List[float] = field(default_factory=list)

    @property
    def context_len(self) -> int:
        return self.input_len + self.generated


class ServingEngine:
    def __init__(
        self,
        profile: LatencyProfile,
        policy: Policy,
        pacer_options: PacerOptions = PacerOptions(),
        record_surplus: bool = False,
    ) -> None:
        self.profile = profile
        self.policy = policy
        self.pacer_options = pacer_options
        self.record_surplus = record_surplus

        self.clock = 0.0
        self.requests: Dict[int, Request] = {}
        self.rejected: List[Request] = []
        self.waiting: List[int] = []
        self.running: List[int] = []
        self.kv_used = 0
        self.cpu_kv = 0
        self.events = EventQueue()
        self.current_decode_latency = 0.0

        self.timeseries: List[TimeSample] = []
        self.surplus_log: List[Tuple[float, int, float]] = []

        self._ops: Deque[Tuple[str, int]] = deque()
        self._current_op: Optional[Tuple[str, int]] = None
        self._busy = False
        self._tick_pending = False
        self._idle_ticks = 0

    # ------------------------
    # INGESTION
    # ------------------------
    def load(self, records: Sequence[TraceRecord]) -> None:
        capacity = self.profile.kv_capacity
        for rid, rec in enumerate(sorted(records, key=lambda r: r.arrival_s)):
            params = rec.qoe_params()
            req = Request(
                id=rid,
                arrival=rec.arrival_s,
                input_len=rec.input_len,
                output_len=rec.output_len,
                params=params,
                pacer=TokenPacer(
                    params,
                    rec.arrival_s,
                    self.pacer_options.chunk_size,
                    self.pacer_options.network_delay,
                    self.pacer_options.bypass,
                ),
                timeline=TokenTimeline(rec.arrival_s, params),
            )
            if rec.input_len + rec.output_len > capacity:
                logger.info(
                    f"Rejecting request {rid}: {rec.input_len}+{rec.output_len} tokens "
                    f"exceed KV capacity {capacity}"
                )
                self.rejected.append(req)
                continue
            self.requests[rid] = req
            self.events.push(rec.arrival_s, EventKind.ARRIVAL, rid)

    # ------------------------
    # EVENT LOOP
    # ------------------------
    def step(self) -> List[TokenEvent]:
        if not self.events:
            raise SimulationError("step() on an empty event queue")
        event = self.events.pop()
        if event.time < self.clock - EPS:
            raise SimulationError(
                f"event {event.kind.name} at {event.time} precedes clock {self.clock}"
            )
        self.clock = max(self.clock, event.time)

        emitted: List[TokenEvent] = []
        if event.kind == EventKind.ARRIVAL:
            self._on_arrival(event.key)
        elif event.kind == EventKind.ITERATION_COMPLETE:
            emitted = self._on_iteration(event.payload)
        elif event.kind == EventKind.PREFILL_COMPLETE:
            self._on_prefill(event.key)
        elif event.kind == EventKind.SWAP_COMPLETE:
            self._on_swap(event.key, event.payload)
        elif event.kind == EventKind.SCHEDULE_TICK:
            self._tick_pending = False
            if not self._busy:
                self._boundary()

        if not 0 <= self.kv_used <= self.profile.kv_capacity:
            raise SimulationError(
                f"KV accounting out of range at t={self.clock}: "
                f"{self.kv_used}/{self.profile.kv_capacity}"
            )
        self._sample()
        return emitted

    def run(self, until: Optional[float] = None) -> SimulationReport:
        while self.events:
            if until is not None and self.events.peek_time() > until + EPS:
                break
            self.step()
        end = self.clock if until is None else max(self.clock, until)
        return self.report(end)

    def _on_arrival(self, rid: int) -> None:
        req = self.requests[rid]
        req.arrived = True
        self.waiting.append(rid)
        if not self._busy:
            self._boundary()

    def _on_iteration(self, batch: Tuple[int, ...]) -> List[TokenEvent]:
        self._busy = False
        emitted: List[TokenEvent] = []
        for rid in batch:
            req = self.requests[rid]
            req.generated += 1
            self.kv_used += 1
            req.gen_times.append(self.clock)
            emitted.append(TokenEvent(rid, req.generated, self.clock))
            for at in req.pacer.push(1, self.clock):
                req.timeline.record(at)
            if req.generated >= req.output_len:
                self._finish(req)
        if self.record_surplus:
            for rid in self.running:
                self.surplus_log.append(
                    (self.clock, rid, self.requests[rid].pacer.surplus(self.clock))
                )
        self._boundary()
        return emitted

    def _on_prefill(self, rid: int) -> None:
        self._busy = False
        self._current_op = None
        self._join(self.requests[rid])
        self._advance()

    def _on_swap(self, rid: int, direction: str) -> None:
        self._busy = False
        self._current_op = None
        req = self.requests[rid]
        if direction == "out":
            self.kv_used -= req.context_len
            self.cpu_kv += req.context_len
        else:
            req.swapped_out = False
            self._join(req)
        self._advance()

    def _join(self, req: Request) -> None:
        req.state = RequestState.RUNNING
        self.running.append(req.id)

    def _finish(self, req: Request) -> None:
        self.running.remove(req.id)
        self.kv_used -= req.context_len
        req.state = RequestState.FINISHED
        req.finish_time = self.clock
        for at in req.pacer.flush_on_finish(self.clock):
            req.timeline.record(at)

    # ------------------------
    # SCHEDULING
    # ------------------------
    def _boundary(self) -> None:
        if self.waiting or self.running:
            decision = self.policy.decide(self.view())
            self.apply_decision(decision)
        self._advance()

    def view(self) -> EngineView:
        ids = sorted(self.running + self.waiting)
        return EngineView(
            now=self.clock,
            snapshots=[self._snapshot(self.requests[i]) for i in ids],
            profile=self.profile,
            kv_used=self.kv_used,
            decode_latency=self.current_decode_latency,
        )

    def _snapshot(self, req: Request) -> RequestSnapshot:
        staleness = self.pacer_options.surplus_staleness
        timeline = (
            req.timeline
            if staleness <= 0
            else req.timeline.truncated(self.clock - staleness)
        )
        return RequestSnapshot(
            id=req.id,
            arrival=req.arrival,
            context_len=req.context_len,
            timeline=timeline,
            params=req.params,
            state=req.state,
            generated=req.generated,
            expected_total=req.output_len,
            swapped_out=req.swapped_out,
        )

    def apply_decision(self, decision: ScheduleDecision) -> None:
        """
        Preemptions first (recompute frees slots now, swap-out frees them when
        the copy completes), then admissions, each paying its prefill or swap-in
        before it joins a decode iteration.
        """
        for rid in decision.preempt_list:
            if rid not in self.running:
                raise SimulationError(f"cannot preempt request {rid}: not running")
        for rid in decision.admit_list:
            if rid not in self.waiting:
                raise SimulationError(f"cannot admit request {rid}: not waiting")

        for rid in decision.preempt_list:
            req = self.requests[rid]
            mechanism = decision.preempt_mechanism or select_mechanism(
                self.profile, req.context_len
            )
            self._preempt(req, mechanism)

        for rid in decision.admit_list:
            req = self.requests[rid]
            self.waiting.remove(rid)
            self._ops.append(("swap_in" if req.swapped_out else "prefill", rid))

    def _preempt(self, req: Request, mechanism: PreemptMechanism) -> None:
        self.running.remove(req.id)
        req.preemptions += 1
        req.state = RequestState.PREEMPTED
        self.waiting.append(req.id)
        if mechanism == PreemptMechanism.RECOMPUTE:
            self.kv_used -= req.context_len
            req.swapped_out = False
        else:
            req.swapped_out = True
            self._ops.append(("swap_out", req.id))
        logger.debug(
            f"Preempted request {req.id} ({mechanism.value}, {req.context_len} tokens) "
            f"at t={self.clock:.4f}"
        )

    def _advance(self) -> None:
        if self._busy:
            return
        if self._ops:
            self._start_op(*self._ops.popleft())
            return
        if self.running:
            self._idle_ticks = 0
            self._guard_growth()
            self._start_iteration()
            return
        self.current_decode_latency = 0.0
        if self.waiting and not self._tick_pending:
            self._idle_ticks += 1
            if self._idle_ticks > MAX_IDLE_TICKS:
                raise SimulationError(
                    f"no progress: {len(self.waiting)} requests waiting on an idle engine"
                )
            self._tick_pending = True
            self.events.push(self.clock + IDLE_TICK_S, EventKind.SCHEDULE_TICK)

    def _start_op(self, kind: str, rid: int) -> None:
        req = self.requests[rid]
        ctx = req.context_len
        self._busy = True
        self._current_op = (kind, rid)
        if kind == "swap_out":
            cost = preemption_overhead(self.profile, ctx, PreemptMechanism.SWAP)[0]
            self.events.push(self.clock + cost, EventKind.SWAP_COMPLETE, rid, "out")
            return
        self._allocate(req)
        if kind == "swap_in":
            self.cpu_kv -= ctx
            cost = preemption_overhead(self.profile, ctx, PreemptMechanism.SWAP)[1]
            self.events.push(self.clock + cost, EventKind.SWAP_COMPLETE, rid, "in")
        else:
            cost = prefill_latency(self.profile, ctx)
            self.events.push(self.clock + cost, EventKind.PREFILL_COMPLETE, rid)

    def _allocate(self, req: Request) -> None:
        if self.kv_used + req.context_len > self.profile.kv_capacity:
            raise SimulationError(
                f"admitting request {req.id} ({req.context_len} tokens) would exceed "
                f"KV capacity: {self.kv_used}/{self.profile.kv_capacity} in use"
            )
        self.kv_used += req.context_len

    def _guard_growth(self) -> None:
        """Every running request needs one more slot for the token it is about to decode."""
        while self.running and self.kv_used + len(self.running) > self.profile.kv_capacity:
            newest = max(self.running, key=lambda r: (self.requests[r].arrival, r))
            logger.debug(f"KV cache full; evicting request {newest}")
            self._preempt(self.requests[newest], PreemptMechanism.RECOMPUTE)

    def _start_iteration(self) -> None:
        batch = tuple(self.running)
        latency = decode_latency(self.profile, len(batch))
        self.current_decode_latency = latency
        self._busy = True
        self.events.push(self.clock + latency, EventKind.ITERATION_COMPLETE, payload=batch)

    # ------------------------
    # OBSERVATION
    # ------------------------
    def _sample(self) -> None:
        preempted = sum(1 for rid in self.waiting if self.requests[rid].preemptions)
        sample = TimeSample(
            time=self.clock,
            queue_len=len(self.waiting) - preempted,
            preempted=preempted,
            running=len(self.running),
            kv_frac=self.kv_used / self.profile.kv_capacity,
            cpu_kv=self.cpu_kv,
        )
        if self.timeseries and self.timeseries[-1].time == self.clock:
            self.timeseries[-1] = sample
        else:
            self.timeseries.append(sample)

    def kv_holders(self) -> int:
        """Slots recounted from request state; equals kv_used between events."""
        held = sum(self.requests[r].context_len for r in self.running)
        pending = list(self._ops)
        if self._current_op is not None and self._current_op[0] != "swap_out":
            held += self.requests[self._current_op[1]].context_len
        elif self._current_op is not None:
            pending.append(self._current_op)
        held += sum(
            self.requests[r].context_len for kind, r in pending if kind == "swap_out"
        )
        return held

    def report(self, end_time: float) -> SimulationReport:
        results: List[RequestResult] = []
        for req in sorted(self.requests.values(), key=lambda r: r.id):
            if not req.arrived:
                continue
            results.append(_result(req, end_time))
        for req in self.rejected:
            results.append(
                RequestResult.rejected(
                    req.id, req.arrival, req.input_len, req.output_len, req.params
                )
            )
        results.sort(key=lambda r: r.id)
        not_arrived = sum(1 for r in self.requests.values() if not r.arrived)
        if not_arrived:
            logger.info(f"{not_arrived} requests arrive after t={end_time}; left out")
        return SimulationReport(
            requests=results,
            timeseries=list(self.timeseries),
            surplus=list(self.surplus_log),
            policy=self.policy.name,
            end_time=end_time,
        )


def _result(req: Request, end_time: float) -> RequestResult:
    deliveries = req.timeline.delivery_times
    finished = req.state == RequestState.FINISHED
    if finished:
        value = qoe(req.timeline).value
    else:
        value = evaluate_partial(
            req.timeline, req.params, max(end_time, req.arrival), req.output_len
        ).value
    ttft = deliveries[0] - req.arrival if deliveries else None
    tds = None
    if len(deliveries) >= 2 and deliveries[-1] - deliveries[0] > EPS:
        tds = (len(deliveries) - 1) / (deliveries[-1] - deliveries[0])
    return RequestResult(
        id=req.id,
        arrival=req.arrival,
        input_len=req.input_len,
        output_len=req.output_len,
        generated=req.generated,
        state="finished" if finished else "unfinished",
        ttft=ttft,
        qoe=value,
        avg_tds=tds,
        preemptions=req.preemptions,
        finish_time=req.finish_time,
        ttft_target=req.params.ttft_target,
        consumption_speed=req.params.consumption_speed,
    )


def run(
    workload: Sequence[TraceRecord],
    policy: Policy,
    profile: LatencyProfile,
    until: Optional[float] = None,
    pacer_options: PacerOptions = PacerOptions(),
    record_surplus: bool = False,
) -> SimulationReport:
    engine = ServingEngine(profile, policy, pacer_options, record_surplus)
    engine.load(workload)
    report = engine.run(until)
    logger.info(
        f"Simulated {len(report.requests)} requests with {policy.name} "
        f"to t={report.end_time:.2f}s"
    )
    return report
