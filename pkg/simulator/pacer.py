"""
Client-side token pacer.

The server pushes tokens as soon as they are generated; the pacer buffers them and
releases them to the user no faster than the user's consumption speed, starting at
the TTFT target. Release instants follow the same recurrence the QoE metric uses,
so QoE scored on releases equals QoE scored on raw deliveries.
"""

import logging
from typing import List

import numpy as np

from qoe import QoeParams, QoeScore, ideal_timeline, score
from utils import EPS, UNBOUNDED, PacerError

logger = logging.getLogger(__name__)


class TokenPacer:
    def __init__(
        self,
        params: QoeParams,
        arrival: float,
        chunk_size: int = 1,
        network_delay: float = 0.0,
        bypass: bool = False,
    ) -> None:
        if network_delay < 0:
            raise ValueError(f"network_delay must be >= 0, got {network_delay}")
        self.params = params
        self.arrival = arrival
        self.chunk_size = 1
        self.network_delay = network_delay
        self.bypass = bypass

        self.receive_times: List[float] = []
        self.release_times: List[float] = []
        self.display_times: List[float] = []
        self.finished = False
        self._pending: List[float] = []  # generated, waiting to fill a chunk
        self.chunked_delivery(chunk_size)

    @property
    def first_slot(self) -> float:
        return self.arrival + self.params.ttft_target

    # ------------------------
    # SERVER SIDE
    # ------------------------
    def chunked_delivery(self, chunk: int) -> "TokenPacer":
        """Server holds tokens until `chunk` of them can go on the wire together."""
        if chunk < 1:
            raise ValueError(f"chunk_size must be >= 1, got {chunk}")
        if self.receive_times or self._pending:
            raise PacerError("chunk size must be set before the first push")
        self.chunk_size = chunk
        return self

    def push(self, tokens: int, at: float) -> List[float]:
        """
        Hands `tokens` freshly generated tokens to the pacer at server time `at`.
        Returns the client receive times of every token that went on the wire.
        """
        if self.finished:
            raise PacerError("push after end of response")
        if at < self.arrival - EPS:
            raise ValueError(f"push at {at} precedes arrival {self.arrival}")
        self._pending.extend([at] * tokens)
        received: List[float] = []
        while len(self._pending) >= self.chunk_size:
            chunk = self._pending[: self.chunk_size]
            del self._pending[: self.chunk_size]
            received.extend(self._receive(len(chunk), chunk[-1] + self.network_delay))
        return received

    def _receive(self, count: int, at: float) -> List[float]:
        interval = self.params.token_interval
        for _ in range(count):
            if self.release_times:
                release = max(at, self.release_times[-1] + interval)
            else:
                release = max(at, self.first_slot)
            self.receive_times.append(at)
            self.release_times.append(release)
            self.display_times.append(at if self.bypass else release)
        return [at] * count

    def flush_on_finish(self, at: float) -> List[float]:
        """
        End of response: transmits any partial chunk and shows every buffered token
        at once. Release times (used for scoring) are left untouched.
        """
        received: List[float] = []
        if self._pending:
            received = self._receive(len(self._pending), at + self.network_delay)
            self._pending.clear()
        self.finished = True
        for i, release in enumerate(self.release_times):
            shown = max(self.receive_times[i], min(release, at))
            self.display_times[i] = min(self.display_times[i], shown)
        return received

    # ------------------------
    # CLIENT STATE
    # ------------------------
    def buffered(self, at: float) -> int:
        return sum(
            1
            for rcv, rel in zip(self.receive_times, self.release_times)
            if rcv <= at + EPS and rel >= at - EPS
        )

    def surplus(self, at: float) -> float:
        """Seconds until the buffer runs dry at the user's consumption speed."""
        if self.finished:
            return UNBOUNDED
        last = None
        for rcv, rel in zip(reversed(self.receive_times), reversed(self.release_times)):
            if rel < at - EPS:
                break
            if rcv <= at + EPS:
                last = rel if last is None else max(last, rel)
        if last is None:
            return 0.0
        return max(0.0, last + self.params.token_interval - at)

    def qoe(self) -> QoeScore:
        ideal = ideal_timeline(self.arrival, self.params, len(self.release_times))
        return score(np.asarray(self.release_times, dtype=float), ideal)

    def pending_tokens(self) -> int:
        return len(self._pending)

    def pacing_ok(self) -> bool:
        """True when displayed tokens never outpace the reader (flush/bypass excepted)."""
        interval = self.params.token_interval
        return all(
            b - a >= interval - EPS
            for a, b in zip(self.release_times, self.release_times[1:])
        )
