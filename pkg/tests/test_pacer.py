import math

import numpy as np
import pytest

from pacer import TokenPacer
from qoe import QoeParams, TokenTimeline, qoe
from utils import PacerError


def make_pacer(ttft=1.0, speed=1.0, **kwargs):
    return TokenPacer(QoeParams(ttft, speed), 0.0, **kwargs)


def test_burst_is_released_at_reading_speed():
    pacer = make_pacer(speed=2.0)
    pacer.push(10, 1.0)
    np.testing.assert_allclose(pacer.release_times, 1.0 + np.arange(10) * 0.5)
    assert pacer.pacing_ok()


def test_late_tokens_are_released_on_arrival():
    pacer = make_pacer()
    pacer.push(1, 0.5)
    pacer.push(1, 3.0)
    pacer.push(1, 3.1)
    assert pacer.release_times == pytest.approx([1.0, 3.0, 4.0])


def test_surplus_counts_buffered_reading_time():
    pacer = make_pacer()
    assert pacer.surplus(0.5) == 0.0
    pacer.push(5, 1.0)
    assert pacer.surplus(1.0) == pytest.approx(5.0)
    assert pacer.buffered(1.0) == 5


def test_surplus_is_zero_once_the_buffer_drains():
    pacer = make_pacer()
    pacer.push(5, 1.0)
    assert pacer.surplus(10.0) == 0.0
    assert pacer.buffered(10.0) == 0


def test_surplus_is_unbounded_after_finish():
    pacer = make_pacer()
    pacer.push(2, 1.0)
    pacer.flush_on_finish(1.0)
    assert math.isinf(pacer.surplus(1.0))


def test_flush_shows_buffered_tokens_at_once():
    pacer = make_pacer()
    pacer.push(3, 1.0)
    before = pacer.qoe().value
    pacer.flush_on_finish(1.0)
    assert pacer.display_times == pytest.approx([1.0, 1.0, 1.0])
    assert pacer.release_times == pytest.approx([1.0, 2.0, 3.0])
    assert pacer.qoe().value == before


def test_flush_with_empty_buffer_changes_nothing():
    pacer = make_pacer()
    pacer.push(1, 1.0)
    pacer.push(1, 4.0)
    shown = list(pacer.display_times)
    pacer.flush_on_finish(4.0)
    assert pacer.display_times == shown


def test_push_after_finish_raises():
    pacer = make_pacer()
    pacer.push(1, 1.0)
    pacer.flush_on_finish(1.0)
    with pytest.raises(PacerError):
        pacer.push(1, 2.0)


def test_chunking_holds_tokens_until_chunk_fills():
    pacer = make_pacer(chunk_size=4)
    for t in (0.1, 0.2, 0.3):
        assert pacer.push(1, t) == []
    assert pacer.pending_tokens() == 3
    assert pacer.push(1, 0.4) == pytest.approx([0.4] * 4)
    assert pacer.pending_tokens() == 0


def test_flush_sends_a_partial_chunk():
    pacer = make_pacer(chunk_size=4)
    pacer.push(2, 0.5)
    assert pacer.flush_on_finish(0.6) == pytest.approx([0.6, 0.6])
    assert len(pacer.release_times) == 2


def test_chunk_size_one_matches_plain_push():
    plain = make_pacer(speed=3.0)
    chunked = make_pacer(speed=3.0, chunk_size=1)
    for t in (0.2, 0.9, 1.4, 4.0):
        assert plain.push(1, t) == chunked.push(1, t)
    assert plain.release_times == chunked.release_times


def test_chunked_delivery_switches_mode_before_first_push():
    pacer = make_pacer().chunked_delivery(4)
    for i in range(1, 4):
        assert pacer.push(1, 0.1 * i) == []
    assert pacer.push(1, 0.4) == pytest.approx([0.4] * 4)
    with pytest.raises(PacerError):
        pacer.chunked_delivery(2)
    with pytest.raises(ValueError):
        make_pacer().chunked_delivery(0)


def test_network_delay_shifts_receive_times():
    pacer = make_pacer(network_delay=0.25)
    assert pacer.push(1, 2.0) == pytest.approx([2.25])
    assert pacer.release_times == pytest.approx([2.25])


def test_bypass_displays_on_receipt():
    pacer = make_pacer(bypass=True)
    pacer.push(3, 0.5)
    assert pacer.display_times == pytest.approx([0.5, 0.5, 0.5])
    assert pacer.release_times == pytest.approx([1.0, 2.0, 3.0])


def test_paced_qoe_equals_qoe_of_raw_deliveries(rng):
    for _ in range(1000):
        n = int(rng.integers(1, 40))
        params = QoeParams(float(rng.uniform(0.2, 3.0)), float(rng.uniform(1.0, 10.0)))
        deliveries = np.cumsum(rng.exponential(rng.uniform(0.05, 1.0), size=n))
        pacer = TokenPacer(params, 0.0)
        for t in deliveries:
            pacer.push(1, float(t))
        raw = qoe(TokenTimeline(0.0, params, deliveries.tolist())).value
        assert pacer.qoe().value == pytest.approx(raw, abs=1e-9)
        assert pacer.pacing_ok()


def test_buffer_hides_a_preemption_gap():
    pacer = make_pacer()
    pacer.push(10, 1.0)
    assert pacer.surplus(8.0) == pytest.approx(3.0)
    for i in range(5):
        pacer.push(1, 8.0 + 0.1 * i)
    np.testing.assert_allclose(np.diff(pacer.release_times), 1.0)
    assert pacer.qoe().value == 1.0


def test_flush_never_worsens_qoe(rng):
    for _ in range(200):
        n = int(rng.integers(1, 30))
        params = QoeParams(float(rng.uniform(0.2, 3.0)), float(rng.uniform(1.0, 10.0)))
        deliveries = np.cumsum(rng.exponential(rng.uniform(0.01, 1.0), size=n))
        paced, flushed = TokenPacer(params, 0.0), TokenPacer(params, 0.0)
        for t in deliveries:
            paced.push(1, float(t))
            flushed.push(1, float(t))
        flushed.flush_on_finish(float(deliveries[-1]))
        assert flushed.qoe().value >= paced.qoe().value - 1e-12
        assert all(d <= r + 1e-12 for d, r in zip(flushed.display_times, flushed.release_times))


def test_large_surplus_masks_chunking():
    plain = make_pacer()
    chunked = make_pacer(chunk_size=4)
    for i in range(1, 21):
        plain.push(1, 0.1 * i)
        chunked.push(1, 0.1 * i)
    assert chunked.pending_tokens() == 0
    assert chunked.release_times == pytest.approx(plain.release_times)
    assert chunked.qoe().value == plain.qoe().value == 1.0
