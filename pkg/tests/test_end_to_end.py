import numpy as np
import pytest

from engine import run
from latency import default_profile
from policies import load_policy
from policies.base import PolicySettings
from workload import BurstSpec, LengthDistribution, gen_cyclic_burst

pytestmark = pytest.mark.slow

SEEDS = (1, 2, 3)
KV_CAPACITY = 8192


def bursty_workload(seed, duration_frac=0.35, duration_s=200.0):
    # about 500 requests at the default 2x burst intensity
    burst = BurstSpec(
        intensity=2.0, duration_frac=duration_frac, cycle_len_s=100.0, mean_rate_rps=2.5
    )
    lengths = LengthDistribution(400.0, 300.0, 150.0, 80.0, max_len=4096)
    return gen_cyclic_burst(burst, duration_s, lengths, np.random.default_rng(seed))


def simulate(policy, seed, settings=PolicySettings(), **workload):
    return run(
        bursty_workload(seed, **workload),
        load_policy(policy, settings),
        default_profile(KV_CAPACITY),
    ).summary()


@pytest.fixture(scope="module")
def summaries():
    return {
        policy: [simulate(policy, s) for s in SEEDS] for policy in ("andes", "lqsf", "fcfs")
    }


def mean_of(runs, key):
    return float(np.mean([r[key] for r in runs]))


def test_workload_is_about_five_hundred_requests():
    sizes = [len(bursty_workload(s)) for s in SEEDS]
    assert all(400 <= n <= 600 for n in sizes)


def test_qoe_aware_beats_lqsf_beats_fcfs(summaries):
    andes = mean_of(summaries["andes"], "avg_qoe")
    lqsf = mean_of(summaries["lqsf"], "avg_qoe")
    fcfs = mean_of(summaries["fcfs"], "avg_qoe")
    assert andes > lqsf > fcfs
    assert andes - fcfs >= 0.10


def test_qoe_aware_halves_the_peak_admission_queue(summaries):
    for andes, fcfs in zip(summaries["andes"], summaries["fcfs"]):
        assert andes["peak_queue"] <= 0.5 * fcfs["peak_queue"]


def test_every_request_completes_with_every_policy(summaries):
    for runs in summaries.values():
        for s in runs:
            assert s["n_finished"] == s["n_requests"] - s["n_rejected"]


def test_refiner_cuts_preemptions_and_raises_qoe():
    refined = [simulate("andes", s, duration_frac=0.5) for s in SEEDS]
    ablated = [
        simulate("andes", s, PolicySettings(refiner=False), duration_frac=0.5) for s in SEEDS
    ]
    assert mean_of(ablated, "preemptions_per_request") >= 1.5 * mean_of(
        refined, "preemptions_per_request"
    )
    assert mean_of(ablated, "avg_qoe") < mean_of(refined, "avg_qoe")


def small_workload(seed):
    burst = BurstSpec(intensity=2.0, duration_frac=0.35, cycle_len_s=30.0, mean_rate_rps=1.5)
    lengths = LengthDistribution(200.0, 100.0, 60.0, 30.0, max_len=1024)
    return gen_cyclic_burst(burst, 60.0, lengths, np.random.default_rng(seed))


def test_greedy_is_within_two_points_of_dp_end_to_end():
    def avg_qoe(solver, seed):
        policy = load_policy("andes", PolicySettings(solver=solver))
        return run(small_workload(seed), policy, default_profile(2048)).summary()["avg_qoe"]

    greedy = np.mean([avg_qoe("greedy", s) for s in SEEDS])
    dp = np.mean([avg_qoe("dp", s) for s in SEEDS])
    assert greedy >= dp - 0.02
