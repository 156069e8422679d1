"""Scheduler tests: phase-bucket packing, first-round truncation, batch
formation with the delayed verification pipeline, and load-balance metrics.
"""

import numpy as np
import pytest

from spardec.errors import ConfigurationError, ContractError
from spardec.scheduler import (
    BalanceReport,
    BatchCandidate,
    IterationBatch,
    PhaseBuckets,
    PipelineMode,
    PipelineSlot,
    SchedPolicy,
    assign_new_request,
    balance_metric,
    first_round_draft_len,
    form_batch,
    step_pipeline,
)


def spread_requests(n, k, policy=SchedPolicy.UNIFIED):
    buckets = PhaseBuckets.empty(k)
    phases = [assign_new_request(buckets, policy) for _ in range(n)]
    return buckets, phases


def steady_gemm(counts, k):
    """One steady-state iteration's GEMM tokens via the batch former."""
    cands = []
    rid = 0
    for phase, c in enumerate(counts):
        for _ in range(c):
            cands.append(
                BatchCandidate(request_id=rid, due_verify=phase == k, verify_tokens=k + 1)
            )
            rid += 1
    batch, stalled = form_batch(cands, [], PipelineMode.SYNCHRONOUS)
    assert stalled == []
    return batch.gemm_tokens


# -- phase buckets -----------------------------------------------------------


def test_empty_buckets_have_k_plus_one_slots():
    assert PhaseBuckets.empty(4).counts == [0] * 5
    with pytest.raises(ConfigurationError):
        PhaseBuckets.empty(0)
    with pytest.raises(ContractError):
        PhaseBuckets(k=2, counts=[0, 0])
    with pytest.raises(ContractError):
        PhaseBuckets(k=1, counts=[0, -1])


def test_least_loaded_tie_prefers_lowest_phase():
    buckets = PhaseBuckets(k=2, counts=[1, 1, 1])
    assert buckets.least_loaded() == 0
    buckets = PhaseBuckets(k=2, counts=[1, 0, 0])
    assert buckets.least_loaded() == 1


def test_packing_keeps_spread_at_most_one():
    buckets = PhaseBuckets.empty(7)
    for _ in range(1500):
        assign_new_request(buckets, SchedPolicy.UNIFIED)
        assert buckets.spread() <= 1


def test_packing_survives_departures():
    rng = np.random.default_rng(0)
    buckets = PhaseBuckets.empty(5)
    for _ in range(2000):
        if rng.random() < 0.6 or sum(buckets.counts) == 0:
            assign_new_request(buckets, SchedPolicy.UNIFIED)
        else:
            occupied = [p for p, c in enumerate(buckets.counts) if c > 0]
            buckets.remove(int(rng.choice(occupied)))
        assert all(c >= 0 for c in buckets.counts)
    with pytest.raises(ContractError):
        PhaseBuckets.empty(3).remove(0)


def test_rotate_is_cyclic_shift():
    buckets = PhaseBuckets(k=3, counts=[1, 2, 3, 4])
    buckets.rotate()
    assert buckets.counts == [4, 1, 2, 3]
    assert buckets.spread() == 3


def test_naive_policy_stacks_phase_zero():
    buckets, phases = spread_requests(12, 4, SchedPolicy.NAIVE)
    assert phases == [0] * 12
    assert buckets.counts == [12, 0, 0, 0, 0]


def test_first_round_draft_len():
    assert first_round_draft_len(6, 0) == 6
    assert first_round_draft_len(6, 6) == 0
    assert first_round_draft_len(6, 4) == 2
    with pytest.raises(ContractError):
        first_round_draft_len(6, 7)
    with pytest.raises(ContractError):
        first_round_draft_len(6, -1)


# -- steady-state load -------------------------------------------------------


def test_steady_gemm_follows_closed_form():
    # B requests spread over k+1 phases: per-iteration GEMM tokens land
    # within one verification cohort of B(2k+1)/(k+1).
    for n, k in [(9, 2), (90, 8), (198, 8), (25, 4)]:
        buckets, _ = spread_requests(n, k)
        for _ in range(k + 1):
            got = steady_gemm(buckets.counts, k)
            ideal = n * (2 * k + 1) / (k + 1)
            assert abs(got - ideal) <= k + 1
            buckets.rotate()


def test_steady_gemm_exact_when_divisible():
    buckets, _ = spread_requests(9, 2)
    assert buckets.counts == [3, 3, 3]
    assert steady_gemm(buckets.counts, 2) == 15  # 9 * 5 / 3


def test_naive_cycle_peaks_at_verification():
    n, k = 90, 8
    series = [n] * k + [n * (k + 1)]
    report = balance_metric(series)
    assert report.mean == pytest.approx(170.0)
    assert report.max_over_mean == pytest.approx(81 / 17)


# -- batch formation ---------------------------------------------------------


def test_form_batch_counts_tokens():
    cands = [
        BatchCandidate(1, due_verify=False, attn_pages_draft=3),
        BatchCandidate(2, due_verify=True, verify_tokens=5, attn_pages_verify=20),
        BatchCandidate(3, due_verify=False, attn_pages_draft=4),
    ]
    batch, stalled = form_batch(cands, [], PipelineMode.DELAYED)
    assert batch.draft_members == (1, 3)
    assert batch.verify_members == (2,)
    assert batch.gemm_tokens == 7
    assert batch.attn_pages == 27
    assert batch.size == 3
    assert stalled == []


def test_form_batch_stalls_pending_members():
    cands = [
        BatchCandidate(1, due_verify=False),
        BatchCandidate(2, due_verify=True, verify_tokens=3),
    ]
    batch, stalled = form_batch(cands, [2], PipelineMode.DELAYED)
    assert stalled == [2]
    assert batch.verify_members == ()
    assert batch.gemm_tokens == 1


def test_form_batch_rejects_pending_outside_delayed():
    cands = [BatchCandidate(1, due_verify=True, verify_tokens=2)]
    with pytest.raises(ContractError):
        form_batch(cands, [1], PipelineMode.SYNCHRONOUS)


def test_pipeline_round_trip():
    slot = PipelineSlot()
    slot = step_pipeline(slot, completed_gpu_work=[4, 7], cpu_results=[])
    assert slot.stalled_verifications == [4, 7]
    assert slot.iteration_index == 1
    slot = step_pipeline(slot, completed_gpu_work=[], cpu_results=[7, 4])
    assert slot.stalled_verifications == []


def test_pipeline_rejects_mismatched_results():
    slot = PipelineSlot(stalled_verifications=[1])
    with pytest.raises(ContractError):
        step_pipeline(slot, completed_gpu_work=[], cpu_results=[2])
    with pytest.raises(ContractError):
        step_pipeline(slot, completed_gpu_work=[], cpu_results=[])


# -- balance metric ----------------------------------------------------------


def test_balance_metric_uniform_series():
    report = balance_metric([15, 15, 15, 15])
    assert report.cov == 0.0
    assert report.max_over_mean == 1.0
    assert report.gemm_series == (15, 15, 15, 15)


def test_balance_metric_accepts_batches():
    batches = [
        IterationBatch((1,), (), 9, 0),
        IterationBatch((1,), (), 9, 0),
        IterationBatch((), (1,), 27, 0),
    ]
    report = balance_metric(batches)
    assert report.mean == pytest.approx(15.0)
    assert report.max_over_mean == pytest.approx(1.8)
    assert report.cov == pytest.approx(np.sqrt(72.0) / 15.0)


def test_balance_metric_rejects_degenerate_input():
    with pytest.raises(ContractError):
        balance_metric([])
    with pytest.raises(ContractError):
        balance_metric([0, 0, 0])
