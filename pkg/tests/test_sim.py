"""Serving-simulation tests: completion and conservation at both fidelity
levels, paired policy comparisons riding the keyed acceptance draws, pipeline
stall accounting, memory-policy behavior under a trace that overflows the
device, and the analytic echo of the closed-form model.
"""

import dataclasses

import numpy as np
import pytest

from spardec.costmodel import CostModelParams, speedup
from spardec.engine import greedy_decode
from spardec.errors import ConfigurationError, SimulationError
from spardec.kvpool import KvPolicy
from spardec.model import ModelConfig, init_model
from spardec.scheduler import PipelineMode, SchedPolicy, balance_metric
from spardec.simulate import (
    ITERATION_CSV_COLUMNS,
    IterationRow,
    KvPoolConfig,
    SimConfig,
    analytic_config,
    run_cost_sim,
    run_token_sim,
)
from spardec.workload import (
    ArrivalKind,
    ArrivalSpec,
    LengthDist,
    LengthSpec,
    WorkloadSpec,
    generate_workload,
)

PARAMS = CostModelParams()
MODEL_CFG = ModelConfig(num_layers=2, num_q_heads=4, num_kv_heads=2, head_dim=8, vocab_size=48, seed=0)


def const_workload(n=8, inp=16, out=40, seed=0, **kw):
    return WorkloadSpec(
        n_requests=n,
        input_len=LengthSpec(LengthDist.CONSTANT, inp),
        output_len=LengthSpec(LengthDist.CONSTANT, out),
        seed=seed,
        **kw,
    )


def sim_cfg(k=4, alpha=0.75, sparsity=0.25, max_batch=8, **kw):
    return SimConfig(k=k, alpha=alpha, sparsity=sparsity, max_batch=max_batch, **kw)


def roomy_kv(**kw):
    base = dict(capacity_pages=65536, page_bytes=64)
    base.update(kw)
    return KvPoolConfig(**base)


# -- completion and determinism ----------------------------------------------


def test_cost_sim_completes_every_request():
    workload = const_workload()
    report = run_cost_sim(workload, PARAMS, sim_cfg(), roomy_kv())
    assert report.level == "cost"
    assert report.emitted_tokens == 8 * 40
    assert len(report.requests) == 8
    assert all(s.emitted == 40 for s in report.requests)
    assert all(s.rounds >= 1 for s in report.requests)
    assert report.realized_alpha is None
    assert report.acceptance_histogram is None
    assert report.tokens_per_second > 0


def test_cost_sim_is_deterministic():
    a = run_cost_sim(const_workload(), PARAMS, sim_cfg(), roomy_kv())
    b = run_cost_sim(const_workload(), PARAMS, sim_cfg(), roomy_kv())
    assert a == b


def test_mixed_lengths_complete():
    workload = WorkloadSpec(
        n_requests=10,
        input_len=LengthSpec(LengthDist.CONSTANT, 12),
        output_len=LengthSpec(LengthDist.NORMAL, 30, 12),
        seed=4,
    )
    totals = {r.request_id: r.output_len for r in generate_workload(workload)}
    report = run_cost_sim(workload, PARAMS, sim_cfg(max_batch=4), roomy_kv())
    assert {s.request_id: s.emitted for s in report.requests} == totals


def test_breakdown_sums_to_total_time():
    report = run_cost_sim(const_workload(), PARAMS, sim_cfg(cpu_ms_per_verify=0.8), roomy_kv())
    assert report.breakdown.total_ms == pytest.approx(report.total_ms)
    assert sum(r.latency_ms for r in report.iterations) == pytest.approx(report.total_ms)


def test_csv_columns_mirror_row_fields():
    names = tuple(f.name for f in dataclasses.fields(IterationRow))
    assert names == ITERATION_CSV_COLUMNS


def test_empty_workload_is_fine():
    report = run_cost_sim(const_workload(n=0), PARAMS, sim_cfg(), roomy_kv())
    assert report.emitted_tokens == 0
    assert report.iterations == ()
    assert report.tokens_per_second == 0.0


def test_staggered_arrivals_complete():
    workload = const_workload(
        n=12, arrival=ArrivalSpec(ArrivalKind.POISSON, rate_per_s=50.0), seed=9
    )
    report = run_cost_sim(workload, PARAMS, sim_cfg(max_batch=4), roomy_kv())
    assert report.emitted_tokens == 12 * 40
    last_arrival = max(r.arrival_ms for r in generate_workload(workload))
    assert report.total_ms >= last_arrival


def test_iteration_cap_raises():
    with pytest.raises(SimulationError):
        run_cost_sim(const_workload(out=500), PARAMS, sim_cfg(max_iterations=3), roomy_kv())


# -- pairing and the pipeline ------------------------------------------------


def paired_reports(cpu_ms, seed=0):
    workload = const_workload(n=9, out=36, seed=seed)
    shared = dict(k=2, alpha=1.0, sparsity=0.5, max_batch=9, cpu_ms_per_verify=cpu_ms)
    delayed = run_cost_sim(
        workload, PARAMS, sim_cfg(pipeline=PipelineMode.DELAYED, **shared), roomy_kv()
    )
    sync = run_cost_sim(
        workload, PARAMS, sim_cfg(pipeline=PipelineMode.SYNCHRONOUS, **shared), roomy_kv()
    )
    return delayed, sync


def test_pipeline_modes_emit_identical_tokens():
    delayed, sync = paired_reports(cpu_ms=1.0)
    assert delayed.emitted_tokens == sync.emitted_tokens
    for d, s in zip(delayed.requests, sync.requests):
        assert (d.request_id, d.emitted, d.accepted_total) == (
            s.request_id,
            s.emitted,
            s.accepted_total,
        )


def test_delayed_mode_stalls_exactly_once_per_round():
    delayed, sync = paired_reports(cpu_ms=1.0)
    for s in delayed.requests:
        assert s.stall_absences == s.rounds - 1
    assert all(s.stall_absences == 0 for s in sync.requests)


def test_delayed_wins_when_cpu_work_is_heavy():
    delayed, sync = paired_reports(cpu_ms=1.5)
    assert delayed.total_ms < sync.total_ms
    assert delayed.breakdown.cpu_ms < sync.breakdown.cpu_ms


def test_delayed_costs_extra_iterations_when_cpu_is_free():
    delayed, sync = paired_reports(cpu_ms=0.0)
    assert delayed.total_ms >= sync.total_ms
    assert len(delayed.iterations) > len(sync.iterations)


def test_acceptance_draws_survive_memory_pressure():
    # Draws are keyed by (seed, request, round), not by position in a shared
    # stream, so squeezing the pool delays rounds without changing them.
    workload = const_workload(n=6, inp=16, out=30, seed=2)
    cfg = sim_cfg(alpha=0.6)
    roomy = run_cost_sim(workload, PARAMS, cfg, roomy_kv(page_bytes=147456))
    tight_kv = KvPoolConfig(
        capacity_pages=250, page_bytes=147456, chunk_pages=32, policy=KvPolicy.OFFLOAD
    )
    tight = run_cost_sim(workload, PARAMS, cfg, tight_kv)
    assert max(r.offloaded_pages for r in tight.iterations) > 0
    for x, y in zip(roomy.requests, tight.requests):
        assert x.accepted_total == y.accepted_total
        assert x.drafted_total == y.drafted_total
        assert x.rounds == y.rounds


# -- load balance ------------------------------------------------------------


def steady_series(report, k):
    gemm = [r.gemm_tokens for r in report.iterations if r.gemm_tokens > 0]
    return gemm[2 * (k + 1) : -2 * (k + 1)]


def test_unified_load_is_flat_and_naive_is_spiky():
    workload = const_workload(n=9, out=60)
    shared = dict(k=2, alpha=1.0, sparsity=0.5, max_batch=9, pipeline=PipelineMode.SYNCHRONOUS)
    unified = run_cost_sim(
        workload, PARAMS, sim_cfg(sched_policy=SchedPolicy.UNIFIED, **shared), roomy_kv()
    )
    naive = run_cost_sim(
        workload, PARAMS, sim_cfg(sched_policy=SchedPolicy.NAIVE, **shared), roomy_kv()
    )
    assert unified.emitted_tokens == naive.emitted_tokens
    flat = balance_metric(steady_series(unified, 2))
    spiky = balance_metric(steady_series(naive, 2))
    assert flat.max_over_mean < 1.25
    assert spiky.max_over_mean > 1.5


def test_steady_gemm_tracks_closed_form():
    # 9 requests spread over 3 phases at full acceptance: the closed form
    # says 15 GEMM tokens per iteration.
    workload = const_workload(n=9, out=60)
    report = run_cost_sim(
        workload,
        PARAMS,
        sim_cfg(k=2, alpha=1.0, sparsity=0.5, max_batch=9, pipeline=PipelineMode.SYNCHRONOUS),
        roomy_kv(),
    )
    steady = steady_series(report, 2)
    assert steady
    ideal = 9 * (2 * 2 + 1) / (2 + 1)
    assert all(abs(g - ideal) <= 3 for g in steady)


# -- memory policies under pressure ------------------------------------------


def crunch_setup(policy):
    # 8 requests of ~101 pages against 600 pages of device: the pool must
    # shed about a quarter of the steady footprint.
    workload = const_workload(n=8, inp=32, out=64, seed=5)
    kv = KvPoolConfig(
        capacity_pages=600, page_bytes=147456, chunk_pages=64, pcie_gbps=16.0, policy=policy
    )
    return workload, sim_cfg(k=4, alpha=0.8, sparsity=0.1, max_batch=8), kv


def test_offload_policy_sheds_pages_without_recompute():
    workload, cfg, kv = crunch_setup(KvPolicy.OFFLOAD)
    report = run_cost_sim(workload, PARAMS, cfg, kv)
    assert report.emitted_tokens == 8 * 64
    assert max(r.offloaded_pages for r in report.iterations) > 0
    assert report.recomputation_ratio == 0.0
    assert max(r.device_util for r in report.iterations) >= 0.99
    assert any(s.pressure_absences > 0 for s in report.requests)


def test_preempt_policy_pays_recomputation():
    workload, cfg, kv = crunch_setup(KvPolicy.PREEMPT)
    report = run_cost_sim(workload, PARAMS, cfg, kv)
    assert report.emitted_tokens == 8 * 64
    assert report.recomputation_ratio > 0.0
    assert all(r.offloaded_pages == 0 for r in report.iterations)


def test_oracle_policy_defers_admission_instead():
    workload, cfg, kv = crunch_setup(KvPolicy.ORACLE)
    kv = dataclasses.replace(kv, capacity_pages=350)  # fits 3 reservations
    report = run_cost_sim(workload, PARAMS, cfg, kv)
    assert report.emitted_tokens == 8 * 64
    assert all(r.offloaded_pages == 0 for r in report.iterations)
    assert report.recomputation_ratio == 0.0
    assert all(s.pressure_absences == 0 for s in report.requests)


def test_pool_transfer_time_shows_when_nothing_can_run():
    # One huge resident request plus one that cannot fit until pages move:
    # some iterations contain nothing but transfer waiting.
    workload = const_workload(n=2, inp=40, out=20, seed=6)
    kv = KvPoolConfig(capacity_pages=70, page_bytes=147456, chunk_pages=8, policy=KvPolicy.OFFLOAD)
    report = run_cost_sim(workload, PARAMS, sim_cfg(k=2, max_batch=2), kv)
    assert report.emitted_tokens == 2 * 20
    assert report.breakdown.other_ms > 0


# -- the analytic echo -------------------------------------------------------


def test_analytic_config_footprint_arithmetic():
    workload = const_workload(inp=32, out=96)
    cfg = sim_cfg(max_batch=16)
    point = analytic_config(cfg, workload, page_bytes=128)
    assert point.kv_bytes == 128 * (32 + 48) * 16
    assert point.batch == 16
    assert point.k == cfg.k


def test_report_eta_echoes_closed_form():
    workload = const_workload()
    cfg = sim_cfg()
    kv = roomy_kv(page_bytes=147456)
    report = run_cost_sim(workload, PARAMS, cfg, kv)
    expect = speedup(PARAMS, analytic_config(cfg, workload, 147456)).eta
    assert report.eta == pytest.approx(expect, rel=1e-12)


# -- token level ---------------------------------------------------------------


def test_token_sim_outputs_match_oracle():
    workload = const_workload(n=4, inp=12, out=24, seed=7)
    report = run_token_sim(workload, MODEL_CFG, sim_cfg(k=3, sparsity=0.3, max_batch=4), roomy_kv())
    assert report.level == "token"
    assert report.emitted_tokens == 4 * 24
    assert 0.0 <= report.realized_alpha <= 1.0
    assert set(report.acceptance_histogram) <= set(range(4))
    model = init_model(MODEL_CFG)
    for rid, output in report.outputs.items():
        rng = np.random.default_rng(np.random.SeedSequence([workload.seed, rid]))
        prompt = rng.integers(0, MODEL_CFG.vocab_size, size=12).tolist()
        assert output == greedy_decode(model, prompt, 24)


def test_token_sim_histogram_counts_rounds():
    workload = const_workload(n=3, inp=10, out=20, seed=8)
    report = run_token_sim(workload, MODEL_CFG, sim_cfg(k=3, sparsity=0.2, max_batch=3), roomy_kv())
    assert sum(report.acceptance_histogram.values()) == sum(s.rounds for s in report.requests)
    assert report.realized_alpha == pytest.approx(
        sum(s.accepted_total for s in report.requests)
        / sum(s.drafted_total for s in report.requests)
    )


def test_token_sim_rejects_preemption():
    workload = const_workload(n=2)
    kv = roomy_kv(policy=KvPolicy.PREEMPT)
    with pytest.raises(ConfigurationError):
        run_token_sim(workload, MODEL_CFG, sim_cfg(max_batch=2), kv)


def test_token_sim_under_offload_pressure_stays_lossless():
    workload = const_workload(n=4, inp=16, out=24, seed=9)
    kv = KvPoolConfig(capacity_pages=120, page_bytes=64, chunk_pages=16, policy=KvPolicy.OFFLOAD)
    report = run_token_sim(workload, MODEL_CFG, sim_cfg(k=3, sparsity=0.4, max_batch=4), kv)
    assert report.emitted_tokens == 4 * 24
    assert max(r.offloaded_pages for r in report.iterations) > 0
    assert len(report.outputs) == 4
