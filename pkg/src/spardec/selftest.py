"""Invariant suites runnable without a test harness.

Each suite re-checks a core contract on freshly generated inputs: decoding
losslessness, selection-oracle agreement, scheduler balance, pool page
conservation, cost-model identities, and workload determinism. The CLI maps
any violation to exit code 3. Sizes are chosen to finish in seconds; the
pytest suite is the exhaustive version of these checks.
"""

from __future__ import annotations

import math

import numpy as np

from .costmodel import CostModelParams, SpecConfig, speedup
from .engine import DecodeRequest, decode_to_completion, greedy_decode
from .errors import SpardecError
from .kvpool import KvPool, KvPolicy
from .model import ModelConfig, init_model
from .scheduler import (
    PhaseBuckets,
    SchedPolicy,
    assign_new_request,
    balance_metric,
)
from .selection import select_critical_tokens
from .simulate import KvPoolConfig, SimConfig, run_cost_sim
from .scheduler import PipelineMode
from .workload import ArrivalKind, ArrivalSpec, LengthDist, LengthSpec, WorkloadSpec, generate_workload


def _check_lossless(fast: bool) -> list[str]:
    problems: list[str] = []
    cases = [(0, 3, 0.25), (1, 1, 1.0)] if fast else [(0, 3, 0.25), (1, 1, 1.0), (2, 5, 0.1), (3, 2, 0.5)]
    for seed, k, sparsity in cases:
        config = ModelConfig(
            num_layers=2, num_q_heads=4, num_kv_heads=2, head_dim=8, vocab_size=64, seed=seed
        )
        model = init_model(config)
        rng = np.random.default_rng(seed)
        prompt = rng.integers(0, config.vocab_size, size=12).tolist()
        committed, _ = decode_to_completion(
            model, DecodeRequest(request_id=0, prompt=prompt, max_output=32), k, sparsity
        )
        oracle = greedy_decode(model, prompt, 32)
        if committed != oracle:
            problems.append(f"losslessness broke at seed={seed} k={k} s={sparsity}")
    return problems


def _check_selection(fast: bool) -> list[str]:
    problems: list[str] = []
    rng = np.random.default_rng(7)
    for _ in range(50 if fast else 200):
        n = int(rng.integers(1, 256))
        importance = rng.random(n)
        if rng.random() < 0.5:  # force ties
            importance = np.round(importance, 1)
        budget = int(rng.integers(1, n + 1))
        got = select_critical_tokens(importance, budget)
        order = sorted(range(n), key=lambda i: (-importance[i], i))[:budget]
        if list(got.positions) != sorted(order):
            problems.append(f"top-k mismatch at n={n} budget={budget}")
            break
    return problems


def _check_scheduler(fast: bool) -> list[str]:
    problems: list[str] = []
    k = 7
    buckets = PhaseBuckets.empty(k)
    for _ in range(200 if fast else 1000):
        assign_new_request(buckets, SchedPolicy.UNIFIED)
        if buckets.spread() > 1:
            problems.append("greedy packing let bucket spread exceed 1")
            break
    naive = [9, 9, 27] * 4
    report = balance_metric(naive)
    if not math.isclose(report.max_over_mean, 27 / 15):
        problems.append("naive cohort peak/mean off")
    return problems


def _check_kvpool(fast: bool) -> list[str]:
    problems: list[str] = []
    pool = KvPool(capacity_pages=100, page_bytes=8, chunk_pages=16, policy=KvPolicy.OFFLOAD)
    pool.admit("a")
    pool.admit("b")
    pool.allocate("a", 60)
    pool.allocate("b", 40)
    before = pool.pages_of("a")
    result = pool.allocate("b", 20)  # pressure: 20 of a's pages must leave
    if result.granted:
        problems.append("pool granted beyond capacity")
    pool.step(100, 100, allow_reload=False)
    if not pool.allocate("b", 20).granted:
        problems.append("offload did not make room")
    if pool.occupied_pages != 100 or pool.free_pages != 0:
        problems.append("conservation after offload broke")
    pool.release("b")
    pool.step(100, 100)
    if pool.pages_of("a") != before or not pool.is_schedulable("a"):
        problems.append("offload/reload round trip lost pages")
    try:
        pool.check()
    except SpardecError as exc:
        problems.append(f"pool invariant: {exc}")
    return problems


def _check_costmodel(fast: bool) -> list[str]:
    problems: list[str] = []
    params = CostModelParams()
    point = SpecConfig(k=16, alpha=0.75, sparsity=0.05, batch=64, kv_bytes=1e9)
    report = speedup(params, point)
    if abs(report.attn_reduction - 13.0 / 1.8) > 1e-12:
        problems.append("attention-reduction arithmetic off")
    if abs(report.eta - report.t_base_ms / report.t_spec_ms) > 1e-12:
        problems.append("eta is not t_base/t_spec")
    rng = np.random.default_rng(11)
    for _ in range(20 if fast else 100):
        k = int(rng.integers(1, 20))
        alpha = float(rng.uniform(0.05, 0.95))
        s = float(rng.uniform(0.05, 0.95))
        batch = float(rng.uniform(1, 512))
        kv = float(rng.uniform(1e6, 1e10))
        lo = speedup(params, SpecConfig(k, alpha, s, batch, kv)).eta
        hi_alpha = speedup(params, SpecConfig(k, min(1.0, alpha + 0.04), s, batch, kv)).eta
        hi_s = speedup(params, SpecConfig(k, alpha, min(1.0, s + 0.04), batch, kv)).eta
        if hi_alpha < lo - 1e-12 or hi_s > lo + 1e-12:
            problems.append("eta monotonicity violated")
            break
    return problems


def _check_workload(fast: bool) -> list[str]:
    problems: list[str] = []
    spec = WorkloadSpec(
        n_requests=64,
        input_len=LengthSpec(LengthDist.CONSTANT, 32),
        output_len=LengthSpec(LengthDist.NORMAL, 96, 32),
        arrival=ArrivalSpec(ArrivalKind.START),
        seed=5,
    )
    if generate_workload(spec) != generate_workload(spec):
        problems.append("workload generation is not deterministic")
    if min(r.output_len for r in generate_workload(spec)) < 1:
        problems.append("output length fell below the floor")
    return problems


def _check_pipeline(fast: bool) -> list[str]:
    problems: list[str] = []
    workload = WorkloadSpec(
        n_requests=9,
        input_len=LengthSpec(LengthDist.CONSTANT, 16),
        output_len=LengthSpec(LengthDist.CONSTANT, 40),
        seed=3,
    )
    kv = KvPoolConfig(capacity_pages=4096, page_bytes=64)
    params = CostModelParams()
    base = dict(k=2, alpha=1.0, sparsity=0.5, max_batch=9, cpu_ms_per_verify=1.0)
    delayed = run_cost_sim(workload, params, SimConfig(pipeline=PipelineMode.DELAYED, **base), kv)
    sync = run_cost_sim(workload, params, SimConfig(pipeline=PipelineMode.SYNCHRONOUS, **base), kv)
    for summary in delayed.requests:
        if summary.stall_absences != max(0, summary.rounds - 1):
            problems.append(f"request {summary.request_id} missed its one-stall-per-round contract")
            break
    if any(s.stall_absences != 0 for s in sync.requests):
        problems.append("synchronous mode stalled a request")
    if delayed.emitted_tokens != sync.emitted_tokens:
        problems.append("paired runs emitted different token counts")
    return problems


_SUITES = (
    ("losslessness", _check_lossless),
    ("selection", _check_selection),
    ("scheduler", _check_scheduler),
    ("kv-pool", _check_kvpool),
    ("cost-model", _check_costmodel),
    ("workload", _check_workload),
    ("pipeline", _check_pipeline),
)


def run_selftest(fast: bool = False) -> int:
    """Run every suite, print one line per suite, return the violation count."""
    failures = 0
    for name, suite in _SUITES:
        try:
            problems = suite(fast)
        except SpardecError as exc:
            problems = [f"raised {type(exc).__name__}: {exc}"]
        if problems:
            failures += len(problems)
            for p in problems:
                print(f"FAIL - {name}: {p}")
        else:
            print(f"ok - {name}")
    return failures
