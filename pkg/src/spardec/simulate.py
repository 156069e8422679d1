"""Iteration-stepped serving simulation.

Binds the scheduler, the KV pool, and the latency model into one loop. Two
fidelity levels share that loop:

* cost level: requests are length records; per-round acceptance is drawn
  from a stream keyed by (seed, request, round) so policy comparisons are
  paired; each iteration's latency comes from the analytical cost model.
* token level: every request runs the real draft/verify engine on a toy
  model, and each completed request is checked inline against the
  autoregressive oracle.

Prefill is not charged latency: admission grants the prompt's pages and
emits the first token in zero time, so reported numbers are decode-only.
Arrival gaps with nothing in flight are skipped by advancing the clock.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .costmodel import CostModelParams, SpecConfig, speedup, t_attn, t_gemm
from .engine import DecodeRequest, RequestState, draft_step, greedy_decode, prefill, verify_round
from .errors import ConfigurationError, SimulationError
from .kvpool import AllocationResult, KvPolicy, KvPool, PoolSnapshot, utilization_report
from .model import ModelConfig, ToyModel, init_model
from .scheduler import (
    BatchCandidate,
    IterationBatch,
    PhaseBuckets,
    PipelineMode,
    PipelineSlot,
    SchedPolicy,
    assign_new_request,
    first_round_draft_len,
    form_batch,
    step_pipeline,
)
from .selection import compute_budget
from .workload import SimRequest, WorkloadSpec, acceptance_draw, generate_workload


@dataclass(frozen=True)
class KvPoolConfig:
    capacity_pages: int
    page_bytes: int
    chunk_pages: int = 64
    pcie_gbps: float = 16.0
    policy: KvPolicy = KvPolicy.OFFLOAD

    def __post_init__(self) -> None:
        if self.capacity_pages < 1:
            raise ConfigurationError("capacity_pages must be at least 1")
        if self.page_bytes < 1:
            raise ConfigurationError("page_bytes must be at least 1")
        if self.chunk_pages < 1:
            raise ConfigurationError("chunk_pages must be at least 1")
        if self.pcie_gbps <= 0:
            raise ConfigurationError("pcie_gbps must be positive")


@dataclass(frozen=True)
class SimConfig:
    k: int
    alpha: float
    sparsity: float
    max_batch: int
    sched_policy: SchedPolicy = SchedPolicy.UNIFIED
    pipeline: PipelineMode = PipelineMode.DELAYED
    cpu_ms_per_verify: float = 0.0
    max_iterations: int = 1_000_000

    def __post_init__(self) -> None:
        if self.k < 1:
            raise ConfigurationError("k must be at least 1")
        if not 0.0 <= self.alpha <= 1.0:
            raise ConfigurationError("alpha must lie in [0, 1]")
        if not 0.0 < self.sparsity <= 1.0:
            raise ConfigurationError("sparsity must lie in (0, 1]")
        if self.max_batch < 1:
            raise ConfigurationError("max_batch must be at least 1")
        if self.cpu_ms_per_verify < 0:
            raise ConfigurationError("cpu_ms_per_verify cannot be negative")


@dataclass(frozen=True)
class IterationRow:
    iteration: int
    gemm_tokens: int
    attn_bytes: int
    latency_ms: float
    device_util: float
    offloaded_pages: int
    stalled_requests: int


ITERATION_CSV_COLUMNS = (
    "iteration",
    "gemm_tokens",
    "attn_bytes",
    "latency_ms",
    "device_util",
    "offloaded_pages",
    "stalled_requests",
)


@dataclass(frozen=True)
class Breakdown:
    cpu_ms: float
    attn_ms: float
    gemm_ms: float
    other_ms: float

    @property
    def total_ms(self) -> float:
        return self.cpu_ms + self.attn_ms + self.gemm_ms + self.other_ms


@dataclass(frozen=True)
class RequestSummary:
    request_id: int
    emitted: int
    rounds: int
    stall_absences: int
    pressure_absences: int
    accepted_total: int
    drafted_total: int


@dataclass(frozen=True)
class SimReport:
    level: str
    total_ms: float
    emitted_tokens: int
    tokens_per_second: float
    iterations: tuple[IterationRow, ...]
    breakdown: Breakdown
    eta: float
    recomputation_ratio: float
    requests: tuple[RequestSummary, ...]
    realized_alpha: float | None = None
    acceptance_histogram: dict[int, int] | None = None
    outputs: dict[int, list[int]] | None = None


@dataclass
class _Live:
    req: SimRequest
    round_target: int
    prompt_granted: bool = False
    needs_readmit: bool = False
    drafts_done: int = 0
    rounds: int = 0
    emitted: int = 0
    stall_absences: int = 0
    pressure_absences: int = 0
    accepted_total: int = 0
    drafted_total: int = 0
    done: bool = False
    engine: RequestState | None = None


def analytic_config(cfg: SimConfig, workload: WorkloadSpec, page_bytes: int) -> SpecConfig:
    """The closed-form operating point a simulation config corresponds to.

    KV bytes are taken at the average mid-decode footprint with the batch
    full: every slot holding a prompt plus half its output.
    """
    per_request = workload.input_len.mean + workload.output_len.mean / 2.0
    return SpecConfig(
        k=cfg.k,
        alpha=cfg.alpha,
        sparsity=cfg.sparsity,
        batch=cfg.max_batch,
        kv_bytes=page_bytes * per_request * cfg.max_batch,
    )


def _phase_of(live: _Live, k: int) -> int:
    return k - (live.round_target - live.drafts_done)


def _bucket_counts(lives, k: int) -> list[int]:
    counts = [0] * (k + 1)
    for lv in lives:
        counts[_phase_of(lv, k)] += 1
    return counts


def _draft_attn_pages(live: _Live, sparsity: float) -> int:
    kv = live.req.input_len + live.emitted
    return compute_budget(kv, sparsity) + live.drafts_done + 1


def _verify_attn_pages(live: _Live) -> int:
    return live.req.input_len + live.emitted + live.round_target + 1


class _TokenRunner:
    """Token-level execution: the real engine on a toy model."""

    def __init__(self, model: ToyModel, cfg: SimConfig, workload: WorkloadSpec):
        self.model = model
        self.cfg = cfg
        self.workload = workload
        self.outputs: dict[int, list[int]] = {}

    def make_prompt(self, req: SimRequest) -> list[int]:
        rng = np.random.default_rng(np.random.SeedSequence([self.workload.seed, req.request_id]))
        vocab = self.model.config.vocab_size
        return rng.integers(0, vocab, size=req.input_len).tolist()

    def prefill(self, live: _Live) -> None:
        request = DecodeRequest(
            request_id=live.req.request_id,
            prompt=self.make_prompt(live.req),
            max_output=live.req.output_len,
            eos_token=None,
        )
        state = prefill(self.model, request, self.cfg.k, self.cfg.sparsity)
        state.round_target = live.round_target
        live.engine = state
        live.emitted = len(state.committed)
        live.done = state.done
        if live.done:
            self._check_lossless(live)

    def draft(self, live: _Live) -> None:
        draft_step(self.model, live.engine)

    def verify(self, live: _Live) -> int:
        state = live.engine
        outcome = verify_round(self.model, state)
        live.emitted = len(state.committed)
        live.done = state.done
        if live.done:
            self._check_lossless(live)
        return outcome.accepted_count

    def _check_lossless(self, live: _Live) -> None:
        state = live.engine
        oracle = greedy_decode(self.model, state.prompt, state.max_output, state.eos_token)
        if state.committed != oracle:
            raise SimulationError(
                f"request {live.req.request_id}: speculative output diverged "
                f"from the autoregressive oracle"
            )
        self.outputs[live.req.request_id] = list(state.committed)


def _transfer_budget(params: CostModelParams | None, kv_cfg: KvPoolConfig, latency_ms: float) -> int:
    if params is None:
        return kv_cfg.capacity_pages  # transfers are free at token level
    bytes_per_iter = kv_cfg.pcie_gbps * 1e9 * (latency_ms / 1000.0)
    return max(1, int(bytes_per_iter // kv_cfg.page_bytes))


def _apply_preemptions(result: AllocationResult, lives: dict[int, _Live], k: int) -> None:
    for rid in result.preempted:
        victim = lives.get(rid)
        if victim is None:
            continue
        victim.prompt_granted = False
        victim.needs_readmit = True
        victim.drafts_done = 0
        victim.round_target = k

def _simulate(
    workload: WorkloadSpec,
    cfg: SimConfig,
    kv_cfg: KvPoolConfig,
    params: CostModelParams | None,
    model: ToyModel | None,
) -> SimReport:
    requests = generate_workload(workload)
    runner = _TokenRunner(model, cfg, workload) if model is not None else None
    if runner is not None and kv_cfg.policy is KvPolicy.PREEMPT:
        raise ConfigurationError("preemption resume is cost-level only")
    pool = KvPool(
        kv_cfg.capacity_pages,
        kv_cfg.page_bytes,
        chunk_pages=kv_cfg.chunk_pages,
        policy=kv_cfg.policy,
    )
    waiting = sorted(requests, key=lambda r: (r.arrival_ms, r.request_id))
    lives: dict[int, _Live] = {}
    finished: dict[int, _Live] = {}
    pipeline = PipelineSlot()
    histogram: dict[int, int] = {}
    rows: list[IterationRow] = []
    snapshots: list[PoolSnapshot] = []
    sim_time = 0.0
    prev_latency = 1.0
    cpu_pending = 0.0
    pressure_last_iter = False
    gemm_total = attn_total = other_total = cpu_total = 0.0
    k = cfg.k

    def complete(rid: int, live: _Live) -> None:
        pool.release(rid)
        finished[rid] = live
        del lives[rid]

    for iteration in range(cfg.max_iterations):
        if not lives and not waiting:
            break
        if not lives and waiting[0].arrival_ms > sim_time:
            sim_time = waiting[0].arrival_ms

        budget = _transfer_budget(params, kv_cfg, prev_latency)
        pool.step(budget, budget, allow_reload=not pressure_last_iter)
        pressure_now = False

        # Admission: arrival order, capped by batch slots; the oracle policy
        # may additionally refuse until its reservation fits.
        while waiting and waiting[0].arrival_ms <= sim_time and len(lives) < cfg.max_batch:
            req = waiting[0]
            worst_case = req.input_len + req.output_len + k + 1
            if not pool.admit(req.request_id, expected_total=worst_case):
                break
            waiting.pop(0)
            buckets = PhaseBuckets(k=k, counts=_bucket_counts(lives.values(), k))
            phase = assign_new_request(buckets, cfg.sched_policy)
            lives[req.request_id] = _Live(req=req, round_target=first_round_draft_len(k, phase))

        # Prompt grants, retries after pressure, and post-preemption rebuilds.
        # Prefill emits the first token, so 1-token requests finish here.
        for rid, live in list(lives.items()):
            if live.prompt_granted:
                continue
            if live.needs_readmit:
                pool.admit(rid)
                live.needs_readmit = False
            need = live.req.input_len + live.emitted
            result = pool.allocate(rid, need, iteration=iteration)
            _apply_preemptions(result, lives, k)
            if not result.granted:
                pressure_now = True
                continue
            live.prompt_granted = True
            if live.emitted == 0:
                if runner is not None:
                    runner.prefill(live)
                else:
                    live.emitted = 1
                    live.done = live.req.output_len <= 1
                if live.done:
                    complete(rid, live)

        candidates: list[BatchCandidate] = []
        by_id: dict[int, BatchCandidate] = {}
        for rid, live in lives.items():
            if not live.prompt_granted or not pool.is_schedulable(rid):
                continue
            cand = BatchCandidate(
                request_id=rid,
                due_verify=live.drafts_done == live.round_target,
                verify_tokens=live.round_target + 1,
                attn_pages_draft=_draft_attn_pages(live, cfg.sparsity),
                attn_pages_verify=_verify_attn_pages(live),
            )
            candidates.append(cand)
            by_id[rid] = cand
        planned, stalled_now = form_batch(candidates, pipeline.stalled_verifications, cfg.pipeline)
        for rid in stalled_now:
            lives[rid].stall_absences += 1

        executed_drafts: list[int] = []
        executed_verifies: list[int] = []
        verify_tokens_sum = 0
        attn_pages_sum = 0
        for rid in planned.draft_members:
            live = lives[rid]
            if not live.prompt_granted:  # preempted earlier this iteration
                continue
            result = pool.allocate(rid, 1, iteration=iteration)
            _apply_preemptions(result, lives, k)
            if not result.granted:
                pressure_now = True
                live.pressure_absences += 1
                continue
            if runner is not None:
                runner.draft(live)
            live.drafts_done += 1
            live.drafted_total += 1
            executed_drafts.append(rid)
            attn_pages_sum += by_id[rid].attn_pages_draft
        for rid in planned.verify_members:
            live = lives[rid]
            if not live.prompt_granted:
                continue
            result = pool.allocate(rid, 1, iteration=iteration)
            _apply_preemptions(result, lives, k)
            if not result.granted:
                pressure_now = True
                live.pressure_absences += 1
                continue
            target = live.round_target
            if runner is not None:
                accepted = runner.verify(live)
            else:
                accepted = (
                    acceptance_draw(workload.seed, rid, live.rounds, target, cfg.alpha)
                    if target > 0
                    else 0
                )
                remaining = live.req.output_len - live.emitted
                live.emitted += min(accepted + 1, remaining)
                live.done = live.emitted >= live.req.output_len
            pool.free_tail(rid, target - accepted)
            live.accepted_total += accepted
            live.rounds += 1
            live.drafts_done = 0
            live.round_target = k
            histogram[accepted] = histogram.get(accepted, 0) + 1
            executed_verifies.append(rid)
            verify_tokens_sum += target + 1
            attn_pages_sum += by_id[rid].attn_pages_verify
            if live.done:
                complete(rid, live)

        batch = IterationBatch(
            draft_members=tuple(executed_drafts),
            verify_members=tuple(executed_verifies),
            gemm_tokens=len(executed_drafts) + verify_tokens_sum,
            attn_pages=attn_pages_sum,
        )
        pipeline = step_pipeline(
            pipeline,
            completed_gpu_work=executed_verifies if cfg.pipeline is PipelineMode.DELAYED else [],
            cpu_results=pipeline.stalled_verifications,
        )

        attn_bytes = batch.attn_pages * kv_cfg.page_bytes
        if params is not None and batch.size > 0:
            gemm_ms = t_gemm(params, batch.gemm_tokens)
            attn_ms = t_attn(params, attn_bytes)
            other_ms = params.fixed_overhead_ms
        else:
            gemm_ms = attn_ms = other_ms = 0.0
        gpu_ms = gemm_ms + attn_ms + other_ms
        cpu_now = cfg.cpu_ms_per_verify * len(executed_verifies)
        if cfg.pipeline is PipelineMode.DELAYED:
            exposed_cpu = max(0.0, cpu_pending - gpu_ms)
            cpu_pending = cpu_now
        else:
            exposed_cpu = cpu_now
        latency = gpu_ms + exposed_cpu

        if batch.size == 0 and latency == 0.0 and params is not None:
            if pool.transfers_pending or pressure_now:
                # Nothing runnable; tick one chunk's worth of transfer time.
                other_ms = (
                    kv_cfg.chunk_pages * kv_cfg.page_bytes / (kv_cfg.pcie_gbps * 1e9) * 1000.0
                )
                latency = other_ms
            elif stalled_now:
                pass  # pipeline bubble: the off-device verification finishes here
            elif lives and not waiting:
                raise SimulationError("no schedulable work and no pending transfers")

        gemm_total += gemm_ms
        attn_total += attn_ms
        other_total += other_ms
        cpu_total += exposed_cpu
        sim_time += latency
        prev_latency = max(latency, 1e-6)
        pressure_last_iter = pressure_now
        rows.append(
            IterationRow(
                iteration=iteration,
                gemm_tokens=batch.gemm_tokens,
                attn_bytes=attn_bytes,
                latency_ms=latency,
                device_util=pool.utilization,
                offloaded_pages=pool.offloaded_pages,
                stalled_requests=len(stalled_now),
            )
        )
        snapshots.append(pool.snapshot(iteration))
        pool.check()
    else:
        raise SimulationError(f"no completion within {cfg.max_iterations} iterations")

    emitted_total = sum(lv.emitted for lv in finished.values())
    drafted = sum(lv.drafted_total for lv in finished.values())
    accepted_sum = sum(lv.accepted_total for lv in finished.values())
    eta = 0.0
    if params is not None:
        eta = speedup(params, analytic_config(cfg, workload, kv_cfg.page_bytes)).eta
    summaries = tuple(
        RequestSummary(
            request_id=rid,
            emitted=lv.emitted,
            rounds=lv.rounds,
            stall_absences=lv.stall_absences,
            pressure_absences=lv.pressure_absences,
            accepted_total=lv.accepted_total,
            drafted_total=lv.drafted_total,
        )
        for rid, lv in sorted(finished.items())
    )
    token_level = model is not None
    return SimReport(
        level="token" if token_level else "cost",
        total_ms=sim_time,
        emitted_tokens=emitted_total,
        tokens_per_second=emitted_total / (sim_time / 1000.0) if sim_time > 0 else 0.0,
        iterations=tuple(rows),
        breakdown=Breakdown(
            cpu_ms=cpu_total, attn_ms=attn_total, gemm_ms=gemm_total, other_ms=other_total
        ),
        eta=eta,
        recomputation_ratio=utilization_report(snapshots).recomputation_ratio,
        requests=summaries,
        realized_alpha=(accepted_sum / drafted if drafted else None) if token_level else None,
        acceptance_histogram=dict(sorted(histogram.items())) if token_level else None,
        outputs=runner.outputs if runner is not None else None,
    )


def run_cost_sim(
    workload: WorkloadSpec,
    params: CostModelParams,
    cfg: SimConfig,
    kv_cfg: KvPoolConfig,
) -> SimReport:
    """Serving simulation with latencies from the analytical cost model."""
    return _simulate(workload, cfg, kv_cfg, params, model=None)


def run_token_sim(
    workload: WorkloadSpec,
    model_config: ModelConfig,
    cfg: SimConfig,
    kv_cfg: KvPoolConfig,
    params: CostModelParams | None = None,
) -> SimReport:
    """Serving simulation running the real engine on a toy model.

    Latency columns are zero unless cost-model params are supplied; every
    request's final output is checked against plain greedy decoding.
    """
    model = init_model(model_config)
    return _simulate(workload, cfg, kv_cfg, params, model=model)
