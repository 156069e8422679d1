"""Batch scheduling for mixed draft/verify iterations.

Naive speculative serving moves every request in lockstep: k cheap all-draft
iterations followed by one huge all-verify iteration whose GEMM input is
(k+1) times larger. The unified policy instead spreads requests across the
k+1 phases of a round so each iteration carries a near-constant mix of
drafts (one token each) and verifications (k+1 tokens each). New arrivals
join the least-loaded phase bucket and shorten their first round so their
verification lands in that bucket's slot.

Verification results need CPU work before the request can draft again. The
delayed pipeline takes that work off the critical path: a request that
verified in iteration i sits out iteration i+1 while the CPU processes its
results alongside the GPU, and re-enters in iteration i+2.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from enum import Enum
from typing import Iterable, Sequence

from .errors import ConfigurationError, ContractError


class SchedPolicy(str, Enum):
    UNIFIED = "unified"
    NAIVE = "naive"


class PipelineMode(str, Enum):
    DELAYED = "delayed"
    SYNCHRONOUS = "synchronous"


@dataclass
class PhaseBuckets:
    """Occupancy of the k+1 phase slots of a speculation round.

    ``counts[p]`` is the number of requests at phase p; phase k verifies this
    iteration, phase 0 has the whole round ahead of it.
    """

    k: int
    counts: list[int]

    @classmethod
    def empty(cls, k: int) -> "PhaseBuckets":
        if k < 1:
            raise ConfigurationError("k must be at least 1")
        return cls(k=k, counts=[0] * (k + 1))

    def __post_init__(self) -> None:
        if len(self.counts) != self.k + 1:
            raise ContractError("counts must have k+1 entries")
        if any(c < 0 for c in self.counts):
            raise ContractError("bucket counts cannot be negative")

    def least_loaded(self) -> int:
        """Lowest-count phase; ties go to the phase whose verification is
        furthest away, which is the lowest index."""
        return min(range(self.k + 1), key=lambda p: (self.counts[p], p))

    def add(self, phase: int) -> None:
        self.counts[phase] += 1

    def remove(self, phase: int) -> None:
        if self.counts[phase] == 0:
            raise ContractError(f"no requests at phase {phase} to remove")
        self.counts[phase] -= 1

    def rotate(self) -> None:
        """Advance one iteration: every cohort moves up a phase, the
        verifying cohort wraps to phase 0."""
        self.counts = [self.counts[-1]] + self.counts[:-1]

    def spread(self) -> int:
        return max(self.counts) - min(self.counts)


def assign_new_request(buckets: PhaseBuckets, policy: SchedPolicy = SchedPolicy.UNIFIED) -> int:
    """Place an arrival into a phase bucket and return the chosen phase.

    Under the unified policy the request's first round drafts only
    ``k - phase`` tokens so its verification coincides with the bucket's.
    The naive policy stacks everyone at phase 0.
    """
    phase = 0 if policy is SchedPolicy.NAIVE else buckets.least_loaded()
    buckets.add(phase)
    return phase


def first_round_draft_len(k: int, phase: int) -> int:
    """Truncated drafting length for a request assigned to ``phase``.

    May be zero, in which case the request verifies immediately.
    """
    if not 0 <= phase <= k:
        raise ContractError(f"phase {phase} outside [0, {k}]")
    return k - phase


@dataclass(frozen=True)
class BatchCandidate:
    """What the batch former needs to know about one schedulable request."""

    request_id: int | str
    due_verify: bool
    verify_tokens: int = 0  # drafts done this round + 1
    attn_pages_draft: int = 0
    attn_pages_verify: int = 0


@dataclass(frozen=True)
class IterationBatch:
    draft_members: tuple
    verify_members: tuple
    gemm_tokens: int
    attn_pages: int

    @property
    def size(self) -> int:
        return len(self.draft_members) + len(self.verify_members)


@dataclass
class PipelineSlot:
    """Verifications whose results the CPU is still processing."""

    stalled_verifications: list = field(default_factory=list)
    iteration_index: int = 0


def form_batch(
    candidates: Sequence[BatchCandidate],
    pending_results: Iterable,
    mode: PipelineMode,
) -> tuple[IterationBatch, list]:
    """Split schedulable requests into this iteration's draft and verify sets.

    Requests due for verification whose previous results are still being
    processed are stalled instead of batched (delayed mode only; synchronous
    processing never leaves results pending). Returns the batch plus the ids
    stalled this iteration.
    """
    pending = set(pending_results)
    drafts: list = []
    verifies: list = []
    stalled: list = []
    gemm = 0
    attn = 0
    for c in candidates:
        if c.request_id in pending:
            if mode is not PipelineMode.DELAYED:
                raise ContractError("unprocessed results outside delayed mode")
            stalled.append(c.request_id)
            continue
        if c.due_verify:
            verifies.append(c.request_id)
            gemm += c.verify_tokens
            attn += c.attn_pages_verify
        else:
            drafts.append(c.request_id)
            gemm += 1
            attn += c.attn_pages_draft
    batch = IterationBatch(
        draft_members=tuple(drafts),
        verify_members=tuple(verifies),
        gemm_tokens=gemm,
        attn_pages=attn,
    )
    return batch, stalled


def step_pipeline(
    slot: PipelineSlot,
    completed_gpu_work: Sequence,
    cpu_results: Iterable,
) -> PipelineSlot:
    """Advance the one-deep verification pipeline by one iteration.

    ``cpu_results`` must cover exactly the requests that verified last
    iteration (the ones currently stalled); the requests that verified this
    iteration become the next stall set.
    """
    expected = set(slot.stalled_verifications)
    got = set(cpu_results)
    if got != expected:
        raise ContractError(
            f"cpu results {sorted(map(str, got))} do not match stalled "
            f"verifications {sorted(map(str, expected))}"
        )
    return PipelineSlot(
        stalled_verifications=list(completed_gpu_work),
        iteration_index=slot.iteration_index + 1,
    )


@dataclass(frozen=True)
class BalanceReport:
    gemm_series: tuple[int, ...]
    mean: float
    cov: float
    max_over_mean: float


def balance_metric(history: Sequence[IterationBatch | int]) -> BalanceReport:
    """Coefficient of variation and peak-to-mean ratio of per-iteration GEMM load."""
    if not history:
        raise ContractError("balance metric needs at least one iteration")
    series = tuple(
        b.gemm_tokens if isinstance(b, IterationBatch) else int(b) for b in history
    )
    n = len(series)
    mean = sum(series) / n
    if mean == 0:
        raise ContractError("balance metric undefined for an all-idle history")
    var = sum((x - mean) ** 2 for x in series) / n
    return BalanceReport(
        gemm_series=series,
        mean=mean,
        cov=math.sqrt(var) / mean,
        max_over_mean=max(series) / mean,
    )
