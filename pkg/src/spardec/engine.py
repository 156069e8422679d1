"""Draft/verify state machine for lossless self-speculative decoding.

One model plays both roles. Draft steps run it with sparse attention over a
critical-token set; a verification step replays the pending token plus all
drafted tokens with full attention, accepts the longest greedy-matching
prefix, and always emits one bonus token from the verification logits. KV
entries written by drafts are provisional: verification recomputes them under
full attention, so the committed cache only ever holds full-attention state
and the committed token stream is exactly the plain greedy decode.

Every verification's attention score log is recycled into the next critical
set, restricted to query rows whose tokens survived acceptance.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import ConfigurationError, ContractError, StateMachineError
from .model import KvCache, KVEntry, ToyModel, forward_full, forward_sparse, greedy_token
from .selection import (
    CriticalTokenSet,
    compute_budget,
    importance_from_log,
    select_critical_tokens,
)


@dataclass(frozen=True)
class DecodeRequest:
    request_id: int | str
    prompt: list[int]
    max_output: int
    eos_token: int | None = None


@dataclass(frozen=True)
class RoundRecord:
    round_index: int
    draft_target: int
    accepted_count: int
    kv_len: int
    budget: int


ROUND_CSV_COLUMNS = ("round_index", "draft_target", "accepted_count", "kv_len", "budget")


@dataclass
class RoundStats:
    """Per-request accounting across speculation rounds."""

    k: int
    rounds: list[RoundRecord] = field(default_factory=list)
    sparse_forwards: int = 0
    full_forwards: int = 0
    emitted_tokens: int = 0

    @property
    def realized_alpha(self) -> float:
        """Accepted drafts as a fraction of drafts attempted.

        Per-round targets, not the nominal k, form the denominator: a
        request whose first round was shortened by the scheduler is not
        penalized for drafts it never ran.
        """
        attempted = sum(r.draft_target for r in self.rounds)
        if attempted == 0:
            return 0.0
        return sum(r.accepted_count for r in self.rounds) / attempted

    def acceptance_histogram(self) -> dict[int, int]:
        hist: dict[int, int] = {}
        for r in self.rounds:
            hist[r.accepted_count] = hist.get(r.accepted_count, 0) + 1
        return hist

    def csv_rows(self) -> list[tuple[int, int, int, int, int]]:
        return [
            (r.round_index, r.draft_target, r.accepted_count, r.kv_len, r.budget)
            for r in self.rounds
        ]


@dataclass
class RoundOutcome:
    accepted_count: int
    bonus_token: int
    new_critical: CriticalTokenSet | None


@dataclass
class RequestState:
    """Live decoding state for one request.

    ``committed`` holds accepted output tokens only (the prompt is separate);
    its newest element is the pending token whose KV is written by the next
    forward that consumes it. ``round_target`` is how many drafts the current
    round runs; the scheduler shortens it for a request's first round, after
    which it snaps back to ``default_k``.
    """

    request_id: int | str
    prompt: list[int]
    max_output: int
    default_k: int
    sparsity: float
    eos_token: int | None
    committed: list[int]
    cache: KvCache
    critical: CriticalTokenSet | None
    stats: RoundStats
    drafted: list[int] = field(default_factory=list)
    fresh: list[KVEntry] = field(default_factory=list)
    phase: int = 0
    round_target: int = 0
    done: bool = False

    @property
    def kv_len(self) -> int:
        return len(self.prompt) + len(self.committed) + len(self.drafted)


def _commit_emissions(state: RequestState, emitted: list[int]) -> int:
    """Append round emissions, honoring the output cap and the end token.

    Tokens drafted past an end token are dropped even when they match, and
    nothing past ``max_output`` is kept. Returns how many tokens landed.
    """
    landed = 0
    for tok in emitted:
        if len(state.committed) >= state.max_output:
            state.done = True
            break
        state.committed.append(tok)
        landed += 1
        if state.eos_token is not None and tok == state.eos_token:
            state.done = True
            break
    if len(state.committed) >= state.max_output:
        state.done = True
    return landed


def _refresh_critical(state: RequestState, log, surviving_queries: int) -> CriticalTokenSet:
    kv_len = len(state.cache)
    importance = importance_from_log(log.slice_queries(surviving_queries), kv_len)
    budget = compute_budget(kv_len, state.sparsity)
    return select_critical_tokens(importance, budget)


def prefill(
    model: ToyModel, request: DecodeRequest, k: int, sparsity: float
) -> RequestState:
    """Run the prompt through full attention and seed the request state.

    The first output token is the greedy pick at the last prompt position,
    and the prompt's own attention scores seed the initial critical set, so
    drafting can start without any extra identification pass.
    """
    if k < 1:
        raise ConfigurationError("drafting length k must be at least 1")
    if not (0.0 < sparsity <= 1.0):
        raise ConfigurationError(f"sparsity must be in (0, 1], got {sparsity}")
    if not request.prompt:
        raise ContractError("prompt must be non-empty")
    if request.max_output < 1:
        raise ConfigurationError("max_output must be at least 1")
    cache = KvCache(model.config, capacity=len(request.prompt) + 4 * (k + 1))
    rows, entries, log = forward_full(model, cache, request.prompt)
    cache.extend(entries)
    stats = RoundStats(k=k)
    stats.full_forwards += 1
    state = RequestState(
        request_id=request.request_id,
        prompt=list(request.prompt),
        max_output=request.max_output,
        default_k=k,
        sparsity=sparsity,
        eos_token=request.eos_token,
        committed=[],
        cache=cache,
        critical=None,
        stats=stats,
        round_target=k,
    )
    _commit_emissions(state, [greedy_token(rows[-1])])
    stats.emitted_tokens = len(state.committed)
    if not state.done:
        state.critical = _refresh_critical(state, log, surviving_queries=len(request.prompt))
    return state


def draft_step(model: ToyModel, state: RequestState) -> RequestState:
    """Extend the draft by one token using sparse attention."""
    if state.done:
        raise StateMachineError("cannot draft on a finished request")
    if state.phase >= state.round_target:
        raise StateMachineError("drafting past the round target; verification is due")
    if state.critical is None:
        raise StateMachineError("no critical set; prefill must run first")
    token = state.drafted[-1] if state.drafted else state.committed[-1]
    logits, entry = forward_sparse(model, state.cache, state.critical, state.fresh, token)
    state.fresh.append(entry)
    state.drafted.append(greedy_token(logits))
    state.phase += 1
    state.stats.sparse_forwards += 1
    return state


def verify_round(model: ToyModel, state: RequestState) -> RoundOutcome:
    """Score all drafted tokens with one full forward and commit the results.

    The verification input is the pending committed token followed by every
    draft, so logits row ``i`` is the target's prediction for draft ``i`` and
    the last row supplies the bonus token after a full acceptance. Rejected
    drafts' KV entries are dropped; accepted entries (recomputed here under
    full attention) replace whatever the drafts wrote.
    """
    if state.done:
        raise StateMachineError("cannot verify a finished request")
    if state.phase != state.round_target:
        raise StateMachineError(
            f"verification at phase {state.phase}, expected {state.round_target}"
        )
    kv_len_at_verify = state.kv_len
    budget_used = state.critical.budget if state.critical is not None else 0
    draft_target = len(state.drafted)
    tokens = [state.committed[-1], *state.drafted]
    rows, entries, log = forward_full(model, state.cache, tokens)
    state.stats.full_forwards += 1
    targets = [greedy_token(r) for r in rows]
    accepted = 0
    while accepted < len(state.drafted) and state.drafted[accepted] == targets[accepted]:
        accepted += 1
    bonus = targets[accepted]
    emitted = state.drafted[:accepted] + [bonus]
    state.cache.extend(entries[: accepted + 1])
    state.drafted = []
    state.fresh = []
    state.phase = 0
    state.round_target = state.default_k
    landed = _commit_emissions(state, emitted)
    state.stats.emitted_tokens += landed
    state.stats.rounds.append(
        RoundRecord(
            round_index=len(state.stats.rounds),
            draft_target=draft_target,
            accepted_count=accepted,
            kv_len=kv_len_at_verify,
            budget=budget_used,
        )
    )
    new_critical = None
    if not state.done:
        new_critical = _refresh_critical(state, log, surviving_queries=accepted + 1)
        state.critical = new_critical
    return RoundOutcome(accepted_count=accepted, bonus_token=bonus, new_critical=new_critical)


def decode_to_completion(
    model: ToyModel, request: DecodeRequest, k: int, sparsity: float
) -> tuple[list[int], RoundStats]:
    """Speculatively decode until the output cap or the end token."""
    state = prefill(model, request, k, sparsity)
    while not state.done:
        while state.phase < state.round_target:
            draft_step(model, state)
        verify_round(model, state)
    return list(state.committed), state.stats


def greedy_decode(
    model: ToyModel,
    prompt: list[int],
    max_output: int,
    eos_token: int | None = None,
) -> list[int]:
    """Plain autoregressive greedy decoding; the losslessness oracle.

    Uses only full attention, one token at a time, with none of the draft or
    selection machinery.
    """
    if not prompt:
        raise ContractError("prompt must be non-empty")
    if max_output < 1:
        raise ConfigurationError("max_output must be at least 1")
    cache = KvCache(model.config, capacity=len(prompt) + max_output + 1)
    rows, entries, _ = forward_full(model, cache, prompt, capture_scores=False)
    cache.extend(entries)
    out = [greedy_token(rows[-1])]
    while len(out) < max_output and out[-1] != eos_token:
        rows, entries, _ = forward_full(model, cache, [out[-1]], capture_scores=False)
        cache.extend(entries)
        out.append(greedy_token(rows[0]))
    return out
