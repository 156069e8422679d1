"""Critical-token selection from cached verification attention scores.

During a full-attention forward pass the model records, for every layer and
query head, the raw attention logits over all visible KV positions together
with their log-sum-exp. Re-exponentiating ``exp(logit - lse)`` recovers the
exact softmax weights without a second pass, so picking the positions the
model already attends to costs no extra forward work. The selected positions
form the sparse attention set used by the next burst of draft steps.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .errors import ConfigurationError, ContractError

LSE_TOL = 1e-9


@dataclass(frozen=True)
class ScoreRow:
    """Attention logits for one (layer, query token) pair.

    ``logits`` has shape (num_q_heads, kv_len) where kv_len counts every
    position the query could attend to, in ascending position order.
    ``lse`` holds the per-head log-sum-exp of that row.
    """

    logits: np.ndarray
    lse: np.ndarray

    def kv_len(self) -> int:
        return self.logits.shape[1]


@dataclass
class AttentionScoreLog:
    """Score rows captured by one full-attention forward pass.

    ``layers[l][q]`` is the ScoreRow for query token ``q`` in layer ``l``.
    Rows are stored per query head; the q-head to kv-head grouping needed
    for aggregation is derived from the head counts.
    """

    num_q_heads: int
    num_kv_heads: int
    layers: list[list[ScoreRow]]

    def group_map(self) -> np.ndarray:
        group = self.num_q_heads // self.num_kv_heads
        return np.arange(self.num_q_heads) // group

    def num_queries(self) -> int:
        return len(self.layers[0]) if self.layers else 0

    def slice_queries(self, n: int) -> "AttentionScoreLog":
        """Log restricted to the first ``n`` query tokens of every layer."""
        return AttentionScoreLog(
            self.num_q_heads, self.num_kv_heads, [rows[:n] for rows in self.layers]
        )

    def validate(self, tol: float = LSE_TOL) -> None:
        """Check that every stored lse matches its logit row within ``tol``."""
        for rows in self.layers:
            for row in rows:
                if not np.all(np.isfinite(row.logits)):
                    raise ContractError("score log contains non-finite logits")
                m = row.logits.max(axis=1)
                lse = np.log(np.exp(row.logits - m[:, None]).sum(axis=1)) + m
                if np.max(np.abs(lse - row.lse)) > tol:
                    raise ContractError("stored lse disagrees with logits")


def rematerialize_scores(log: AttentionScoreLog) -> list[list[np.ndarray]]:
    """Recover softmax attention weights as ``exp(logit - lse)`` per row.

    Returns the same layers-by-queries nesting as the log; each element is a
    (num_q_heads, kv_len) probability array whose rows sum to 1.
    """
    out: list[list[np.ndarray]] = []
    for rows in log.layers:
        layer_out = []
        for row in rows:
            if not np.all(np.isfinite(row.logits)) or not np.all(np.isfinite(row.lse)):
                raise ContractError("cannot rematerialize non-finite scores")
            layer_out.append(np.exp(row.logits - row.lse[:, None]))
        out.append(layer_out)
    return out


def pad_rows(rows: Sequence[np.ndarray], length: int) -> list[np.ndarray]:
    """Right-pad probability rows with zeros up to ``length`` positions.

    A query token cannot attend past itself, so missing tail positions carry
    exactly zero attention mass. Rows longer than ``length`` are a caller bug.
    """
    padded = []
    for row in rows:
        if row.shape[-1] > length:
            raise ContractError(
                f"row covers {row.shape[-1]} positions, beyond target {length}"
            )
        pad = length - row.shape[-1]
        padded.append(np.pad(row, ((0, 0), (0, pad))) if pad else row)
    return padded


def aggregate_scores(
    scores: Sequence[np.ndarray], group_map: Sequence[int]
) -> np.ndarray:
    """Collapse per-row attention weights into one importance value per position.

    ``scores`` holds one (num_q_heads, kv_len) array per (layer, query token)
    pair, all with equal kv_len. Rows are averaged over query tokens, then
    over the query heads inside each kv-head group, then across groups and
    layers, by plain arithmetic means.
    """
    if len(scores) == 0:
        raise ContractError("aggregate_scores needs at least one row")
    group_map = np.asarray(group_map)
    width = scores[0].shape[-1]
    for row in scores:
        if row.ndim != 2 or row.shape[0] != group_map.shape[0]:
            raise ContractError("score row shape disagrees with group map")
        if row.shape[-1] != width:
            raise ContractError("inconsistent score row lengths")
    stack = np.stack(scores)  # (rows, heads, width)
    per_group = [
        stack[:, group_map == g, :].mean(axis=(0, 1)) for g in np.unique(group_map)
    ]
    return np.stack(per_group).mean(axis=0)


@dataclass(frozen=True)
class CriticalTokenSet:
    """KV positions the drafts are allowed to attend to.

    ``identified_at`` is the KV length at selection time; every position is
    below it, and drafts additionally see entries created after it.
    """

    positions: np.ndarray
    budget: int
    identified_at: int

    def __post_init__(self) -> None:
        pos = np.asarray(self.positions, dtype=np.int64)
        object.__setattr__(self, "positions", pos)
        if pos.ndim != 1:
            raise ContractError("positions must be one-dimensional")
        if pos.size != min(self.budget, self.identified_at):
            raise ContractError("position count must be min(budget, identified_at)")
        if pos.size:
            if pos[0] < 0 or pos[-1] >= self.identified_at:
                raise ContractError("positions must lie in [0, identified_at)")
            if np.any(np.diff(pos) <= 0):
                raise ContractError("positions must be strictly increasing")

    def __len__(self) -> int:
        return int(self.positions.size)


def compute_budget(kv_length: int, sparsity: float) -> int:
    """Number of KV positions a draft may attend to at the given sparsity.

    Computed as ceil(sparsity * kv_length), floored at 1 and clamped to the
    KV length. An empty cache still grants budget 1 so the first draft after
    selection always has something to look at.
    """
    if not (0.0 < sparsity <= 1.0):
        raise ConfigurationError(f"sparsity must be in (0, 1], got {sparsity}")
    if kv_length < 0:
        raise ContractError("kv_length must be non-negative")
    if kv_length == 0:
        return 1
    # Guard against float dust: 0.05 * 1000 lands a hair above 50.0 and a
    # bare ceil would charge an extra token.
    raw = math.ceil(sparsity * kv_length - 1e-9)
    return max(1, min(raw, kv_length))


def select_critical_tokens(importance: np.ndarray, budget: int) -> CriticalTokenSet:
    """Top-``budget`` positions by importance, ties going to the lower index.

    The result is sorted ascending. A budget larger than the vector clamps to
    selecting everything.
    """
    importance = np.asarray(importance, dtype=np.float64)
    if importance.ndim != 1:
        raise ContractError("importance must be a vector")
    if budget < 1:
        raise ContractError("budget must be at least 1")
    if not np.all(np.isfinite(importance)):
        raise ContractError("importance values must be finite")
    n = importance.shape[0]
    take = min(budget, n)
    # Stable sort on the negated values keeps earlier indices first among ties.
    order = np.argsort(-importance, kind="stable")[:take]
    order.sort()
    return CriticalTokenSet(positions=order, budget=budget, identified_at=n)


def importance_from_log(log: AttentionScoreLog, kv_len: int) -> np.ndarray:
    """Aggregate a score log into one importance value per KV position.

    Rows are rematerialized to probabilities, zero-padded to ``kv_len`` (the
    causally invisible tail carries no mass), and averaged. The caller is
    responsible for slicing the log down to surviving query tokens first.
    """
    probs = rematerialize_scores(log)
    flat: list[np.ndarray] = []
    for layer_rows in probs:
        flat.extend(pad_rows(layer_rows, kv_len))
    return aggregate_scores(flat, log.group_map())
