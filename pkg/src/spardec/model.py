"""Deterministic toy transformer used as both draft and target model.

The network is a small decoder-only transformer in float64: pre-norm blocks
of grouped-query attention plus a two-layer tanh MLP, rotary position mixing
on queries and keys, a learned token embedding tied to the output projection.
It is sized for correctness experiments, not quality: every weight is filled
from a seeded generator so equal configs produce bit-identical models, and
all forwards evaluate positions strictly one at a time so that batched and
incremental calls agree to the last bit.

Two entry points matter:

* :func:`forward_full` runs full causal attention over new tokens, appends
  nothing to the caller's cache, and captures an attention score log.
* :func:`forward_sparse` runs one token attending only to a caller-chosen
  critical set plus any fresh entries created since that set was picked.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, replace
from functools import lru_cache
from typing import Sequence

import numpy as np

from .errors import ConfigurationError, ContractError
from .selection import AttentionScoreLog, CriticalTokenSet, ScoreRow

INIT_SCALE = 0.08
RMS_EPS = 1e-6
ROPE_BASE = 10000.0


@dataclass(frozen=True)
class ModelConfig:
    """Shape and seed of a toy model.

    ``hidden_dim`` may be omitted; it is pinned to num_q_heads * head_dim and
    validated if given explicitly. ``head_dim`` must be even so the rotary
    mixing can pair coordinates.
    """

    num_layers: int
    num_q_heads: int
    num_kv_heads: int
    head_dim: int
    vocab_size: int
    seed: int = 0
    hidden_dim: int | None = None

    def __post_init__(self) -> None:
        if min(self.num_layers, self.num_q_heads, self.num_kv_heads, self.head_dim) < 1:
            raise ConfigurationError("model dimensions must be at least 1")
        if self.vocab_size < 2:
            raise ConfigurationError("vocab_size must be at least 2")
        if self.num_q_heads % self.num_kv_heads != 0:
            raise ConfigurationError(
                f"num_kv_heads={self.num_kv_heads} must divide num_q_heads={self.num_q_heads}"
            )
        if self.head_dim % 2 != 0:
            raise ConfigurationError("head_dim must be even for rotary mixing")
        expected = self.num_q_heads * self.head_dim
        if self.hidden_dim is None:
            object.__setattr__(self, "hidden_dim", expected)
        elif self.hidden_dim != expected:
            raise ConfigurationError(
                f"hidden_dim must equal num_q_heads * head_dim = {expected}"
            )

    @property
    def group_size(self) -> int:
        return self.num_q_heads // self.num_kv_heads


@dataclass(frozen=True)
class LayerWeights:
    mlp_in: np.ndarray
    mlp_out: np.ndarray
    wk: np.ndarray
    wo: np.ndarray
    wq: np.ndarray
    wv: np.ndarray


@dataclass(frozen=True)
class PlantedConcentration:
    """Additive attention-logit bonus that pins mass onto fixed positions.

    With the default bonus the softmax weight everywhere else underflows to
    exactly zero, which makes the model's attention provably concentrated on
    ``positions`` for every layer, head, and query.
    """

    positions: tuple[int, ...]
    bonus: float = 2000.0


@dataclass(frozen=True)
class ToyModel:
    config: ModelConfig
    embedding: np.ndarray  # (vocab_size, hidden_dim)
    layers: tuple[LayerWeights, ...]
    planted: PlantedConcentration | None = None


@dataclass(frozen=True)
class KVEntry:
    """Post-rotary key/value vectors for one token: (layers, kv_heads, head_dim)."""

    k: np.ndarray
    v: np.ndarray

    def validate(self) -> None:
        if self.k.shape != self.v.shape or self.k.ndim != 3:
            raise ContractError("KV entry arrays must share a (layers, heads, dim) shape")
        if not (np.all(np.isfinite(self.k)) and np.all(np.isfinite(self.v))):
            raise ContractError("KV entry contains non-finite values")


class KvCache:
    """Growable per-request KV store, one slot per committed token."""

    def __init__(self, config: ModelConfig, capacity: int = 16):
        shape = (capacity, config.num_layers, config.num_kv_heads, config.head_dim)
        self._k = np.empty(shape)
        self._v = np.empty(shape)
        self._n = 0
        self.config = config

    def __len__(self) -> int:
        return self._n

    def _grow(self, need: int) -> None:
        cap = self._k.shape[0]
        if need <= cap:
            return
        new_cap = max(need, cap * 2)
        for name in ("_k", "_v"):
            old = getattr(self, name)
            fresh = np.empty((new_cap, *old.shape[1:]))
            fresh[: self._n] = old[: self._n]
            setattr(self, name, fresh)

    def append(self, entry: KVEntry) -> None:
        self._grow(self._n + 1)
        self._k[self._n] = entry.k
        self._v[self._n] = entry.v
        self._n += 1

    def extend(self, entries: Sequence[KVEntry]) -> None:
        for e in entries:
            self.append(e)

    def truncate(self, n: int) -> None:
        if not 0 <= n <= self._n:
            raise ContractError("truncate target out of range")
        self._n = n

    def keys(self, layer: int) -> np.ndarray:
        return self._k[: self._n, layer]

    def values(self, layer: int) -> np.ndarray:
        return self._v[: self._n, layer]

    def gather(self, layer: int, positions: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        return self._k[positions, layer], self._v[positions, layer]


def init_model(config: ModelConfig) -> ToyModel:
    """Fill a model from the config seed.

    Weights are Gaussian with scale 0.08, drawn in a fixed order (embedding
    first, then per layer with matrices in alphabetical name order, each
    row-major) from an SFC64 stream so the result is reproducible bit for bit.
    """
    rng = np.random.Generator(np.random.SFC64(config.seed))
    h = config.hidden_dim
    kv_width = config.num_kv_heads * config.head_dim
    mlp_width = 2 * h
    embedding = rng.normal(0.0, INIT_SCALE, (config.vocab_size, h))
    layers = []
    for _ in range(config.num_layers):
        layers.append(
            LayerWeights(
                mlp_in=rng.normal(0.0, INIT_SCALE, (h, mlp_width)),
                mlp_out=rng.normal(0.0, INIT_SCALE, (mlp_width, h)),
                wk=rng.normal(0.0, INIT_SCALE, (h, kv_width)),
                wo=rng.normal(0.0, INIT_SCALE, (h, h)),
                wq=rng.normal(0.0, INIT_SCALE, (h, h)),
                wv=rng.normal(0.0, INIT_SCALE, (h, kv_width)),
            )
        )
    return ToyModel(config=config, embedding=embedding, layers=tuple(layers))


def plant_attention_concentration(
    model: ToyModel, positions: Sequence[int], bonus: float = 2000.0
) -> ToyModel:
    """Return a model variant whose attention mass concentrates on ``positions``.

    The bonus is added to the attention logit of every planted position before
    softmax; at the default magnitude all other weights underflow to zero.
    """
    pos = tuple(sorted(int(p) for p in positions))
    if len(pos) != len(set(pos)) or (pos and pos[0] < 0):
        raise ContractError("planted positions must be unique and non-negative")
    return replace(model, planted=PlantedConcentration(positions=pos, bonus=bonus))


@lru_cache(maxsize=32)
def _inv_freq(head_dim: int) -> np.ndarray:
    return ROPE_BASE ** (-np.arange(0, head_dim, 2) / head_dim)


def _rotate(vecs: np.ndarray, position: int, head_dim: int) -> np.ndarray:
    angles = position * _inv_freq(head_dim)
    c, s = np.cos(angles), np.sin(angles)
    half = head_dim // 2
    x1, x2 = vecs[..., :half], vecs[..., half:]
    return np.concatenate([x1 * c - x2 * s, x1 * s + x2 * c], axis=-1)


def _rmsnorm(x: np.ndarray) -> np.ndarray:
    return x / np.sqrt(np.mean(x * x) + RMS_EPS)


def _attend(
    q: np.ndarray,  # (num_q_heads, head_dim)
    keys: np.ndarray,  # (n, num_kv_heads, head_dim)
    values: np.ndarray,
    config: ModelConfig,
    bonus: np.ndarray | None,  # (n,) additive logit bonus or None
) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """One query position of grouped-query attention.

    Returns the flattened context vector, the raw logits as (num_q_heads, n),
    and the per-head log-sum-exp.
    """
    d = config.head_dim
    kk = keys.transpose(1, 0, 2)  # (kv_heads, n, d)
    vv = values.transpose(1, 0, 2)
    q3 = q.reshape(config.num_kv_heads, config.group_size, d)
    logits = np.einsum("hgd,hnd->hgn", q3, kk) / math.sqrt(d)
    if bonus is not None:
        logits = logits + bonus
    m = logits.max(axis=-1, keepdims=True)
    e = np.exp(logits - m)
    denom = e.sum(axis=-1, keepdims=True)
    ctx = np.einsum("hgn,hnd->hgd", e / denom, vv)
    lse = (np.log(denom) + m).reshape(config.num_q_heads)
    return ctx.reshape(-1), logits.reshape(config.num_q_heads, -1), lse


def _planted_bonus(
    model: ToyModel, abs_positions: np.ndarray
) -> np.ndarray | None:
    if model.planted is None:
        return None
    mask = np.isin(abs_positions, np.asarray(model.planted.positions))
    return np.where(mask, model.planted.bonus, 0.0)


def _check_tokens(config: ModelConfig, tokens: Sequence[int]) -> None:
    for t in tokens:
        if not 0 <= t < config.vocab_size:
            raise ContractError(f"token id {t} outside vocab of {config.vocab_size}")


class _LayerBuffer:
    """Working K/V rows for one layer of a multi-token full forward."""

    __slots__ = ("k", "v", "n")

    def __init__(self, base_k: np.ndarray, base_v: np.ndarray, extra: int):
        n = base_k.shape[0]
        self.k = np.empty((n + extra, *base_k.shape[1:]))
        self.v = np.empty((n + extra, *base_v.shape[1:]))
        self.k[:n] = base_k
        self.v[:n] = base_v
        self.n = n

    def push(self, k_row: np.ndarray, v_row: np.ndarray) -> None:
        self.k[self.n] = k_row
        self.v[self.n] = v_row
        self.n += 1


def forward_full(
    model: ToyModel,
    committed_kv: KvCache,
    new_tokens: Sequence[int],
    capture_scores: bool = True,
) -> tuple[list[np.ndarray], list[KVEntry], AttentionScoreLog]:
    """Full causal attention over ``new_tokens`` appended after the cache.

    Tokens are evaluated strictly left to right, each attending to the whole
    cache plus all earlier new tokens plus itself, so a multi-token call is
    bit-identical to the same tokens fed one at a time. The caller's cache is
    not modified; the per-token KV entries come back for the caller to keep
    or drop. The score log records each query's attention logits and lse per
    layer (skipped when ``capture_scores`` is false, which leaves the log
    empty).
    """
    cfg = model.config
    if len(new_tokens) == 0:
        raise ContractError("forward_full needs at least one token")
    _check_tokens(cfg, new_tokens)
    n0 = len(committed_kv)
    bufs = [
        _LayerBuffer(committed_kv.keys(l), committed_kv.values(l), len(new_tokens))
        for l in range(cfg.num_layers)
    ]
    score_layers: list[list[ScoreRow]] = [[] for _ in range(cfg.num_layers)]
    logits_rows: list[np.ndarray] = []
    entries: list[KVEntry] = []
    for j, tok in enumerate(new_tokens):
        pos = n0 + j
        x = model.embedding[tok].copy()
        ek = np.empty((cfg.num_layers, cfg.num_kv_heads, cfg.head_dim))
        ev = np.empty_like(ek)
        abs_pos = np.arange(pos + 1)
        bonus = _planted_bonus(model, abs_pos)
        for l, lw in enumerate(model.layers):
            h = _rmsnorm(x)
            q = _rotate((h @ lw.wq).reshape(cfg.num_q_heads, cfg.head_dim), pos, cfg.head_dim)
            k_new = _rotate((h @ lw.wk).reshape(cfg.num_kv_heads, cfg.head_dim), pos, cfg.head_dim)
            v_new = (h @ lw.wv).reshape(cfg.num_kv_heads, cfg.head_dim)
            buf = bufs[l]
            buf.push(k_new, v_new)
            ctx, logits, lse = _attend(q, buf.k[: buf.n], buf.v[: buf.n], cfg, bonus)
            if capture_scores:
                score_layers[l].append(ScoreRow(logits=logits, lse=lse))
            x = x + ctx @ lw.wo
            x = x + np.tanh(_rmsnorm(x) @ lw.mlp_in) @ lw.mlp_out
            ek[l] = k_new
            ev[l] = v_new
        logits_rows.append(model.embedding @ _rmsnorm(x))
        entries.append(KVEntry(k=ek, v=ev))
    log = AttentionScoreLog(cfg.num_q_heads, cfg.num_kv_heads, score_layers)
    return logits_rows, entries, log


def forward_sparse(
    model: ToyModel,
    committed_kv: KvCache,
    critical: CriticalTokenSet,
    fresh_kv: Sequence[KVEntry],
    new_token: int,
) -> tuple[np.ndarray, KVEntry]:
    """One draft step: the new token attends to the critical set, every fresh
    entry created since that set was identified, and itself.

    Returns the next-token logits and the KV entry for ``new_token`` computed
    under this sparse attention pattern.
    """
    cfg = model.config
    _check_tokens(cfg, [new_token])
    n0 = len(committed_kv)
    pos = n0 + len(fresh_kv)
    idx = critical.positions
    if idx.size and idx[-1] >= n0:
        raise ContractError("critical positions must lie inside the committed cache")
    abs_pos = np.concatenate([idx, np.arange(n0, pos + 1)])
    bonus = _planted_bonus(model, abs_pos)
    x = model.embedding[new_token].copy()
    ek = np.empty((cfg.num_layers, cfg.num_kv_heads, cfg.head_dim))
    ev = np.empty_like(ek)
    for l, lw in enumerate(model.layers):
        h = _rmsnorm(x)
        q = _rotate((h @ lw.wq).reshape(cfg.num_q_heads, cfg.head_dim), pos, cfg.head_dim)
        k_new = _rotate((h @ lw.wk).reshape(cfg.num_kv_heads, cfg.head_dim), pos, cfg.head_dim)
        v_new = (h @ lw.wv).reshape(cfg.num_kv_heads, cfg.head_dim)
        k_sel, v_sel = committed_kv.gather(l, idx)
        parts_k = [k_sel] + [e.k[l][None] for e in fresh_kv] + [k_new[None]]
        parts_v = [v_sel] + [e.v[l][None] for e in fresh_kv] + [v_new[None]]
        keys = np.concatenate(parts_k)
        values = np.concatenate(parts_v)
        ctx, _, _ = _attend(q, keys, values, cfg, bonus)
        x = x + ctx @ lw.wo
        x = x + np.tanh(_rmsnorm(x) @ lw.mlp_in) @ lw.mlp_out
        ek[l] = k_new
        ev[l] = v_new
    return model.embedding @ _rmsnorm(x), KVEntry(k=ek, v=ev)


def greedy_token(logits: np.ndarray) -> int:
    """Argmax with ties resolved to the lowest token id."""
    return int(np.argmax(logits))
