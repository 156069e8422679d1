"""Synthetic serving workloads.

Reasoning traces are long and heavy-tailed; benchmark suites publish only a
mean and standard deviation per dataset. We model output lengths as a normal
clipped at a floor of one token (clipping, not resampling: resampling shifts
the mean upward by several percent at the spreads these suites report, while
clipping keeps it within a percent). A lognormal with the same first two
moments is available for tail studies.

Per-round acceptance draws are keyed by (seed, request, round) rather than
drawn from a shared stream, so two simulations of the same workload under
different scheduling or memory policies see identical acceptance traces and
comparisons are paired.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from enum import Enum

import numpy as np

from .errors import ConfigurationError


class LengthDist(str, Enum):
    CONSTANT = "constant"
    NORMAL = "normal"
    LOGNORMAL = "lognormal"


class ArrivalKind(str, Enum):
    START = "start"
    POISSON = "poisson"


@dataclass(frozen=True)
class LengthSpec:
    dist: LengthDist
    mean: float
    std: float = 0.0

    def __post_init__(self) -> None:
        if self.mean < 1:
            raise ConfigurationError("length mean must be at least 1 token")
        if self.std < 0:
            raise ConfigurationError("length std cannot be negative")
        if self.dist is LengthDist.CONSTANT and self.std != 0:
            raise ConfigurationError("constant lengths cannot have a spread")


@dataclass(frozen=True)
class ArrivalSpec:
    kind: ArrivalKind = ArrivalKind.START
    rate_per_s: float = 0.0

    def __post_init__(self) -> None:
        if self.kind is ArrivalKind.POISSON and self.rate_per_s <= 0:
            raise ConfigurationError("poisson arrivals need a positive rate")


@dataclass(frozen=True)
class WorkloadSpec:
    n_requests: int
    input_len: LengthSpec
    output_len: LengthSpec
    arrival: ArrivalSpec = ArrivalSpec()
    seed: int = 0
    max_len: int = 1 << 20

    def __post_init__(self) -> None:
        if self.n_requests < 0:
            raise ConfigurationError("n_requests cannot be negative")
        if self.max_len < 1:
            raise ConfigurationError("max_len must be at least 1")


@dataclass(frozen=True)
class SimRequest:
    request_id: int
    input_len: int
    output_len: int
    arrival_ms: float


def _sample_lengths(rng: np.random.Generator, spec: LengthSpec, n: int, max_len: int) -> np.ndarray:
    if spec.dist is LengthDist.CONSTANT:
        raw = np.full(n, spec.mean)
    elif spec.dist is LengthDist.NORMAL:
        raw = rng.normal(spec.mean, spec.std, size=n)
    elif spec.dist is LengthDist.LOGNORMAL:
        if spec.std == 0:
            raw = np.full(n, spec.mean)
        else:
            # Match the requested first two moments.
            sigma2 = math.log(1.0 + (spec.std / spec.mean) ** 2)
            mu = math.log(spec.mean) - sigma2 / 2.0
            raw = rng.lognormal(mu, math.sqrt(sigma2), size=n)
    else:  # pragma: no cover - enum is closed
        raise ConfigurationError(f"unknown length distribution {spec.dist}")
    return np.clip(np.rint(raw), 1, max_len).astype(np.int64)


def generate_workload(spec: WorkloadSpec) -> list[SimRequest]:
    """Deterministic given the seed; inputs, then outputs, then arrivals are
    drawn in a fixed order so the stream layout never shifts."""
    rng = np.random.default_rng(spec.seed)
    n = spec.n_requests
    inputs = _sample_lengths(rng, spec.input_len, n, spec.max_len)
    outputs = _sample_lengths(rng, spec.output_len, n, spec.max_len)
    if spec.arrival.kind is ArrivalKind.START:
        arrivals = np.zeros(n)
    else:
        gaps = rng.exponential(1000.0 / spec.arrival.rate_per_s, size=n)
        arrivals = np.cumsum(gaps)
    return [
        SimRequest(
            request_id=i,
            input_len=int(inputs[i]),
            output_len=int(outputs[i]),
            arrival_ms=float(arrivals[i]),
        )
        for i in range(n)
    ]


def acceptance_draw(seed: int, request_id: int, round_index: int, k: int, alpha: float) -> int:
    """Accepted-token count for one round, expectation exactly alpha*k.

    floor(alpha*k) plus a Bernoulli on the fractional part, from a stream
    keyed by (seed, request, round) so the draw is independent of policy and
    iteration order.
    """
    if not 0.0 <= alpha <= 1.0:
        raise ConfigurationError("alpha must lie in [0, 1]")
    if k < 1:
        raise ConfigurationError("k must be at least 1")
    target = alpha * k
    base = math.floor(target)
    frac = target - base
    if frac == 0.0:
        return min(base, k)
    rng = np.random.default_rng(np.random.SeedSequence([seed, request_id, round_index]))
    return min(base + int(rng.random() < frac), k)
