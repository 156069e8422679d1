"""Closed-form iteration-time model for speculative serving.

GEMM-bound time is flat below a saturation batch size and linear above it;
attention time is proportional to the KV bytes an iteration reads. Spreading
requests over the k+1 phases of a speculation round multiplies the average
GEMM input by (2k+1)/(k+1) and cuts attention reads to (k*s+1)/(k+1) of the
dense footprint, while each accepted token costs (k+1)/(k*alpha+1) iterations.
The speedup factor eta compares per-accepted-token time against plain
decoding at the same batch size and KV footprint.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import CalibrationError, ConfigurationError, DegenerateParameterError


@dataclass(frozen=True)
class CostModelParams:
    b_hat: float = 256.0
    gemm_base_ms: float = 2.0
    gemm_slope_ms_per_token: float = 0.03
    attn_ms_per_byte: float = 2.0e-9
    fixed_overhead_ms: float = 0.0

    def __post_init__(self) -> None:
        if self.b_hat <= 0:
            raise ConfigurationError("b_hat must be positive")
        if self.gemm_base_ms <= 0:
            raise ConfigurationError("gemm_base_ms must be positive")
        if self.gemm_slope_ms_per_token < 0:
            raise ConfigurationError("gemm slope must be non-negative")
        if self.attn_ms_per_byte <= 0:
            raise ConfigurationError("attention rate must be positive")
        if self.fixed_overhead_ms < 0:
            raise ConfigurationError("fixed_overhead_ms must be non-negative")


@dataclass(frozen=True)
class SpecConfig:
    """Operating point of the speculative system."""

    k: int
    alpha: float
    sparsity: float
    batch: float
    kv_bytes: float

    def __post_init__(self) -> None:
        if self.k < 1:
            raise ConfigurationError("k must be at least 1")
        if not 0.0 <= self.alpha <= 1.0:
            raise ConfigurationError("alpha must lie in [0, 1]")
        if not 0.0 < self.sparsity <= 1.0:
            raise ConfigurationError("sparsity must lie in (0, 1]")
        if self.batch < 1:
            raise ConfigurationError("batch must be at least 1")
        if self.kv_bytes < 0:
            raise ConfigurationError("kv_bytes must be non-negative")


@dataclass(frozen=True)
class SpeedupReport:
    t_base_ms: float
    t_spec_ms: float
    eta: float
    attn_reduction: float
    avg_gemm_tokens: float
    avg_attn_bytes: float


def t_gemm(params: CostModelParams, tokens: float) -> float:
    """GEMM time: flat up to the saturation point, then linear."""
    if tokens < 0:
        raise ConfigurationError("token count must be non-negative")
    extra = max(0.0, tokens - params.b_hat)
    return params.gemm_base_ms + params.gemm_slope_ms_per_token * extra


def t_attn(params: CostModelParams, kv_bytes: float) -> float:
    """Attention time: proportional to bytes of KV read, zero intercept."""
    if kv_bytes < 0:
        raise ConfigurationError("kv_bytes must be non-negative")
    return params.attn_ms_per_byte * kv_bytes


def t_base(params: CostModelParams, cfg: SpecConfig) -> float:
    """Per-token time of plain decoding at batch B with KV footprint M."""
    return t_gemm(params, cfg.batch) + t_attn(params, cfg.kv_bytes) + params.fixed_overhead_ms


def t_spec(params: CostModelParams, cfg: SpecConfig) -> float:
    """Per-accepted-token time of the speculative system.

    A round spans k+1 iterations and lands k*alpha+1 tokens, so GEMM and the
    per-iteration overhead are scaled by (k+1)/(k*alpha+1) while attention,
    read sparsely during drafts, carries (k*s+1)/(k*alpha+1).
    """
    k, a, s = cfg.k, cfg.alpha, cfg.sparsity
    iters_per_token = (k + 1) / (k * a + 1)
    gemm = t_gemm(params, (2 * k + 1) / (k + 1) * cfg.batch)
    attn = t_attn(params, cfg.kv_bytes)
    return (
        iters_per_token * gemm
        + (k * s + 1) / (k * a + 1) * attn
        + params.fixed_overhead_ms * iters_per_token
    )


def speedup(params: CostModelParams, cfg: SpecConfig) -> SpeedupReport:
    """Compare speculative and plain decoding at one operating point."""
    base = t_base(params, cfg)
    spec = t_spec(params, cfg)
    if not np.isfinite(spec) or spec <= 0:
        raise DegenerateParameterError(f"non-positive speculative time {spec}")
    k = cfg.k
    return SpeedupReport(
        t_base_ms=base,
        t_spec_ms=spec,
        eta=base / spec,
        attn_reduction=(k * cfg.alpha + 1) / (k * cfg.sparsity + 1),
        avg_gemm_tokens=(2 * k + 1) / (k + 1) * cfg.batch,
        avg_attn_bytes=(k * cfg.sparsity + 1) / (k + 1) * cfg.kv_bytes,
    )


@dataclass(frozen=True)
class Observation:
    """One measured iteration: GEMM tokens, attention bytes, latency."""

    gemm_tokens: float
    attn_bytes: float
    latency_ms: float


@dataclass(frozen=True)
class CalibrationResult:
    params: CostModelParams
    residual_rms_ms: float
    residual_max_ms: float


def calibrate(
    observations: list[Observation], b_hat: float = 256.0
) -> CalibrationResult:
    """Least-squares fit of the cost parameters from iteration measurements.

    The saturation point is taken as given, not fitted: the knee is not
    identifiable by linear least squares. The constant column absorbs both
    the flat GEMM term and any per-iteration overhead, so the fit reports
    ``fixed_overhead_ms = 0`` with everything constant in ``gemm_base_ms``.
    """
    if len(observations) < 2:
        raise CalibrationError("calibration needs at least two observations")
    a = np.array(
        [
            [1.0, max(0.0, o.gemm_tokens - b_hat), o.attn_bytes]
            for o in observations
        ]
    )
    y = np.array([o.latency_ms for o in observations])
    if np.linalg.matrix_rank(a) < a.shape[1]:
        raise CalibrationError(
            "observations are degenerate; vary GEMM tokens past the saturation "
            "point and attention bytes independently"
        )
    coef, _, _, _ = np.linalg.lstsq(a, y, rcond=None)
    base, slope, rate = (float(c) for c in coef)
    if base <= 0 or slope < 0 or rate <= 0:
        raise CalibrationError(f"fit produced out-of-range parameters {coef}")
    params = CostModelParams(
        b_hat=b_hat,
        gemm_base_ms=base,
        gemm_slope_ms_per_token=slope,
        attn_ms_per_byte=rate,
        fixed_overhead_ms=0.0,
    )
    residuals = y - a @ coef
    return CalibrationResult(
        params=params,
        residual_rms_ms=float(np.sqrt(np.mean(residuals**2))),
        residual_max_ms=float(np.max(np.abs(residuals))),
    )
