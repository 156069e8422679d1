"""Self-speculative decoding with sparse drafting, plus the serving simulator around it."""

from .config import AppConfig, EngineConfig, default_config, load_config, loads
from .costmodel import (
    CalibrationResult,
    CostModelParams,
    Observation,
    SpecConfig,
    SpeedupReport,
    calibrate,
    speedup,
)
from .engine import DecodeRequest, RoundStats, decode_to_completion, greedy_decode, prefill
from .errors import (
    CalibrationError,
    ConfigurationError,
    ContractError,
    DegenerateParameterError,
    ImpossibleRequestError,
    SimulationError,
    SpardecError,
    StateMachineError,
)
from .kvpool import KvPolicy, KvPool, page_bytes_per_token
from .model import ModelConfig, init_model
from .scheduler import (
    IterationBatch,
    PhaseBuckets,
    PipelineMode,
    SchedPolicy,
    assign_new_request,
    balance_metric,
    first_round_draft_len,
    form_batch,
)
from .selection import compute_budget, select_critical_tokens
from .simulate import KvPoolConfig, SimConfig, SimReport, run_cost_sim, run_token_sim
from .workload import (
    ArrivalKind,
    ArrivalSpec,
    LengthDist,
    LengthSpec,
    SimRequest,
    WorkloadSpec,
    acceptance_draw,
    generate_workload,
)

__version__ = "0.1.0"

__all__ = [
    "AppConfig",
    "ArrivalKind",
    "ArrivalSpec",
    "CalibrationError",
    "CalibrationResult",
    "ConfigurationError",
    "ContractError",
    "CostModelParams",
    "DecodeRequest",
    "DegenerateParameterError",
    "EngineConfig",
    "ImpossibleRequestError",
    "IterationBatch",
    "KvPolicy",
    "KvPool",
    "KvPoolConfig",
    "LengthDist",
    "LengthSpec",
    "ModelConfig",
    "Observation",
    "PhaseBuckets",
    "PipelineMode",
    "RoundStats",
    "SchedPolicy",
    "SimConfig",
    "SimReport",
    "SimRequest",
    "SimulationError",
    "SpardecError",
    "SpecConfig",
    "SpeedupReport",
    "StateMachineError",
    "WorkloadSpec",
    "acceptance_draw",
    "assign_new_request",
    "balance_metric",
    "calibrate",
    "compute_budget",
    "decode_to_completion",
    "default_config",
    "first_round_draft_len",
    "form_batch",
    "generate_workload",
    "greedy_decode",
    "init_model",
    "load_config",
    "loads",
    "page_bytes_per_token",
    "prefill",
    "run_cost_sim",
    "run_token_sim",
    "select_critical_tokens",
    "speedup",
]
