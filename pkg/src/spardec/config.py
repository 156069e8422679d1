"""INI configuration for the CLI and simulations.

Flat key-value sections, one per subsystem, parsed with ``configparser``.
Every key has a default, so an empty file is a valid config; unknown
sections or keys are hard errors rather than silent typo sinks. Enum-valued
keys take the lowercase member values (``unified``/``naive`` and so on).
"""

from __future__ import annotations

import configparser
from dataclasses import dataclass
from pathlib import Path
from typing import Callable, TypeVar

from .costmodel import CostModelParams
from .errors import ConfigurationError
from .kvpool import KvPolicy
from .model import ModelConfig
from .scheduler import PipelineMode, SchedPolicy
from .simulate import KvPoolConfig, SimConfig
from .workload import ArrivalKind, ArrivalSpec, LengthDist, LengthSpec, WorkloadSpec

T = TypeVar("T")

_SCHEMA: dict[str, dict[str, str]] = {
    "model": {
        "num_layers": "2",
        "num_q_heads": "4",
        "num_kv_heads": "2",
        "head_dim": "8",
        "vocab_size": "64",
        "seed": "0",
    },
    "engine": {
        "k": "4",
        "sparsity": "0.25",
        "max_output": "64",
        "eos_token": "",
    },
    "scheduler": {
        "policy": "unified",
        "pipeline": "delayed",
        "max_batch": "8",
    },
    "kv": {
        "capacity_pages": "65536",
        "page_bytes": "147456",
        "chunk_pages": "64",
        "pcie_gbps": "16.0",
        "policy": "offload",
    },
    "cost": {
        "b_hat": "256.0",
        "gemm_base_ms": "2.0",
        "gemm_slope_ms_per_token": "0.03",
        "attn_ms_per_byte": "2.0e-9",
        "fixed_overhead_ms": "0.0",
        "cpu_ms_per_verify": "0.0",
    },
    "workload": {
        "n_requests": "8",
        "input_dist": "constant",
        "input_mean": "32",
        "input_std": "0",
        "output_dist": "normal",
        "output_mean": "96",
        "output_std": "32",
        "arrival": "start",
        "arrival_rate_per_s": "0",
        "max_len": str(1 << 20),
        "seed": "0",
    },
    "sim": {
        "alpha": "0.7",
        "max_iterations": "1000000",
    },
}


@dataclass(frozen=True)
class EngineConfig:
    k: int
    sparsity: float
    max_output: int
    eos_token: int | None


@dataclass(frozen=True)
class AppConfig:
    model: ModelConfig
    engine: EngineConfig
    sim: SimConfig
    kv: KvPoolConfig
    cost: CostModelParams
    workload: WorkloadSpec


class _Values:
    def __init__(self, parser: configparser.ConfigParser):
        self._parser = parser

    def _raw(self, section: str, key: str) -> str:
        if self._parser.has_option(section, key):
            return self._parser.get(section, key).strip()
        return _SCHEMA[section][key]

    def typed(self, section: str, key: str, convert: Callable[[str], T]) -> T:
        raw = self._raw(section, key)
        try:
            return convert(raw)
        except (ValueError, KeyError) as exc:
            raise ConfigurationError(f"[{section}] {key}: bad value {raw!r}") from exc

    def int_(self, section: str, key: str) -> int:
        return self.typed(section, key, int)

    def float_(self, section: str, key: str) -> float:
        return self.typed(section, key, float)

    def optional_int(self, section: str, key: str) -> int | None:
        raw = self._raw(section, key)
        if raw == "":
            return None
        return self.typed(section, key, int)

    def enum(self, section: str, key: str, enum_type):
        return self.typed(section, key, enum_type)


def loads(text: str) -> AppConfig:
    parser = configparser.ConfigParser(interpolation=None, default_section="__never__")
    try:
        parser.read_string(text)
    except configparser.Error as exc:
        raise ConfigurationError(f"malformed config: {exc}") from exc
    for section in parser.sections():
        if section not in _SCHEMA:
            raise ConfigurationError(f"unknown section [{section}]")
        for key in parser.options(section):
            if key not in _SCHEMA[section]:
                raise ConfigurationError(f"unknown key {key!r} in section [{section}]")
    v = _Values(parser)

    model = ModelConfig(
        num_layers=v.int_("model", "num_layers"),
        num_q_heads=v.int_("model", "num_q_heads"),
        num_kv_heads=v.int_("model", "num_kv_heads"),
        head_dim=v.int_("model", "head_dim"),
        vocab_size=v.int_("model", "vocab_size"),
        seed=v.int_("model", "seed"),
    )
    engine = EngineConfig(
        k=v.int_("engine", "k"),
        sparsity=v.float_("engine", "sparsity"),
        max_output=v.int_("engine", "max_output"),
        eos_token=v.optional_int("engine", "eos_token"),
    )
    if engine.k < 1:
        raise ConfigurationError("[engine] k must be at least 1")
    sim = SimConfig(
        k=engine.k,
        alpha=v.float_("sim", "alpha"),
        sparsity=engine.sparsity,
        max_batch=v.int_("scheduler", "max_batch"),
        sched_policy=v.enum("scheduler", "policy", SchedPolicy),
        pipeline=v.enum("scheduler", "pipeline", PipelineMode),
        cpu_ms_per_verify=v.float_("cost", "cpu_ms_per_verify"),
        max_iterations=v.int_("sim", "max_iterations"),
    )
    kv = KvPoolConfig(
        capacity_pages=v.int_("kv", "capacity_pages"),
        page_bytes=v.int_("kv", "page_bytes"),
        chunk_pages=v.int_("kv", "chunk_pages"),
        pcie_gbps=v.float_("kv", "pcie_gbps"),
        policy=v.enum("kv", "policy", KvPolicy),
    )
    cost = CostModelParams(
        b_hat=v.float_("cost", "b_hat"),
        gemm_base_ms=v.float_("cost", "gemm_base_ms"),
        gemm_slope_ms_per_token=v.float_("cost", "gemm_slope_ms_per_token"),
        attn_ms_per_byte=v.float_("cost", "attn_ms_per_byte"),
        fixed_overhead_ms=v.float_("cost", "fixed_overhead_ms"),
    )
    workload = WorkloadSpec(
        n_requests=v.int_("workload", "n_requests"),
        input_len=LengthSpec(
            dist=v.enum("workload", "input_dist", LengthDist),
            mean=v.float_("workload", "input_mean"),
            std=v.float_("workload", "input_std"),
        ),
        output_len=LengthSpec(
            dist=v.enum("workload", "output_dist", LengthDist),
            mean=v.float_("workload", "output_mean"),
            std=v.float_("workload", "output_std"),
        ),
        arrival=ArrivalSpec(
            kind=v.enum("workload", "arrival", ArrivalKind),
            rate_per_s=v.float_("workload", "arrival_rate_per_s"),
        ),
        seed=v.int_("workload", "seed"),
        max_len=v.int_("workload", "max_len"),
    )
    return AppConfig(model=model, engine=engine, sim=sim, kv=kv, cost=cost, workload=workload)


def load_config(path: str | Path) -> AppConfig:
    try:
        text = Path(path).read_text()
    except OSError as exc:
        raise ConfigurationError(f"cannot read config {path}: {exc}") from exc
    return loads(text)


def default_config() -> AppConfig:
    return loads("")


def render_default_ini() -> str:
    """The full key set with defaults, suitable as a starting config file."""
    lines: list[str] = []
    for section, keys in _SCHEMA.items():
        lines.append(f"[{section}]")
        for key, value in keys.items():
            lines.append(f"{key} = {value}")
        lines.append("")
    return "\n".join(lines)
