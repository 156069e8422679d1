"""Command-line entry points.

Subcommands:

* ``decode``    token-level speculative decode of one request, checked
                against plain greedy decoding
* ``simulate``  iteration-stepped serving simulation (``--level cost`` uses
                the analytical latency model, ``--level token`` runs the
                real engine on a toy model)
* ``sweep``     closed-form speedup grid over k / alpha / sparsity / batch
* ``speedup``   closed-form speedup at a single operating point
* ``selftest``  invariant suites; exits 3 on any violation

Exit codes: 0 success, 2 configuration error, 3 selftest violation.
"""

from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path

import numpy as np

from .config import AppConfig, default_config, load_config, render_default_ini
from .costmodel import SpecConfig, speedup
from .engine import DecodeRequest, decode_to_completion, greedy_decode
from .errors import ConfigurationError, SpardecError
from .model import init_model
from .reporting import emit_decode_report, emit_report, summary_dict
from .simulate import analytic_config, run_cost_sim, run_token_sim
from . import selftest as selftest_mod

SWEEP_CSV_COLUMNS = (
    "k",
    "alpha",
    "sparsity",
    "batch",
    "kv_bytes",
    "t_base_ms",
    "t_spec_ms",
    "eta",
    "attn_reduction",
    "avg_gemm_tokens",
    "avg_attn_bytes",
)


def _load(args: argparse.Namespace) -> AppConfig:
    if args.config is None:
        return default_config()
    return load_config(args.config)


def _float_list(text: str) -> list[float]:
    try:
        return [float(part) for part in text.split(",") if part.strip() != ""]
    except ValueError as exc:
        raise argparse.ArgumentTypeError(f"bad list {text!r}") from exc


def _int_list(text: str) -> list[int]:
    try:
        return [int(part) for part in text.split(",") if part.strip() != ""]
    except ValueError as exc:
        raise argparse.ArgumentTypeError(f"bad list {text!r}") from exc


def _cmd_decode(args: argparse.Namespace) -> int:
    cfg = _load(args)
    model = init_model(cfg.model)
    rng = np.random.default_rng(cfg.workload.seed)
    prompt_len = max(1, int(round(cfg.workload.input_len.mean)))
    prompt = rng.integers(0, cfg.model.vocab_size, size=prompt_len).tolist()
    request = DecodeRequest(
        request_id=0,
        prompt=prompt,
        max_output=cfg.engine.max_output,
        eos_token=cfg.engine.eos_token,
    )
    committed, stats = decode_to_completion(model, request, cfg.engine.k, cfg.engine.sparsity)
    oracle = greedy_decode(model, prompt, cfg.engine.max_output, cfg.engine.eos_token)
    lossless = committed == oracle
    print(f"emitted_tokens: {stats.emitted_tokens}")
    print(f"rounds: {len(stats.rounds)}")
    print(f"realized_alpha: {stats.realized_alpha:.4f}")
    print(f"lossless: {str(lossless).lower()}")
    if args.out is not None:
        csv_path, json_path = emit_decode_report(stats, committed, args.out)
        print(f"wrote {csv_path} and {json_path}")
    if not lossless:
        print("speculative output diverged from greedy decoding", file=sys.stderr)
        return 3
    return 0


def _cmd_simulate(args: argparse.Namespace) -> int:
    cfg = _load(args)
    if args.level == "cost":
        report = run_cost_sim(cfg.workload, cfg.cost, cfg.sim, cfg.kv)
    else:
        report = run_token_sim(cfg.workload, cfg.model, cfg.sim, cfg.kv, params=cfg.cost)
    print(json.dumps(summary_dict(report), indent=2, sort_keys=True))
    if args.out is not None:
        csv_path, json_path = emit_report(report, args.out)
        print(f"wrote {csv_path} and {json_path}")
    return 0


def _speedup_row(cfg: AppConfig, k: int, alpha: float, sparsity: float, batch: int, kv_bytes: float):
    point = SpecConfig(k=k, alpha=alpha, sparsity=sparsity, batch=batch, kv_bytes=kv_bytes)
    report = speedup(cfg.cost, point)
    return (
        k,
        alpha,
        sparsity,
        batch,
        kv_bytes,
        report.t_base_ms,
        report.t_spec_ms,
        report.eta,
        report.attn_reduction,
        report.avg_gemm_tokens,
        report.avg_attn_bytes,
    )


def _default_kv_bytes(cfg: AppConfig) -> float:
    return analytic_config(cfg.sim, cfg.workload, cfg.kv.page_bytes).kv_bytes


def _cmd_sweep(args: argparse.Namespace) -> int:
    cfg = _load(args)
    kv_bytes = args.kv_bytes if args.kv_bytes is not None else _default_kv_bytes(cfg)
    lines = [",".join(SWEEP_CSV_COLUMNS)]
    for k in args.k:
        for alpha in args.alpha:
            for sparsity in args.sparsity:
                for batch in args.batch:
                    row = _speedup_row(cfg, k, alpha, sparsity, batch, kv_bytes)
                    lines.append(",".join(repr(v) if isinstance(v, float) else str(v) for v in row))
    text = "\n".join(lines) + "\n"
    if args.out is not None:
        Path(args.out).write_text(text)
        print(f"wrote {args.out} ({len(lines) - 1} rows)")
    else:
        sys.stdout.write(text)
    return 0


def _cmd_speedup(args: argparse.Namespace) -> int:
    cfg = _load(args)
    k = args.k if args.k is not None else cfg.engine.k
    alpha = args.alpha if args.alpha is not None else cfg.sim.alpha
    sparsity = args.sparsity if args.sparsity is not None else cfg.engine.sparsity
    batch = args.batch if args.batch is not None else cfg.sim.max_batch
    kv_bytes = args.kv_bytes if args.kv_bytes is not None else _default_kv_bytes(cfg)
    row = _speedup_row(cfg, k, alpha, sparsity, batch, kv_bytes)
    for name, value in zip(SWEEP_CSV_COLUMNS, row):
        print(f"{name}: {value}")
    return 0


def _cmd_selftest(args: argparse.Namespace) -> int:
    failures = selftest_mod.run_selftest(fast=args.fast)
    if failures:
        print(f"{failures} invariant violation(s)", file=sys.stderr)
        return 3
    return 0


def _cmd_init_config(args: argparse.Namespace) -> int:
    text = render_default_ini()
    if args.out is not None:
        Path(args.out).write_text(text)
        print(f"wrote {args.out}")
    else:
        sys.stdout.write(text)
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="spardec",
        description="Lossless self-speculative decoding with sparse drafting: "
        "toy-scale engine, serving simulator, and analytical cost model.",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("decode", help="token-level decode of one request")
    p.add_argument("--config", type=str, default=None, help="INI config path")
    p.add_argument("--out", type=str, default=None, help="directory for rounds.csv/summary.json")
    p.set_defaults(func=_cmd_decode)

    p = sub.add_parser("simulate", help="iteration-stepped serving simulation")
    p.add_argument("--config", type=str, default=None)
    p.add_argument("--level", choices=("cost", "token"), default="cost")
    p.add_argument("--out", type=str, default=None, help="directory for iterations.csv/summary.json")
    p.set_defaults(func=_cmd_simulate)

    p = sub.add_parser("sweep", help="closed-form speedup grid, CSV output")
    p.add_argument("--config", type=str, default=None)
    p.add_argument("--k", type=_int_list, default=[4, 8, 16])
    p.add_argument("--alpha", type=_float_list, default=[0.5, 0.7, 0.9])
    p.add_argument("--sparsity", type=_float_list, default=[0.05, 0.2, 1.0])
    p.add_argument("--batch", type=_int_list, default=[64])
    p.add_argument("--kv-bytes", type=float, default=None)
    p.add_argument("--out", type=str, default=None, help="CSV path (default stdout)")
    p.set_defaults(func=_cmd_sweep)

    p = sub.add_parser("speedup", help="closed-form speedup at one operating point")
    p.add_argument("--config", type=str, default=None)
    p.add_argument("--k", type=int, default=None)
    p.add_argument("--alpha", type=float, default=None)
    p.add_argument("--sparsity", type=float, default=None)
    p.add_argument("--batch", type=int, default=None)
    p.add_argument("--kv-bytes", type=float, default=None)
    p.set_defaults(func=_cmd_speedup)

    p = sub.add_parser("selftest", help="run the invariant suites")
    p.add_argument("--fast", action="store_true", help="smaller sample sizes")
    p.set_defaults(func=_cmd_selftest)

    p = sub.add_parser("init-config", help="print the default config file")
    p.add_argument("--out", type=str, default=None)
    p.set_defaults(func=_cmd_init_config)

    return parser


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except ConfigurationError as exc:
        print(f"configuration error: {exc}", file=sys.stderr)
        return 2
    except SpardecError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
