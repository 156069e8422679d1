"""File emission for simulation and decode runs.

Outputs are the contract here, so they must be byte-stable: identical inputs
produce identical files. Floats are written with ``repr`` (shortest exact
round-trip), rows keep a fixed column order, JSON keys are sorted, and line
endings are pinned to ``\\n`` regardless of platform.
"""

from __future__ import annotations

import csv
import json
from pathlib import Path
from typing import Any

from .engine import ROUND_CSV_COLUMNS, RoundStats
from .simulate import ITERATION_CSV_COLUMNS, SimReport


def _cell(value: Any) -> str:
    if isinstance(value, float):
        return repr(value)
    return str(value)


def _write_csv(path: Path, columns: tuple[str, ...], rows: list[tuple]) -> None:
    with path.open("w", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(columns)
        for row in rows:
            writer.writerow([_cell(v) for v in row])


def _write_json(path: Path, payload: dict) -> None:
    path.write_text(json.dumps(payload, indent=2, sort_keys=True) + "\n")


def summary_dict(report: SimReport) -> dict:
    summary: dict[str, Any] = {
        "level": report.level,
        "tokens_per_second": report.tokens_per_second,
        "eta": report.eta,
        "total_ms": report.total_ms,
        "emitted_tokens": report.emitted_tokens,
        "recomputation_ratio": report.recomputation_ratio,
        "breakdown": {
            "cpu_ms": report.breakdown.cpu_ms,
            "attn_ms": report.breakdown.attn_ms,
            "gemm_ms": report.breakdown.gemm_ms,
            "other_ms": report.breakdown.other_ms,
        },
    }
    if report.realized_alpha is not None:
        summary["realized_alpha"] = report.realized_alpha
    if report.acceptance_histogram is not None:
        summary["acceptance_histogram"] = {
            str(accepted): count for accepted, count in report.acceptance_histogram.items()
        }
    return summary


def emit_report(report: SimReport, out_dir: str | Path) -> tuple[Path, Path]:
    """Write ``iterations.csv`` and ``summary.json``; returns both paths."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    csv_path = out / "iterations.csv"
    rows = [
        (
            r.iteration,
            r.gemm_tokens,
            r.attn_bytes,
            r.latency_ms,
            r.device_util,
            r.offloaded_pages,
            r.stalled_requests,
        )
        for r in report.iterations
    ]
    _write_csv(csv_path, ITERATION_CSV_COLUMNS, rows)
    json_path = out / "summary.json"
    _write_json(json_path, summary_dict(report))
    return csv_path, json_path


def emit_decode_report(
    stats: RoundStats, committed: list[int], out_dir: str | Path
) -> tuple[Path, Path]:
    """Write per-round accounting and a summary for one decoded request."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    csv_path = out / "rounds.csv"
    _write_csv(csv_path, ROUND_CSV_COLUMNS, stats.csv_rows())
    json_path = out / "summary.json"
    _write_json(
        json_path,
        {
            "emitted_tokens": stats.emitted_tokens,
            "rounds": len(stats.rounds),
            "realized_alpha": stats.realized_alpha,
            "sparse_forwards": stats.sparse_forwards,
            "full_forwards": stats.full_forwards,
            "acceptance_histogram": {
                str(a): c for a, c in sorted(stats.acceptance_histogram().items())
            },
            "output": committed,
        },
    )
    return csv_path, json_path
