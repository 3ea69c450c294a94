"""Result files for one run, plus the comparison table.

Layout of a run directory (schema version ``RESULTS_SCHEMA``):

``rounds.csv``
    one row per round per active zone, columns ``ROUND_COLUMNS``
``events.jsonl``
    partition changes and aborted zone updates, one JSON object per line
``checks.jsonl``
    every merge/split check, including rejected ones, with candidate losses
``betas.csv``
    ZGD attention coefficients, columns ``BETA_COLUMNS`` (zgd runs only)
``summary.json``
    final metrics, ledger totals, planted truth, status
``manifest.json``
    config hash, seed, tool version, strategy, timestamps, paths

Everything except the manifest timestamps is a pure function of the
effective config and seed.
"""

from __future__ import annotations

import csv
import io
import json
import math
import os
import tempfile
from collections import defaultdict
from pathlib import Path

from . import __version__
from .harness import StrategyResult, ledger_load_fraction, server_load_fraction

RESULTS_SCHEMA = 1
ROUND_COLUMNS = (
    "round", "zone_id", "partition_version", "train_loss", "validation_loss",
    "models_sent", "gradients_received", "validations_received",
)
BETA_COLUMNS = ("round", "zone_id", "neighbor_id", "beta")
COMPARE_COLUMNS = (
    "strategy", "metric", "mean", "sd", "n_seeds", "gain_vs_global_pct", "gain_vs_strategy_pct",
)
FAILURE_MARKER = "FAILED"


def atomic_write(path, text: str) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=f".{path.name}.", suffix=".tmp")
    try:
        with os.fdopen(fd, "w", newline="") as fh:
            fh.write(text)
            fh.flush()
            os.fsync(fh.fileno())
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def _cell(v) -> str:
    if v is None:
        return ""
    if isinstance(v, float):
        return repr(v)
    return str(v)


def csv_text(columns, rows) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(columns)
    for row in rows:
        w.writerow([_cell(v) for v in row])
    return buf.getvalue()


def _finite(obj):
    # strict JSON has no inf/nan; a diverged run writes them as null
    if isinstance(obj, float):
        return obj if math.isfinite(obj) else None
    if isinstance(obj, dict):
        return {k: _finite(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_finite(v) for v in obj]
    return obj


def json_text(obj) -> str:
    return json.dumps(_finite(obj), indent=2, sort_keys=True, allow_nan=False) + "\n"


def jsonl_text(items) -> str:
    return "".join(json.dumps(_finite(it), sort_keys=True, allow_nan=False) + "\n" for it in items)


def ledger_totals(result: StrategyResult) -> dict:
    out: dict = defaultdict(lambda: defaultdict(int))
    for key, n in result.ledger.items():
        _, kind, counter = key.rsplit("|", 2)
        out[counter][kind] += n
    return {c: dict(sorted(k.items())) for c, k in sorted(out.items())}


def summary_dict(result: StrategyResult, truth=None, effective_config=None) -> dict:
    ok = result.failure is None
    summary = {
        "schema_version": RESULTS_SCHEMA,
        "status": "ok" if ok else "failed",
        "failure": result.failure,
        "strategy": result.strategy,
        "seed": result.seed,
        "metric_name": result.metric_name,
        "final_metric": result.final_metric,
        "final_validation_loss": result.final_validation_loss if result.records else None,
        "per_user": dict(sorted(result.per_user.items())),
        "n_clients": result.n_clients,
        "dataset_hash": result.dataset_hash,
        "final_zones": list(result.final_zones),
        "final_params": result.final_params,
        "empty_zones": list(result.empty_zones),
        "client_zone_counts": dict(sorted(result.client_zone_counts.items())),
        "server_load_fraction": server_load_fraction(result) if result.load_rounds else None,
        "ledger_load_fraction": ledger_load_fraction(result) if result.load_rounds else None,
        "ledger_totals": ledger_totals(result),
        "n_merges": sum(1 for e in result.events if e["kind"] == "merge"),
        "n_splits": sum(1 for e in result.events if e["kind"] == "split"),
        "rounds_completed": len({r.round for r in result.records}),
    }
    if truth is not None:
        summary["planted_truth"] = truth.as_dict()
    if effective_config is not None:
        summary["config"] = effective_config
    return summary


def write_run(out_dir, result: StrategyResult, *, truth=None, effective_config=None,
              write_betas: bool = True, manifest: dict | None = None) -> dict:
    """Write all run files; returns {name: path}. A failed run also gets a FAILED marker."""
    out = Path(out_dir)
    paths = {
        "rounds": out / "rounds.csv",
        "events": out / "events.jsonl",
        "checks": out / "checks.jsonl",
        "summary": out / "summary.json",
    }
    atomic_write(paths["rounds"], csv_text(ROUND_COLUMNS, (
        (r.round, r.zone_id, r.version, r.train_loss, r.validation_loss,
         r.models_sent, r.gradients_received, r.validations_received) for r in result.records)))
    atomic_write(paths["events"], jsonl_text(result.events))
    atomic_write(paths["checks"], jsonl_text(result.checks))
    if write_betas and result.strategy == "zgd":
        paths["betas"] = out / "betas.csv"
        atomic_write(paths["betas"], csv_text(BETA_COLUMNS, result.betas))
    atomic_write(paths["summary"], json_text(summary_dict(result, truth, effective_config)))
    marker = out / FAILURE_MARKER
    if result.failure is not None:
        paths["failure"] = marker
        atomic_write(marker, result.failure + "\n")
    elif marker.exists():
        marker.unlink()
    if manifest is not None:
        paths["manifest"] = out / "manifest.json"
        manifest = dict(manifest, tool_version=__version__, schema_version=RESULTS_SCHEMA,
                        outputs={k: str(p) for k, p in sorted(paths.items())})
        atomic_write(paths["manifest"], json_text(manifest))
    return paths


def improvement_gain(baseline: float, value: float, lower_is_better: bool = True) -> tuple[float, float]:
    """Relative improvement of ``value`` over ``baseline`` in percent.

    Returns (relative to the baseline, relative to ``value``); both are
    reported because published gains use either convention.
    """
    diff = baseline - value if lower_is_better else value - baseline
    return diff / baseline * 100.0, diff / value * 100.0
