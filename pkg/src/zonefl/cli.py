"""``zonefl`` command line: run, compare, selfcheck.

Exit codes: 0 success, 2 config error, 3 numeric failure, 4 selfcheck failure.
"""

from __future__ import annotations

import argparse
import dataclasses
import hashlib
import logging
import os
import statistics
import sys
import time
from concurrent.futures import ThreadPoolExecutor
from datetime import datetime, timezone
from pathlib import Path

import yaml

from . import __version__
from .config import ConfigFileError, RunSettings, load_settings
from .harness import RunFailed, run_strategy, with_seed
from .results import COMPARE_COLUMNS, atomic_write, csv_text, improvement_gain, json_text, write_run
from .scenario import STRATEGIES, ConfigError, generate_scenario
from .selfcheck import run_selfcheck

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_NUMERIC = 3
EXIT_SELFCHECK = 4
OUTPUT_ENV = "ZONEFL_OUTPUT_DIR"

log = logging.getLogger("zonefl")


def _now() -> str:
    return datetime.now(timezone.utc).isoformat(timespec="seconds")


def parse_overrides(args) -> dict:
    out = {}
    for item in args.set or ():
        key, sep, raw = item.partition("=")
        if not sep or not key:
            raise ConfigFileError(f"--set expects key=value, got {item!r}")
        out[key.strip()] = yaml.safe_load(raw)
    for name in ("strategy", "seed", "rounds"):
        value = getattr(args, name, None)
        if value is not None:
            out[name] = value
    return out


def output_dir(args, settings: RunSettings) -> Path:
    if getattr(args, "out", None):
        return Path(args.out)
    env = os.environ.get(OUTPUT_ENV)
    if env:
        return Path(env)
    return Path(settings.output_dir)


def effective_config(settings: RunSettings) -> dict:
    return dataclasses.asdict(settings.scenario)


def _manifest(args, settings: RunSettings, overrides: dict, started: str, command: str) -> dict:
    cfg = settings.scenario
    return {
        "command": command,
        "config_path": str(args.config),
        "config_file_sha256": hashlib.sha256(Path(args.config).read_bytes()).hexdigest(),
        "config_hash": settings.config_hash,
        "overrides": overrides,
        "seed": cfg.seed,
        "strategy": cfg.strategy,
        "started": started,
        "finished": _now(),
    }


def cmd_run(args) -> int:
    overrides = parse_overrides(args)
    settings = load_settings(args.config, overrides)
    cfg = settings.scenario
    out = output_dir(args, settings)
    started = _now()
    scenario = generate_scenario(cfg)
    code = EXIT_OK
    try:
        result = run_strategy(scenario)
    except RunFailed as exc:
        result = exc.partial
        code = EXIT_NUMERIC
        print(f"error: numeric failure: {exc}; partial results in {out}", file=sys.stderr)
    write_run(out, result, truth=scenario.truth, effective_config=effective_config(settings),
              write_betas=settings.write_betas and not args.no_betas,
              manifest=_manifest(args, settings, overrides, started, "run"))
    if code == EXIT_OK:
        print(f"{cfg.strategy} seed={cfg.seed} {result.metric_name}={result.final_metric:.6f} "
              f"zones={len(result.final_zones)} -> {out}")
    return code


def _one(settings: RunSettings, strategy: str, seed: int):
    cfg = with_seed(settings.scenario, seed)
    return run_strategy(generate_scenario(cfg), strategy)


def compare_rows(values: dict, metric_lower_better: dict) -> list:
    """values: {metric: {strategy: [per-seed values]}} -> table rows in COMPARE_COLUMNS order."""
    rows = []
    for strategy in STRATEGIES:
        for metric, by_strategy in values.items():
            xs = by_strategy[strategy]
            mean = statistics.fmean(xs)
            sd = statistics.stdev(xs) if len(xs) > 1 else 0.0
            base = statistics.fmean(by_strategy["global"])
            g_base, g_value = improvement_gain(base, mean, metric_lower_better[metric])
            rows.append((strategy, metric, mean, sd, len(xs), g_base, g_value))
    return rows


def cmd_compare(args) -> int:
    overrides = parse_overrides(args)
    if args.seeds:
        overrides["compare.seeds"] = [int(s) for s in args.seeds.split(",")]
    settings = load_settings(args.config, overrides)
    out = output_dir(args, settings)
    started = _now()
    jobs = [(s, seed) for seed in settings.compare_seeds for s in STRATEGIES]
    with ThreadPoolExecutor(max_workers=max(1, args.jobs)) as pool:
        futures = {job: pool.submit(_one, settings, *job) for job in jobs}
    results = {}
    for job, fut in futures.items():
        try:
            results[job] = fut.result()
        except RunFailed as exc:
            print(f"error: numeric failure in {job[0]} seed {job[1]}: {exc}", file=sys.stderr)
            return EXIT_NUMERIC

    hashes = {seed: {results[(s, seed)].dataset_hash for s in STRATEGIES} for seed in settings.compare_seeds}
    if any(len(h) != 1 for h in hashes.values()):
        raise RuntimeError("strategies saw different datasets for one seed")
    metric_name = results[jobs[0]].metric_name
    values = {
        metric_name: {s: [results[(s, seed)].final_metric for seed in settings.compare_seeds] for s in STRATEGIES},
        "validation_loss": {s: [results[(s, seed)].final_validation_loss for seed in settings.compare_seeds]
                            for s in STRATEGIES},
    }
    rows = compare_rows(values, {metric_name: metric_name == "rmse", "validation_loss": True})
    atomic_write(out / "compare.csv", csv_text(COMPARE_COLUMNS, rows))
    atomic_write(out / "compare.json", json_text({
        "seeds": list(settings.compare_seeds),
        "per_seed": values,
        "merges": {s: [sum(e["kind"] == "merge" for e in results[(s, seed)].events)
                       for seed in settings.compare_seeds] for s in STRATEGIES},
        "splits": {s: [sum(e["kind"] == "split" for e in results[(s, seed)].events)
                       for seed in settings.compare_seeds] for s in STRATEGIES},
    }))
    manifest = _manifest(args, settings, overrides, started, "compare")
    manifest.update(tool_version=__version__, seeds=list(settings.compare_seeds),
                    outputs={"table": str(out / "compare.csv"), "per_seed": str(out / "compare.json")})
    atomic_write(out / "manifest.json", json_text(manifest))

    print(f"{'strategy':<8} {'metric':<16} {'mean':>10} {'sd':>9}  gain%/global  gain%/value")
    for strategy, metric, mean, sd, _, gb, gv in rows:
        print(f"{strategy:<8} {metric:<16} {mean:>10.5f} {sd:>9.5f}  {gb:>12.3f}  {gv:>11.3f}")
    return EXIT_OK


def cmd_selfcheck(args) -> int:
    start = time.perf_counter()
    results = run_selfcheck()
    for r in results:
        print(f"{'PASS' if r.ok else 'FAIL'} {r.name}: {r.detail} ({r.seconds:.2f}s)")
    ok = all(r.ok for r in results)
    print(f"{'all checks passed' if ok else 'selfcheck FAILED'} in {time.perf_counter() - start:.1f}s")
    return EXIT_OK if ok else EXIT_SELFCHECK


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="zonefl", description="Zone-based federated learning simulator")
    p.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    p.add_argument("-v", "--verbose", action="count", default=0)
    sub = p.add_subparsers(dest="command", required=True)

    def common(sp):
        sp.add_argument("config", help="YAML config file")
        sp.add_argument("--set", action="append", metavar="KEY=VALUE",
                        help="override a config key, e.g. --set scenario.noise_std=0.5 (repeatable)")
        sp.add_argument("--rounds", type=int)
        sp.add_argument("--out", help=f"output directory (else ${OUTPUT_ENV}, else output.dir)")

    run = sub.add_parser("run", help="run one strategy on one seed")
    common(run)
    run.add_argument("--strategy", choices=STRATEGIES)
    run.add_argument("--seed", type=int)
    run.add_argument("--no-betas", action="store_true", help="skip betas.csv for zgd runs")
    run.set_defaults(func=cmd_run)

    cmp_ = sub.add_parser("compare", help="all strategies, paired over a seed set")
    common(cmp_)
    cmp_.add_argument("--seeds", help="comma-separated seeds (at least 5)")
    cmp_.add_argument("--jobs", type=int, default=1, help="worker threads")
    cmp_.set_defaults(func=cmd_compare)

    chk = sub.add_parser("selfcheck", help="run the oracle suite")
    chk.set_defaults(func=cmd_selfcheck)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.WARNING - 10 * min(args.verbose, 2), format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except ConfigError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG


if __name__ == "__main__":
    sys.exit(main())
