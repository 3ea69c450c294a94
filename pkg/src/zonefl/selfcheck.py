"""Oracle suite behind ``zonefl selfcheck``.

Each check compares the implementation against an independent, simpler
computation. ``attention`` can be swapped for a mutated function to confirm
the suite notices.
"""

from __future__ import annotations

import math
import time
from dataclasses import dataclass
from typing import Callable

import numpy as np

from .model import LINEAR, LOGISTIC, Gradient, ModelParams, SampleSet, analytic_gradient, dataset_loss
from .protocol import RoundConfig, fedavg
from .scenario import ScenarioConfig, generate_scenario
from .harness import run_strategy
from .topology import ZonePartition, atomic_adjacency_closure
from .zgd import attention_coefficients
from .zms import ZmsConfig

FD_TOLERANCE = 1e-5
NORMALIZATION_TOLERANCE = 1e-9


@dataclass(frozen=True)
class CheckResult:
    name: str
    ok: bool
    detail: str
    seconds: float = 0.0


def fd_relative_error(params: ModelParams, data: SampleSet, h: float = 1e-6) -> float:
    """Worst relative error between the analytic gradient and central differences."""
    g = analytic_gradient(params, data).delta
    fd = np.empty_like(g)
    for j in range(g.size):
        e = np.zeros_like(g)
        e[j] = h
        up = dataset_loss(params.shifted(e), data)
        down = dataset_loss(params.shifted(-e), data)
        fd[j] = (up - down) / (2 * h)
    return float(np.max(np.abs(g - fd)) / max(np.max(np.abs(g)), np.max(np.abs(fd)), 1e-3))


def check_gradients(cases: int = 100, seed: int = 0) -> CheckResult:
    rng = np.random.default_rng(seed)
    worst = 0.0
    for i in range(cases):
        kind = (LINEAR, LOGISTIC)[i % 2]
        d = int(rng.integers(1, 7))
        n = int(rng.integers(1, 12))
        X = rng.uniform(-1, 1, size=(n, d))
        y = rng.normal(size=n) if kind == LINEAR else rng.integers(0, 2, size=n).astype(float)
        params = ModelParams(rng.normal(size=d + 1), kind)
        worst = max(worst, fd_relative_error(params, SampleSet(X, y, np.array(["z"] * n, dtype=object))))
    return CheckResult("gradient_finite_differences", worst < FD_TOLERANCE,
                       f"max relative error {worst:.2e} over {cases} cases (limit {FD_TOLERANCE:.0e})")


def hand_attention() -> tuple[float, float]:
    """Betas for own=[1, 0] against neighbours [1, 0] and [-1, 0], in scalar math."""
    e1 = 1.0 / (1.0 + math.exp(-1.0))
    e2 = 1.0 / (1.0 + math.exp(1.0))
    z = math.exp(e1) + math.exp(e2)
    return math.exp(e1) / z, math.exp(e2) / z


def check_attention(attention: Callable = attention_coefficients, cases: int = 200, seed: int = 0) -> CheckResult:
    rng = np.random.default_rng(seed)
    worst = 0.0
    for _ in range(cases):
        d = int(rng.integers(1, 10))
        k = int(rng.integers(1, 6))
        scale = 10.0 ** rng.uniform(-3, 2)
        own = rng.normal(scale=scale, size=d)
        neigh = [rng.normal(scale=scale, size=d) for _ in range(k)]
        beta = np.asarray(attention(own, neigh), dtype=float)
        if beta.shape != (k,) or not np.all(np.isfinite(beta)) or np.any(beta <= 0):
            return CheckResult("attention_normalization", False, f"bad coefficients {beta!r}")
        worst = max(worst, abs(math.fsum(beta) - 1.0))
    if worst > NORMALIZATION_TOLERANCE:
        return CheckResult("attention_normalization", False, f"sum deviates from 1 by {worst:.2e}")
    expected = hand_attention()
    got = np.asarray(attention(np.array([1.0, 0.0]), [np.array([1.0, 0.0]), np.array([-1.0, 0.0])]), dtype=float)
    if not np.allclose(got, expected, rtol=0, atol=1e-12):
        return CheckResult("attention_normalization", False,
                           f"hand case gave {got.tolist()}, expected {list(expected)}")
    return CheckResult("attention_normalization", True,
                       f"{cases} random cases within {worst:.1e} of 1; hand case {got[0]:.6f}/{got[1]:.6f}")


def weighted_mean_oracle(deltas, weights) -> list:
    """Coordinate-wise weighted mean in plain Python floats, same reduction order as fedavg."""
    wsum = sum(weights)
    out = []
    for j in range(len(deltas[0])):
        acc = 0.0
        for w, d in zip(weights, deltas):
            acc = acc + (w / wsum) * float(d[j])
        out.append(acc)
    return out


def check_fedavg(cases: int = 100, seed: int = 0) -> CheckResult:
    rng = np.random.default_rng(seed)
    for i in range(cases):
        d = int(rng.integers(1, 10))
        m = int(rng.integers(1, 8))
        deltas = [rng.normal(size=d) for _ in range(m)]
        counts = [int(c) for c in rng.integers(1, 50, size=m)]
        got = fedavg([Gradient(x, c) for x, c in zip(deltas, counts)]).delta
        want = weighted_mean_oracle(deltas, [float(c) for c in counts])
        if got.tolist() != want:
            return CheckResult("fedavg_weighted_mean", False, f"case {i}: {got.tolist()} != {want}")
    return CheckResult("fedavg_weighted_mean", True, f"{cases} random cases equal the oracle exactly")


def random_partition_walk(rng, rows: int, cols: int, steps: int):
    """Yield partitions along a random sequence of merges and splits on a grid."""
    part = ZonePartition.grid(rows, cols)
    yield part
    for _ in range(steps):
        merged = part.merged_zones()
        if merged and rng.random() < 0.4:
            z = merged[int(rng.integers(len(merged)))]
            candidates = [n for n in part.tree(z).nodes() if n.zone_id != z]
            cand = candidates[int(rng.integers(len(candidates)))]
            part = part.apply_split(z, cand.zone_id)
        else:
            pairs = sorted(tuple(sorted(p)) for p in part.adjacency)
            if not pairs:
                continue
            a, b = pairs[int(rng.integers(len(pairs)))]
            part = part.apply_merge(a, b)
        yield part


def check_adjacency(sequences: int = 200, seed: int = 0) -> CheckResult:
    rng = np.random.default_rng(seed)
    states = 0
    for s in range(sequences):
        rows, cols = int(rng.integers(1, 5)), int(rng.integers(2, 5))
        for part in random_partition_walk(rng, rows, cols, int(rng.integers(1, 12))):
            states += 1
            brute = atomic_adjacency_closure(part)
            if part.adjacency != brute:
                return CheckResult("adjacency_closure", False, f"sequence {s} diverged at version {part.version}")
            try:
                part.check_invariants()
            except Exception as exc:  # noqa: BLE001 - reported as a failed check
                return CheckResult("adjacency_closure", False, f"sequence {s}: {exc}")
    return CheckResult("adjacency_closure", True, f"{sequences} random sequences, {states} partitions checked")


def brute_force_merge(candidates) -> str | None:
    """Exhaustive argmax of total gain over admitted candidates; earliest wins ties."""
    admitted = [(i, c) for i, c in enumerate(candidates)
                if c["merged_i"] < c["own_i"] and c["merged_n"] < c["own_n"]]
    if not admitted:
        return None
    score = {i: (c["own_i"] - c["merged_i"]) + (c["own_n"] - c["merged_n"]) for i, c in admitted}
    top = max(score.values())
    return candidates[min(i for i in score if score[i] == top)]["neighbor"]


def check_merge_greedy(seed: int = 0) -> CheckResult:
    cfg = ScenarioConfig(
        rounds=40, n_clients=30, samples_per_zone=10, heterogeneity=0.3, seed=seed,
        truth_groups=(("z0", "z1", "z3", "z4"),), strategy="zms",
        round=RoundConfig(local_epochs=2),
        zms=ZmsConfig(merge_every=2, split_every=5),
    )
    result = run_strategy(generate_scenario(cfg))
    checks = [c for c in result.checks if c["kind"] == "merge_check" and c["candidates"]]
    for c in checks:
        if brute_force_merge(c["candidates"]) != c["outcome"]:
            return CheckResult("merge_greedy_vs_brute_force", False, f"round {c['round']} zone {c['zone']}")
    # synthetic tables with ties and rejections
    rng = np.random.default_rng(seed)
    from .zms import MergeCandidate, best_candidate
    for _ in range(500):
        k = int(rng.integers(1, 6))
        grid = rng.integers(0, 4, size=(k, 4)).astype(float)
        cands = [MergeCandidate(f"n{i}", *row) for i, row in enumerate(grid)]
        best = best_candidate(cands)
        if (best.neighbor if best else None) != brute_force_merge([c.as_dict() for c in cands]):
            return CheckResult("merge_greedy_vs_brute_force", False, f"synthetic table {grid.tolist()}")
    return CheckResult("merge_greedy_vs_brute_force", True,
                       f"{len(checks)} logged decisions and 500 synthetic tables agree")


def run_selfcheck(attention: Callable = attention_coefficients) -> list[CheckResult]:
    checks = [
        check_gradients,
        lambda: check_attention(attention),
        check_fedavg,
        check_adjacency,
        check_merge_greedy,
    ]
    out = []
    for fn in checks:
        start = time.perf_counter()
        try:
            res = fn()
        except Exception as exc:  # noqa: BLE001 - a crash is a failed check
            name = getattr(fn, "__name__", "check")
            res = CheckResult(name, False, f"raised {type(exc).__name__}: {exc}")
        out.append(CheckResult(res.name, res.ok, res.detail, time.perf_counter() - start))
    return out
