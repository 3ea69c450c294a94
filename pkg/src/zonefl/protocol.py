"""One zone's federated round: sampling, local training, FedAvg, update, loss accounting."""

from __future__ import annotations

import hashlib
import logging
import math
import threading
from collections import Counter
from dataclasses import dataclass, field, replace
from typing import Sequence

import numpy as np

from .model import ClientDataset, Gradient, ModelParams, dataset_loss, local_train

log = logging.getLogger(__name__)


class AggregationError(ValueError):
    pass


class NumericFailure(ArithmeticError):
    """A model update produced NaN or Inf."""


class UndefinedLossError(ValueError):
    pass


TRAIN = "train"
VALIDATION = "validation"


@dataclass(frozen=True)
class RoundConfig:
    client_sample_fraction: float = 1.0
    server_learning_rate: float = 1.0
    local_epochs: int = 5
    local_learning_rate: float = 0.05
    validation_fraction: float = 1.0
    batch_size: int | None = None
    # "samples" is standard FedAvg; "equal" weights every client the same
    weighting: str = "samples"
    decision_split: str = VALIDATION

    def __post_init__(self):
        if not 0 < self.client_sample_fraction <= 1:
            raise ValueError("client_sample_fraction must be in (0, 1]")
        if not self.server_learning_rate >= 0:
            raise ValueError("server_learning_rate must be >= 0")
        if self.local_epochs < 1:
            raise ValueError("local_epochs must be >= 1")
        if not self.local_learning_rate > 0:
            raise ValueError("local_learning_rate must be > 0")
        if not 0 < self.validation_fraction <= 1:
            raise ValueError("validation_fraction must be in (0, 1]")
        if self.batch_size is not None and self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")
        if self.weighting not in ("samples", "equal"):
            raise ValueError("weighting must be 'samples' or 'equal'")
        if self.decision_split not in (TRAIN, VALIDATION):
            raise ValueError("decision_split must be 'train' or 'validation'")


@dataclass(frozen=True)
class ZoneModelState:
    zone_id: str
    params: ModelParams
    round: int = 0
    history: tuple = ()

    def advanced(self, params: ModelParams, loss: float | None = None) -> "ZoneModelState":
        hist = self.history if loss is None else self.history + (loss,)
        return replace(self, params=params, round=self.round + 1, history=hist)


@dataclass(frozen=True)
class ValidationReport:
    client_id: str
    zone_id: str
    params_fingerprint: str
    loss: float
    sample_count: int


@dataclass(frozen=True)
class ZoneRoundReport:
    zone_id: str
    round: int
    sampled: tuple
    trained: tuple
    pre_loss: float | None
    post_loss: float | None
    skipped: bool = False


class MessageLedger:
    """Per-server message counters, safe to bump from concurrent zone rounds."""

    COUNTERS = ("models_sent", "gradients_received", "validations_received")

    def __init__(self):
        self._counts: Counter = Counter()
        self._lock = threading.Lock()

    def record(self, server: str, kind: str = "train", **counts: int) -> None:
        for name, n in counts.items():
            if name not in self.COUNTERS:
                raise KeyError(name)
            if n < 0:
                raise ValueError("ledger counters are monotone")
        with self._lock:
            for name, n in counts.items():
                self._counts[(server, kind, name)] += n

    def total(self, counter: str, kind: str | None = None, server: str | None = None) -> int:
        with self._lock:
            return sum(
                n for (s, k, c), n in self._counts.items()
                if c == counter and (kind is None or k == kind) and (server is None or s == server)
            )

    def per_server(self, counter: str, kind: str | None = None) -> dict:
        out: Counter = Counter()
        with self._lock:
            for (s, k, c), n in self._counts.items():
                if c == counter and (kind is None or k == kind):
                    out[s] += n
        return dict(sorted(out.items()))

    def snapshot(self) -> dict:
        with self._lock:
            return {f"{s}|{k}|{c}": n for (s, k, c), n in sorted(self._counts.items())}


def clients_in(clients: Sequence[ClientDataset], leaves) -> list[ClientDataset]:
    """Clients holding data in ``leaves``, each restricted to that data, sorted by id."""
    leaves = frozenset(leaves)
    out = [c.restrict(leaves) for c in clients if c.zone_tags & leaves]
    return sorted(out, key=lambda c: c.client_id)


def fingerprint(params: ModelParams) -> str:
    return hashlib.sha1(params.vector.tobytes()).hexdigest()[:16]


def sample_clients(zone_clients: Sequence, fraction: float, rng: np.random.Generator) -> list:
    """ceil(fraction * n) clients uniformly without replacement, returned in input order."""
    if not 0 < fraction <= 1:
        raise ValueError("fraction must be in (0, 1]")
    n = len(zone_clients)
    if n == 0:
        log.debug("no clients to sample; round is a no-op")
        return []
    k = min(n, math.ceil(fraction * n - 1e-9))
    if k == n:
        return list(zone_clients)
    picked = np.sort(rng.choice(n, size=k, replace=False))
    return [zone_clients[i] for i in picked]


def fedavg(gradients: Sequence[Gradient], weighting: str = "samples") -> Gradient:
    """Sample-count-weighted mean of deltas, reduced in the given order.

    Weights are normalised before the reduction so a single gradient comes
    back bit-identical.
    """
    if not gradients:
        raise AggregationError("cannot aggregate an empty gradient list")
    shape = gradients[0].delta.shape
    if any(g.delta.shape != shape for g in gradients):
        raise AggregationError("gradient shapes differ")
    total = sum(g.sample_count for g in gradients)
    if weighting == "equal":
        weights = [1.0] * len(gradients)
    else:
        weights = [float(g.sample_count) for g in gradients]
    wsum = sum(weights)
    if wsum <= 0:
        raise AggregationError("aggregation weights sum to zero")
    acc = np.zeros(shape)
    for w, g in zip(weights, gradients):
        acc = acc + (w / wsum) * g.delta
    return Gradient(acc, total)


def client_mean(gradients: Sequence[Gradient]) -> Gradient:
    return fedavg(gradients, weighting="equal")


def apply_update(state: ZoneModelState, agg: Gradient, lam: float, loss: float | None = None) -> ZoneModelState:
    if agg.delta.shape != state.params.vector.shape:
        raise AggregationError("aggregate does not match the model shape")
    with np.errstate(over="ignore", invalid="ignore"):
        new = state.params.vector + lam * agg.delta
    if not np.all(np.isfinite(new)):
        raise NumericFailure(f"non-finite parameters in zone {state.zone_id} at round {state.round}")
    return state.advanced(ModelParams(new, state.params.kind), loss)


def _split(client: ClientDataset, which: str):
    if which == TRAIN:
        return client.train
    if which == VALIDATION:
        return client.validation
    raise ValueError(f"unknown split {which!r}")


def zone_loss(params: ModelParams, clients: Sequence[ClientDataset], which: str = TRAIN) -> float:
    """Unweighted mean over clients of each client's mean loss (not sample-pooled)."""
    losses = [dataset_loss(params, _split(c, which)) for c in clients if len(_split(c, which))]
    if not losses:
        raise UndefinedLossError("no client has samples in this zone")
    return math.fsum(losses) / len(losses)


def pooled_loss(params: ModelParams, clients: Sequence[ClientDataset], which: str = TRAIN) -> float:
    parts = [_split(c, which) for c in clients if len(_split(c, which))]
    if not parts:
        raise UndefinedLossError("no client has samples in this zone")
    total = sum(dataset_loss(params, p) * len(p) for p in parts)
    return total / sum(len(p) for p in parts)


def try_zone_loss(params, clients, which=TRAIN) -> float | None:
    try:
        return zone_loss(params, clients, which)
    except UndefinedLossError:
        return None


def select_validators(clients: Sequence[ClientDataset], p: float, rng, which: str = VALIDATION) -> list[ClientDataset]:
    eligible = [c for c in clients if len(_split(c, which))]
    return sample_clients(eligible, p, rng)


def validation_reports(zone_id: str, params: ModelParams, validators: Sequence[ClientDataset]) -> list[ValidationReport]:
    fp = fingerprint(params)
    return [
        ValidationReport(c.client_id, zone_id, fp, dataset_loss(params, c.validation), len(c.validation))
        for c in validators
    ]


def collect_validation(zone_id: str, params: ModelParams, clients: Sequence[ClientDataset], p: float, rng) -> list[ValidationReport]:
    """A fraction ``p`` of the zone's clients evaluate ``params`` on their zone validation data."""
    return validation_reports(zone_id, params, select_validators(clients, p, rng))


def train_clients(params: ModelParams, clients: Sequence[ClientDataset], config: RoundConfig, rng) -> tuple[list, list]:
    """Sample, then run local training; returns (sampled, [(client_id, Gradient)])."""
    sampled = sample_clients(clients, config.client_sample_fraction, rng)
    seeds = rng.integers(0, 2**63, size=len(sampled)) if sampled else []
    results = []
    for client, seed in zip(sampled, seeds):
        g = local_train(params, client, config.local_epochs, config.local_learning_rate, int(seed), config.batch_size)
        if g is not None:
            results.append((client.client_id, g))
    results.sort(key=lambda item: item[0])
    return sampled, results


def run_zone_round(
    state: ZoneModelState,
    clients: Sequence[ClientDataset],
    config: RoundConfig,
    ledger: MessageLedger | None,
    rng: np.random.Generator,
    server: str | None = None,
    kind: str = "train",
    with_losses: bool = True,
) -> tuple[ZoneModelState, ZoneRoundReport]:
    """One FedAvg round for a zone; ``clients`` must already be restricted to the zone."""
    server = server or state.zone_id
    clients = sorted(clients, key=lambda c: c.client_id)
    pre = try_zone_loss(state.params, clients) if with_losses else None
    sampled, results = train_clients(state.params, clients, config, rng)
    if ledger is not None:
        ledger.record(server, kind, models_sent=len(sampled), gradients_received=len(results))
    if not results:
        log.info("zone %s round %d skipped: no client produced a gradient", state.zone_id, state.round)
        report = ZoneRoundReport(state.zone_id, state.round, tuple(c.client_id for c in sampled), (), pre, pre, True)
        return state, report
    agg = fedavg([g for _, g in results], config.weighting)
    new_state = apply_update(state, agg, config.server_learning_rate)
    post = try_zone_loss(new_state.params, clients) if with_losses else None
    if post is not None:
        new_state = replace(new_state, history=new_state.history + (post,))
    report = ZoneRoundReport(
        state.zone_id, state.round,
        tuple(c.client_id for c in sampled), tuple(cid for cid, _ in results),
        pre, post,
    )
    return new_state, report
