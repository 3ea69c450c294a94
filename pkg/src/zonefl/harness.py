"""Runs a scenario under one strategy and collects per-round and final metrics."""

from __future__ import annotations

import logging
from dataclasses import dataclass, field, replace
from typing import Sequence

import numpy as np

from .model import LINEAR, ClientDataset, ModelParams, scores
from .protocol import (
    TRAIN,
    VALIDATION,
    MessageLedger,
    NumericFailure,
    ZoneModelState,
    clients_in,
    run_zone_round,
    try_zone_loss,
)
from .scenario import Scenario, ScenarioConfig, generate_scenario
from .seeding import rng_for
from .topology import ZonePartition
from .zgd import zgd_round
from .zms import zms_step

log = logging.getLogger(__name__)

GLOBAL_ZONE = "global"


@dataclass(frozen=True)
class RoundRecord:
    round: int
    zone_id: str
    version: int
    train_loss: float | None
    validation_loss: float | None
    models_sent: int
    gradients_received: int
    validations_received: int


@dataclass
class StrategyResult:
    strategy: str
    seed: int
    metric_name: str
    n_clients: int
    dataset_hash: str
    records: list = field(default_factory=list)
    events: list = field(default_factory=list)
    checks: list = field(default_factory=list)
    betas: list = field(default_factory=list)
    # per round: (active zones, sum over clients of zones trained in, training gradients received)
    load_rounds: list = field(default_factory=list)
    per_user: dict = field(default_factory=dict)
    final_metric: float | None = None
    final_zones: list = field(default_factory=list)
    final_params: dict = field(default_factory=dict)
    client_zone_counts: dict = field(default_factory=dict)
    empty_zones: list = field(default_factory=list)
    ledger: dict = field(default_factory=dict)
    failure: str | None = None

    @property
    def final_validation_loss(self) -> float | None:
        last = [r.validation_loss for r in self.records
                if r.round == self.records[-1].round and r.validation_loss is not None]
        return sum(last) / len(last) if last else None


class RunFailed(RuntimeError):
    def __init__(self, message: str, partial: StrategyResult):
        super().__init__(message)
        self.partial = partial


def server_load_fraction(result: StrategyResult) -> float:
    """Mean per-zone-server load relative to one global server, from zone counts."""
    vals = [k_sum / n_zones / result.n_clients for n_zones, k_sum, _ in result.load_rounds]
    return sum(vals) / len(vals)


def ledger_load_fraction(result: StrategyResult) -> float:
    """The same ratio, counted from gradients the zone servers actually received."""
    vals = [grads / n_zones / result.n_clients for n_zones, _, grads in result.load_rounds]
    return sum(vals) / len(vals)


def expected_load_fraction(mobility: Sequence[float], n_zones: int) -> float:
    """sum_k p_k * k / n_zones for clients spread over 1..len(mobility) zones."""
    return sum(p * (k + 1) for k, p in enumerate(mobility)) / n_zones


def training_overhead(zone_counts, per_zone_cost: float = 1.0) -> dict:
    """Extra fixed per-round cost of training once per zone instead of once overall.

    Same data volume either way, so only the fixed part scales: (k - 1) * cost.
    """
    if per_zone_cost <= 0:
        raise ValueError("per_zone_cost must be > 0")
    if isinstance(zone_counts, StrategyResult):
        zone_counts = zone_counts.client_zone_counts
    if isinstance(zone_counts, dict):
        return {c: (k - 1) * per_zone_cost for c, k in zone_counts.items()}
    return (zone_counts - 1) * per_zone_cost


def _zones_trained_in(partition: ZonePartition, client: ClientDataset) -> int:
    tags = frozenset(client.train.zones)
    return sum(1 for z in partition.zones if partition.leaves(z) & tags)


def user_metrics(partition: ZonePartition, params: dict, clients: Sequence[ClientDataset], task: str) -> dict:
    """Per-user RMSE (regression) or accuracy on the user's held-out samples.

    Each sample is scored by the model of the zone it was collected in.
    """
    out = {}
    for c in clients:
        val = c.validation
        if len(val) == 0:
            continue
        pred = np.empty(len(val))
        for z in partition.zones:
            mask = np.isin(val.zones, list(partition.leaves(z)))
            if mask.any():
                pred[mask] = scores(params[z], val.X[mask])
        if task == LINEAR:
            out[c.client_id] = float(np.sqrt(np.mean((pred - val.y) ** 2)))
        else:
            out[c.client_id] = float(np.mean((pred >= 0).astype(float) == val.y))
    return out


class _Roster:
    """Zone-restricted client lists, cached per atomic-leaf set."""

    def __init__(self, clients):
        self.clients = clients
        self._cache = {}

    def __call__(self, leaves) -> list:
        key = frozenset(leaves)
        if key not in self._cache:
            self._cache[key] = clients_in(self.clients, key)
        return self._cache[key]


def _counter_diff(ledger: MessageLedger, before: dict, counter: str) -> dict:
    now = ledger.per_server(counter, kind=None)
    return {s: n - before.get(s, 0) for s, n in now.items()}


def run_strategy(scenario: Scenario, strategy: str | None = None) -> StrategyResult:
    cfg: ScenarioConfig = scenario.config
    strategy = strategy or cfg.strategy
    seed = cfg.seed
    clients = list(scenario.clients)
    partition = scenario.partition.collapsed(GLOBAL_ZONE) if strategy == "global" else scenario.partition
    kind = cfg.task
    states = {z: ZoneModelState(z, ModelParams.zeros(cfg.feature_dim, kind)) for z in partition.zones}
    ledger = MessageLedger()
    roster = _Roster(clients)
    result = StrategyResult(
        strategy=strategy, seed=seed, metric_name="rmse" if kind == LINEAR else "accuracy",
        n_clients=len(clients), dataset_hash=scenario.dataset_hash,
    )
    result.empty_zones = [z for z in partition.zones if not roster(partition.leaves(z))]
    k_version, k_sum = None, 0

    try:
        for t in range(cfg.rounds):
            previous = {z: s.params for z, s in states.items()}
            before = {c: ledger.per_server(c) for c in MessageLedger.COUNTERS}
            train_before = ledger.total("gradients_received", kind="train")
            if strategy == "zgd":
                states, reports = zgd_round(partition, states, clients, t, cfg.round, cfg.zgd, ledger, seed)
                for rep in reports:
                    for zn, b in rep.betas.items():
                        result.betas.append((t, rep.zone_id, zn, b))
                    if rep.aborted:
                        result.events.append({"round": t, "kind": "zgd_abort", "zones_in": [rep.zone_id],
                                              "zones_out": [rep.zone_id], "version": partition.version})
            else:
                for z in partition.zones:
                    states[z], _ = run_zone_round(
                        states[z], roster(partition.leaves(z)), cfg.round, ledger,
                        rng_for(seed, t, "train", z), with_losses=False,
                    )
            if k_version != partition.version:
                k_version = partition.version
                k_sum = sum(_zones_trained_in(partition, c) for c in clients)
            result.load_rounds.append((len(partition.zones), k_sum,
                                       ledger.total("gradients_received", kind="train") - train_before))
            diffs = {c: _counter_diff(ledger, before[c], c) for c in MessageLedger.COUNTERS}
            for z in partition.zones:
                zc = roster(partition.leaves(z))
                result.records.append(RoundRecord(
                    t, z, partition.version,
                    try_zone_loss(states[z].params, zc, TRAIN),
                    try_zone_loss(states[z].params, zc, VALIDATION),
                    diffs["models_sent"].get(z, 0),
                    diffs["gradients_received"].get(z, 0),
                    diffs["validations_received"].get(z, 0),
                ))
            if strategy == "zms":
                step = zms_step(partition, states, previous, clients, t, cfg.round, cfg.zms, ledger, seed)
                partition, states = step.partition, step.states
                result.events.extend(step.events)
                result.checks.extend(step.checks)
    except NumericFailure as exc:
        result.failure = str(exc)
        result.ledger = ledger.snapshot()
        raise RunFailed(str(exc), result) from exc

    params = {z: s.params for z, s in states.items()}
    result.per_user = user_metrics(partition, params, clients, kind)
    result.final_metric = sum(result.per_user.values()) / len(result.per_user)
    result.final_zones = partition.zones
    result.final_params = {z: [float(v) for v in p.vector] for z, p in sorted(params.items())}
    result.client_zone_counts = {c.client_id: _zones_trained_in(scenario.partition, c) for c in clients} \
        if strategy != "global" else {c.client_id: 1 for c in clients}
    result.ledger = ledger.snapshot()
    return result


def run_config(cfg: ScenarioConfig, strategy: str | None = None) -> StrategyResult:
    return run_strategy(generate_scenario(cfg), strategy)


def with_seed(cfg: ScenarioConfig, seed: int) -> ScenarioConfig:
    return replace(cfg, seed=seed)
