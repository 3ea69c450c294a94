"""Greedy zone merging and splitting, scheduled between training rounds.

Decision losses are client-mean validation losses reported by a fraction
``p`` of each zone's clients. The same validator subset scores every model
compared for a zone, so the comparisons are paired.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from typing import Mapping, Sequence

from .model import ClientDataset, ModelParams
from .protocol import (
    MessageLedger,
    RoundConfig,
    ZoneModelState,
    clients_in,
    run_zone_round,
    select_validators,
    zone_loss,
)
from .seeding import rng_for
from .topology import Leaf, ZonePartition, sub_zones

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class ZmsConfig:
    merge_every: int = 25
    split_every: int = 33
    level: int = 2
    top_k: int = 3
    joint_training_round: bool = True
    validation_fraction: float = 1.0
    start_round: int = 0

    def __post_init__(self):
        if self.merge_every < 1 or self.split_every < 1:
            raise ValueError("cadences must be >= 1")
        if self.level < 1:
            raise ValueError("level must be >= 1")
        if self.top_k < 1:
            raise ValueError("top_k must be >= 1")
        if not 0 < self.validation_fraction <= 1:
            raise ValueError("validation_fraction must be in (0, 1]")
        if self.start_round < 0:
            raise ValueError("start_round must be >= 0")

    def merge_due(self, t: int) -> bool:
        return t + 1 > self.start_round and (t + 1) % self.merge_every == 0

    def split_due(self, t: int) -> bool:
        return t + 1 > self.start_round and (t + 1) % self.split_every == 0


@dataclass(frozen=True)
class MergeCandidate:
    neighbor: str
    own_i: float
    merged_i: float
    own_n: float
    merged_n: float

    @property
    def admitted(self) -> bool:
        return self.merged_i < self.own_i and self.merged_n < self.own_n

    @property
    def gain_i(self) -> float:
        return self.own_i - self.merged_i

    @property
    def gain_n(self) -> float:
        return self.own_n - self.merged_n

    @property
    def gain(self) -> float:
        return self.gain_i + self.gain_n

    def as_dict(self) -> dict:
        return {
            "neighbor": self.neighbor, "own_i": self.own_i, "merged_i": self.merged_i,
            "own_n": self.own_n, "merged_n": self.merged_n,
            "admitted": self.admitted, "gain": self.gain,
        }


@dataclass(frozen=True)
class MergeDecision:
    zone_i: str
    best_neighbor: str
    merged_params: ModelParams
    candidates: tuple

    @property
    def best(self) -> MergeCandidate:
        return next(c for c in self.candidates if c.neighbor == self.best_neighbor)

    @property
    def gains(self) -> dict:
        return {self.zone_i: self.best.gain_i, self.best_neighbor: self.best.gain_n}


@dataclass(frozen=True)
class SplitTrial:
    candidate: str
    trained_loss: float
    incumbent_loss: float

    @property
    def accepted(self) -> bool:
        return self.trained_loss < self.incumbent_loss


@dataclass(frozen=True)
class SplitDecision:
    merged_zone: str
    candidate: str
    candidate_params: ModelParams
    zone_loss: float
    ranked: tuple  # (sub-zone id, loss of the merged model there), worst first
    trials: tuple

    @property
    def gain(self) -> float:
        last = self.trials[-1]
        return last.incumbent_loss - last.trained_loss


def best_candidate(candidates: Sequence[MergeCandidate]) -> MergeCandidate | None:
    """Admitted candidate with the largest total gain; ties keep the earliest."""
    best = None
    for c in candidates:
        if c.admitted and (best is None or c.gain > best.gain):
            best = c
    return best


def _average(a: ModelParams, b: ModelParams) -> ModelParams:
    return ModelParams((a.vector + b.vector) / 2.0, a.kind)


def propose_merge(
    partition: ZonePartition,
    zone_i: str,
    current: Mapping[str, ModelParams],
    previous: Mapping[str, ModelParams],
    clients: Sequence[ClientDataset],
    round_cfg: RoundConfig,
    config: ZmsConfig,
    ledger: MessageLedger | None = None,
    seed: int = 0,
    t: int = 0,
) -> tuple[MergeDecision | None, tuple]:
    """Evaluate every neighbour of ``zone_i``; return (decision or None, candidate table).

    ``previous`` holds the round-start models, ``current`` the models after
    this round's training. With the joint round enabled, the averaged
    round-start model gets one federated round over the union and is
    compared against ``current``; otherwise everything is compared at
    ``current``.
    """
    split = round_cfg.decision_split
    leaves_i = partition.leaves(zone_i)
    validators_i = select_validators(clients_in(clients, leaves_i), config.validation_fraction,
                                     rng_for(seed, t, "zms-merge-val", zone_i), split)
    if not validators_i:
        log.info("merge check for %s skipped: no validators", zone_i)
        return None, ()
    own_i = zone_loss(current[zone_i], validators_i, split)
    candidates = []
    merged_models = {}
    for zn in partition.neighbors(zone_i):
        leaves_n = partition.leaves(zn)
        validators_n = select_validators(clients_in(clients, leaves_n), config.validation_fraction,
                                         rng_for(seed, t, "zms-merge-val", zone_i, zn), split)
        if not validators_n:
            continue
        if config.joint_training_round:
            start = _average(previous[zone_i], previous[zn])
            union = clients_in(clients, leaves_i | leaves_n)
            state, _ = run_zone_round(
                ZoneModelState(f"{zone_i}|{zn}", start), union, round_cfg, ledger,
                rng_for(seed, t, "zms-joint", zone_i, zn), server=zone_i, kind="merge", with_losses=False,
            )
            merged = state.params
        else:
            merged = _average(current[zone_i], current[zn])
        merged_models[zn] = merged
        if ledger is not None:
            ledger.record(zone_i, "merge", validations_received=len(validators_i))
            ledger.record(zn, "merge", validations_received=len(validators_n))
        candidates.append(MergeCandidate(
            neighbor=zn,
            own_i=own_i,
            merged_i=zone_loss(merged, validators_i, split),
            own_n=zone_loss(current[zn], validators_n, split),
            merged_n=zone_loss(merged, validators_n, split),
        ))
    best = best_candidate(candidates)
    if best is None:
        return None, tuple(candidates)
    return MergeDecision(zone_i, best.neighbor, merged_models[best.neighbor], tuple(candidates)), tuple(candidates)


def propose_split(
    partition: ZonePartition,
    merged_zone: str,
    current: Mapping[str, ModelParams],
    previous: Mapping[str, ModelParams],
    clients: Sequence[ClientDataset],
    round_cfg: RoundConfig,
    config: ZmsConfig,
    ledger: MessageLedger | None = None,
    seed: int = 0,
    t: int = 0,
) -> SplitDecision | None:
    tree = partition.tree(merged_zone)
    if isinstance(tree, Leaf):
        return None
    split = round_cfg.decision_split
    before = previous.get(merged_zone, current[merged_zone])
    after = current[merged_zone]
    validators = select_validators(clients_in(clients, tree.leaves), config.validation_fraction,
                                   rng_for(seed, t, "zms-split-val", merged_zone), split)
    if not validators:
        return None
    base_loss = zone_loss(before, validators, split)
    ranked = []
    sub_validators = {}
    for node in sub_zones(tree, config.level):
        vs = [v.restrict(node.leaves) for v in validators]
        vs = [v for v in vs if len(v.train if split == "train" else v.validation)]
        if not vs:
            continue
        sub_validators[node.zone_id] = (node, vs)
        loss = zone_loss(before, vs, split)
        if ledger is not None:
            ledger.record(merged_zone, "split", validations_received=len(vs))
        if loss > base_loss:
            ranked.append((node.zone_id, loss))
    ranked.sort(key=lambda item: (-item[1], item[0]))
    trials = []
    for zc, _ in ranked[: config.top_k]:
        node, vs = sub_validators[zc]
        state, _ = run_zone_round(
            ZoneModelState(zc, before), clients_in(clients, node.leaves), round_cfg, ledger,
            rng_for(seed, t, "zms-split-train", merged_zone, zc), server=merged_zone, kind="split",
            with_losses=False,
        )
        if ledger is not None:
            ledger.record(merged_zone, "split", validations_received=2 * len(vs))
        trial = SplitTrial(zc, zone_loss(state.params, vs, split), zone_loss(after, vs, split))
        trials.append(trial)
        if trial.accepted:
            return SplitDecision(merged_zone, zc, state.params, base_loss, tuple(ranked), tuple(trials))
    return None


@dataclass
class ZmsStepResult:
    partition: ZonePartition
    states: dict
    events: list = field(default_factory=list)
    checks: list = field(default_factory=list)


def zms_step(
    partition: ZonePartition,
    states: Mapping[str, ZoneModelState],
    previous: Mapping[str, ModelParams],
    clients: Sequence[ClientDataset],
    t: int,
    round_cfg: RoundConfig,
    config: ZmsConfig,
    ledger: MessageLedger | None = None,
    seed: int = 0,
) -> ZmsStepResult:
    """At most one merge then at most one split, each on its own cadence.

    The zone created by this step's merge is never a split target in the
    same step.
    """
    states = dict(states)
    out = ZmsStepResult(partition, states)
    rng = rng_for(seed, t, "zms-select")
    current = {z: s.params for z, s in states.items()}
    created = None

    if config.merge_due(t):
        zones = partition.zones
        zone_i = zones[int(rng.integers(len(zones)))]
        decision, table = propose_merge(partition, zone_i, current, previous, clients, round_cfg, config, ledger, seed, t)
        out.checks.append({"round": t, "kind": "merge_check", "zone": zone_i,
                           "candidates": [c.as_dict() for c in table],
                           "outcome": decision.best_neighbor if decision else None})
        if decision is not None:
            partition = partition.apply_merge(zone_i, decision.best_neighbor)
            created = (set(partition.zones) - set(states)).pop()
            del states[zone_i], states[decision.best_neighbor]
            states[created] = ZoneModelState(created, decision.merged_params, t + 1)
            best = decision.best
            out.events.append({
                "round": t, "kind": "merge", "version": partition.version,
                "zones_in": [zone_i, decision.best_neighbor], "zones_out": [created],
                "losses": best.as_dict(), "candidates": [c.as_dict() for c in table],
            })

    if config.split_due(t):
        choices = [z for z in partition.merged_zones() if z != created]
        if choices:
            zone_j = choices[int(rng.integers(len(choices)))]
            decision = propose_split(partition, zone_j, current, previous, clients, round_cfg, config, ledger, seed, t)
            out.checks.append({"round": t, "kind": "split_check", "zone": zone_j,
                               "outcome": decision.candidate if decision else None})
            if decision is not None:
                before = set(partition.zones)
                partition = partition.apply_split(zone_j, decision.candidate)
                pieces = sorted(set(partition.zones) - before)
                parent = states.pop(zone_j)
                for piece in pieces:
                    params = decision.candidate_params if piece == decision.candidate else parent.params
                    states[piece] = ZoneModelState(piece, params, t + 1)
                last = decision.trials[-1]
                out.events.append({
                    "round": t, "kind": "split", "version": partition.version,
                    "zones_in": [zone_j], "zones_out": pieces, "candidate": decision.candidate,
                    "losses": {"zone_loss": decision.zone_loss, "trained": last.trained_loss,
                               "incumbent": last.incumbent_loss, "gain": decision.gain},
                    "ranked": [list(r) for r in decision.ranked],
                    "trials": [{"candidate": tr.candidate, "trained": tr.trained_loss,
                                "incumbent": tr.incumbent_loss} for tr in decision.trials],
                })

    out.partition = partition
    out.states = states
    return out
