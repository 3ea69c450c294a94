"""Zone gradient diffusion with sigmoid-of-inner-product attention over neighbours.

All zones read the round-start parameter snapshot, so a round's outcome
does not depend on the order zones are visited.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from typing import Mapping, Sequence

import numpy as np

from .model import ClientDataset, Gradient, ModelParams, sigmoid
from .protocol import (
    MessageLedger,
    NumericFailure,
    RoundConfig,
    ZoneModelState,
    clients_in,
    client_mean,
    fedavg,
    fingerprint,
    train_clients,
)
from .seeding import rng_for
from .topology import ZonePartition

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class ZgdConfig:
    # multiplies both the own and the diffused gradient terms
    scale: float = 1.0
    # "dot" is the raw inner product; "cosine" is an opt-in extension
    similarity: str = "dot"
    # "client_mean" weights clients equally, like the neighbour term;
    # "fedavg" follows the round config's weighting
    own_aggregation: str = "client_mean"

    def __post_init__(self):
        if not self.scale > 0:
            raise ValueError("scale must be > 0")
        if self.similarity not in ("dot", "cosine"):
            raise ValueError("similarity must be 'dot' or 'cosine'")
        if self.own_aggregation not in ("fedavg", "client_mean"):
            raise ValueError("own_aggregation must be 'fedavg' or 'client_mean'")


@dataclass(frozen=True)
class DiffusionRoundInput:
    zone_id: str
    params: ModelParams
    own: Gradient
    neighbors: tuple  # (zone id, Gradient) pairs
    params_fingerprint: str


@dataclass
class ZoneDiffusionReport:
    zone_id: str
    round: int
    betas: dict = field(default_factory=dict)
    own_clients: int = 0
    neighbor_clients: dict = field(default_factory=dict)
    aborted: bool = False
    skipped: bool = False


def attention_scores(own: np.ndarray, neighbor_grads: Sequence[np.ndarray], similarity: str = "dot") -> np.ndarray:
    own = np.asarray(own, dtype=float).ravel()
    sims = []
    for g in neighbor_grads:
        g = np.asarray(g, dtype=float).ravel()
        s = float(own @ g)
        if similarity == "cosine":
            norm = float(np.linalg.norm(own) * np.linalg.norm(g))
            s = s / norm if norm > 0 else 0.0
        sims.append(s)
    return sigmoid(np.array(sims))


def attention_coefficients(own, neighbor_grads, similarity: str = "dot") -> np.ndarray:
    """Softmax over ``sigmoid(own . g_n)``; one coefficient per neighbour."""
    if len(neighbor_grads) == 0:
        raise ValueError("attention needs at least one neighbour gradient")
    own = own.delta if isinstance(own, Gradient) else own
    grads = [g.delta if isinstance(g, Gradient) else g for g in neighbor_grads]
    e = attention_scores(own, grads, similarity)
    # e lies in (0, 1), so exp cannot overflow; no max-shift needed
    w = np.exp(e)
    return w / w.sum()


def neighbor_gradient(
    params: ModelParams, neighbor_clients: Sequence[ClientDataset], config: RoundConfig, rng
) -> tuple[Gradient | None, int, int]:
    """Client-mean of local deltas computed on a neighbour's data, starting from ``params``.

    Returns (gradient or None, clients sampled, clients that trained).
    """
    sampled, results = train_clients(params, neighbor_clients, config, rng)
    if not results:
        return None, len(sampled), 0
    return client_mean([g for _, g in results]), len(sampled), len(results)


def zgd_update(state: ZoneModelState, data: DiffusionRoundInput, betas, scale: float = 1.0) -> ZoneModelState:
    """theta + scale * (own + sum_n beta_n * g_n)."""
    if fingerprint(state.params) != data.params_fingerprint:
        raise ValueError("diffusion gradients were not computed against this zone's parameters")
    diffused = data.own.delta
    with np.errstate(over="ignore", invalid="ignore"):
        if data.neighbors:
            for beta, (_, g) in zip(betas, data.neighbors):
                diffused = diffused + beta * g.delta
        new = state.params.vector + scale * diffused
    if not np.all(np.isfinite(new)):
        raise NumericFailure(f"non-finite parameters in zone {state.zone_id}")
    return state.advanced(ModelParams(new, state.params.kind))


def zgd_round(
    partition: ZonePartition,
    states: Mapping[str, ZoneModelState],
    clients: Sequence[ClientDataset],
    t: int,
    round_cfg: RoundConfig,
    config: ZgdConfig,
    ledger: MessageLedger | None = None,
    seed: int = 0,
) -> tuple[dict, list[ZoneDiffusionReport]]:
    snapshot = {z: s.params for z, s in states.items()}
    new_states = dict(states)
    reports = []
    for zone in partition.zones:
        theta = snapshot[zone]
        report = ZoneDiffusionReport(zone, t)
        own_clients = clients_in(clients, partition.leaves(zone))
        sampled, results = train_clients(theta, own_clients, round_cfg, rng_for(seed, t, "train", zone))
        if ledger is not None:
            ledger.record(zone, "train", models_sent=len(sampled), gradients_received=len(results))
        report.own_clients = len(results)
        if not results:
            log.info("zone %s keeps its parameters at round %d: no client gradients", zone, t)
            report.skipped = True
            reports.append(report)
            continue
        grads = [g for _, g in results]
        own = client_mean(grads) if config.own_aggregation == "client_mean" else fedavg(grads, round_cfg.weighting)

        neigh = []
        for zn in partition.neighbors(zone):
            n_clients = clients_in(clients, partition.leaves(zn))
            g, n_sampled, n_trained = neighbor_gradient(
                theta, n_clients, round_cfg, rng_for(seed, t, "diffuse", zone, zn))
            if ledger is not None:
                ledger.record(zone, "diffusion", models_sent=n_sampled, gradients_received=n_trained)
            if g is None:
                log.debug("neighbour %s of %s has no client data this round", zn, zone)
                continue
            report.neighbor_clients[zn] = n_trained
            neigh.append((zn, g))

        data = DiffusionRoundInput(zone, theta, own, tuple(neigh), fingerprint(theta))
        betas = attention_coefficients(own, [g for _, g in neigh], config.similarity) if neigh else np.zeros(0)
        report.betas = {zn: float(b) for (zn, _), b in zip(neigh, betas)}
        try:
            new_states[zone] = zgd_update(states[zone], data, betas, config.scale)
        except NumericFailure:
            log.warning("zone %s diffusion update aborted at round %d (non-finite)", zone, t)
            report.aborted = True
        reports.append(report)
    return new_states, reports
