"""Synthetic, zone-heterogeneous client populations with planted per-zone models."""

from __future__ import annotations

import hashlib
from dataclasses import dataclass, field

import numpy as np

from .model import LINEAR, LOGISTIC, ClientDataset, ModelParams, SampleSet, scores
from .protocol import RoundConfig
from .seeding import rng_for
from .topology import ZonePartition
from .zgd import ZgdConfig
from .zms import ZmsConfig

STRATEGIES = ("global", "static", "zms", "zgd")

# clients with data in 1..5 zones; the ends (49% and 8.2%) echo the field
# study, the middle is interpolated
DEFAULT_MOBILITY = (0.49, 0.19, 0.14, 0.098, 0.082)


class ConfigError(ValueError):
    def __init__(self, message: str, field_name: str | None = None):
        super().__init__(message)
        self.field_name = field_name


@dataclass(frozen=True)
class ScenarioConfig:
    rounds: int
    grid: tuple = (3, 3)
    zones: tuple | None = None
    edges: tuple | None = None
    names: dict = field(default_factory=dict)
    n_clients: int = 60
    feature_dim: int = 8
    task: str = LINEAR
    heterogeneity: float = 1.0
    noise_std: float = 0.5
    base_scale: float = 1.0
    mobility: tuple = DEFAULT_MOBILITY
    zone_weights: dict | None = None
    samples_per_zone: int = 20
    validation_ratio: float = 0.2
    truth_groups: tuple = ()
    initial_merges: tuple = ()
    strategy: str = "static"
    seed: int = 0
    round: RoundConfig = field(default_factory=RoundConfig)
    zms: ZmsConfig = field(default_factory=ZmsConfig)
    zgd: ZgdConfig = field(default_factory=ZgdConfig)

    def __post_init__(self):
        def bad(msg, name):
            raise ConfigError(msg, name)

        if self.rounds < 1:
            bad("rounds must be >= 1", "rounds")
        if self.n_clients < 1:
            bad("n_clients must be >= 1", "n_clients")
        if self.feature_dim < 1:
            bad("feature_dim must be >= 1", "feature_dim")
        if self.task not in (LINEAR, LOGISTIC):
            bad(f"task must be {LINEAR!r} or {LOGISTIC!r}", "task")
        if self.heterogeneity < 0:
            bad("heterogeneity must be >= 0", "heterogeneity")
        if self.noise_std < 0:
            bad("noise_std must be >= 0", "noise_std")
        if self.samples_per_zone < 2:
            bad("samples_per_zone must be >= 2", "samples_per_zone")
        if not 0 < self.validation_ratio < 1:
            bad("validation_ratio must be in (0, 1)", "validation_ratio")
        if not self.mobility or any(p < 0 for p in self.mobility) or abs(sum(self.mobility) - 1) > 1e-9:
            bad("mobility must be nonnegative probabilities summing to 1", "mobility")
        if self.strategy not in STRATEGIES:
            bad(f"strategy must be one of {', '.join(STRATEGIES)}", "strategy")

    @property
    def max_zones_per_client(self) -> int:
        return max(k + 1 for k, p in enumerate(self.mobility) if p > 0)


@dataclass(frozen=True)
class PlantedTruth:
    """Ground-truth parameter vector per atomic zone."""

    params: dict

    def as_dict(self) -> dict:
        return {z: [float(v) for v in p.vector] for z, p in sorted(self.params.items())}


@dataclass(frozen=True)
class Scenario:
    config: ScenarioConfig
    clients: tuple
    truth: PlantedTruth
    partition: ZonePartition

    @property
    def dataset_hash(self) -> str:
        h = hashlib.sha256()
        for c in self.clients:
            h.update(c.client_id.encode())
            for part in (c.train, c.validation):
                h.update(np.ascontiguousarray(part.X).tobytes())
                h.update(np.ascontiguousarray(part.y).tobytes())
                h.update("|".join(part.zones).encode())
        return h.hexdigest()


def build_partition(cfg: ScenarioConfig) -> ZonePartition:
    try:
        if cfg.zones is not None:
            part = ZonePartition.from_atomic(cfg.zones, cfg.edges or (), cfg.names)
        else:
            part = ZonePartition.grid(*cfg.grid)
        for a, b in cfg.initial_merges:
            part = part.apply_merge(part.owner(a), part.owner(b))
    except ValueError as exc:
        raise ConfigError(str(exc), "zones") from exc
    # initial merges are the starting state, not adaptation events
    return ZonePartition(part.atomic_ids, part.atomic_edges, part.trees, part.adjacency, 0, part.names)


def _unit(rng, n) -> np.ndarray:
    v = rng.normal(size=n)
    return v / np.linalg.norm(v)


def planted_truth(cfg: ScenarioConfig, atomic_ids) -> PlantedTruth:
    rng = rng_for(cfg.seed, "truth")
    d = cfg.feature_dim
    base = rng.normal(scale=cfg.base_scale, size=d + 1)
    directions = {z: _unit(rng, d + 1) for z in atomic_ids}
    for group in cfg.truth_groups:
        for z in group:
            if z not in directions:
                raise ConfigError(f"truth group names unknown zone {z!r}", "truth_groups")
        for z in group[1:]:
            directions[z] = directions[group[0]]
    kind = cfg.task
    return PlantedTruth({z: ModelParams(base + cfg.heterogeneity * directions[z], kind) for z in atomic_ids})


def _labels(truth: ModelParams, X, rng, noise_std, task) -> np.ndarray:
    score = scores(truth, X)
    if noise_std > 0:
        score = score + rng.normal(scale=noise_std, size=X.shape[0])
    if task == LINEAR:
        return score
    return (score > 0).astype(float)


def generate_scenario(cfg: ScenarioConfig) -> Scenario:
    partition = build_partition(cfg)
    atomic = list(partition.atomic_ids)
    if cfg.max_zones_per_client > len(atomic):
        raise ConfigError(
            f"mobility allows {cfg.max_zones_per_client} zones per client but only {len(atomic)} zones exist",
            "mobility",
        )
    truth = planted_truth(cfg, atomic)
    if cfg.zone_weights:
        unknown = set(cfg.zone_weights) - set(atomic)
        if unknown:
            raise ConfigError(f"zone_weights names unknown zones {sorted(unknown)}", "zone_weights")
        w = np.array([float(cfg.zone_weights.get(z, 0.0)) for z in atomic])
        if w.sum() <= 0 or np.count_nonzero(w) < cfg.max_zones_per_client:
            raise ConfigError("zone_weights leave too few visitable zones", "zone_weights")
        visit = w / w.sum()
    else:
        visit = np.full(len(atomic), 1.0 / len(atomic))

    rng = rng_for(cfg.seed, "clients")
    width = len(str(cfg.n_clients - 1))
    n_val = max(1, int(round(cfg.samples_per_zone * cfg.validation_ratio)))
    n_train = cfg.samples_per_zone - n_val
    d = cfg.feature_dim
    clients = []
    for i in range(cfg.n_clients):
        k = 1 + int(rng.choice(len(cfg.mobility), p=np.asarray(cfg.mobility)))
        zones = sorted(rng.choice(len(atomic), size=k, replace=False, p=visit))
        parts_train, parts_val = [], []
        for zi in zones:
            z = atomic[zi]
            X = rng.uniform(-1.0, 1.0, size=(cfg.samples_per_zone, d))
            y = _labels(truth.params[z], X, rng, cfg.noise_std, cfg.task)
            tags = np.array([z] * cfg.samples_per_zone, dtype=object)
            parts_train.append(SampleSet(X[:n_train], y[:n_train], tags[:n_train]))
            parts_val.append(SampleSet(X[n_train:], y[n_train:], tags[n_train:]))
        train, val = parts_train[0], parts_val[0]
        for a, b in zip(parts_train[1:], parts_val[1:]):
            train, val = train.concat(a), val.concat(b)
        clients.append(ClientDataset(f"c{i:0{width}d}", train, val))
    return Scenario(cfg, tuple(clients), truth, partition)
