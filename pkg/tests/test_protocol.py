import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from zonefl.harness import run_strategy
from zonefl.model import Gradient, ModelParams
from zonefl.protocol import (
    AggregationError,
    MessageLedger,
    NumericFailure,
    RoundConfig,
    UndefinedLossError,
    ZoneModelState,
    apply_update,
    client_mean,
    clients_in,
    fedavg,
    pooled_loss,
    run_zone_round,
    sample_clients,
    zone_loss,
)
from zonefl.scenario import ScenarioConfig, generate_scenario
from zonefl.seeding import rng_for
from zonefl.selfcheck import weighted_mean_oracle

from conftest import make_client


@settings(max_examples=100, deadline=None)
@given(
    d=st.integers(1, 9),
    counts=st.lists(st.integers(1, 60), min_size=1, max_size=8),
    seed=st.integers(0, 2**32 - 1),
)
def test_fedavg_equals_weighted_mean_oracle(d, counts, seed):
    r = np.random.default_rng(seed)
    deltas = [r.normal(size=d) for _ in counts]
    got = fedavg([Gradient(x, c) for x, c in zip(deltas, counts)])
    assert got.delta.tolist() == weighted_mean_oracle(deltas, [float(c) for c in counts])
    assert got.sample_count == sum(counts)


def test_fedavg_single_and_paired_equal_gradients_are_exact(rng):
    g = Gradient(rng.normal(size=5), 13)
    assert np.array_equal(fedavg([g]).delta, g.delta)
    assert np.array_equal(fedavg([g, Gradient(g.delta.copy(), 13)]).delta, g.delta)


def test_fedavg_weighting_modes():
    a, b = Gradient(np.array([0.0]), 1), Gradient(np.array([4.0]), 3)
    assert fedavg([a, b]).delta.tolist() == [3.0]
    assert client_mean([a, b]).delta.tolist() == [2.0]
    with pytest.raises(AggregationError):
        fedavg([])
    with pytest.raises(AggregationError):
        fedavg([a, Gradient(np.zeros(2), 1)])


def _two_clients():
    c0 = make_client("c0", {"z": ([[1.0], [2.0], [3.0]], [0.0, 0.0, 0.0], [[1.0]], [1.0])})
    c1 = make_client("c1", {"z": ([[1.0]], [3.0], [[0.0]], [0.0])})
    return [c0, c1]


def test_zone_loss_is_client_mean_not_pooled():
    params = ModelParams.zeros(1)
    clients = _two_clients()
    # c0 mean 0, c1 mean 9
    assert zone_loss(params, clients) == 4.5
    assert pooled_loss(params, clients) == 9.0 / 4


def test_zone_loss_nested_loop_oracle(rng):
    clients = []
    for i in range(7):
        parts = {}
        for z in ("a", "b"):
            n = int(rng.integers(1, 6))
            X = rng.uniform(-1, 1, size=(n, 3))
            parts[z] = (X, rng.normal(size=n), X[:1], [0.0])
        clients.append(make_client(f"c{i}", parts))
    params = ModelParams(rng.normal(size=4))
    w, b = params.vector[:-1].tolist(), float(params.vector[-1])
    per_client = []
    for c in clients:
        losses = []
        for x, y in zip(c.train.X.tolist(), c.train.y.tolist()):
            s = b
            for xj, wj in zip(x, w):
                s = s + xj * wj
            losses.append((s - y) ** 2)
        per_client.append(math.fsum(losses) / len(losses))
    assert zone_loss(params, clients) == math.fsum(per_client) / len(per_client)


def test_zone_loss_without_samples_raises():
    with pytest.raises(UndefinedLossError):
        zone_loss(ModelParams.zeros(1), [])


@pytest.mark.parametrize("n,fraction,expected", [(10, 1.0, 10), (10, 0.5, 5), (10, 0.25, 3), (3, 0.01, 1), (0, 0.5, 0)])
def test_sample_clients_counts(n, fraction, expected):
    picked = sample_clients(list(range(n)), fraction, np.random.default_rng(0))
    assert len(picked) == expected
    assert picked == sorted(picked)


def test_apply_update_rejects_non_finite():
    state = ZoneModelState("z", ModelParams(np.array([1e308, 0.0])))
    with pytest.raises(NumericFailure):
        apply_update(state, Gradient(np.array([1e308, 0.0]), 1), 1.0)


def test_round_without_clients_keeps_state():
    state = ZoneModelState("z", ModelParams.zeros(2))
    ledger = MessageLedger()
    new, report = run_zone_round(state, [], RoundConfig(), ledger, np.random.default_rng(0))
    assert new is state and report.skipped
    assert ledger.total("models_sent") == 0


def test_round_updates_ledger_and_history():
    ledger = MessageLedger()
    state = ZoneModelState("z", ModelParams.zeros(1))
    new, report = run_zone_round(state, _two_clients(), RoundConfig(), ledger, np.random.default_rng(0))
    assert new.round == 1 and len(new.history) == 1
    assert report.post_loss < report.pre_loss
    assert ledger.total("models_sent", kind="train", server="z") == 2
    assert ledger.total("gradients_received") == 2
    assert ledger.snapshot() == {"z|train|gradients_received": 2, "z|train|models_sent": 2}


def test_ledger_rejects_unknown_and_negative_counts():
    ledger = MessageLedger()
    with pytest.raises(KeyError):
        ledger.record("z", bogus=1)
    with pytest.raises(ValueError):
        ledger.record("z", models_sent=-1)


def test_clients_in_restricts_to_zone():
    c = make_client("c0", {"a": ([[1.0]], [1.0], [[1.0]], [1.0]), "b": ([[2.0]], [2.0], [[2.0]], [2.0])})
    (only,) = clients_in([c], {"b"})
    assert only.train.X.tolist() == [[2.0]]
    assert clients_in([c], {"x"}) == []


def reference_fedavg(clients, rounds, lr, epochs, dim):
    """Textbook FedAvg over all clients, written independently of the package."""
    theta = np.zeros(dim + 1)
    for _ in range(rounds):
        deltas, weights = [], []
        for c in sorted(clients, key=lambda c: c.client_id):
            A = np.hstack([c.train.X, np.ones((len(c.train), 1))])
            y = c.train.y
            delta = np.zeros_like(theta)
            for _ in range(epochs):
                w = theta + delta
                delta = delta - lr * ((2.0 / len(y)) * (A.T @ (A @ w - y)))
            deltas.append(delta)
            weights.append(float(len(y)))
        total = sum(weights)
        agg = np.zeros_like(theta)
        for wt, dl in zip(weights, deltas):
            agg = agg + (wt / total) * dl
        theta = theta + 1.0 * agg
    return theta


def test_global_run_bit_matches_reference_fedavg():
    cfg = ScenarioConfig(rounds=15, n_clients=12, seed=3, grid=(2, 2), mobility=(0.5, 0.5))
    scenario = generate_scenario(cfg)
    result = run_strategy(scenario, "global")
    expected = reference_fedavg(scenario.clients, 15, 0.05, 5, cfg.feature_dim)
    assert result.final_params["global"] == expected.tolist()


def test_named_streams_are_independent_of_call_order():
    a = rng_for(5, 3, "train", "z1").integers(0, 10**9, size=4)
    rng_for(5, 3, "train", "z0").integers(0, 10**9, size=100)
    b = rng_for(5, 3, "train", "z1").integers(0, 10**9, size=4)
    assert a.tolist() == b.tolist()
    assert rng_for(5, 3, "train", "z0").integers(0, 10**9) != rng_for(5, 3, "train", "z1").integers(0, 10**9)
