import math

import numpy as np
import pytest

from zonefl.harness import (
    StrategyResult,
    expected_load_fraction,
    ledger_load_fraction,
    run_config,
    run_strategy,
    server_load_fraction,
    training_overhead,
)
from zonefl.model import LOGISTIC, dataset_loss
from zonefl.protocol import clients_in
from zonefl.scenario import DEFAULT_MOBILITY, ConfigError, ScenarioConfig, generate_scenario


def test_dataset_is_deterministic_and_seed_dependent():
    a = generate_scenario(ScenarioConfig(rounds=1, seed=7))
    b = generate_scenario(ScenarioConfig(rounds=1, seed=7))
    c = generate_scenario(ScenarioConfig(rounds=1, seed=8))
    assert a.dataset_hash == b.dataset_hash != c.dataset_hash
    assert a.truth.as_dict() == b.truth.as_dict()


def test_strategy_does_not_change_the_dataset():
    hashes = {generate_scenario(ScenarioConfig(rounds=1, seed=3, strategy=s)).dataset_hash
              for s in ("global", "static", "zms", "zgd")}
    assert len(hashes) == 1


def test_noiseless_labels_give_zero_loss_for_the_truth():
    sc = generate_scenario(ScenarioConfig(rounds=1, noise_std=0.0, seed=2))
    for z in sc.partition.zones:
        for c in clients_in(sc.clients, {z}):
            assert dataset_loss(sc.truth.params[z], c.train) == 0.0
            assert dataset_loss(sc.truth.params[z], c.validation) == 0.0


def test_zero_heterogeneity_shares_one_truth():
    sc = generate_scenario(ScenarioConfig(rounds=1, heterogeneity=0.0))
    vectors = {tuple(v) for v in sc.truth.as_dict().values()}
    assert len(vectors) == 1


def test_truth_groups_share_a_truth():
    sc = generate_scenario(ScenarioConfig(rounds=1, truth_groups=(("z0", "z4"),)))
    t = sc.truth.as_dict()
    assert t["z0"] == t["z4"] != t["z1"]


def test_split_is_four_to_one_per_client_zone():
    sc = generate_scenario(ScenarioConfig(rounds=1, samples_per_zone=20))
    for c in sc.clients:
        for z in c.zone_tags:
            assert (c.train.zones == z).sum() == 16
            assert (c.validation.zones == z).sum() == 4


def test_classification_labels_are_binary():
    sc = generate_scenario(ScenarioConfig(rounds=1, task=LOGISTIC))
    ys = np.concatenate([c.train.y for c in sc.clients])
    assert set(np.unique(ys)) <= {0.0, 1.0}


@pytest.mark.parametrize("kw,field", [
    (dict(rounds=0), "rounds"),
    (dict(rounds=1, mobility=(0.5, 0.4)), "mobility"),
    (dict(rounds=1, n_clients=0), "n_clients"),
    (dict(rounds=1, heterogeneity=-1.0), "heterogeneity"),
    (dict(rounds=1, strategy="bogus"), "strategy"),
])
def test_invalid_configs(kw, field):
    with pytest.raises(ConfigError) as err:
        ScenarioConfig(**kw)
    assert err.value.field_name == field


def test_infeasible_mobility_is_a_config_error():
    with pytest.raises(ConfigError) as err:
        generate_scenario(ScenarioConfig(rounds=1, grid=(2, 2), mobility=DEFAULT_MOBILITY))
    assert err.value.field_name == "mobility"


def test_global_equals_static_on_a_single_zone():
    cfg = ScenarioConfig(rounds=20, zones=("only",), edges=(), mobility=(1.0,), n_clients=15, seed=5)
    sc = generate_scenario(cfg)
    g, s = run_strategy(sc, "global"), run_strategy(sc, "static")
    assert g.final_params == s.final_params
    assert g.final_metric == s.final_metric
    assert [r.train_loss for r in g.records] == [r.train_loss for r in s.records]


def test_final_metric_is_per_user_mean_oracle():
    cfg = ScenarioConfig(rounds=10, seed=1, n_clients=20)
    sc = generate_scenario(cfg)
    r = run_strategy(sc, "static")
    w = {z: np.array(v) for z, v in r.final_params.items()}
    per_user, pooled = [], []
    for c in sc.clients:
        errs = []
        for x, y, z in zip(c.validation.X, c.validation.y, c.validation.zones):
            pred = float(sum(xj * wj for xj, wj in zip(x, w[z][:-1])) + w[z][-1])
            errs.append((pred - y) ** 2)
        per_user.append(math.sqrt(sum(errs) / len(errs)))
        pooled.extend(errs)
    assert r.final_metric == pytest.approx(sum(per_user) / len(per_user), rel=1e-12)
    assert r.final_metric != pytest.approx(math.sqrt(sum(pooled) / len(pooled)), rel=1e-6)


def test_user_metrics_accuracy_path():
    cfg = ScenarioConfig(rounds=10, seed=1, n_clients=12, task=LOGISTIC)
    r = run_config(cfg, "static")
    assert r.metric_name == "accuracy"
    assert all(0.0 <= v <= 1.0 for v in r.per_user.values())


def _fake(n_clients, load_rounds):
    r = StrategyResult("static", 0, "rmse", n_clients, "")
    r.load_rounds = load_rounds
    return r


def test_load_fraction_single_zone_clients_over_four_zones():
    cfg = ScenarioConfig(rounds=3, grid=(2, 2), mobility=(1.0,), n_clients=40, seed=0)
    r = run_config(cfg, "static")
    assert server_load_fraction(r) == 0.25
    assert ledger_load_fraction(r) == 0.25


def test_load_fraction_limits():
    assert server_load_fraction(_fake(10, [(4, 40, 40)])) == 1.0
    assert expected_load_fraction((0.0, 0.0, 0.0, 1.0), 4) == 1.0
    assert expected_load_fraction((1.0,), 4) == 0.25


def test_load_fraction_for_the_default_mix():
    assert expected_load_fraction(DEFAULT_MOBILITY, 9) == pytest.approx(2.092 / 9, rel=1e-12)
    r = run_config(ScenarioConfig(rounds=2, seed=0), "static")
    k = sum(r.client_zone_counts.values())
    assert server_load_fraction(r) == pytest.approx(k / 9 / r.n_clients, rel=1e-15)
    assert server_load_fraction(r) == ledger_load_fraction(r)
    assert 1 / 9 < server_load_fraction(r) < 1
    big = generate_scenario(ScenarioConfig(rounds=1, n_clients=4000, seed=0))
    mean_k = sum(len(c.zone_tags) for c in big.clients) / 4000
    assert mean_k / 9 == pytest.approx(expected_load_fraction(DEFAULT_MOBILITY, 9), abs=0.01)


def test_global_load_fraction_is_one():
    r = run_config(ScenarioConfig(rounds=2, seed=0), "global")
    assert server_load_fraction(r) == 1.0 == ledger_load_fraction(r)


def test_training_overhead():
    counts = np.arange(1, 6)
    assert training_overhead(counts)[0] == 0
    assert np.all(np.diff(training_overhead(counts)) > 0)
    assert np.array_equal(training_overhead(counts, 2.0), 2 * training_overhead(counts, 1.0))
    assert training_overhead({"c0": 1, "c1": 3}, 0.5) == {"c0": 0.0, "c1": 1.0}
    with pytest.raises(ValueError):
        training_overhead(counts, 0.0)


def test_empty_zone_is_reported_not_fatal():
    weights = {f"z{i}": 1.0 for i in range(9)}
    weights["z8"] = 0.0
    r = run_config(ScenarioConfig(rounds=3, zone_weights=weights, seed=0), "static")
    assert r.empty_zones == ["z8"]
    assert r.final_metric is not None
    assert all(rec.validation_loss is None for rec in r.records if rec.zone_id == "z8")
