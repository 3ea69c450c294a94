import numpy as np
import pytest

from zonefl.model import ClientDataset, SampleSet


def sample_set(X, y, zone="z"):
    X = np.asarray(X, dtype=float)
    return SampleSet(X, np.asarray(y, dtype=float), np.array([zone] * len(X), dtype=object))


def make_client(cid, parts):
    """parts: {zone: (X_train, y_train, X_val, y_val)}"""
    train = val = None
    for zone, (Xt, yt, Xv, yv) in parts.items():
        t, v = sample_set(Xt, yt, zone), sample_set(Xv, yv, zone)
        train = t if train is None else train.concat(t)
        val = v if val is None else val.concat(v)
    return ClientDataset(cid, train, val)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


# (criterion, label, ok, detail) appended by test_acceptance.py
ACCEPTANCE: list = []


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    tr = terminalreporter
    tr.section("acceptance criteria")
    for n, label, ok, detail in ACCEPTANCE:
        tr.write_line(f"{'PASS' if ok else 'FAIL'} criterion {n} ({label}): {detail}")
    by_n: dict = {}
    for n, _, ok, _ in ACCEPTANCE:
        by_n[n] = by_n.get(n, True) and ok
    tr.write_line("")
    for n in sorted(by_n):
        tr.write_line(f"{'PASS' if by_n[n] else 'FAIL'} criterion {n}")
