import numpy as np
import pytest
from hypothesis import given

from envnet import library
from envnet.model import Violation, network
from envnet.structure import (
    BudgetExhausted,
    check_assumption2,
    classify,
    estimate_alpha,
    obtainable,
    properly_degraded,
    properly_produced,
)

from conftest import build_random, load_fixture, seeds

TWO = [[-1.0, 1.0], [1.0, -1.0]]


@given(seeds)
def test_obtainable_is_reflexive_and_transitive(seed):
    R = obtainable(build_random(seed, d_max=6))
    assert np.all(np.diag(R))
    Ri = R.astype(int)
    assert np.array_equal((Ri @ Ri) > 0, R)


@given(seeds)
def test_partition_covers_species(seed):
    net = build_random(seed, d_max=6)
    p = classify(net)
    seen = sorted([i for c in p.closed_components for i in c] + list(p.produced) + list(p.transient))
    assert seen == list(range(net.d))


@pytest.mark.parametrize("name", [n for n in library.names() if library.expected(n)["verdict"] != "rejected"])
def test_fixture_partitions(name):
    exp = library.expected(name)
    net = load_fixture(name)
    v = check_assumption2(net)
    p = v.partition
    assert v.satisfied == (exp["verdict"] == "satisfied")
    assert [[net.names[i] for i in c] for c in p.closed_components] == exp["closed"]
    assert [net.names[i] for i in p.produced] == exp["produced"]
    assert [net.names[i] for i in p.transient] == exp["transient"]


@pytest.mark.parametrize("name", [n for n in library.names() if library.expected(n)["verdict"] == "rejected"])
def test_rejected_fixtures(name):
    with pytest.raises(Violation) as exc:
        load_fixture(name)
    for reason in library.expected(name)["reasons"]:
        assert reason in str(exc.value)


def test_not_degraded_is_reported():
    net = network(["S1", "S2"], ["a", "b"], TWO, [("0 -> S1", [1, 1]), ("S1 -> S2", [1, 1])])
    v = check_assumption2(net)
    assert not v.satisfied
    assert v.violations[0][0] == 0
    assert properly_produced(net).tolist() == [True, True]
    assert properly_degraded(net).tolist() == [False, False]


def test_zero_mean_production_fails():
    net = network(["S"], ["a", "b"], TWO, [("S -> 0", [1, 1])])
    v = check_assumption2(net)
    # no production at all: the species is transient, the verdict hinges on mean production
    assert list(v.partition.transient) == [0]
    assert v.mean_production == 0.0


@pytest.mark.parametrize("name", ["alpha-chain", "geneN1", "geneN2"])
def test_alpha_matches_sidecar(name):
    exp = library.expected(name)["alpha"]
    est = estimate_alpha(load_fixture(name), exp["anchor"], alpha_max=5, replicas=4000, seed=3)
    assert est.alpha == exp["value"]


def test_alpha_budget_exhausted():
    with pytest.raises(BudgetExhausted) as exc:
        estimate_alpha(load_fixture("alpha-chain"), 1, alpha_max=1, replicas=2000)
    assert exc.value.table[0].estimate == 1.0


def test_alpha_deterministic_across_threads():
    net = load_fixture("geneN2")
    a = estimate_alpha(net, 0, replicas=5000, seed=5, threads=1)
    b = estimate_alpha(net, 0, replicas=5000, seed=5, threads=3)
    assert a.table == b.table
