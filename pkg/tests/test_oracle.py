import numpy as np
import pytest
from scipy.stats import poisson

from envnet.model import network
from envnet.oracle import (
    TruncatedJointSpace,
    build_joint_generator,
    empirical_pmf,
    stationary_pmf,
    transient_pmf,
    tv_distance,
)

from conftest import load_fixture


def test_generator_rows_conserve_probability():
    net = load_fixture("partition-example")
    space = TruncatedJointSpace.for_network(net, 3)
    G = build_joint_generator(net, space)
    assert G.shape == (space.size + 1, space.size + 1)  # trailing overflow state
    assert np.abs(np.asarray(G.sum(axis=1))).max() < 1e-12
    reflecting = build_joint_generator(net, space, overflow=False)
    assert np.abs(np.asarray(reflecting.sum(axis=1))).max() < 1e-12


def test_index_round_trip():
    space = TruncatedJointSpace.for_network(load_fixture("partition-example"), [2, 3, 1, 2, 2])
    for k in range(0, space.size - 1, 17):
        x, z = space.state(k)
        assert space.index(x, z) == k


def test_transient_mass_and_overflow():
    net = load_fixture("case-study-m3")
    space = TruncatedJointSpace.for_network(net, 8)
    G = build_joint_generator(net, space)
    p = transient_pmf(G, space.index(0, [0]), 3.0)
    assert p.sum() == pytest.approx(1.0, abs=1e-10)
    assert p[-1] > 1e-4  # small box: overflow is visible, not hidden


def test_stationary_birth_death_is_poisson():
    net = network(["S"], ["a", "b"], [[-1, 1], [1, -1]], [("0 -> S", [3, 3]), ("S -> 0", [1, 1])])
    res = stationary_pmf(net, TruncatedJointSpace.for_network(net, 40))
    np.testing.assert_allclose(res.z_marginal(), poisson.pmf(np.arange(41), 3.0), atol=1e-12)
    np.testing.assert_allclose(res.env_marginal(), [0.5, 0.5], atol=1e-12)
    assert res.boundary_mass < 1e-10 and res.residual < 1e-9


def test_stationary_case_study_mean():
    # [DERIVED] mean equations E[Z; X=x] solve 0 = k1 pi - k2 m + Q^T m, giving 37/15
    net = load_fixture("case-study-m1")
    res = stationary_pmf(net, TruncatedJointSpace.for_network(net, 60))
    z = np.arange(61)
    assert (res.z_marginal() * z).sum() == pytest.approx(37 / 15, abs=1e-10)
    assert res.conditional(1) @ z == pytest.approx((13 / 15) / (1 / 3), abs=1e-9)


def test_tv_distance():
    p = np.array([0.5, 0.5])
    assert tv_distance(p, p) == 0.0
    assert tv_distance(p, np.array([1.0])) == pytest.approx(0.5)
    assert tv_distance(np.array([1.0, 0]), np.array([0, 1.0])) == pytest.approx(1.0)


def test_empirical_pmf_shape():
    Z = np.array([[0, 1], [2, 1], [0, 1]])
    e = empirical_pmf(Z)
    assert e.shape == (3, 2) and e[0, 1] == pytest.approx(2 / 3)
