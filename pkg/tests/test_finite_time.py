import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st
from scipy.stats import binom, poisson

from envnet.envpath import EnvPath, PathBatch, simulate_env
from envnet.finite_time import (
    StepBudgetExceeded,
    TruncationTooSmall,
    burst_intensities,
    configurations,
    g_config,
    multinomial_pmf,
    pmf_table,
    pmf_Z,
    sample_Z,
    sample_Z_paths,
    ssa_batch,
    ssa_joint,
)
from envnet.model import network
from envnet.oracle import empirical_pmf, path_transient_pmf, tv_distance

from conftest import build_random, load_fixture, seeds

FROZEN = EnvPath.from_rows([(0.0, 0, 1.0), (1.0, 1, 1.0)])


def constant_bd(burst=1, k1=3.0, k2=1.0):
    eq = f"0 -> {burst} S" if burst > 1 else "0 -> S"
    return network(["S"], ["on"], [[0.0]], [(eq, [k1]), ("S -> 0", [k2])])


@given(st.integers(1, 5), st.integers(1, 4))
def test_configuration_count(m, d):
    confs = configurations(m, d)
    assert len(confs) == math.comb(m + d, d) - 1
    assert len({c.nu for c in confs}) == len(confs)
    assert all(1 <= c.size <= m for c in confs)


@given(seeds)
def test_multinomial_sums_to_one(seed):
    rng = np.random.default_rng(seed)
    d, m = int(rng.integers(1, 4)), int(rng.integers(1, 5))
    p = rng.dirichlet(np.ones(d + 1), size=3)[:, :d]
    nus = np.array([c.nu for c in configurations(m, d)] + [(0,) * d])
    assert np.allclose(multinomial_pmf(m, nus, p).sum(axis=0), 1.0)


def test_g_config_constant_environment():
    # burst of two, death rate 1: each molecule survives u time units with prob e^{-u}
    net = constant_bd(burst=2)
    p = math.exp(-0.7)
    path = EnvPath.constant(0, 2.0)
    assert g_config(net, path, 0.3, 1.0, 0, (1,)) == pytest.approx(2 * p * (1 - p), rel=1e-13)
    assert g_config(net, path, 0.3, 1.0, 0, (2,)) == pytest.approx(p * p, rel=1e-13)


def test_burst_intensities_closed_form():
    net = constant_bd(burst=2, k1=3.0, k2=1.0)
    t = 1.5
    lam = burst_intensities(net, EnvPath.constant(0, t), t)
    one_minus = lambda r: (1 - math.exp(-r * t)) / r  # noqa: E731
    assert lam[(0, (2,))] == pytest.approx(3.0 * one_minus(2.0), rel=1e-9)
    assert lam[(0, (1,))] == pytest.approx(3.0 * 2 * (one_minus(1.0) - one_minus(2.0)), rel=1e-9)


def test_intensity_vector_on_frozen_path():
    # [DERIVED] two segments: W = 2(1 - e^{-1/2}) e^{-1} + 3(1 - e^{-1})
    net = load_fixture("case-study-m1")
    w = burst_intensities(net, FROZEN, 2.0)
    expected = 2 * (1 - math.exp(-0.5)) * math.exp(-1.0) + 3 * (1 - math.exp(-1.0))
    assert w[0] == pytest.approx(expected, rel=1e-13)


def test_pmf_constant_birth_death():
    net = constant_bd()
    t, z0 = 0.8, 2
    tab = pmf_table(net, EnvPath.constant(0, t), t, [z0], [40])
    lam, s = 3.0 * (1 - math.exp(-t)), math.exp(-t)
    k = np.arange(41)
    ref = np.array([sum(binom.pmf(j, z0, s) * poisson.pmf(n - j, lam) for j in range(min(n, z0) + 1)) for n in k])
    np.testing.assert_allclose(tab, ref, atol=1e-13)
    assert pmf_Z(net, EnvPath.constant(0, t), t, [z0], [3]) == pytest.approx(ref[3], abs=1e-13)


@pytest.mark.parametrize("m", [1, 2, 3])
def test_pmf_matches_master_equation(m):
    net = load_fixture(f"case-study-m{m}")
    path = simulate_env(net.env, 0, 2.0, 100 + m)
    tab = pmf_table(net, path, 2.0, [2], [40])
    ref, overflow = path_transient_pmf(net, path, 2.0, [2], 90)
    assert overflow < 1e-10
    assert np.abs(tab - ref[:41]).max() < 1e-9


def test_pmf_two_species_matches_master_equation():
    net = network(
        ["A", "B"], ["x", "y"], [[-1, 1], [1, -1]],
        [("0 -> 2 A", [1, 2]), ("A -> B", [1, 0.5]), ("B -> 0", [1, 2]), ("A -> 0", [0.2, 0.2])],
    )
    path = simulate_env(net.env, 0, 1.5, 7)
    tab = pmf_table(net, path, 1.5, [1, 0], [20, 20])
    ref, _ = path_transient_pmf(net, path, 1.5, [1, 0], [40, 40])
    assert np.abs(tab - ref[:21, :21]).max() < 1e-9


def test_lattice_cap_enforced():
    with pytest.raises(TruncationTooSmall):
        pmf_table(constant_bd(), EnvPath.constant(0, 1.0), 1.0, [0], [100], cap=64)


def test_sampler_matches_pmf():
    net = load_fixture("case-study-m3")
    tab = pmf_table(net, FROZEN, 2.0, [1], [60])
    Z = sample_Z(net, FROZEN, 2.0, [1], seed=12, n=40_000)
    assert tv_distance(tab, empirical_pmf(Z)) < 0.02


@given(seeds)
def test_sampler_mean_matches_intensity(seed):
    net = build_random(seed, d_max=3, burst_max=1)
    path = simulate_env(net.env, 0, 1.0, seed)
    w = burst_intensities(net, path, 1.0)
    Z = sample_Z(net, path, 1.0, np.zeros(net.d, dtype=int), seed=seed, n=4000)
    se = np.sqrt(np.maximum(w, 1e-3) / 4000)
    assert np.all(np.abs(Z.mean(axis=0) - w) < 6 * se)


def test_sampler_reproducible_across_threads():
    net = load_fixture("partition-example")
    paths = PathBatch.from_paths([simulate_env(net.env, 0, 2.0, s) for s in range(5000)])
    z0 = [1, 0, 2, 1, 0]
    a = sample_Z_paths(net, paths, 2.0, z0, seed=4, threads=1)
    b = sample_Z_paths(net, paths, 2.0, z0, seed=4, threads=4)
    np.testing.assert_array_equal(a, b)


def test_closed_component_conserved_in_ssa():
    net = load_fixture("conserved-pair")
    traj = ssa_joint(net, 0, [3, 2], 50.0, seed=2)
    assert np.all(traj.z.sum(axis=1) == 5)


def test_ssa_step_budget():
    with pytest.raises(StepBudgetExceeded):
        ssa_joint(load_fixture("case-study-m1"), 0, [0], 1e4, seed=1, max_steps=100)


def test_lockstep_matches_scalar_ssa_in_law():
    net = load_fixture("case-study-m2")
    Zb, _ = ssa_batch(net, 0, [1], 1.0, 20_000, seed=5)
    Zs = np.array([ssa_joint(net, 0, [1], 1.0, seed=s).state_at(1.0)[1] for s in range(3000)])
    # two independent samplers; generous bound for 3000 scalar runs
    assert tv_distance(empirical_pmf(Zb), empirical_pmf(Zs)) < 0.05
    assert abs(Zb.mean() - Zs.mean()) < 5 * Zs.std() / math.sqrt(3000)
