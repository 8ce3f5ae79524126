import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from envnet.envpath import (
    AbsorbingState,
    EnvPath,
    NotSingleton,
    PathBatch,
    duplicate_singleton,
    return_index,
    simulate_cycles,
    simulate_env,
    simulate_env_until_return,
)
from envnet.model import EnvironmentSpec

from conftest import build_random, load_fixture, seeds


def test_path_accessors():
    p = EnvPath.from_rows([(0.0, 0, 1.0), (1.0, 1, 0.5), (1.5, 0, 2.0)])
    assert p.total_time == pytest.approx(3.5)
    np.testing.assert_allclose(p.jump_times, [0.0, 1.0, 1.5])
    assert p.state_at(0.99) == 0 and p.state_at(1.0) == 1 and p.state_at(3.4) == 0
    cut = p.truncate(1.2)
    assert cut.total_time == pytest.approx(1.2) and list(cut.states) == [0, 1]
    assert EnvPath.from_rows(p.to_rows()).to_rows() == p.to_rows()


def test_path_rejects_bad_segments():
    with pytest.raises(ValueError):
        EnvPath(0, np.array([0, 0]), np.array([1.0, 1.0]))
    with pytest.raises(ValueError):
        EnvPath(0, np.array([0]), np.array([0.0]))


@given(seeds, st.floats(0.1, 20.0))
def test_simulated_path_is_consistent(seed, horizon):
    net = build_random(seed)
    p = simulate_env(net.env, 0, horizon, seed)
    assert p.total_time == pytest.approx(horizon, rel=1e-12)
    assert p.states[0] == 0
    Q = net.env.generator
    assert all(Q[a, b] > 0 for a, b in zip(p.states[:-1], p.states[1:]))


def test_seeded_paths_reproducible():
    env = load_fixture("case-study-m1").env
    a = simulate_env(env, 0, 50.0, 11)
    b = simulate_env(env, 0, 50.0, 11)
    assert a.to_rows() == b.to_rows()


def test_return_index():
    p = EnvPath.from_rows([(0.0, 0, 1.0), (1.0, 1, 0.5), (1.5, 0, 2.0), (3.5, 1, 1.0)])
    r = return_index(p, 0)
    np.testing.assert_allclose(r.taus, [0.0, 1.5])
    assert r.n_of(1.0) == 0 and r.n_of(1.5) == 1 and r.tau_of(3.0) == 1.5
    assert return_index(p, 1).n_of(0.5) == -1


def test_until_return_ends_at_anchor():
    env = load_fixture("case-study-m1").env
    p, r = simulate_env_until_return(env, 1, 4, np.random.default_rng(3))
    assert p.final_state == 1 and len(r) == 5
    assert r.taus[-1] == pytest.approx(p.total_time)


def test_empirical_occupation_matches_pi():
    env = load_fixture("case-study-m1").env
    p = simulate_env(env, 0, 2e4, 5)
    frac = p.holding[p.states == 0].sum() / p.total_time
    assert frac == pytest.approx(2 / 3, abs=0.02)


def test_absorbing_state_raises():
    env = EnvironmentSpec(states=("a",), generator=np.zeros((1, 1)), pi=np.ones(1))
    with pytest.raises(AbsorbingState):
        simulate_env_until_return(env, 0, 1, np.random.default_rng(0))


def test_clone_trick():
    env = EnvironmentSpec(states=("on",), generator=np.zeros((1, 1)), pi=np.ones(1))
    two = duplicate_singleton(env)
    assert two.size == 2 and np.allclose(two.generator.sum(axis=1), 0)
    with pytest.raises(NotSingleton):
        duplicate_singleton(two)


def test_cycles_and_batches():
    env = load_fixture("geneN2").env
    cb = simulate_cycles(env, 1, 200, np.random.default_rng(9))
    for i in (0, 57, 199):
        path = cb.path(i)
        assert path.states[0] == 1 and path.final_state == 1
        assert np.all(path.states[1:] != 1)
    paths = [simulate_env(env, 0, 3.0, s) for s in range(5)]
    pb = PathBatch.from_paths(paths)
    assert pb.count == 5
    for i, p in enumerate(paths):
        assert pb.path(i).to_rows() == p.to_rows()
