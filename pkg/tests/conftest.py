import numpy as np
import pytest
from hypothesis import HealthCheck, settings
from hypothesis import strategies as st

from envnet import library, modelfile
from envnet.model import network

settings.register_profile("envnet", deadline=None, max_examples=60, suppress_health_check=[HealthCheck.too_slow])
settings.load_profile("envnet")


def load_fixture(name):
    return modelfile.load(library.path(name))


@pytest.fixture
def fixture_net():
    return load_fixture


def build_random(seed: int, d_max: int = 4, g_max: int = 4, burst_max: int = 3):
    """Random mono-molecular network in an irreducible environment."""
    rng = np.random.default_rng(seed)
    d = int(rng.integers(1, d_max + 1))
    g = int(rng.integers(1, g_max + 1))
    Q = rng.exponential(1.0, (g, g)) * (rng.random((g, g)) < 0.5)
    for k in range(g):
        if g > 1:
            Q[k, (k + 1) % g] += 0.2 + rng.exponential(1.0)
    np.fill_diagonal(Q, 0.0)
    np.fill_diagonal(Q, -Q.sum(axis=1))
    names = [f"S{i}" for i in range(d)]

    def rates():
        r = rng.exponential(1.5, g) * (rng.random(g) < 0.7)
        r[rng.integers(g)] += 0.1 + rng.exponential(1.0)
        return r

    reactions = []
    for i in range(d):
        b = int(rng.integers(1, burst_max + 1))
        reactions.append((f"0 -> {b} {names[i]}" if b > 1 else f"0 -> {names[i]}", rates()))
        reactions.append((f"{names[i]} -> 0", rates()))
        for j in range(d):
            if i != j and rng.random() < 0.4:
                reactions.append((f"{names[i]} -> {names[j]}", rates()))
    return network(names, [f"e{k}" for k in range(g)], Q, reactions)


seeds = st.integers(min_value=0, max_value=2**32 - 1)
