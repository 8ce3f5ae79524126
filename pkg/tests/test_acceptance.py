"""End-to-end acceptance checks. Each test prints one PASS/FAIL line."""

import math
import subprocess
import sys
import time

import numpy as np
import pytest
from scipy.stats import poisson

from envnet import library, modelfile
from envnet.envpath import simulate_env
from envnet.finite_time import pmf_table, sample_Z_paths, ssa_batch, ssa_joint
from envnet.model import build_modulation, network
from envnet.oracle import TruncatedJointSpace, empirical_pmf, path_transient_pmf, stationary_pmf, tv_distance
from envnet.propagator import Propagator
from envnet.stationary import (
    error_certificate,
    factorial_moments,
    sre_sample,
    stationary_sample_Z,
    wasserstein_profile,
)
from envnet.structure import check_assumption2, estimate_alpha

@pytest.fixture
def report(capsys):
    def emit(n, ok, detail, started):
        with capsys.disabled():
            status = "PASS" if ok else "FAIL"
            print(f"\nacceptance {n:>2}: {status}  {detail}  ({time.perf_counter() - started:.1f}s)")
        assert ok, detail

    return emit


def fixture(name):
    return modelfile.load(library.path(name))


def random_model(rng):
    d = int(rng.integers(1, 7))
    g = int(rng.integers(1, 9))
    Q = rng.exponential(1.0, (g, g)) * (rng.random((g, g)) < 0.6)
    if g > 1:
        for k in range(g):
            Q[k, (k + 1) % g] += rng.exponential(1.0)
    np.fill_diagonal(Q, 0.0)
    np.fill_diagonal(Q, -Q.sum(axis=1))
    names = [f"S{i}" for i in range(d)]

    def rates(p_zero=0.4):
        r = rng.exponential(2.0, g) * (rng.random(g) > p_zero)
        r[rng.integers(g)] += rng.exponential(2.0)  # never identically zero
        return r

    reactions = [(f"0 -> {int(rng.integers(1, 4))} {names[i]}", rates()) for i in range(d)]
    for i in range(d):
        reactions.append((f"{names[i]} -> 0", rates()))
        for j in range(d):
            if i != j and rng.random() < 0.5:
                reactions.append((f"{names[i]} -> {names[j]}", rates()))
    return network(names, [str(k) for k in range(g)], Q, reactions)


def test_1_substochastic_sweep(report):
    t0 = time.perf_counter()
    rng = np.random.default_rng(101)
    worst_col, lo, hi = 0.0, 0.0, 0.0
    for _ in range(1000):
        net = random_model(rng)
        horizon = float(rng.exponential(3.0)) + 0.01
        path = simulate_env(net.env, int(rng.integers(net.env.size)), horizon, rng)
        u, t = np.sort(rng.uniform(0, horizon, 2))
        phi = Propagator(net).propagate(path, u, t).phi
        worst_col = max(worst_col, phi.sum(axis=0).max())
        lo, hi = min(lo, phi.min()), max(hi, phi.max())
    ok = worst_col <= 1 + 1e-12 and lo >= -1e-14 and hi <= 1 + 1e-12
    report(1, ok, f"max column sum {worst_col:.15f}, entries in [{lo:.2e}, {hi:.15f}]", t0)


def test_2_cocycle_and_ode(report):
    t0 = time.perf_counter()
    rng = np.random.default_rng(202)
    comp, fd = 0.0, 0.0
    eps = 1e-7
    for _ in range(200):
        net = random_model(rng)
        prop = Propagator(net)
        mod = build_modulation(net)
        mod_A, mod_B = mod.A, mod.B
        path = simulate_env(net.env, 0, 4.0, rng)
        u, s, t = np.sort(rng.uniform(0, 4.0, 3))
        ab, bc, ac = prop.propagate(path, u, s), prop.propagate(path, s, t), prop.propagate(path, u, t)
        joined = ab.then(bc)
        comp = max(comp, np.abs(joined.phi - ac.phi).max(), np.abs(joined.w - ac.w).max())
        jumps = path.jump_times
        if jumps.size and np.min(np.abs(jumps - t)) < 10 * eps:
            continue
        up, dn = prop.propagate(path, u, t + eps), prop.propagate(path, u, t - eps)
        x = path.state_at(t)
        dphi = (up.phi - dn.phi) / (2 * eps)
        dw = (up.w - dn.w) / (2 * eps)
        fd = max(fd, np.abs(dphi - mod_A[x] @ ac.phi).max(), np.abs(dw - (mod_A[x] @ ac.w + mod_B[x])).max())
    ok = comp < 1e-11 and fd < 1e-6
    report(2, ok, f"composition residual {comp:.2e}, finite-difference residual {fd:.2e}", t0)


def test_3_finite_time_dual_route(report):
    t0 = time.perf_counter()
    details, ok = [], True
    for m in (1, 2, 3):
        net = fixture(f"case-study-m{m}")
        z0 = np.array([1])
        Zs, paths = ssa_batch(net, 0, z0, 2.0, 100_000, seed=30 + m)
        Zm = sample_Z_paths(net, paths, 2.0, z0, seed=40 + m)
        tv = tv_distance(empirical_pmf(Zs), empirical_pmf(Zm))
        frozen = simulate_env(net.env, 0, 2.0, 50 + m)
        tab = pmf_table(net, frozen, 2.0, z0, [60])
        orc, over = path_transient_pmf(net, frozen, 2.0, z0, 120)
        err = float(np.abs(tab - orc[:61]).max())
        ok &= tv < 0.02 and err < 1e-6
        details.append(f"m={m} tv={tv:.4f} pmf err={err:.1e}")
    report(3, ok, "; ".join(details), t0)


def test_4_partition_golden(report):
    t0 = time.perf_counter()
    net = fixture("partition-example")
    part = check_assumption2(net).partition
    named = [[net.names[i] for i in c] for c in part.closed_components]
    got = (named, [net.names[i] for i in part.produced], [net.names[i] for i in part.transient])
    ok = got == ([["S4", "S5"]], ["S1", "S2"], ["S3"])
    report(4, ok, f"closed={got[0]} produced={got[1]} transient={got[2]}", t0)


def test_5_alpha_diagnostic(report):
    t0 = time.perf_counter()
    net = fixture("alpha-chain")
    est = estimate_alpha(net, 1, alpha_max=5, replicas=10_000)
    first = est.table[0]
    ok = est.alpha == 2 and abs(first.estimate - 1.0) <= 1e-9 and est.table[1].ucb99 < 1.0
    report(5, ok, f"alpha=1 estimate {first.estimate!r}; accepted alpha={est.alpha} (ucb99 {est.table[-1].ucb99:.3f})", t0)


def test_6_birth_death_exact(report):
    t0 = time.perf_counter()
    net = fixture("birth-death-clone")
    cert = error_certificate(net, 0)
    n = cert.n_for(1e-3)
    Z = stationary_sample_Z(net, 0, None, n=n, replicas=100_000)
    emp = empirical_pmf(Z).ravel()
    k = np.arange(emp.size)
    tv = 0.5 * (np.abs(emp - poisson.pmf(k, 3.0)).sum() + poisson.sf(k[-1], 3.0))
    report(6, tv < 0.01, f"n={n} from certificate, tv vs Poisson(3) = {tv:.4f}", t0)


def test_7_gene_network_conditionals(report):
    t0 = time.perf_counter()
    details, ok = [], True
    for N in (1, 2):
        net = fixture(f"geneN{N}")
        space = TruncatedJointSpace.for_network(net, 60)
        res = stationary_pmf(net, space)
        for x in range(net.env.size):
            cert = error_certificate(net, x, seed=70 + x)
            n = cert.n_for(1e-3)
            Z = stationary_sample_Z(net, x, None, n=n, seed=80 + 10 * N + x, replicas=100_000)
            tv = tv_distance(res.conditional(x), empirical_pmf(Z))
            ok &= tv < 0.02
            details.append(f"N={N} x={net.env.states[x]} tv={tv:.4f}")
    report(7, ok, "; ".join(details), t0)


def test_8_wasserstein_decay(report):
    t0 = time.perf_counter()
    net = fixture("case-study-slow")
    ns = (5, 10, 20, 40)
    atoms = sre_sample(net, 0, 200, seed=88, replicas=100_000, checkpoints=ns)
    prof = wasserstein_profile(atoms, ns)
    w = np.array([v for _, v in prof])
    slope = np.polyfit(ns, np.log(w), 1)[0]
    r = error_certificate(net, 0, seed=89).r_hat
    ratio = -slope / r
    ok = bool(np.all(np.diff(w) < 0)) and 0.5 <= ratio <= 2.0
    report(8, ok, f"W1={np.round(w, 4).tolist()} slope={slope:.4f} r_hat={r:.4f} ratio={ratio:.3f}", t0)


def _batch_time_average(traj, f, n_batches=20):
    cum = np.concatenate(([0.0], np.cumsum(f * traj.dwell())))
    knots = np.append(traj.times, traj.horizon)
    edges = np.linspace(0.0, traj.horizon, n_batches + 1)
    F = np.interp(edges, knots, cum)
    means = np.diff(F) / np.diff(edges)
    return F[-1] / traj.horizon, means.std(ddof=1) / math.sqrt(n_batches)


def test_9_moment_recursion(report):
    t0 = time.perf_counter()
    net = fixture("case-study-m1")
    tab = factorial_moments(net, 3, n_cycles=100_000, seed=90)
    traj = ssa_joint(net, 0, [0], 1e5, seed=91)
    z = traj.z[:, 0].astype(float)
    ok, details = True, []
    f = np.ones_like(z)
    for q in (1, 2, 3):
        f = f * (z - q + 1)
        avg, se = _batch_time_average(traj, f)
        k = list(tab.q).index(q)
        gap = abs(tab.m[k] - avg) / math.hypot(tab.se[k], se)
        ok &= gap < 3
        details.append(f"q={q} recursion {tab.m[k]:.4f} ssa {avg:.4f} ({gap:.2f} se)")
    report(9, ok, "; ".join(details), t0)


def test_10_conservation(report):
    t0 = time.perf_counter()
    net = fixture("conserved-pair")
    Z = stationary_sample_Z(net, 0, counts=[5], n=40, replicas=20_000)
    totals = Z.sum(axis=1)
    report(10, bool(np.all(totals == 5)), f"totals in [{totals.min()}, {totals.max()}] over {len(Z)} samples", t0)


STOCHASTIC_RUNS = [
    ["check", "alpha-chain", "--alpha", "--anchor", "1", "--replicas", "3000"],
    ["simulate-env", "case-study-m1", "--horizon", "20", "--returns", "0"],
    ["finite-time", "case-study-m2", "--t", "2", "--z0", "1", "--sample", "3000"],
    ["stationary", "geneN2", "--n", "20", "--samples", "3000", "--certificate", "--cert-replicas", "2000"],
    ["moments", "case-study-m1", "--cycles", "5000"],
    ["compare", "case-study-m1", "--t", "1", "--replicas", "3000"],
]


def test_11_determinism(report, tmp_path):
    t0 = time.perf_counter()
    mismatched = []
    for argv in STOCHASTIC_RUNS:
        outs = []
        for run in range(2):
            target = tmp_path / f"{argv[0]}-{run}.csv"
            cmd = [sys.executable, "-m", "envnet.cli", *argv, "--seed", "7", "--out", str(target)]
            subprocess.run(cmd, check=True, capture_output=True)
            outs.append(target.read_bytes())
        if outs[0] != outs[1] or not outs[0]:
            mismatched.append(argv[0])
    report(11, not mismatched, f"{len(STOCHASTIC_RUNS)} subcommands, mismatched: {mismatched or 'none'}", t0)
