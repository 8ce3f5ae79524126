"""Conditional law of the counts at a fixed time given the environment path.

Given the path, every initial molecule moves independently through the
species graph and every burst enters at a Poisson time, so ``Z(t)`` is a sum
of multinomial cohorts and Poisson-weighted burst configurations. This module
samples that law directly, evaluates its pmf by convolution, and also runs
plain joint Gillespie simulation as an independent route.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from itertools import combinations_with_replacement

import numpy as np
from scipy.special import gammaln
from scipy.stats import poisson

from .envpath import EnvPath, PathBatch
from .model import ModulatedNetwork
from .propagator import Propagator
from .rng import DEFAULT_SEED, map_blocks, stream

GL_NODES, GL_WEIGHTS = np.polynomial.legendre.leggauss(16)
QUAD_TOL = 1e-9
QUAD_DEPTH = 30
LATTICE_CAP = 64
CONFIG_CAP = 100_000
MAX_STEPS = 10_000_000


class QuadratureFailure(RuntimeError):
    pass


class TruncationTooSmall(ValueError):
    pass


class StepBudgetExceeded(RuntimeError):
    pass


# ----------------------------------------------------------------------------
# configurations and multinomial pieces


@dataclass(frozen=True)
class Configuration:
    nu: tuple[int, ...]

    @property
    def size(self) -> int:
        return sum(self.nu)


def configurations(m: int, d: int) -> list[Configuration]:
    """All ``nu`` in ``N^d`` with ``1 <= |nu| <= m``, ordered by size then lexicographically."""
    if math.comb(m + d, d) > CONFIG_CAP:
        raise ValueError(f"C({m}+{d}, {d}) configurations exceed the cap {CONFIG_CAP}")
    out = []
    for k in range(1, m + 1):
        level = []
        for combo in combinations_with_replacement(range(d), k):
            nu = [0] * d
            for i in combo:
                nu[i] += 1
            level.append(tuple(nu))
        out.extend(Configuration(nu) for nu in sorted(level, reverse=True))
    return out


def _probs_with_death(p: np.ndarray) -> np.ndarray:
    """Append the death cell ``1 - sum(p)`` along the last axis, absorbing roundoff."""
    p = np.clip(p, 0.0, 1.0)
    s = p.sum(axis=-1, keepdims=True)
    p = np.where(s > 1.0, p / np.where(s > 0, s, 1.0), p)
    death = np.clip(1.0 - p.sum(axis=-1, keepdims=True), 0.0, 1.0)
    return np.concatenate([p, death], axis=-1)


def multinomial_pmf(m: int, nus: np.ndarray, p: np.ndarray) -> np.ndarray:
    """``P(Multi(m, p) = nu)`` with implicit death cell; ``nus`` (K, d), ``p`` (N, d) -> (K, N)."""
    nus = np.atleast_2d(np.asarray(nus, dtype=np.int64))
    full = _probs_with_death(np.atleast_2d(p))
    rest = m - nus.sum(axis=1)
    logc = gammaln(m + 1) - gammaln(nus + 1).sum(axis=1) - gammaln(np.maximum(rest, 0) + 1)
    counts = np.concatenate([nus, rest[:, None]], axis=1)  # (K, d+1)
    powers = np.prod(full[None, :, :] ** counts[:, None, :], axis=2)
    out = np.exp(logc)[:, None] * powers
    out[rest < 0] = 0.0
    return out


def g_config(net: ModulatedNetwork, path: EnvPath, u: float, t: float, j: int, nu, prop=None) -> float:
    """Probability that a burst of species ``j`` emitted at ``u`` looks like ``nu`` at ``t``."""
    prop = Propagator(net) if prop is None else prop
    col = prop.propagate(path, u, t).phi[:, j]
    m = int(net.bursts[j]) or 1
    return float(multinomial_pmf(m, np.asarray(nu)[None, :], col[None, :])[0, 0])


# ----------------------------------------------------------------------------
# per-path propagation tables


def _suffix_products(E: np.ndarray, offsets: np.ndarray) -> np.ndarray:
    """``S[k] = E[last] ... E[k+1]`` per path, i.e. propagation from the end of segment k to t."""
    n_seg, d, _ = E.shape
    S = np.empty_like(E)
    lengths = np.diff(offsets)
    starts = offsets[:-1]
    S[offsets[1:] - 1] = np.eye(d)
    for k in range(int(lengths.max(initial=0)) - 2, -1, -1):
        idx = starts[lengths > k + 1] + k
        S[idx] = S[idx + 1] @ E[idx + 1]
    return S


@dataclass(frozen=True, eq=False)
class _Tables:
    batch: PathBatch
    h: np.ndarray  # segment lengths clipped to [0, t]
    S: np.ndarray  # propagation from segment end to t
    phi: np.ndarray  # Phi(0, t) per path


def _tables(prop: Propagator, batch: PathBatch, t: float) -> _Tables:
    starts = batch.starts()
    h = np.clip(np.minimum(starts + batch.holding, t) - starts, 0.0, None)
    totals = np.add.reduceat(batch.holding, batch.offsets[:-1]) if batch.count else np.zeros(0)
    if np.any(totals < t * (1 - 1e-12)):
        raise ValueError("path shorter than the requested time")
    E, _ = prop.segments(batch.states, h, with_g=False)
    S = _suffix_products(E, batch.offsets)
    first = batch.offsets[:-1]
    return _Tables(batch, h, S, S[first] @ E[first])


# ----------------------------------------------------------------------------
# exact sampling


def _sample_block(net: ModulatedNetwork, tab: _Tables, z0: np.ndarray, which: np.ndarray, rng) -> np.ndarray:
    d = net.d
    n = which.size
    Z = np.zeros((n, d), dtype=np.int64)
    for i in np.flatnonzero(z0):
        pv = _probs_with_death(tab.phi[which][:, :, i])
        Z += rng.multinomial(int(z0[i]), pv)[:, :d]
    batch = tab.batch
    prop = Propagator(net)
    for j in np.flatnonzero(net.bursts):
        weight = net.production_rates[batch.states, j] * tab.h
        if not weight.any():
            continue
        cum = np.cumsum(weight)
        base = np.concatenate(([0.0], cum))[batch.offsets[:-1]]
        total = np.add.reduceat(weight, batch.offsets[:-1])
        births = rng.poisson(total[which])
        rep = np.repeat(np.arange(n), births)
        if not rep.size:
            continue
        p_id = which[rep]
        target = base[p_id] + (1.0 - rng.random(rep.size)) * total[p_id]
        seg = np.searchsorted(cum, target, side="left")
        seg = np.clip(seg, batch.offsets[p_id], batch.offsets[p_id + 1] - 1)
        residual = tab.h[seg] * rng.random(rep.size)
        E, _ = prop.segments(batch.states[seg], residual, with_g=False)
        p = np.einsum("bik,bk->bi", tab.S[seg], E[:, :, j])
        draws = rng.multinomial(int(net.bursts[j]), _probs_with_death(p))[:, :d]
        np.add.at(Z, rep, draws)
    return Z


def sample_Z_paths(
    net: ModulatedNetwork,
    batch: PathBatch,
    t: float,
    z0,
    seed: int = DEFAULT_SEED,
    which=None,
    threads: int | None = None,
) -> np.ndarray:
    """One exact draw of ``Z(t)`` per entry of ``which`` (path indices; default one per path)."""
    z0 = np.asarray(z0, dtype=np.int64).reshape(net.d)
    which = np.arange(batch.count) if which is None else np.asarray(which, dtype=np.int64)
    tab = _tables(Propagator(net), batch, t)
    parts = map_blocks(
        lambda rng, a, b: _sample_block(net, tab, z0, which[a:b], rng), seed, which.size, threads=threads
    )
    return np.concatenate(parts, axis=0) if parts else np.zeros((0, net.d), dtype=np.int64)


def sample_Z(
    net: ModulatedNetwork,
    path: EnvPath,
    t: float,
    z0,
    seed: int = DEFAULT_SEED,
    n: int = 1,
    threads: int | None = None,
) -> np.ndarray:
    """``n`` independent draws of ``Z(t)`` given the fixed environment path."""
    batch = PathBatch.from_paths([path])
    return sample_Z_paths(net, batch, t, z0, seed, np.zeros(n, dtype=np.int64), threads)


# ----------------------------------------------------------------------------
# intensities


def _adaptive(f, a: float, b: float, tol: float, floor: float) -> np.ndarray:
    """Adaptive 16-point Gauss-Legendre for a vector-valued integrand on ``[a, b]``."""

    def rule(lo, hi):
        half = 0.5 * (hi - lo)
        vals = f(lo + half * (GL_NODES + 1.0))  # (K, 16)
        return half * vals @ GL_WEIGHTS

    if b <= a:
        return 0.0 * rule(a, a)
    stack = [(a, b, rule(a, b), 0)]
    total = 0.0
    while stack:
        lo, hi, whole, depth = stack.pop()
        mid = 0.5 * (lo + hi)
        left, right = rule(lo, mid), rule(mid, hi)
        both = left + right
        if np.max(np.abs(both - whole)) <= tol * max(np.max(np.abs(both)), floor):
            total = total + both
            continue
        if depth >= QUAD_DEPTH:
            raise QuadratureFailure(f"no convergence on [{lo}, {hi}] after {depth} bisections")
        stack.append((lo, mid, left, depth + 1))
        stack.append((mid, hi, right, depth + 1))
    return total


def burst_intensities(
    net: ModulatedNetwork,
    path: EnvPath,
    t: float,
    quad_tol: float = QUAD_TOL,
    aggregate: bool = True,
    prop: Propagator | None = None,
):
    """Poisson intensities of the burst components of ``Z(t)``.

    With all bursts of size at most one and ``aggregate`` set, returns the
    vector ``W(t)``. Otherwise returns ``{(j, nu): intensity}``.
    """
    prop = Propagator(net) if prop is None else prop
    if aggregate and net.bursts.max(initial=0) <= 1:
        return prop.propagate(path, 0.0, t).w
    out: dict[tuple[int, tuple[int, ...]], float] = {}
    states, lengths = prop.pieces(path, 0.0, t)
    batch = PathBatch(np.array([0, states.size]), states, lengths)
    E, _ = prop.segments(states, lengths, with_g=False)
    S = _suffix_products(E, batch.offsets) if states.size else E
    for j in np.flatnonzero(net.bursts):
        m = int(net.bursts[j])
        nus = np.array([c.nu for c in configurations(m, net.d)])
        acc = np.zeros(len(nus))
        for k in range(states.size):
            rate = net.production_rates[states[k], j]
            if rate == 0.0:
                continue
            kern = prop.kernel(int(states[k]))
            Sk = S[k]

            def integrand(r, kern=kern, Sk=Sk, j=j, m=m, nus=nus, rate=rate):
                Er, _ = kern.batch(r, with_g=False)
                p = (Sk @ Er[:, :, j].T).T
                return rate * multinomial_pmf(m, nus, p)

            acc += _adaptive(integrand, 0.0, float(lengths[k]), quad_tol, 1e-300)
        for nu, val in zip(nus, acc):
            out[(int(j), tuple(int(v) for v in nu))] = float(val)
    return out


# ----------------------------------------------------------------------------
# pmf by lattice convolution


def _shift_add(out: np.ndarray, src: np.ndarray, shift, weight: float) -> None:
    dst_sl, src_sl = [], []
    for s, n in zip(shift, src.shape):
        if s >= n:
            return
        dst_sl.append(slice(s, n))
        src_sl.append(slice(0, n - s))
    out[tuple(dst_sl)] += weight * src[tuple(src_sl)]


def _poisson_shift(arr: np.ndarray, nu, lam: float) -> np.ndarray:
    if lam <= 0.0:
        return arr
    nu = np.asarray(nu)
    n_max = min(((s - 1) // v for s, v in zip(arr.shape, nu) if v > 0), default=0)
    weights = poisson.pmf(np.arange(n_max + 1), lam)
    out = np.zeros_like(arr)
    for n, w in enumerate(weights):
        _shift_add(out, arr, n * nu, w)
    return out


def _cohort(arr: np.ndarray, p: np.ndarray, count: int) -> np.ndarray:
    full = _probs_with_death(p[None, :])[0]
    d = p.size
    for _ in range(count):
        out = full[d] * arr
        for k in range(d):
            if full[k] > 0:
                shift = np.zeros(d, dtype=int)
                shift[k] = 1
                _shift_add(out, arr, shift, full[k])
        arr = out
    return arr


def pmf_table(
    net: ModulatedNetwork,
    path: EnvPath,
    t: float,
    z0,
    zmax,
    quad_tol: float = QUAD_TOL,
    cap: int = LATTICE_CAP,
) -> np.ndarray:
    """Conditional pmf of ``Z(t)`` on the box ``0 <= z <= zmax``.

    Mass outside the box is dropped, so the entries inside are exact.
    """
    d = net.d
    zmax = np.broadcast_to(np.asarray(zmax, dtype=np.int64), (d,))
    if np.any(zmax > cap):
        raise TruncationTooSmall(f"requested counts {zmax.tolist()} exceed the lattice cap {cap}")
    prop = Propagator(net)
    arr = np.zeros(tuple(int(v) + 1 for v in zmax))
    arr[(0,) * d] = 1.0
    phi = prop.propagate(path, 0.0, t).phi
    z0 = np.asarray(z0, dtype=np.int64).reshape(d)
    for i in np.flatnonzero(z0):
        arr = _cohort(arr, phi[:, i], int(z0[i]))
    comps = burst_intensities(net, path, t, quad_tol, prop=prop)
    if isinstance(comps, np.ndarray):
        comps = {(k, tuple(np.eye(d, dtype=int)[k])): float(comps[k]) for k in range(d)}
    for (_, nu), lam in comps.items():
        arr = _poisson_shift(arr, nu, lam)
    return arr


def pmf_Z(net, path, t, z0, z, quad_tol: float = QUAD_TOL, cap: int = LATTICE_CAP) -> float:
    z = tuple(int(v) for v in np.atleast_1d(z))
    return float(pmf_table(net, path, t, z0, z, quad_tol, cap)[z])


# ----------------------------------------------------------------------------
# joint Gillespie simulation


@dataclass(frozen=True, eq=False)
class Trajectory:
    """Jump chain of ``(X, Z)``: state ``(x[k], z[k])`` holds on ``[times[k], times[k+1])``."""

    times: np.ndarray
    x: np.ndarray
    z: np.ndarray
    horizon: float

    def env_path(self) -> EnvPath:
        change = np.flatnonzero(np.diff(self.x)) + 1
        starts = np.concatenate(([0.0], self.times[change]))
        states = np.concatenate(([self.x[0]], self.x[change]))
        holding = np.diff(np.append(starts, self.horizon))
        return EnvPath(int(states[0]), states, holding)

    def state_at(self, t: float) -> tuple[int, np.ndarray]:
        k = int(np.searchsorted(self.times, t, side="right")) - 1
        return int(self.x[k]), self.z[k]

    def dwell(self) -> np.ndarray:
        return np.diff(np.append(self.times, self.horizon))


class _Events:
    """Propensity layout: env jump, productions, conversions (i, j), degradations."""

    def __init__(self, net: ModulatedNetwork):
        d = net.d
        self.d = d
        self.q = net.env.exit_rates
        Q = net.env.generator
        P = np.where(np.eye(net.env.size, dtype=bool), 0.0, Q) / np.where(self.q > 0, self.q, 1.0)[:, None]
        self.jump_cum = np.cumsum(P, axis=1)
        self.jump_cum[:, -1] = 2.0
        self.prod = net.production_rates
        self.conv = net.conversion_rates.reshape(net.env.size, d * d)
        self.deg = net.degradation_rates
        V = [np.zeros(d, dtype=np.int64)]
        for j in range(d):
            v = np.zeros(d, dtype=np.int64)
            v[j] = net.bursts[j]
            V.append(v)
        for i in range(d):
            for j in range(d):
                v = np.zeros(d, dtype=np.int64)
                if i != j:
                    v[i], v[j] = -1, 1
                V.append(v)
        for i in range(d):
            v = np.zeros(d, dtype=np.int64)
            v[i] = -1
            V.append(v)
        self.V = np.array(V)
        self.src = np.repeat(np.arange(d), d)

    def rates(self, x: np.ndarray, z: np.ndarray) -> np.ndarray:
        return np.concatenate(
            [self.q[x][:, None], self.prod[x], self.conv[x] * z[:, self.src], self.deg[x] * z], axis=1
        )


def _lockstep(net, x0, z0, horizon, rng, n, max_steps: int):
    ev = _Events(net)
    x = np.full(n, int(x0), dtype=np.int64)
    z = np.tile(np.asarray(z0, dtype=np.int64).reshape(net.d), (n, 1))
    t = np.zeros(n)
    active = np.arange(n)
    jumps = []
    steps = 0
    while active.size:
        steps += 1
        if steps > max_steps:
            raise StepBudgetExceeded(f"more than {max_steps} events before t={horizon}")
        xa, za = x[active], z[active]
        R = ev.rates(xa, za)
        cum = np.cumsum(R, axis=1)
        total = cum[:, -1]
        with np.errstate(divide="ignore"):
            dt = rng.standard_exponential(active.size) / total
        t_new = t[active] + dt
        alive = t_new < horizon
        active, t_new, cum, xa = active[alive], t_new[alive], cum[alive], xa[alive]
        if not active.size:
            break
        u = rng.random(active.size) * cum[:, -1]
        k = (cum > u[:, None]).argmax(axis=1)
        t[active] = t_new
        z[active] += ev.V[k]
        env = k == 0
        if env.any():
            who = active[env]
            dest = (ev.jump_cum[xa[env]] > rng.random(who.size)[:, None]).argmax(axis=1)
            x[who] = dest
            jumps.append((who, t_new[env], dest))
    return x, z, jumps


def ssa_joint(net: ModulatedNetwork, x0: int, z0, horizon: float, seed=DEFAULT_SEED, max_steps: int = MAX_STEPS):
    """Exact Gillespie trajectory of the joint chain on ``[0, horizon]``."""
    rng = seed if isinstance(seed, np.random.Generator) else stream(seed)
    ev = _Events(net)
    n_env = net.env.size
    # per environment state: (rate, source species or -1, stoichiometry row) for live channels
    channels = []
    for x in range(n_env):
        row = []
        for j in range(net.d):
            if ev.prod[x, j] > 0:
                row.append((float(ev.prod[x, j]), -1, ev.V[1 + j]))
        for c in range(net.d * net.d):
            if ev.conv[x, c] > 0:
                row.append((float(ev.conv[x, c]), int(ev.src[c]), ev.V[1 + net.d + c]))
        for i in range(net.d):
            if ev.deg[x, i] > 0:
                row.append((float(ev.deg[x, i]), i, ev.V[1 + net.d + net.d * net.d + i]))
        channels.append(row)
    jump_cum = [list(r) for r in ev.jump_cum]
    q = [float(v) for v in ev.q]
    x = int(x0)
    z = [int(v) for v in np.asarray(z0).reshape(net.d)]
    t = 0.0
    times, xs, zs = [0.0], [x], [tuple(z)]
    chunk = 8192
    expo, unif, k = rng.standard_exponential(chunk), rng.random(2 * chunk), 0
    steps = 0
    while True:
        if k == chunk:
            expo, unif, k = rng.standard_exponential(chunk), rng.random(2 * chunk), 0
        props = [rate * (z[src] if src >= 0 else 1) for rate, src, _ in channels[x]]
        total = q[x] + sum(props)
        if total <= 0.0:
            break
        t += expo[k] / total
        if t >= horizon:
            break
        steps += 1
        if steps > max_steps:
            raise StepBudgetExceeded(f"more than {max_steps} events before t={horizon}")
        target = unif[2 * k] * total
        u2 = unif[2 * k + 1]
        k += 1
        if target < q[x]:
            cum = jump_cum[x]
            y = 0
            while cum[y] <= u2:
                y += 1
            x = y
        else:
            target -= q[x]
            c = 0
            last = len(props) - 1
            while c < last and target >= props[c]:
                target -= props[c]
                c += 1
            while props[c] == 0.0:  # roundoff landed on a dead channel
                c -= 1
            v = channels[x][c][2]
            z = [a + int(b) for a, b in zip(z, v)]
        times.append(t)
        xs.append(x)
        zs.append(tuple(z))
    return Trajectory(
        np.array(times), np.array(xs, dtype=np.int64), np.array(zs, dtype=np.int64).reshape(len(zs), net.d), float(horizon)
    )


def _assemble_paths(n: int, x0: int, horizon: float, jumps) -> PathBatch:
    if jumps:
        rep = np.concatenate([j[0] for j in jumps])
        tt = np.concatenate([j[1] for j in jumps])
        xx = np.concatenate([j[2] for j in jumps])
        order = np.argsort(rep, kind="stable")
        rep, tt, xx = rep[order], tt[order], xx[order]
    else:
        rep = tt = xx = np.zeros(0)
        rep = rep.astype(np.int64)
    counts = np.bincount(rep, minlength=n)
    lengths = counts + 1
    offsets = np.concatenate(([0], np.cumsum(lengths))).astype(np.int64)
    states = np.empty(offsets[-1], dtype=np.int64)
    starts = np.zeros(offsets[-1])
    states[offsets[:-1]] = x0
    first = np.concatenate(([0], np.cumsum(counts)))[rep]
    pos = offsets[rep] + 1 + (np.arange(rep.size) - first)
    states[pos] = xx
    starts[pos] = tt
    ends = np.empty_like(starts)
    ends[:-1] = starts[1:]
    ends[offsets[1:] - 1] = horizon
    return PathBatch(offsets, states, ends - starts)


def ssa_batch(
    net: ModulatedNetwork,
    x0: int,
    z0,
    horizon: float,
    n: int,
    seed: int = DEFAULT_SEED,
    threads: int | None = None,
    max_steps: int = MAX_STEPS,
) -> tuple[np.ndarray, PathBatch]:
    """Terminal counts of ``n`` joint trajectories plus their environment paths."""

    def run(rng, a, b):
        _, z, jumps = _lockstep(net, x0, z0, horizon, rng, b - a, max_steps)
        return z, _assemble_paths(b - a, int(x0), horizon, jumps)

    parts = map_blocks(run, seed, n, threads=threads)
    Z = np.concatenate([p[0] for p in parts], axis=0)
    batches = [p[1] for p in parts]
    offs, acc = [np.zeros(1, dtype=np.int64)], 0
    for bt in batches:
        offs.append(bt.offsets[1:] + acc)
        acc += int(bt.offsets[-1])
    paths = PathBatch(
        np.concatenate(offs),
        np.concatenate([bt.states for bt in batches]),
        np.concatenate([bt.holding for bt in batches]),
    )
    return Z, paths
