"""Stationary sampling through the stochastic recurrence of renewal cycles.

Cycles of the environment between visits to an anchor state ``x`` are
i.i.d.; each contributes a survival matrix ``C`` and a production vector
``D``. Accumulating ``W += Pi D; Pi = Pi C`` over ``n`` cycles gives the
backward form of ``V_i = C_i V_{i-1} + D_i`` (same law, but convergent
pathwise, which is what the closed-component stopping rule needs). A final
exponential holding ``U`` at ``x`` turns ``(Pi, W)`` into a mixture atom.
"""

from __future__ import annotations

import math
import warnings
from dataclasses import dataclass, field

import numpy as np
from scipy import integrate
from scipy.stats import wasserstein_distance

from .envpath import ensure_multistate, simulate_cycles
from .model import ModulatedNetwork, env_pi
from .propagator import Propagator
from .rng import DEFAULT_SEED, map_blocks
from .structure import BudgetExhausted, check_assumption2, estimate_alpha

PHI_TOL = 1e-10
COLUMN_TOL = 1e-6
UCB_Z = 2.326
N_BATCHES = 20


class PreconditionFailed(ValueError):
    pass


class UnstableDenominator(RuntimeError):
    pass


class CertificateUnavailable(RuntimeError):
    """The estimated contraction rate is not positive."""


class AlphaNotOne(RuntimeError):
    pass


@dataclass(frozen=True, eq=False)
class MixtureAtom:
    u_matrix: np.ndarray
    w_vector: np.ndarray
    U: float


@dataclass(frozen=True, eq=False)
class MixtureAtoms:
    """Independent draws from the mixing measure at ``anchor`` after ``n`` cycles."""

    anchor: int
    n: int
    u: np.ndarray  # (R, d, d)
    w: np.ndarray  # (R, d)
    U: np.ndarray  # (R,)
    phi_converged: np.ndarray  # (R,) product settled below PHI_TOL
    checkpoints: dict = field(default_factory=dict)  # cycles -> w after that many cycles

    def __len__(self) -> int:
        return int(self.U.size)

    def __getitem__(self, i: int) -> MixtureAtom:
        return MixtureAtom(self.u[i], self.w[i], float(self.U[i]))


def _prepare(net: ModulatedNetwork, x: int):
    verdict = check_assumption2(net)
    if not verdict.satisfied:
        names = ", ".join(net.names[i] for i, _ in verdict.violations)
        raise PreconditionFailed(f"ergodicity assumption fails: {names} properly produced, not properly degraded")
    part = verdict.partition
    if part.transient:
        names = ", ".join(net.names[i] for i in part.transient)
        raise PreconditionFailed(
            f"transient species present ({names}); they vanish at stationarity, drop them from the model"
        )
    if net.bursts.max(initial=0) > 1:
        raise PreconditionFailed("stationary mixture needs every burst size to be at most one")
    if not 0 <= x < net.env.size:
        raise PreconditionFailed(f"anchor {x} is not an environment state")
    return ensure_multistate(net), part


def _sre_block(net, x, n, checkpoints, closed_cols, max_extra):
    def run(rng, a, b):
        count = b - a
        d = net.d
        prop = Propagator(net)
        Pi = np.broadcast_to(np.eye(d), (count, d, d)).copy()
        W = np.zeros((count, d))
        delta = np.full(count, np.inf)
        saved = {}
        for k in range(1, n + 1):
            cb = prop.cycle_blocks_batch(simulate_cycles(net.env, x, count, rng))
            W += np.einsum("rij,rj->ri", Pi, cb.D)
            nxt = Pi @ cb.C
            delta = np.abs(nxt - Pi).max(axis=(1, 2))
            Pi = nxt
            if k in checkpoints:
                saved[k] = W.copy()
        if closed_cols.size:
            extra = 0
            todo = np.flatnonzero(delta >= PHI_TOL)
            while todo.size and extra < max_extra:
                cb = prop.cycle_blocks_batch(simulate_cycles(net.env, x, todo.size, rng), with_d=False)
                nxt = Pi[todo] @ cb.C
                delta[todo] = np.abs(nxt - Pi[todo]).max(axis=(1, 2))
                Pi[todo] = nxt
                todo = todo[delta[todo] >= PHI_TOL]
                extra += 1
        U = rng.standard_exponential(count) / net.env.exit_rate(x)
        E, g = prop.kernel(x).batch(U)
        u = E @ Pi
        finish = lambda V: np.clip(np.einsum("rij,rj->ri", E, V) + g, 0.0, None)  # noqa: E731
        return u, finish(W), U, delta < PHI_TOL, {k: finish(v) for k, v in saved.items()}

    return run


def sre_sample(
    net: ModulatedNetwork,
    x: int,
    n: int,
    seed: int = DEFAULT_SEED,
    replicas: int = 10_000,
    threads: int | None = None,
    checkpoints=(),
    max_extra: int | None = None,
) -> MixtureAtoms:
    """``replicas`` approximate draws from the mixing measure at anchor ``x``."""
    if n < 1:
        raise ValueError("need at least one cycle")
    net, part = _prepare(net, x)
    closed_cols = np.array([i for c in part.closed_components for i in c], dtype=np.int64)
    max_extra = 50 * n + 1000 if max_extra is None else max_extra
    parts = map_blocks(
        _sre_block(net, x, n, set(checkpoints), closed_cols, max_extra), seed, replicas, threads=threads
    )
    u = np.concatenate([p[0] for p in parts])
    w = np.concatenate([p[1] for p in parts])
    U = np.concatenate([p[2] for p in parts])
    conv = np.concatenate([p[3] for p in parts])
    cps = {k: np.concatenate([p[4][k] for p in parts]) for k in sorted(set(checkpoints))}
    atoms = MixtureAtoms(x, n, u, w, U, conv, cps)
    for comp in part.closed_components:
        spread = column_spread(atoms, comp)
        if spread > COLUMN_TOL:
            warnings.warn(
                f"closed component columns differ by {spread:.2e} at the stopping point", RuntimeWarning, stacklevel=2
            )
    return atoms


def column_spread(atoms: MixtureAtoms, component) -> float:
    """Largest difference between the columns of ``u`` belonging to one closed component."""
    cols = atoms.u[:, :, list(component)]
    return float(np.abs(cols - cols[:, :, :1]).max()) if cols.size else 0.0


def compose_counts(net: ModulatedNetwork, atoms: MixtureAtoms, counts, rng) -> np.ndarray:
    """``Pois(w) + sum_i Multi(n_i, u e_j(i))`` for every atom."""
    part = check_assumption2(net).partition
    counts = np.atleast_1d(np.asarray(counts if counts is not None else [], dtype=np.int64))
    if counts.size != part.h:
        raise PreconditionFailed(f"need {part.h} closed-component counts, got {counts.size}")
    Z = rng.poisson(atoms.w)
    d = net.d
    for n_i, j in zip(counts, part.representatives):
        if n_i == 0:
            continue
        p = np.clip(atoms.u[:, :, j], 0.0, 1.0)
        s = p.sum(axis=1, keepdims=True)
        p = np.where(s > 1.0, p / s, p)
        full = np.concatenate([p, np.clip(1.0 - p.sum(axis=1, keepdims=True), 0.0, 1.0)], axis=1)
        Z += rng.multinomial(int(n_i), full)[:, :d]
    return Z


def stationary_sample_Z(
    net: ModulatedNetwork,
    x: int,
    counts=None,
    n: int = 30,
    seed: int = DEFAULT_SEED,
    replicas: int = 10_000,
    threads: int | None = None,
) -> np.ndarray:
    """Draws of the counts from the stationary law conditioned on ``X = x``."""
    atoms = sre_sample(net, x, n, seed, replicas, threads)
    from .rng import stream

    return compose_counts(net, atoms, counts, stream(seed, 1 << 40))


# ----------------------------------------------------------------------------
# error certificate


@dataclass(frozen=True)
class ErrorCertificate:
    anchor: int
    M_hat: float
    M_se: float
    r_hat: float
    r_low: float
    r_high: float
    mean_C_norm: float

    @property
    def available(self) -> bool:
        return self.r_hat > 0 and math.isfinite(self.r_hat)

    def bound(self, n: int) -> float:
        if not self.available:
            raise CertificateUnavailable(f"r_hat = {self.r_hat:.4g} <= 0")
        return self.M_hat * math.exp(-self.r_hat * n)

    def n_for(self, eps: float) -> int:
        """Smallest ``n >= 1`` with ``bound(n) < eps``."""
        if not self.available:
            raise CertificateUnavailable(f"r_hat = {self.r_hat:.4g} <= 0")
        if self.M_hat < eps:
            return 1
        return max(1, math.floor(math.log(self.M_hat / eps) / self.r_hat) + 1)

    def table(self, ns) -> list[tuple[int, float]]:
        return [(int(k), self.bound(int(k))) for k in ns]


def _cycle_stats(net, x, count, seed, threads, key_offset=0):
    """Per-cycle ``(C, D)`` for ``count`` independent cycles at anchor ``x``."""

    def run(rng, a, b):
        cb = Propagator(net).cycle_blocks_batch(simulate_cycles(net.env, x, b - a, rng))
        return cb.C, cb.D

    parts = map_blocks(run, seed, count, threads=threads, key_offset=key_offset)
    return np.concatenate([p[0] for p in parts]), np.concatenate([p[1] for p in parts])


def error_certificate(
    net: ModulatedNetwork,
    x: int,
    seed: int = DEFAULT_SEED,
    replicas: int = 10_000,
    threads: int | None = None,
    n_atoms: int | None = None,
) -> ErrorCertificate:
    """Estimate ``M`` and ``r`` so that the sampler's Wasserstein error is below ``M exp(-r n)``."""
    net_m, part = _prepare(net, x)
    if part.h:
        raise PreconditionFailed("the certificate needs every species properly produced")
    try:
        est = estimate_alpha(net_m, x, alpha_max=1, replicas=replicas, seed=seed, threads=threads)
    except BudgetExhausted as exc:
        raise AlphaNotOne(f"one cycle does not contract at anchor {x}: {exc.table[0]}") from exc
    if est.alpha != 1:
        raise AlphaNotOne(f"alpha = {est.alpha} at anchor {x}")
    C, _ = _cycle_stats(net_m, x, replicas, seed, threads, key_offset=1 << 20)
    norms = C.sum(axis=1).max(axis=1)  # matrix 1-norm: largest column sum
    mean = float(norms.mean())
    se = float(norms.std(ddof=1) / math.sqrt(len(norms)))
    r_hat = -math.log(mean) if mean > 0 else math.inf
    r_low = -math.log(min(mean + 1.96 * se, 1.0)) if mean + 1.96 * se < 1 else 0.0
    r_high = -math.log(mean - 1.96 * se) if mean - 1.96 * se > 0 else math.inf
    if n_atoms is None:
        n_atoms = int(min(500, max(20, math.ceil(30.0 / r_hat)))) if r_hat > 0 else 500
    atoms = sre_sample(net, x, n_atoms, seed + 1, replicas, threads)
    wn = atoms.w.sum(axis=1)
    return ErrorCertificate(
        anchor=x,
        M_hat=float(wn.mean()),
        M_se=float(wn.std(ddof=1) / math.sqrt(len(wn))),
        r_hat=r_hat,
        r_low=r_low,
        r_high=r_high,
        mean_C_norm=mean,
    )


def wasserstein_profile(atoms: MixtureAtoms, ns, reference: int | None = None) -> list[tuple[int, float]]:
    """Empirical W1 between the checkpoint populations and a reference population.

    Uses exact one-dimensional W1 per species and sums them, which is exact for
    ``d = 1`` and a lower bound on the L1 Wasserstein distance otherwise.
    """
    ref = atoms.checkpoints.get(reference, atoms.w) if reference is not None else atoms.w
    out = []
    for k in ns:
        v = atoms.checkpoints[k]
        out.append((int(k), float(sum(wasserstein_distance(v[:, i], ref[:, i]) for i in range(v.shape[1])))))
    return out


# ----------------------------------------------------------------------------
# factorial moments


@dataclass(frozen=True)
class MomentTable:
    q: tuple[int, ...]
    m: tuple[float, ...]
    se: tuple[float, ...]
    method: str


def _holding_moments(A: float, b: float, rate: float, q_max: int) -> np.ndarray:
    """``E[a^i g^k]`` for ``a = exp(-kappa U)``, ``g = G(U)``, ``U ~ Exp(rate)``; returns (q+1, q+1)."""
    kappa = -A
    out = np.zeros((q_max + 1, q_max + 1))

    def g(u):
        return b * (-math.expm1(-kappa * u)) / kappa if kappa > 0 else b * u

    for i in range(q_max + 1):
        for k in range(q_max + 1 - i):
            f = lambda u, i=i, k=k: rate * math.exp(-rate * u) * math.exp(-kappa * u * i) * g(u) ** k  # noqa: E731
            out[i, k] = integrate.quad(f, 0.0, math.inf, limit=200, epsabs=0.0, epsrel=1e-12)[0]
    return out


def _w_moments(C: np.ndarray, D: np.ndarray, q_max: int) -> tuple[np.ndarray, np.ndarray]:
    """Moments of the fixed point ``W ~ C W + D`` and the UCB of ``E[C^q]`` per order."""
    mw = np.zeros(q_max + 1)
    mw[0] = 1.0
    ucb = np.zeros(q_max + 1)
    for q in range(1, q_max + 1):
        cq = C**q
        ecq = cq.mean()
        ucb[q] = ecq + UCB_Z * cq.std(ddof=1) / math.sqrt(C.size)
        s = sum(math.comb(q, i) * np.mean(C**i * D ** (q - i)) * mw[i] for i in range(q))
        mw[q] = s / (1.0 - ecq) if ecq < 1.0 else math.inf
    return mw, ucb


def _independent_moments(C, D, U, A: float, b: float, q_max: int) -> np.ndarray:
    kappa = -A
    a = np.exp(-kappa * U)
    gU = b * (-np.expm1(-kappa * U)) / kappa if kappa > 0 else b * U
    Dt = gU * (1.0 - C) + a * D
    m = np.zeros(q_max + 1)
    m[0] = 1.0
    for q in range(1, q_max + 1):
        s = sum(math.comb(q, i) * np.mean(C**i * Dt ** (q - i)) * m[i] for i in range(q))
        m[q] = s / (1.0 - np.mean(C**q))
    return m


def factorial_moments(
    net: ModulatedNetwork,
    q_max: int = 3,
    n_cycles: int = 100_000,
    seed: int = DEFAULT_SEED,
    pi=None,
    method: str = "exact",
    threads: int | None = None,
    n: int = 40,
    replicas: int = 20_000,
) -> MomentTable:
    """Stationary factorial moments ``E[Z(Z-1)...(Z-q+1)]`` for ``q <= q_max``.

    ``exact`` (one species) solves the moment recursion of the fixed point
    ``W ~ C W + D`` from simulated cycles and integrates the final holding
    time exactly. ``independent`` applies the single-step recursion on the
    shifted increment, which treats the holding time as independent of the
    fixed point and so is exact only for ``q = 1``. ``mc`` averages ``w^q``
    over mixture atoms and works for any number of species; for ``d > 1`` it
    returns the joint moment ``E[prod_i (Z_i)_q]``.
    """
    pi = env_pi(net) if pi is None else np.asarray(pi, dtype=float)
    base_net = net
    net, _ = _prepare(net, 0)
    if method not in {"exact", "independent", "mc"}:
        raise ValueError(f"unknown method {method!r}")
    if method != "mc" and net.d != 1:
        raise PreconditionFailed("the moment recursion needs a single species; use method='mc'")
    if net.env.size != base_net.env.size:
        pi = np.full(net.env.size, 1.0 / net.env.size)  # clones share the single state equally
    mod = Propagator(net).mod
    per_batch = np.zeros((N_BATCHES, q_max + 1))
    for x in range(net.env.size):
        if pi[x] == 0:
            continue
        if method == "mc":
            atoms = sre_sample(base_net if base_net.env.size == net.env.size else net, x, n, seed + x, replicas, threads)
            w = atoms.w.sum(axis=1) if net.d == 1 else atoms.w
            chunks = np.array_split(np.arange(len(atoms)), N_BATCHES)
            for bi, idx in enumerate(chunks):
                vals = w[idx]
                per_batch[bi] += pi[x] * np.array(
                    [np.mean(np.prod(np.atleast_2d(vals.T).T ** q, axis=1)) for q in range(q_max + 1)]
                )
            continue
        C, D = _cycle_stats(net, x, n_cycles, seed, threads, key_offset=x << 20)
        C, D = C[:, 0, 0], D[:, 0]
        A, b = float(mod.A[x][0, 0]), float(mod.B[x][0])
        hold = _holding_moments(A, b, net.env.exit_rate(x), q_max) if method == "exact" else None
        if method == "exact":
            _, ucb = _w_moments(C, D, q_max)
            if np.any(ucb[1:] >= 1.0):
                raise UnstableDenominator(f"E[C^q] may reach 1 at anchor {x}: ucb {ucb[1:].round(6).tolist()}")
        U_all = None
        if method == "independent":
            from .rng import stream

            U_all = stream(seed, (x << 20) + 7).standard_exponential(C.size) / net.env.exit_rate(x)
        for bi, idx in enumerate(np.array_split(np.arange(C.size), N_BATCHES)):
            if method == "exact":
                mw, _ = _w_moments(C[idx], D[idx], q_max)
                mq = np.array(
                    [sum(math.comb(q, i) * hold[i, q - i] * mw[i] for i in range(q + 1)) for q in range(q_max + 1)]
                )
            else:
                mq = _independent_moments(C[idx], D[idx], U_all[idx], A, b, q_max)
            per_batch[bi] += pi[x] * mq
    m = per_batch.mean(axis=0)
    se = per_batch.std(axis=0, ddof=1) / math.sqrt(N_BATCHES)
    m[0], se[0] = 1.0, 0.0
    return MomentTable(tuple(range(q_max + 1)), tuple(float(v) for v in m), tuple(float(v) for v in se), method)
