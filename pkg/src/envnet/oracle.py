"""Master-equation ground truth on a truncated joint state space."""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
import scipy.sparse as sp
from scipy.sparse.csgraph import breadth_first_order, connected_components
from scipy.sparse.linalg import spsolve
from scipy.stats import poisson

from .envpath import EnvPath
from .model import ModulatedNetwork
from .rng import DEFAULT_SEED

TAIL_TOL = 1e-10
RESIDUAL_TOL = 1e-9
DENSE_LIMIT = 5000
BOUNDARY_TOL = 1e-6


class OverflowTooLarge(RuntimeError):
    pass


@dataclass(frozen=True, eq=False)
class TruncatedJointSpace:
    """States ``(x, z)`` with ``0 <= z <= cap``, ordered by ``x`` then ``z`` lexicographically."""

    n_env: int
    cap: tuple[int, ...]

    @property
    def box(self) -> tuple[int, ...]:
        return tuple(c + 1 for c in self.cap)

    @property
    def n_z(self) -> int:
        return math.prod(self.box)

    @property
    def size(self) -> int:
        return self.n_env * self.n_z

    @property
    def overflow(self) -> int:
        return self.size

    def index(self, x: int, z) -> int:
        return int(x) * self.n_z + int(np.ravel_multi_index(tuple(int(v) for v in z), self.box))

    def state(self, k: int) -> tuple[int, tuple[int, ...]]:
        x, r = divmod(int(k), self.n_z)
        return x, tuple(int(v) for v in np.unravel_index(r, self.box))

    def lattice(self) -> np.ndarray:
        """All ``z`` in the box, shape ``(n_z, d)``, in index order."""
        grids = np.indices(self.box).reshape(len(self.box), -1).T
        return grids.astype(np.int64)

    @classmethod
    def for_network(cls, net: ModulatedNetwork, cap) -> "TruncatedJointSpace":
        cap = np.broadcast_to(np.asarray(cap, dtype=np.int64), (net.d,))
        return cls(net.env.size, tuple(int(c) for c in cap))


def _channels(net: ModulatedNetwork):
    """``(x, rate per lattice point, stoichiometry)`` for every live reaction channel."""
    d = net.d
    for x in range(net.env.size):
        for j in range(d):
            r = net.production_rates[x, j]
            if r > 0:
                v = np.zeros(d, dtype=np.int64)
                v[j] = net.bursts[j]
                yield x, r, None, v
        for i in range(d):
            for j in range(d):
                r = net.conversion_rates[x, i, j]
                if r > 0:
                    v = np.zeros(d, dtype=np.int64)
                    v[i], v[j] = -1, 1
                    yield x, r, i, v
            r = net.degradation_rates[x, i]
            if r > 0:
                v = np.zeros(d, dtype=np.int64)
                v[i] = -1
                yield x, r, i, v


def build_joint_generator(net: ModulatedNetwork, space: TruncatedJointSpace, overflow: bool = True) -> sp.csr_matrix:
    """Row generator on the truncated space.

    With ``overflow`` set, moves that leave the box go to an extra absorbing
    state at index ``space.size``. Without it they are dropped, which gives
    the reflecting truncation used for stationary solves.
    """
    Z = space.lattice()
    nz = space.n_z
    cap = np.array(space.cap)
    box = space.box
    rows, cols, vals = [], [], []
    base = np.arange(nz)
    Q = net.env.generator
    for x in range(space.n_env):
        for y in range(space.n_env):
            if x != y and Q[x, y] > 0:
                rows.append(x * nz + base)
                cols.append(y * nz + base)
                vals.append(np.full(nz, Q[x, y]))
    for x, rate, src, v in _channels(net):
        r = np.full(nz, rate) if src is None else rate * Z[:, src]
        live = r > 0
        dest = Z + v
        inside = np.all((dest >= 0) & (dest <= cap), axis=1)
        ok = live & inside
        rows.append(x * nz + base[ok])
        cols.append(x * nz + np.ravel_multi_index(tuple(dest[ok].T), box))
        vals.append(r[ok])
        out = live & ~inside
        if overflow and out.any():
            rows.append(x * nz + base[out])
            cols.append(np.full(int(out.sum()), space.overflow))
            vals.append(r[out])
    n = space.size + (1 if overflow else 0)
    rows = np.concatenate(rows) if rows else np.zeros(0, np.int64)
    cols = np.concatenate(cols) if cols else np.zeros(0, np.int64)
    vals = np.concatenate(vals) if vals else np.zeros(0)
    off = sp.coo_matrix((vals, (rows, cols)), shape=(n, n)).tocsr()
    off.sum_duplicates()
    diag = -np.asarray(off.sum(axis=1)).ravel()
    return (off + sp.diags(diag)).tocsr()


def _initial_vector(n: int, initial) -> np.ndarray:
    if np.isscalar(initial):
        p = np.zeros(n)
        p[int(initial)] = 1.0
        return p
    p = np.asarray(initial, dtype=float)
    if p.size == n - 1:
        p = np.append(p, 0.0)
    return p.copy()


def _uniformized_step(GT: sp.csr_matrix, lam: float, p: np.ndarray, tau: float, tol: float) -> np.ndarray:
    mu = lam * tau
    n_max = int(poisson.ppf(1.0 - tol, mu)) + 2 if mu > 0 else 0
    weights = poisson.pmf(np.arange(n_max + 1), mu)
    term = p
    out = weights[0] * term
    for k in range(1, n_max + 1):
        term = term + (GT @ term) / lam
        out += weights[k] * term
    return out


def transient_pmf(G: sp.spmatrix, initial, t: float, tol: float = TAIL_TOL) -> np.ndarray:
    """Law at time ``t`` of the chain with row generator ``G``, by stepped uniformization."""
    G = sp.csr_matrix(G)
    n = G.shape[0]
    p = _initial_vector(n, initial)
    if t <= 0:
        return p
    lam = float(max(-G.diagonal().min(), 1e-300))
    GT = G.T.tocsr()
    steps = max(1, int(math.ceil(lam * t / 30.0)))
    tau = t / steps
    for _ in range(steps):
        p = _uniformized_step(GT, lam, p, tau, tol / steps)
    return np.clip(p, 0.0, None)


@dataclass(frozen=True, eq=False)
class StationaryResult:
    space: TruncatedJointSpace
    pmf: np.ndarray  # over space.size (no overflow slot)
    boundary_mass: float
    residual: float

    def env_marginal(self) -> np.ndarray:
        return self.pmf.reshape(self.space.n_env, -1).sum(axis=1)

    def conditional(self, x: int) -> np.ndarray:
        """``P(Z = z | X = x)`` on the box, shaped like the lattice."""
        block = self.pmf.reshape(self.space.n_env, -1)[x]
        s = block.sum()
        return (block / s if s > 0 else block).reshape(self.space.box)

    def z_marginal(self) -> np.ndarray:
        return self.pmf.reshape(self.space.n_env, -1).sum(axis=0).reshape(self.space.box)


def _closed_class(G: sp.csr_matrix, start: int) -> np.ndarray:
    reach = np.sort(breadth_first_order(G, start, directed=True, return_predecessors=False))
    sub = G[reach][:, reach]
    n_comp, labels = connected_components(sub, directed=True, connection="strong")
    adj = sub.tocoo()
    leaves = np.ones(n_comp, dtype=bool)
    crossing = (labels[adj.row] != labels[adj.col]) & (adj.data > 0)
    leaves[labels[adj.row[crossing]]] = False
    closed = np.flatnonzero(leaves)
    if closed.size != 1:
        raise RuntimeError(f"{closed.size} closed classes reachable from the initial state")
    return reach[labels == closed[0]]


def stationary_pmf(
    net: ModulatedNetwork,
    space: TruncatedJointSpace,
    initial=None,
    boundary_tol: float = BOUNDARY_TOL,
) -> StationaryResult:
    """Stationary law of the reflecting truncation on the class reached from ``initial``.

    ``initial`` is ``(x, z)``; it selects the conservation class when closed
    components hold a fixed number of molecules. Mass sitting on the cap
    faces is reported as ``boundary_mass``; above ``boundary_tol`` the cap is
    too small and :class:`OverflowTooLarge` is raised.
    """
    G = build_joint_generator(net, space, overflow=False)
    x0, z0 = (0, (0,) * net.d) if initial is None else initial
    cls = _closed_class(G, space.index(x0, z0))
    sub = G[cls][:, cls]
    m = cls.size
    A = sub.T.tolil()
    A[m - 1, :] = np.ones(m)
    rhs = np.zeros(m)
    rhs[-1] = 1.0
    if m < DENSE_LIMIT:
        sol = np.linalg.solve(A.toarray(), rhs)
    else:
        sol = spsolve(A.tocsc(), rhs)
    sol = np.clip(sol, 0.0, None)
    sol /= sol.sum()
    pmf = np.zeros(space.size)
    pmf[cls] = sol
    residual = float(np.max(np.abs(sub.T @ sol))) if m else 0.0
    if residual > RESIDUAL_TOL:
        raise RuntimeError(f"stationary residual {residual:.3e} above {RESIDUAL_TOL}")
    Z = space.lattice()
    on_face = np.any(Z == np.array(space.cap), axis=1)
    boundary = float(pmf.reshape(space.n_env, -1)[:, on_face].sum())
    if boundary > boundary_tol:
        raise OverflowTooLarge(f"stationary mass {boundary:.3e} on the cap faces exceeds {boundary_tol}")
    return StationaryResult(space, pmf, boundary, residual)


def path_transient_pmf(net: ModulatedNetwork, path: EnvPath, t: float, z0, cap, tol: float = TAIL_TOL):
    """Law of ``Z(t)`` with the environment frozen to ``path``; returns ``(pmf on box, overflow)``."""
    d = net.d
    single = TruncatedJointSpace(1, tuple(int(c) for c in np.broadcast_to(np.asarray(cap), (d,))))
    gens = {}
    p = np.zeros(single.size + 1)
    p[single.index(0, z0)] = 1.0
    for x, h in path.truncate(t).segments:
        if x not in gens:
            frozen = net.with_environment(_one_state(net), [x])
            gens[x] = build_joint_generator(frozen, single)
        p = transient_pmf(gens[x], p, h, tol)
    return p[:-1].reshape(single.box), float(p[-1])


def _one_state(net: ModulatedNetwork):
    from .model import EnvironmentSpec

    return EnvironmentSpec(states=("frozen",), generator=np.zeros((1, 1)), pi=np.ones(1))


def default_caps(net: ModulatedNetwork, horizon: float, x0: int = 0, z0=None, seed: int = DEFAULT_SEED, n: int = 2000):
    """Per-species cap ``ceil(mean + 10 sd)`` from a pilot simulation to ``horizon``."""
    from .finite_time import ssa_batch

    z0 = np.zeros(net.d, dtype=np.int64) if z0 is None else np.asarray(z0)
    Z, _ = ssa_batch(net, x0, z0, horizon, n, seed)
    caps = np.ceil(Z.mean(axis=0) + 10.0 * Z.std(axis=0)).astype(int)
    return np.maximum(caps, np.maximum(z0, 1) + int(net.bursts.max(initial=1)) + 4)


def tv_distance(p, q) -> float:
    """Half the L1 distance between two pmfs, padding the smaller lattice with zeros."""
    p = np.asarray(p, dtype=float)
    q = np.asarray(q, dtype=float)
    if p.ndim != q.ndim:
        raise ValueError("pmfs must have the same dimension")
    shape = tuple(max(a, b) for a, b in zip(p.shape, q.shape))
    pp = np.zeros(shape)
    qq = np.zeros(shape)
    pp[tuple(slice(0, s) for s in p.shape)] = p
    qq[tuple(slice(0, s) for s in q.shape)] = q
    return 0.5 * float(np.abs(pp - qq).sum())


def empirical_pmf(samples: np.ndarray, shape=None) -> np.ndarray:
    """Histogram of integer vectors ``samples`` (n, d) on a box (clipped to ``shape`` if given)."""
    samples = np.atleast_2d(np.asarray(samples, dtype=np.int64))
    top = samples.max(axis=0) + 1 if samples.size else np.ones(samples.shape[1], dtype=int)
    shape = tuple(int(s) for s in (top if shape is None else np.maximum(shape, top)))
    flat = np.ravel_multi_index(tuple(samples.T), shape)
    return np.bincount(flat, minlength=math.prod(shape)).reshape(shape) / max(len(samples), 1)
