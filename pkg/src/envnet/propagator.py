"""Fundamental matrices of the per-molecule dynamics along environment paths.

For a constant environment state ``x`` held for time ``h`` the survival /
conversion probabilities of a single molecule are ``E = exp(A(x) h)`` and the
expected surviving production is ``g = int_0^h exp(A(x) u) B(x) du``. Along a
path these compose as

    phi[a, c] = phi[b, c] @ phi[a, b]
    w[a, c]   = phi[b, c] @ w[a, b] + w[b, c]

``A(x)`` is the transpose of a sub-generator, so ``exp(A h)`` is computed by
uniformization: with ``lam = max |A_ii|`` and ``P = I + A / lam`` (nonnegative,
column sums <= 1),

    exp(A h) = sum_n Pois(n; lam h) P^n
    g(h)     = (1 / lam) sum_n P(Pois(lam h) > n) P^n B

The second series is the top-right block of ``exp([[A, B], [0, 0]] h)`` under
the same uniformization, so both are nonnegative term by term. Large
``lam h`` is split by scaling and squaring, which also preserves signs.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.special import gammaln

from .envpath import CycleBatch, EnvPath, ReturnIndex
from .model import ModulatedNetwork, Modulation, build_modulation

TAIL_TOL = 1e-13
MAX_SERIES_MEAN = 32.0


class SpanOutOfRange(ValueError):
    pass


def _series_length(mu_max: float) -> int:
    """Terms needed so the neglected Poisson(mu_max) tail is below ``TAIL_TOL``."""
    if mu_max <= 0:
        return 1
    n = int(mu_max + 12.0 * np.sqrt(mu_max) + 40)
    k = np.arange(n + 1)
    logp = k * np.log(mu_max) - mu_max - gammaln(k + 1)
    tail = np.cumsum(np.exp(logp)[::-1])[::-1]  # tail[k] = P(N >= k) within the grid
    # margin below TAIL_TOL so the summed survival terms of g are covered too
    ok = np.flatnonzero((tail < TAIL_TOL * 1e-3) & (k > mu_max))
    return int(ok[0]) + 1 if ok.size else n + 1


def _poisson_weights(mu: np.ndarray, n_terms: int) -> tuple[np.ndarray, np.ndarray]:
    """``pmf[i, n] = P(Pois(mu_i) = n)`` and ``sf[i, n] = P(Pois(mu_i) > n)`` for ``n < n_terms``."""
    k = np.arange(n_terms)
    with np.errstate(divide="ignore", invalid="ignore"):
        logp = k[None, :] * np.log(mu[:, None]) - mu[:, None] - gammaln(k + 1)[None, :]
    pmf = np.exp(logp)
    zero = mu == 0
    if np.any(zero):
        pmf[zero] = 0.0
        pmf[zero, 0] = 1.0
    sf = np.cumsum(pmf[:, ::-1], axis=1)[:, ::-1]  # P(N >= n) on the grid
    sf = np.concatenate([sf[:, 1:], np.zeros((mu.size, 1))], axis=1)
    return pmf, sf


class SubgeneratorExp:
    """Cached uniformization kernel for one pair ``(A, B)``."""

    def __init__(self, A: np.ndarray, B: np.ndarray | None = None):
        A = np.asarray(A, dtype=float)
        self.d = A.shape[0]
        self.A = A
        self.B = np.zeros(self.d) if B is None else np.asarray(B, dtype=float)
        self.lam = float(np.max(-np.diag(A))) if self.d else 0.0
        self._diagonal = not np.any(A - np.diag(np.diag(A)))
        self._powers = np.eye(self.d)[None]
        self._powers_B = self.B[None].copy()
        if self.lam > 0:
            self.P = np.eye(self.d) + A / self.lam
            np.clip(self.P, 0.0, None, out=self.P)
        else:
            self.P = np.eye(self.d)

    def _ensure(self, n: int) -> None:
        have = self._powers.shape[0]
        if have >= n:
            return
        pw = [self._powers[-1]]
        pb = [self._powers_B[-1]]
        for _ in range(n - have):
            pw.append(self.P @ pw[-1])
            pb.append(self.P @ pb[-1])
        self._powers = np.concatenate([self._powers, np.array(pw[1:])])
        self._powers_B = np.concatenate([self._powers_B, np.array(pb[1:])])

    def batch(self, hs, with_g: bool = True) -> tuple[np.ndarray, np.ndarray]:
        """``(E, g)`` with ``E[k] = exp(A h_k)`` and ``g[k] = int_0^{h_k} exp(A u) B du``."""
        hs = np.atleast_1d(np.asarray(hs, dtype=float))
        n = hs.size
        d = self.d
        if np.any(hs < 0):
            raise ValueError("negative segment length")
        if self.lam == 0.0 or n == 0:
            E = np.broadcast_to(np.eye(d), (n, d, d)).copy()
            g = hs[:, None] * self.B[None, :]
            return E, g
        if self._diagonal:
            # no conversions: closed form, same values the series converges to
            a = -np.diag(self.A)
            ah = hs[:, None] * a[None, :]
            decay = np.exp(-ah)
            E = np.zeros((n, d, d))
            E[:, np.arange(d), np.arange(d)] = decay
            with np.errstate(divide="ignore", invalid="ignore"):
                frac = np.where(a > 0, -np.expm1(-ah) / np.where(a > 0, a, 1.0), hs[:, None])
            return E, frac * self.B[None, :]
        mu = self.lam * hs
        squarings = np.zeros(n, dtype=int)
        big = mu > MAX_SERIES_MEAN
        if np.any(big):
            squarings[big] = np.ceil(np.log2(mu[big] / MAX_SERIES_MEAN)).astype(int)
        mu_red = mu / np.exp2(squarings)
        terms = _series_length(float(mu_red.max()))
        self._ensure(terms)
        pmf, sf = _poisson_weights(mu_red, terms)
        E = np.einsum("kn,nij->kij", pmf, self._powers[:terms])
        g = np.einsum("kn,ni->ki", sf, self._powers_B[:terms]) / self.lam if with_g else np.zeros((n, d))
        for r in range(int(squarings.max(initial=0))):
            sel = squarings > r
            Es = E[sel]
            if with_g:
                g[sel] = np.einsum("kij,kj->ki", Es, g[sel]) + g[sel]
            E[sel] = Es @ Es
        return E, g

    def expm(self, h: float) -> np.ndarray:
        return self.batch([h], with_g=False)[0][0]

    def integral(self, h: float) -> np.ndarray:
        return self.batch([h])[1][0]


def _check_subgenerator(A: np.ndarray, tol: float = 1e-12) -> None:
    off = A - np.diag(np.diag(A))
    if np.any(off < 0):
        raise ValueError("A must have nonnegative off-diagonal entries")
    scale = max(1.0, float(np.max(np.abs(A))) if A.size else 1.0)
    if np.any(A.sum(axis=0) > tol * scale):
        raise ValueError("A must have nonpositive column sums")


def expm_subgen(A, h: float) -> np.ndarray:
    """``exp(A h)`` for the transpose ``A`` of a sub-generator, by uniformization."""
    A = np.asarray(A, dtype=float)
    _check_subgenerator(A)
    if h < 0:
        raise ValueError("h must be nonnegative")
    return SubgeneratorExp(A).expm(h)


@dataclass(frozen=True, eq=False)
class SegmentPropagator:
    E: np.ndarray
    g: np.ndarray


@dataclass(frozen=True, eq=False)
class PathPropagator:
    """``phi = Phi(u, t)`` and ``w = int_u^t Phi(s, t) B_X(s) ds`` over ``span = (u, t)``."""

    phi: np.ndarray
    w: np.ndarray
    span: tuple[float, float]

    def then(self, later: "PathPropagator") -> "PathPropagator":
        """Compose with a propagator over the following span."""
        return PathPropagator(
            later.phi @ self.phi,
            later.phi @ self.w + later.w,
            (self.span[0], later.span[1]),
        )


@dataclass(frozen=True, eq=False)
class CycleBlocks:
    anchor: int
    C: np.ndarray  # (K, d, d)
    D: np.ndarray  # (K, d)

    def __len__(self) -> int:
        return int(self.C.shape[0])

    @property
    def blocks(self) -> list[tuple[np.ndarray, np.ndarray]]:
        return list(zip(self.C, self.D))


class Propagator:
    """Propagation kernels for one network, one cached uniformization per environment state."""

    def __init__(self, net: ModulatedNetwork, modulation: Modulation | None = None):
        self.net = net
        self.mod = build_modulation(net) if modulation is None else modulation
        self.d = net.d
        self._kernels: dict[int, SubgeneratorExp] = {}

    def kernel(self, x: int) -> SubgeneratorExp:
        k = self._kernels.get(x)
        if k is None:
            k = self._kernels[x] = SubgeneratorExp(self.mod.A[x], self.mod.B[x])
        return k

    def segment(self, x: int, h: float) -> SegmentPropagator:
        E, g = self.kernel(int(x)).batch([h])
        return SegmentPropagator(E[0], np.clip(g[0], 0.0, None))

    def segments(self, states, hs, with_g: bool = True) -> tuple[np.ndarray, np.ndarray]:
        """Batched ``(E, g)`` for segments in arbitrary states."""
        states = np.asarray(states, dtype=np.int64)
        hs = np.asarray(hs, dtype=float)
        E = np.empty((states.size, self.d, self.d))
        g = np.zeros((states.size, self.d))
        for x in np.unique(states):
            sel = states == x
            e, gg = self.kernel(int(x)).batch(hs[sel], with_g=with_g)
            E[sel] = e
            g[sel] = gg
        return E, g

    def segment_G(self, x: int, h: float) -> np.ndarray:
        return self.segment(x, h).g

    def pieces(self, path: EnvPath, u: float, t: float) -> tuple[np.ndarray, np.ndarray]:
        """States and lengths of the path restricted to ``[u, t]``, in time order."""
        total = path.total_time
        if u < 0 or t < u or t > total * (1 + 1e-12) + 1e-300:
            raise SpanOutOfRange(f"span [{u}, {t}] outside [0, {total}]")
        if t == u or not len(path):
            return np.zeros(0, dtype=np.int64), np.zeros(0)
        starts = path.jump_times
        ends = starts + path.holding
        lo = np.maximum(starts, u)
        hi = np.minimum(ends, t)
        keep = hi > lo
        return path.states[keep], (hi - lo)[keep]

    def propagate(self, path: EnvPath, u: float, t: float) -> PathPropagator:
        """``Phi(u, t)`` and the accumulated production over ``[u, t]`` along ``path``."""
        states, lengths = self.pieces(path, u, t)
        phi = np.eye(self.d)
        w = np.zeros(self.d)
        if states.size:
            E, g = self.segments(states, lengths)
            for k in range(states.size):
                phi = E[k] @ phi
                w = E[k] @ w + g[k]
        return PathPropagator(phi, np.clip(w, 0.0, None), (float(u), float(t)))

    def cycle_blocks(self, path: EnvPath, ret: ReturnIndex, K: int) -> CycleBlocks:
        if len(ret) < K + 1:
            raise ValueError(f"need {K + 1} return times, have {len(ret)}")
        C = np.empty((K, self.d, self.d))
        D = np.empty((K, self.d))
        for k in range(K):
            p = self.propagate(path, float(ret.taus[k]), float(ret.taus[k + 1]))
            C[k], D[k] = p.phi, p.w
        return CycleBlocks(ret.anchor, C, D)

    def cycle_blocks_batch(self, batch: CycleBatch, with_d: bool = True) -> CycleBlocks:
        """Cycle blocks for every cycle of a :class:`CycleBatch`, vectorized over cycles."""
        C = np.broadcast_to(np.eye(self.d), (batch.count, self.d, self.d)).copy()
        D = np.zeros((batch.count, self.d))
        for ids, states, hs in batch.positions:
            E, g = self.segments(states, hs, with_g=with_d)
            C[ids] = E @ C[ids]
            if with_d:
                D[ids] = np.einsum("kij,kj->ki", E, D[ids]) + g
        return CycleBlocks(batch.anchor, C, D)


def segment_G(net: ModulatedNetwork, x: int, h: float) -> np.ndarray:
    """``G_x(h) = int_0^h exp(A(x) u) B(x) du``."""
    return Propagator(net).segment_G(x, h)


def propagate(net: ModulatedNetwork, path: EnvPath, u: float, t: float) -> PathPropagator:
    return Propagator(net).propagate(path, u, t)


def cycle_blocks(net: ModulatedNetwork, path: EnvPath, ret: ReturnIndex, K: int) -> CycleBlocks:
    return Propagator(net).cycle_blocks(path, ret, K)
