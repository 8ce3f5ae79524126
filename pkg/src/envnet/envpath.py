"""Environment trajectories, return times and renewal cycles."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .model import EnvironmentSpec, ModelError, ModulatedNetwork
from .rng import stream


class AbsorbingState(ModelError):
    pass


class NotSingleton(ModelError):
    pass


@dataclass(frozen=True, eq=False)
class EnvPath:
    """Piecewise-constant environment trajectory on ``[0, total_time]``.

    Segment ``k`` occupies ``[T_k, T_k + holding[k])`` in state ``states[k]``.
    ``final_state`` is the state entered exactly at ``total_time`` when the
    path was stopped at a jump (as for return-time paths), else ``None``.
    """

    initial_state: int
    states: np.ndarray
    holding: np.ndarray
    final_state: int | None = None

    def __post_init__(self):
        s = np.asarray(self.states, dtype=np.int64)
        h = np.asarray(self.holding, dtype=float)
        if s.shape != h.shape:
            raise ValueError("states and holding times must align")
        if h.size and np.any(h <= 0):
            raise ValueError("holding times must be positive")
        if s.size > 1 and np.any(s[1:] == s[:-1]):
            raise ValueError("consecutive segments must change state")
        s.setflags(write=False)
        h.setflags(write=False)
        object.__setattr__(self, "states", s)
        object.__setattr__(self, "holding", h)

    @property
    def total_time(self) -> float:
        return float(self.holding.sum())

    @property
    def jump_times(self) -> np.ndarray:
        """Segment start times ``T_0 = 0 < T_1 < ...``."""
        return np.concatenate(([0.0], np.cumsum(self.holding)[:-1])) if self.holding.size else np.zeros(0)

    @property
    def segments(self) -> list[tuple[int, float]]:
        return list(zip(self.states.tolist(), self.holding.tolist()))

    def __len__(self) -> int:
        return int(self.states.size)

    def segment_index(self, t: float) -> int:
        """Index ``k`` with ``T_k <= t < T_{k+1}``; the last segment owns ``total_time``."""
        if not self.states.size:
            raise ValueError("empty path")
        k = int(np.searchsorted(self.jump_times, t, side="right")) - 1
        return min(max(k, 0), self.states.size - 1)

    def state_at(self, t: float) -> int:
        if not self.states.size:
            return self.initial_state
        return int(self.states[self.segment_index(t)])

    def truncate(self, t: float) -> "EnvPath":
        """The path restricted to ``[0, t]``."""
        if t >= self.total_time:
            return self
        ends = np.cumsum(self.holding)
        k = int(np.searchsorted(ends, t, side="left"))
        starts = ends - self.holding
        holding = self.holding[: k + 1].copy()
        holding[-1] = t - starts[k]
        if holding[-1] <= 0:
            holding = holding[:-1]
            return EnvPath(self.initial_state, self.states[:k], holding, int(self.states[k]))
        return EnvPath(self.initial_state, self.states[: k + 1], holding)

    def to_rows(self) -> list[tuple[float, int, float]]:
        return list(zip(self.jump_times.tolist(), self.states.tolist(), self.holding.tolist()))

    @classmethod
    def from_rows(cls, rows) -> "EnvPath":
        rows = list(rows)
        states = [int(r[1]) for r in rows]
        holding = [float(r[2]) for r in rows]
        return cls(states[0] if states else 0, np.array(states), np.array(holding))

    @classmethod
    def constant(cls, x: int, t: float) -> "EnvPath":
        return cls(x, np.array([x]), np.array([t]))


@dataclass(frozen=True, eq=False)
class ReturnIndex:
    """Start times ``tau_0 < tau_1 < ...`` of successive visits to ``anchor``."""

    anchor: int
    taus: np.ndarray

    def n_of(self, t: float) -> int:
        """Number of completed returns ``n_t = sup{n : tau_n <= t}`` (-1 before the first visit)."""
        return int(np.searchsorted(self.taus, t, side="right")) - 1

    def tau_of(self, t: float) -> float:
        n = self.n_of(t)
        if n < 0:
            raise ValueError("no visit to the anchor before t")
        return float(self.taus[n])

    def __len__(self) -> int:
        return int(self.taus.size)


def return_index(path: EnvPath, x: int) -> ReturnIndex:
    starts = path.jump_times[path.states == x]
    if path.final_state == x:
        starts = np.append(starts, path.total_time)
    return ReturnIndex(x, starts)


def _jump_tables(env: EnvironmentSpec) -> tuple[np.ndarray, np.ndarray]:
    Q = env.generator
    q = env.exit_rates
    n = env.size
    if n > 1 and np.any(q <= 0):
        bad = env.states[int(np.argmin(q))]
        raise AbsorbingState(f"environment state {bad} has zero exit rate")
    P = np.where(np.eye(n, dtype=bool), 0.0, Q) / np.where(q > 0, q, 1.0)[:, None]
    cum = np.cumsum(P, axis=1)
    cum[:, -1] = 1.0 + 1e-12  # guard the last bucket against rounding
    return q, cum


def _check_multistate(env: EnvironmentSpec) -> None:
    if env.size < 2:
        raise AbsorbingState("singleton environment never jumps; use duplicate_singleton first")


def simulate_env(env: EnvironmentSpec, x0: int, horizon: float, seed: int | np.random.Generator) -> EnvPath:
    """Exact trajectory of the environment chain on ``[0, horizon]``."""
    if horizon <= 0:
        raise ValueError("horizon must be positive")
    if env.size == 1:
        return EnvPath.constant(x0, horizon)
    rng = seed if isinstance(seed, np.random.Generator) else stream(seed)
    q, cum = _jump_tables(env)
    states: list[int] = []
    holding: list[float] = []
    t, x = 0.0, int(x0)
    chunk = 4096
    expo = rng.standard_exponential(chunk)
    unif = rng.random(chunk)
    k = 0
    while True:
        if k == chunk:
            expo = rng.standard_exponential(chunk)
            unif = rng.random(chunk)
            k = 0
        h = expo[k] / q[x]
        u = unif[k]
        k += 1
        if t + h >= horizon:
            states.append(x)
            holding.append(horizon - t)
            break
        states.append(x)
        holding.append(h)
        t += h
        x = int(np.searchsorted(cum[x], u, side="right"))
    return EnvPath(int(x0), np.array(states), np.array(holding))


def simulate_env_until_return(
    env: EnvironmentSpec, x: int, k: int, seed: int | np.random.Generator
) -> tuple[EnvPath, ReturnIndex]:
    """Path started in ``x`` and stopped exactly at the ``k``-th return to ``x``."""
    if k < 0:
        raise ValueError("k must be nonnegative")
    if k == 0:
        return EnvPath(x, np.zeros(0, dtype=np.int64), np.zeros(0), final_state=x), ReturnIndex(x, np.zeros(1))
    _check_multistate(env)
    rng = seed if isinstance(seed, np.random.Generator) else stream(seed)
    q, cum = _jump_tables(env)
    states: list[int] = []
    holding: list[float] = []
    cur, returns = int(x), 0
    while True:
        states.append(cur)
        holding.append(rng.standard_exponential() / q[cur])
        cur = int(np.searchsorted(cum[cur], rng.random(), side="right"))
        if cur == x:
            returns += 1
            if returns == k:
                break
    path = EnvPath(x, np.array(states), np.array(holding), final_state=x)
    return path, return_index(path, x)


def duplicate_singleton(env: EnvironmentSpec) -> EnvironmentSpec:
    """Replace a one-state environment by two clones switching at unit rate."""
    if env.size != 1:
        raise NotSingleton(f"environment has {env.size} states")
    s = env.states[0]
    return EnvironmentSpec(
        states=(f"{s}#1", f"{s}#2"),
        generator=np.array([[-1.0, 1.0], [1.0, -1.0]]),
        pi=np.array([0.5, 0.5]),
        coverage=env.coverage,
    )


def ensure_multistate(net: ModulatedNetwork) -> ModulatedNetwork:
    """The network itself, or its two-clone version when the environment is a singleton."""
    if net.env.size > 1:
        return net
    return net.with_environment(duplicate_singleton(net.env), [0, 0])


# ----------------------------------------------------------------------------
# batched renewal cycles


@dataclass(frozen=True, eq=False)
class CycleBatch:
    """Many independent cycles ``[tau_0, tau_1)`` started at ``anchor``.

    Stored position-major: ``positions[k] = (cycle_ids, states, holding)`` holds
    the ``k``-th segment of every cycle that has at least ``k + 1`` segments.
    """

    anchor: int
    count: int
    positions: list[tuple[np.ndarray, np.ndarray, np.ndarray]]
    durations: np.ndarray

    def path(self, i: int) -> EnvPath:
        states, holding = [], []
        for ids, s, h in self.positions:
            hit = np.flatnonzero(ids == i)
            if not hit.size:
                break
            states.append(int(s[hit[0]]))
            holding.append(float(h[hit[0]]))
        return EnvPath(self.anchor, np.array(states), np.array(holding), final_state=self.anchor)


def simulate_cycles(env: EnvironmentSpec, x: int, count: int, rng: np.random.Generator) -> CycleBatch:
    """``count`` i.i.d. return cycles of the environment anchored at ``x``."""
    _check_multistate(env)
    q, cum = _jump_tables(env)
    active = np.arange(count)
    cur = np.full(count, x, dtype=np.int64)
    durations = np.zeros(count)
    positions = []
    while active.size:
        h = rng.standard_exponential(active.size) / q[cur]
        positions.append((active, cur, h))
        durations[active] += h
        u = rng.random(active.size)
        nxt = (u[:, None] < cum[cur]).argmax(axis=1)
        keep = nxt != x
        active = active[keep]
        cur = nxt[keep]
    return CycleBatch(x, count, positions, durations)


@dataclass(frozen=True, eq=False)
class PathBatch:
    """Many paths on ``[0, horizon]`` stored flat: path ``i`` owns ``offsets[i]:offsets[i+1]``."""

    offsets: np.ndarray
    states: np.ndarray
    holding: np.ndarray

    @property
    def count(self) -> int:
        return int(self.offsets.size - 1)

    @property
    def lengths(self) -> np.ndarray:
        return np.diff(self.offsets)

    @property
    def path_of_segment(self) -> np.ndarray:
        return np.repeat(np.arange(self.count), self.lengths)

    def starts(self) -> np.ndarray:
        """Start time of every flat segment within its own path."""
        ends = np.cumsum(self.holding)
        base = np.concatenate(([0.0], ends))[self.offsets[:-1]]
        return ends - self.holding - np.repeat(base, self.lengths)

    def path(self, i: int) -> EnvPath:
        a, b = int(self.offsets[i]), int(self.offsets[i + 1])
        return EnvPath(int(self.states[a]), self.states[a:b], self.holding[a:b])

    @classmethod
    def from_paths(cls, paths) -> "PathBatch":
        paths = list(paths)
        lengths = [len(p) for p in paths]
        offsets = np.concatenate(([0], np.cumsum(lengths))).astype(np.int64)
        states = np.concatenate([p.states for p in paths]) if paths else np.zeros(0, np.int64)
        holding = np.concatenate([p.holding for p in paths]) if paths else np.zeros(0)
        return cls(offsets, states.astype(np.int64), holding.astype(float))
