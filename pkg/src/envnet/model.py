"""Mono-molecular reaction networks in a Markov-modulated environment.

A model is a finite environment CTMC (states + generator) together with
reactions of three shapes only::

    production   0 -> m S_j     rate lam0[j](x)          (events per time)
    conversion   S_i -> S_j     rate lam[i, j](x) * z_i
    degradation  S_i -> 0       rate lam_deg[i](x) * z_i

Rates are tabulated per environment state. Everything here is immutable once
validated.
"""

from __future__ import annotations

import math
import re
from dataclasses import dataclass, field
from functools import cached_property
from typing import Any, Mapping, Sequence

import numpy as np
from scipy.sparse import csr_matrix
from scipy.sparse.csgraph import connected_components

GENERATOR_ROW_TOL = 1e-12
STATIONARY_TOL = 1e-10

PRODUCTION = "production"
CONVERSION = "conversion"
DEGRADATION = "degradation"


class ModelError(Exception):
    """Base class for model problems."""


class Violation(ModelError):
    """A raw model description was rejected.

    ``violations`` lists every problem found, each as ``(where, reason)``.
    """

    def __init__(self, violations: Sequence[tuple[str, str]]):
        self.violations = list(violations)
        lines = "; ".join(f"{where}: {why}" for where, why in self.violations)
        super().__init__(f"model rejected ({len(self.violations)} violation(s)): {lines}")


class SingularSystem(ModelError):
    pass


@dataclass(frozen=True)
class Species:
    id: int  # zero-based position in the network
    name: str


@dataclass(frozen=True)
class RateMap:
    """Nonnegative rate per environment state, aligned with ``EnvironmentSpec.states``."""

    values: tuple[float, ...]

    def __getitem__(self, x: int) -> float:
        return self.values[x]

    def __len__(self) -> int:
        return len(self.values)

    def as_array(self) -> np.ndarray:
        return np.asarray(self.values, dtype=float)

    def support(self) -> bool:
        return any(v > 0 for v in self.values)


@dataclass(frozen=True)
class Reaction:
    kind: str
    rate: RateMap
    source: int | None = None
    target: int | None = None
    burst: int = 1

    def equation(self, names: Sequence[str]) -> str:
        if self.kind == PRODUCTION:
            lhs, rhs = "0", names[self.target]
            if self.burst != 1:
                rhs = f"{self.burst} {rhs}"
        elif self.kind == CONVERSION:
            lhs, rhs = names[self.source], names[self.target]
        else:
            lhs, rhs = names[self.source], "0"
        return f"{lhs} -> {rhs}"


@dataclass(frozen=True, eq=False)
class EnvironmentSpec:
    states: tuple[str, ...]
    generator: np.ndarray
    pi: np.ndarray | None = None
    coverage: float | None = None

    def __post_init__(self):
        Q = np.array(self.generator, dtype=float)
        Q.setflags(write=False)
        object.__setattr__(self, "generator", Q)
        if self.pi is not None:
            pi = np.array(self.pi, dtype=float)
            pi.setflags(write=False)
            object.__setattr__(self, "pi", pi)

    def __eq__(self, other):
        if not isinstance(other, EnvironmentSpec):
            return NotImplemented
        same_pi = (self.pi is None and other.pi is None) or (
            self.pi is not None and other.pi is not None and np.array_equal(self.pi, other.pi)
        )
        return (
            self.states == other.states
            and np.array_equal(self.generator, other.generator)
            and same_pi
            and self.coverage == other.coverage
        )

    __hash__ = None  # type: ignore[assignment]

    @property
    def size(self) -> int:
        return len(self.states)

    @cached_property
    def exit_rates(self) -> np.ndarray:
        return -np.diag(self.generator).copy()

    def exit_rate(self, x: int) -> float:
        return float(-self.generator[x, x])

    def index(self, state: str | int) -> int:
        if isinstance(state, (int, np.integer)):
            if not 0 <= state < self.size:
                raise KeyError(f"environment state index {state} out of range")
            return int(state)
        try:
            return self.states.index(state)
        except ValueError:
            raise KeyError(f"unknown environment state {state!r}") from None


@dataclass(frozen=True, eq=False)
class Modulation:
    """Per-state linear dynamics: ``A[x]`` (d x d) and ``B[x]`` (d,)."""

    A: np.ndarray  # (n_env, d, d)
    B: np.ndarray  # (n_env, d)

    def __post_init__(self):
        for arr in (self.A, self.B):
            arr.setflags(write=False)


@dataclass(frozen=True, eq=False)
class ModulatedNetwork:
    species: tuple[Species, ...]
    reactions: tuple[Reaction, ...]
    env: EnvironmentSpec
    name: str = ""
    meta: Mapping[str, Any] = field(default_factory=dict)

    def __eq__(self, other):
        if not isinstance(other, ModulatedNetwork):
            return NotImplemented
        return (
            self.species == other.species
            and self.reactions == other.reactions
            and self.env == other.env
        )

    __hash__ = None  # type: ignore[assignment]

    @property
    def d(self) -> int:
        return len(self.species)

    @property
    def names(self) -> list[str]:
        return [s.name for s in self.species]

    def species_index(self, name: str | int) -> int:
        if isinstance(name, (int, np.integer)):
            return int(name)
        for s in self.species:
            if s.name == name:
                return s.id
        raise KeyError(f"unknown species {name!r}")

    @cached_property
    def production_rates(self) -> np.ndarray:
        """(n_env, d) firing rate of ``0 -> m_j S_j`` summed over reactions."""
        out = np.zeros((self.env.size, self.d))
        for r in self.reactions:
            if r.kind == PRODUCTION:
                out[:, r.target] += r.rate.as_array()
        return out

    @cached_property
    def conversion_rates(self) -> np.ndarray:
        """(n_env, d, d) per-molecule rate of ``S_i -> S_j`` at ``[x, i, j]``."""
        out = np.zeros((self.env.size, self.d, self.d))
        for r in self.reactions:
            if r.kind == CONVERSION:
                out[:, r.source, r.target] += r.rate.as_array()
        return out

    @cached_property
    def degradation_rates(self) -> np.ndarray:
        out = np.zeros((self.env.size, self.d))
        for r in self.reactions:
            if r.kind == DEGRADATION:
                out[:, r.source] += r.rate.as_array()
        return out

    @cached_property
    def bursts(self) -> np.ndarray:
        """Burst size ``m_j`` per species (0 when never produced)."""
        m = np.zeros(self.d, dtype=int)
        for r in self.reactions:
            if r.kind == PRODUCTION:
                if m[r.target] not in (0, r.burst):
                    raise ModelError(
                        f"species {self.species[r.target].name} produced with two burst sizes"
                    )
                m[r.target] = r.burst
        return m

    def with_environment(self, env: EnvironmentSpec, state_map: Sequence[int]) -> "ModulatedNetwork":
        """Copy of the network on ``env``; new state ``k`` uses rates of old state ``state_map[k]``."""
        reactions = tuple(
            Reaction(
                kind=r.kind,
                rate=RateMap(tuple(r.rate[i] for i in state_map)),
                source=r.source,
                target=r.target,
                burst=r.burst,
            )
            for r in self.reactions
        )
        return ModulatedNetwork(self.species, reactions, env, self.name, dict(self.meta))


# ----------------------------------------------------------------------------
# parsing and validation of raw descriptions

_TERM = re.compile(r"^\s*(?:(\d+)\s*\*?\s*)?([A-Za-z_][A-Za-z0-9_']*)\s*$")


def parse_complex(text: str) -> dict[str, int]:
    text = text.strip()
    if text in ("0", "", "∅"):
        return {}
    out: dict[str, int] = {}
    for term in text.split("+"):
        m = _TERM.match(term)
        if not m:
            raise ValueError(f"cannot parse complex term {term.strip()!r}")
        coeff = int(m.group(1)) if m.group(1) else 1
        out[m.group(2)] = out.get(m.group(2), 0) + coeff
    return {k: v for k, v in out.items() if v != 0}


def _classify_equation(reactants: dict[str, int], products: dict[str, int]):
    """Return ``(kind, source, target, burst)`` or raise ValueError with the reason."""
    if reactants == products:
        raise ValueError("reactant and product sides identical")
    n_in = sum(reactants.values())
    if n_in >= 2:
        raise ValueError("bimolecular reactant")
    if n_in == 0:
        if len(products) != 1:
            raise ValueError("production must create a single species")
        (target, burst), = products.items()
        return PRODUCTION, None, target, burst
    (source, _), = reactants.items()
    if source in products:
        raise ValueError("catalytic reaction (reactant reappears as product)")
    if not products:
        return DEGRADATION, source, None, 1
    if len(products) == 1 and sum(products.values()) == 1:
        (target, _), = products.items()
        return CONVERSION, source, target, 1
    raise ValueError("non-mono-molecular product")


def _check_generator(Q: np.ndarray, states: Sequence[str], violations: list) -> None:
    n = len(states)
    if Q.shape != (n, n):
        violations.append(("environment", f"generator shape {Q.shape} does not match {n} states"))
        return
    if not np.all(np.isfinite(Q)):
        violations.append(("environment", "generator has non-finite entries"))
        return
    off = Q - np.diag(np.diag(Q))
    for x in range(n):
        if np.any(off[x] < 0):
            violations.append((f"state {states[x]}", "negative off-diagonal generator entry"))
        scale = max(1.0, abs(Q[x, x]))
        if abs(Q[x].sum()) > GENERATOR_ROW_TOL * scale:
            violations.append((f"state {states[x]}", "generator row not conservative"))
    if n > 1 and not environment_irreducible(Q):
        violations.append(("environment", "reducible environment (not strongly connected)"))


def environment_irreducible(Q: np.ndarray) -> bool:
    adj = csr_matrix((np.asarray(Q) > 0) & ~np.eye(len(Q), dtype=bool))
    n_comp, _ = connected_components(adj, directed=True, connection="strong")
    return n_comp == 1


_TOP_KEYS = {"model", "species", "environment", "reactions"}
_MODEL_KEYS = {"name", "description"}
_SPECIES_KEYS = {"names"}
_ENV_KEYS = {"states", "generator", "pi", "coverage"}
_REACTION_KEYS = {"equation", "rate", "note"}


def validate_network(raw: Mapping[str, Any]) -> ModulatedNetwork:
    """Validate a raw model description and build the network.

    ``raw`` has the layout of a parsed model file (see ``envnet.modelfile``).
    Every problem is collected before raising, so a single :class:`Violation`
    reports all of them.
    """
    violations: list[tuple[str, str]] = []

    for key in raw:
        if key not in _TOP_KEYS:
            violations.append(("model", f"unknown section {key!r}"))
    meta = dict(raw.get("model", {}))
    for key in meta:
        if key not in _MODEL_KEYS:
            violations.append(("model", f"unknown key {key!r}"))

    sp = raw.get("species", {})
    for key in sp:
        if key not in _SPECIES_KEYS:
            violations.append(("species", f"unknown key {key!r}"))
    names = [str(n) for n in sp.get("names", [])]
    if not names:
        violations.append(("species", "at least one species required"))
    if len(set(names)) != len(names):
        violations.append(("species", "duplicate species names"))

    envraw = raw.get("environment", {})
    for key in envraw:
        if key not in _ENV_KEYS:
            violations.append(("environment", f"unknown key {key!r}"))
    states = tuple(str(s) for s in envraw.get("states", []))
    if not states:
        violations.append(("environment", "at least one environment state required"))
    if len(set(states)) != len(states):
        violations.append(("environment", "duplicate environment state names"))
    try:
        Q = np.array(envraw.get("generator", []), dtype=float)
        if states:
            Q = Q.reshape(len(states), len(states)) if Q.size == len(states) ** 2 else Q
    except (TypeError, ValueError):
        Q = np.zeros((0, 0))
        violations.append(("environment", "generator is not a numeric matrix"))
    if states:
        _check_generator(Q, states, violations)

    pi = envraw.get("pi")
    if pi is not None:
        pi = np.asarray(pi, dtype=float)
        if pi.shape != (len(states),):
            violations.append(("environment", "pi length does not match states"))
            pi = None
        elif np.any(pi < 0) or abs(pi.sum() - 1.0) > 1e-12 * len(states):
            violations.append(("environment", "pi is not a probability vector"))
        elif Q.shape == (len(states), len(states)) and np.max(np.abs(pi @ Q)) > STATIONARY_TOL:
            violations.append(("environment", "pi is not stationary for the generator"))
    coverage = envraw.get("coverage")
    if coverage is not None:
        coverage = float(coverage)
        if not 0.0 < coverage <= 1.0:
            violations.append(("environment", "coverage must lie in (0, 1]"))

    reactions: list[Reaction] = []
    used: set[str] = set()
    for k, rr in enumerate(raw.get("reactions", [])):
        where = f"reaction {k + 1}"
        for key in rr:
            if key not in _REACTION_KEYS:
                violations.append((where, f"unknown key {key!r}"))
        eq = str(rr.get("equation", ""))
        where = f"reaction {k + 1} ({eq})"
        try:
            lhs, rhs = eq.split("->")
            reac, prod = parse_complex(lhs), parse_complex(rhs)
        except ValueError as exc:
            msg = str(exc) if "complex" in str(exc) else "equation must read 'lhs -> rhs'"
            violations.append((where, msg))
            continue
        unknown = [s for s in list(reac) + list(prod) if s not in names]
        if unknown:
            violations.append((where, f"unknown species {', '.join(sorted(set(unknown)))}"))
            continue
        used.update(reac)
        used.update(prod)
        try:
            kind, src, tgt, burst = _classify_equation(reac, prod)
        except ValueError as exc:
            violations.append((where, str(exc)))
            continue
        try:
            rate = [float(v) for v in rr.get("rate", [])]
        except (TypeError, ValueError):
            violations.append((where, "rate table is not numeric"))
            continue
        if len(rate) != len(states):
            violations.append((where, f"rate table has {len(rate)} entries for {len(states)} states"))
            continue
        if any(not math.isfinite(v) for v in rate):
            violations.append((where, "non-finite rate"))
            continue
        if any(v < 0 for v in rate):
            violations.append((where, "negative rate"))
            continue
        if not any(v > 0 for v in rate):
            violations.append((where, "rate identically zero"))
            continue
        reactions.append(
            Reaction(
                kind=kind,
                rate=RateMap(tuple(rate)),
                source=None if src is None else names.index(src),
                target=None if tgt is None else names.index(tgt),
                burst=burst,
            )
        )
    if not raw.get("reactions"):
        violations.append(("reactions", "at least one reaction required"))
    for n in names:
        if n not in used:
            violations.append((f"species {n}", "appears in no reaction"))

    bursts: dict[int, int] = {}
    for r in reactions:
        if r.kind == PRODUCTION:
            if bursts.setdefault(r.target, r.burst) != r.burst:
                violations.append((f"species {names[r.target]}", "produced with two burst sizes"))

    if violations:
        raise Violation(violations)

    env = EnvironmentSpec(states=states, generator=Q, pi=pi, coverage=coverage)
    species = tuple(Species(i, n) for i, n in enumerate(names))
    return ModulatedNetwork(species, tuple(reactions), env, str(meta.get("name", "")), meta)


def to_raw(net: ModulatedNetwork) -> dict[str, Any]:
    """Inverse of :func:`validate_network`."""
    env: dict[str, Any] = {
        "states": list(net.env.states),
        "generator": [[float(v) for v in row] for row in net.env.generator],
    }
    if net.env.pi is not None:
        env["pi"] = [float(v) for v in net.env.pi]
    if net.env.coverage is not None:
        env["coverage"] = float(net.env.coverage)
    raw: dict[str, Any] = {}
    if net.meta:
        raw["model"] = {k: v for k, v in net.meta.items() if k in _MODEL_KEYS}
    raw["species"] = {"names": net.names}
    raw["environment"] = env
    raw["reactions"] = [
        {"equation": r.equation(net.names), "rate": [float(v) for v in r.rate.values]}
        for r in net.reactions
    ]
    return raw


def network(
    species: Sequence[str],
    states: Sequence[str | int],
    generator,
    reactions: Sequence[tuple[str, Sequence[float]]],
    *,
    pi=None,
    name: str = "",
) -> ModulatedNetwork:
    """Convenience constructor: ``reactions`` are ``(equation, rate table)`` pairs."""
    raw: dict[str, Any] = {
        "species": {"names": list(species)},
        "environment": {
            "states": [str(s) for s in states],
            "generator": np.asarray(generator, dtype=float).tolist(),
        },
        "reactions": [{"equation": eq, "rate": list(map(float, rate))} for eq, rate in reactions],
    }
    if pi is not None:
        raw["environment"]["pi"] = list(map(float, pi))
    if name:
        raw["model"] = {"name": name}
    return validate_network(raw)


# ----------------------------------------------------------------------------
# derived quantities


def build_modulation(net: ModulatedNetwork) -> Modulation:
    """Assemble ``A(x)`` and ``B(x)`` for every environment state.

    ``A[x][i, j] = lam[j, i](x)`` off the diagonal and
    ``A[x][i, i] = -sum_k lam[i, k](x) - lam_deg[i](x)``; ``B[x] = lam0(x)``.
    """
    conv = net.conversion_rates  # [x, i, j] = S_i -> S_j
    A = np.transpose(conv, (0, 2, 1)).copy()
    idx = np.arange(net.d)
    A[:, idx, idx] = -conv.sum(axis=2) - net.degradation_rates
    # diagonal of conv is always zero, so the transpose left it untouched
    B = net.production_rates.copy()
    return Modulation(A=A, B=B)


def stationary_env(env: EnvironmentSpec) -> np.ndarray:
    """Stationary law of the environment: solve ``pi Q = 0, sum(pi) = 1``."""
    n = env.size
    if n == 1:
        return np.ones(1)
    Q = env.generator
    if n > 1 and not environment_irreducible(Q):
        raise SingularSystem("environment generator is reducible")
    M = Q.T.copy()
    M[-1, :] = 1.0
    rhs = np.zeros(n)
    rhs[-1] = 1.0
    try:
        if n > 2000:
            from scipy.sparse import csc_matrix
            from scipy.sparse.linalg import spsolve

            pi = spsolve(csc_matrix(M), rhs)
        else:
            pi = np.linalg.solve(M, rhs)
    except np.linalg.LinAlgError as exc:
        raise SingularSystem(str(exc)) from exc
    pi = np.clip(pi, 0.0, None)
    return pi / pi.sum()


def env_pi(net_or_env) -> np.ndarray:
    """Supplied ``pi`` if present, else the solved stationary law."""
    env = net_or_env.env if isinstance(net_or_env, ModulatedNetwork) else net_or_env
    return env.pi.copy() if env.pi is not None else stationary_env(env)


def mean_production_check(net: ModulatedNetwork, pi=None) -> tuple[bool, float]:
    """``sum_x ||B(x)||_1 pi(x)`` and whether it is finite."""
    pi = env_pi(net) if pi is None else np.asarray(pi, dtype=float)
    value = float(net.production_rates.sum(axis=1) @ pi)
    return math.isfinite(value), value
