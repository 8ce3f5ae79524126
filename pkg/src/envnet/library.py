"""Shipped example models.

Each builder returns a raw model description (the dict form of a model
file). ``write_fixtures`` regenerates the TOML files and their
``.expected.json`` sidecars under ``envnet/fixtures``.
"""

from __future__ import annotations

import json
import math
from pathlib import Path
from typing import Any, Callable

import numpy as np
import tomli_w

FIXTURE_DIR = Path(__file__).with_name("fixtures")


def _raw(name, description, species, states, Q, reactions, pi=None, coverage=None) -> dict[str, Any]:
    env: dict[str, Any] = {"states": [str(s) for s in states], "generator": np.asarray(Q, float).tolist()}
    if pi is not None:
        env["pi"] = [float(v) for v in pi]
    if coverage is not None:
        env["coverage"] = float(coverage)
    return {
        "model": {"name": name, "description": description},
        "species": {"names": list(species)},
        "environment": env,
        "reactions": [{"equation": eq, "rate": [float(r) for r in rates]} for eq, rates in reactions],
    }


def two_state(q01: float, q10: float) -> np.ndarray:
    return np.array([[-q01, q01], [q10, -q10]])


def case_study(m: int = 1, q01=1.0, q10=2.0, k1=(1.0, 3.0), k2=(0.5, 1.0), name=None) -> dict:
    prod = "0 -> S" if m == 1 else f"0 -> {m} S"
    return _raw(
        name or f"case-study-m{m}",
        f"Bursty birth (burst {m}) and linear death of one species in a two-state environment.",
        ["S"],
        ["0", "1"],
        two_state(q01, q10),
        [(prod, k1), ("S -> 0", k2)],
    )


def case_study_slow() -> dict:
    """Weak degradation, so the recurrence contracts slowly (about 5% per cycle)."""
    return case_study(1, 1.0, 1.0, (1.0, 2.0), (0.01, 0.04), name="case-study-slow")


def partition_example() -> dict:
    return _raw(
        "partition-example",
        "Five species: a produced and degraded chain, a transient feeder and a closed pair.",
        ["S1", "S2", "S3", "S4", "S5"],
        ["0", "1"],
        two_state(1.0, 1.0),
        [
            ("0 -> 2 S1", (1.0, 1.0)),
            ("S1 -> S2", (1.0, 1.0)),
            ("S2 -> 0", (1.0, 1.0)),
            ("S3 -> S4", (1.0, 1.0)),
            ("S4 -> S5", (1.0, 1.0)),
            ("S5 -> S4", (1.0, 1.0)),
        ],
    )


def alpha_chain(k=(1.0, 2.0, 3.0, 4.0), q01=1.0, q10=1.0) -> dict:
    """Chain whose steps are each gated to one environment state; anchor at state 1."""
    k1, k2, k3, k4 = k
    return _raw(
        "alpha-chain",
        "0 -> S1 -> S2 -> S3 -> 0 with S1->S2 and S3->0 only in state 1 and S2->S3 only in state 0.",
        ["S1", "S2", "S3"],
        ["0", "1"],
        two_state(q01, q10),
        [
            ("0 -> S1", (k1, k1)),
            ("S1 -> S2", (0.0, k2)),
            ("S2 -> S3", (k3, 0.0)),
            ("S3 -> 0", (0.0, k4)),
        ],
    )


def gene(N: int, a1=1.0, a2=0.5, k1p=8.0, k2=1.0) -> dict:
    """Gene switching between inactive/active copies; environment state = number of inactive copies."""
    states = list(range(N + 1))
    Q = np.zeros((N + 1, N + 1))
    for x1 in states:
        if x1 > 0:
            Q[x1, x1 - 1] = a1 * x1  # G -> G'
        if x1 < N:
            Q[x1, x1 + 1] = a2 * (N - x1)  # G' -> G
        Q[x1, x1] = -Q[x1].sum()
    pi = [math.comb(N, x1) * (a2 / (a1 + a2)) ** x1 * (a1 / (a1 + a2)) ** (N - x1) for x1 in states]
    return _raw(
        f"geneN{N}",
        f"Protein made by active gene copies out of N={N}; environment state is the inactive count x1.",
        ["P"],
        [f"x1={x}" for x in states],
        Q,
        [("0 -> P", [k1p * (N - x) for x in states]), ("P -> 0", [k2] * (N + 1))],
        pi=pi,
    )


def gene_tf(a1=1.0, a2=1.0, k1=1.0, k1p=5.0, k2=1.0, k3=0.5, k4=1.0, y_max=25) -> dict:
    """Transcription factor driven by protein level; environment is (gene state, protein count)."""
    states = [(x1, y) for x1 in (0, 1) for y in range(y_max + 1)]
    index = {s: i for i, s in enumerate(states)}
    Q = np.zeros((len(states), len(states)))
    for (x1, y), i in index.items():
        x2 = 1 - x1
        moves = {
            (1 - x1, y): a1 * x1 + a2 * x2,
            (x1, y + 1): k1 * x1 + k1p * x2,
            (x1, y - 1): k2 * y,
        }
        for dest, rate in moves.items():
            if rate > 0 and dest in index:
                Q[i, index[dest]] += rate
        Q[i, i] = -Q[i].sum()
    cov = _gene_tf_coverage(a1, a2, k1, k1p, k2, y_max)
    return _raw(
        "gene-tf",
        "TF made at rate proportional to protein count; gene state and protein count form the environment "
        f"(protein truncated at {y_max}).",
        ["TF"],
        [f"x1={x1};y={y}" for x1, y in states],
        Q,
        [("0 -> TF", [k3 * y for _, y in states]), ("TF -> 0", [k4] * len(states))],
        coverage=cov,
    )


def _gene_tf_coverage(a1, a2, k1, k1p, k2, y_max) -> float:
    """Stationary mass of protein counts <= y_max, from a much wider truncation."""

    wide = 4 * y_max + 40
    n = 2 * (wide + 1)
    Q = np.zeros((n, n))
    for x1 in (0, 1):
        for y in range(wide + 1):
            i = x1 * (wide + 1) + y
            Q[i, (1 - x1) * (wide + 1) + y] += a1 * x1 + a2 * (1 - x1)
            if y < wide:
                Q[i, i + 1] += k1 * x1 + k1p * (1 - x1)
            if y > 0:
                Q[i, i - 1] += k2 * y
            Q[i, i] = -Q[i].sum()
    M = Q.T.copy()
    M[-1] = 1.0
    rhs = np.zeros(n)
    rhs[-1] = 1.0
    pi = np.linalg.solve(M, rhs).reshape(2, wide + 1)
    return float(round(pi[:, : y_max + 1].sum(), 12))


def product_form_env(kappa=(3.0, 4.0), a=(1.0, 2.0, 8.0, 8.0), total_max=15) -> dict:
    """Product-form environment of S1, S2 counts driving S3; states with x1 + x2 = 0 mod 3 up to a cap."""
    a1, a2, a3, a4 = a
    k1, k2 = kappa
    states = [(x1, s - x1) for s in range(0, total_max + 1, 3) for x1 in range(s + 1)]
    index = {s: i for i, s in enumerate(states)}
    Q = np.zeros((len(states), len(states)))
    for (x1, x2), i in index.items():
        moves = {
            (x1 + 1, x2 + 2): a1,
            (x1 + 1, x2 - 1): a2 * x1 * x2 * (x2 - 1),
            (x1 - 1, x2 + 1): a3 * x1 * (x1 - 1) * x2,
            (x1 - 2, x2 - 1): a4 * x1 * (x1 - 1) * x2,
        }
        for dest, rate in moves.items():
            if rate > 0 and dest in index:
                Q[i, index[dest]] += rate
        Q[i, i] = -Q[i].sum()
    # keep the class reachable from the origin
    reach, frontier = {0}, [0]
    while frontier:
        i = frontier.pop()
        for j in np.flatnonzero(Q[i] > 0):
            if int(j) not in reach:
                reach.add(int(j))
                frontier.append(int(j))
    keep = sorted(reach)
    Q = Q[np.ix_(keep, keep)]
    Q[np.diag_indices_from(Q)] = 0.0
    Q[np.diag_indices_from(Q)] = -Q.sum(axis=1)
    states = [states[i] for i in keep]
    b1, b2 = product_form_parameters(a)
    weights = np.array([b1**x1 / math.factorial(x1) * b2**x2 / math.factorial(x2) for x1, x2 in states])
    full = _class_mass(b1, b2)
    return _raw(
        "product-form-env",
        f"S3 degraded at rate k1*x1 and produced at rate k2*x2; environment truncated at x1+x2 <= {total_max}.",
        ["S3"],
        [f"x1={x1};x2={x2}" for x1, x2 in states],
        Q,
        [("S3 -> 0", [k1 * x1 for x1, _ in states]), ("0 -> S3", [k2 * x2 for _, x2 in states])],
        coverage=float(round(weights.sum() / full, 12)),
    )


def product_form_parameters(a) -> tuple[float, float]:
    """Complex-balanced equilibrium ``(c1, c2)`` of the environment network.

    Balance at complex 0 gives ``c1^2 c2 = a1/a4``; balance at ``S1 + 2 S2``
    gives ``a2 c1 c2^2 = a1 + a3 c1^2 c2``.
    """
    a1, a2, a3, a4 = a
    p = a1 / a4
    r = (a1 + a3 * p) / a2
    return (p * p / r) ** (1 / 3), (r * r / p) ** (1 / 3)


def _class_mass(b1: float, b2: float, top: int = 90) -> float:
    return sum(
        b1**x1 / math.factorial(x1) * b2 ** (s - x1) / math.factorial(s - x1)
        for s in range(0, top, 3)
        for x1 in range(s + 1)
    )


def birth_death_clone(k1=3.0, k2=1.0) -> dict:
    return _raw(
        "birth-death-clone",
        "Constant-rate birth and death with a single environment state.",
        ["S"],
        ["on"],
        [[0.0]],
        [("0 -> S", (k1,)), ("S -> 0", (k2,))],
    )


def conserved_pair() -> dict:
    return _raw(
        "conserved-pair",
        "Two species interconverting with environment-dependent rates; no production or degradation.",
        ["S1", "S2"],
        ["0", "1"],
        two_state(1.0, 0.5),
        [("S1 -> S2", (1.0, 0.2)), ("S2 -> S1", (0.5, 2.0))],
    )


def transient_growth() -> dict:
    return _raw(
        "transient-growth",
        "Bimolecular consumption gated by the environment; transient for k3 > 2 b q10 q01/(q10+q01). "
        "Outside the mono-molecular class, so it is rejected.",
        ["S1", "S2", "S3"],
        ["0", "1"],
        two_state(1.0, 1.0),
        [("S1 + S2 -> S3", (0.0, 1.0)), ("S1 + S3 -> S2", (1.0, 0.0)), ("0 -> S1", (3.0, 3.0))],
    )


def explosive_growth() -> dict:
    return _raw(
        "explosive-growth",
        "2S <-> 3S; explodes whenever the environment visits a state without the reverse reaction. "
        "Outside the mono-molecular class, so it is rejected.",
        ["S"],
        ["0", "1"],
        two_state(1.0, 1.0),
        [("2 S -> 3 S", (1.0, 1.0)), ("3 S -> 2 S", (0.0, 1.0))],
    )


BUILDERS: dict[str, Callable[[], dict]] = {
    "case-study-m1": lambda: case_study(1),
    "case-study-m2": lambda: case_study(2),
    "case-study-m3": lambda: case_study(3),
    "case-study-slow": case_study_slow,
    "partition-example": partition_example,
    "alpha-chain": alpha_chain,
    "geneN1": lambda: gene(1),
    "geneN2": lambda: gene(2),
    "gene-tf": gene_tf,
    "product-form-env": product_form_env,
    "birth-death-clone": birth_death_clone,
    "conserved-pair": conserved_pair,
    "transient-growth": transient_growth,
    "explosive-growth": explosive_growth,
}

EXPECTED: dict[str, dict[str, Any]] = {
    "case-study-m1": {"verdict": "satisfied", "closed": [], "produced": ["S"], "transient": []},
    "case-study-m2": {"verdict": "satisfied", "closed": [], "produced": ["S"], "transient": []},
    "case-study-m3": {"verdict": "satisfied", "closed": [], "produced": ["S"], "transient": []},
    "case-study-slow": {"verdict": "satisfied", "closed": [], "produced": ["S"], "transient": []},
    "partition-example": {
        "verdict": "satisfied",
        "closed": [["S4", "S5"]],
        "produced": ["S1", "S2"],
        "transient": ["S3"],
    },
    "alpha-chain": {
        "verdict": "satisfied",
        "closed": [],
        "produced": ["S1", "S2", "S3"],
        "transient": [],
        "alpha": {"anchor": 1, "value": 2},
    },
    "geneN1": {"verdict": "satisfied", "closed": [], "produced": ["P"], "transient": [], "alpha": {"anchor": 0, "value": 1}},
    "geneN2": {"verdict": "satisfied", "closed": [], "produced": ["P"], "transient": [], "alpha": {"anchor": 0, "value": 1}},
    "gene-tf": {"verdict": "satisfied", "closed": [], "produced": ["TF"], "transient": []},
    "product-form-env": {"verdict": "satisfied", "closed": [], "produced": ["S3"], "transient": []},
    "birth-death-clone": {"verdict": "satisfied", "closed": [], "produced": ["S"], "transient": []},
    "conserved-pair": {"verdict": "satisfied", "closed": [["S1", "S2"]], "produced": [], "transient": []},
    "transient-growth": {"verdict": "rejected", "reasons": ["bimolecular reactant"]},
    "explosive-growth": {"verdict": "rejected", "reasons": ["bimolecular reactant"]},
}


def names() -> list[str]:
    return sorted(BUILDERS)


def path(name: str) -> Path:
    if name not in BUILDERS:
        raise KeyError(f"unknown fixture {name!r}; known: {', '.join(names())}")
    return FIXTURE_DIR / f"{name}.toml"


def expected(name: str) -> dict[str, Any]:
    return json.loads((FIXTURE_DIR / f"{name}.expected.json").read_text())


ALIASES = {"case-study": "case-study-m1"}


def resolve(ref: str) -> Path:
    """A model file path, or a fixture name optionally written as ``fixtures/<name>``."""
    p = Path(ref)
    if p.exists():
        return p
    stem = p.name[:-5] if p.name.endswith(".toml") else p.name
    stem = ALIASES.get(stem, stem)
    if stem in BUILDERS:
        return path(stem)
    raise FileNotFoundError(f"no model file or fixture named {ref!r}")


def write_fixtures(target: Path = FIXTURE_DIR) -> None:
    target.mkdir(parents=True, exist_ok=True)
    for name, build in BUILDERS.items():
        (target / f"{name}.toml").write_text(tomli_w.dumps(build()), encoding="utf-8")
        (target / f"{name}.expected.json").write_text(json.dumps(EXPECTED[name], indent=2) + "\n", encoding="utf-8")


if __name__ == "__main__":
    write_fixtures()
