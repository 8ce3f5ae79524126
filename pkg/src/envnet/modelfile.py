"""Model file format.

Model files are TOML documents with four sections::

    [model]                      # optional
    name = "case-study"
    description = "free text"

    [species]
    names = ["S"]

    [environment]
    states = ["0", "1"]          # environment state labels, in order
    generator = [[-1.0, 1.0],    # row-generator Q: off-diagonals >= 0,
                 [ 2.0, -2.0]]   # rows sum to zero
    pi = [0.6667, 0.3333]        # optional stationary law, checked against Q
    coverage = 0.999             # optional: probability mass of the original
                                 # (untruncated) environment kept by `states`

    [[reactions]]
    equation = "0 -> 2 S"        # production, burst 2
    rate = [1.0, 3.0]            # one value per environment state

    [[reactions]]
    equation = "S -> 0"          # degradation, rate per molecule
    rate = [0.5, 1.0]

Equations use ``0`` for the empty complex and ``n Name`` for stoichiometric
coefficients. Conversion reads ``S1 -> S2``. Anything that is not a
production, conversion or degradation is rejected, as is any unknown key.
"""

from __future__ import annotations

from pathlib import Path
from typing import Any

import tomli
import tomli_w

from .model import ModulatedNetwork, Violation, to_raw, validate_network


def loads(text: str) -> ModulatedNetwork:
    try:
        raw = tomli.loads(text)
    except tomli.TOMLDecodeError as exc:
        raise Violation([("file", f"not valid TOML: {exc}")]) from exc
    return validate_network(raw)


def load(path: str | Path) -> ModulatedNetwork:
    return loads(Path(path).read_text(encoding="utf-8"))


def load_raw(path: str | Path) -> dict[str, Any]:
    return tomli.loads(Path(path).read_text(encoding="utf-8"))


def dumps(net: ModulatedNetwork) -> str:
    return tomli_w.dumps(to_raw(net))


def dump(net: ModulatedNetwork, path: str | Path) -> None:
    Path(path).write_text(dumps(net), encoding="utf-8")
