"""Command line entry point. Every table is written as CSV with a header row."""

from __future__ import annotations

import argparse
import csv
import io
import sys
from pathlib import Path

import numpy as np

from . import library, modelfile
from .envpath import EnvPath, return_index, simulate_env
from .finite_time import (
    QuadratureFailure,
    StepBudgetExceeded,
    TruncationTooSmall,
    pmf_table,
    sample_Z,
    sample_Z_paths,
    ssa_batch,
)
from .model import ModelError, SingularSystem
from .oracle import (
    OverflowTooLarge,
    TruncatedJointSpace,
    build_joint_generator,
    empirical_pmf,
    stationary_pmf,
    transient_pmf,
    tv_distance,
)
from .propagator import Propagator, SpanOutOfRange
from .rng import DEFAULT_SEED
from .stationary import (
    AlphaNotOne,
    CertificateUnavailable,
    PreconditionFailed,
    UnstableDenominator,
    error_certificate,
    factorial_moments,
    sre_sample,
    compose_counts,
)
from .structure import BudgetExhausted, check_assumption2, estimate_alpha

EXIT_REJECTED = 1
EXIT_NUMERICAL = 2
EXIT_USAGE = 64

NUMERICAL = (
    QuadratureFailure,
    TruncationTooSmall,
    StepBudgetExceeded,
    UnstableDenominator,
    OverflowTooLarge,
    AlphaNotOne,
    CertificateUnavailable,
    BudgetExhausted,
    SingularSystem,
    SpanOutOfRange,
    np.linalg.LinAlgError,
)


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        sys.stderr.write(f"{self.prog}: error: {message}\n")
        raise SystemExit(EXIT_USAGE)


def _fmt(v) -> str:
    if isinstance(v, (float, np.floating)):
        return repr(float(v))
    if isinstance(v, (np.integer,)):
        return str(int(v))
    return str(v)


class Out:
    """Collects CSV tables, separated by blank lines."""

    def __init__(self):
        self.buf = io.StringIO()
        self.tables = 0

    def table(self, header, rows):
        if self.tables:
            self.buf.write("\n")
        w = csv.writer(self.buf, lineterminator="\n")
        w.writerow(header)
        for r in rows:
            w.writerow([_fmt(v) for v in r])
        self.tables += 1


def _ints(text: str | None, d: int | None = None, what="value") -> np.ndarray:
    if text is None or text == "":
        return np.zeros(d or 0, dtype=np.int64)
    try:
        vals = np.array([int(v) for v in text.split(",")], dtype=np.int64)
    except ValueError as exc:
        raise UsageError(f"{what} must be comma-separated integers") from exc
    if d is not None and vals.size != d:
        raise UsageError(f"{what} needs {d} entries, got {vals.size}")
    if np.any(vals < 0):
        raise UsageError(f"{what} must be nonnegative")
    return vals


def _load(ref: str):
    try:
        return modelfile.load(library.resolve(ref))
    except FileNotFoundError as exc:
        raise UsageError(str(exc)) from exc


def _state(net, label: str | None, default: int = 0) -> int:
    if label is None:
        return default
    try:
        return net.env.index(label)
    except (KeyError, ValueError, IndexError) as exc:
        raise UsageError(f"unknown environment state {label!r}") from exc


def _read_path(net, path_csv: str) -> EnvPath:
    rows = []
    with open(path_csv, newline="") as fh:
        # only the first table; simulate-env may append a return-time table
        lines = []
        for line in fh:
            if not line.strip():
                break
            lines.append(line)
    try:
        for row in csv.DictReader(lines):
            rows.append((float(row["t_start"]), _state(net, row["state"]), float(row["holding"])))
    except (KeyError, TypeError, ValueError) as exc:
        raise UsageError(f"malformed path file {path_csv}: {exc}") from exc
    if not rows:
        raise UsageError("path file has no segments")
    return EnvPath.from_rows(rows)


def _path_rows(net, path: EnvPath):
    return [(t, net.env.states[s], h) for t, s, h in path.to_rows()]


# ----------------------------------------------------------------------------
# subcommands


def cmd_check(args, out: Out):
    net = _load(args.model)
    verdict = check_assumption2(net)
    rows = list(verdict.partition.describe(net.names))
    rows.append(("mean_production", verdict.mean_production))
    for i, why in verdict.violations:
        rows.append((f"violation:{net.names[i]}", why))
    rows.append(("verdict", "Assumption 2: " + ("satisfied" if verdict.satisfied else "violated")))
    out.table(["key", "value"], rows)
    if args.alpha:
        x = _state(net, args.anchor)
        try:
            est = estimate_alpha(net, x, args.alpha_max, args.replicas, args.seed, args.threads)
            table, note = est.table, est.note or f"alpha={est.alpha}"
        except BudgetExhausted as exc:
            table, note = exc.table, f"no alpha <= {args.alpha_max} passed"
        out.table(["alpha", "estimate", "ucb99"], [(r.alpha, r.estimate, r.ucb99) for r in table])
        out.table(["note"], [(note,)])
    return 0 if verdict.satisfied else EXIT_REJECTED


def cmd_simulate_env(args, out: Out):
    net = _load(args.model)
    x0 = _state(net, args.x0)
    path = simulate_env(net.env, x0, args.horizon, args.seed)
    out.table(["t_start", "state", "holding"], _path_rows(net, path))
    if args.returns is not None:
        ret = return_index(path, _state(net, args.returns))
        out.table(["k", "tau"], list(enumerate(ret.taus.tolist())))
    return 0


def cmd_phi(args, out: Out):
    net = _load(args.model)
    path = _read_path(net, args.path)
    u = 0.0 if args.from_ is None else args.from_
    t = path.total_time if args.to is None else args.to
    p = Propagator(net).propagate(path, u, t)
    header = ["species"] + [f"phi:{n}" for n in net.names] + ["w"]
    out.table(header, [[net.names[i], *p.phi[i].tolist(), p.w[i]] for i in range(net.d)])
    return 0


def _finite_path(net, args) -> EnvPath:
    if args.path:
        return _read_path(net, args.path)
    return simulate_env(net.env, _state(net, args.x0), args.t, args.seed)


def cmd_finite_time(args, out: Out):
    net = _load(args.model)
    z0 = _ints(args.z0, net.d, "--z0")
    path = _finite_path(net, args)
    if args.pmf is not None:
        zmax = _ints(args.pmf, None, "--pmf")
        zmax = np.broadcast_to(zmax, (net.d,)) if zmax.size == 1 else zmax
        if zmax.size != net.d:
            raise UsageError(f"--pmf needs 1 or {net.d} entries")
        tab = pmf_table(net, path, args.t, z0, zmax, cap=args.cap)
        rows = [(*idx, p) for idx, p in np.ndenumerate(tab)]
        out.table([*net.names, "p"], rows)
        return 0
    n = args.sample or 10_000
    Z = sample_Z(net, path, args.t, z0, args.seed, n, args.threads)
    hist = empirical_pmf(Z)
    rows = [(*idx, int(round(p * n)), p) for idx, p in np.ndenumerate(hist) if p > 0]
    out.table([*net.names, "count", "freq"], rows)
    return 0


def _summary_rows(net, Z: np.ndarray, q_max: int = 3):
    rows = []
    for i, name in enumerate(net.names):
        z = Z[:, i].astype(float)
        rows.append(("mean", name, z.mean()))
        rows.append(("variance", name, z.var(ddof=1) if len(z) > 1 else 0.0))
        f = np.ones_like(z)
        for q in range(1, q_max + 1):
            f = f * (z - q + 1)
            rows.append((f"factorial_moment_{q}", name, f.mean()))
    return rows


def cmd_stationary(args, out: Out):
    net = _load(args.model)
    x = _state(net, args.anchor)
    cert = None
    if args.certificate or args.eps is not None:
        cert = error_certificate(net, x, args.seed, args.cert_replicas, args.threads)
    if args.n is not None:
        n = args.n
    elif args.eps is not None:
        n = cert.n_for(args.eps)
    else:
        raise UsageError("give --n or --eps")
    counts = _ints(args.components, None, "--components") if args.components else None
    atoms = sre_sample(net, x, n, args.seed, args.samples, args.threads)
    from .rng import stream

    Z = compose_counts(net, atoms, counts, stream(args.seed, 1 << 40))
    if not args.summary_only:
        out.table(list(net.names), Z.tolist())
    out.table(["stat", "species", "value"], [("iterations", "", n), *_summary_rows(net, Z)])
    if cert is not None:
        rows = [("M_hat", cert.M_hat), ("r_hat", cert.r_hat), ("r_low", cert.r_low), ("r_high", cert.r_high)]
        out.table(["quantity", "value"], rows)
        out.table(["n", "bound"], cert.table(sorted({1, 5, 10, 20, 40, n})))
    return 0


def cmd_moments(args, out: Out):
    net = _load(args.model)
    method = args.method or ("exact" if net.d == 1 else "mc")
    tab = factorial_moments(net, args.q, args.cycles, args.seed, method=method, threads=args.threads)
    out.table(["q", "m_q", "se"], list(zip(tab.q, tab.m, tab.se)))
    return 0


def _caps(net, args):
    cap = _ints(args.cap, None, "--cap")
    if cap.size == 1:
        cap = np.full(net.d, int(cap[0]))
    if cap.size != net.d:
        raise UsageError(f"--cap needs 1 or {net.d} entries")
    return cap


def cmd_oracle(args, out: Out):
    net = _load(args.model)
    space = TruncatedJointSpace.for_network(net, _caps(net, args))
    z0 = _ints(args.z0, net.d, "--z0")
    x0 = _state(net, args.x0)
    if args.stationary:
        res = stationary_pmf(net, space, (x0, tuple(z0)))
        rows = [(net.env.states[x], *z, float(res.pmf[space.index(x, z)])) for x in range(space.n_env) for z in map(tuple, space.lattice())]
        out.table(["state", *net.names, "p"], rows)
        out.table(["boundary_mass", "residual"], [(res.boundary_mass, res.residual)])
        return 0
    if args.t is None:
        raise UsageError("give --t or --stationary")
    G = build_joint_generator(net, space)
    p = transient_pmf(G, space.index(x0, z0), args.t)
    rows = [(net.env.states[x], *z, float(p[space.index(x, z)])) for x in range(space.n_env) for z in map(tuple, space.lattice())]
    out.table(["state", *net.names, "p"], rows)
    out.table(["overflow"], [(float(p[-1]),)])
    return 0


def cmd_compare(args, out: Out):
    net = _load(args.model)
    z0 = _ints(args.z0, net.d, "--z0")
    x0 = _state(net, args.x0)
    space = TruncatedJointSpace.for_network(net, _caps(net, args))
    if args.stationary:
        res = stationary_pmf(net, space, (x0, tuple(z0)))
        ref = res.conditional(x0)
        atoms = sre_sample(net, x0, args.n, args.seed, args.replicas, args.threads)
        from .rng import stream

        Z = compose_counts(net, atoms, None, stream(args.seed, 1 << 40))
        out.table(["oracle", "sampler", "anchor", "replicas", "tv"], [("stationary", "sre", net.env.states[x0], args.replicas, tv_distance(ref, empirical_pmf(Z)))])
        return 0
    G = build_joint_generator(net, space)
    p = transient_pmf(G, space.index(x0, z0), args.t)
    ref = p[:-1].reshape(space.n_env, -1).sum(axis=0).reshape(space.box)
    _, paths = ssa_batch(net, x0, z0, args.t, args.replicas, args.seed, args.threads)
    Z = sample_Z_paths(net, paths, args.t, z0, args.seed + 1, threads=args.threads)
    out.table(["oracle", "sampler", "t", "replicas", "tv", "overflow"], [("cme", "mixture", args.t, args.replicas, tv_distance(ref, empirical_pmf(Z)), float(p[-1]))])
    return 0


def cmd_fixtures(args, out: Out):
    if args.action == "list":
        out.table(["name", "file"], [(n, library.path(n).name) for n in library.names()])
    elif args.action in ("show", "path"):
        if not args.name:
            raise UsageError(f"fixtures {args.action} needs a name")
        try:
            p = library.path(args.name)
        except KeyError as exc:
            raise UsageError(str(exc)) from exc
        if args.action == "path":
            out.buf.write(f"{p}\n")
        else:
            out.buf.write(p.read_text())
    return 0


# ----------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    common = _Parser(add_help=False)
    common.add_argument("--seed", type=int, default=DEFAULT_SEED, help=f"64-bit seed (default {DEFAULT_SEED})")
    common.add_argument("--threads", type=int, default=None, help="worker threads (default: $ENVNET_THREADS or 1)")
    common.add_argument("--out", default=None, help="write CSV here instead of stdout")

    p = _Parser(prog="envnet", description="Reaction networks in a Markov-modulated environment.")
    sub = p.add_subparsers(dest="command", parser_class=_Parser)
    sub.required = True

    s = sub.add_parser("check", parents=[common], help="species partition and ergodicity verdict")
    s.add_argument("model")
    s.add_argument("--alpha", action="store_true", help="run the Monte Carlo alpha search")
    s.add_argument("--anchor", default=None)
    s.add_argument("--alpha-max", type=int, default=5)
    s.add_argument("--replicas", type=int, default=10_000)
    s.set_defaults(fn=cmd_check, stochastic=True)

    s = sub.add_parser("simulate-env", parents=[common], help="environment path as CSV")
    s.add_argument("model")
    s.add_argument("--x0", default=None)
    s.add_argument("--horizon", type=float, required=True)
    s.add_argument("--returns", default=None, help="append return times to this state")
    s.set_defaults(fn=cmd_simulate_env, stochastic=True)

    s = sub.add_parser("phi", parents=[common], help="propagator along a path file")
    s.add_argument("model")
    s.add_argument("--path", required=True, help="CSV with t_start,state,holding")
    s.add_argument("--from", dest="from_", type=float, default=None)
    s.add_argument("--to", type=float, default=None)
    s.set_defaults(fn=cmd_phi, stochastic=False)

    s = sub.add_parser("finite-time", parents=[common], help="law of the counts at time t given a path")
    s.add_argument("model")
    s.add_argument("--t", type=float, required=True)
    s.add_argument("--z0", default=None)
    s.add_argument("--x0", default=None)
    s.add_argument("--path", default=None, help="path CSV (default: simulate one)")
    g = s.add_mutually_exclusive_group()
    g.add_argument("--sample", type=int, default=None)
    g.add_argument("--pmf", default=None, help="largest count per species")
    s.add_argument("--cap", type=int, default=64)
    s.set_defaults(fn=cmd_finite_time, stochastic=True)

    s = sub.add_parser("stationary", parents=[common], help="samples from the stationary law given the anchor")
    s.add_argument("model")
    s.add_argument("--anchor", default=None)
    s.add_argument("--n", type=int, default=None)
    s.add_argument("--eps", type=float, default=None)
    s.add_argument("--samples", type=int, default=10_000)
    s.add_argument("--components", default=None, help="molecule counts per closed component")
    s.add_argument("--certificate", action="store_true")
    s.add_argument("--cert-replicas", type=int, default=10_000)
    s.add_argument("--summary-only", action="store_true")
    s.set_defaults(fn=cmd_stationary, stochastic=True)

    s = sub.add_parser("moments", parents=[common], help="stationary factorial moments")
    s.add_argument("model")
    s.add_argument("--q", type=int, default=3)
    s.add_argument("--cycles", type=int, default=100_000)
    s.add_argument("--method", choices=["exact", "independent", "mc"], default=None, help="default: exact for one species, else mc")
    s.set_defaults(fn=cmd_moments, stochastic=True)

    s = sub.add_parser("oracle", parents=[common], help="master-equation pmf on a truncated lattice")
    s.add_argument("model")
    s.add_argument("--t", type=float, default=None)
    s.add_argument("--stationary", action="store_true")
    s.add_argument("--cap", required=True)
    s.add_argument("--x0", default=None)
    s.add_argument("--z0", default=None)
    s.set_defaults(fn=cmd_oracle, stochastic=False)

    s = sub.add_parser("compare", parents=[common], help="TV distance between oracle and sampler")
    s.add_argument("model")
    s.add_argument("--t", type=float, default=2.0)
    s.add_argument("--stationary", action="store_true")
    s.add_argument("--n", type=int, default=30)
    s.add_argument("--cap", default="60")
    s.add_argument("--x0", default=None)
    s.add_argument("--z0", default=None)
    s.add_argument("--replicas", type=int, default=20_000)
    s.set_defaults(fn=cmd_compare, stochastic=True)

    s = sub.add_parser("fixtures", parents=[common], help="shipped example models")
    s.add_argument("action", choices=["list", "show", "path"])
    s.add_argument("name", nargs="?")
    s.set_defaults(fn=cmd_fixtures, stochastic=False)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    if args.stochastic:
        sys.stderr.write(f"seed={args.seed}\n")
    out = Out()
    try:
        code = args.fn(args, out)
    except UsageError as exc:
        parser.print_usage(sys.stderr)
        sys.stderr.write(f"envnet: error: {exc}\n")
        return EXIT_USAGE
    except (ModelError, PreconditionFailed) as exc:
        sys.stderr.write(f"envnet: model rejected: {exc}\n")
        return EXIT_REJECTED
    except NUMERICAL as exc:
        sys.stderr.write(f"envnet: numerical failure: {type(exc).__name__}: {exc}\n")
        return EXIT_NUMERICAL
    text = out.buf.getvalue()
    if args.out:
        Path(args.out).write_text(text, encoding="utf-8")
    else:
        sys.stdout.write(text)
    return code


if __name__ == "__main__":
    raise SystemExit(main())
