import csv
import io

import numpy as np
import pytest

from envnet import cli, library
from envnet.envpath import simulate_env
from envnet.propagator import propagate

from conftest import load_fixture


def run(capsys, *argv):
    code = cli.main(list(argv))
    out = capsys.readouterr()
    return code, out.out, out.err


def tables(text):
    return [list(csv.reader(io.StringIO(block))) for block in text.strip().split("\n\n")]


def test_check_golden(capsys):
    code, out, err = run(capsys, "check", "fixtures/partition-example")
    assert code == 0
    rows = dict(map(tuple, tables(out)[0][1:]))
    assert rows["closed_1"] == "S4 S5" and rows["produced"] == "S1 S2" and rows["transient"] == "S3"
    assert rows["verdict"] == "Assumption 2: satisfied"
    assert err.startswith("seed=")


def test_check_alpha_table(capsys):
    code, out, _ = run(capsys, "check", "alpha-chain", "--alpha", "--anchor", "1", "--replicas", "2000")
    t = tables(out)
    assert t[1][0] == ["alpha", "estimate", "ucb99"]
    assert [r[0] for r in t[1][1:]] == ["1", "2"]
    assert t[2][1] == ["alpha=2"]


def test_check_violation_exit_code(tmp_path, capsys):
    model = tmp_path / "leaky.toml"
    model.write_text(
        '[species]\nnames = ["A", "B"]\n[environment]\nstates = ["a"]\ngenerator = [[0.0]]\n'
        '[[reactions]]\nequation = "0 -> A"\nrate = [1.0]\n[[reactions]]\nequation = "A -> B"\nrate = [1.0]\n'
    )
    code, out, _ = run(capsys, "check", str(model))
    assert code == 1
    assert "Assumption 2: violated" in out


def test_model_rejection_exit_code(capsys):
    code, _, err = run(capsys, "check", "explosive-growth")
    assert code == 1 and "bimolecular" in err


def test_numerical_failure_exit_code(capsys):
    code, _, err = run(capsys, "stationary", "alpha-chain", "--anchor", "1", "--eps", "1e-3", "--cert-replicas", "500")
    assert code == 2 and "AlphaNotOne" in err


@pytest.mark.parametrize(
    "argv",
    [["nonsense"], ["check"], ["finite-time", "case-study-m1"], ["oracle", "case-study-m1", "--cap", "5", "--z0", "x"]],
)
def test_usage_errors(capsys, argv):
    code, _, err = run(capsys, *argv)
    assert code == cli.EXIT_USAGE
    assert "usage" in err


def test_unknown_model_is_usage_error(capsys):
    code, _, _ = run(capsys, "check", "no-such-model")
    assert code == cli.EXIT_USAGE


def test_simulate_then_phi(tmp_path, capsys):
    path_file = tmp_path / "path.csv"
    code, _, _ = run(capsys, "simulate-env", "geneN2", "--horizon", "4", "--seed", "9", "--out", str(path_file))
    assert code == 0
    code, out, _ = run(capsys, "phi", "geneN2", "--path", str(path_file), "--from", "0.5", "--to", "3")
    net = load_fixture("geneN2")
    ref = propagate(net, simulate_env(net.env, 0, 4.0, 9), 0.5, 3.0)
    row = tables(out)[0][1]
    assert float(row[1]) == pytest.approx(ref.phi[0, 0], rel=1e-14)
    assert float(row[2]) == pytest.approx(ref.w[0], rel=1e-14)


def test_finite_time_pmf_sums(capsys):
    code, out, _ = run(capsys, "finite-time", "case-study-m2", "--t", "1", "--z0", "1", "--pmf", "40")
    p = np.array([float(r[1]) for r in tables(out)[0][1:]])
    assert code == 0 and p.sum() == pytest.approx(1.0, abs=1e-8)


def test_stationary_components_and_summary(capsys):
    code, out, _ = run(capsys, "stationary", "conserved-pair", "--n", "10", "--samples", "500", "--components", "3")
    samples, summary = tables(out)[:2]
    assert code == 0
    assert all(int(a) + int(b) == 3 for a, b in samples[1:])
    assert summary[0] == ["stat", "species", "value"]


def test_moments_output(capsys):
    code, out, _ = run(capsys, "moments", "case-study-m1", "--cycles", "4000")
    t = tables(out)[0]
    assert code == 0 and t[0] == ["q", "m_q", "se"] and len(t) == 5


def test_oracle_stationary(capsys):
    code, out, _ = run(capsys, "oracle", "birth-death-clone", "--stationary", "--cap", "30")
    probs = np.array([float(r[2]) for r in tables(out)[0][1:]])
    assert code == 0 and probs.sum() == pytest.approx(1.0)


def test_compare_row(capsys):
    code, out, _ = run(capsys, "compare", "case-study-m1", "--t", "1", "--replicas", "4000")
    t = tables(out)[0]
    assert code == 0 and float(t[1][4]) < 0.05


def test_fixtures_commands(capsys):
    code, out, _ = run(capsys, "fixtures", "list")
    assert code == 0 and len(tables(out)[0]) == len(library.names()) + 1
    code, out, _ = run(capsys, "fixtures", "path", "geneN1")
    assert out.strip() == str(library.path("geneN1"))
    code, out, _ = run(capsys, "fixtures", "show", "geneN1")
    assert "[environment]" in out


def test_seed_changes_output(capsys):
    _, a, _ = run(capsys, "simulate-env", "case-study-m1", "--horizon", "5", "--seed", "1")
    _, b, _ = run(capsys, "simulate-env", "case-study-m1", "--horizon", "5", "--seed", "1")
    _, c, _ = run(capsys, "simulate-env", "case-study-m1", "--horizon", "5", "--seed", "2")
    assert a == b and a != c
