import argparse

import numpy as np
import pytest

from distfilt import cli
from distfilt.errors import FormatError, ScenarioInvalid, UnknownParameter
from distfilt.network import metropolis_weights, path_topology, write_combination_csv

from conftest import SCENARIOS

SMALL = """\
version = 1
name = "small"
seed = 3
horizon = 20
realisations = 2

[model]
kind = "tanh"
mask_strategy = "round_robin"

[network]
source = "complete"
agents = 4
weights = "uniform"

[gain]
rule = "gradient"
zeta = 0.1
"""


@pytest.fixture
def small(tmp_path):
    p = tmp_path / "small.cfg"
    p.write_text(SMALL)
    return p


@pytest.mark.parametrize("name", ["tanh_sm7.cfg", "particle_box.cfg"])
def test_bundled_scenarios_round_trip(name):
    first = cli.load_scenario(SCENARIOS / name)
    text = cli.dump_scenario(first)
    second = cli.parse_scenario(text, SCENARIOS / name)
    assert first == second
    assert cli.dump_scenario(second) == text


def test_unknown_key_reported_with_line(tmp_path):
    with pytest.raises(FormatError) as err:
        cli.parse_scenario(SMALL.replace("zeta = 0.1", "zeta = 0.1\nmomentum = 2"), tmp_path / "x.cfg")
    assert err.value.line == 19
    with pytest.raises(FormatError) as err:
        cli.parse_scenario("colour = 1\n" + SMALL)
    assert err.value.line == 1


def test_missing_seed_is_an_error():
    with pytest.raises(FormatError, match="seed"):
        cli.parse_scenario(SMALL.replace("seed = 3\n", ""))


def test_syntax_error_has_line_number():
    with pytest.raises(FormatError) as err:
        cli.parse_scenario(SMALL.replace("horizon = 20", "horizon = = 20"))
    assert err.value.line == 4


def test_wrong_type_and_bad_version():
    with pytest.raises(FormatError):
        cli.parse_scenario(SMALL.replace("seed = 3", 'seed = "3"'))
    with pytest.raises(ScenarioInvalid):
        cli.parse_scenario(SMALL.replace("version = 1", "version = 9"))


def test_overrides(small):
    sc = cli.load_scenario(small)
    out = cli.apply_overrides(sc, ["model.zeta=0.3", "horizon=7", "network.weights=metropolis"])
    assert out.gain.zeta == 0.3 and out.horizon == 7 and out.network.weights == "metropolis"
    assert sc.gain.zeta == 0.1
    with pytest.raises(UnknownParameter):
        cli.apply_overrides(sc, ["colour=1"])
    with pytest.raises(ScenarioInvalid):
        cli.apply_overrides(sc, ["gain.zeta=2.0"])


def _all_actions(parser):
    for action in parser._actions:
        yield parser, action
        if isinstance(action, argparse._SubParsersAction):
            for sub in action.choices.values():
                yield from _all_actions(sub)


def test_help_lists_every_flag(capsys):
    parser = cli.build_parser()
    for owner, action in _all_actions(parser):
        if isinstance(action, (argparse._HelpAction, argparse._SubParsersAction)):
            continue
        assert action.help, f"undocumented argument {action.dest}"
        help_text = owner.format_help()
        for opt in action.option_strings:
            assert opt in help_text
    text = parser.format_help()
    for flag in ("--out", "--seed", "--realisations", "--quiet"):
        assert flag in text
    for command in ("run", "check-network", "analyze", "sweep"):
        assert command in text


def test_run_writes_artifacts(small, tmp_path):
    out = tmp_path / "out"
    code = cli.main(["run", str(small), "--out", str(out), "--quiet", "--dump-trajectories", "2"])
    assert code == 0
    for suffix in ("summary.csv", "report.txt", "g_delta.csv", "discrepancy.csv", "scenario.cfg",
                   "traj_0000.csv", "traj_0001.csv"):
        assert (out / f"small_{suffix}").is_file()
    # the written scenario parses back to the run's scenario
    again = cli.load_scenario(out / "small_scenario.cfg")
    assert again.seed == 3


def test_global_flags_after_command(small, tmp_path):
    out = tmp_path / "o"
    assert cli.main(["run", str(small), "--realisations", "1", "--seed", "9", "--out", str(out), "--quiet"]) == 0
    written = cli.load_scenario(out / "small_scenario.cfg")
    assert written.realisations == 1 and written.seed == 9


def test_run_missing_file(tmp_path, capsys):
    assert cli.main(["run", str(tmp_path / "nope.cfg")]) == 2
    assert "error" in capsys.readouterr().err


def test_run_reports_divergence(tmp_path):
    p = tmp_path / "div.cfg"
    p.write_text(SMALL.replace('kind = "tanh"\nmask_strategy = "round_robin"', 'kind = "linear"')
                 .replace('rule = "gradient"\nzeta = 0.1', 'rule = "fixed"\ngain = [[3.0]]')
                 .replace("horizon = 20", "horizon = 200"))
    assert cli.main(["run", str(p), "--out", str(tmp_path), "--quiet"]) == 3


def test_check_network(tmp_path, sm7_path, capsys):
    assert cli.main(["check-network", str(sm7_path), "--weights", "metropolis"]) == 0
    bad = tmp_path / "d.txt"
    bad.write_text("agents 4\nedge 0 1\nedge 2 3\n")
    assert cli.main(["check-network", str(bad)]) == 1
    assert "disconnected" in capsys.readouterr().out
    topo = tmp_path / "p.txt"
    topo.write_text("agents 3\nedge 0 1\nedge 1 2\n")
    csv = tmp_path / "c.csv"
    c = metropolis_weights(path_topology(3))
    write_combination_csv(c, csv)
    assert cli.main(["check-network", str(topo), "--weights", str(csv)]) == 0
    text = csv.read_text().splitlines()
    text[1] = "0.9,0.3,0.0"
    csv.write_text("\n".join(text) + "\n")
    capsys.readouterr()
    assert cli.main(["check-network", str(topo), "--weights", str(csv)]) == 1
    assert "FAIL row_sums" in capsys.readouterr().out


def test_analyze_complete_graph_traces(small, tmp_path):
    out = tmp_path / "t"
    assert cli.main(["run", str(small), "--out", str(out), "--quiet", "--dump-trajectories", "2"]) == 0
    rep, delta, mse = cli.analyze_directory(out)
    assert np.nanmax(delta) < 1e-20
    # window products come from the stored g_Delta CSV
    assert len(rep.g_delta) == 20 and len(rep.theorem3_products) == 20
    assert cli.main(["analyze", str(out), "--quiet"]) == 0
    assert (out / "analysis_report.txt").is_file()


def test_analyze_errors(tmp_path, capsys):
    empty = tmp_path / "empty"
    empty.mkdir()
    with pytest.raises(FormatError):
        cli.analyze_directory(empty)
    assert cli.main(["analyze", str(empty)]) == 2
    bad = tmp_path / "bad.csv"
    bad.write_text("step,agent,component,truth,estimate,phi\n0,-1,0,1.0,1.0,\n0,0,0,x,1.0,\n")
    with pytest.raises(FormatError) as err:
        cli.read_trajectory_csv(bad)
    assert err.value.line == 3


def test_sweep_command(small, tmp_path):
    out = tmp_path / "s"
    assert cli.main(["sweep", str(small), "gain.zeta", "0.05", "0.1", "--out", str(out), "--quiet"]) == 0
    assert (out / "small_gain-zeta_0.05_summary.csv").is_file()
    assert cli.main(["sweep", str(small), "seed", "1", "--out", str(out), "--quiet"]) == 2
