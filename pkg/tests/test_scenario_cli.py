import csv
import json
import subprocess
import sys
import textwrap

import numpy as np
import pytest

from resilient_ne.cli import main
from resilient_ne.scenario import ScenarioError, deep_merge, load_scenario, resolve_path

from conftest import HVAC_NE_PUBLISHED

HVAC_INCLUDES = ('include = ["fragments/hvac_game.toml", "fragments/five_node_graph.toml", '
                 '"fragments/five_player_init.toml"]\n')


def write(tmp_path, body, name="s.toml"):
    p = tmp_path / name
    p.write_text(textwrap.dedent(body))
    return p


def small_hvac(tmp_path, extra="", t_end=5.0):
    return write(tmp_path, HVAC_INCLUDES + f"""
[gains]
kappa = 10.0
[sim]
t_end = {t_end}
step = 1e-2
{extra}
""")


# loading and diagnostics


def test_deep_merge():
    assert deep_merge({"a": {"b": 1, "c": 2}, "d": 1}, {"a": {"c": 3}}) == {"a": {"b": 1, "c": 3}, "d": 1}


def test_bundled_scenarios_load():
    for name in ["hvac_attackfree", "hvac_certified", "hvac_heavy", "hvac_baseline_certified", "hvac_cycle",
                 "cournot_resilient", "cournot_baseline_attacked", "nonquadratic"]:
        sc = load_scenario(resolve_path(f"{name}.toml"))
        assert sc.kappa > 0
        assert sc.resolved["sim"]["t_end"] > 0


def test_missing_kappa_names_field(tmp_path, capsys):
    p = write(tmp_path, HVAC_INCLUDES + "[sim]\nt_end = 1.0\n")
    assert main(["run", str(p), "--out", str(tmp_path / "o"), "--quiet"]) == 2
    assert "[gains].kappa" in capsys.readouterr().err


def test_malformed_toml(tmp_path, capsys):
    p = write(tmp_path, "[gains\nkappa = 1\n")
    assert main(["oracle", str(p)]) == 2
    assert "line" in capsys.readouterr().err


def test_wrong_type_names_field(tmp_path, capsys):
    p = small_hvac(tmp_path).read_text().replace("kappa = 10.0", 'kappa = "fast"')
    q = write(tmp_path, p, "t.toml")
    assert main(["oracle", str(q)]) == 2
    assert "[gains].kappa" in capsys.readouterr().err


def test_bad_edge_is_named(tmp_path, capsys):
    p = write(tmp_path, """
    include = ["fragments/hvac_game.toml", "fragments/five_player_init.toml"]
    [graph]
    nodes = 5
    edges = [[1, 2], [2, 3], [3, 4], [4, 5], [5, 1], [2, 2]]
    [gains]
    kappa = 10.0
    """)
    assert main(["oracle", str(p)]) == 2
    assert "1->1" in capsys.readouterr().err


def test_weakly_connected_graph_rejected(tmp_path, capsys):
    p = write(tmp_path, """
    include = ["fragments/hvac_game.toml", "fragments/five_player_init.toml"]
    [graph]
    nodes = 5
    edges = [[1, 2], [2, 3], [3, 4], [4, 5]]
    [gains]
    kappa = 10.0
    """)
    assert main(["oracle", str(p)]) == 2
    assert "strongly connected" in capsys.readouterr().err


def test_include_cycle(tmp_path, capsys):
    write(tmp_path, 'include = ["b.toml"]\n', "a.toml")
    write(tmp_path, 'include = ["a.toml"]\n', "b.toml")
    assert main(["oracle", str(tmp_path / "a.toml")]) == 2
    assert "include cycle" in capsys.readouterr().err


def test_schedule_on_missing_edge(tmp_path, capsys):
    p = small_hvac(tmp_path, """
[schedule]
mode = "explicit"
[[schedule.channel]]
sender = 1
receiver = 5
intervals = [[1.0, 0.5]]
""")
    assert main(["run", str(p), "--out", str(tmp_path / "o"), "--quiet"]) == 2
    assert "1->5" in capsys.readouterr().err


def test_invalid_budget(tmp_path, capsys):
    p = small_hvac(tmp_path, """
[schedule]
mode = "generated"
[schedule.budget]
N0 = 1.0
T_f = 4.0
T0 = 1.0
T_a = 0.5
""")
    assert main(["run", str(p), "--out", str(tmp_path / "o"), "--quiet"]) == 2
    assert "T_a" in capsys.readouterr().err


# run


def test_run_writes_outputs(tmp_path):
    p = small_hvac(tmp_path, """
[schedule]
mode = "explicit"
[schedule.budget]
N0 = 2.0
T_f = 2.0
T0 = 1.0
T_a = 2.0
[[schedule.channel]]
sender = 1
receiver = 2
intervals = [[1.0, 0.5]]
""")
    out = tmp_path / "o"
    assert main(["run", str(p), "--out", str(out), "--quiet"]) == 0
    summary = json.loads((out / "summary.json").read_text())
    report = json.loads((out / "rate_report.json").read_text())
    # both JSON files embed the resolved configuration, defaults included
    for doc in (summary, report):
        assert doc["config"]["gains"]["kappa"] == 10.0
        assert doc["config"]["gains"]["alpha"] == 1.0
        assert doc["config"]["sim"]["divergence_guard"] == 1e9
    assert summary["attack_intervals"] == 1
    assert summary["attacked_time"] == pytest.approx(0.5)
    assert summary["budget_check"]["duration_ok"]
    with open(out / "trace.csv") as fh:
        rows = list(csv.reader(fh))
    assert len(rows) == 502
    modes = [r[1] for r in rows[1:]]
    assert modes[100:150] == ["attack"] * 50 and modes[150] == "safe"


def test_run_is_deterministic(tmp_path):
    p = small_hvac(tmp_path, """
[schedule]
mode = "generated"
bursts = "subset"
[schedule.budget]
N0 = 1.0
T_f = 1.0
T0 = 0.5
T_a = 3.0
""")
    for d in ("a", "b"):
        assert main(["run", str(p), "--out", str(tmp_path / d), "--seed", "7", "--quiet"]) == 0
    a, b = ((tmp_path / d / "trace.csv").read_bytes() for d in ("a", "b"))
    assert a == b
    summary = json.loads((tmp_path / "a" / "summary.json").read_text())
    assert summary["seed"] == 7 and summary["attack_intervals"] > 0
    assert main(["run", str(p), "--out", str(tmp_path / "c"), "--seed", "8", "--quiet"]) == 0
    assert (tmp_path / "c" / "trace.csv").read_bytes() != a


def test_hvac_attackfree_bundled(tmp_path):
    out = tmp_path / "o"
    assert main(["run", "hvac_attackfree.toml", "--out", str(out), "--quiet"]) == 0
    summary = json.loads((out / "summary.json").read_text())
    assert summary["final_relative_error"] < 1e-3
    assert summary["converged"]
    report = json.loads((out / "rate_report.json").read_text())
    # below the gain bound: the report exists and records the failed condition
    assert report["conditions_met"]["kappa"] is False
    assert report["kappa_min"] == pytest.approx(50.528, abs=1e-3)


def test_cournot_baseline_not_converged(tmp_path):
    out = tmp_path / "o"
    assert main(["run", "cournot_baseline_attacked.toml", "--out", str(out), "--quiet"]) == 0
    summary = json.loads((out / "summary.json").read_text())
    assert not summary["converged"]
    assert summary["certificate"] is False


def test_divergence_exit_code(tmp_path):
    p = write(tmp_path, """
    [game]
    name = "polynomial"
    [game.params]
    action_dims = [1, 1]
    terms = [[[-0.5, [2, 0]], [1.0, [1, 0]]], [[-0.5, [0, 2]], [1.0, [0, 1]]]]
    [graph]
    kind = "cycle"
    nodes = 2
    [init]
    own = [2.0, 2.0]
    [gains]
    kappa = 1.0
    [sim]
    t_end = 100.0
    step = 1e-2
    divergence_guard = 1e4
    """)
    out = tmp_path / "o"
    assert main(["run", str(p), "--out", str(out), "--quiet"]) == 3
    assert json.loads((out / "summary.json").read_text())["diverged"]
    assert (out / "trace.csv").exists()


def test_plot_flag(tmp_path):
    p = small_hvac(tmp_path)
    assert main(["run", str(p), "--out", str(tmp_path / "o"), "--quiet", "--plot"]) == 0
    assert (tmp_path / "o" / "trace.png").read_bytes()[:4] == b"\x89PNG"
    assert main(["run", str(p), "--out", str(tmp_path / "n"), "--quiet"]) == 0
    assert not (tmp_path / "n" / "trace.png").exists()


# oracle and schedule verification


def test_oracle_hvac(capsys):
    assert main(["oracle", "hvac_attackfree.toml"]) == 0
    out = capsys.readouterr().out
    x = np.array(out.split("[")[1].split("]")[0].split(), dtype=float)
    np.testing.assert_allclose(x, HVAC_NE_PUBLISHED, atol=5e-4)
    assert "kappa bound = 50.5284" in out
    assert "DISCREPANCY" not in out


def test_oracle_cournot(capsys):
    assert main(["oracle", "cournot_resilient.toml"]) == 0
    out = capsys.readouterr().out
    x = np.array(out.split("[")[1].split("]")[0].split(), dtype=float)
    np.testing.assert_allclose(x, [110, 106, 102, 98, 94, 90], atol=1e-6)


def test_oracle_nonquadratic_flags_reference(capsys):
    assert main(["oracle", "nonquadratic.toml"]) == 0
    out = capsys.readouterr().out
    assert "DISCREPANCY" in out and "[1, 2, 4]" in out
    assert "no gain bound" in out


def test_verify_schedule(capsys):
    assert main(["verify-schedule", "hvac_certified.toml"]) == 0
    report = json.loads(capsys.readouterr().out)
    assert report["frequency_ok"] and report["duration_ok"]
    assert set(report["budget"]) == {"N0", "T_f", "T0", "T_a"}


def test_verify_schedule_without_budget(capsys):
    assert main(["verify-schedule", "hvac_attackfree.toml"]) == 2


# sweeps


def test_kappa_sweep(tmp_path):
    out = tmp_path / "sw"
    code = main(["sweep", "hvac_attackfree.toml", "--axis", "kappa", "--values", "1,5,10",
                 "--out", str(out), "--step", "1e-2", "--quiet", "--plot"])
    assert code == 0
    with open(out / "sweep.csv") as fh:
        rows = list(csv.DictReader(fh))
    assert [r["value"] for r in rows] == ["1", "5", "10"]
    etas = [float(r["eta_hat"]) for r in rows]
    assert etas[0] < etas[1] < etas[2]
    assert (out / "sweep.png").exists()
    assert (out / "kappa_5" / "summary.json").exists()


def test_sweep_aborts_on_bad_member(tmp_path, capsys):
    code = main(["sweep", "hvac_attackfree.toml", "--axis", "kappa", "--values", "1,-3",
                 "--out", str(tmp_path / "sw"), "--quiet"])
    assert code == 2
    assert "kappa = -3" in capsys.readouterr().err
    assert not (tmp_path / "sw" / "kappa_1").exists()


def test_console_script_entry_point(tmp_path):
    r = subprocess.run([sys.executable, "-m", "resilient_ne.cli", "oracle", "hvac_attackfree.toml"],
                       capture_output=True, text=True)
    assert r.returncode == 0 and "x* =" in r.stdout
