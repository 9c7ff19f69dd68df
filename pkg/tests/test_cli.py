"""Command line driver: exit codes, artifact content, manifests,
determinism and report aggregation.

Closed-form anchors reused from the library tests: the branched
two-sheet benchmark has excess ratio 3*scale*r at radius r, the branch
separation integral is 4 pi s^5 / 5, and the two-valued square-root
minimizer energy is 2 pi.
"""

import hashlib
import json
import math
import shutil
import subprocess
import sys

import numpy as np
import pytest

from qlip import cli
from qlip import qfield as qf


def _read(path):
    return json.loads(path.read_text())


def test_unknown_command_exit_2():
    assert cli.main(["frobnicate"]) == 2
    assert cli.main([]) == 2


def test_help_exit_0(capsys):
    assert cli.main(["--help"]) == 0
    assert "gen-current" in capsys.readouterr().out


def test_malformed_config_exit_3(tmp_path):
    bad = tmp_path / "bad.json"
    bad.write_text("{nope")
    out = str(tmp_path / "a")
    assert cli.main(["gen-current", "flat", "--config", str(bad),
                     "--out", out]) == 3
    wrong = tmp_path / "wrong.json"
    wrong.write_text(json.dumps({"schema": 99}))
    assert cli.main(["gen-current", "flat", "--config", str(wrong),
                     "--out", out]) == 3
    extra = tmp_path / "extra.json"
    extra.write_text(json.dumps({"schema": 1, "bogus": 2}))
    assert cli.main(["gen-current", "flat", "--config", str(extra),
                     "--out", out]) == 3
    assert cli.main(["gen-current", "flat", "--config",
                     str(tmp_path / "absent.json"), "--out", out]) == 3


def test_gen_current_w32_scale(tmp_path):
    out = tmp_path / "run"
    assert cli.main(["gen-current", "w32", "--scale", "0.125",
                     "--res", "65", "--out", str(out)]) == 0
    blob = _read(out / "current.json")
    # excess over the unit cylinder scales linearly in the sheet scale
    assert blob["metrics"]["excess_ratio"] == pytest.approx(0.375, rel=1e-6)
    assert blob["metrics"]["mass"] == pytest.approx(
        math.pi * (2.0 + 3.0 * 0.125), rel=1e-6)
    assert blob["metrics"]["profile_violation"] <= 1e-6
    manifest = _read(out / "manifest.json")
    raw = (out / "current.json").read_bytes()
    assert manifest["artifacts"]["current.json"] == \
        hashlib.sha256(raw).hexdigest()
    assert manifest["seed"] == 0


def test_gen_current_flat_heights(tmp_path):
    out = tmp_path / "run"
    assert cli.main(["gen-current", "flat", "--heights", "[[0.2], [-0.2]]",
                     "--res", "49", "--out", str(out)]) == 0
    m = _read(out / "current.json")["metrics"]
    assert m["mass"] == pytest.approx(2.0 * math.pi, rel=1e-6)
    assert abs(m["excess_ratio"]) <= 1e-9
    assert m["height"] == pytest.approx(0.4, abs=1e-12)


def test_custom_graph_roundtrip(tmp_path):
    first = tmp_path / "first"
    assert cli.main(["gen-current", "w32", "--scale", "0.25", "--res", "49",
                     "--out", str(first)]) == 0
    second = tmp_path / "second"
    assert cli.main(["gen-current", "custom-graph",
                     "--input", str(first / "current.json"),
                     "--out", str(second)]) == 0
    blob = _read(second / "current.json")
    assert blob["metrics"]["q"] == 2 and blob["metrics"]["n"] == 2
    # grid-backed rebuild: no analytic sheets, so no profile block
    assert "profile" not in blob["metrics"]
    manifest = _read(second / "manifest.json")
    assert len(manifest["input_hashes"]) == 1
    missing = tmp_path / "third"
    assert cli.main(["gen-current", "custom-graph", "--input",
                     str(tmp_path / "nope.json"), "--out", str(missing)]) == 3


def test_approx_flat_full_ball(tmp_path):
    out = tmp_path / "run"
    assert cli.main(["approx", "--current", "flat", "--out", str(out)]) == 0
    blob = _read(out / "approx.json")
    assert blob["k_fraction"] == 1.0
    assert blob["report"]["lip_u"] == 0.0
    assert blob["report"]["hypothesis_ok"]


def test_approx_spike_benchmark(tmp_path):
    out = tmp_path / "run"
    assert cli.main(["approx", "--current", "spike", "--delta11", "0.05",
                     "--out", str(out)]) == 0
    blob = _read(out / "approx.json")
    rep = blob["report"]
    assert rep["hypothesis_ok"]
    assert blob["k_fraction"] < 1.0
    assert rep["graph_match_exact"]
    assert rep["area_bad"] <= 4.0 * rep["bad_bound"]


def test_rho_star_eval(tmp_path):
    out = tmp_path / "run"
    assert cli.main(["rho-star-eval", "--samples", "60",
                     "--out", str(out)]) == 0
    blob = _read(out / "rho-star.json")
    assert blob["summary"]["max_residual"] <= 1e-7
    lines = (out / "rho-star.csv").read_text().strip().split("\n")
    assert lines[0].startswith("sigma,")
    assert len(lines) == 5


def test_dirmin_sqrt_branch_cli(tmp_path):
    out = tmp_path / "run"
    assert cli.main(["dirmin", "--boundary", "sqrt-branch", "--res", "33",
                     "--starts", "4", "--out", str(out)]) == 0
    blob = _read(out / "dirmin.json")
    assert blob["reference_energy"] == pytest.approx(2.0 * math.pi)
    assert blob["energy_gap_rel"] <= 0.08
    assert blob["converged"]
    assert blob["branch_offset"] < 2.0 * blob["spacing"]
    # the stored field round-trips and feeds the reverse Hoelder probe
    u = qf.QGridFunction.from_json(_read(out / "dirmin-field.json"))
    assert u.q == 2 and u.n == 2
    assert cli.main(["probe", "reverse-holder",
                     "--input", str(out / "dirmin-field.json"),
                     "--out", str(out)]) == 0
    rep = _read(out / "probe-reverse-holder.json")["report"]
    assert rep["passed"] and rep["fits"]["C"] <= 5.0


def test_probe_persistence_cli(tmp_path):
    out = tmp_path / "run"
    assert cli.main(["probe", "persistence", "--current", "w32",
                     "--s-list", "0.1", "0.2", "--res", "97",
                     "--out", str(out)]) == 0
    rep = _read(out / "probe-persistence.json")["report"]
    for row in rep["rows"]:
        closed = 4.0 * math.pi * row["s"] ** 5 / 5.0
        assert row["lhs"] == pytest.approx(closed, rel=0.03)
    assert rep["fits"]["s_exponent"] >= 4.0
    csv = (out / "probe-persistence.csv").read_text()
    assert csv.split("\n")[0].split(",")[0] == "s"


def test_probe_gradient_lp_cli(tmp_path):
    out = tmp_path / "run"
    assert cli.main(["probe", "gradient-lp", "--res", "49",
                     "--out", str(out)]) == 0
    rep = _read(out / "probe-gradient-lp.json")["report"]
    assert rep["passed"]
    assert rep["fits"]["ratio_spread"] <= 3.0


def test_probe_failure_exit_1(tmp_path):
    # concentrated excess violates the weak bound: deterministic failure
    out = tmp_path / "run"
    assert cli.main(["probe", "excess", "--current", "spike", "--res", "97",
                     "--out", str(out)]) == 1
    rep = _read(out / "probe-excess.json")["report"]
    assert not rep["passed"]
    assert (out / "manifest.json").exists()


def test_probe_bad_exponent_exit_3(tmp_path):
    out = tmp_path / "run"
    assert cli.main(["probe", "gradient-lp", "--p1", "1.9",
                     "--out", str(out)]) == 3


def test_rerun_hash_identical(tmp_path):
    hashes = []
    for name in ("a", "b"):
        out = tmp_path / name
        assert cli.main(["gen-current", "w32", "--scale", "0.125",
                         "--res", "49", "--seed", "7",
                         "--out", str(out)]) == 0
        hashes.append(_read(out / "manifest.json")["artifacts"])
    assert hashes[0] == hashes[1]
    assert (tmp_path / "a" / "current.json").read_bytes() == \
        (tmp_path / "b" / "current.json").read_bytes()


def test_report_aggregation(tmp_path):
    out = tmp_path / "suite"
    assert cli.main(["gen-current", "w32", "--scale", "0.5", "--res", "49",
                     "--out", str(out)]) == 0
    assert cli.main(["probe", "persistence", "--current", "w32",
                     "--s-list", "0.1", "0.2", "--res", "65",
                     "--out", str(out)]) == 0
    assert cli.main(["probe", "gradient-lp", "--res", "33",
                     "--out", str(out)]) == 0
    rep = tmp_path / "rep"
    assert cli.main(["report", "--dir", str(out), "--out", str(rep)]) == 0
    summary = (rep / "summary.txt").read_text()
    assert "probe:persistence" in summary and "pass" in summary
    assert "current:w32" in summary
    for stem in ("mass-ratio", "persistence", "gradient-lp"):
        dat = (rep / (stem + ".dat")).read_text().strip().split("\n")
        assert dat[0].startswith("#") and len(dat) >= 2
    # numeric .dat payload parses
    vals = np.loadtxt(rep / "persistence.dat")
    assert vals.shape[1] == 3
    before = {p.name: p.read_bytes() for p in rep.iterdir()
              if p.name != "manifest.json"}
    assert cli.main(["report", "--dir", str(out), "--out", str(rep)]) == 0
    after = {p.name: p.read_bytes() for p in rep.iterdir()
             if p.name != "manifest.json"}
    assert before == after


def test_report_empty_and_corrupt(tmp_path):
    empty = tmp_path / "empty"
    empty.mkdir()
    rep = tmp_path / "rep"
    assert cli.main(["report", "--dir", str(empty), "--out", str(rep)]) == 0
    assert _read(rep / "summary.json")["rows"] == []
    assert cli.main(["report", "--dir", str(tmp_path / "absent"),
                     "--out", str(rep)]) == 3
    (empty / "junk.json").write_text("{broken")
    assert cli.main(["report", "--dir", str(empty), "--out", str(rep)]) == 3


def test_entry_point_smoke():
    exe = shutil.which("qlip")
    cmd = [exe] if exe else [sys.executable, "-m", "qlip.cli"]
    proc = subprocess.run(cmd + ["--help"], capture_output=True, text=True)
    assert proc.returncode == 0
    assert "gen-current" in proc.stdout
