import json
import shutil

import numpy as np
import pytest

from wfquench.cli import Solution, main, parse_config
from wfquench.errors import ConfigError
from wfquench.verify import wf_residual

CFG20 = """\
# low-energy orbit
r_c = 20
n_coeffs = 2
out = out20
boosts = 0, 0.2
"""


@pytest.fixture(scope="module")
def solved(tmp_path_factory):
    root = tmp_path_factory.mktemp("cli")
    (root / "run.cfg").write_text(CFG20)
    assert main(["solve", str(root / "run.cfg")]) == 0
    return root / "out20"


def test_parse_config_values(tmp_path):
    rc = parse_config("r_c = 4.7  # comment\nrel_tol = 1e-11\nmax_iters = 7\nschedule = 10, 7, 4.7\n"
                      "out = res\nthreads = 2\n", tmp_path)
    assert rc.solve.r_c == 4.7 and rc.solve.rel_tol == 1e-11
    assert rc.quench.max_iters == 7 and rc.quench.threads == 2
    assert rc.schedule == (10.0, 7.0, 4.7)
    assert rc.out == tmp_path / "res"


@pytest.mark.parametrize("text, fragment", [
    ("r_c = 20\nbogus = 1\n", "line 2"),
    ("r_c = 20\nrel_tol\n", "line 2"),
    ("r_c = twenty\n", "line 1"),
    ("r_c = 20\nr_c = 21\n", "duplicate"),
    ("schedule = 5, 7\n", "decreasing"),
    ("n_coeffs = 3\n", "r_c"),
    ("r_c = 20\nboosts = 0, 1.2\n", "boost"),
])
def test_parse_config_errors(text, fragment):
    with pytest.raises(ConfigError, match=fragment):
        parse_config(text)


def test_malformed_config_exit_code(tmp_path, capsys):
    cfg = tmp_path / "bad.cfg"
    cfg.write_text("r_c = 20\nnot a pair\n")
    assert main(["solve", str(cfg)]) == 2
    assert "line 2" in capsys.readouterr().err


def test_solve_artifacts(solved):
    for name in ("series.txt", "p1.csv", "p2a.csv", "p2b.csv", "quench_log.csv", "summary.json", "run.cfg"):
        assert (solved / name).is_file()
    s = json.loads((solved / "summary.json").read_text())
    for key in ("r_c", "r_o", "v_inf", "A_final", "n_coeffs", "iterations", "wall_time"):
        assert key in s
    assert s["A_final"] < 1e-6


def test_verify_passes_with_two_rows(solved, capsys):
    assert main(["verify", str(solved)]) == 0
    rows = (solved / "covariance.txt").read_text().splitlines()
    assert len(rows) == 2 and rows[0].startswith("w = 0 ") and all(r.endswith("PASS") for r in rows)
    assert (solved / "residual.csv").read_text().startswith("t,lhs,rhs,defect")
    assert "sign_changes = 1" in (solved / "monotonicity.txt").read_text()


def test_verify_missing_artifacts(tmp_path):
    assert main(["verify", str(tmp_path)]) == 3
    assert main(["export", str(tmp_path), "--what", "F"]) == 3


def test_verify_corrupted_velocity(solved, tmp_path, capsys):
    bad = tmp_path / "bad"
    shutil.copytree(solved, bad)
    lines = (bad / "p1.csv").read_text().splitlines()
    i = len(lines) // 2
    cols = lines[i].split(",")
    cols[3] = "1.25"
    lines[i] = ",".join(cols)
    (bad / "p1.csv").write_text("\n".join(lines) + "\n")
    assert main(["verify", str(bad)]) == 3
    assert "NoBracket" in capsys.readouterr().err


def test_export_resample_exact_rows(solved, tmp_path):
    out = tmp_path / "exp"
    assert main(["export", str(solved), "--what", "trajectories", "--resample", "1000", "--out", str(out)]) == 0
    for name in ("p1.csv", "p2a.csv", "p2b.csv"):
        assert len((out / name).read_text().splitlines()) == 1001
    overlay = np.loadtxt(out / "overlay.csv", delimiter=",", skiprows=1)
    assert overlay.shape == (1000, 4)
    # particle 2 reflected onto particle 1
    assert np.max(np.abs(overlay[:, 2] - overlay[:, 1])) < 1e-4
    assert np.max(np.abs(overlay[:, 3] - overlay[:, 1])) < 1e-4


def test_export_round_trip_is_lossless(solved, tmp_path):
    out = tmp_path / "rt"
    assert main(["export", str(solved), "--what", "trajectories", "--out", str(out)]) == 0
    a = wf_residual(Solution(solved).orbit())
    b = wf_residual(Solution(out).orbit())
    assert abs(a.max_rel - b.max_rel) < 1e-10
    assert np.array_equal(a.residuals, b.residuals)
    assert main(["verify", str(out)]) == 0


def test_export_F_and_potentials(solved, tmp_path):
    assert main(["export", str(solved), "--what", "F", "--out", str(tmp_path)]) == 0
    data = np.loadtxt(tmp_path / "F.csv", delimiter=",", skiprows=1)
    assert (tmp_path / "F.csv").read_text().startswith("ro_over_r,F\n")
    assert np.all(np.diff(data[:, 1]) < 0)
    assert main(["export", str(solved), "--what", "potentials", "--out", str(tmp_path)]) == 0
    assert (tmp_path / "potentials.csv").read_text().startswith("# E = 2, P = ")


def test_continue_then_seeded_solve(tmp_path):
    (tmp_path / "ladder.cfg").write_text("schedule = 20, 10\nout = ladder\n")
    assert main(["continue", str(tmp_path / "ladder.cfg")]) == 0
    assert (tmp_path / "ladder" / "stage_00" / "summary.json").is_file()
    top = json.loads((tmp_path / "ladder" / "summary.json").read_text())
    assert top["r_c"] == 10.0 and len(top["stages"]) == 2
    (tmp_path / "fig4.cfg").write_text("r_c = 4.7\nseed = ladder/series.txt\nout = fig4\n")
    assert main(["solve", str(tmp_path / "fig4.cfg")]) == 0
    s = json.loads((tmp_path / "fig4" / "summary.json").read_text())
    assert abs(s["v_inf"] - 0.46) <= 0.02


def test_continue_needs_schedule(tmp_path):
    (tmp_path / "c.cfg").write_text("r_c = 10\n")
    assert main(["continue", str(tmp_path / "c.cfg")]) == 2


def test_failing_stage_exit_code(tmp_path, capsys):
    (tmp_path / "f.cfg").write_text("r_c = 4.7\nn_coeffs = 1\nmax_iters = 1\nmax_coeffs = 1\n")
    assert main(["solve", str(tmp_path / "f.cfg")]) == 1
    assert "StageFailed" in capsys.readouterr().err
