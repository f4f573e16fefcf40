"""Command line front end, driven through main() with tiny jobs."""

import json
import os

import numpy as np
import pytest

from scantherm.cli import main

CFG = """\
[material]

[laser]
power = 100 W
radius = 50 um
velocity = 1000 mm/s

[mesh]
h_coarse = 160 um
n_refine = 2
h_powder = 40 um
geometry = chamber
chamber = 0.64 0.32 0.16 mm
plate_thickness = 160 um

[solver]
explicit_cooldown_steps = 60
dt_implicit = 2 ms
n_lanes = 4

[schedule]
cool_time = 0.002
"""

PATH = """\
layer 0 z=4e-05
track 0.00 0.00016 0.00064 0.00016 v=1.0 P=100
cool 0.002
"""


@pytest.fixture()
def job(tmp_path):
    cfg = tmp_path / "build.cfg"
    cfg.write_text(CFG)
    sp = tmp_path / "scan.path"
    sp.write_text(PATH)
    return str(cfg), str(sp), tmp_path


def test_run_writes_outputs(job, capsys):
    cfg, sp, tmp = job
    out = tmp / "out"
    rc = main(["run", cfg, sp, "--output-dir", str(out),
               "--snapshot-every", "layer"])
    assert rc == 0
    text = capsys.readouterr().out
    assert "layer    0" in text
    assert "part:" in text
    assert "cooldown," in text
    for name in ("metrics.csv", "metrics.json", "final.vtu",
                 "checkpoint.npz", "state_L000_end.vtu"):
        assert (out / name).exists(), name
    meta = json.loads((out / "metrics.json").read_text())
    assert meta["layers"][0]["layer_index"] == 0
    assert meta["layers"][0]["scan_steps"] == 32  # 0.64 mm / 1 m/s / 2e-5 s


def test_run_resume_reproduces_bitwise(job, capsys):
    cfg, sp, tmp = job
    a, b = tmp / "a", tmp / "b"
    assert main(["run", cfg, sp, "--output-dir", str(a)]) == 0
    assert main(["run", cfg, sp, "--output-dir", str(b),
                 "--resume", str(a / "checkpoint.npz")]) == 0
    out = capsys.readouterr().out
    assert "nothing to do" in out or "part:" in out
    # resuming after the only layer leaves the final state untouched
    from scantherm.io import read_vtu
    ta = read_vtu(str(a / "final.vtu"))["point_data"]["temperature"]
    tb = read_vtu(str(b / "final.vtu"))["point_data"]["temperature"]
    assert np.array_equal(ta, tb)


def test_check_dt_reports_criteria(job, capsys):
    cfg, sp, tmp = job
    assert main(["check-dt", cfg]) == 0
    out = capsys.readouterr().out
    vals = {}
    for line in out.splitlines():
        parts = line.split()
        vals[parts[0]] = parts[1]
    assert float(vals["dt_accuracy"]) == pytest.approx(5e-5)
    assert float(vals["dt_used"]) == pytest.approx(
        0.4 * min(float(vals["dt_stability"]), 5e-5))
    assert int(vals["n_dofs"]) > 0


def test_bench_reports_throughput(job, capsys):
    cfg, sp, tmp = job
    assert main(["bench", cfg, "--steps", "5"]) == 0
    out = capsys.readouterr().out
    assert "throughput" in out and "DoF/s/core" in out


def test_oracle_gate(capsys):
    assert main(["oracle"]) == 0
    out = capsys.readouterr().out
    assert out.count(" ok") == 5 and "all kernels match" in out
    # an impossible tolerance flips the gate
    assert main(["oracle", "--tol", "1e-30"]) == 1
    assert "MISMATCH" in capsys.readouterr().out


def test_convergence_single_level(tmp_path, capsys):
    out = tmp_path / "conv"
    assert main(["convergence", "--levels", "1",
                 "--output-dir", str(out)]) == 0
    text = capsys.readouterr().out
    assert "level 0" in text
    trace = (out / "trace_level0.csv").read_text().splitlines()
    assert trace[0] == "time_s,T_probe_K"
    t, T = np.loadtxt(trace[1:], delimiter=",", unpack=True)
    assert np.all(np.diff(t) > 0)
    assert T.max() > 1900.0  # the probe sits on the melt track
