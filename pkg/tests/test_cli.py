import json
import subprocess
import sys

import numpy as np
import pytest

from msad.cli import dispatch
from msad.config import parse_config_text
from msad.errors import ConfigError
from msad.io import read_field, sha256_file, write_snapshot

TINY = """
[model]
T = 0.05
[grid]
m = 32
L = 12.0
[particles]
ell = 0.1
N = 32
kernel_points = 512
seed = 5
[pde]
n_outputs = 3
[experiment]
kind = "pde-error"
eps_list = [0.8, 0.6, 0.4]
"""


@pytest.fixture
def tiny(tmp_path):
    p = tmp_path / "tiny.toml"
    p.write_text(TINY)
    return p


def test_no_arguments_prints_usage():
    proc = subprocess.run([sys.executable, "-m", "msad.cli"], capture_output=True, text=True)
    assert proc.returncode == 1
    assert "usage" in proc.stderr


def test_unknown_subcommand_is_usage_error():
    assert dispatch(["frobnicate"]) == 1


def test_minimal_config_gets_defaults():
    run = parse_config_text("")
    assert run.model.d == 3 and run.grid.m == 48 and run.particles.ell == 0.1


def test_ell_out_of_range(tmp_path, capsys):
    p = tmp_path / "c.toml"
    p.write_text("[particles]\nell = 0.3\n")
    assert dispatch(["check-smallness", "--config", str(p)]) == 1
    assert "[ell-range]" in capsys.readouterr().err


def test_dt_cap_message():
    with pytest.raises(ConfigError) as exc:
        parse_config_text("[particles]\nN = 1024\ndt = 0.05\n")
    assert exc.value.constraint == "dt-cap"
    cap = 0.1 * (1024 ** -0.1) ** 3
    assert f"{cap:.6g}" in str(exc.value)


def test_unknown_key_rejected():
    with pytest.raises(ConfigError, match="unknown key 'elll'"):
        parse_config_text("[particles]\nelll = 0.1\n")
    with pytest.raises(ConfigError):
        parse_config_text("[nonsense]\nx = 1\n")


def test_box_too_small():
    with pytest.raises(ConfigError) as exc:
        parse_config_text("[model]\nwidth = 2.0\n[grid]\nL = 8.0\n")
    assert exc.value.constraint == "box-size"


def test_corrupted_snapshot_exit_2(tmp_path, capsys):
    runs = tmp_path / "runs" / "r0"
    runs.mkdir(parents=True)
    (runs / "manifest.json").write_text(json.dumps({"ell": 0.1, "s": 1.0}))
    write_snapshot(runs / "X_000000.msadp", np.zeros((1, 2, 3)), 0.0, 0, 0)
    (runs / "Xt_000000.msadp").write_bytes(b"BROKEN" + b"\0" * 40)
    assert dispatch(["coupling-stats", "--runs-dir", str(tmp_path / "runs"), "--lambda", "0.2"]) == 2
    err = capsys.readouterr().err
    assert "Xt_000000.msadp" in err and "@ byte 0" in err


def test_check_smallness_output(tiny, capsys):
    assert dispatch(["check-smallness", "--config", str(tiny)]) == 0
    out = capsys.readouterr().out
    assert "smallness_satisfied\t\t1" in out and "C_HLS" in out


def test_rates_pde_error_end_to_end(tiny, tmp_path, capsys):
    out = tmp_path / "res" / "rates.csv"
    code = dispatch(["rates", "--experiment", "pde-error", "--config", str(tiny), "--out", str(out), "--plot-data"])
    assert code == 0
    rows = out.read_text().splitlines()
    assert rows[0] == "experiment,scale,metric,value,stderr,reps,seed"
    assert sum(r.split(",")[2] == "pde_error" for r in rows[1:]) == 3
    man = json.loads((out.parent / "manifest.json").read_text())
    for name, digest in man["files"].items():
        assert sha256_file(out.parent / name) == digest
    assert {"rates.csv", "rates_plot.tsv", "rates.png"} <= set(man["files"])
    assert "slope:pde_error" in capsys.readouterr().out


def test_solve_compare_simulate_couple(tiny, tmp_path, capsys):
    fdir = tmp_path / "fields"
    assert dispatch(["solve-pde", "--config", str(tiny), "--out-dir", str(fdir), "--limiting"]) == 0
    files = sorted(fdir.glob("*.msadf"))
    vals, L, t = read_field(files[-1])
    assert L == 12.0 and t == pytest.approx(0.05)
    assert dispatch(["compare", "--field-a", str(files[0]), "--field-b", str(files[-1])]) == 0
    assert "ckp_margin" in capsys.readouterr().out
    sdir = tmp_path / "sim"
    assert dispatch(["simulate", "--config", str(tiny), "--out-dir", str(sdir)]) == 0
    assert (sdir / "manifest.json").exists() and len(list(sdir.glob("*.msadp"))) == 2
    cdir = tmp_path / "runs" / "r0"
    assert dispatch(["couple", "--config", str(tiny), "--out-dir", str(cdir)]) == 0
    assert dispatch(["coupling-stats", "--runs-dir", str(tmp_path / "runs"), "--lambda", "0.2"]) == 0
    assert "p_coupling" in capsys.readouterr().out


def test_kernel_table_command(tmp_path, capsys):
    out = tmp_path / "k.msadk"
    assert dispatch(["kernel-table", "--s", "1", "--d", "3", "--eps", "0.4", "--points", "256", "--out", str(out)]) == 0
    assert out.read_bytes()[:6] == b"MSADK1"
    assert "sup_grad1" in capsys.readouterr().out
    assert dispatch(["kernel-table", "--s", "2", "--d", "3", "--eps", "0.4", "--out", str(out)]) == 1
