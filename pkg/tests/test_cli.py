import csv
import json
import subprocess
import sys
from pathlib import Path

import pytest

from pluripot.cli import main
from pluripot.config import ConfigError, load_config

CONFIGS = Path(__file__).resolve().parents[1] / "configs"


def run(tmp_path, command, config, *extra):
    code = main([command, str(config), "--out", str(tmp_path), *extra])
    files = sorted(tmp_path.iterdir())
    return code, files


def report_of(files):
    (p,) = [f for f in files if f.suffix == ".json"]
    return json.loads(p.read_text())


@pytest.mark.parametrize("command, name", [
    ("solve", "disc_green"), ("solve", "ladder"), ("envelope", "obstacle_zero"),
    ("envelope", "wedge"), ("study", "poisson"), ("study", "poisson_oracle"),
    ("verify", "omega_indefinite"),
])
def test_config_runs_clean(tmp_path, command, name):
    code, files = run(tmp_path, command, CONFIGS / f"{name}.toml")
    assert code == 0
    rep = report_of(files)
    assert rep["passed"]
    assert all(f.name.startswith(f"{command}_{name}_") for f in files)


def test_node_csv_layout(tmp_path):
    code, files = run(tmp_path, "solve", CONFIGS / "disc_green.toml")
    (p,) = [f for f in files if f.suffix == ".csv"]
    with open(p) as fh:
        rows = list(csv.reader(fh))
    assert rows[0] == ["node", "x", "y", "phi"]
    assert len(rows) > 1000
    assert any(f.name.endswith("_profile.dat") for f in files)


def test_output_dir_from_environment(tmp_path, monkeypatch):
    monkeypatch.setenv("PLURIPOT_OUT", str(tmp_path / "env"))
    assert main(["envelope", str(CONFIGS / "obstacle_zero.toml")]) == 0
    assert any((tmp_path / "env").iterdir())


def test_report_is_reproducible(tmp_path):
    run(tmp_path / "a", "envelope", CONFIGS / "wedge.toml")
    run(tmp_path / "b", "envelope", CONFIGS / "wedge.toml")
    a = report_of(list((tmp_path / "a").iterdir()))
    b = report_of(list((tmp_path / "b").iterdir()))
    a.pop("timestamp"), b.pop("timestamp")
    assert a == b


def write(tmp_path, text):
    p = tmp_path / "cfg.toml"
    p.write_text(text)
    return p


def test_bad_spacing_names_the_line(tmp_path, capsys):
    p = write(tmp_path, '[domain]\nkind = "ball"\nn = 1\nh = 0.3\n\n[measure]\nf = 0.0\n')
    assert main(["solve", str(p), "--out", str(tmp_path)]) == 2
    assert "line 4" in capsys.readouterr().err


def test_bad_formula_names_the_line(tmp_path, capsys):
    p = write(tmp_path, '[domain]\nn = 1\nh = 0.0625\n\n[measure]\nf = "1/|z"\n')
    assert main(["solve", str(p), "--out", str(tmp_path)]) == 2
    assert "line 6" in capsys.readouterr().err


def test_unknown_key_and_section(tmp_path):
    with pytest.raises(ConfigError, match="line 3"):
        load_config(write(tmp_path, '[domain]\nn = 1\nspacing = 0.1\n'))
    with pytest.raises(ConfigError, match="line 1"):
        load_config(write(tmp_path, '[mesh]\nn = 1\n'))


def test_malformed_toml(tmp_path):
    with pytest.raises(ConfigError, match="line 2"):
        load_config(write(tmp_path, '[domain]\nn = = 1\n'))


def test_missing_file(tmp_path):
    assert main(["solve", str(tmp_path / "none.toml")]) == 2


def test_solver_failure_exits_1(tmp_path):
    # the last cutoff does not reach the density, so the ladder is refused
    p = write(tmp_path, '[domain]\nn = 1\nh = 0.0625\n\n[measure]\nf = 5.0\n\n[solver]\nj_schedule = [1.0, 2.0]\n')
    assert main(["solve", str(p), "--out", str(tmp_path)]) == 1


def test_failed_check_exits_1(tmp_path):
    p = write(tmp_path, '[omega]\nkind = "scaled_euclidean"\nscale = 0.5\n\n[verify]\nsuites = ["mass_witness"]\n')
    assert main(["verify", str(p), "--out", str(tmp_path)]) == 1


def test_threads_must_be_positive(tmp_path):
    assert main(["envelope", str(CONFIGS / "obstacle_zero.toml"), "--threads", "0", "--out", str(tmp_path)]) == 2


def test_console_script(tmp_path):
    out = subprocess.run([sys.executable, "-m", "pluripot.cli", "study", str(CONFIGS / "poisson.toml"),
                          "--out", str(tmp_path)], capture_output=True, text=True)
    assert out.returncode == 0, out.stderr
    assert "PASS" in out.stdout or "pass" in out.stdout
