import json
import subprocess
import sys

import pytest

from mkv.cli import main

SMALL_SIM = """
sim.h = 0.01
sim.T = 1.0
sim.N = 200
"""


def write(tmp_path, name, text):
    path = tmp_path / name
    path.write_text(text)
    return str(path)


def read_json(path):
    return json.loads(path.read_text())


def test_rates_reports_constants(tmp_path, capsys):
    cfg = write(tmp_path, "r.toml", 'model.name = "corollary34"\nmodel.l1 = 1.0\nmodel.l2 = 1.0\n'
                                    'model.r0 = 1.0\nmodel.ellipticity_alpha = 1.0\n')
    assert main(["rates", "--config", cfg, "--out", str(tmp_path / "o")]) == 0
    printed = json.loads(capsys.readouterr().out)
    assert printed["C1"] == 2.0
    report = read_json(tmp_path / "o" / "report.json")
    for key in ("delta1", "delta2", "delta0", "t_star1", "t_star2", "regime"):
        assert key in report and key in report["threshold"]


def test_rates_without_model_uses_options(tmp_path):
    cfg = write(tmp_path, "r.toml", "options.l1 = 1.0\noptions.l2 = 2.0\noptions.r0 = 1.0\n")
    assert main(["rates", "--config", cfg, "--out", str(tmp_path / "o")]) == 0
    assert read_json(tmp_path / "o" / "report.json")["C1"] == 1.0


def test_phase_supercritical_exits_zero(tmp_path):
    cfg = write(tmp_path, "p.toml", 'model.name = "example33"\nmodel.epsilon = 1.2\n'
                                    "sim.h = 0.01\nsim.T = 20.0\nsim.N = 500\n")
    assert main(["phase", "--config", cfg, "--out", str(tmp_path / "o")]) == 0
    report = read_json(tmp_path / "o" / "report.json")
    assert report["regime"] == "supercritical" and report["no_invariant_measure"]
    assert report["diverged"]


def test_malformed_config_gives_line_diagnostic(tmp_path, capsys):
    cfg = write(tmp_path, "bad.toml", 'model.name = "linear"\nsim.h = = 3\n')
    assert main(["simulate", "--config", cfg]) == 3
    assert "bad.toml:2:" in capsys.readouterr().err


def test_malformed_json_gives_line_diagnostic(tmp_path, capsys):
    cfg = write(tmp_path, "bad.json", '{\n  "model": {"name": "linear"},\n  "sim": {"h": }\n}\n')
    assert main(["simulate", "--config", cfg]) == 3
    assert "bad.json:3:" in capsys.readouterr().err


@pytest.mark.parametrize("text,needle", [
    ('model.name = "nope"\n', "unknown model"),
    ('model.name = "linear"\nsim.hh = 1\n', "unknown sim field"),
    ('model.name = "linear"\nbogus = 1\n', "unknown key"),
    ('experiment = "phase"\nmodel.name = "linear"\n', "requested"),
    ('model.name = "linear"\nmodel.wrong = 2\n', "bad parameters"),
    ('model.name = "linear"\nsim.h = 5.0\n', "exceeds horizon"),
])
def test_config_errors_exit_3(tmp_path, capsys, text, needle):
    cfg = write(tmp_path, "c.toml", text)
    assert main(["simulate", "--config", cfg, "--out", str(tmp_path / "o")]) == 3
    assert needle in capsys.readouterr().err


def test_usage_errors_exit_3():
    with pytest.raises(SystemExit) as info:
        main(["teleport"])
    assert info.value.code == 3
    assert main(["simulate"]) == 3


def test_manifest_lists_files_and_reproduces_bytes(tmp_path):
    cfg = write(tmp_path, "s.toml", 'model.name = "corollary34"\nmodel.kappa = 0.2\nseed = 4\n'
                + SMALL_SIM + "options.snapshot_times = [0.5]\n")
    out1 = tmp_path / "one"
    assert main(["simulate", "--config", cfg, "--out", str(out1)]) == 0
    manifest = read_json(out1 / "manifest.json")
    on_disk = {p.name for p in out1.iterdir()}
    assert on_disk == set(manifest["files"])
    assert {"report.json", "final.csv", "mean_abs.csv", "snapshot_t0.5.csv"} <= on_disk
    assert (out1 / "mean_abs.csv").read_text().startswith("t,value\n")
    rerun = dict(manifest["config"])
    rerun["output_dir"] = str(tmp_path / "two")
    cfg2 = write(tmp_path, "rerun.json", json.dumps(rerun))
    assert main(["simulate", "--config", cfg2]) == 0
    for name in on_disk:
        if name.endswith(".csv"):
            assert (out1 / name).read_bytes() == (tmp_path / "two" / name).read_bytes()


def test_seed_precedence(tmp_path, monkeypatch):
    cfg = write(tmp_path, "s.toml", 'model.name = "linear"\nseed = 1\n' + SMALL_SIM)
    monkeypatch.setenv("MKV_SEED", "7")
    assert main(["simulate", "--config", cfg, "--out", str(tmp_path / "env")]) == 0
    assert main(["simulate", "--config", cfg, "--seed", "9", "--out", str(tmp_path / "flag")]) == 0
    assert read_json(tmp_path / "env" / "manifest.json")["seed"] == 7
    assert read_json(tmp_path / "flag" / "manifest.json")["seed"] == 9
    monkeypatch.setenv("MKV_SEED", "x")
    assert main(["simulate", "--config", cfg, "--out", str(tmp_path / "bad")]) == 3


def test_couple_and_fixed_point(tmp_path):
    cfg = write(tmp_path, "c.toml", 'model.name = "corollary34"\nsim.h = 0.01\nsim.T = 4.0\n'
                                    "sim.N = 400\n")
    assert main(["couple", "--config", cfg, "--out", str(tmp_path / "c")]) == 0
    assert (tmp_path / "c" / "coupling_mean_dist.csv").exists()
    fp = write(tmp_path, "f.toml", 'model.name = "corollary34"\nsim.h = 0.02\nsim.T = 10.0\n'
                                   "sim.N = 2000\nsim.burn_in = 4.0\nsim.window = 2.0\n")
    assert main(["fixed-point", "--config", fp, "--out", str(tmp_path / "f")]) == 0
    report = read_json(tmp_path / "f" / "report.json")
    assert report["verdict"] == "pass" and (tmp_path / "f" / "gaps.csv").exists()


def test_verify_only_filter_is_deterministic(tmp_path, capsys):
    for name in ("a", "b"):
        assert main(["verify", "--only", "measures", "--out", str(tmp_path / name)]) == 0
    out = capsys.readouterr().out
    assert "ot_oracle" in out and "psi_machinery" not in out
    ra, rb = (read_json(tmp_path / n / "report.json") for n in ("a", "b"))
    assert [r["criterion"] for r in ra["results"]] == ["ot_oracle"]
    assert [r["details"] for r in ra["results"]] == [r["details"] for r in rb["results"]]
    assert (tmp_path / "a" / "verify_table.csv").read_bytes() == \
        (tmp_path / "b" / "verify_table.csv").read_bytes()


def test_module_entry_point(tmp_path):
    res = subprocess.run([sys.executable, "-m", "mkv", "--version"], capture_output=True, text=True)
    assert res.returncode == 0 and res.stdout.startswith("mkv ")
