import json
import subprocess
import sys
from argparse import Namespace
from importlib import resources

import numpy as np
import pytest

from navkit import cli
from navkit.simkit import CSV_HEADER_TOKEN


def invoke(*args):
    return cli.main([str(a) for a in args])


def short_config(tmp_path, text):
    path = tmp_path / "override.toml"
    path.write_text(text)
    return path


def test_filter_happy_path_writes_run_csv_and_summary(tmp_path):
    assert invoke("filter", "--scenario", "ex5-gpsmag", "--seed", "0",
                  "--out", tmp_path) == 0
    csv_path = tmp_path / "run_invekf_ex5-gpsmag.csv"
    assert csv_path.read_text().splitlines()[0] == CSV_HEADER_TOKEN
    summary = json.loads((tmp_path / "summary_invekf_ex5-gpsmag.json")
                         .read_text())
    assert summary["version"] == cli.SUMMARY_VERSION
    assert summary["filter"] == "invekf"
    assert summary["seed"] == 0
    assert summary["final"]["err_att_rad"] < np.deg2rad(2.0)
    assert summary["innovation"]["GpsPosition"]["count"] == 600
    assert summary["innovation"]["Magnetometer"]["count"] == 1200


def test_rerun_is_byte_identical(tmp_path):
    cfg = short_config(tmp_path, "[scenario]\nduration = 10.0\n")
    for sub in ("a", "b"):
        assert invoke("filter", "--scenario", "ex5-gps", "--config", cfg,
                      "--out", tmp_path / sub) == 0
    for name in ("run_invekf_ex5-gps.csv", "summary_invekf_ex5-gps.json"):
        assert (tmp_path / "a" / name).read_bytes() == \
               (tmp_path / "b" / name).read_bytes()


def test_montecarlo_output_independent_of_jobs(tmp_path):
    cfg = short_config(tmp_path, "[scenario]\nduration = 10.0\n")
    assert invoke("montecarlo", "--scenario", "ex5-gps", "--config", cfg,
                  "--runs", 3, "--out", tmp_path / "a") == 0
    assert invoke("montecarlo", "--scenario", "ex5-gps", "--config", cfg,
                  "--runs", 3, "--jobs", 3, "--out", tmp_path / "b") == 0
    name = "mc_invekf_ex5-gps.json"
    payload_a = (tmp_path / "a" / name).read_bytes()
    assert payload_a == (tmp_path / "b" / name).read_bytes()
    parsed = json.loads(payload_a)
    assert parsed["version"] == cli.MC_VERSION
    assert parsed["n_runs"] == 3
    assert parsed["failure_count"] == 0
    assert "jobs" not in parsed
    assert set(parsed["quantiles"]) == {"err_att", "err_vel", "err_pos"}


@pytest.mark.parametrize("name", sorted(cli.PRESETS))
def test_shipped_configs_reproduce_the_presets(name):
    preset_args = Namespace(scenario=name, config=None, seed=None)
    config_path = resources.files("navkit") / "configs" / f"{name}.toml"
    file_args = Namespace(scenario=None, config=str(config_path), seed=None)
    assert cli.load_config(preset_args) == cli.load_config(file_args)


def test_unknown_config_key_exits_1_and_names_it(tmp_path, capsys):
    cfg = short_config(tmp_path, "[scenario]\nduratoin = 10.0\n")
    assert invoke("filter", "--config", cfg, "--out", tmp_path) == 1
    assert "scenario.duratoin" in capsys.readouterr().err


def test_trajectory_keys_checked_against_kind(tmp_path, capsys):
    cfg = short_config(
        tmp_path,
        '[scenario.trajectory]\nkind = "constant"\nradius = 5.0\n'
        "gyro = [0.0, 0.0, 0.4]\naccel = [0.0, 2.0, -9.81]\n")
    assert invoke("filter", "--config", cfg, "--out", tmp_path) == 1
    assert "scenario.trajectory.radius" in capsys.readouterr().err


def test_unknown_sensor_kind_rejected(tmp_path, capsys):
    cfg = short_config(
        tmp_path,
        "[[scenario.sensors]]\nkind = \"Sonar\"\nrate = 1.0\n"
        "noise_std = 0.1\n")
    assert invoke("filter", "--config", cfg, "--out", tmp_path) == 1
    assert "Sonar" in capsys.readouterr().err


def test_incompatible_filter_combination_exits_1(tmp_path, capsys):
    cfg = short_config(tmp_path, "[scenario]\nduration = 5.0\n")
    assert invoke("observe", "--scenario", "ex5-gpsmag", "--config", cfg,
                  "--filter", "sync", "--out", tmp_path) == 1
    assert "config error" in capsys.readouterr().err


def test_numerical_failure_exits_2_naming_the_error(tmp_path, capsys,
                                                    monkeypatch):
    def explode(sc, name):
        raise np.linalg.LinAlgError("SVD did not converge")

    monkeypatch.setattr(cli, "run_filter", explode)
    assert invoke("filter", "--scenario", "ex5-gps", "--out", tmp_path) == 2
    err = capsys.readouterr().err
    assert "numerical failure" in err
    assert "LinAlgError" in err


def test_montecarlo_with_every_run_failing_exits_2(tmp_path, capsys):
    cfg = short_config(
        tmp_path,
        "[scenario]\nduration = 2.0\n"
        "[filter]\nname = \"sync\"\n"
        "[[scenario.sensors]]\nkind = \"Magnetometer\"\nrate = 5.0\n"
        "noise_std = 0.05\nreference = [1.0, 0.0, 0.0]\n")
    assert invoke("montecarlo", "--config", cfg, "--runs", 2,
                  "--out", tmp_path) == 2
    assert "numerical failure" in capsys.readouterr().err


def test_propagate_writes_one_paths_file_per_dt(tmp_path):
    assert invoke("propagate", "--scenario", "fig3", "--out", tmp_path) == 0
    names = sorted(p.name for p in tmp_path.glob("paths_dt*.csv"))
    assert names == ["paths_dt0.01.csv", "paths_dt0.1.csv",
                     "paths_dt0.5.csv", "paths_dt1.csv"]
    lines = (tmp_path / "paths_dt1.csv").read_text().splitlines()
    assert lines[0] == cli.PATHS_TOKEN
    assert lines[1].startswith("# t,truth_x")
    assert len(lines) == 2 + 61


def test_banana_clouds_cover_each_distance(tmp_path):
    assert invoke("banana", "--scenario", "fig5", "--out", tmp_path) == 0
    for label in ("flat", "curved"):
        lines = (tmp_path / f"cloud_{label}.csv").read_text().splitlines()
        assert lines[0] == cli.CLOUD_TOKEN
        distances = [float(line.split(",")[0]) for line in lines[2:]]
        for d in (5.0, 10.0, 20.0):
            assert distances.count(d) == 230


def test_endpoint_study_artifacts(tmp_path):
    cfg = short_config(
        tmp_path,
        "[scenario]\nduration = 2.5\n[propagate]\nstudy_runs = 25\n")
    assert invoke("propagate", "--scenario", "fig6", "--config", cfg,
                  "--out", tmp_path) == 0
    endpoints = (tmp_path / "study_endpoints.csv").read_text().splitlines()
    assert endpoints[0] == cli.ENDPOINTS_TOKEN
    assert len(endpoints) == 2 + 25
    ellipse = (tmp_path / "study_ellipse.csv").read_text().splitlines()
    assert len(ellipse) == 2 + 181
    contour = (tmp_path / "study_contour.csv").read_text().splitlines()
    assert (len(contour) - 2) % 181 == 0 and len(contour) > 2
    study = json.loads((tmp_path / "study.json").read_text())
    assert study["version"] == cli.STUDY_VERSION
    assert study["runs"] == 25
    # the forward-thrust turn-free study ends half a t^2 down the x axis
    np.testing.assert_allclose(study["mean_endpoint"],
                               [0.5 * 2.5 ** 2, 0.0], atol=1e-9)


def test_observability_case_json(tmp_path, capsys):
    assert invoke("observability", "--case", "single-landmark",
                  "--out", tmp_path) == 0
    payload = json.loads(
        (tmp_path / "observability_single-landmark.json").read_text())
    assert payload["rank"] == 8
    assert len(payload["singular_values"]) == 9
    assert len(payload["null_basis"]) == 1
    capsys.readouterr()
    assert invoke("observability", "--case", "no-such-case",
                  "--out", tmp_path) == 1
    assert "no-such-case" in capsys.readouterr().err


def test_preintegrate_windows_cover_the_run(tmp_path):
    cfg = short_config(tmp_path, "[scenario]\nduration = 5.0\n")
    assert invoke("preintegrate", "--scenario", "ex5-gps", "--config", cfg,
                  "--out", tmp_path) == 0
    lines = (tmp_path / "preint_ex5-gps.csv").read_text().splitlines()
    assert lines[0] == cli.PREINT_TOKEN
    rows = [line.split(",") for line in lines[2:]]
    assert len(rows) == 5
    assert all(float(row[3]) == 100.0 for row in rows)
    assert float(rows[-1][2]) == 5.0


def test_usage_error_exits_1():
    assert invoke("no-such-subcommand") == 1


def test_module_entry_point_runs_in_a_subprocess(tmp_path):
    proc = subprocess.run(
        [sys.executable, "-m", "navkit.cli", "banana", "--scenario", "fig5",
         "--out", str(tmp_path)],
        capture_output=True, text=True)
    assert proc.returncode == 0
    assert "cloud_flat.csv" in proc.stdout
    assert (tmp_path / "cloud_curved.csv").exists()
