"""Command-line front end: deterministic scenarios in, CSV/JSON artifacts out.

Subcommands map one-to-one onto the library layers: ``propagate``
(dead-reckoning paths, optionally a propagation endpoint study),
``preintegrate`` (windowed IMU deltas), ``filter`` (aided filter runs),
``observe`` (continuous observer runs), ``montecarlo`` (seed-swept
quantiles), ``observability`` (canned rank/null-space reports), and
``banana`` (pose clouds under two uncertainty conventions).

Configuration comes from a TOML file (``--config``), a named preset
(``--scenario``), or built-in defaults; the three merge in that order of
precedence and unknown keys are rejected by name. ``--seed``, ``--runs``,
``--jobs``, ``--filter``, and ``--out`` override the merged config.

Exit codes: 0 with artifacts written, 1 on configuration errors, 2 on
numerical failures (the message carries the failing error's class name).
The same command line and config produce byte-identical artifacts; every
artifact starts with a versioned header.
"""

from __future__ import annotations

import argparse
import json
import sys
from dataclasses import replace
from pathlib import Path

import numpy as np
import tomli

from .inekf import AidingKind, SingularInnovationCov
from .liegroups import se23_compose, se23_exp
from .observability import scenario_reports
from .preintegration import accumulate_imu
from .simkit import (
    FILTER_NAMES,
    CircularPlanar,
    ConstantInput,
    Scenario,
    SensorSpec,
    WaypointSpline,
    banana_samples,
    corrupt,
    dead_reckoning_paths,
    generate_truth,
    monte_carlo,
    run_filter,
    write_run_csv,
)
from .liegroups import so3_log
from .strapdown import (
    BiasState,
    ImuNoiseSpec,
    ImuSample,
    NavBelief,
    NonPSD,
    propagate_covariance,
    propagate_pose,
)

PATHS_TOKEN = "# navkit-paths-v1"
PREINT_TOKEN = "# navkit-preint-v1"
CLOUD_TOKEN = "# navkit-cloud-v1"
ENDPOINTS_TOKEN = "# navkit-endpoints-v1"
CONTOUR_TOKEN = "# navkit-contour-v1"
ELLIPSE_TOKEN = "# navkit-ellipse-v1"
SUMMARY_VERSION = "navkit-summary-v1"
MC_VERSION = "navkit-mc-v1"
OBS_VERSION = "navkit-observability-v1"
STUDY_VERSION = "navkit-study-v1"

OBSERVER_NAMES = ("se53", "sync")

#: Exceptions reported as numerical failures (exit 2). Both numpy's
#: LinAlgError and the filter-layer errors subclass ValueError, so they
#: must be tested before the plain-ValueError config fallback.
_NUMERICAL_ERRORS = (np.linalg.LinAlgError, SingularInnovationCov, NonPSD,
                     ArithmeticError, RuntimeError)


class ConfigError(Exception):
    """Invalid configuration: unknown key, bad value, or bad combination."""


# --- configuration ---------------------------------------------------------


def default_config() -> dict:
    """Base configuration: the circular GPS-aided scenario and its noise."""
    return {
        "scenario": {
            "duration": 60.0,
            "imu_rate": 100.0,
            "seed": 0,
            "init_error": [10.0, 0.0, 0.0],
            "trajectory": {"kind": "circle", "radius": 20.0, "speed": 3.0},
            "imu_noise": {
                "gyro_psd": 1.2184696791468344e-05,
                "accel_psd": 0.0025000000000000005,
                "gyro_bias_psd": 0.0,
                "accel_bias_psd": 0.0,
            },
            "sensors": [
                {"kind": "GpsPosition", "rate": 10.0, "noise_std": 0.5},
            ],
        },
        "filter": {"name": "invekf"},
        "montecarlo": {"runs": 50, "jobs": 1},
        "propagate": {"dts": [0.01], "endpoint_study": False,
                      "study_runs": 500},
        "preintegrate": {"window": 1.0},
        "banana": {"n": 230, "distances": [5.0, 10.0, 20.0],
                   "yaw_std_deg": 10.0, "x_std": 0.8, "y_std": 1.6},
    }


_MAG_SENSOR = {"kind": "Magnetometer", "rate": 20.0, "noise_std": 0.05,
               "reference": [1.0, 0.0, 0.0]}

_ZERO_NOISE = {"gyro_psd": 0.0, "accel_psd": 0.0,
               "gyro_bias_psd": 0.0, "accel_bias_psd": 0.0}

#: Named scenario bundles, expressed as overlays on the default config.
PRESETS = {
    "ex5-gps": {},
    "ex5-gpsmag": {
        "scenario": {
            "sensors": [
                {"kind": "GpsPosition", "rate": 10.0, "noise_std": 0.5},
                dict(_MAG_SENSOR),
            ],
        },
    },
    "fig3": {
        "scenario": {
            "init_error": [0.0, 0.0, 0.0],
            "trajectory": {"kind": "constant", "gyro": [0.0, 0.0, 0.4],
                           "accel": [0.0, 2.0, -9.81]},
            "imu_noise": dict(_ZERO_NOISE),
            "sensors": [],
        },
        "propagate": {"dts": [0.01, 0.1, 0.5, 1.0]},
    },
    "fig5": {
        "scenario": {
            "init_error": [0.0, 0.0, 0.0],
            "imu_noise": dict(_ZERO_NOISE),
            "sensors": [],
        },
    },
    "fig6": {
        "scenario": {
            "duration": 5.0,
            "imu_rate": 20.0,
            "init_error": [0.0, 0.0, 0.0],
            "trajectory": {"kind": "constant", "gyro": [0.0, 0.0, 0.0],
                           "accel": [1.0, 0.0, -9.81]},
            "imu_noise": {
                # per-sample yaw-gyro std of 20 deg/s at dt = 0.05 s
                "gyro_psd": [[0.0, 0.0, 0.0], [0.0, 0.0, 0.0],
                             [0.0, 0.0, 0.006092348395734172]],
                "accel_psd": 0.0,
                "gyro_bias_psd": 0.0,
                "accel_bias_psd": 0.0,
            },
            "sensors": [],
        },
        "propagate": {"dts": [0.05], "endpoint_study": True,
                      "study_runs": 500},
    },
}

_TRAJECTORY_KEYS = {
    "circle": {"kind", "radius", "speed"},
    "constant": {"kind", "gyro", "accel"},
    "spline": {"kind", "times", "positions"},
}

_SENSOR_KEYS = {"kind", "rate", "noise_std", "reference", "lever_arm"}

_SCHEMA = {
    "scenario": {"duration", "imu_rate", "seed", "init_error", "trajectory",
                 "imu_noise", "sensors"},
    "filter": {"name"},
    "montecarlo": {"runs", "jobs"},
    "propagate": {"dts", "endpoint_study", "study_runs"},
    "preintegrate": {"window"},
    "banana": {"n", "distances", "yaw_std_deg", "x_std", "y_std"},
}

_NOISE_KEYS = {"gyro_psd", "accel_psd", "gyro_bias_psd", "accel_bias_psd"}


def _check_keys(mapping: dict, allowed, path: str) -> None:
    for key in mapping:
        if key not in allowed:
            raise ConfigError(f"unknown config key: {path}{key}")


def validate_config(cfg: dict) -> None:
    """Reject any key outside the documented schema, naming the first one."""
    _check_keys(cfg, _SCHEMA, "")
    for section, keys in _SCHEMA.items():
        if section not in cfg:
            continue
        if not isinstance(cfg[section], dict):
            raise ConfigError(f"config section {section} must be a table")
        _check_keys(cfg[section], keys, f"{section}.")
    scenario = cfg.get("scenario", {})
    trajectory = scenario.get("trajectory")
    if trajectory is not None:
        kind = trajectory.get("kind")
        if kind not in _TRAJECTORY_KEYS:
            raise ConfigError(f"unknown trajectory kind: {kind!r}")
        _check_keys(trajectory, _TRAJECTORY_KEYS[kind], "scenario.trajectory.")
    if "imu_noise" in scenario:
        _check_keys(scenario["imu_noise"], _NOISE_KEYS, "scenario.imu_noise.")
    for i, sensor in enumerate(scenario.get("sensors", [])):
        _check_keys(sensor, _SENSOR_KEYS, f"scenario.sensors[{i}].")


def _merge(base: dict, overlay: dict) -> dict:
    out = dict(base)
    for key, value in overlay.items():
        if (key != "trajectory" and isinstance(value, dict)
                and isinstance(out.get(key), dict)):
            out[key] = _merge(out[key], value)
        else:
            # trajectories replace wholesale: their keys are kind-specific
            out[key] = value
    return out


def load_config(args) -> dict:
    cfg = default_config()
    if args.scenario is not None:
        cfg = _merge(cfg, PRESETS[args.scenario])
    if args.config is not None:
        try:
            with open(args.config, "rb") as fh:
                file_cfg = tomli.load(fh)
        except FileNotFoundError as exc:
            raise ConfigError(f"config file not found: {args.config}") from exc
        except tomli.TOMLDecodeError as exc:
            raise ConfigError(f"malformed TOML in {args.config}: {exc}") from exc
        validate_config(file_cfg)
        cfg = _merge(cfg, file_cfg)
    if getattr(args, "seed", None) is not None:
        cfg["scenario"]["seed"] = args.seed
    if getattr(args, "runs", None) is not None:
        cfg["montecarlo"]["runs"] = args.runs
    if getattr(args, "jobs", None) is not None:
        cfg["montecarlo"]["jobs"] = args.jobs
    if getattr(args, "filter", None) is not None:
        cfg["filter"]["name"] = args.filter
    validate_config(cfg)
    return cfg


def build_scenario(cfg: dict) -> Scenario:
    sc = cfg["scenario"]
    trajectory_cfg = sc["trajectory"]
    kind = trajectory_cfg["kind"]
    try:
        if kind == "circle":
            trajectory = CircularPlanar(float(trajectory_cfg["radius"]),
                                        float(trajectory_cfg["speed"]))
        elif kind == "constant":
            trajectory = ConstantInput(trajectory_cfg["gyro"],
                                       trajectory_cfg["accel"])
        else:
            trajectory = WaypointSpline(trajectory_cfg["times"],
                                        trajectory_cfg["positions"])
        sensors = []
        for spec in sc["sensors"]:
            try:
                sensor_kind = AidingKind[spec["kind"]]
            except KeyError:
                raise ConfigError(
                    f"unknown sensor kind: {spec['kind']!r}") from None
            sensors.append(SensorSpec(
                sensor_kind, float(spec["rate"]), float(spec["noise_std"]),
                reference=spec.get("reference"),
                lever_arm=np.asarray(spec.get("lever_arm", [0.0, 0.0, 0.0]),
                                     dtype=float)))
        noise_cfg = sc["imu_noise"]
        noise = ImuNoiseSpec(
            gyro_psd=np.asarray(noise_cfg["gyro_psd"], dtype=float),
            accel_psd=np.asarray(noise_cfg["accel_psd"], dtype=float),
            gyro_bias_psd=np.asarray(noise_cfg["gyro_bias_psd"], dtype=float),
            accel_bias_psd=np.asarray(noise_cfg["accel_bias_psd"],
                                      dtype=float))
        return Scenario(trajectory=trajectory, duration=float(sc["duration"]),
                        imu_rate=float(sc["imu_rate"]),
                        sensors=tuple(sensors),
                        init_error=tuple(float(v) for v in sc["init_error"]),
                        seed=int(sc["seed"]), imu_noise=noise)
    except (ValueError, KeyError, TypeError) as exc:
        if isinstance(exc, ConfigError):
            raise
        raise ConfigError(f"invalid scenario configuration: {exc}") from exc


# --- artifact writers ------------------------------------------------------


def _write_table(path: Path, token: str, columns, rows) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        fh.write(token + "\n")
        fh.write("# " + ",".join(columns) + "\n")
        for row in rows:
            fh.write(",".join("%.17g" % v for v in row) + "\n")


def _jsonable(value):
    if isinstance(value, dict):
        return {k: _jsonable(v) for k, v in value.items()}
    if isinstance(value, (list, tuple)):
        return [_jsonable(v) for v in value]
    if isinstance(value, np.ndarray):
        return _jsonable(value.tolist())
    if isinstance(value, (np.floating, float)):
        return float(value)
    if isinstance(value, (np.integer, int)):
        return int(value)
    return value


def _write_json(path: Path, payload: dict) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(_jsonable(payload), fh, indent=2, sort_keys=True)
        fh.write("\n")


def _emit(path: Path) -> None:
    print(path.name)


# --- subcommands -----------------------------------------------------------


def _scenario_tag(args) -> str:
    if args.scenario is not None:
        return args.scenario
    if args.config is not None:
        return Path(args.config).stem
    return "default"


def cmd_propagate(args, cfg: dict, out: Path) -> int:
    sc = build_scenario(cfg)
    for dt in cfg["propagate"]["dts"]:
        sub = replace(sc, imu_rate=1.0 / float(dt))
        paths = dead_reckoning_paths(sub)
        rows = np.column_stack([paths["t"], paths["truth"], paths["exact"],
                                paths["classical"]])
        path = out / ("paths_dt%g.csv" % float(dt))
        _write_table(path, PATHS_TOKEN,
                     ("t", "truth_x", "truth_y", "truth_z", "exact_x",
                      "exact_y", "exact_z", "classical_x", "classical_y",
                      "classical_z"), rows)
        _emit(path)
    if cfg["propagate"]["endpoint_study"]:
        _endpoint_study(sc, int(cfg["propagate"]["study_runs"]), out)
    return 0


def _endpoint_study(sc: Scenario, runs: int, out: Path) -> None:
    """Monte Carlo endpoints of noisy dead reckoning, the propagated
    uncertainty mapped through the group exponential, and the flat-space
    ellipse fitted to the same endpoints."""
    truth = generate_truth(sc)
    dt = truth.dt
    endpoints = np.zeros((runs, 2))
    for r in range(runs):
        imu = corrupt(truth, sc.imu_noise, sc.seed + r)
        x = truth.pose(0)
        for k in range(truth.steps):
            x = propagate_pose(x, ImuSample(k * dt, imu.gyro[k], imu.accel[k]),
                               BiasState.zero(), dt)
        endpoints[r] = x.pos[:2]

    belief = NavBelief(truth.pose(0), np.zeros((9, 9)))
    for k in range(truth.steps):
        belief = propagate_covariance(belief, sc.imu_noise, dt)
        belief = NavBelief(
            propagate_pose(belief.pose,
                           ImuSample(k * dt, truth.gyro[k], truth.accel[k]),
                           BiasState.zero(), dt), belief.cov)
    mean_pose, cov = belief.pose, belief.cov

    path = out / "study_endpoints.csv"
    _write_table(path, ENDPOINTS_TOKEN, ("x", "y"), endpoints)
    _emit(path)

    eigval, eigvec = np.linalg.eigh(cov)
    keep = [i for i in range(9) if eigval[i] > 1e-12 * eigval[-1]]
    theta = np.linspace(0.0, 2.0 * np.pi, 181)
    contour_rows = []
    for a_idx in range(len(keep)):
        for b_idx in range(a_idx + 1, len(keep)):
            i, j = keep[a_idx], keep[b_idx]
            axis_i = 3.0 * np.sqrt(eigval[i]) * eigvec[:, i]
            axis_j = 3.0 * np.sqrt(eigval[j]) * eigvec[:, j]
            for th in theta:
                xi = np.cos(th) * axis_i + np.sin(th) * axis_j
                pose = se23_compose(se23_exp(xi), mean_pose)
                contour_rows.append((float(i), float(j), pose.pos[0],
                                     pose.pos[1]))
    path = out / "study_contour.csv"
    _write_table(path, CONTOUR_TOKEN, ("axis_i", "axis_j", "x", "y"),
                 contour_rows)
    _emit(path)

    sample_mean = endpoints.mean(axis=0)
    centered = endpoints - sample_mean
    sample_cov = centered.T @ centered / (runs - 1)
    eigval2, eigvec2 = np.linalg.eigh(sample_cov)
    ellipse = [sample_mean
               + 3.0 * np.sqrt(eigval2[0]) * np.cos(th) * eigvec2[:, 0]
               + 3.0 * np.sqrt(eigval2[1]) * np.sin(th) * eigvec2[:, 1]
               for th in theta]
    path = out / "study_ellipse.csv"
    _write_table(path, ELLIPSE_TOKEN, ("x", "y"), ellipse)
    _emit(path)

    path = out / "study.json"
    _write_json(path, {
        "version": STUDY_VERSION,
        "runs": runs,
        "steps": truth.steps,
        "dt": dt,
        "seed": sc.seed,
        "mean_endpoint": mean_pose.pos[:2],
        "sample_mean": sample_mean,
        "sample_cov": sample_cov,
        "propagated_cov_diag": np.diag(cov),
    })
    _emit(path)


def cmd_preintegrate(args, cfg: dict, out: Path) -> int:
    sc = build_scenario(cfg)
    truth = generate_truth(sc)
    imu = corrupt(truth, sc.imu_noise, sc.seed)
    dt = truth.dt
    per = max(int(round(float(cfg["preintegrate"]["window"]) * sc.imu_rate)),
              1)
    rows = []
    for w, start in enumerate(range(0, truth.steps, per)):
        stop = min(start + per, truth.steps)
        samples = [ImuSample(k * dt, imu.gyro[k], imu.accel[k])
                   for k in range(start, stop)]
        acc = accumulate_imu(samples, dt, sc.imu_noise)
        rows.append([float(w), start * dt, stop * dt, float(acc.count),
                     *so3_log(acc.delta.rot), *acc.delta.vel, *acc.delta.pos,
                     *np.diag(acc.cov)])
    path = out / f"preint_{_scenario_tag(args)}.csv"
    _write_table(path, PREINT_TOKEN,
                 ("window", "t_start", "t_end", "count", "drot_x", "drot_y",
                  "drot_z", "dvel_x", "dvel_y", "dvel_z", "dpos_x", "dpos_y",
                  "dpos_z") + tuple(f"cov_{i}{i}" for i in range(9)), rows)
    _emit(path)
    return 0


def _run_and_write(args, cfg: dict, out: Path, name: str) -> int:
    sc = build_scenario(cfg)
    rec = run_filter(sc, name)
    tag = _scenario_tag(args)
    path = out / f"run_{name}_{tag}.csv"
    write_run_csv(rec, path)
    _emit(path)
    final = {"err_att_rad": rec.err_att[-1], "err_vel": rec.err_vel[-1],
             "err_pos": rec.err_pos[-1]}
    rms = {key: float(np.sqrt(np.mean(arr ** 2)))
           for key, arr in (("err_att_rad", rec.err_att),
                            ("err_vel", rec.err_vel),
                            ("err_pos", rec.err_pos))}
    path = out / f"summary_{name}_{tag}.json"
    _write_json(path, {
        "version": SUMMARY_VERSION,
        "filter": name,
        "scenario": tag,
        "seed": sc.seed,
        "duration": sc.duration,
        "imu_rate": sc.imu_rate,
        "final": final,
        "rms": rms,
        "nees_mean": float(np.mean(rec.nees)),
        "innovation": {kind: {"count": count, "rms": rms_val}
                       for kind, (count, rms_val)
                       in sorted(rec.innovation_stats.items())},
    })
    _emit(path)
    return 0


def cmd_filter(args, cfg: dict, out: Path) -> int:
    name = cfg["filter"]["name"]
    if name not in FILTER_NAMES:
        raise ConfigError(f"unknown filter name: {name!r}")
    return _run_and_write(args, cfg, out, name)


def cmd_observe(args, cfg: dict, out: Path) -> int:
    name = cfg["filter"]["name"]
    if getattr(args, "filter", None) is None and name not in OBSERVER_NAMES:
        name = OBSERVER_NAMES[0]
    if name not in OBSERVER_NAMES:
        raise ConfigError(
            f"observe supports {OBSERVER_NAMES}, not {name!r}")
    return _run_and_write(args, cfg, out, name)


def cmd_montecarlo(args, cfg: dict, out: Path) -> int:
    name = cfg["filter"]["name"]
    if name not in FILTER_NAMES:
        raise ConfigError(f"unknown filter name: {name!r}")
    sc = build_scenario(cfg)
    try:
        mc = monte_carlo(sc, name, int(cfg["montecarlo"]["runs"]),
                         jobs=int(cfg["montecarlo"]["jobs"]))
    except ValueError as exc:
        # every run failing is a numerical, not a configuration, problem
        raise RuntimeError(str(exc)) from exc
    tag = _scenario_tag(args)
    path = out / f"mc_{name}_{tag}.json"
    _write_json(path, {
        "version": MC_VERSION,
        "filter": name,
        "scenario": tag,
        "seed": sc.seed,
        "n_runs": mc.n_runs,
        "failure_count": mc.failure_count,
        "t": mc.t,
        "quantiles": mc.quantiles,
        "nees_mean": mc.nees_mean,
        "final_est_pos": mc.final_est_pos,
        "final_truth_pos": mc.final_truth_pos,
    })
    _emit(path)
    return 0


def cmd_observability(args, cfg: dict, out: Path) -> int:
    reports = {report.name: report for report in scenario_reports()}
    if args.case not in reports:
        raise ConfigError(
            f"unknown case {args.case!r}; choose from "
            f"{sorted(reports)}")
    report = reports[args.case]
    path = out / f"observability_{args.case}.json"
    _write_json(path, {
        "version": OBS_VERSION,
        "name": report.name,
        "rank": report.rank,
        "horizon": report.horizon,
        "singular_values": report.singular_values,
        "null_basis": report.null_basis,
    })
    _emit(path)
    return 0


def cmd_banana(args, cfg: dict, out: Path) -> int:
    params = cfg["banana"]
    clouds = banana_samples(
        seed=int(cfg["scenario"]["seed"]), n=int(params["n"]),
        distances=tuple(float(d) for d in params["distances"]),
        yaw_std=float(np.deg2rad(params["yaw_std_deg"])),
        x_std=float(params["x_std"]), y_std=float(params["y_std"]))
    for label in ("flat", "curved"):
        rows = []
        for d in sorted(clouds):
            cloud = clouds[d][label]
            rows.extend([d, x, y, yaw] for x, y, yaw in cloud)
        path = out / f"cloud_{label}.csv"
        _write_table(path, CLOUD_TOKEN, ("distance", "x", "y", "yaw"), rows)
        _emit(path)
    return 0


_COMMANDS = {
    "propagate": cmd_propagate,
    "preintegrate": cmd_preintegrate,
    "filter": cmd_filter,
    "observe": cmd_observe,
    "montecarlo": cmd_montecarlo,
    "observability": cmd_observability,
    "banana": cmd_banana,
}


# --- argument parsing and dispatch -----------------------------------------


class _Parser(argparse.ArgumentParser):
    """Usage errors are configuration errors (exit 1, not argparse's 2)."""

    def error(self, message):
        raise ConfigError(message)


def _build_parser() -> _Parser:
    parser = _Parser(prog="navkit",
                     description="deterministic aided-navigation experiments")
    sub = parser.add_subparsers(dest="command", required=True)
    for name in _COMMANDS:
        sp = sub.add_parser(name, description=f"run the {name} pipeline")
        sp.add_argument("--config", type=Path,
                        help="TOML configuration file")
        sp.add_argument("--scenario", choices=sorted(PRESETS),
                        help="named scenario preset")
        sp.add_argument("--seed", type=int, help="override the scenario seed")
        sp.add_argument("--out", type=Path, default=Path("."),
                        help="output directory (created if missing)")
        if name in ("filter", "observe", "montecarlo"):
            choices = OBSERVER_NAMES if name == "observe" else FILTER_NAMES
            sp.add_argument("--filter", choices=choices,
                            help="estimator to run")
        if name == "montecarlo":
            sp.add_argument("--runs", type=int, help="number of seeds")
            sp.add_argument("--jobs", type=int,
                            help="worker processes (outputs identical for "
                                 "any value)")
        if name == "observability":
            sp.add_argument("--case", required=True,
                            help="canned sensing configuration name")
    return parser


def main(argv=None) -> int:
    try:
        args = _build_parser().parse_args(argv)
        cfg = load_config(args)
        out = Path(args.out)
        out.mkdir(parents=True, exist_ok=True)
        return _COMMANDS[args.command](args, cfg, out)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 1
    except _NUMERICAL_ERRORS as exc:
        print(f"numerical failure: {type(exc).__name__}: {exc}",
              file=sys.stderr)
        return 2
    except ValueError as exc:
        # scenario/filter incompatibilities surface as library ValueErrors
        print(f"config error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
