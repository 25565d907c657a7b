"""Command-line interface.

Every subcommand reads an optional JSON run configuration, applies flag
overrides, and writes its outputs into ``--out``. Output files start with a
provenance line naming the tool version and the SHA-256 of the effective
configuration, so identical inputs give byte-identical outputs.
"""
from __future__ import annotations

import argparse
import csv
import hashlib
import json
import logging
import math
import sys
from dataclasses import asdict, dataclass, field, fields, replace
from pathlib import Path

import numpy as np

from . import __version__
from .calibration import (MEASURED, DataError, DatasetSplit, TWCCalibrator, accuracy_table, load_run,
                          preprocess_run, save_run)
from .core import ConfigError, load_system, reference_system, save_system
from .engine import EngineMap, MapError, SuboptimalController, load_map, save_map
from .policy import (REDUCED_T1, LambdaWeights, PackingError, PolicyError, PolicyTable, TWCControlProblem,
                     build_grid, compress_table, pack_policy, payload_bytes, simulate_controller,
                     simulate_policy, simulate_suboptimal, solve_policy, tune_switch_time)
from .radialprofile import get_library
from .thermal import IntegrationError, TWCSystem

log = logging.getLogger("twcsim")

EXIT_OK, EXIT_CONFIG, EXIT_DATA, EXIT_NUMERICAL = 0, 2, 3, 4


@dataclass
class RunConfig:
    """Paths and numerical settings shared by all subcommands."""

    engine_map: str | None = None
    system: str | None = None
    runs: dict = field(default_factory=dict)
    policy: str | None = None
    out_dir: str = "."
    dt: float = 0.1
    duration: float = 145.0
    lambda_n: tuple = (100.0, 100.0, 100.0)
    grid: dict | str | None = None
    seed: int = 0
    n_channels: int = 10
    policy_dt: float = 5.0
    substeps: int = 10
    op_indices: list | None = None
    stabilization_window: int = 10
    max_iter: int = 5000
    filter_window: float | None = 5.0
    initial_temp_c: float | None = None
    op_index: int | None = None
    delay_s: float = 0.0
    tau_s: float = 0.0
    noise: float = 0.01
    train: tuple = (1, 3, 5, 7, 9)
    valid: tuple = (2, 4, 6, 8, 10)
    kinetics_search: dict = field(default_factory=dict)
    thermal_search: dict = field(default_factory=dict)
    fit_thermal: bool = True

    @classmethod
    def from_file(cls, path) -> "RunConfig":
        try:
            doc = json.loads(Path(path).read_text())
        except OSError as exc:
            raise ConfigError(f"{path}: {exc.strerror}") from None
        except json.JSONDecodeError as exc:
            raise ConfigError(f"{path}: invalid JSON ({exc})") from None
        if not isinstance(doc, dict):
            raise ConfigError(f"{path}: expected a JSON object")
        known = {f.name for f in fields(cls)}
        unknown = sorted(set(doc) - known)
        if unknown:
            raise ConfigError(f"{path}: unknown keys {unknown}")
        base = Path(path).parent
        for key in ("engine_map", "system", "policy"):
            if doc.get(key):
                doc[key] = str(base / doc[key])
        if "runs" in doc:
            doc["runs"] = {str(k): str(base / v) for k, v in doc["runs"].items()}
        return cls(**doc)

    def validate(self) -> None:
        if not 0 < self.dt <= 1:
            raise ConfigError(f"dt must lie in (0, 1] s, got {self.dt}")
        if not (self.duration >= 0 and math.isfinite(self.duration)):
            raise ConfigError(f"duration must be finite and nonnegative, got {self.duration}")
        if len(self.lambda_n) != 3 or min(self.lambda_n) < 0:
            raise ConfigError("lambda needs three nonnegative values (CO, NOx, THC)")
        if not self.policy_dt > 0 or self.substeps < 1:
            raise ConfigError("policy_dt must be positive and substeps at least 1")
        if self.n_channels < 1:
            raise ConfigError("n_channels must be at least 1")
        for key in ("engine_map", "system", "policy"):
            p = getattr(self, key)
            if p and not Path(p).is_file():
                raise ConfigError(f"{key}: file not found: {p}")

    def digest(self) -> str:
        # the output location does not change results
        doc = json.dumps({k: v for k, v in asdict(self).items() if k != "out_dir"}, sort_keys=True, default=list)
        return hashlib.sha256(doc.encode()).hexdigest()


def provenance(cfg: RunConfig) -> str:
    return f"twcsim {__version__} config-sha256 {cfg.digest()}"


def _csv_header(cfg: RunConfig) -> str:
    return f"# {provenance(cfg)}\n"


def _write_json(path: Path, cfg: RunConfig, doc: dict) -> None:
    out = {"provenance": provenance(cfg), **doc}
    path.write_text(json.dumps(out, indent=2, sort_keys=True, default=_json_default) + "\n")


def _json_default(o):
    if isinstance(o, np.generic):
        return o.item()
    if isinstance(o, np.ndarray):
        return o.tolist()
    raise TypeError(f"not serialisable: {type(o).__name__}")


def _fmt(v) -> str:
    return repr(float(v))


# -- shared loaders ------------------------------------------------------------


def _engine_map(cfg: RunConfig) -> EngineMap:
    if cfg.engine_map:
        return load_map(cfg.engine_map, get_library())
    from .synthetic import synthetic_map

    return synthetic_map(cfg.seed)


def _specs(cfg: RunConfig):
    return load_system(cfg.system) if cfg.system else reference_system()


def _grid(cfg: RunConfig):
    if cfg.grid == "reduced":
        return build_grid({"twc1_t1_c": REDUCED_T1})
    if isinstance(cfg.grid, str) and cfg.grid != "default":
        raise ConfigError(f"unknown grid {cfg.grid!r}")
    return build_grid(None if cfg.grid in (None, "default") else cfg.grid)


def _initial(system: TWCSystem, cfg: RunConfig):
    return system.initial_state(cfg.initial_temp_c)


def _load_runs(cfg: RunConfig, indices):
    missing = [i for i in indices if str(i) not in cfg.runs]
    if missing:
        raise DataError(f"missing cold-start runs for load points {missing}")
    out = []
    for i in indices:
        run = load_run(cfg.runs[str(i)], load_point=int(i))
        if cfg.delay_s or cfg.tau_s:
            run = preprocess_run(run, cfg.delay_s, cfg.tau_s)
        out.append(run)
    return out


# -- commands ------------------------------------------------------------------

SIM_COLUMNS = (
    ["t_s", "twc1_t1_c", "twc1_t2_c", "twc1_t3_c", "twc1_dt_c", "twc2_t1_c", "twc2_dt_c",
     "speed_rpm", "bmep_bar", "sa_cabtdc", "mdot_exh_g_per_s"]
    + [f"eo_{s.lower()}_mg_per_s" for s in MEASURED]
    + [f"mid_{s.lower()}_mg_per_s" for s in MEASURED]
    + [f"tp_{s.lower()}_mg_per_s" for s in MEASURED]
    + [f"eta_{s.lower()}" for s in MEASURED]
    + ["bsfc_g_per_kwh"]
)


def _write_trajectory(path: Path, cfg: RunConfig, run) -> None:
    with open(path, "w", newline="") as fh:
        fh.write(_csv_header(cfg))
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(SIM_COLUMNS)
        for k in range(len(run.t)):
            eo, mid, tp = run.engine_out[k, :3], run.midbrick[k, :3], run.tailpipe[k, :3]
            with np.errstate(divide="ignore", invalid="ignore"):
                eta = np.where(eo > 0, 1.0 - tp / np.where(eo > 0, eo, 1.0), 0.0)
            row = [run.t[k], *run.x1[k], *run.x2[k], *run.setpoint[k], run.mdot[k] * 1e3,
                   *(eo * 1e6), *(mid * 1e6), *(tp * 1e6), *eta, run.bsfc[k]]
            w.writerow([_fmt(v) for v in row])


def _summary(run, dt: float) -> dict:
    return {
        "cumulative_tailpipe_mg": run.cumulative_mg,
        "fuel_g": run.fuel_g,
        "mean_bsfc_g_per_kwh": run.mean_bsfc if run.bsfc.size else 0.0,
        "duration_s": len(run.t) * dt,
    }


def cmd_simulate(cfg: RunConfig, out: Path) -> dict:
    """Simulate a cold start under a policy file or a fixed operating point."""
    emap = _engine_map(cfg)
    specs = _specs(cfg)
    system = TWCSystem(specs[0], specs[1], n_channels=cfg.n_channels)
    x1, x2 = _initial(system, cfg)
    if cfg.policy:
        pol = PolicyTable.load(cfg.policy)
        pol.validate(emap)
        run = simulate_policy(pol, system, emap, x1, x2, cfg.duration, cfg.dt, cfg.filter_window)
        mode = "policy"
    else:
        op = emap.min_bsfc_index if cfg.op_index is None else int(cfg.op_index)
        if not 0 <= op < len(emap):
            raise ConfigError(f"op_index {op} outside the engine map (0..{len(emap) - 1})")
        run = simulate_controller(system, emap, lambda *a: op, x1, x2, cfg.duration, cfg.dt, None)
        mode = f"constant op {op}"
    _write_trajectory(out / "trajectory.csv", cfg, run)
    summary = {"mode": mode, **_summary(run, cfg.dt)}
    _write_json(out / "summary.json", cfg, summary)
    return summary


def cmd_calibrate(cfg: RunConfig, out: Path) -> dict:
    split = DatasetSplit(tuple(cfg.train), tuple(cfg.valid))
    train = _load_runs(cfg, split.train_indices)
    valid = _load_runs(cfg, [i for i in split.valid_indices if str(i) in cfg.runs])
    emap = _engine_map(cfg)
    for run in train + valid:
        if not 0 <= run.op_index < len(emap):
            raise DataError(f"run {run.load_point}: op_index {run.op_index} not in the engine map")
        run.profile_index = emap[run.op_index].fitted_profile_time
    est = TWCCalibrator(_specs(cfg), n_channels_kinetics=cfg.n_channels, n_channels_thermal=cfg.n_channels,
                        kinetics_search=cfg.kinetics_search, thermal_search=cfg.thermal_search,
                        fit_thermal=cfg.fit_thermal)
    est.fit(train)
    save_system(out / "calibrated_system.json", est.specs_, {"provenance": provenance(cfg)})
    report = {
        "search": est.report_,
        "train": accuracy_table(est.specs_, train, cfg.n_channels),
        "valid": accuracy_table(est.specs_, valid, cfg.n_channels) if valid else [],
    }
    _write_json(out / "calibration_report.json", cfg, report)
    return report


def _problem(cfg: RunConfig, emap: EngineMap) -> TWCControlProblem:
    specs = _specs(cfg)
    system = TWCSystem(specs[0], specs[1], n_channels=cfg.n_channels)
    lam = LambdaWeights.from_normalized(cfg.lambda_n, emap)
    return TWCControlProblem(system, emap, lam, cfg.policy_dt, cfg.substeps, cfg.op_indices)


def cmd_solve(cfg: RunConfig, out: Path) -> dict:
    emap = _engine_map(cfg)
    prob = _problem(cfg, emap)
    grid = _grid(cfg)
    pol = solve_policy(prob, grid, cfg.stabilization_window, cfg.max_iter)
    pol.save(out / "policy.npz")
    pol.to_csv(out / "policy.csv", emap, _csv_header(cfg))
    summary = {
        "nodes": grid.node_count, "iterations": pol.iterations,
        "detected_horizon_s": pol.detected_horizon_s, "lambda_n": list(cfg.lambda_n),
        "lambda": list(prob.lam.values), "distinct_ops": sorted(set(int(i) for i in pol.op_index)),
    }
    _write_json(out / "solve_summary.json", cfg, summary)
    return summary


def _require_policy(cfg: RunConfig) -> PolicyTable:
    if not cfg.policy:
        raise ConfigError("this command needs a policy file (config key 'policy')")
    return PolicyTable.load(cfg.policy)


def cmd_compress(cfg: RunConfig, out: Path) -> dict:
    emap = _engine_map(cfg)
    pol = _require_policy(cfg)
    pol.validate(emap)
    comp = compress_table(pol)
    blob = pack_policy(comp, emap, provenance(cfg))
    path = out / "policy.twcp"
    path.write_bytes(blob)
    summary = {"entries": comp.count, "payload_bytes": payload_bytes(comp.count),
               "file_bytes": len(blob), "header_bytes": len(blob) - payload_bytes(comp.count)}
    _write_json(out / "compress_summary.json", cfg, summary)
    return summary


def cmd_benchmark(cfg: RunConfig, out: Path) -> dict:
    emap = _engine_map(cfg)
    pol = _require_policy(cfg)
    pol.validate(emap)
    specs = _specs(cfg)
    system = TWCSystem(specs[0], specs[1], n_channels=cfg.n_channels)
    x1, x2 = _initial(system, cfg)
    opt = simulate_policy(pol, system, emap, x1, x2, cfg.duration, cfg.dt, cfg.filter_window)
    if not len(opt.t):
        raise ConfigError("benchmark needs a positive duration")
    heat = int(opt.requested_op[0])
    t_prime = tune_switch_time(emap, heat, opt.mean_bsfc, cfg.duration, cfg.dt)
    sub = simulate_suboptimal(SuboptimalController(emap, heat, t_prime), system, x1, x2, cfg.duration, cfg.dt)
    rows = []
    for name, r in (("optimal", opt), ("suboptimal", sub)):
        rows.append({"controller": name, **{f"{s}_mg": r.cumulative_mg[s] for s in MEASURED},
                     "mean_bsfc_g_per_kwh": r.mean_bsfc, "fuel_g": r.fuel_g})
    rel = {f"{s}_relative": (opt.cumulative_mg[s] / sub.cumulative_mg[s] - 1.0)
           if sub.cumulative_mg[s] > 0 else float("nan") for s in MEASURED}
    rows.append({"controller": "relative", **{f"{s}_mg": rel[f"{s}_relative"] for s in MEASURED},
                 "mean_bsfc_g_per_kwh": opt.mean_bsfc - sub.mean_bsfc, "fuel_g": opt.fuel_g - sub.fuel_g})
    with open(out / "benchmark.csv", "w", newline="") as fh:
        fh.write(_csv_header(cfg))
        w = csv.DictWriter(fh, fieldnames=list(rows[0]), lineterminator="\n")
        w.writeheader()
        for r in rows:
            w.writerow({k: v if isinstance(v, str) else _fmt(v) for k, v in r.items()})
    summary = {"heat_op_index": heat, "switch_time_s": t_prime, "rows": rows, **rel}
    _write_json(out / "benchmark.json", cfg, summary)
    return summary


def cmd_generate_synthetic(cfg: RunConfig, out: Path) -> dict:
    from .synthetic import COLD_START_POINTS, cold_start_indices, generate_runs, synthetic_map

    emap = synthetic_map(cfg.seed)
    specs = _specs(cfg)
    header = _csv_header(cfg)
    save_map(out / "engine_map.csv", emap, header)
    save_system(out / "true_system.json", specs, {"provenance": provenance(cfg)})
    ops = cold_start_indices(emap)
    runs = generate_runs(specs, emap, ops, duration=cfg.duration, dt=cfg.dt, noise=cfg.noise,
                         seed=cfg.seed, delay=cfg.delay_s, tau=cfg.tau_s, n_channels=cfg.n_channels)
    files = {}
    for j, run in enumerate(runs, start=1):
        name = f"run_{j:02d}.csv"
        save_run(out / name, run, header)
        files[str(j)] = name
    manifest = {"engine_map": "engine_map.csv", "system": "true_system.json", "runs": files,
                "load_points": [list(p) for p in COLD_START_POINTS], "op_indices": ops}
    _write_json(out / "manifest.json", cfg, manifest)
    run_cfg = {"engine_map": "engine_map.csv", "runs": files, "dt": cfg.dt, "n_channels": cfg.n_channels,
               "seed": cfg.seed}
    (out / "run_config.json").write_text(json.dumps(run_cfg, indent=2, sort_keys=True) + "\n")
    return manifest


COMMANDS = {
    "simulate": cmd_simulate,
    "calibrate": cmd_calibrate,
    "solve": cmd_solve,
    "compress": cmd_compress,
    "benchmark": cmd_benchmark,
    "generate-synthetic": cmd_generate_synthetic,
}


def _parse_lambda(text: str) -> tuple:
    try:
        vals = tuple(float(v) for v in text.split(","))
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected three comma-separated numbers, got {text!r}") from None
    if len(vals) != 3:
        raise argparse.ArgumentTypeError("expected three values: CO,NOx,THC")
    return vals


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", type=Path, help="JSON run configuration")
    common.add_argument("--out", type=Path, help="output directory (created if missing)")
    common.add_argument("--seed", type=int)
    common.add_argument("--lambda", dest="lambda_n", type=_parse_lambda,
                        help="normalised emission weights CO,NOx,THC")
    common.add_argument("--dt", type=float, help="simulation step in s")
    common.add_argument("--duration", type=float, help="simulated time in s")
    common.add_argument("-v", "--verbose", action="store_true")
    parser = argparse.ArgumentParser(prog="twcsim", description="Catalyst cold-start modelling and control.")
    parser.add_argument("--version", action="version", version=f"twcsim {__version__}")
    sub = parser.add_subparsers(dest="command", required=True)
    for name, fn in COMMANDS.items():
        sub.add_parser(name, parents=[common], help=(fn.__doc__ or name).splitlines()[0])
    return parser


def _config(args) -> RunConfig:
    cfg = RunConfig.from_file(args.config) if args.config else RunConfig()
    over = {k: getattr(args, k) for k in ("seed", "lambda_n", "dt", "duration") if getattr(args, k) is not None}
    if args.out is not None:
        over["out_dir"] = str(args.out)
    cfg = replace(cfg, **over)
    cfg.validate()
    return cfg


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        cfg = _config(args)
        out = Path(cfg.out_dir)
        out.mkdir(parents=True, exist_ok=True)
        COMMANDS[args.command](cfg, out)
    except (ConfigError, PackingError) as exc:
        print(f"twcsim: configuration error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (DataError, MapError) as exc:
        print(f"twcsim: data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except (IntegrationError, PolicyError, FloatingPointError) as exc:
        print(f"twcsim: numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERICAL
    except OSError as exc:
        print(f"twcsim: configuration error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
