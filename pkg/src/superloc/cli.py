"""Command-line front end: run sweeps, synthesise datasets, solve them.

All file formats are JSON so fixtures stay diffable; complex numbers are
stored as [re, im] pairs of decimal floats, which round-trip exactly.
Exit codes: 0 success, 2 configuration or schema error, 3 solver
non-convergence in at least one trial (results are still written).
"""

from __future__ import annotations

import argparse
import json
import os
import sys
from dataclasses import dataclass, field
from typing import Any, Optional

import numpy as np

from .errors import ConfigError, InvalidCondition, SchemaError
from .geometry import Location, Rect
from .harness import (
    Condition,
    Path,
    Scenario,
    TrialResult,
    canonicalise_scenario,
    default_scene,
    error_breakdown,
    extract_ms,
    generate_scenario,
    run_monte_carlo,
)
from .signal_model import MeasurementSet, SystemConfig, add_awgn, qpsk_symbols, synthesize
from .solver import LocalDescentConfig, SolverConfig, WeightSolverConfig, adcg_solve

SCHEMA_VERSION = 1
CSV_HEADER = "condition,snr_db,trial,rmse_m,ms_error_m,converged,ambiguous,runtime_s"

DEFAULT_CONFIG: dict = {
    "schema_version": SCHEMA_VERSION,
    "system": {
        "num_antennas": 16,
        "num_subcarriers": 32,
        "subcarrier_spacing_hz": 1.0e4,
        "carrier_freq_hz": 2.0e9,
        "element_spacing_m": None,
        "speed_of_light": 3.0e8,
        "bs_positions_km": [[0.0, 0.0], [0.0, 1.0], [1.0, 0.0], [1.0, 1.0]],
        "pilot": "ones",
    },
    "solver": {
        "lambda1": None,
        "lambda2": None,
        "lambda_scale": 0.01,
        "lambda_noise_mult": 0.7,
        "prune_threshold": None,
        "prune_scale": 0.1,
        "max_outer_iters": 9,
        "coarse_grid_points_per_axis": 20,
        "stop_tol": 1.0e-6,
        "bs_exclusion_m": 1.0,
        "final_polish": True,
        "local_descent": {"max_steps": 600, "step_init": 25.0, "armijo_c": 1.0e-4,
                          "tol": 1.0e-12, "max_backtracks": 40},
        "weight_solver": {"max_iters": 8000, "tol": 1.0e-12, "xtol": 1.0e-12},
    },
    "experiment": {
        "condition": "nlos",
        "snr_grid_db": [-10.0, 0.0, 10.0],
        "trials": 50,
        "seed": 20250,
        "scene_km": [[0.0, 0.0], [1.0, 1.0]],
        "num_scatterers": None,
        "gain_model": "random-phase",
    },
    "output": {"path": "results.csv", "format": "csv"},
}


@dataclass
class RunConfig:
    """Validated run configuration (everything in SI units internally)."""

    system: SystemConfig
    solver: SolverConfig
    condition: Condition
    snr_grid_db: list
    trials: int
    seed: int
    scene: Rect
    num_scatterers: Optional[int]
    gain_model: str
    output_path: str
    output_format: str
    raw: dict = field(repr=False, default_factory=dict)


def _require_keys(section: dict, allowed: set, path: str):
    unknown = set(section) - allowed
    if unknown:
        raise ConfigError(f"{path}.{sorted(unknown)[0]}", "unknown key")


def _get(section: dict, key: str, default, path: str, kind=None, positive=False):
    value = section.get(key, default)
    if value is None:
        return None
    if kind is not None:
        try:
            value = kind(value)
        except (TypeError, ValueError):
            raise ConfigError(f"{path}.{key}", f"expected {kind.__name__}") from None
    if positive and value <= 0:
        raise ConfigError(f"{path}.{key}", "must be positive")
    return value


def parse_config(doc: dict) -> RunConfig:
    """Build a validated RunConfig from a parsed JSON document."""
    if not isinstance(doc, dict):
        raise ConfigError("<root>", "config must be a JSON object")
    _require_keys(doc, {"schema_version", "system", "solver", "experiment", "output"}, "<root>")
    if doc.get("schema_version") != SCHEMA_VERSION:
        raise ConfigError("schema_version", f"expected {SCHEMA_VERSION}")

    sys_sec = doc.get("system", {})
    _require_keys(sys_sec, set(DEFAULT_CONFIG["system"]), "system")
    pilot = sys_sec.get("pilot", "ones")
    n_sub = _get(sys_sec, "num_subcarriers", 32, "system", int, positive=True)
    if pilot == "ones":
        symbols = None
    elif isinstance(pilot, dict) and pilot.get("kind") == "qpsk":
        symbols = qpsk_symbols(n_sub, int(pilot.get("seed", 0)))
    else:
        raise ConfigError("system.pilot", "expected 'ones' or {'kind': 'qpsk', 'seed': int}")
    bs_km = sys_sec.get("bs_positions_km", DEFAULT_CONFIG["system"]["bs_positions_km"])
    try:
        bs_positions = [Location(1000.0 * float(x), 1000.0 * float(y)) for x, y in bs_km]
    except (TypeError, ValueError):
        raise ConfigError("system.bs_positions_km", "expected a list of [x, y] pairs") from None
    try:
        system = SystemConfig(
            num_antennas=_get(sys_sec, "num_antennas", 16, "system", int, positive=True),
            num_subcarriers=n_sub,
            subcarrier_spacing=_get(sys_sec, "subcarrier_spacing_hz", 1.0e4, "system", float, positive=True),
            carrier_freq=_get(sys_sec, "carrier_freq_hz", 2.0e9, "system", float, positive=True),
            element_spacing=_get(sys_sec, "element_spacing_m", None, "system", float, positive=True),
            speed_of_light=_get(sys_sec, "speed_of_light", 3.0e8, "system", float, positive=True),
            bs_positions=bs_positions,
            symbols=symbols,
        )
    except ValueError as exc:
        raise ConfigError("system", str(exc)) from None

    sol_sec = doc.get("solver", {})
    _require_keys(sol_sec, set(DEFAULT_CONFIG["solver"]), "solver")
    ld_sec = sol_sec.get("local_descent", {})
    _require_keys(ld_sec, set(DEFAULT_CONFIG["solver"]["local_descent"]), "solver.local_descent")
    ws_sec = sol_sec.get("weight_solver", {})
    _require_keys(ws_sec, set(DEFAULT_CONFIG["solver"]["weight_solver"]), "solver.weight_solver")
    try:
        solver = SolverConfig(
            lambda1=_get(sol_sec, "lambda1", None, "solver", float),
            lambda2=_get(sol_sec, "lambda2", None, "solver", float),
            lambda_scale=_get(sol_sec, "lambda_scale", 0.01, "solver", float),
            lambda_noise_mult=_get(sol_sec, "lambda_noise_mult", 0.7, "solver", float),
            prune_threshold=_get(sol_sec, "prune_threshold", None, "solver", float),
            prune_scale=_get(sol_sec, "prune_scale", 0.1, "solver", float),
            max_outer_iters=_get(sol_sec, "max_outer_iters", 9, "solver", int, positive=True),
            coarse_grid_points_per_axis=_get(sol_sec, "coarse_grid_points_per_axis", 20, "solver", int, positive=True),
            stop_tol=_get(sol_sec, "stop_tol", 1.0e-6, "solver", float),
            bs_exclusion_m=_get(sol_sec, "bs_exclusion_m", 1.0, "solver", float),
            final_polish=bool(sol_sec.get("final_polish", True)),
            local_descent=LocalDescentConfig(
                max_steps=_get(ld_sec, "max_steps", 600, "solver.local_descent", int),
                step_init=_get(ld_sec, "step_init", 25.0, "solver.local_descent", float, positive=True),
                armijo_c=_get(ld_sec, "armijo_c", 1.0e-4, "solver.local_descent", float, positive=True),
                tol=_get(ld_sec, "tol", 1.0e-12, "solver.local_descent", float),
                max_backtracks=_get(ld_sec, "max_backtracks", 40, "solver.local_descent", int, positive=True),
            ),
            weight_solver=WeightSolverConfig(
                max_iters=_get(ws_sec, "max_iters", 8000, "solver.weight_solver", int, positive=True),
                tol=_get(ws_sec, "tol", 1.0e-12, "solver.weight_solver", float),
                xtol=_get(ws_sec, "xtol", 1.0e-12, "solver.weight_solver", float),
            ),
        )
        solver.validate()
    except ValueError as exc:
        raise ConfigError("solver", str(exc)) from None

    exp_sec = doc.get("experiment", {})
    _require_keys(exp_sec, set(DEFAULT_CONFIG["experiment"]), "experiment")
    try:
        condition = Condition.parse(exp_sec.get("condition", "nlos"))
    except InvalidCondition as exc:
        raise ConfigError("experiment.condition", str(exc)) from None
    trials = _get(exp_sec, "trials", 50, "experiment", int)
    if trials is None or trials < 1:
        raise ConfigError("experiment.trials", "must be an integer >= 1")
    snr_grid = exp_sec.get("snr_grid_db", [-10.0, 0.0, 10.0])
    if not isinstance(snr_grid, list) or not snr_grid:
        raise ConfigError("experiment.snr_grid_db", "must be a non-empty list of dB values or null (no noise)")
    snr_grid = [None if v is None else float(v) for v in snr_grid]
    scene_km = exp_sec.get("scene_km", [[0.0, 0.0], [1.0, 1.0]])
    try:
        (x0, y0), (x1, y1) = scene_km
        scene = Rect(1000.0 * float(x0), 1000.0 * float(y0), 1000.0 * float(x1), 1000.0 * float(y1))
    except (TypeError, ValueError) as exc:
        raise ConfigError("experiment.scene_km", f"expected [[x0,y0],[x1,y1]] in km ({exc})") from None
    num_scatterers = _get(exp_sec, "num_scatterers", None, "experiment", int)
    gain_model = exp_sec.get("gain_model", "random-phase")
    if gain_model not in ("random-phase", "unit"):
        raise ConfigError("experiment.gain_model", "expected 'random-phase' or 'unit'")
    seed = _get(exp_sec, "seed", 0, "experiment", int)

    out_sec = doc.get("output", {})
    _require_keys(out_sec, set(DEFAULT_CONFIG["output"]), "output")
    out_format = out_sec.get("format", "csv")
    if out_format not in ("csv", "json"):
        raise ConfigError("output.format", "expected 'csv' or 'json'")

    return RunConfig(system=system, solver=solver, condition=condition,
                     snr_grid_db=snr_grid, trials=trials, seed=seed, scene=scene,
                     num_scatterers=num_scatterers, gain_model=gain_model,
                     output_path=out_sec.get("path", "results.csv"),
                     output_format=out_format, raw=doc)


def load_config(path: str, seed_override: Optional[int] = None) -> RunConfig:
    try:
        with open(path) as fh:
            doc = json.load(fh)
    except OSError as exc:
        raise ConfigError(path, f"cannot read config: {exc}") from None
    except json.JSONDecodeError as exc:
        raise ConfigError(path, f"invalid JSON at line {exc.lineno}: {exc.msg}") from None
    cfg = parse_config(doc)
    env_seed = os.environ.get("SUPERLOC_SEED")
    if env_seed is not None:
        try:
            cfg.seed = int(env_seed)
        except ValueError:
            raise ConfigError("SUPERLOC_SEED", "must be an integer") from None
    if seed_override is not None:
        cfg.seed = seed_override          # flag > env > file
    return cfg


# ---------------------------------------------------------------------------
# Serialisation helpers (complex values as [re, im] float pairs)
# ---------------------------------------------------------------------------

def _c2pair(z: complex) -> list:
    return [float(np.real(z)), float(np.imag(z))]


def _pair2c(pair) -> complex:
    try:
        re, im = pair
        return complex(float(re), float(im))
    except (TypeError, ValueError):
        raise SchemaError(f"expected [re, im] pair, got {pair!r}") from None


def _matrix_to_lists(m: np.ndarray) -> list:
    return [[_c2pair(v) for v in row] for row in m]


def _matrix_from_lists(rows, shape) -> np.ndarray:
    try:
        m = np.array([[_pair2c(v) for v in row] for row in rows])
    except SchemaError:
        raise
    except Exception:
        raise SchemaError("malformed complex matrix") from None
    if m.shape != shape:
        raise SchemaError(f"matrix shape {m.shape} does not match config {shape}")
    return m


def scenario_to_dict(scenario: Scenario) -> dict:
    return {
        "mobile_m": [scenario.mobile.x, scenario.mobile.y],
        "condition": scenario.condition.value,
        "seed": scenario.seed,
        "per_bs_paths": [
            [{"scatter_m": None if p.scatter is None else [p.scatter.x, p.scatter.y],
              "gain": _c2pair(p.gain)} for p in paths]
            for paths in scenario.per_bs_paths
        ],
    }


def scenario_from_dict(doc: dict) -> Scenario:
    try:
        mobile = Location(*[float(v) for v in doc["mobile_m"]])
        condition = Condition.parse(doc["condition"])
        per_bs = []
        for paths in doc["per_bs_paths"]:
            row = []
            for p in paths:
                sc = p["scatter_m"]
                row.append(Path(None if sc is None else Location(float(sc[0]), float(sc[1])),
                                _pair2c(p["gain"])))
            per_bs.append(row)
        return Scenario(mobile=mobile, per_bs_paths=per_bs, condition=condition,
                        seed=doc.get("seed"))
    except (KeyError, TypeError, ValueError, InvalidCondition) as exc:
        raise SchemaError(f"malformed scenario section: {exc}") from None


def dataset_to_dict(run: RunConfig, scenario: Scenario, measurements: MeasurementSet) -> dict:
    return {
        "schema_version": SCHEMA_VERSION,
        "system": run.raw.get("system", {}),
        "solver": run.raw.get("solver", {}),
        "scenario": scenario_to_dict(scenario),
        "measurements": {
            "snr_db": measurements.snr_db,
            "noise_seed": measurements.noise_seed,
            "per_bs": [_matrix_to_lists(y) for y in measurements.per_bs],
        },
    }


def dataset_from_dict(doc: dict) -> tuple[RunConfig, Optional[Scenario], MeasurementSet]:
    if not isinstance(doc, dict):
        raise SchemaError("dataset must be a JSON object")
    if doc.get("schema_version") != SCHEMA_VERSION:
        raise SchemaError(f"dataset schema_version must be {SCHEMA_VERSION}")
    for key in ("system", "measurements"):
        if key not in doc:
            raise SchemaError(f"dataset is missing the '{key}' section")
    try:
        run = parse_config({"schema_version": SCHEMA_VERSION,
                            "system": doc["system"],
                            "solver": doc.get("solver", {})})
    except ConfigError as exc:
        raise SchemaError(f"embedded system config invalid: {exc}") from None
    meas_sec = doc["measurements"]
    shape = (run.system.num_antennas, run.system.num_subcarriers)
    try:
        per_bs = [_matrix_from_lists(rows, shape) for rows in meas_sec["per_bs"]]
    except (KeyError, TypeError):
        raise SchemaError("malformed measurements section") from None
    if len(per_bs) != run.system.num_bs:
        raise SchemaError(f"expected {run.system.num_bs} measurement matrices, got {len(per_bs)}")
    measurements = MeasurementSet(per_bs, snr_db=meas_sec.get("snr_db"),
                                  noise_seed=meas_sec.get("noise_seed"))
    scenario = scenario_from_dict(doc["scenario"]) if "scenario" in doc else None
    return run, scenario, measurements


def _dump_json(doc: dict, path: str):
    with open(path, "w") as fh:
        json.dump(doc, fh, indent=1, sort_keys=True)
        fh.write("\n")


# ---------------------------------------------------------------------------
# Commands
# ---------------------------------------------------------------------------

def _trial_csv_row(t: TrialResult, timing: bool) -> str:
    snr = "" if t.snr_db is None else f"{t.snr_db:g}"
    runtime = f"{t.runtime_s:.3f}" if timing else "0.000"
    return (f"{t.condition},{snr},{t.trial},{t.rmse_m!r},{t.ms_error_m!r},"
            f"{int(t.converged)},{int(t.ambiguous)},{runtime}")


def cmd_run(config_path: str, out_path: Optional[str] = None, threads: int = 1,
            seed: Optional[int] = None, timing: bool = False) -> int:
    """Run the configured Monte Carlo sweep and write the results table.

    Outputs are deterministic functions of (config, seed); wall-clock
    timings are zeroed unless ``timing`` is requested, because they are the
    one quantity that cannot be reproduced run to run.
    """
    run = load_config(config_path, seed_override=seed)
    result = run_monte_carlo(run.condition, run.snr_grid_db, run.trials,
                             cfg=run.system, scfg=run.solver, seed=run.seed,
                             scene=run.scene, num_scatterers=run.num_scatterers,
                             gain_model=run.gain_model, threads=max(1, threads))
    out = out_path or run.output_path
    if run.output_format == "csv" or out.endswith(".csv"):
        lines = [CSV_HEADER] + [_trial_csv_row(t, timing) for t in result.trials]
        with open(out, "w") as fh:
            fh.write("\n".join(lines) + "\n")
    else:
        doc = {
            "schema_version": SCHEMA_VERSION,
            "summary": [vars(p) for p in result.points],
            "trials": [{k: v for k, v in vars(t).items()
                        if timing or k != "runtime_s"} for t in result.trials],
        }
        _dump_json(doc, out)
    for p in result.points:
        snr = "none" if p.snr_db is None else f"{p.snr_db:g}dB"
        print(f"{p.condition} snr={snr} trials={p.trials} mean_rmse={p.mean_rmse_m:.3f}m "
              f"std={p.std_rmse_m:.3f}m ambiguous={p.ambiguous_count}")
    print(f"results written to {out}")
    return 0 if all(t.converged for t in result.trials) else 3


def cmd_synth(config_path: str, out_path: str, seed: Optional[int] = None) -> int:
    """Generate one scenario plus measurements and serialise both."""
    run = load_config(config_path, seed_override=seed)
    scenario = generate_scenario(run.condition, num_scatterers=run.num_scatterers,
                                 scene=run.scene, gain_model=run.gain_model,
                                 seed=run.seed, cfg=run.system)
    scenario = canonicalise_scenario(scenario)
    clean = synthesize(scenario, run.system)
    snr = run.snr_grid_db[0]
    measurements = add_awgn(clean, snr, seed=run.seed + 1)
    _dump_json(dataset_to_dict(run, scenario, measurements), out_path)
    print(f"dataset written to {out_path}")
    return 0


def cmd_solve(dataset_path: str, config_path: Optional[str] = None,
              out_path: Optional[str] = None) -> int:
    """Solve a stored dataset; report estimates and, when truth is present, errors."""
    try:
        with open(dataset_path) as fh:
            doc = json.load(fh)
    except OSError as exc:
        raise SchemaError(f"cannot read dataset: {exc}") from None
    except json.JSONDecodeError as exc:
        raise SchemaError(f"dataset is not valid JSON (line {exc.lineno}): {exc.msg}") from None
    run, scenario, measurements = dataset_from_dict(doc)
    if config_path is not None:
        override = load_config(config_path)
        run = override
    scfg = run.solver
    if scfg.scene is None:
        scfg.scene = default_scene(run.system)
    result = adcg_solve(measurements, run.system, scfg)
    cand = result.candidate
    out_doc: dict[str, Any] = {
        "schema_version": SCHEMA_VERSION,
        "converged": result.converged,
        "loss_history": result.loss_history,
        "atoms": [{"mobile_m": [a.mobile.x, a.mobile.y],
                   "scatter_m": [a.scatter.x, a.scatter.y],
                   "weights": [_c2pair(w) for w in cand.weights[i]]}
                  for i, a in enumerate(cand.atoms)],
    }
    if cand.num_atoms > 0:
        ms = extract_ms(cand)
        out_doc["mobile_estimate_m"] = [ms.location.x, ms.location.y]
        out_doc["ambiguous"] = ms.ambiguous
        if scenario is not None:
            ms_err, per_scatter, matched_only = error_breakdown(
                ms.location, [a.scatter for a in cand.atoms], scenario,
                list(cand.group_norms()))
            out_doc["rmse_m"] = (sum(per_scatter) + ms_err) / (len(per_scatter) + 1)
            out_doc["ms_error_m"] = ms_err
            out_doc["per_scatter_errors_m"] = per_scatter
            out_doc["matched_only_rmse_m"] = matched_only
    if out_path:
        _dump_json(out_doc, out_path)
        print(f"solution written to {out_path}")
    if "mobile_estimate_m" in out_doc:
        x, y = out_doc["mobile_estimate_m"]
        extra = f" rmse={out_doc['rmse_m']:.3f}m" if "rmse_m" in out_doc else ""
        print(f"mobile estimate: ({x:.2f}, {y:.2f}) m atoms={cand.num_atoms}{extra}")
    else:
        print("empty candidate: no mobile estimate")
    return 0 if result.converged else 3


def _build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="superloc",
        description="Super-resolved multi-BS localisation: Monte Carlo sweeps and dataset tools.")
    sub = parser.add_subparsers(dest="command", required=True)

    p_run = sub.add_parser("run", help="run the configured Monte Carlo sweep")
    p_run.add_argument("--config", required=True)
    p_run.add_argument("--out", default=None)
    p_run.add_argument("--threads", type=int, default=1)
    p_run.add_argument("--seed", type=int, default=None)
    p_run.add_argument("--timing", action="store_true",
                       help="record wall-clock trial timings (not reproducible)")

    p_synth = sub.add_parser("synth", help="synthesise one scenario + measurement dataset")
    p_synth.add_argument("--config", required=True)
    p_synth.add_argument("--out", required=True)
    p_synth.add_argument("--seed", type=int, default=None)

    p_solve = sub.add_parser("solve", help="solve a stored dataset")
    p_solve.add_argument("--data", required=True)
    p_solve.add_argument("--config", default=None)
    p_solve.add_argument("--out", default=None)

    p_cfg = sub.add_parser("init-config", help="write the default config to a file")
    p_cfg.add_argument("--out", required=True)
    return parser


def main(argv: Optional[list] = None) -> int:
    args = _build_parser().parse_args(argv)
    try:
        if args.command == "run":
            return cmd_run(args.config, out_path=args.out, threads=args.threads,
                           seed=args.seed, timing=args.timing)
        if args.command == "synth":
            return cmd_synth(args.config, args.out, seed=args.seed)
        if args.command == "solve":
            return cmd_solve(args.data, config_path=args.config, out_path=args.out)
        if args.command == "init-config":
            _dump_json(DEFAULT_CONFIG, args.out)
            print(f"default config written to {args.out}")
            return 0
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 2
    except SchemaError as exc:
        print(f"schema error: {exc}", file=sys.stderr)
        return 2
    except OSError as exc:
        print(f"io error: {exc}", file=sys.stderr)
        return 2
    return 0


if __name__ == "__main__":
    sys.exit(main())
