"""Command-line front end: simulate, calibrate, resect, apply, evaluate, report.

Settings come from built-in defaults, then an optional ``key = value``
config file (``--config``), then ``--key value`` flags; later sources win.
Exit codes: 0 ok, 2 configuration or input error, 3 outer loop did not
converge (result files are still written), 4 singular or diverging solver.
"""

from __future__ import annotations

import argparse
import dataclasses
import logging
import sys
from pathlib import Path

import numpy as np

from .data import (
    SyntheticScenario,
    _fmt,
    id_key,
    load_observations,
    load_phantom,
    load_poses,
    load_truth,
    parse_key_values,
    save_observations,
    save_phantom,
    save_poses,
    save_truth,
    simulate_captures,
)
from .distortion_knn import CvConfig
from .exceptions import (
    DivergenceError,
    FluorocalError,
    NonConvergence,
    SingularNormalMatrix,
)
from .geometry import InteriorOrientation
from .quality import (
    evaluate_in_sample,
    evaluate_out_of_sample,
    reprojection_report,
    residual_histogram,
    residual_scatter,
    rows_to_csv,
    rows_to_text,
    table_rows,
)
from .robust_solver import SolverConfig, resect_poses
from .self_calibration import (
    POSE_SIGMA_HEADER,
    CalibrationConfig,
    apply_correction,
    baseline_adjust,
    calibrate_joint,
    initial_parameters,
    load_result,
    readjust,
    save_result,
    self_calibrate,
)

log = logging.getLogger("fluorocal")

EXIT_OK, EXIT_CONFIG, EXIT_NONCONVERGENCE, EXIT_SINGULAR = 0, 2, 3, 4
COMMANDS = ("simulate", "calibrate", "resect", "apply", "evaluate", "report")
LABELS = {"before": "Before", "iop_learned": "After", "iop_parametric": "After w/ IOP"}


class ConfigError(FluorocalError):
    pass


def _scenario_keys():
    return {f.name: f.default for f in dataclasses.fields(SyntheticScenario)
            if f.name not in ("systems", "seed")}


def _solver_keys():
    return {f.name: f.default for f in dataclasses.fields(SolverConfig) if f.name != "mode"}


PATH_KEYS = ("observations", "test_observations", "phantom", "init_poses", "truth",
             "result", "evaluation", "out", "solver_trace")
OTHER_DEFAULTS = {
    "mode": "iop_parametric", "joint": False, "seed": None,
    "k_grid": None, "folds": 10, "cv_seed": 0,
    "eps_conv": 1e-4, "eps_stall": 1e-3, "patience": 3, "max_outer": 50,
    "weighting": "uniform", "gauge": "auto",
    "resect_on": "control", "grid_step": 0, "log_level": "WARNING",
}


def default_settings() -> dict:
    out = {k: None for k in PATH_KEYS}
    out.update(_scenario_keys())
    out.update(_solver_keys())
    out.update(OTHER_DEFAULTS)
    return out


def _convert(key, text, default):
    text = text.strip()
    try:
        if key == "k_grid":
            if text.lower() in ("", "auto", "none"):
                return None
            return tuple(int(v) for v in text.replace(",", " ").split())
        if key == "seed":
            return int(text)
        if isinstance(default, bool):
            if text.lower() in ("1", "true", "yes", "on"):
                return True
            if text.lower() in ("0", "false", "no", "off"):
                return False
            raise ValueError(text)
        if isinstance(default, int):
            return int(text)
        if isinstance(default, float):
            return float(text)
    except ValueError:
        raise ConfigError(f"{key}: cannot parse {text!r}") from None
    return text


def resolve_settings(config_path=None, overrides=None) -> dict:
    """Defaults, then the config file, then ``overrides`` (strings)."""
    settings = default_settings()
    sources = []
    if config_path is not None:
        path = Path(config_path)
        if not path.is_file():
            raise ConfigError(f"config: file not found: {path}")
        sources.append(parse_key_values(path.read_text(encoding="utf-8")))
    sources.append(overrides or {})
    for src in sources:
        for key, text in src.items():
            key = key.replace("-", "_")
            if key not in settings:
                raise ConfigError(f"{key}: unknown setting")
            settings[key] = _convert(key, str(text), default_settings()[key])
    return settings


def scenario_from(settings) -> SyntheticScenario:
    if settings["seed"] is None:
        raise ConfigError("seed: required for simulate")
    kw = {k: settings[k] for k in _scenario_keys()}
    try:
        return SyntheticScenario(seed=settings["seed"], **kw)
    except ValueError as exc:
        raise ConfigError(f"scenario: {exc}") from None


def calibration_from(settings) -> CalibrationConfig:
    try:
        solver = SolverConfig(mode=settings["mode"], **{k: settings[k] for k in _solver_keys()})
        cv = CvConfig(settings["k_grid"], settings["folds"], settings["cv_seed"])
        return CalibrationConfig(solver, cv, settings["eps_conv"], settings["eps_stall"],
                                 settings["patience"], settings["max_outer"],
                                 settings["weighting"], settings["gauge"])
    except ValueError as exc:
        raise ConfigError(f"solver: {exc}") from None


def nominal_iop(settings) -> InteriorOrientation:
    return InteriorOrientation((settings["width"] - 1) / 2.0, (settings["height"] - 1) / 2.0,
                               settings["c_nominal"])


def _require(settings, *keys):
    for key in keys:
        value = settings[key]
        if value is None:
            raise ConfigError(f"{key}: required")
        if key != "out":
            for part in str(value).split(","):
                if not Path(part).exists():
                    raise ConfigError(f"{key}: not found: {part}")


def _out(settings) -> Path:
    _require(settings, "out")
    out = Path(settings["out"])
    out.mkdir(parents=True, exist_ok=True)
    return out


def _write(path: Path, text: str):
    path.write_text(text, encoding="utf-8", newline="\n")


# ---------------------------------------------------------------------------
# commands
# ---------------------------------------------------------------------------

def cmd_simulate(settings) -> int:
    scn = scenario_from(settings)
    out = _out(settings)
    try:
        sim = simulate_captures(scn)
    except ValueError as exc:
        raise ConfigError(f"scenario: {exc}") from None
    save_observations(sim.train, out / "train_observations.csv")
    save_observations(sim.test, out / "test_observations.csv")
    save_phantom(sim.phantom, out / "phantom.csv")
    save_poses(sim.init_poses, out / "init_poses.csv")
    save_truth(sim.truth, out / "truth.txt")
    return EXIT_OK


def _load_inputs(settings, key="observations"):
    _require(settings, key, "phantom", "init_poses")
    phantom = load_phantom(settings["phantom"])
    obs = load_observations(settings[key], phantom)
    return obs, phantom, load_poses(settings["init_poses"])


def _solver_trace(result, path):
    rows = ["iter,F,damping,step_norm,accepted"]
    for it, F, lam, step, ok in result.bundle.trace:
        rows.append(f"{it},{_fmt(F)},{_fmt(lam)},{_fmt(step)},{int(ok)}")
    _write(Path(path), "\n".join(rows) + "\n")


def cmd_calibrate(settings) -> int:
    obs, phantom, init_poses = _load_inputs(settings)
    cfg = calibration_from(settings)
    out = _out(settings)
    init = initial_parameters(obs, init_poses, nominal_iop(settings), phantom)
    if settings["joint"] or len(obs.systems) == 1:
        jobs = [(out, obs, init)]
    else:
        jobs = []
        for s in obs.systems:
            sub = obs.select_systems([s])
            jobs.append((out / f"system_{s}", sub,
                         initial_parameters(sub, init_poses, nominal_iop(settings), phantom)))
    status = EXIT_OK
    for target, sub, start in jobs:
        fn = calibrate_joint if len(sub.systems) > 1 else self_calibrate
        try:
            result = fn(sub, start, cfg)
        except NonConvergence as exc:
            log.warning("%s", exc)
            result, status = exc.result, EXIT_NONCONVERGENCE
        save_result(result, target)
        if settings["solver_trace"]:
            name = Path(settings["solver_trace"])
            if len(jobs) > 1:
                name = name.with_name(f"{name.stem}_{target.name}{name.suffix}")
            _solver_trace(result, name)
    return status


def cmd_resect(settings) -> int:
    _require(settings, "result", "observations", "init_poses")
    result = load_result(settings["result"])
    obs = load_observations(settings["observations"])
    init_poses = load_poses(settings["init_poses"])
    cfg = calibration_from(settings).solver
    if settings["resect_on"] == "control":
        known = {p: v for p, v in result.points.items() if result.roles.get(p) == "control"}
    elif settings["resect_on"] == "all":
        known = result.points
    else:
        raise ConfigError(f"resect_on: expected control or all, got {settings['resect_on']!r}")
    mask = np.isin(obs.target_id, list(known))
    sub = obs.subset(mask)
    poses, covs, res = resect_poses(result.iop, result.corrections(sub), sub, known,
                                    init_poses, cfg)
    out = _out(settings)
    lines = [POSE_SIGMA_HEADER]
    for key in sorted(poses, key=lambda k: (id_key(k[0]), id_key(k[1]))):
        pose = poses[key]
        sd = np.sqrt(np.clip(np.diag(covs[key]), 0.0, None))
        vals = (*pose.T, *pose.q.as_array(), *sd)
        lines.append(",".join([key[0], key[1]] + [_fmt(v) for v in vals]))
    _write(out / "resected_poses.csv", "\n".join(lines) + "\n")
    _write(out / "resection_residuals.csv", residual_scatter(res.records))
    return EXIT_OK


def cmd_apply(settings) -> int:
    _require(settings, "result")
    result = load_result(settings["result"])
    out = _out(settings)
    if settings["observations"]:
        _require(settings, "observations")
        obs = load_observations(settings["observations"])
        save_observations(obs.with_xy(obs.xy - result.corrections(obs)),
                          out / "corrected_observations.csv")
    step = settings["grid_step"]
    if step < 0:
        raise ConfigError("grid_step: must be >= 0")
    if step:
        for s, model in result.models.items():
            cmap = apply_correction(model, grid=(settings["width"], settings["height"]))
            lines = ["x_px,y_px,dx_px,dy_px"]
            for y in range(0, settings["height"], step):
                for x in range(0, settings["width"], step):
                    dx, dy = cmap[y, x]
                    lines.append(f"{x},{y},{_fmt(dx)},{_fmt(dy)}")
            _write(out / f"correction_map_{s}.csv", "\n".join(lines) + "\n")
    if not settings["observations"] and not step:
        raise ConfigError("observations: required unless grid_step > 0")
    return EXIT_OK


def _tables(reports, sample, out, name):
    text = []
    for kind in ("image", "object", "pose"):
        rows = table_rows(reports, kind)
        _write(out / f"table_{name}_{kind}.csv", rows_to_csv(rows))
        text.append(rows_to_text(rows, f"{sample} {kind}"))
    return text


def cmd_evaluate(settings) -> int:
    obs, phantom, init_poses = _load_inputs(settings)
    _require(settings, "test_observations", "truth", "result")
    test = load_observations(settings["test_observations"], phantom)
    truth = load_truth(settings["truth"])
    cfg = calibration_from(settings)
    out = _out(settings)
    before = baseline_adjust(obs, initial_parameters(obs, init_poses, nominal_iop(settings),
                                                     phantom), cfg)
    results = [("Before", before)]
    for path in settings["result"].split(","):
        loaded = load_result(path)
        label = LABELS.get(loaded.run.mode, loaded.run.mode)
        results.append((label, readjust(loaded, obs.select_systems(loaded.systems), cfg)))
    ins, outs, text = [], [], []
    for label, res in results:
        sub_test = test.select_systems(res.systems)
        ins.append(evaluate_in_sample(res, truth, label))
        oos = evaluate_out_of_sample(res, sub_test, truth, init_poses, cfg.solver, label,
                                     settings["resect_on"], details=True)
        outs.append(oos.report)
        slug = label.lower().replace(" w/ ", "_").replace(" ", "_")
        _write(out / f"hist_{slug}_in_sample.csv", residual_histogram(res.records))
        _write(out / f"scatter_{slug}_in_sample.csv", residual_scatter(res.records))
        _write(out / f"hist_{slug}_out_of_sample.csv", residual_histogram(oos.records))
        _write(out / f"scatter_{slug}_out_of_sample.csv", residual_scatter(oos.records))
    text += _tables(ins, "in-sample", out, "in_sample")
    text += _tables(outs, "out-of-sample", out, "out_of_sample")
    systems = sorted({s for _, r in results for s in r.systems}, key=id_key)
    if len(systems) > 1:
        for s in systems:
            reps = []
            for (label, res) in results:
                if s in res.systems:
                    rec = res.records.subset(res.records.system_id == s)
                    reps.append(reprojection_report(rec, label))
            rows = table_rows(reps, "image")
            _write(out / f"table_in_sample_image_system_{s}.csv", rows_to_csv(rows))
            text.append(rows_to_text(rows, f"in-sample image, system {s}"))
    _write(out / "report.txt", "\n".join(text))
    return EXIT_OK


def cmd_report(settings) -> int:
    _require(settings, "result")
    lines = []
    for path in settings["result"].split(","):
        res = load_result(path)
        lines.append(f"result {path}: mode={res.run.mode} converged={res.run.converged} "
                     f"reason={res.run.reason} iterations={res.run.iterations} "
                     f"F={res.F:.6g}")
        for s in res.systems:
            v, sd = res.iop[s].as_array(), res.iop_sigma.get(s, np.zeros(3))
            lines.append(f"  system {s}: x_p={v[0]:.3f}+-{sd[0]:.3f} y_p={v[1]:.3f}+-"
                         f"{sd[1]:.3f} c={v[2]:.3f}+-{sd[2]:.3f} px")
        if res.run.trace:
            first, last = res.run.trace[0], res.run.trace[-1]
            lines.append(f"  F {first.F:.6g} -> {last.F:.6g} ({100 * last.F_rel:.2f}% of "
                         f"initial), blend {last.blend:.4f}")
    if settings["evaluation"]:
        _require(settings, "evaluation")
        lines.append("")
        lines.append((Path(settings["evaluation"]) / "report.txt").read_text(encoding="utf-8"))
    text = "\n".join(lines) + "\n"
    sys.stdout.write(text)
    if settings["out"]:
        _write(_out(settings) / "summary.txt", text)
    return EXIT_OK


HANDLERS = {"simulate": cmd_simulate, "calibrate": cmd_calibrate, "resect": cmd_resect,
            "apply": cmd_apply, "evaluate": cmd_evaluate, "report": cmd_report}


# ---------------------------------------------------------------------------
# argument handling
# ---------------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(
        prog="fluorocal",
        description="Self-calibrating bundle adjustment for projective X-ray imagers.",
        epilog="Any setting can also be given as --key value (e.g. --max-outer 30).")
    p.add_argument("command", choices=COMMANDS)
    p.add_argument("--config", help="key = value settings file")
    p.add_argument("--mode", choices=("iop_parametric", "iop_learned"))
    p.add_argument("--joint", action="store_true", help="one adjustment for all systems")
    p.add_argument("--seed", type=int)
    p.add_argument("--out", help="output directory")
    p.add_argument("--nu", help="Student-t degrees of freedom")
    p.add_argument("--k-grid", help="candidate k values, comma separated")
    p.add_argument("--inlier-tau", help="inlier gate on normalized residuals")
    return p


def _extra_overrides(extra) -> dict:
    out, i = {}, 0
    while i < len(extra):
        tok = extra[i]
        if not tok.startswith("--"):
            raise ConfigError(f"unexpected argument {tok!r}")
        if "=" in tok:
            key, value = tok[2:].split("=", 1)
            i += 1
        else:
            if i + 1 >= len(extra):
                raise ConfigError(f"{tok[2:]}: missing value")
            key, value = tok[2:], extra[i + 1]
            i += 2
        out[key.replace("-", "_")] = value
    return out


def main(argv=None) -> int:
    parser = build_parser()
    args, extra = parser.parse_known_args(argv)
    try:
        overrides = _extra_overrides(extra)
        for key in ("mode", "seed", "out", "nu", "k_grid", "inlier_tau"):
            value = getattr(args, key)
            if value is not None:
                overrides[key] = str(value)
        if args.joint:
            overrides["joint"] = "true"
        settings = resolve_settings(args.config, overrides)
        logging.basicConfig(level=getattr(logging, str(settings["log_level"]).upper(),
                                          logging.WARNING),
                            format="%(levelname)s %(name)s: %(message)s")
        return HANDLERS[args.command](settings)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (SingularNormalMatrix, DivergenceError) as exc:
        print(f"solver error: {exc}", file=sys.stderr)
        return EXIT_SINGULAR
    except (FluorocalError, OSError, ValueError) as exc:
        print(f"input error: {exc}", file=sys.stderr)
        return EXIT_CONFIG


if __name__ == "__main__":
    sys.exit(main())
