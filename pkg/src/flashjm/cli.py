"""Batch command-line interface.

Every subcommand reads one JSON configuration file with a section per
module::

    {"data": {"markers": [...], "features": [...]},
     "simulation": {...}, "model": {...}, "screen": {"keep": 10},
     "cv": {"enabled": true, "grid": [...], "n_folds": 10, "seed": 0},
     "evaluation": {"seed": 0, "t_max": null},
     "predict": {"at": "event_time"},
     "bootstrap": {"B": 10, "seed": 0, "resample": true},
     "select_k": {"candidates": [1, 2, 3, 4]}}

Scalar fields can be overridden with ``--set section.key=value``. Exit codes
are 0 on success, 1 on invalid input and 2 when a solver fails.
"""

from __future__ import annotations

import argparse
import csv
import json
import math
import sys
from dataclasses import replace
from pathlib import Path

import numpy as np

from . import __version__
from .data import ColumnSpec, SolverError, ValidationError, load_cohort, write_cohort
from .em import MODEL_FORMAT_VERSION, FitConfig, FittedModel, fit
from .evaluation import (DEFAULT_ZETA_GRID, bootstrap_se, evaluate, fit_with_cv,
                         landmark_times, predictive_markers, select_K)
from .features import screen
from .simulate import SimConfig, simulate

SECTIONS = ("data", "simulation", "model", "screen", "cv", "evaluation", "predict",
            "bootstrap", "select_k")
MANIFEST = "manifest.json"


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise ValidationError(message)


def _clean(obj):
    """JSON-ready copy with numpy scalars unwrapped and non-finite floats as None."""
    if isinstance(obj, dict):
        return {str(k): _clean(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_clean(v) for v in obj]
    if isinstance(obj, np.ndarray):
        return _clean(obj.tolist())
    if isinstance(obj, (np.bool_, bool)):
        return bool(obj)
    if isinstance(obj, (np.integer,)):
        return int(obj)
    if isinstance(obj, (float, np.floating)):
        v = float(obj)
        return v if math.isfinite(v) else None
    return obj


def dump_json(obj, path) -> None:
    text = json.dumps(_clean(obj), sort_keys=True, indent=2, allow_nan=False)
    Path(path).write_text(text + "\n", encoding="utf-8")


def _read_json(path, what):
    p = Path(path)
    if not p.is_file():
        raise ValidationError(f"missing {what}: {p}")
    try:
        return json.loads(p.read_text(encoding="utf-8"))
    except json.JSONDecodeError as exc:
        raise ValidationError(f"malformed {what} {p}: {exc}") from None


def _parse_value(text):
    try:
        return json.loads(text)
    except json.JSONDecodeError:
        return text


def load_config(path, overrides=()) -> dict:
    """Read the configuration file and apply ``section.key=value`` overrides."""
    cfg = {} if path is None else _read_json(path, "config")
    if not isinstance(cfg, dict):
        raise ValidationError("config must be a JSON object")
    unknown = set(cfg) - set(SECTIONS)
    if unknown:
        raise ValidationError(f"unknown config sections: {sorted(unknown)}")
    for item in overrides:
        if "=" not in item:
            raise ValidationError(f"--set expects key=value, got {item!r}")
        key, value = item.split("=", 1)
        parts = key.split(".")
        if parts[0] not in SECTIONS or len(parts) < 2:
            raise ValidationError(f"--set key must start with a config section: {key!r}")
        node = cfg
        for part in parts[:-1]:
            node = node.setdefault(part, {})
            if not isinstance(node, dict):
                raise ValidationError(f"--set path {key!r} crosses a non-object value")
        node[parts[-1]] = _parse_value(value)
    for name in SECTIONS:
        if not isinstance(cfg.setdefault(name, {}), dict):
            raise ValidationError(f"config section {name!r} must be an object")
    return cfg


def _check_keys(section: dict, allowed, name):
    bad = set(section) - set(allowed)
    if bad:
        raise ValidationError(f"unknown keys in {name}: {sorted(bad)}")


def _load_data(cfg: dict, directory):
    if directory is None:
        raise ValidationError("--data is required")
    d = Path(directory)
    sec = dict(cfg["data"])
    _check_keys(sec, ("markers", "features", "id_col", "time_col", "event_col",
                      "marker_col", "obs_time_col", "value_col"), "data")
    if "markers" not in sec:
        if not (d / MANIFEST).is_file():
            raise ValidationError("data.markers is not set and the data directory has no manifest")
        man = _read_json(d / MANIFEST, "manifest")
        sec["markers"] = man["markers"]
        sec.setdefault("features", man.get("features"))
    sec["markers"] = tuple(sec["markers"])
    if sec.get("features") is not None:
        sec["features"] = tuple(sec["features"])
    return load_cohort(d / "subjects.csv", d / "longitudinal.csv", ColumnSpec(**sec))


def _model_config(cfg: dict, seed=None) -> FitConfig:
    sec = dict(cfg["model"])
    try:
        config = FitConfig.from_dict(sec)
    except TypeError as exc:
        raise ValidationError(f"invalid model section: {exc}") from None
    if seed is not None:
        config = replace(config, seed=seed)
    return config


def _load_model(path) -> FittedModel:
    if path is None:
        raise ValidationError("--model is required")
    d = _read_json(path, "model")
    try:
        return FittedModel.from_dict(d)
    except (KeyError, TypeError) as exc:
        raise ValidationError(f"malformed model file: {exc}") from None


def _out_dir(args) -> Path:
    if args.out is None:
        raise ValidationError("--out is required")
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    return out


def cmd_simulate(args, cfg):
    sec = dict(cfg["simulation"])
    if args.seed is not None:
        sec["seed"] = args.seed
    try:
        sim = SimConfig(**sec)
    except TypeError as exc:
        raise ValidationError(f"invalid simulation section: {exc}") from None
    cohort, truth = simulate(sim)
    out = _out_dir(args)
    write_cohort(cohort, out / "subjects.csv", out / "longitudinal.csv")
    dump_json({"markers": cohort.marker_names, "features": cohort.feature_names},
              out / MANIFEST)
    dump_json({"config": sim.to_dict(), **truth.to_dict()}, out / "ground_truth.json")


def cmd_screen(args, cfg):
    cohort = _load_data(cfg, args.data)
    config = _model_config(cfg)
    _check_keys(cfg["screen"], ("keep",), "screen")
    keep = int(cfg["screen"].get("keep", 10))
    kept, scores = screen(cohort, config.catalog, keep, return_scores=True)
    out = _out_dir(args)
    dump_json({"keep": keep, "selected": list(kept.names),
               "scores": scores},
              out / "screening.json")


def _coef_report(model: FittedModel) -> dict:
    """Logit coefficients, then per-class association block norms."""
    return {
        "xi": {name: model.params.xi[:, j].tolist()
               for j, name in enumerate(model.feature_names)},
        "gamma_block_norms": {name: model.gamma_blocks()[:, ell].tolist()
                              for ell, name in enumerate(model.marker_names)},
        "xi_support": [model.feature_names[j] for j in model.xi_support()],
        "high_risk_class": model.high_risk,
    }


def cmd_fit(args, cfg):
    cohort = _load_data(cfg, args.data)
    config = _model_config(cfg, args.seed)
    sec = cfg["cv"]
    _check_keys(sec, ("enabled", "grid", "n_folds", "seed"), "cv")
    out = _out_dir(args)
    if sec.get("enabled", False):
        seed = args.seed if args.seed is not None else int(sec.get("seed", config.seed))
        model, cv = fit_with_cv(cohort, config, tuple(sec.get("grid", DEFAULT_ZETA_GRID)),
                                int(sec.get("n_folds", 10)), seed, args.threads)
        dump_json({"grid": cv.grid, "mean_scores": cv.mean_scores, "scores": cv.scores,
                   "best_zeta": cv.best_zeta}, out / "cv.json")
    else:
        model = fit(cohort, config)
    d = model.to_dict()
    d["report"] = _coef_report(model)
    dump_json(d, out / "model.json")


def cmd_select_k(args, cfg):
    cohort = _load_data(cfg, args.data)
    config = _model_config(cfg, args.seed)
    sec = cfg["select_k"]
    _check_keys(sec, ("candidates",), "select_k")
    cands = sec.get("candidates", [1, 2, 3, 4])
    K, bics, flags = select_K(cohort, config, cands, args.threads)
    dump_json({"K": K, "bic": {str(k): v for k, v in sorted(bics.items())}, "flags": flags},
              _out_dir(args) / "select_k.json")


def cmd_predict(args, cfg):
    model = _load_model(args.model)
    cohort = _load_data(cfg, args.data)
    sec = cfg["predict"]
    _check_keys(sec, ("at", "seed"), "predict")
    at = sec.get("at", "event_time")
    if at == "event_time":
        s = cohort.T
    elif at == "landmark":
        seed = args.seed if args.seed is not None else int(sec.get("seed", 0))
        s = landmark_times(cohort, seed)
    elif isinstance(at, (int, float)) and not isinstance(at, bool):
        s = np.full(cohort.n, float(at))
    else:
        raise ValidationError("predict.at must be 'event_time', 'landmark' or a number")
    probs = predictive_markers(model, cohort.subjects, s)
    out = _out_dir(args)
    with open(out / "predictions.csv", "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["id", "s", *[f"class_{k}" for k in range(probs.shape[1])], "high_risk"])
        for i, sid in enumerate(cohort.ids):
            w.writerow([sid, repr(float(s[i])), *map(lambda v: repr(float(v)), probs[i]),
                        repr(float(probs[i, model.high_risk]))])


def cmd_evaluate(args, cfg):
    model = _load_model(args.model)
    cohort = _load_data(cfg, args.data)
    sec = cfg["evaluation"]
    _check_keys(sec, ("seed", "t_max"), "evaluation")
    seed = args.seed if args.seed is not None else int(sec.get("seed", 0))
    rep = evaluate(model, cohort, seed, sec.get("t_max"))
    out = _out_dir(args)
    dump_json({**rep.to_dict(), "seed": seed}, out / "report.json")
    with open(out / "evaluation.csv", "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["id", "s", "marker", "T", "delta"])
        for sid, s, m, T, d in rep.rows():
            w.writerow([sid, repr(s), repr(m), repr(T), d])


def cmd_bootstrap(args, cfg):
    model = _load_model(args.model)
    cohort = _load_data(cfg, args.data)
    sec = cfg["bootstrap"]
    _check_keys(sec, ("B", "seed", "resample"), "bootstrap")
    seed = args.seed if args.seed is not None else int(sec.get("seed", 0))
    entries = bootstrap_se(cohort, model, int(sec.get("B", 10)), seed,
                           bool(sec.get("resample", True)), args.threads)
    rows = [{"block": e.block, "class": e.klass, "name": e.name, "estimate": e.estimate,
             "se": e.se} for e in entries]
    dump_json({"B": int(sec.get("B", 10)), "seed": seed, "coefficients": rows},
              _out_dir(args) / "bootstrap.json")


COMMANDS = {
    "simulate": cmd_simulate,
    "screen": cmd_screen,
    "fit": cmd_fit,
    "select-k": cmd_select_k,
    "predict": cmd_predict,
    "evaluate": cmd_evaluate,
    "bootstrap-se": cmd_bootstrap,
}

# settings of these commands come from model.json, so a config file is optional
CONFIG_OPTIONAL = {"predict", "evaluate"}


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="flashjm", description=__doc__.splitlines()[0])
    parser.add_argument("--version", action="version",
                        version=f"flashjm {__version__} (model format {MODEL_FORMAT_VERSION})")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)
    for name in COMMANDS:
        p = sub.add_parser(name)
        p.add_argument("--config", required=name not in CONFIG_OPTIONAL)
        p.add_argument("--out")
        p.add_argument("--data")
        p.add_argument("--model")
        p.add_argument("--seed", type=int)
        p.add_argument("--threads", type=int, default=1)
        p.add_argument("--set", action="append", default=[], metavar="KEY=VALUE")
    return parser


def run(argv=None) -> int:
    try:
        args = build_parser().parse_args(argv)
        if args.threads < 1:
            raise ValidationError("--threads must be >= 1")
        cfg = load_config(args.config, args.set)
        COMMANDS[args.command](args, cfg)
    except ValidationError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except SolverError as exc:
        print(f"solver failure: {exc}", file=sys.stderr)
        return 2
    return 0


def main() -> None:
    sys.exit(run())
