"""Command-line entry point.

Subcommands: train, temporal-train, grid-search, depth-study, analyze,
simulate, validate-config. Every run resolves its configuration as
defaults < config file < explicit flags, writes its artifacts atomically
into --out, and records a manifest (resolved config, seed, input digests,
output paths, timings) sufficient to reproduce the run.
"""

from __future__ import annotations

import argparse
import dataclasses
import json
import os
import sys
import time
from datetime import datetime, timezone

import numpy as np

from . import __version__
from . import autodiff as ad
from . import dynamics
from .analysis import AnalysisError, dynamics_trace, model_stability
from .datasets import (DataError, load_json_dataset, load_temporal_csv, make_splits)
from .graph import GraphError, normalized_laplacian
from .ioutil import sha256_file, write_csv_atomic, write_json_atomic
from .model import ConfigError, ModelConfig, init_params, load_checkpoint, save_checkpoint
from .training import (CHANNEL_CHOICES, DROPOUT_RANGE, H_RANGE, LAYER_CHOICES,
                       LR_RANGE, SearchSpace, TrainConfig, TrainingError, WD_RANGE,
                       depth_study, grid_search, train_node_classification,
                       train_spatiotemporal)

_CAUGHT = (ConfigError, DataError, TrainingError, GraphError, AnalysisError,
           dynamics.ConvergenceError, ad.ShapeError, ad.TapeError,
           ad.NonFiniteError, FileNotFoundError, ValueError)


# ---------------------------------------------------------------------------
# Configuration resolution and range validation
# ---------------------------------------------------------------------------

DEFAULT_CONFIG: dict = {
    "variant": "I",
    "layers": 2,
    "channels": 16,
    "h": 0.5,
    "integration": "imex",
    "reaction_mode": "all",
    "activation": "relu",
    "input_dropout": 0.0,
    "output_dropout": 0.0,
    "hidden_dropout": 0.0,
    "cg_tol": 1e-2,
    "cg_max_iter": 50,
    "cg_adjoint_tol": 1e-4,
    "cg_adjoint_max_iter": 400,
    "lr_embed": 1e-2,
    "lr_diffusion": 1e-2,
    "lr_reaction": 1e-2,
    "wd_embed": 0.0,
    "wd_diffusion": 0.0,
    "wd_reaction": 0.0,
    "epochs": 200,
    "patience": 100,
    "seed": 0,
    "split": "0",
}

_INTERVAL_RANGES = {
    "lr_embed": LR_RANGE, "lr_diffusion": LR_RANGE, "lr_reaction": LR_RANGE,
    "wd_embed": WD_RANGE, "wd_diffusion": WD_RANGE, "wd_reaction": WD_RANGE,
    "input_dropout": DROPOUT_RANGE, "output_dropout": DROPOUT_RANGE,
    "hidden_dropout": DROPOUT_RANGE, "h": H_RANGE,
}
_CHOICE_RANGES = {
    "layers": LAYER_CHOICES,
    "channels": CHANNEL_CHOICES,
}

_MODEL_FIELDS = ("variant", "layers", "channels", "h", "integration", "reaction_mode",
                 "activation", "input_dropout", "output_dropout", "hidden_dropout",
                 "seed", "cg_tol", "cg_max_iter", "cg_adjoint_tol", "cg_adjoint_max_iter")
_TRAIN_FIELDS = ("lr_embed", "lr_diffusion", "lr_reaction", "wd_embed", "wd_diffusion",
                 "wd_reaction", "epochs", "patience", "seed")


def range_errors(config: dict) -> list[str]:
    """Violations of the searchable hyperparameter ranges, one message per
    offending field with the permitted range."""
    errors = []
    for name, (lo, hi) in _INTERVAL_RANGES.items():
        if name in config and config[name] is not None:
            value = config[name]
            if not (lo <= value <= hi):
                errors.append(f"{name}: {value} outside [{lo}, {hi}]")
    for name, choices in _CHOICE_RANGES.items():
        if name in config and config[name] is not None:
            value = config[name]
            if value not in choices:
                errors.append(f"{name}: {value} not in {{{', '.join(map(str, choices))}}}")
    return errors


def validate_config(path: str | None, overrides: dict | None = None,
                    allow_out_of_range: bool = False) -> tuple[dict, list[str]]:
    """Resolve a config file plus overrides against the defaults.

    Returns (resolved config, error list). An empty or absent file is
    valid and yields the defaults. Unknown keys and out-of-range values
    are errors unless the override flag is set (ranges only).
    """
    resolved = dict(DEFAULT_CONFIG)
    errors: list[str] = []
    if path is not None:
        with open(path, "r", encoding="utf-8") as fh:
            text = fh.read().strip()
        if text:
            try:
                file_cfg = json.loads(text)
            except json.JSONDecodeError as exc:
                return resolved, [f"config file {path}: invalid JSON ({exc})"]
            if not isinstance(file_cfg, dict):
                return resolved, [f"config file {path}: top level must be an object"]
            for key, value in file_cfg.items():
                if key not in DEFAULT_CONFIG:
                    errors.append(f"{key}: unknown configuration field")
                else:
                    resolved[key] = value
    for key, value in (overrides or {}).items():
        if value is not None:
            resolved[key] = value
    if not allow_out_of_range:
        errors.extend(range_errors(resolved))
    return resolved, errors


def _model_cfg_from(resolved: dict, c_in: int, c_out: int) -> ModelConfig:
    kwargs = {k: resolved[k] for k in _MODEL_FIELDS}
    return ModelConfig(c_in=c_in, c_out=c_out, **kwargs)


def _train_cfg_from(resolved: dict) -> TrainConfig:
    return TrainConfig(**{k: resolved[k] for k in _TRAIN_FIELDS})


# ---------------------------------------------------------------------------
# Manifests
# ---------------------------------------------------------------------------

def _write_manifest(out_dir: str, command: str, resolved: dict, inputs: dict,
                    outputs: dict, wall_clock: float) -> str:
    manifest = {
        "command": command,
        "version": __version__,
        "created_utc": datetime.now(timezone.utc).isoformat(),
        "seed": resolved.get("seed"),
        "resolved_config": resolved,
        "inputs": {role: {"path": os.path.abspath(p), "sha256": sha256_file(p)}
                   for role, p in inputs.items()},
        "outputs": outputs,
        "wall_clock_seconds": wall_clock,
    }
    path = os.path.join(out_dir, "manifest.json")
    write_json_atomic(path, manifest)
    return path


def _load_manifest_config(path: str) -> tuple[dict, dict]:
    with open(path, "r", encoding="utf-8") as fh:
        manifest = json.load(fh)
    inputs = {role: entry["path"] for role, entry in manifest.get("inputs", {}).items()}
    return manifest["resolved_config"], inputs


# ---------------------------------------------------------------------------
# Subcommands
# ---------------------------------------------------------------------------

def _flag_overrides(args: argparse.Namespace) -> dict:
    return {k: getattr(args, k) for k in DEFAULT_CONFIG if hasattr(args, k)}


def _resolve_or_fail(args: argparse.Namespace) -> dict:
    if getattr(args, "from_manifest", None):
        resolved, inputs = _load_manifest_config(args.from_manifest)
        if getattr(args, "dataset", None) is None and "dataset" in inputs:
            args.dataset = inputs["dataset"]
        if getattr(args, "graph", None) is None and "graph" in inputs:
            args.graph = inputs["graph"]
        if getattr(args, "signal", None) is None and "signal" in inputs:
            args.signal = inputs["signal"]
        return resolved
    resolved, errors = validate_config(getattr(args, "config", None),
                                       _flag_overrides(args),
                                       allow_out_of_range=args.allow_out_of_range)
    if errors:
        raise ConfigError("; ".join(errors))
    return resolved


def _cmd_train(args: argparse.Namespace) -> int:
    t0 = time.perf_counter()
    resolved = _resolve_or_fail(args)
    if args.dataset is None:
        raise ConfigError("train needs --dataset (or --from-manifest)")
    dataset = load_json_dataset(args.dataset)
    if dataset.labels is None:
        raise DataError("node classification needs a labeled dataset")
    if not dataset.splits:
        dataset = make_splits(dataset, seed=int(resolved["seed"]))
    model_cfg = _model_cfg_from(resolved, dataset.features.shape[1], dataset.num_classes)
    train_cfg = _train_cfg_from(resolved)
    params, metrics = train_node_classification(dataset, model_cfg, train_cfg,
                                                split=str(resolved["split"]))

    os.makedirs(args.out, exist_ok=True)
    metrics_path = os.path.join(args.out, "metrics.json")
    ckpt_path = os.path.join(args.out, "checkpoint.npz")
    write_json_atomic(metrics_path, metrics.to_dict())
    save_checkpoint(ckpt_path, params)
    _write_manifest(args.out, "train", resolved, {"dataset": args.dataset},
                    {"metrics": "metrics.json", "checkpoint": "checkpoint.npz"},
                    time.perf_counter() - t0)
    print(f"test accuracy {metrics.accuracy['test']:.4f} "
          f"(val {metrics.accuracy['val']:.4f}, best epoch {metrics.best_epoch})")
    return 0


def _cmd_temporal_train(args: argparse.Namespace) -> int:
    t0 = time.perf_counter()
    resolved = _resolve_or_fail(args)
    if args.graph is None or args.signal is None:
        raise ConfigError("temporal-train needs --graph and --signal")
    resolved["mode"] = args.mode or resolved.get("mode", "incremental")
    resolved["lags"] = args.lags or resolved.get("lags", 4)
    base = load_json_dataset(args.graph)
    tds = load_temporal_csv(args.signal, base.graph, lags=int(resolved["lags"]))
    model_cfg = _model_cfg_from(resolved, int(resolved["lags"]), 1)
    train_cfg = _train_cfg_from(resolved)
    params, metrics = train_spatiotemporal(tds, model_cfg, train_cfg,
                                           mode=str(resolved["mode"]))

    os.makedirs(args.out, exist_ok=True)
    write_json_atomic(os.path.join(args.out, "metrics.json"), metrics.to_dict())
    save_checkpoint(os.path.join(args.out, "checkpoint.npz"), params)
    _write_manifest(args.out, "temporal-train", resolved,
                    {"graph": args.graph, "signal": args.signal},
                    {"metrics": "metrics.json", "checkpoint": "checkpoint.npz"},
                    time.perf_counter() - t0)
    print(f"test MSE {metrics.mse['test']:.6f} (train {metrics.mse['train']:.6f})")
    return 0


def _cmd_grid_search(args: argparse.Namespace) -> int:
    t0 = time.perf_counter()
    resolved = _resolve_or_fail(args)
    dataset = load_json_dataset(args.dataset)
    if not dataset.splits:
        dataset = make_splits(dataset, seed=int(resolved["seed"]))
    space_kwargs = {}
    if args.space:
        with open(args.space, "r", encoding="utf-8") as fh:
            space_kwargs = json.load(fh)
        for key in ("lr_range", "wd_range", "dropout_range", "h_range",
                    "layer_choices", "channel_choices"):
            if key in space_kwargs:
                space_kwargs[key] = tuple(space_kwargs[key])
    space_kwargs.setdefault("variant", resolved["variant"])
    space_kwargs.setdefault("integration", resolved["integration"])
    space_kwargs.setdefault("reaction_mode", resolved["reaction_mode"])
    space_kwargs.setdefault("epochs", resolved["epochs"])
    space_kwargs.setdefault("patience", resolved["patience"])
    space = SearchSpace(**space_kwargs)
    results = grid_search(dataset, space, budget=args.budget, seed=int(resolved["seed"]),
                          split=str(resolved["split"]), jobs=args.jobs)

    os.makedirs(args.out, exist_ok=True)
    write_json_atomic(os.path.join(args.out, "grid_results.json"), results)
    rows = [{"rank": r["rank"], "index": r["index"],
             "val_accuracy": r["val_accuracy"], "test_accuracy": r["test_accuracy"],
             "layers": r["model_config"]["layers"], "channels": r["model_config"]["channels"],
             "h": r["model_config"]["h"], "lr_embed": r["train_config"]["lr_embed"],
             "lr_diffusion": r["train_config"]["lr_diffusion"],
             "lr_reaction": r["train_config"]["lr_reaction"]} for r in results]
    write_csv_atomic(os.path.join(args.out, "grid_results.csv"), rows,
                     list(rows[0].keys()))
    inputs = {"dataset": args.dataset}
    if args.space:
        inputs["space"] = args.space
    _write_manifest(args.out, "grid-search", resolved, inputs,
                    {"results_json": "grid_results.json", "results_csv": "grid_results.csv"},
                    time.perf_counter() - t0)
    best = results[0]
    print(f"best val accuracy {best['val_accuracy']:.4f} (config index {best['index']})")
    return 0


def _cmd_depth_study(args: argparse.Namespace) -> int:
    t0 = time.perf_counter()
    resolved = _resolve_or_fail(args)
    dataset = load_json_dataset(args.dataset)
    if not dataset.splits:
        dataset = make_splits(dataset, seed=int(resolved["seed"]))
    depths = tuple(int(v) for v in args.depths.split(","))
    modes = tuple(args.modes.split(",")) if args.modes else None
    model_cfg = _model_cfg_from(resolved, dataset.features.shape[1], dataset.num_classes)
    train_cfg = _train_cfg_from(resolved)
    rows = depth_study(dataset, model_cfg, train_cfg, depths=depths,
                       reaction_modes=modes, split=str(resolved["split"]))

    os.makedirs(args.out, exist_ok=True)
    write_csv_atomic(os.path.join(args.out, "depth_study.csv"), rows,
                     ["depth", "reaction_mode", "variant", "val_accuracy", "test_accuracy"])
    _write_manifest(args.out, "depth-study", resolved, {"dataset": args.dataset},
                    {"table": "depth_study.csv"}, time.perf_counter() - t0)
    for row in rows:
        print(f"depth {row['depth']:>3} mode {row['reaction_mode']:<14} "
              f"test accuracy {row['test_accuracy']:.4f}")
    return 0


def _cmd_analyze(args: argparse.Namespace) -> int:
    t0 = time.perf_counter()
    params = load_checkpoint(args.checkpoint)
    dataset = load_json_dataset(args.dataset)
    report = model_stability(dataset.graph, dataset.features, params,
                             t=args.time, layer=args.layer)
    os.makedirs(args.out, exist_ok=True)
    write_json_atomic(os.path.join(args.out, "stability_report.json"), report.to_dict())
    resolved = {"seed": params.cfg.seed, "layer": args.layer, "time": args.time,
                "model_config": params.cfg.to_dict()}
    _write_manifest(args.out, "analyze", resolved,
                    {"checkpoint": args.checkpoint, "dataset": args.dataset},
                    {"report": "stability_report.json"}, time.perf_counter() - t0)
    print(f"max real part {report.max_real_part:.6f}; "
          f"{report.positive_count} unstable directions; turing={report.turing}")
    return 0


def _cmd_simulate(args: argparse.Namespace) -> int:
    t0 = time.perf_counter()
    base = load_json_dataset(args.graph)
    graph = base.graph
    rng = np.random.default_rng(args.seed)

    if base.features is not None and base.features.shape[1] > 0 and args.channels is None:
        U0 = base.features.astype(np.float64)
    else:
        channels = args.channels or 1
        U0 = rng.standard_normal((graph.n, channels))
    c = U0.shape[1]

    kappas = np.array([float(v) for v in args.kappa.split(",")], dtype=np.float64)
    if kappas.size == 1:
        kappas = np.full(c, kappas[0])
    if kappas.size != c:
        raise ConfigError(f"{kappas.size} diffusion coefficients for {c} channels")
    if np.any(kappas < 0):
        raise ConfigError("diffusion coefficients must be non-negative")

    tape = ad.Tape()
    u = tape.leaf(U0)
    u0 = u
    coeffs = tape.leaf(kappas.reshape(1, -1))
    lap = normalized_laplacian(graph)

    reaction_params = None
    if args.reaction != "off":
        cfg = ModelConfig(c_in=c, c_out=1, variant="S", channels=c, layers=args.layers,
                          h=args.h, reaction_mode=args.reaction, seed=args.seed)
        source = init_params(cfg, seed=args.seed)

        def leaf_branch(name: str):
            key = f"shared.{name}.k_u"
            if key not in source.values:
                return None
            k_u0_key = f"shared.{name}.k_u0"
            return dynamics.ReactionWeights(
                k_u=tape.leaf(source.values[key]),
                k_u0=(tape.leaf(source.values[k_u0_key])
                      if k_u0_key in source.values else None))

        reaction_params = dynamics.ReactionParams(first=leaf_branch("react1"),
                                                  second=leaf_branch("react2"))

    states = [u.values.copy()]
    for layer in range(args.layers):
        t_l = args.h * layer
        f = dynamics.reaction_total(u, u0, t_l, reaction_params, "S", args.reaction)
        if args.integration == "imex":
            v = u if f is None else ad.add(u, ad.scale(f, args.h))
            u = dynamics.implicit_diffusion(lap, v, coeffs, args.h,
                                            tol=args.cg_tol, max_iter=args.cg_max_iter)
        else:
            u = dynamics.explicit_step(u, lap, coeffs, f, args.h)
        states.append(u.values.copy())

    records = dynamics_trace(graph, states)
    for rec, state in zip(records, states):
        for i in range(graph.n):
            for j in range(c):
                rec[f"u{i}_{j}"] = repr(float(state[i, j]))
    fieldnames = list(records[0].keys())
    os.makedirs(args.out, exist_ok=True)
    write_csv_atomic(os.path.join(args.out, "trace.csv"), records, fieldnames)
    resolved = {"seed": args.seed, "kappa": kappas.tolist(), "h": args.h,
                "layers": args.layers, "reaction": args.reaction,
                "integration": args.integration, "cg_tol": args.cg_tol,
                "cg_max_iter": args.cg_max_iter}
    _write_manifest(args.out, "simulate", resolved, {"graph": args.graph},
                    {"trace": "trace.csv"}, time.perf_counter() - t0)
    print(f"traced {args.layers} layers; final Dirichlet energy "
          f"{records[-1]['dirichlet_energy']:.6e}")
    return 0


def _cmd_validate_config(args: argparse.Namespace) -> int:
    resolved, errors = validate_config(args.config, None,
                                       allow_out_of_range=args.allow_out_of_range)
    if errors:
        print(json.dumps({"valid": False, "errors": errors}, indent=2))
        return 1
    print(json.dumps({"valid": True, "resolved": resolved}, indent=2))
    return 0


# ---------------------------------------------------------------------------
# Parser
# ---------------------------------------------------------------------------

def _add_config_flags(p: argparse.ArgumentParser, training_flags: bool = True) -> None:
    p.add_argument("--config", help="JSON configuration file")
    p.add_argument("--allow-out-of-range", action="store_true",
                   help="accept values outside the searchable ranges")
    p.add_argument("--variant", choices=("I", "S", "T"), default=None)
    p.add_argument("--layers", type=int, default=None)
    p.add_argument("--channels", type=int, default=None)
    p.add_argument("--h", type=float, default=None, help="integration step size")
    p.add_argument("--integration", choices=("explicit", "imex"), default=None)
    p.add_argument("--reaction-mode", dest="reaction_mode",
                   choices=("off", "additive", "additive_u0", "multiplicative", "all"),
                   default=None)
    p.add_argument("--activation", choices=("relu", "identity"), default=None)
    p.add_argument("--input-dropout", dest="input_dropout", type=float, default=None)
    p.add_argument("--output-dropout", dest="output_dropout", type=float, default=None)
    p.add_argument("--hidden-dropout", dest="hidden_dropout", type=float, default=None)
    p.add_argument("--cg-tol", dest="cg_tol", type=float, default=None)
    p.add_argument("--cg-max-iter", dest="cg_max_iter", type=int, default=None)
    p.add_argument("--cg-adjoint-tol", dest="cg_adjoint_tol", type=float, default=None)
    p.add_argument("--seed", type=int, default=None)
    if training_flags:
        p.add_argument("--lr-embed", dest="lr_embed", type=float, default=None)
        p.add_argument("--lr-diffusion", dest="lr_diffusion", type=float, default=None)
        p.add_argument("--lr-reaction", dest="lr_reaction", type=float, default=None)
        p.add_argument("--wd-embed", dest="wd_embed", type=float, default=None)
        p.add_argument("--wd-diffusion", dest="wd_diffusion", type=float, default=None)
        p.add_argument("--wd-reaction", dest="wd_reaction", type=float, default=None)
        p.add_argument("--epochs", type=int, default=None)
        p.add_argument("--patience", type=int, default=None)
        p.add_argument("--split", default=None)


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="graphrd",
        description="Reaction-diffusion dynamics on graphs: training, "
                    "simulation, and stability analysis.")
    parser.add_argument("--version", action="version", version=__version__)
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("train", help="node classification on a JSON dataset")
    p.add_argument("--dataset", help="dataset JSON file")
    p.add_argument("--out", default="graphrd_out", help="output directory")
    p.add_argument("--from-manifest", dest="from_manifest",
                   help="re-run from a previous manifest")
    _add_config_flags(p)
    p.set_defaults(func=_cmd_train)

    p = sub.add_parser("temporal-train", help="next-step node regression")
    p.add_argument("--graph", help="graph JSON file")
    p.add_argument("--signal", help="temporal signal CSV (rows = timestamps)")
    p.add_argument("--mode", choices=("incremental", "cumulative"), default=None)
    p.add_argument("--lags", type=int, default=None)
    p.add_argument("--out", default="graphrd_out")
    p.add_argument("--from-manifest", dest="from_manifest")
    _add_config_flags(p)
    p.set_defaults(func=_cmd_temporal_train)

    p = sub.add_parser("grid-search", help="sample and rank hyperparameters")
    p.add_argument("--dataset", required=True)
    p.add_argument("--budget", type=int, required=True)
    p.add_argument("--jobs", type=int, default=1, help="concurrent runs")
    p.add_argument("--space", help="JSON file overriding the search space")
    p.add_argument("--out", default="graphrd_out")
    _add_config_flags(p)
    p.set_defaults(func=_cmd_grid_search)

    p = sub.add_parser("depth-study", help="accuracy versus depth table")
    p.add_argument("--dataset", required=True)
    p.add_argument("--depths", default="2,4,8,16,32,64", help="comma-separated depths")
    p.add_argument("--modes", default=None, help="comma-separated reaction modes")
    p.add_argument("--out", default="graphrd_out")
    _add_config_flags(p)
    p.set_defaults(func=_cmd_depth_study)

    p = sub.add_parser("analyze", help="stability report for a checkpoint")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--dataset", required=True)
    p.add_argument("--layer", type=int, default=0, help="layer to linearize")
    p.add_argument("--time", type=float, default=0.0, help="layer time")
    p.add_argument("--out", default="graphrd_out")
    p.set_defaults(func=_cmd_analyze)

    p = sub.add_parser("simulate", help="forward dynamics trace with fixed parameters")
    p.add_argument("--graph", required=True, help="graph JSON (features used as the "
                                                  "initial state when present)")
    p.add_argument("--kappa", default="1.0", help="diffusion coefficients, scalar or "
                                                  "comma-separated per channel")
    p.add_argument("--h", type=float, default=1.0)
    p.add_argument("--layers", type=int, default=8)
    p.add_argument("--channels", type=int, default=None,
                   help="random initial state with this many channels")
    p.add_argument("--reaction", default="off",
                   choices=("off", "additive", "additive_u0", "multiplicative", "all"))
    p.add_argument("--integration", choices=("explicit", "imex"), default="imex")
    p.add_argument("--cg-tol", dest="cg_tol", type=float, default=1e-10)
    p.add_argument("--cg-max-iter", dest="cg_max_iter", type=int, default=1000)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", default="graphrd_out")
    p.set_defaults(func=_cmd_simulate)

    p = sub.add_parser("validate-config", help="check a config against the ranges")
    p.add_argument("--config", help="JSON configuration file")
    p.add_argument("--allow-out-of-range", action="store_true")
    p.set_defaults(func=_cmd_validate_config)

    return parser


def dispatch(argv) -> int:
    """Parse and run one subcommand; returns the process exit code."""
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    try:
        return args.func(args)
    except _CAUGHT as exc:
        print(json.dumps({"error": type(exc).__name__, "message": str(exc)}),
              file=sys.stderr)
        return 1


def main() -> None:
    sys.exit(dispatch(sys.argv[1:]))


if __name__ == "__main__":
    main()
