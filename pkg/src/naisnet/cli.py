"""Command-line entry point.

Exit codes: 0 success, 1 domain failure (failed audit, divergence),
2 usage or parse error.
"""
from __future__ import annotations

import argparse
import dataclasses
import hashlib
import io
import json
import sys
from datetime import datetime, timezone
from pathlib import Path

import numpy as np

from . import __version__
from .dynamics import AdaptiveUnroll, FixedUnroll, cascade_forward
from .experiments import (
    ALL_VARIANTS,
    SCALAR_DEMO_THRESHOLD,
    SURVEY_THRESHOLD,
    ModelSettings,
    ScalarMapSpec,
    ablation_grid,
    depth_statistics,
    depth_survey,
    parse_variant,
    scalar_map,
    write_ablation_table,
    write_depth_csv,
    write_loss_by_depth,
    write_scalar_map_csv,
)
from .numerics import read_matrix
from .serialize import ModelDocument, atomic_write_text, load_model
from .stability import DEFAULT_SAMPLES, DEFAULT_SIGMA_FLOOR, check_condition1
from .training.data import DATA_ENV, Dataset, make_blobs, mnist_subset
from .training.loop import TrainConfig, train

EXIT_OK, EXIT_DOMAIN, EXIT_USAGE = 0, 1, 2


class UsageError(Exception):
    """Bad input files or configuration; maps to exit code 2."""


# -- run bookkeeping ---------------------------------------------------------------

class Run:
    """Collects outputs of one command and writes its manifest."""

    def __init__(self, command: str, out_dir, seed: int, config: dict):
        self.command = command
        self.out_dir = Path(out_dir)
        self.seed = seed
        canonical = json.dumps(config, sort_keys=True, separators=(",", ":"))
        self.config_hash = hashlib.sha256(canonical.encode()).hexdigest()
        self.started = _now()
        self.outputs: list[str] = []

    def write(self, name: str, text: str) -> Path:
        path = atomic_write_text(self.out_dir / name, text)
        self.outputs.append(name)
        return path

    def finish(self, exit_code: int) -> int:
        manifest = {
            "command": self.command,
            "config_hash": self.config_hash,
            "seed": self.seed,
            "tool_version": __version__,
            "started": self.started,
            "finished": _now(),
            "outputs": self.outputs,
            "exit_code": exit_code,
        }
        atomic_write_text(self.out_dir / "manifest.json", json.dumps(manifest, indent=1, sort_keys=True) + "\n")
        return exit_code


def _now() -> str:
    return datetime.now(timezone.utc).isoformat()


def _file_digest(path) -> str:
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()


def _read_json(path) -> dict:
    try:
        with open(path, encoding="utf-8") as fh:
            data = json.load(fh)
    except json.JSONDecodeError as exc:
        raise UsageError(f"{path}: invalid JSON ({exc})") from exc
    if not isinstance(data, dict):
        raise UsageError(f"{path}: expected a JSON object")
    return data


def _seed(args, config_seed: int | None = None) -> int:
    if args.seed is not None:
        return args.seed
    return 0 if config_seed is None else int(config_seed)


def _csv(write_fn, *a) -> str:
    buf = io.StringIO()
    write_fn(*a, buf)
    return buf.getvalue()


# -- datasets -----------------------------------------------------------------------

def load_dataset(spec: dict, seed: int) -> Dataset:
    spec = dict(spec)
    kind = spec.pop("kind", "mnist")
    spec.setdefault("seed", seed)
    if kind == "mnist":
        known = {"root", "n_train", "n_test", "seed"}
    elif kind == "blobs":
        known = {"n_per_class", "dim", "classes", "separation", "spread", "test_fraction", "seed"}
    else:
        raise UsageError(f"unknown dataset kind {kind!r} (expected 'mnist' or 'blobs')")
    unknown = sorted(set(spec) - known)
    if unknown:
        raise UsageError(f"unknown dataset fields: {', '.join(unknown)}")
    if kind == "blobs":
        return make_blobs(**spec)
    try:
        return mnist_subset(**spec)
    except FileNotFoundError as exc:
        raise UsageError(f"MNIST not found ({exc}); set ${DATA_ENV} or dataset.root") from exc


def _sections(cfg: dict, allowed: set[str]) -> None:
    unknown = sorted(set(cfg) - allowed)
    if unknown:
        raise UsageError(f"unknown config sections: {', '.join(unknown)}")


TRAIN_FLAGS = ("learning_rate", "momentum", "epochs", "batch_size", "projection_cadence")


def _train_config(cfg: dict, args, seed: int) -> TrainConfig:
    section = dict(cfg.get("train", {}))
    for name in TRAIN_FLAGS:
        value = getattr(args, name, None)
        if value is not None:
            section[name] = value
    section["seed"] = seed
    try:
        return TrainConfig.from_dict(section)
    except (TypeError, ValueError) as exc:
        raise UsageError(f"invalid train config: {exc}") from exc


def _model_settings(section: dict) -> tuple[ModelSettings, dict]:
    section = dict(section)
    flags = {k: bool(section.pop(k)) for k in ("shared", "non_autonomous", "stable") if k in section}
    try:
        return ModelSettings.from_dict(section), flags
    except (TypeError, ValueError) as exc:
        raise UsageError(f"invalid model config: {exc}") from exc


# -- commands ------------------------------------------------------------------------

def cmd_audit(args) -> int:
    doc = load_model(args.model)
    seed = _seed(args)
    run = Run("audit", args.out_dir, seed, {"model": _file_digest(args.model), "samples": args.samples,
                                             "sigma_floor": args.sigma_floor, "mu": args.mu})
    reports = [check_condition1(b, sample_count=args.samples, sigma_floor=args.sigma_floor, seed=seed,
                                mu=args.mu, relaxed=doc.relaxed) for b in doc.chain.blocks]
    for i, rep in enumerate(reports):
        print(f"block {i}")
        print(rep.table())
    passed = all(r.passed for r in reports)
    print("PASSED" if passed else "FAILED")
    body = {"passed": passed, "blocks": [r.to_dict() for r in reports]}
    run.write("audit.json", json.dumps(body, indent=1, sort_keys=True) + "\n")
    return run.finish(EXIT_OK if passed else EXIT_DOMAIN)


def cmd_unroll(args) -> int:
    doc = load_model(args.model)
    u = read_matrix(args.input).reshape(-1)
    policy = AdaptiveUnroll(args.adaptive, args.k_max) if args.adaptive is not None else FixedUnroll(args.k)
    chain = doc.chain
    chain.policies = [policy] * len(chain.blocks)
    m = chain.blocks[0].m
    if u.size != m:
        raise UsageError(f"input has {u.size} entries, model expects {m}")
    run = Run("unroll", args.out_dir, _seed(args), {"model": _file_digest(args.model),
                                                   "input": _file_digest(args.input),
                                                   "policy": dataclasses.asdict(policy)})
    _, trajectories = cascade_forward(chain, u)
    for i, traj in enumerate(trajectories):
        name = "trajectory.csv" if len(trajectories) == 1 else f"trajectory_block{i}.csv"
        run.write(name, _csv(traj.write_csv))
        print(f"block {i}: depth {traj.depth}, converged {traj.converged}")
    return run.finish(EXIT_OK)


def cmd_train(args) -> int:
    cfg = _read_json(args.config)
    _sections(cfg, {"dataset", "model", "train", "seed"})
    seed = _seed(args, cfg.get("seed"))
    tcfg = _train_config(cfg, args, seed)
    settings, flags = _model_settings(cfg.get("model", {}))
    dataset = load_dataset(cfg.get("dataset", {"kind": "mnist"}), seed)
    effective = {"config": cfg, "train": {k: getattr(tcfg, k) for k in TRAIN_FLAGS}, "seed": seed}
    run = Run("train", args.out_dir, seed, json.loads(json.dumps(effective, default=str)))
    model = settings.build(dataset.input_dim, dataset.classes, seed, **flags)

    stats, projections = io.StringIO(), io.StringIO()

    def report(s):
        print(f"epoch {s.epoch}: train loss {s.train_loss:.4f} acc {s.train_acc:.4f}  "
              f"test loss {s.test_loss:.4f} acc {s.test_acc:.4f}  audit {s.audit_passed}", flush=True)

    history = train(model, dataset, tcfg, stats_log=stats, projection_log=projections, on_epoch=report)
    run.write("stats.jsonl", stats.getvalue())
    run.write("projections.jsonl", projections.getvalue())
    diverged = any(not np.isfinite(s.train_loss) for s in history)
    if diverged or not all(np.all(np.isfinite(p)) for p in model.parameters().values()):
        print("training diverged; no model written", file=sys.stderr)
        return run.finish(EXIT_DOMAIN)
    run.write("model.json", ModelDocument.from_model(model).dumps())
    if any(s.audit_passed is False for s in history):
        print("stability audit failed", file=sys.stderr)
        return run.finish(EXIT_DOMAIN)
    return run.finish(EXIT_OK)


def cmd_ablate(args) -> int:
    cfg = _read_json(args.config)
    _sections(cfg, {"dataset", "model", "train", "seed", "variants"})
    seed = _seed(args, cfg.get("seed"))
    tcfg = _train_config(cfg, args, seed)
    settings, flags = _model_settings(cfg.get("model", {}))
    if flags:
        raise UsageError("model flags shared/non_autonomous/stable are set by the variant list")
    names = cfg.get("variants", "all")
    try:
        variants = list(ALL_VARIANTS) if names == "all" else [parse_variant(v) for v in names]
    except ValueError as exc:
        raise UsageError(str(exc)) from exc
    dataset = load_dataset(cfg.get("dataset", {"kind": "mnist"}), seed)
    run = Run("ablate", args.out_dir, seed, {"config": cfg, "seed": seed})
    results = ablation_grid(dataset, variants, tcfg, settings)
    for name, r in results.items():
        print(f"{name:>14}: test acc {r.final.test_acc:.4f}  train loss {r.final.train_loss:.4f}")
        run.write(f"stats_{name}.jsonl", "".join(s.to_json() + "\n" for s in r.history))
    run.write("ablation.csv", _csv(write_ablation_table, results))
    run.write("loss_by_depth.csv", _csv(write_loss_by_depth, results))
    return run.finish(EXIT_OK)


def cmd_scalar_map(args) -> int:
    fields = {"A": args.A, "B": args.B, "b": args.b, "h": args.h, "activation": args.activation,
              "unroll_lengths": args.k, "u_grid": (args.u_min, args.u_max, args.points),
              "stop_threshold": args.stop_threshold}
    if args.config is not None:
        fields = _read_json(args.config)
    if fields.get("A") is None:
        raise UsageError("--A (or 'A' in the config) is required")
    try:
        spec = ScalarMapSpec(**fields)
    except (TypeError, ValueError) as exc:
        raise UsageError(f"invalid scalar map: {exc}") from exc
    run = Run("scalar-map", args.out_dir, _seed(args), json.loads(json.dumps(fields, default=str)))
    run.write("scalar_map.csv", _csv(write_scalar_map_csv, scalar_map(spec)))
    return run.finish(EXIT_OK)


def cmd_depth_survey(args) -> int:
    doc = load_model(args.model)
    model = doc.to_model()
    seed = _seed(args)
    ds_spec = {"kind": args.dataset}
    if args.dataset == "mnist":
        ds_spec.update(root=args.data_root, n_train=args.n_train, n_test=args.n_test)
    dataset = load_dataset(ds_spec, seed)
    if dataset.input_dim != model.blocks[0].m:
        raise UsageError(f"dataset has {dataset.input_dim} features, model expects {model.blocks[0].m}")
    run = Run("depth-survey", args.out_dir, seed, {"model": _file_digest(args.model), "dataset": ds_spec,
                                                  "threshold": args.threshold, "k_max": args.k_max})
    records = depth_survey(model, dataset.x_test, dataset.y_test, args.threshold, args.k_max)
    run.write("depth.csv", _csv(write_depth_csv, records))
    stats = depth_statistics(records)
    run.write("depth_stats.json", json.dumps(stats.to_dict(), indent=1, sort_keys=True) + "\n")
    print(f"Kruskal-Wallis H={stats.H:.4f} p={stats.p:.3g}; "
          f"{100 * stats.fraction_different:.1f}% of class pairs differ at alpha={stats.alpha}")
    return run.finish(EXIT_OK)


# -- parser --------------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    fmt = argparse.ArgumentDefaultsHelpFormatter
    parser = argparse.ArgumentParser(prog="naisnet", description=__doc__.splitlines()[0], formatter_class=fmt)
    parser.add_argument("--seed", type=int, default=None, help="override every config seed")
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = parser.add_subparsers(dest="command", metavar="COMMAND", required=True)

    def add(name, fn, help_):
        p = sub.add_parser(name, help=help_, description=help_, formatter_class=fmt)
        p.set_defaults(func=fn)
        p.add_argument("--out-dir", default=".", help="directory for outputs and manifest.json")
        return p

    p = add("audit", cmd_audit, "check the stability condition of every block in a model file")
    p.add_argument("model", help="model JSON file")
    p.add_argument("--samples", type=int, default=DEFAULT_SAMPLES, help="random activation-slope samples")
    p.add_argument("--sigma-floor", type=float, default=DEFAULT_SIGMA_FLOOR, help="smallest slope sampled")
    p.add_argument("--mu", type=float, default=1.0, help="input bound for the invariant-set radius")

    p = add("unroll", cmd_unroll, "unroll a model on one input and write the trajectory CSV")
    p.add_argument("model", help="model JSON file")
    p.add_argument("input", help="input vector in the matrix text format")
    mode = p.add_mutually_exclusive_group()
    mode.add_argument("--k", type=int, default=30, help="fixed unroll length")
    mode.add_argument("--adaptive", type=float, default=None, metavar="THRESHOLD",
                      help="stop once the infinity-norm step falls below THRESHOLD")
    p.add_argument("--k-max", type=int, default=500, help="step cap for --adaptive")

    for name, fn, help_ in (("train", cmd_train, "train a classifier from a JSON config"),
                            ("ablate", cmd_ablate, "train the SH x NA x Stable variants from a JSON config")):
        p = add(name, fn, help_)
        p.add_argument("config", help="experiment config JSON")
        p.add_argument("--learning-rate", dest="learning_rate", type=float, default=None,
                       help="override train.learning_rate")
        p.add_argument("--momentum", type=float, default=None, help="override train.momentum")
        p.add_argument("--epochs", type=int, default=None, help="override train.epochs")
        p.add_argument("--batch-size", dest="batch_size", type=int, default=None, help="override train.batch_size")
        p.add_argument("--projection-cadence", dest="projection_cadence", choices=["per_step", "per_epoch"],
                       default=None, help="override train.projection_cadence")

    p = add("scalar-map", cmd_scalar_map, "tabulate the input-output map of a one-neuron block")
    p.add_argument("--config", default=None, help="JSON with ScalarMapSpec fields (flags below are ignored)")
    p.add_argument("--A", type=float, default=None, help="state coefficient")
    p.add_argument("--B", type=float, default=1.0, help="input coefficient")
    p.add_argument("--b", type=float, default=0.0, help="bias")
    p.add_argument("--h", type=float, default=1.0, help="step size")
    p.add_argument("--activation", choices=["tanh", "relu"], default="tanh", help="activation")
    p.add_argument("--k", type=int, nargs="+", default=[1, 5, 10, 30, 100], help="unroll lengths")
    p.add_argument("--u-min", type=float, default=-2.0, help="grid start")
    p.add_argument("--u-max", type=float, default=2.0, help="grid end")
    p.add_argument("--points", type=int, default=201, help="grid size")
    p.add_argument("--stop-threshold", type=float, default=None,
                   help=f"adaptive stopping threshold (the demo uses {SCALAR_DEMO_THRESHOLD})")

    p = add("depth-survey", cmd_depth_survey, "record per-sample adaptive depth on the test split")
    p.add_argument("model", help="trained model JSON file")
    p.add_argument("--dataset", choices=["mnist", "blobs"], default="mnist", help="dataset kind")
    p.add_argument("--data-root", default=None, help=f"MNIST directory (default ${DATA_ENV})")
    p.add_argument("--n-train", type=int, default=10_000, help="MNIST training subset size")
    p.add_argument("--n-test", type=int, default=2_000, help="MNIST test subset size")
    p.add_argument("--threshold", type=float, default=SURVEY_THRESHOLD, help="stopping threshold")
    p.add_argument("--k-max", type=int, default=500, help="step cap")
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except (UsageError, ValueError, TypeError, KeyError, OSError) as exc:
        print(f"naisnet {args.command}: error: {exc}", file=sys.stderr)
        return EXIT_USAGE


if __name__ == "__main__":
    sys.exit(main())
