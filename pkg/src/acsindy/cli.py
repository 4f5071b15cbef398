"""Command-line entry point: simulate, train, extract, eval, paramscaling.

Configuration comes from an optional JSON file (``--config``) plus flat
``--key value`` overrides; precedence is CLI > file > defaults. Nested keys
may be given dotted (``--train.learning_rate 3e-3``) or by their bare name
when unambiguous (``--learning_rate 3e-3``). ``--no-<flag>`` sets a boolean
to false.

Exit codes: 0 success, 2 argument/config error, 3 numeric/divergence
error, 4 I/O error.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from dataclasses import fields
from pathlib import Path

from . import experiment
from .errors import ArgumentError, NumericError
from .experiment import ArchitectureConfig, ExperimentConfig, FilteringConfig
from .pruning import PruneConfig
from .training import TrainConfig

EXIT_OK, EXIT_ARGS, EXIT_NUMERIC, EXIT_IO = 0, 2, 3, 4

log = logging.getLogger("acsindy")


def _aliases():
    out = {}
    for f in fields(TrainConfig):
        if f.name not in ("seed", "dt"):
            out[f.name] = ("train", f.name)
    for f in fields(PruneConfig):
        out[f.name] = ("prune", f.name)
    for f in fields(ArchitectureConfig):
        out[f.name] = ("architecture", f.name)
    for f in fields(FilteringConfig):
        out["filtering_" + f.name] = ("filtering", f.name)
    for f in fields(ExperimentConfig):
        out[f.name] = (f.name,)
    out["window"] = ("filtering", "window")
    out["filtering"] = ("filtering", "enabled")
    out["prune"] = ("prune_enabled",)
    out["out"] = ("output_dir",)
    return out


ALIASES = _aliases()


def parse_value(text: str):
    try:
        return json.loads(text)
    except json.JSONDecodeError:
        pass
    if "," in text:
        try:
            return [float(v) for v in text.split(",")]
        except ValueError:
            pass
    low = text.lower()
    if low in ("true", "yes", "on"):
        return True
    if low in ("false", "no", "off"):
        return False
    return text


def parse_overrides(tokens) -> dict:
    """``['--steps', '1000', '--no-prune']`` -> {('steps',): 1000, ('prune_enabled',): False}."""
    out = {}
    i = 0
    while i < len(tokens):
        tok = tokens[i]
        if not tok.startswith("--"):
            raise ArgumentError(f"unexpected argument {tok!r}")
        key = tok[2:].replace("-", "_")
        value = True
        if key.startswith("no_") and key[3:] in ALIASES:
            key, value = key[3:], False
            i += 1
        elif i + 1 < len(tokens) and not tokens[i + 1].startswith("--"):
            value = parse_value(tokens[i + 1])
            i += 2
        else:
            i += 1
        if "." in key:
            path = tuple(key.split("."))
        elif key in ALIASES:
            path = ALIASES[key]
        else:
            raise ArgumentError(f"unknown option --{tok[2:]}")
        out[path] = value
    return out


def apply_overrides(base: dict, overrides: dict) -> dict:
    d = json.loads(json.dumps(base))
    for path, value in overrides.items():
        node = d
        for k in path[:-1]:
            node = node.setdefault(k, {})
            if not isinstance(node, dict):
                raise ArgumentError(f"cannot set {'.'.join(path)}")
        node[path[-1]] = value
    return d


def resolve_config(config_path, overrides) -> ExperimentConfig:
    base = experiment.load_config(config_path) if config_path else {}
    return ExperimentConfig.from_dict(apply_overrides(base, overrides))


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="acsindy", description=__doc__.split("\n")[0])
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    s = sub.add_parser("simulate", help="generate clean (and noisy) trajectories")
    s.add_argument("--config")

    t = sub.add_parser("train", help="train, prune and select a circuit model")
    t.add_argument("--config")
    t.add_argument("--data", help="directory holding clean.csv / noisy.csv (default: output dir)")

    e = sub.add_parser("extract", help="print recovered equations from a checkpoint")
    e.add_argument("checkpoint")
    e.add_argument("--precision", type=int, default=3)
    e.add_argument("--out", help="also write the equations to this text file")

    v = sub.add_parser("eval", help="rollout and vector-field metrics")
    v.add_argument("checkpoint")
    v.add_argument("trajectory")
    v.add_argument("--k-eval", type=int, default=50)
    v.add_argument("--out", help="output directory (default: checkpoint directory)")

    c = sub.add_parser("paramscaling", help="tabulate SINDy vs AC parameter counts")
    c.add_argument("--p", default="2,3,4")
    c.add_argument("--d-max", type=int, default=50)
    c.add_argument("--out", default=".")
    return p


def _int_list(text):
    try:
        return [int(v) for v in str(text).split(",") if v.strip()]
    except ValueError as exc:
        raise ArgumentError(f"expected comma-separated integers, got {text!r}") from exc


def run(argv=None) -> int:
    parser = build_parser()
    args, rest = parser.parse_known_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    if rest and args.command not in ("simulate", "train"):
        raise ArgumentError(f"unrecognized arguments: {' '.join(rest)}")
    if args.command == "simulate":
        cfg = resolve_config(args.config, parse_overrides(rest))
        files = experiment.run_simulate(cfg)
        for path in files.values():
            print(path)
    elif args.command == "train":
        cfg = resolve_config(args.config, parse_overrides(rest))
        data = None
        if args.data:
            path = experiment.training_data_path(cfg, Path(args.data))
            if not path.exists():
                raise FileNotFoundError(f"{path} not found")
            data = experiment.read_trajectory_csv(path)
        result = experiment.run_train(cfg, data=data)
        cp = next(c for c in result.checkpoints if c.round == result.best_round)
        print(f"best round {cp.round}: active_params={cp.active_params} val_loss={cp.val_loss:.6g}")
        print(Path(cfg.output_dir) / "best.json")
    elif args.command == "extract":
        text, _, report = experiment.run_extract(args.checkpoint, args.precision, text_out=args.out)
        print(text)
        if report is not None:
            print(f"max_abs_error={report.max_abs_error:.4g} missing={report.n_missing} "
                  f"spurious={report.n_spurious}")
    elif args.command == "eval":
        out = args.out or Path(args.checkpoint).parent
        metrics = experiment.run_eval(args.checkpoint, args.trajectory, args.k_eval, out)
        rm = metrics["rollout_rmse"]
        print(f"rollout rmse k=1: {rm[0]:.4g}  k={len(rm)}: {rm[-1]:.4g}")
        if "vector_field_relative_rmse" in metrics:
            print(f"vector field relative rmse: {metrics['vector_field_relative_rmse']:.4g}")
    elif args.command == "paramscaling":
        ps = _int_list(args.p)
        if not ps or min(ps) < 1 or args.d_max < 1:
            raise ArgumentError("--p values and --d-max must be positive")
        experiment.run_paramscaling(ps, args.d_max, args.out)
        print(Path(args.out) / "scaling.csv")
    return EXIT_OK


def main(argv=None) -> int:
    try:
        return run(argv)
    except (ArgumentError, ValueError, KeyError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_ARGS
    except (NumericError, ArithmeticError) as exc:
        print(f"numeric error: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except OSError as exc:
        print(f"I/O error: {exc}", file=sys.stderr)
        return EXIT_IO


if __name__ == "__main__":
    sys.exit(main())
