"""Command line: ``ditl {generate,run,explain,sweep,report}``.

Every config key is also a flag: ``--train.max_epochs 20``, ``--model.channels 4,8,16``,
``--rows unimodal-ct,ditl-intermediate``. Flags override the ``--config`` file.
Failures exit nonzero and print ``{"error": {"category": ..., "message": ...}}``
on stderr.
"""
from __future__ import annotations

import argparse
import dataclasses
import json
import os
import sys

from . import runner
from .models import ModelConfig
from .phantom import DatasetSpec, PhantomError
from .training import TrainConfig, TrainingError


def _add_config_flags(p):
    p.add_argument("--config", help="YAML experiment config")
    for key in runner.TOP_LEVEL:
        p.add_argument(f"--{key}", dest=key, default=None)
    for section, cls in (("dataset", DatasetSpec), ("train", TrainConfig), ("model", ModelConfig)):
        for f in dataclasses.fields(cls):
            p.add_argument(f"--{section}.{f.name}", dest=f"{section}.{f.name}", default=None)


def _spec(args):
    base = runner.load_config(args.config) if args.config else {}
    keys = list(runner.TOP_LEVEL) + [k for k in vars(args) if "." in k]
    overrides = {k: getattr(args, k) for k in keys if getattr(args, k, None) is not None}
    return runner.spec_from_dict(runner.apply_overrides(base, overrides))


def cmd_generate(args):
    spec = _spec(args)
    path = runner.generate_dataset(spec, spec.output)
    print(path)


def cmd_run(args):
    spec = _spec(args)
    report = runner.run(spec)
    sys.stdout.write(report.table())
    print(f"report written to {spec.output}")


def cmd_sweep(args):
    spec = _spec(args)
    grid = runner.DEFAULT_LAMBDA_GRID if args.grid is None else [float(g) for g in args.grid.split(",")]
    table = runner.sweep_lambda(spec, grid, row=args.row)
    sys.stdout.write(runner.sweep_csv(table))


def cmd_explain(args):
    samples = [int(s) for s in args.samples.split(",")]
    paths = runner.explain(args.run_dir, args.row, args.fold, args.seed, samples, args.out)
    for p in paths:
        print(p)


def cmd_report(args):
    path = os.path.join(args.run_dir, "report.json")
    try:
        with open(path) as fh:
            body = json.load(fh)
    except OSError as exc:
        raise runner.DataError(f"cannot read {path}: {exc}") from exc
    report = runner.report_from_json(body)
    text = report.csv() if args.format == "csv" else report.table()
    sys.stdout.write(text)


def build_parser():
    parser = argparse.ArgumentParser(prog="ditl", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("generate", help="write a synthetic dataset directory")
    _add_config_flags(p)
    p.set_defaults(func=cmd_generate)

    p = sub.add_parser("run", help="train and evaluate experiment rows")
    _add_config_flags(p)
    p.set_defaults(func=cmd_run)

    p = sub.add_parser("sweep", help="lambda grid over an intermediate-fusion row")
    _add_config_flags(p)
    p.add_argument("--grid", help="comma-separated lambdas (default 0.1..2.0 step 0.1)")
    p.add_argument("--row", default="ditl-intermediate")
    p.set_defaults(func=cmd_sweep)

    p = sub.add_parser("explain", help="export heatmaps and Shapley tables from a run")
    p.add_argument("run_dir")
    p.add_argument("--row", required=True)
    p.add_argument("--fold", type=int, default=0)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--samples", default="0", help="positions within the fold's test split")
    p.add_argument("--out")
    p.set_defaults(func=cmd_explain)

    p = sub.add_parser("report", help="re-render the tables of a finished run")
    p.add_argument("run_dir")
    p.add_argument("--format", choices=("table", "csv"), default="table")
    p.set_defaults(func=cmd_report)
    return parser


def _fail(category, code, message):
    sys.stderr.write(json.dumps({"error": {"category": category, "message": str(message)}}) + "\n")
    return code


def main(argv=None):
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        args.func(args)
    except runner.RunnerError as exc:
        return _fail(exc.category, exc.exit_code, exc)
    except PhantomError as exc:
        return _fail("data", runner.DataError.exit_code, exc)
    except TrainingError as exc:
        return _fail("training", 4, exc)
    except (ValueError, TypeError) as exc:
        return _fail("config", runner.ConfigError.exit_code, exc)
    except OSError as exc:
        return _fail("io", runner.OutputError.exit_code, exc)
    return 0


if __name__ == "__main__":
    sys.exit(main())
