"""Command-line entry point.

Subcommands: train, attack, transfer, diagnose, surface, curve, sweep.
Exit codes: 0 success, 2 usage errors / missing files, 1 anything else.
"""

from __future__ import annotations

import argparse
import json
import os
import sys

import numpy as np

from .attacks import AttackConfig, parse_attack, robust_accuracy, transfer_attack
from .data import Dataset, load_mnist_idx, synth_dataset
from .diagnostics import (accuracy_eps_curve, accuracy_steps_curve,
                          compute_diagnostics, summarize, surface_grid,
                          write_curve_csv, write_diagnostics_csv,
                          write_surface_csv)
from .experiment import (ExperimentConfig, ExperimentError, global_seed,
                         run_experiment, set_override)
from .models import load_checkpoint
from .training import TrainConfig, train


class CliError(Exception):
    def __init__(self, message: str, code: int = 1):
        super().__init__(message)
        self.code = code


def _load_model(path: str):
    if not os.path.isfile(path):
        raise CliError(f"checkpoint not found: {path}", code=2)
    return load_checkpoint(path)


def _add_data_args(p: argparse.ArgumentParser) -> None:
    p.add_argument("--images", help="IDX image file")
    p.add_argument("--labels", help="IDX label file")
    p.add_argument("--synth", help="synthetic dataset kind "
                                   "(gaussian_pair | ring | digits)")
    p.add_argument("--n", type=int, default=512, help="synthetic sample count")
    p.add_argument("--dim", type=int, default=8, help="synthetic dimensionality")
    p.add_argument("--data-seed", type=int, default=None)
    p.add_argument("--limit", type=int, help="evaluate at most this many examples")


def _dataset_from_args(args) -> Dataset:
    seed = args.data_seed if args.data_seed is not None else global_seed()
    if args.images and args.labels:
        ds = load_mnist_idx(args.images, args.labels)
    elif args.images or args.labels:
        raise CliError("--images and --labels must be given together", code=2)
    elif args.synth:
        ds = synth_dataset(args.synth, args.n, args.dim, seed=seed)
    else:
        raise CliError("no data source: pass --images/--labels or --synth", code=2)
    if args.limit:
        ds = ds.take(args.limit)
    return ds


def _cmd_train(args) -> int:
    with open(args.config) as f:
        config_dict = json.load(f)
    for assignment in args.set or []:
        set_override(config_dict, assignment)
    cfg = ExperimentConfig.from_json(config_dict)
    if args.output:
        cfg.output_dir = args.output
    report = run_experiment(cfg, log=lambda m: print(m, file=sys.stderr))
    print(report.to_json())
    return 0


def _cmd_attack(args) -> int:
    model = _load_model(args.model)
    dataset = _dataset_from_args(args)
    cfg = parse_attack(args.spec)
    if args.eps is not None:
        cfg.eps = args.eps
    acc = robust_accuracy(model, dataset, cfg, repeats=args.repeats)
    from .attacks import clean_accuracy
    print(f"attack={args.spec} clean_accuracy={clean_accuracy(model, dataset):.4f} "
          f"robust_accuracy={acc:.4f}")
    return 0


def _cmd_transfer(args) -> int:
    proxy = _load_model(args.proxy)
    target = _load_model(args.target)
    dataset = _dataset_from_args(args)
    cfg = parse_attack(args.spec)
    acc = transfer_attack(proxy, target, dataset, cfg)
    print(f"attack={args.spec} transfer_accuracy={acc:.4f}")
    return 0


def _cmd_diagnose(args) -> int:
    model = _load_model(args.model)
    dataset = _dataset_from_args(args)
    records = compute_diagnostics(model, dataset, parse_attack(args.attack),
                                  sample_count=args.samples,
                                  with_min_distortion=not args.no_min_distortion,
                                  seed=global_seed())
    os.makedirs(args.out, exist_ok=True)
    csv_path = os.path.join(args.out, "diagnostics.csv")
    write_diagnostics_csv(records, csv_path)
    from .figures import save_margin_scatter_figure
    save_margin_scatter_figure(records, os.path.join(args.out, "diagnostics.png"))
    print(json.dumps(summarize(records), sort_keys=True, indent=2))
    print(f"wrote {csv_path}", file=sys.stderr)
    return 0


def _cmd_surface(args) -> int:
    model = _load_model(args.model)
    dataset = _dataset_from_args(args)
    if not 0 <= args.index < len(dataset):
        raise CliError(f"--index {args.index} out of range for {len(dataset)} examples",
                       code=2)
    grid = surface_grid(model, dataset.inputs[args.index],
                        int(dataset.labels[args.index]), span=args.range,
                        resolution=args.resolution, quantity=args.quantity,
                        seed=global_seed())
    os.makedirs(args.out, exist_ok=True)
    csv_path = os.path.join(args.out, f"surface_{args.quantity}.csv")
    write_surface_csv(grid, csv_path)
    from .figures import save_surface_figure
    save_surface_figure(grid, os.path.join(args.out, f"surface_{args.quantity}.png"))
    print(f"wrote {csv_path}")
    return 0


def _cmd_curve(args) -> int:
    model = _load_model(args.model)
    dataset = _dataset_from_args(args)
    if args.kind == "eps-curve":
        grid = [float(v) for v in args.grid.split(",")]
        curve = accuracy_eps_curve(model, dataset, grid, restarts=args.restarts,
                                   seed=global_seed())
        stem = "eps_curve"
    else:
        grid = [int(v) for v in args.grid.split(",")]
        curve = accuracy_steps_curve(model, dataset, args.eps, grid,
                                     restarts=args.restarts, seed=global_seed())
        stem = "steps_curve"
    os.makedirs(args.out, exist_ok=True)
    csv_path = os.path.join(args.out, f"{stem}.csv")
    write_curve_csv(curve, csv_path)
    from .figures import save_curve_figure
    save_curve_figure(curve, os.path.join(args.out, f"{stem}.png"))
    for x, acc in zip(curve.xs, curve.accuracies):
        print(f"{curve.xlabel}={x:g} accuracy={acc:.4f}")
    if curve.converged is not None:
        print(f"converged={curve.converged}")
    return 0


def _cmd_sweep(args) -> int:
    dataset = _dataset_from_args(args)
    split = int(0.75 * len(dataset))
    train_data = dataset.take(split)
    eval_data = Dataset(dataset.inputs[split:], dataset.labels[split:],
                        name=dataset.name, split="eval",
                        num_classes=dataset.num_classes)
    lambdas = [float(v) for v in args.lambdas.split(",")]
    atk = parse_attack(args.attack)
    clean_accs, robust_accs = [], []
    from .attacks import clean_accuracy
    for lam in lambdas:
        tc = TrainConfig(method=args.method, lam=lam, epochs=args.epochs,
                         seed=global_seed())
        model, _ = train(tc.method, train_data, tc, eval_dataset=eval_data)
        clean_accs.append(clean_accuracy(model, eval_data))
        robust_accs.append(robust_accuracy(model, eval_data, atk))
        print(f"lambda={lam:g} clean={clean_accs[-1]:.4f} robust={robust_accs[-1]:.4f}")
    os.makedirs(args.out, exist_ok=True)
    csv_path = os.path.join(args.out, "sweep.csv")
    import csv as _csv
    with open(csv_path, "w", newline="") as f:
        writer = _csv.writer(f)
        writer.writerow(["lambda", "clean_accuracy", "robust_accuracy"])
        for row in zip(lambdas, clean_accs, robust_accs):
            writer.writerow([repr(v) for v in row])
    from .figures import save_sweep_figure
    save_sweep_figure(lambdas, clean_accs, robust_accs,
                      os.path.join(args.out, "sweep.png"))
    print(f"wrote {csv_path}", file=sys.stderr)
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="arlab",
        description="adversarial robustness laboratory")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("train", help="run an experiment config")
    p.add_argument("--config", required=True, help="experiment JSON file")
    p.add_argument("--set", action="append", metavar="KEY=VALUE",
                   help="override a config entry (dotted keys)")
    p.add_argument("--output", help="output directory override")
    p.set_defaults(fn=_cmd_train)

    p = sub.add_parser("attack", help="evaluate an attack on a checkpoint")
    p.add_argument("--model", required=True)
    p.add_argument("--spec", required=True, help='e.g. "PGD40-8", "FGSM4", "CW40-16"')
    p.add_argument("--eps", type=float, help="override the parsed budget")
    p.add_argument("--repeats", type=int, default=1)
    _add_data_args(p)
    p.set_defaults(fn=_cmd_attack)

    p = sub.add_parser("transfer", help="black-box transfer between checkpoints")
    p.add_argument("--proxy", required=True)
    p.add_argument("--target", required=True)
    p.add_argument("--spec", required=True)
    _add_data_args(p)
    p.set_defaults(fn=_cmd_transfer)

    p = sub.add_parser("diagnose", help="per-example margin/Jacobian records")
    p.add_argument("--model", required=True)
    p.add_argument("--attack", default="PGD10-48")
    p.add_argument("--samples", type=int, default=500)
    p.add_argument("--no-min-distortion", action="store_true")
    p.add_argument("--out", default="out")
    _add_data_args(p)
    p.set_defaults(fn=_cmd_diagnose)

    p = sub.add_parser("surface", help="loss/margin surface grid at one example")
    p.add_argument("--model", required=True)
    p.add_argument("--index", type=int, required=True)
    p.add_argument("--quantity", choices=("loss", "margin"), default="loss")
    p.add_argument("--range", type=float, default=0.04)
    p.add_argument("--resolution", type=int, default=21)
    p.add_argument("--out", default="out")
    _add_data_args(p)
    p.set_defaults(fn=_cmd_surface)

    p = sub.add_parser("curve", help="accuracy-eps or accuracy-steps curve")
    p.add_argument("--model", required=True)
    p.add_argument("--kind", choices=("eps-curve", "steps-curve"), required=True)
    p.add_argument("--grid", required=True,
                   help="comma list: eps values or step counts")
    p.add_argument("--eps", type=float, default=8 / 255,
                   help="budget for steps-curve")
    p.add_argument("--restarts", type=int, default=5)
    p.add_argument("--out", default="out")
    _add_data_args(p)
    p.set_defaults(fn=_cmd_curve)

    p = sub.add_parser("sweep", help="entropy-weight sweep (Fig-4 style)")
    p.add_argument("--method", default="entm",
                   choices=("entm", "pat_entm", "trades_entm"))
    p.add_argument("--lambdas", default="0.1,0.5,1,2,5,10")
    p.add_argument("--attack", default="PGD10-8")
    p.add_argument("--epochs", type=int, default=5)
    p.add_argument("--out", default="out")
    _add_data_args(p)
    p.set_defaults(fn=_cmd_sweep)

    return parser


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as e:
        return int(e.code or 0)
    try:
        return args.fn(args)
    except CliError as e:
        print(f"error: {e}", file=sys.stderr)
        return e.code
    except (ExperimentError, ValueError, OSError) as e:
        print(f"error: {e}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
