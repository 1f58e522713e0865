"""Experiment configuration and the end-to-end runner.

A single JSON document describes data, model, training, evaluation
attacks, and diagnostics; `run_experiment` executes the stages in
order and writes a machine-readable report (JSON) plus CSV tables with
sibling figures.  Reports contain no timestamps, so reruns with the
same config and seed are byte-identical.
"""

from __future__ import annotations

import copy
import csv
import json
import os
from dataclasses import dataclass, field

import numpy as np

from . import __version__
from .attacks import AttackConfig, clean_accuracy, parse_attack, robust_accuracy
from .data import Dataset, find_mnist, load_mnist_idx, synth_dataset
from .diagnostics import compute_diagnostics, summarize, write_diagnostics_csv
from .models import Model, build_mlp, build_mnist_cnn, load_checkpoint, save_checkpoint
from .training import TrainConfig, train

SEED_ENV_VAR = "ADVREG_SEED"


def global_seed(default: int = 0) -> int:
    """Config seed fallback: $ADVREG_SEED when set, else the default."""
    raw = os.environ.get(SEED_ENV_VAR)
    if raw is None:
        return default
    try:
        return int(raw)
    except ValueError:
        raise ValueError(f"{SEED_ENV_VAR} must be an integer, got {raw!r}")


class ExperimentError(RuntimeError):
    def __init__(self, stage: str, cause: Exception):
        super().__init__(f"stage {stage!r} failed: {cause}")
        self.stage = stage
        self.cause = cause


@dataclass
class ExperimentConfig:
    """Everything needed to reproduce one experiment run."""

    name: str = "experiment"
    seed: int | None = None
    dataset: dict = field(default_factory=lambda: {
        "kind": "synth", "synth": "gaussian_pair", "n": 512, "d": 8,
        "train_size": 384, "eval_size": 128})
    model: str = "auto"
    train: dict | None = None
    checkpoint: str | None = None
    attacks: list = field(default_factory=list)
    diagnostics: dict = field(default_factory=lambda: {"enabled": False})
    output_dir: str = "out"
    attack_repeats: int = 1

    def resolved_seed(self) -> int:
        return self.seed if self.seed is not None else global_seed()

    def to_json(self) -> str:
        return json.dumps(self.__dict__, sort_keys=True, indent=2)

    @staticmethod
    def from_json(text: str | dict) -> "ExperimentConfig":
        d = json.loads(text) if isinstance(text, str) else copy.deepcopy(dict(text))
        known = set(ExperimentConfig.__dataclass_fields__)
        unknown = set(d) - known
        if unknown:
            raise ValueError(f"unknown config keys: {sorted(unknown)}")
        return ExperimentConfig(**d)


def set_override(config_dict: dict, assignment: str) -> None:
    """Apply a --set key=value override; dotted keys descend into
    sub-objects, values parse as JSON with a bare-string fallback."""
    if "=" not in assignment:
        raise ValueError(f"--set expects key=value, got {assignment!r}")
    key, raw = assignment.split("=", 1)
    try:
        value = json.loads(raw)
    except json.JSONDecodeError:
        value = raw
    node = config_dict
    parts = key.split(".")
    for part in parts[:-1]:
        node = node.setdefault(part, {})
        if not isinstance(node, dict):
            raise ValueError(f"--set cannot descend into non-object at {part!r}")
    node[parts[-1]] = value


def load_dataset_pair(spec: dict, seed: int) -> tuple[Dataset, Dataset]:
    """(train, eval) datasets from a dataset config block."""
    kind = spec.get("kind", "synth")
    if kind == "mnist_idx":
        root = spec.get("root")
        paths = find_mnist(root)
        if paths is None:
            raise FileNotFoundError(
                f"no MNIST IDX files under {root or '$ARLAB_MNIST / ./data'}")
        tr = load_mnist_idx(*paths["train"], split="train")
        te = load_mnist_idx(*paths["test"], split="test")
    elif kind == "idx_pair":
        tr = load_mnist_idx(spec["train_images"], spec["train_labels"], split="train")
        te = load_mnist_idx(spec["test_images"], spec["test_labels"], split="test")
    elif kind == "synth":
        n = int(spec.get("n", 512))
        extra = {k: spec[k] for k in ("separation", "r_inner", "r_outer", "noise")
                 if k in spec}
        full = synth_dataset(spec.get("synth", "gaussian_pair"), n,
                             int(spec.get("d", 8)), seed=seed, **extra)
        train_size = int(spec.get("train_size", (3 * n) // 4))
        tr, te = full.take(train_size), Dataset(
            full.inputs[train_size:], full.labels[train_size:],
            name=full.name, split="eval", num_classes=full.num_classes)
    else:
        raise ValueError(f"unknown dataset kind {kind!r}")
    if spec.get("train_size") and kind != "synth":
        tr = tr.take(int(spec["train_size"]))
    if spec.get("eval_size"):
        te = te.take(int(spec["eval_size"]))
    return tr, te


def build_model_from_spec(spec, dataset: Dataset, seed: int) -> Model:
    if spec == "mnist_cnn":
        return build_mnist_cnn(seed=seed)
    if isinstance(spec, dict) and "mlp" in spec:
        return build_mlp(spec["mlp"], seed=seed)
    if spec == "auto":
        shape = tuple(dataset.inputs.shape[1:])
        if shape == (28, 28, 1):
            return build_mnist_cnn(seed=seed)
        return build_mlp([int(np.prod(shape)), 100, dataset.num_classes], seed=seed)
    raise ValueError(f"unknown model spec {spec!r}")


def _as_attack(entry) -> tuple[str, AttackConfig]:
    if isinstance(entry, str):
        return entry, parse_attack(entry)
    cfg = AttackConfig.from_dict(entry)
    return entry.get("label", f"{cfg.norm}-eps{cfg.eps:g}-{cfg.steps}steps"), cfg


@dataclass
class Report:
    experiment_id: str
    seed: int
    clean_accuracy: float | None = None
    attacks: list = field(default_factory=list)
    diagnostics: dict | None = None
    partial: bool = False
    fingerprint: dict = field(default_factory=dict)

    def to_json(self) -> str:
        return json.dumps({
            "experiment_id": self.experiment_id,
            "seed": self.seed,
            "clean_accuracy": self.clean_accuracy,
            "attacks": self.attacks,
            "diagnostics": self.diagnostics,
            "partial": self.partial,
            "fingerprint": self.fingerprint,
        }, sort_keys=True, indent=2)


def run_experiment(cfg: ExperimentConfig, log=None) -> Report:
    """Execute the configured stages and write report.json plus CSV/figure
    outputs into the output directory.  Any stage failure aborts with
    the stage named; whatever was computed is written with a partial
    marker."""
    seed = cfg.resolved_seed()
    report = Report(experiment_id=f"{cfg.name}-seed{seed}", seed=seed,
                    fingerprint={"package": "arlab", "version": __version__,
                                 "seed": seed})
    os.makedirs(cfg.output_dir, exist_ok=True)
    stage = "load-data"

    def say(msg):
        if log is not None:
            log(msg)

    try:
        train_data, eval_data = load_dataset_pair(cfg.dataset, seed)
        say(f"data: {len(train_data)} train / {len(eval_data)} eval examples")

        stage = "model"
        if cfg.checkpoint is not None:
            if not os.path.isfile(cfg.checkpoint):
                raise FileNotFoundError(f"checkpoint not found: {cfg.checkpoint}")
            model = load_checkpoint(cfg.checkpoint)
            say(f"loaded checkpoint {cfg.checkpoint}")
        else:
            tc_dict = dict(cfg.train or {})
            tc_dict.setdefault("seed", seed)
            tc = TrainConfig.from_json(tc_dict)
            model = build_model_from_spec(cfg.model, train_data, seed)
            model, train_report = train(tc.method, train_data, tc, model=model,
                                        eval_dataset=eval_data, log=log)
            ckpt = os.path.join(cfg.output_dir, "model.ckpt")
            save_checkpoint(model, ckpt)
            train_report.checkpoint_path = ckpt
            with open(os.path.join(cfg.output_dir, "training.json"), "w") as f:
                json.dump(train_report.to_dict(), f, sort_keys=True, indent=2)
            say(f"trained {tc.method}, checkpoint at {ckpt}")

        stage = "evaluate"
        report.clean_accuracy = clean_accuracy(model, eval_data)
        say(f"clean accuracy {report.clean_accuracy:.4f}")
        for entry in cfg.attacks:
            label, atk = _as_attack(entry)
            runs = [robust_accuracy(model, eval_data, atk)
                    if rep == 0 else
                    robust_accuracy(model, eval_data,
                                    AttackConfig.from_dict({**atk.to_dict(),
                                                            "seed": atk.seed + rep}))
                    for rep in range(max(1, cfg.attack_repeats))]
            report.attacks.append({
                "attack": label, "robust_accuracy": float(np.mean(runs)),
                "runs": runs})
            say(f"{label}: robust accuracy {np.mean(runs):.4f}")

        stage = "diagnostics"
        diag = cfg.diagnostics or {}
        if diag.get("enabled"):
            atk = parse_attack(diag.get("attack", "PGD10-48")) \
                if isinstance(diag.get("attack", "PGD10-48"), str) \
                else AttackConfig.from_dict(diag["attack"])
            records = compute_diagnostics(
                model, eval_data, atk, sample_count=int(diag.get("samples", 500)),
                with_min_distortion=bool(diag.get("min_distortion", True)),
                seed=seed)
            report.diagnostics = summarize(records)
            write_diagnostics_csv(records,
                                  os.path.join(cfg.output_dir, "diagnostics.csv"))
            from .figures import save_margin_scatter_figure
            save_margin_scatter_figure(
                records, os.path.join(cfg.output_dir, "diagnostics.png"))

        stage = "report"
        _write_outputs(cfg, report)
        return report
    except Exception as exc:
        report.partial = True
        try:
            _write_outputs(cfg, report)
        except OSError:
            pass
        raise ExperimentError(stage, exc) from exc


def _write_outputs(cfg: ExperimentConfig, report: Report) -> None:
    with open(os.path.join(cfg.output_dir, "report.json"), "w") as f:
        f.write(report.to_json())
    rows = [("clean", report.clean_accuracy)] if report.clean_accuracy is not None else []
    rows += [(a["attack"], a["robust_accuracy"]) for a in report.attacks]
    if rows:
        path = os.path.join(cfg.output_dir, "attacks.csv")
        with open(path, "w", newline="") as f:
            writer = csv.writer(f)
            writer.writerow(["attack", "accuracy"])
            for name, acc in rows:
                writer.writerow([name, repr(acc)])
        from .figures import save_attack_bar_figure
        save_attack_bar_figure([r[0] for r in rows], [r[1] for r in rows],
                               os.path.join(cfg.output_dir, "attacks.png"))
