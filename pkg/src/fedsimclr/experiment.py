"""Experiment configuration and the per-seed pipeline behind ``fedsimclr run``.

A config is an INI file with sections ``dataset``, ``partition``, ``model``,
``train``, ``eval`` and ``experiment``. Every key has a default (see
``SCHEMA``); unknown sections or keys are rejected. The keys listed in
``GRID_KEYS`` accept comma-separated values, and the run covers their
cartesian product.
"""
from __future__ import annotations

import configparser
import csv
import itertools
import math
import os
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Any, Callable

import numpy as np

from .data import AugmentSpec, PartitionSpec, generate_synthetic, partition, train_test_split
from .evaluation import LP_MODES, ProbeEvaluator
from .federation import FederationConfig, RoundMetrics, run_federation
from .losses import METHODS, SIMSIAM_METHODS
from .model import ModelDims, init_params
from .numerics import ConfigurationError, derive_rng

SEED_ENV = "FCL_SEED_OVERRIDE"
PARTITION_MODES = ("label_skew", "covariate_shift", "joint_shift")
LP_FEATURES = ("original", "client")


def _choice(options):
    def parse(text: str) -> str:
        if text not in options:
            raise ValueError(f"expected one of {', '.join(options)}")
        return text
    return parse


def _int_list(text: str) -> list[int]:
    items = [t.strip() for t in text.split(",") if t.strip()]
    if not items:
        raise ValueError("expected at least one integer")
    return [int(t) for t in items]


@dataclass(frozen=True)
class Key:
    parse: Callable[[str], Any]
    default: str
    doc: str


SCHEMA: dict[str, dict[str, Key]] = {
    "dataset": {
        "num_classes": Key(int, "10", "number of Gaussian classes"),
        "dim": Key(int, "16", "feature dimension (even when rotations are used)"),
        "n_per_class": Key(int, "200", "samples per class before the train/test split"),
        "class_separation": Key(float, "2.0", "norm of every class mean"),
        "test_fraction": Key(float, "0.2", "per-class fraction held out for testing"),
    },
    "partition": {
        "mode": Key(_choice(PARTITION_MODES), "label_skew", "label_skew | covariate_shift | joint_shift"),
        "alpha": Key(float, "0.1", "Dirichlet concentration, multiplied by the label prior"),
        "num_clients": Key(int, "20", "number of clients"),
        "num_rotation_bins": Key(int, "10", "rotation bins over [0, 2pi)"),
        "labelled_fraction": Key(float, "0.0", "fraction of each client's samples with visible labels"),
    },
    "model": {
        "encoder_hidden": Key(int, "64", "encoder hidden width"),
        "z_dim": Key(int, "32", "representation width"),
        "proj_hidden": Key(int, "64", "projector hidden width"),
        "proj_dim": Key(int, "16", "projection width (also the UV head input)"),
        "pred_hidden": Key(int, "32", "predictor hidden width, used by SimSiam methods only"),
    },
    "train": {
        "method": Key(_choice(METHODS), "federated_simclr", " | ".join(METHODS)),
        "rounds": Key(int, "100", "communication rounds"),
        "clients_per_round": Key(int, "10", "clients sampled per round without replacement"),
        "local_epochs": Key(int, "1", "local epochs per round"),
        "batch_size": Key(int, "128", "local minibatch size"),
        "local_lr": Key(float, "0.1", "client SGD learning rate"),
        "server_lr": Key(float, "0.001", "server Adam learning rate"),
        "beta1": Key(float, "0.9", "server Adam beta1"),
        "beta2": Key(float, "0.999", "server Adam beta2"),
        "adam_eps": Key(float, "1e-8", "server Adam epsilon"),
        "uv_weight": Key(float, "1.0", "weight of the user-verification loss"),
        "temperature": Key(float, "0.5", "cosine critic temperature"),
        "server_mode": Key(_choice(("adam", "average")), "adam", "adam | average (debug)"),
        "checkpoint_every": Key(int, "0", "write a checkpoint every k rounds (0 disables)"),
        "noise_sigma": Key(float, "0.1", "augmentation: Gaussian noise std"),
        "mask_prob": Key(float, "0.2", "augmentation: per-feature drop probability"),
        "scale_min": Key(float, "0.8", "augmentation: lower bound of the random scale"),
        "scale_max": Key(float, "1.2", "augmentation: upper bound of the random scale"),
    },
    "eval": {
        "eval_every": Key(int, "10", "probe cadence in rounds (the last round is always evaluated)"),
        "lp_epochs": Key(int, "20", "probe gradient steps per evaluation"),
        "lp_lr": Key(float, "0.1", "probe learning rate"),
        "lp_mode": Key(_choice(LP_MODES), "full_labels", "full_labels | labelled_subset"),
        "lp_features": Key(_choice(LP_FEATURES), "original",
                           "original (unrotated inputs) | client (inputs as stored on clients)"),
    },
    "experiment": {
        "seeds": Key(_int_list, "0,1,2,3,4", "comma-separated seed list"),
    },
}

GRID_KEYS = (("train", "method"), ("partition", "mode"), ("partition", "alpha"),
             ("train", "local_epochs"), ("partition", "labelled_fraction"))


@dataclass(frozen=True)
class DatasetSettings:
    num_classes: int = 10
    dim: int = 16
    n_per_class: int = 200
    class_separation: float = 2.0
    test_fraction: float = 0.2


@dataclass(frozen=True)
class EvalSettings:
    eval_every: int = 10
    lp_epochs: int = 20
    lp_lr: float = 0.1
    lp_mode: str = "full_labels"
    lp_features: str = "original"


@dataclass(frozen=True)
class ExperimentConfig:
    """One grid cell: every field single-valued."""

    dataset: DatasetSettings = field(default_factory=DatasetSettings)
    partition: PartitionSpec = field(default_factory=lambda: PartitionSpec("label_skew"))
    model: ModelDims = field(default_factory=ModelDims)
    train: FederationConfig = field(default_factory=FederationConfig)
    eval: EvalSettings = field(default_factory=EvalSettings)
    seeds: tuple[int, ...] = (0, 1, 2, 3, 4)

    def label(self) -> str:
        return (f"{self.train.method}_{self.partition.mode}_a{self.partition.alpha:g}"
                f"_e{self.train.local_epochs}_l{self.partition.labelled_fraction:g}")

    def model_dims(self) -> ModelDims:
        pred = self.model.pred_hidden if self.train.method in SIMSIAM_METHODS else 0
        return replace(self.model, input_dim=self.dataset.dim, pred_hidden=pred,
                       num_clients=self.partition.num_clients,
                       num_classes=self.dataset.num_classes)


def _parse_value(section: str, key: str, raw: str, grid: bool):
    spec = SCHEMA[section][key]
    texts = [t.strip() for t in raw.split(",")] if grid else [raw.strip()]
    try:
        values = [spec.parse(t) for t in texts]
    except ValueError as e:
        raise ConfigurationError(f"[{section}] {key} = {raw!r}: {e}") from None
    return values if grid else values[0]


def parse_config(text: str) -> tuple[dict, dict]:
    """Parse INI text into ``(fixed, grid)`` value maps keyed by ``(section, key)``."""
    cp = configparser.ConfigParser(interpolation=None, default_section="__none__")
    cp.optionxform = str
    try:
        cp.read_string(text)
    except configparser.Error as e:
        raise ConfigurationError(f"malformed config: {e}") from None
    for section in cp.sections():
        if section not in SCHEMA:
            raise ConfigurationError(f"unknown section [{section}]; expected one of {', '.join(SCHEMA)}")
        for key in cp[section]:
            if key not in SCHEMA[section]:
                raise ConfigurationError(f"[{section}] unknown key {key!r}")
    fixed, grid = {}, {}
    for section, keys in SCHEMA.items():
        for key, spec in keys.items():
            raw = cp.get(section, key, fallback=spec.default)
            if (section, key) in GRID_KEYS:
                grid[(section, key)] = _parse_value(section, key, raw, True)
            else:
                fixed[(section, key)] = _parse_value(section, key, raw, False)
    return fixed, grid


def _build(fixed: dict, cell: dict) -> ExperimentConfig:
    v = {**fixed, **cell}

    def sec(name):
        return {k: val for (s, k), val in v.items() if s == name}

    tr = sec("train")
    aug = AugmentSpec(tr.pop("noise_sigma"), tr.pop("mask_prob"), (tr.pop("scale_min"), tr.pop("scale_max")))
    ev = sec("eval")
    train = FederationConfig(**tr, augment=aug, eval_every=ev["eval_every"])
    cfg = ExperimentConfig(dataset=DatasetSettings(**sec("dataset")),
                           partition=PartitionSpec(**sec("partition")),
                           model=ModelDims(**sec("model")), train=train,
                           eval=EvalSettings(**ev), seeds=tuple(v[("experiment", "seeds")]))
    validate_config(cfg)
    return cfg


def validate_config(cfg: ExperimentConfig) -> None:
    d, p = cfg.dataset, cfg.partition
    if d.num_classes < 2 or d.dim < 2 or d.n_per_class < 1:
        raise ConfigurationError("[dataset] need num_classes >= 2, dim >= 2, n_per_class >= 1")
    if d.class_separation <= 0:
        raise ConfigurationError("[dataset] class_separation must be positive")
    if not 0.0 < d.test_fraction < 1.0:
        raise ConfigurationError("[dataset] test_fraction must lie in (0, 1)")
    if p.mode != "label_skew" and d.dim % 2:
        raise ConfigurationError("[dataset] dim must be even for rotation-based partitions")
    if p.alpha <= 0 or p.num_clients < 1 or p.num_rotation_bins < 1:
        raise ConfigurationError("[partition] need alpha > 0, num_clients >= 1, num_rotation_bins >= 1")
    if not 0.0 <= p.labelled_fraction <= 1.0:
        raise ConfigurationError("[partition] labelled_fraction must lie in [0, 1]")
    m = cfg.model
    if min(m.encoder_hidden, m.z_dim, m.proj_hidden, m.proj_dim) < 1 or m.pred_hidden < 0:
        raise ConfigurationError("[model] widths must be positive")
    try:
        cfg.train.validate(p.num_clients)
    except ConfigurationError as e:
        raise ConfigurationError(f"[train] {e}") from None
    if cfg.eval.eval_every < 0 or cfg.eval.lp_epochs < 0 or cfg.eval.lp_lr <= 0:
        raise ConfigurationError("[eval] need eval_every >= 0, lp_epochs >= 0, lp_lr > 0")
    if not cfg.seeds:
        raise ConfigurationError("[experiment] seeds must not be empty")


def seed_override(env=None) -> tuple[int, ...] | None:
    raw = (os.environ if env is None else env).get(SEED_ENV)
    if raw is None or not raw.strip():
        return None
    try:
        return tuple(_int_list(raw))
    except ValueError:
        raise ConfigurationError(f"{SEED_ENV}={raw!r} is not a comma-separated integer list") from None


def load_cells(text: str, env=None) -> list[ExperimentConfig]:
    """All grid cells of a config, in row-major order of ``GRID_KEYS``."""
    fixed, grid = parse_config(text)
    seeds = seed_override(env)
    if seeds is not None:
        fixed[("experiment", "seeds")] = list(seeds)
    keys = list(grid)
    return [_build(fixed, dict(zip(keys, combo)))
            for combo in itertools.product(*(grid[k] for k in keys))]


def config_template() -> str:
    """Commented INI listing every key with its default."""
    lines = []
    for section, keys in SCHEMA.items():
        lines.append(f"[{section}]")
        for key, spec in keys.items():
            grid = " (grid: comma-separated values allowed)" if (section, key) in GRID_KEYS else ""
            lines.append(f"# {spec.doc}{grid}")
            lines.append(f"{key} = {spec.default}")
        lines.append("")
    return "\n".join(lines)


# -- pipeline ---------------------------------------------------------------

def prepare(cfg: ExperimentConfig, seed: int):
    """Data, split, partition and initial parameters for one seed."""
    d = cfg.dataset
    ds = generate_synthetic(d.num_classes, d.dim, d.n_per_class, d.class_separation,
                            derive_rng(seed, "data"))
    train, test = train_test_split(ds, d.test_fraction, derive_rng(seed, "split"))
    clients = partition(train, cfg.partition, derive_rng(seed, "partition"))
    params = init_params(cfg.model_dims(), derive_rng(seed, "init"))
    return train, test, clients, params


def run_seed(cfg: ExperimentConfig, seed: int, out_dir=None) -> list[RoundMetrics]:
    """Full pipeline for one seed; writes ``metrics_<seed>.csv`` under ``out_dir``."""
    train, test, clients, params = prepare(cfg, seed)
    e = cfg.eval
    evaluator = ProbeEvaluator(clients, test, cfg.model.z_dim, e.lp_mode, e.lp_epochs, e.lp_lr,
                               source=train if e.lp_features == "original" else None)
    metrics_path = ckpt = None
    if out_dir is not None:
        out_dir = Path(out_dir)
        out_dir.mkdir(parents=True, exist_ok=True)
        metrics_path = out_dir / f"metrics_{seed}.csv"
        if cfg.train.checkpoint_every > 0:
            ckpt = out_dir / f"checkpoints_{seed}"
            ckpt.mkdir(exist_ok=True)
    metrics, _ = run_federation(replace(cfg.train, seed=seed), clients, params, evaluator,
                                metrics_path=metrics_path, checkpoint_dir=ckpt)
    return metrics


def final_row(metrics: list[RoundMetrics]) -> RoundMetrics:
    """Last row carrying a probe evaluation (round 0 when T = 0)."""
    evaluated = [r for r in metrics if not math.isnan(r.lp_test_acc)]
    return evaluated[-1] if evaluated else metrics[-1]


def mean_se(values) -> tuple[float, float]:
    """Mean and sample-std / sqrt(n); the error is 0 for a single value."""
    a = np.asarray(values, dtype=np.float64)
    se = float(np.std(a, ddof=1) / math.sqrt(a.size)) if a.size > 1 else 0.0
    return float(np.mean(a)), se


def pooled_se(se_a: float, se_b: float) -> float:
    return math.hypot(se_a, se_b)


SUMMARY_HEADER = ("cell", "method", "mode", "alpha", "local_epochs", "labelled_fraction", "rounds",
                  "num_seeds", "lp_test_acc_mean", "lp_test_acc_se", "lp_train_acc_mean",
                  "lp_train_acc_se", "loss_total_mean", "loss_total_se")


def summary_row(cfg: ExperimentConfig, finals: list[RoundMetrics]) -> list[str]:
    def f(x):
        return repr(float(x))
    test = mean_se([r.lp_test_acc for r in finals])
    train = mean_se([r.lp_train_acc for r in finals])
    loss = mean_se([r.loss_total for r in finals])
    return [cfg.label(), cfg.train.method, cfg.partition.mode, f(cfg.partition.alpha),
            str(cfg.train.local_epochs), f(cfg.partition.labelled_fraction), str(cfg.train.rounds),
            str(len(finals)), f(test[0]), f(test[1]), f(train[0]), f(train[1]), f(loss[0]), f(loss[1])]


def write_summary(rows: list[list[str]], path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(SUMMARY_HEADER)
        w.writerows(rows)
