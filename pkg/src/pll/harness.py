"""Run orchestration: config parsing, dataset assembly, artifacts, metrics.

A run is fully described by a flat key=value config plus a seed; re-running
from the echoed config reproduces the metrics CSV byte for byte. Every
subcommand writes into a run directory and nothing else.
"""
from __future__ import annotations

import json
import time
from dataclasses import dataclass, fields
from pathlib import Path

import numpy as np

from . import datagen as dg
from .networks import EncoderConfig, ModelState, save_checkpoint, load_checkpoint
from .pico import PicoConfig, PicoTrainer, POLICIES, STRATEGIES, PROTOTYPE_MODES
from .picoplus import PicoPlusConfig, PicoPlusTrainer, SELECTION_METHODS
from .theory import run_verification


class ConfigError(ValueError):
    """Carries every validation failure found in a config, not just the first."""

    def __init__(self, errors):
        self.errors = list(errors)
        super().__init__("; ".join(self.errors))


POLICY_METHODS = ("uniform", "onehot", "soft", "ma_soft")
METHODS = ("pico", "picoplus") + POLICY_METHODS
FLIP_KINDS = ("uniform", "pair_matrix", "band_matrix", "hierarchical")

METRICS_COLUMNS = (
    "epoch", "loss_cls", "loss_cont", "loss_total", "loss_mix", "loss_clean",
    "loss_ncont", "loss_knn", "loss_ncls", "pseudo_acc", "mmc", "test_acc",
    "clean_fraction", "clean_precision", "clean_recall",
)


@dataclass
class RunConfig:
    # dataset: either generator parameters or explicit files
    n: int = 3000
    n_test: int = 1000
    classes: int = 6
    d_in: int = 16
    spread: float = 0.35
    q: float = 0.5
    eta: float = 0.0
    flip: str = "uniform"
    superclass_size: int = 2
    dataset: str = ""
    test_dataset: str = ""
    # method and schedule
    method: str = "pico"
    epochs: int = 100
    batch_size: int = 256
    base_lr: float = 0.05
    sgd_momentum: float = 0.9
    encoder_momentum: float = 0.999
    seed: int = 1
    # model
    hidden: str = "64,64"
    d_emb: int = 128
    queue_size: int = 0  # 0 means min(8192, 4n)
    # core algorithm
    tau: float = 0.07
    lam: float = 0.5
    gamma: float = 0.99
    phi_start: float = 0.95
    phi_end: float = 0.8
    warmup_epochs: int = 1
    policy: str = "pico"
    positive_strategy: str = "default"
    jaccard_rho: float = 0.5
    conf_threshold: float = 0.95
    strategy_switch_epoch: int = -1  # -1 means epochs // 2
    prototype_mode: str = "momentum"
    # augmentation
    aug_sigma_query: float = 0.1
    aug_sigma_key: float = 0.05
    aug_mask_query: float = 0.1
    aug_mask_key: float = 0.05
    # noise-robust extension
    delta: float = 0.6
    knn_k: int = 16
    varsigma: float = 4.0
    alpha: float = 2.0
    beta: float = 0.1
    plus_warmup_epochs: int = 5
    knn_start_epoch: int = 20
    selection: str = "similarity"
    # protocol
    val_fraction: float = 0.0

    def hidden_dims(self):
        return tuple(int(v) for v in self.hidden.split(",") if v.strip())

    def effective_policy(self):
        return self.method if self.method in POLICY_METHODS else self.policy

    def validate(self):
        errors = []

        def check(ok, message):
            if not ok:
                errors.append(message)

        check(self.method in METHODS, f"method must be one of {METHODS}")
        check(self.epochs >= 0, "epochs must be >= 0")
        check(self.batch_size >= 1, "batch_size must be >= 1")
        check(self.base_lr > 0, "base_lr must be > 0")
        check(0 <= self.sgd_momentum < 1, "sgd_momentum must lie in [0, 1)")
        check(0 <= self.encoder_momentum <= 1, "encoder_momentum must lie in [0, 1]")
        if self.dataset:
            check(bool(self.test_dataset),
                  "test_dataset is required when dataset is a file")
        else:
            check(self.classes >= 2, "classes must be >= 2")
            check(self.n >= self.classes, "n must be >= classes")
            check(self.n_test >= 1, "n_test must be >= 1")
            check(self.d_in >= 2, "d_in must be >= 2")
            check(self.spread >= 0, "spread must be >= 0")
            check(0 <= self.q <= 1, "q must lie in [0, 1]")
            check(0 <= self.eta < 1, "eta must lie in [0, 1)")
            check(self.flip in FLIP_KINDS, f"flip must be one of {FLIP_KINDS}")
            if self.flip == "hierarchical":
                check(1 <= self.superclass_size <= self.classes,
                      "superclass_size must lie in [1, classes]")
            if self.flip == "band_matrix":
                check(self.classes >= 6, "band_matrix flipping needs classes >= 6")
        try:
            dims = self.hidden_dims()
            check(bool(dims) and all(v >= 1 for v in dims),
                  "hidden must be positive comma-separated widths")
        except ValueError:
            errors.append("hidden must be positive comma-separated widths")
        check(self.d_emb >= 1, "d_emb must be >= 1")
        check(self.queue_size >= 0, "queue_size must be >= 0")
        check(self.tau > 0, "tau must be > 0")
        check(self.lam >= 0, "lambda must be >= 0")
        check(0 <= self.gamma <= 1, "gamma must lie in [0, 1]")
        check(0 <= self.phi_start <= 1, "phi_start must lie in [0, 1]")
        check(0 <= self.phi_end <= 1, "phi_end must lie in [0, 1]")
        check(self.warmup_epochs >= 0, "warmup_epochs must be >= 0")
        check(self.policy in POLICIES, f"policy must be one of {POLICIES}")
        check(self.positive_strategy in STRATEGIES,
              f"positive_strategy must be one of {STRATEGIES}")
        check(self.prototype_mode in PROTOTYPE_MODES,
              f"prototype_mode must be one of {PROTOTYPE_MODES}")
        for name in ("aug_sigma_query", "aug_sigma_key"):
            check(getattr(self, name) >= 0, f"{name} must be >= 0")
        for name in ("aug_mask_query", "aug_mask_key"):
            check(0 <= getattr(self, name) <= 1, f"{name} must lie in [0, 1]")
        check(0 < self.delta <= 1, "delta must lie in (0, 1]")
        check(self.knn_k >= 1, "knn_k must be >= 1")
        check(self.alpha >= 0 and self.beta >= 0, "alpha and beta must be >= 0")
        check(self.plus_warmup_epochs >= 0, "plus_warmup_epochs must be >= 0")
        check(self.knn_start_epoch >= 0, "knn_start_epoch must be >= 0")
        check(self.selection in SELECTION_METHODS,
              f"selection must be one of {SELECTION_METHODS}")
        check(0 <= self.val_fraction <= 0.5, "val_fraction must lie in [0, 0.5]")
        if errors:
            raise ConfigError(errors)
        return self


_FIELD_TYPES = {f.name: f.type for f in fields(RunConfig)}
# the config file key for the loss weight follows the usual symbol
_KEY_ALIASES = {"lambda": "lam"}
_REVERSE_ALIASES = {v: k for k, v in _KEY_ALIASES.items()}


def parse_config_text(text, source="<config>"):
    """Parse flat key=value lines; '#' starts a comment; every error is collected."""
    values = {}
    errors = []
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            errors.append(f"{source}:{lineno}: expected key=value, got {raw!r}")
            continue
        key, value = (part.strip() for part in line.split("=", 1))
        key = _KEY_ALIASES.get(key, key)
        if key not in _FIELD_TYPES:
            errors.append(f"{source}:{lineno}: unknown key {key!r}")
            continue
        kind = _FIELD_TYPES[key]
        try:
            if kind == "int" or kind is int:
                values[key] = int(value)
            elif kind == "float" or kind is float:
                values[key] = float(value)
            else:
                values[key] = value
        except ValueError:
            errors.append(f"{source}:{lineno}: bad value for {key}: {value!r}")
    if errors:
        raise ConfigError(errors)
    return values


def load_config(path=None, overrides=None) -> RunConfig:
    values = {}
    if path:
        values.update(parse_config_text(Path(path).read_text(encoding="utf-8"),
                                        source=str(path)))
    values.update(overrides or {})
    return RunConfig(**values).validate()


def config_lines(config: RunConfig):
    out = []
    for f in fields(RunConfig):
        key = _REVERSE_ALIASES.get(f.name, f.name)
        out.append(f"{key} = {getattr(config, f.name)}")
    return out


def _flip_spec(config: RunConfig):
    if config.flip == "uniform":
        return dg.UniformFlip(config.q)
    if config.flip == "pair_matrix":
        return dg.MatrixFlip(dg.cyclic_pair_matrix(config.classes))
    if config.flip == "band_matrix":
        return dg.MatrixFlip(dg.cyclic_band_matrix(config.classes))
    groups, step = [], config.superclass_size
    for start in range(0, config.classes, step):
        groups.append(tuple(range(start, min(start + step, config.classes))))
    return dg.HierarchicalFlip(tuple(groups), config.q)


def build_datasets(config: RunConfig):
    """(train examples, test examples, n_classes); test candidates are singletons."""
    if config.dataset:
        train, n_classes = dg.load_dataset(config.dataset)
        test, c2 = dg.load_dataset(config.test_dataset)
        if c2 != n_classes:
            raise ConfigError(["train and test datasets disagree on class count"])
        return train, test, n_classes
    labeled = dg.make_gaussian_blobs(
        config.n + config.n_test, config.classes, config.d_in, config.spread,
        seed=[config.seed, 0])
    train_lab, test_lab = labeled[: config.n], labeled[config.n :]
    flip = _flip_spec(config)
    train = dg.apply_flip(train_lab, flip, seed=[config.seed, 1],
                          n_classes=config.classes)
    if config.eta > 0:
        train = dg.apply_noise(train, train_lab, dg.NoiseSpec(config.eta), flip,
                               seed=[config.seed, 2], n_classes=config.classes)
    test = dg.apply_flip(test_lab, dg.UniformFlip(0.0), seed=[config.seed, 3],
                         n_classes=config.classes)
    return train, test, config.classes


def dataset_stats(examples):
    sizes = np.array([len(ex.candidates) for ex in examples])
    missing = np.array([ex.hidden_true_label not in ex.candidates for ex in examples])
    return {"mean_candidates": float(sizes.mean()),
            "fraction_true_missing": float(missing.mean())}


def build_trainer(config: RunConfig, train_examples, n_classes):
    x, cand, y = dg.to_arrays(train_examples, n_classes)
    model = ModelState(
        EncoderConfig(d_in=x.shape[1], n_classes=n_classes,
                      hidden=config.hidden_dims(), d_emb=config.d_emb),
        np.random.default_rng([config.seed, 4]),
    )
    pico_cfg = PicoConfig(
        tau=config.tau, lam=config.lam, gamma=config.gamma,
        phi_start=config.phi_start, phi_end=config.phi_end,
        warmup_epochs=config.warmup_epochs, policy=config.effective_policy(),
        positive_strategy=config.positive_strategy, jaccard_rho=config.jaccard_rho,
        conf_threshold=config.conf_threshold,
        strategy_switch_epoch=(None if config.strategy_switch_epoch < 0
                               else config.strategy_switch_epoch),
        prototype_mode=config.prototype_mode,
    )
    augment = dg.AugmentSpec(config.aug_sigma_query, config.aug_sigma_key,
                             config.aug_mask_query, config.aug_mask_key)
    queue_size = config.queue_size or min(8192, 4 * len(x))
    common = dict(
        total_epochs=max(config.epochs, 1), batch_size=config.batch_size,
        base_lr=config.base_lr, sgd_momentum=config.sgd_momentum,
        encoder_momentum=config.encoder_momentum, queue_size=queue_size,
        augment=augment, rng=np.random.default_rng([config.seed, 5]),
    )
    if config.method == "picoplus":
        plus_cfg = PicoPlusConfig(
            delta=config.delta, knn_k=config.knn_k, varsigma=config.varsigma,
            alpha=config.alpha, beta=config.beta,
            warmup_epochs=config.plus_warmup_epochs,
            knn_start_epoch=config.knn_start_epoch, selection=config.selection,
        )
        return PicoPlusTrainer(model, x, cand, y, pico_cfg,
                               plus_config=plus_cfg, **common)
    return PicoTrainer(model, x, cand, y, pico_cfg, **common)


def _fmt(value):
    if value is None:
        return ""
    if isinstance(value, (int, np.integer)):
        return str(int(value))
    return repr(float(value))


def metrics_row(metrics):
    return ",".join(_fmt(getattr(metrics, col)) for col in METRICS_COLUMNS)


def predicted_labels(model, features):
    _, probs = model.forward_eval(features)
    return probs.argmax(axis=1)


def mean_max_confidence(model, features):
    _, probs = model.forward_eval(features)
    return float(probs.max(axis=1).mean())


# -- subcommands --------------------------------------------------------------


def cmd_gen(config: RunConfig, out_dir):
    """Write dataset.pll / test.pll plus a sidecar with parameters and stats."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    train, test, n_classes = build_datasets(config)
    dg.save_dataset(train, n_classes, out / "dataset.pll")
    dg.save_dataset(test, n_classes, out / "test.pll")
    sidecar = {
        "params": {k.split(" = ")[0]: k.split(" = ")[1] for k in config_lines(config)},
        "stats": dataset_stats(train),
        "n_train": len(train),
        "n_test": len(test),
    }
    (out / "dataset.json").write_text(json.dumps(sidecar, indent=2, sort_keys=True),
                                      encoding="utf-8")
    return sidecar


def cmd_train(config: RunConfig, out_dir):
    """Train per the config; write metrics, checkpoint, dumps and summary."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    start = time.monotonic()
    train, test, n_classes = build_datasets(config)

    val_examples = []
    if config.val_fraction > 0:
        rng = np.random.default_rng([config.seed, 6])
        order = rng.permutation(len(train))
        n_val = int(round(config.val_fraction * len(train)))
        val_idx = set(order[:n_val].tolist())
        val_examples = [train[i] for i in sorted(val_idx)]
        train = [ex for i, ex in enumerate(train) if i not in val_idx]

    trainer = build_trainer(config, train, n_classes)
    x_test, _, y_test = dg.to_arrays(test, n_classes)

    csv_path = out / "metrics.csv"
    with open(csv_path, "w", encoding="utf-8") as fh:
        fh.write(",".join(METRICS_COLUMNS) + "\n")
        last = None
        for epoch in range(config.epochs):
            metrics = trainer.run_epoch(epoch)
            metrics.test_acc = trainer.evaluate(x_test, y_test)
            fh.write(metrics_row(metrics) + "\n")
            last = metrics

    save_checkpoint(trainer.model, out / "checkpoint.npz")
    _dump_pseudo_targets(trainer, out / "pseudo_targets.csv")
    _dump_embeddings(trainer.model, x_test, y_test, out / "embeddings.csv")
    (out / "config.txt").write_text("\n".join(config_lines(config)) + "\n",
                                    encoding="utf-8")

    summary = {
        "method": config.method,
        "epochs_run": config.epochs,
        "final_test_acc": trainer.evaluate(x_test, y_test),
        "final_pseudo_acc": trainer.pseudo_target_accuracy(),
        "final_mmc": trainer.mmc(),
        "wall_time_s": time.monotonic() - start,
        "config": dict(line.split(" = ", 1) for line in config_lines(config)),
    }
    if last is not None and last.clean_fraction is not None:
        summary["final_clean_fraction"] = last.clean_fraction
        summary["final_clean_precision"] = last.clean_precision
        summary["final_clean_recall"] = last.clean_recall
    if val_examples:
        xv = np.stack([ex.features for ex in val_examples])
        yv = np.array([ex.hidden_true_label for ex in val_examples])
        summary["val_accuracy"] = trainer.evaluate(xv, yv)
        summary["n_val"] = len(val_examples)
    (out / "summary.json").write_text(json.dumps(summary, indent=2, sort_keys=True),
                                      encoding="utf-8")
    return summary


def _dump_pseudo_targets(trainer, path):
    n_classes = trainer.n_classes
    header = ["example", "true_label", "target_argmax"]
    header += [f"s_{j}" for j in range(n_classes)]
    lines = [",".join(header)]
    argmaxes = trainer.s.argmax(axis=1)
    for i in range(len(trainer.s)):
        row = [str(i), str(int(trainer.true_labels[i])), str(int(argmaxes[i]))]
        row += [repr(float(v)) for v in trainer.s[i]]
        lines.append(",".join(row))
    Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8")


def _dump_embeddings(model, features, labels, path):
    emb, probs = model.forward_eval(features)
    pred = probs.argmax(axis=1)
    header = [f"emb_{j}" for j in range(emb.shape[1])] + ["true_label", "predicted_label"]
    lines = [",".join(header)]
    for i in range(len(emb)):
        row = [repr(float(v)) for v in emb[i]] + [str(int(labels[i])), str(int(pred[i]))]
        lines.append(",".join(row))
    Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8")


def cmd_eval(checkpoint_path, dataset_path):
    """Accuracy, per-class accuracy and mean max confidence on a dataset file."""
    model = load_checkpoint(checkpoint_path)
    examples, n_classes = dg.load_dataset(dataset_path)
    if n_classes != model.config.n_classes:
        raise ConfigError(["checkpoint and dataset disagree on class count"])
    x, _, y = dg.to_arrays(examples, n_classes)
    if x.shape[1] != model.config.d_in:
        raise ConfigError(["checkpoint and dataset disagree on feature dimension"])
    pred = predicted_labels(model, x)
    per_class = {}
    for c in range(n_classes):
        mask = y == c
        per_class[str(c)] = float((pred[mask] == c).mean()) if mask.any() else None
    return {
        "accuracy": float((pred == y).mean()),
        "per_class_accuracy": per_class,
        "mmc": mean_max_confidence(model, x),
        "n": len(y),
    }


def cmd_verify(seed=0, n_instances=1000, inject_fault=False):
    return run_verification(seed=seed, n_instances=n_instances,
                            inject_fault=inject_fault)
