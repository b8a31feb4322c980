"""PGD attacks, AT/TRADES losses, mixed-batch SSAT training and robust evaluation."""
from __future__ import annotations

import csv
import math
import time
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from . import diffcore as dc
from . import models

NORMS = ("linf", "l2")
LOSS_MODES = ("at", "trades")
CURVE_COLUMNS = ("epoch", "lr", "train_loss", "clean_acc", "robust_acc", "elapsed_seconds")
# initial jitter for the TRADES inner maximisation when no random start is requested;
# the KL objective has zero gradient at delta = 0
TRADES_INIT_STD = 1e-3


@dataclass
class AttackConfig:
    norm: str = "linf"
    epsilon: float = 0.05
    step_size: float | None = None
    steps: int = 10
    random_start: bool = True
    seed: int = 0
    clip: bool = True

    def __post_init__(self):
        if self.norm not in NORMS:
            raise ValueError(f"norm must be one of {NORMS}, got {self.norm!r}")
        if self.epsilon < 0:
            raise ValueError("epsilon must be non-negative")
        if self.steps < 0:
            raise ValueError("steps must be non-negative")
        if self.step_size is None:
            self.step_size = self.epsilon / 4 if self.epsilon > 0 else 1.0
        if self.steps > 0 and self.step_size <= 0:
            raise ValueError("step size must be positive when steps > 0")


@dataclass
class TrainConfig:
    gamma: float = 0.5
    batch_size: int = 128
    epochs: int = 40
    epoch_length: int | None = None
    checkpoint_interval: int = 1
    loss: str = "trades"
    trades_weight: float = 6.0
    lr: float = 0.1
    weight_decay: float = 5e-4
    seed: int = 0
    hidden: tuple = (64, 64)

    def __post_init__(self):
        if not 0 <= self.gamma <= 1:
            raise ValueError("gamma must lie in [0, 1]")
        if 0 < self.gamma < 1 and self.batch_size < 2:
            raise ValueError("mixed batches need batch_size >= 2")
        if self.batch_size < 1 or self.epochs < 0 or self.checkpoint_interval < 1:
            raise ValueError("batch_size, checkpoint_interval must be positive and epochs >= 0")
        if self.epoch_length is not None and self.epoch_length < self.batch_size:
            raise ValueError("epoch_length must be at least batch_size")
        if self.loss not in LOSS_MODES:
            raise ValueError(f"loss must be one of {LOSS_MODES}")


def _project(delta, x, cfg: AttackConfig):
    if cfg.norm == "linf":
        delta = np.clip(delta, -cfg.epsilon, cfg.epsilon)
    else:
        norm = np.linalg.norm(delta, axis=1, keepdims=True)
        scale = np.where(norm > cfg.epsilon, cfg.epsilon / np.where(norm > 0, norm, 1.0), 1.0)
        delta = delta * scale
    if cfg.clip:
        delta = np.clip(x + delta, 0.0, 1.0) - x
    return delta


def _random_start(shape, cfg: AttackConfig, rng):
    if cfg.norm == "linf":
        return rng.uniform(-cfg.epsilon, cfg.epsilon, size=shape)
    direction = rng.normal(size=shape)
    direction /= np.maximum(np.linalg.norm(direction, axis=1, keepdims=True), 1e-300)
    radius = cfg.epsilon * rng.uniform(size=(shape[0], 1)) ** (1.0 / shape[1])
    return direction * radius


def _attack_objective(params, y, objective, clean_probs):
    if objective == "ce":
        return lambda _, inp: dc.sum(dc.cross_entropy(models.classifier_apply(params, inp[0])[0],
                                                      y, reduce=False))
    if objective == "kl":
        # KL(p_clean || p_adv) with p_clean held fixed
        log_clean = np.log(np.maximum(clean_probs, 1e-300))

        def fn(_, inp):
            lp_adv = dc.log_softmax(models.classifier_apply(params, inp[0])[0])
            return dc.sum(dc.sum(clean_probs * (log_clean - lp_adv), axis=1))
        return fn
    raise ValueError(f"unknown attack objective {objective!r}")


def pgd_attack(params: models.MLPParams, x, y, cfg: AttackConfig, rng=None,
               objective: str = "ce", init=None, trace: list | None = None) -> np.ndarray:
    """Projected gradient ascent on the per-example loss; returns the perturbation.

    ``objective`` is ``"ce"`` (cross-entropy on ``y``) or ``"kl"`` (divergence
    from the clean prediction, for TRADES). Signed steps for l-inf,
    normalised-gradient steps for l2. Appends every iterate to ``trace``.
    """
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y, dtype=np.intp)
    if x.ndim != 2 or len(y) != len(x):
        raise ValueError("x must be (n, d) with one label per row")
    if rng is None:
        rng = np.random.default_rng(cfg.seed)
    if cfg.epsilon == 0:
        delta = np.zeros_like(x)
        if trace is not None:
            trace.append(delta.copy())
        return delta
    if init is not None:
        delta = np.asarray(init, dtype=np.float64).copy()
    elif cfg.random_start:
        delta = _random_start(x.shape, cfg, rng)
    else:
        delta = np.zeros_like(x)
    delta = _project(delta, x, cfg)
    if trace is not None:
        trace.append(delta.copy())
    clean_probs = models.softmax_np(models.logits_of(params, x)) if objective == "kl" else None
    fn = _attack_objective(params, y, objective, clean_probs)
    for _ in range(cfg.steps):
        _, (g,) = dc.value_and_grad(fn, (), [x + delta], wrt="inputs")
        if not np.all(np.isfinite(g)):
            raise dc.NonFiniteError("non-finite input gradient in PGD")
        if cfg.norm == "linf":
            delta = delta + cfg.step_size * np.sign(g)
        else:
            gn = np.linalg.norm(g, axis=1, keepdims=True)
            delta = delta + cfg.step_size * g / np.where(gn > 0, gn, 1.0)
        delta = _project(delta, x, cfg)
        if trace is not None:
            trace.append(delta.copy())
    return delta


def loss_graph(params, x, y, x_adv, mode: str, trades_weight: float):
    """Batch-mean adversarial loss as a graph node (differentiable in ``params``)."""
    if mode == "at":
        return dc.cross_entropy(models.classifier_apply(params, x_adv)[0], y)
    if mode == "trades":
        clean = models.classifier_apply(params, x)[0]
        adv = models.classifier_apply(params, x_adv)[0]
        return dc.cross_entropy(clean, y) + trades_weight * dc.mean(dc.kl_categorical(clean, adv))
    raise ValueError(f"unknown loss mode {mode!r}")


def craft(params, x, y, attack: AttackConfig, mode: str, rng) -> np.ndarray:
    """Adversarial inputs for training under ``mode``."""
    if mode == "trades":
        init = None
        if not attack.random_start:
            init = TRADES_INIT_STD * rng.normal(size=np.shape(x))
        delta = pgd_attack(params, x, y, attack, rng, objective="kl", init=init)
    else:
        delta = pgd_attack(params, x, y, attack, rng, objective="ce")
    return np.asarray(x) + delta


def adversarial_loss(params: models.MLPParams, x, y, attack: AttackConfig, mode: str = "at",
                     trades_weight: float = 6.0, rng=None, x_adv=None) -> float:
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y, dtype=np.intp)
    if x_adv is None:
        x_adv = craft(params, x, y, attack, mode, rng if rng is not None else np.random.default_rng(attack.seed))
    return float(loss_graph(params, x, y, x_adv, mode, trades_weight).value)


def batch_counts(gamma: float, batch_size: int) -> tuple[int, int]:
    n_l = int(math.floor(gamma * batch_size + 0.5))
    return n_l, batch_size - n_l


def make_batch(labeled, unlabeled, gamma: float, batch_size: int, rng):
    """Draw ``round(gamma * b)`` labeled and the rest pseudo-labeled points, with replacement.

    ``labeled`` and ``unlabeled`` are ``(X, y)`` pairs (``y`` = pseudo-labels
    for the unlabeled pool). Returns ``(X, y, is_labeled)``.
    """
    n_l, n_u = batch_counts(gamma, batch_size)
    parts_x, parts_y = [], []
    for (pool, count, name) in ((labeled, n_l, "labeled"), (unlabeled, n_u, "unlabeled")):
        if count == 0:
            continue
        if pool is None or len(pool[0]) == 0:
            raise ValueError(f"batch needs {count} {name} points but the {name} pool is empty")
        idx = rng.integers(len(pool[0]), size=count)
        parts_x.append(np.asarray(pool[0])[idx])
        parts_y.append(np.asarray(pool[1])[idx])
    X = np.concatenate(parts_x)
    y = np.concatenate(parts_y).astype(np.intp)
    mask = np.concatenate([np.ones(n_l, bool), np.zeros(n_u, bool)])
    return X, y, mask


def evaluate(params: models.MLPParams, X, y, attack: AttackConfig, batch: int = 2048):
    """(clean accuracy, PGD robust accuracy) on a labeled set."""
    X = np.asarray(X, dtype=np.float64)
    y = np.asarray(y, dtype=np.intp)
    rng = np.random.default_rng(attack.seed)
    clean = robust = 0
    for s in range(0, len(X), batch):
        xb, yb = X[s:s + batch], y[s:s + batch]
        clean += int(np.sum(models.predict_labels(models.logits_of(params, xb)) == yb))
        delta = pgd_attack(params, xb, yb, attack, rng)
        robust += int(np.sum(models.predict_labels(models.logits_of(params, xb + delta)) == yb))
    n = max(len(X), 1)
    return clean / n, robust / n


@dataclass
class TrainResult:
    params: models.MLPParams
    curve: list = field(default_factory=list)
    best_epoch: int = 0
    checkpoints: dict = field(default_factory=dict)

    @property
    def best(self) -> dict:
        return next(r for r in self.curve if r["epoch"] == self.best_epoch) if self.curve else {}


def ssat_train(labeled, unlabeled, cfg: TrainConfig, attack: AttackConfig, validation,
               eval_attack: AttackConfig | None = None, n_classes: int | None = None,
               init: models.MLPParams | None = None) -> TrainResult:
    """Adversarial training on mixed labeled / pseudo-labeled batches.

    Runs ``epochs`` epochs of ``ceil(P / b)`` steps, evaluates on
    ``validation`` after every epoch, and returns the checkpoint with the
    highest robust accuracy (earliest on ties). Checkpoints are taken every
    ``checkpoint_interval`` epochs and at the final epoch.
    """
    X_l, y_l = np.asarray(labeled[0], dtype=np.float64), np.asarray(labeled[1], dtype=np.intp)
    if unlabeled is not None and len(unlabeled[0]) == 0:
        unlabeled = None
    eval_attack = eval_attack or attack
    if n_classes is None:
        seen = y_l if unlabeled is None else np.concatenate([y_l, np.asarray(unlabeled[1])])
        n_classes = int(seen.max()) + 1
    params = init.copy() if init is not None else models.init_classifier(
        X_l.shape[1], n_classes, cfg.seed, cfg.hidden)
    arrays = params.arrays()
    rng = np.random.default_rng(cfg.seed + 1)
    P = cfg.epoch_length or len(X_l)
    steps = math.ceil(P / cfg.batch_size)
    result = TrainResult(params)
    best_rob = -1.0
    start = time.perf_counter()
    for epoch in range(1, cfg.epochs + 1):
        state = dc.OptimState(cfg.lr, cfg.weight_decay, cfg.epochs, epoch - 1)
        total = 0.0
        for _ in range(steps):
            xb, yb, _ = make_batch((X_l, y_l), unlabeled, cfg.gamma, cfg.batch_size, rng)
            current = params.with_arrays(arrays)
            x_adv = craft(current, xb, yb, attack, cfg.loss, rng)
            loss, grads = dc.value_and_grad(
                lambda p, _: loss_graph(p, xb, yb, x_adv, cfg.loss, cfg.trades_weight), arrays)
            arrays = dc.sgd_step(arrays, grads, state)
            total += loss
        current = params.with_arrays(arrays)
        clean, rob = evaluate(current, validation[0], validation[1], eval_attack)
        result.curve.append({
            "epoch": epoch, "lr": state.current_lr, "train_loss": total / steps,
            "clean_acc": clean, "robust_acc": rob,
            "elapsed_seconds": round(time.perf_counter() - start, 3),
        })
        if epoch % cfg.checkpoint_interval == 0 or epoch == cfg.epochs:
            result.checkpoints[epoch] = rob
            if rob > best_rob:
                best_rob = rob
                result.best_epoch = epoch
                result.params = current.copy()
    if cfg.epochs == 0:
        result.params = params.with_arrays(arrays)
    return result


def adversarial_train(labeled, cfg: TrainConfig, attack: AttackConfig, validation, **kw) -> TrainResult:
    """Vanilla adversarial training: SSAT with an all-labeled batch."""
    return ssat_train(labeled, None, replace(cfg, gamma=1.0), attack, validation, **kw)


def write_curve(curve, path) -> None:
    with Path(path).open("w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(CURVE_COLUMNS)
        for row in curve:
            w.writerow([row[c] if not isinstance(row[c], float) else repr(row[c]) for c in CURVE_COLUMNS])
