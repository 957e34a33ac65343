from __future__ import annotations

import dataclasses
import enum
import json
import logging
from dataclasses import dataclass, field
from typing import Callable, TextIO

import numpy as np

from ..stability import check_condition1
from .data import Dataset
from .model import Model, backward, forward_loss, log_softmax, predict_features
from .optim import sgd_momentum_step

log = logging.getLogger(__name__)


class ProjectionCadence(str, enum.Enum):
    PER_STEP = "per_step"
    PER_EPOCH = "per_epoch"


@dataclass
class TrainConfig:
    learning_rate: float = 0.1
    momentum: float = 0.9
    epochs: int = 20
    batch_size: int = 64
    seed: int = 0
    projection_cadence: ProjectionCadence = ProjectionCadence.PER_STEP
    lr_schedule: list[tuple[int, float]] = field(default_factory=list)
    audit_samples: int = 10
    audit_sigma_floor: float = 1e-3

    def __post_init__(self):
        self.projection_cadence = ProjectionCadence(self.projection_cadence)
        self.lr_schedule = [(int(e), float(f)) for e, f in self.lr_schedule]
        errors = []
        if not self.learning_rate > 0:
            errors.append("learning_rate must be > 0")
        if not 0.0 <= self.momentum < 1.0:
            errors.append("momentum must lie in [0, 1)")
        if self.epochs < 0:
            errors.append("epochs must be >= 0")
        if self.batch_size < 1:
            errors.append("batch_size must be >= 1")
        if errors:
            raise ValueError("; ".join(errors))

    def lr_at(self, epoch: int) -> float:
        lr = self.learning_rate
        for milestone, factor in self.lr_schedule:
            if epoch >= milestone:
                lr *= factor
        return lr

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        known = {f.name for f in dataclasses.fields(cls)}
        unknown = sorted(set(d) - known)
        if unknown:
            raise ValueError(f"unknown TrainConfig fields: {', '.join(unknown)}")
        return cls(**d)


@dataclass
class EpochStats:
    epoch: int
    train_loss: float
    train_acc: float
    test_loss: float
    test_acc: float
    projections_fired: int
    mean_depth: float
    lr: float
    audit_passed: bool | None = None
    audit_rho: float | None = None

    def to_json(self) -> str:
        return json.dumps(dataclasses.asdict(self), sort_keys=True)


def evaluate(model: Model, X: np.ndarray, y: np.ndarray, batch_size: int = 1000) -> tuple[float, float, float]:
    """(mean loss, accuracy, mean realized depth of the last block)."""
    if len(y) == 0:
        return float("nan"), float("nan"), float("nan")
    total_loss, correct, depth = 0.0, 0, 0.0
    for start in range(0, len(y), batch_size):
        xb, yb = X[start:start + batch_size], y[start:start + batch_size]
        H, cache = predict_features(model, xb)
        logp = log_softmax(H @ model.head.W.T + model.head.c)
        total_loss -= float(np.sum(logp[np.arange(len(yb)), yb]))
        correct += int(np.sum(np.argmax(logp, axis=1) == yb))
        depth += float(np.sum(cache.blocks[-1].depth))
    return total_loss / len(y), correct / len(y), depth / len(y)


def audit(model: Model, samples: int, sigma_floor: float, seed: int = 0) -> tuple[bool, float]:
    worst, ok = 0.0, True
    for blk in model.blocks:
        rep = check_condition1(blk, sample_count=samples, sigma_floor=sigma_floor, seed=seed,
                               relaxed=model.relaxed)
        worst = max(worst, rep.rho_bar)
        ok = ok and rep.passed
    return ok, worst


def _log_projections(fh: TextIO | None, epoch: int, step: int, outcomes) -> int:
    fired = 0
    for name, o in outcomes:
        fired += int(o.modified)
        if fh is not None:
            rec = {"epoch": epoch, "step": step, "tensor": name, **o.to_dict()}
            fh.write(json.dumps(rec, sort_keys=True) + "\n")
    return fired


def train(model: Model, dataset: Dataset, cfg: TrainConfig, *, stats_log: TextIO | None = None,
          projection_log: TextIO | None = None,
          on_epoch: Callable[[EpochStats], None] | None = None) -> list[EpochStats]:
    """Minibatch SGD with momentum and stability reprojection.

    Stats are computed after each epoch on the full train and test splits;
    when the model is stable every epoch ends with a stability audit.
    Training stops after the first epoch whose training loss is not finite.
    """
    rng = np.random.default_rng(cfg.seed)
    params = model.parameters()
    velocity: dict[str, np.ndarray] = {}
    history: list[EpochStats] = []
    step = 0
    N = len(dataset.y_train)
    for epoch in range(cfg.epochs):
        lr = cfg.lr_at(epoch)
        fired = 0
        order = rng.permutation(N)
        for start in range(0, N, cfg.batch_size):
            idx = order[start:start + cfg.batch_size]
            _, cache = forward_loss(model, dataset.x_train[idx], dataset.y_train[idx])
            grads = backward(model, cache)
            sgd_momentum_step(params, grads, velocity, lr, cfg.momentum)
            if model.stable and cfg.projection_cadence is ProjectionCadence.PER_STEP:
                fired += _log_projections(projection_log, epoch, step, model.project())
            step += 1
        if model.stable and cfg.projection_cadence is ProjectionCadence.PER_EPOCH:
            fired += _log_projections(projection_log, epoch, step, model.project())

        tr_loss, tr_acc, _ = evaluate(model, dataset.x_train, dataset.y_train)
        te_loss, te_acc, depth = evaluate(model, dataset.x_test, dataset.y_test)
        stats = EpochStats(epoch, tr_loss, tr_acc, te_loss, te_acc, fired, depth, lr)
        if model.stable:
            stats.audit_passed, stats.audit_rho = audit(model, cfg.audit_samples, cfg.audit_sigma_floor, cfg.seed)
        history.append(stats)
        log.info("epoch %d: train %.4f/%.3f test %.4f/%.3f", epoch, tr_loss, tr_acc, te_loss, te_acc)
        if stats_log is not None:
            stats_log.write(stats.to_json() + "\n")
        if on_epoch is not None:
            on_epoch(stats)
        if not np.isfinite(tr_loss):
            log.warning("training loss is not finite at epoch %d; stopping", epoch)
            break
    return history
