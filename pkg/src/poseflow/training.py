"""Maximum-likelihood training with Adam and validation early stopping."""
from __future__ import annotations

import json
import logging
import math
from dataclasses import asdict, dataclass, field, fields

import numpy as np

from . import data as pdata
from .errors import ConfigError, DivergedError, ShapeError
from .flow import FlowModel, log_prob, loss_and_grads
from .nncore import AdamState, adam_step
from .rotation import AugmentParams

log = logging.getLogger(__name__)

# Independent random streams derived from the run seed.
_INIT, _SPLIT, _SHUFFLE, _AUGMENT = 0, 1, 2, 3


@dataclass
class TrainConfig:
    batch_size: int = 256
    max_epochs: int = 200
    patience: int = 10
    validation_fraction: float = 0.1
    augment: AugmentParams = field(default_factory=AugmentParams)
    use_augmentation: bool = True
    lr: float = 1e-4
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    seed: int = 0
    n_layers: int = 12
    hidden: tuple[int, ...] = (256, 256, 256, 256)
    dtype: str = "float64"
    checkpoint_path: str | None = None

    def __post_init__(self):
        if isinstance(self.augment, dict):
            _strict(self.augment, {"k", "sigma"}, "augment")
            self.augment = AugmentParams(**self.augment)
        self.hidden = tuple(int(h) for h in self.hidden)
        if self.patience < 1:
            raise ConfigError("patience must be at least 1")
        if not 0.0 < self.validation_fraction < 1.0:
            raise ConfigError("validation_fraction must lie in (0, 1)")
        if self.batch_size < 1 or self.max_epochs < 0 or self.n_layers < 1:
            raise ConfigError("batch_size, max_epochs and n_layers must be positive")
        if self.dtype not in ("float32", "float64"):
            raise ConfigError(f"dtype must be float32 or float64, got {self.dtype!r}")

    @classmethod
    def from_dict(cls, d: dict) -> TrainConfig:
        _strict(d, {f.name for f in fields(cls)}, "train config")
        return cls(**d)

    @classmethod
    def load(cls, path) -> TrainConfig:
        with open(path) as f:
            return cls.from_dict(json.load(f))

    def to_dict(self) -> dict:
        d = asdict(self)
        d["hidden"] = list(self.hidden)
        return d

    @property
    def active_augment(self) -> AugmentParams | None:
        return self.augment if self.use_augmentation else None


def _strict(d, allowed, what):
    if not isinstance(d, dict):
        raise ConfigError(f"{what} must be a JSON object")
    unknown = set(d) - set(allowed)
    if unknown:
        raise ConfigError(f"unknown keys in {what}: {sorted(unknown)}")


@dataclass
class TrainReport:
    """Losses are mean negative log-density in nats per pose."""

    initial_val_loss: float
    train_losses: list[float] = field(default_factory=list)
    val_losses: list[float] = field(default_factory=list)
    best_epoch: int = 0
    best_val_loss: float = math.inf
    stop_reason: str = "max_epochs"

    def to_dict(self) -> dict:
        return asdict(self)

    def save(self, path):
        with open(path, "w") as f:
            json.dump(self.to_dict(), f, indent=2)


def evaluate_validation(model: FlowModel, validation, batch_size: int = 2048) -> float:
    """Mean negative log-density (nats per pose); no augmentation."""
    x = validation.poses if isinstance(validation, pdata.PoseDataset) else np.asarray(validation)
    total = 0.0
    for start in range(0, x.shape[0], batch_size):
        lp = log_prob(model, x[start:start + batch_size].astype(np.float64)).log_prob
        total -= float(np.sum(lp))
    return total / x.shape[0]


def split_any(ds, validation_fraction, seed):
    """:func:`data.split` for datasets, the same shuffle-then-cut for bare arrays."""
    if isinstance(ds, pdata.PoseDataset):
        return pdata.split(ds, validation_fraction, seed)
    x = np.asarray(ds)
    n = x.shape[0]
    n_val = int(round(n * validation_fraction))
    if n_val == 0 or n_val == n:
        raise ValueError(f"split of {n} rows at {validation_fraction} leaves an empty side")
    perm = np.random.default_rng([seed, 1]).permutation(n)
    return x[np.sort(perm[n_val:])], x[np.sort(perm[:n_val])]


def new_model(dim: int, cfg: TrainConfig) -> FlowModel:
    return FlowModel.create(dim, cfg.n_layers, cfg.hidden, seed=[cfg.seed, _INIT], dtype=cfg.dtype)


def train(ds, cfg: TrainConfig, split_seed: int | None = None):
    """Fit a flow to ``ds`` (a :class:`PoseDataset` or an ``(n, d)`` array).

    Returns ``(Checkpoint, TrainReport)``; the checkpoint holds the epoch
    with the lowest validation loss.  A non-finite loss or gradient ends
    training with ``stop_reason="divergence"`` and the best parameters so
    far.  ``split_seed`` defaults to ``cfg.seed``.
    """
    if len(ds) == 0:
        raise ValueError("empty dataset")
    dim = ds.dim if isinstance(ds, pdata.PoseDataset) else np.asarray(ds).shape[1]
    augment = cfg.active_augment
    if augment is not None and not isinstance(ds, pdata.PoseDataset):
        raise ShapeError("augmentation needs a PoseDataset of 6D rotations")
    seed = cfg.seed if split_seed is None else split_seed
    train_set, val_set = split_any(ds, cfg.validation_fraction, seed)

    model = new_model(dim, cfg)
    params = model.params()
    state = AdamState(cfg.lr, cfg.beta1, cfg.beta2, cfg.eps)

    report = TrainReport(evaluate_validation(model, val_set))
    report.best_val_loss = report.initial_val_loss
    best = [p.copy() for p in params]
    bad_epochs = 0
    log.info("epoch 0 val_nll %.6f", report.initial_val_loss)

    def checkpoint():
        out = model.copy()
        for dst, src in zip(out.params(), best):
            dst[...] = src
        meta = {
            "epoch": report.best_epoch,
            "val_loss": report.best_val_loss,
            "seed": cfg.seed,
            "augment": None if augment is None else asdict(augment),
            "config": cfg.to_dict(),
        }
        return pdata.Checkpoint(out, meta)

    for epoch in range(1, cfg.max_epochs + 1):
        shuffle_rng = np.random.default_rng([cfg.seed, _SHUFFLE, epoch])
        aug_rng = np.random.default_rng([cfg.seed, _AUGMENT, epoch])
        try:
            total, count = 0.0, 0
            for batch in _epoch_batches(train_set, cfg.batch_size, shuffle_rng, augment, aug_rng):
                loss, grads = loss_and_grads(model, batch)
                adam_step(params, grads, state)
                total += loss * batch.shape[0]
                count += batch.shape[0]
            train_loss = total / count
            val_loss = evaluate_validation(model, val_set)
            if not (math.isfinite(train_loss) and math.isfinite(val_loss)):
                raise DivergedError()
        except DivergedError:
            log.warning("epoch %d diverged; keeping epoch %d", epoch, report.best_epoch)
            report.stop_reason = "divergence"
            break
        report.train_losses.append(train_loss)
        report.val_losses.append(val_loss)
        log.info("epoch %d train_nll %.6f val_nll %.6f", epoch, train_loss, val_loss)
        if val_loss < report.best_val_loss:
            report.best_val_loss = val_loss
            report.best_epoch = epoch
            best = [p.copy() for p in params]
            bad_epochs = 0
            if cfg.checkpoint_path:
                pdata.save_checkpoint(checkpoint(), cfg.checkpoint_path)
        else:
            bad_epochs += 1
            if bad_epochs >= cfg.patience:
                report.stop_reason = "patience"
                break

    ckpt = checkpoint()
    if cfg.checkpoint_path:
        pdata.save_checkpoint(ckpt, cfg.checkpoint_path)
    return ckpt, report


def _epoch_batches(train_set, batch_size, shuffle_rng, augment, aug_rng):
    # Shuffle and augmentation draw from separate streams so that switching
    # augmentation off leaves the batch order unchanged.
    if isinstance(train_set, pdata.PoseDataset):
        order = shuffle_rng.permutation(len(train_set))
        for b in pdata.batches(train_set.subset(order), batch_size, augment, aug_rng, shuffle=False):
            yield b
    else:
        x = np.asarray(train_set)
        order = shuffle_rng.permutation(x.shape[0])
        for start in range(0, x.shape[0], batch_size):
            yield x[order[start:start + batch_size]].astype(np.float64)
