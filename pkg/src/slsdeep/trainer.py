"""Adam with poly learning-rate decay and separate encoder/decoder base rates."""

from __future__ import annotations

import json
import logging
import math
import warnings
from collections import OrderedDict
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path
from typing import Callable, Optional, Sequence

import numpy as np

from . import data as data_mod
from .checkpoint import Checkpoint, load_checkpoint, save_checkpoint
from .loss import LossConfig, total_loss
from .metrics import MetricsReport, binarize, evaluate_dataset
from .network import Model, NetworkConfig, build
from .tensor import Tape, Tensor

logger = logging.getLogger(__name__)


class NonFiniteError(FloatingPointError):
    pass


@dataclass
class TrainConfig:
    base_lr_encoder: float = 0.001
    base_lr_decoder: float = 0.01
    poly_power: float = 0.9
    epochs: int = 100
    batch_size: int = 16
    adam_beta1: float = 0.9
    adam_beta2: float = 0.999
    adam_eps: float = 1e-8
    seed: int = 0
    shuffle: bool = True
    checkpoint_every: int = 0
    loss: LossConfig = field(default_factory=LossConfig)

    def __post_init__(self):
        if isinstance(self.loss, dict):
            self.loss = LossConfig.from_dict(self.loss)
        if self.base_lr_encoder <= 0 or self.base_lr_decoder <= 0:
            raise ValueError("base learning rates must be positive")
        if not (0 <= self.adam_beta1 < 1 and 0 <= self.adam_beta2 < 1):
            raise ValueError("Adam betas must lie in [0, 1)")
        if self.epochs < 1 or self.batch_size < 1:
            raise ValueError("epochs and batch_size must be >= 1")

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        known = {f.name for f in fields(cls)}
        return cls(**{k: v for k, v in d.items() if k in known})


def poly_lr(base_lr: float, it: int, max_iter: int, power: float = 0.9) -> float:
    """``base_lr * (1 - it / max_iter) ** power``; iterations past the end give 0."""
    if max_iter <= 0:
        raise ValueError(f"max_iter must be positive, got {max_iter}")
    if it < 0:
        raise ValueError(f"iteration must be non-negative, got {it}")
    if it > max_iter:
        warnings.warn(f"iteration {it} beyond max_iter {max_iter}; learning rate clamped to 0", stacklevel=2)
        return 0.0
    return base_lr * (1.0 - it / max_iter) ** power


def group_lrs(config: TrainConfig, it: int, max_iter: int) -> dict:
    factor = poly_lr(1.0, it, max_iter, config.poly_power)
    return {"encoder": config.base_lr_encoder * factor, "decoder": config.base_lr_decoder * factor}


class Adam:
    """Bias-corrected Adam over named parameter groups, each with its own learning rate."""

    def __init__(self, groups: dict, beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8):
        self.groups = groups
        self.beta1, self.beta2, self.eps = beta1, beta2, eps
        self.m: "OrderedDict[str, np.ndarray]" = OrderedDict()
        self.v: "OrderedDict[str, np.ndarray]" = OrderedDict()
        for params in groups.values():
            for name, p in params.items():
                self.m[name] = np.zeros_like(p.data)
                self.v[name] = np.zeros_like(p.data)
        self.t = 0

    def step(self, lrs: dict) -> None:
        for params in self.groups.values():
            for name, p in params.items():
                if p.grad is not None and not np.all(np.isfinite(p.grad)):
                    raise NonFiniteError(f"non-finite gradient in parameter {name!r}; step aborted")
        self.t += 1
        c1 = 1.0 - self.beta1 ** self.t
        c2 = 1.0 - self.beta2 ** self.t
        for group, params in self.groups.items():
            lr = lrs[group]
            if lr < 0:
                raise ValueError(f"learning rate for {group} must be >= 0, got {lr}")
            for name, p in params.items():
                g = p.grad if p.grad is not None else np.zeros_like(p.data)
                m, v = self.m[name], self.v[name]
                m *= self.beta1
                m += (1 - self.beta1) * g
                v *= self.beta2
                v += (1 - self.beta2) * g * g
                dt = p.data.dtype
                update = (m / dt.type(c1)) / (np.sqrt(v / dt.type(c2)) + dt.type(self.eps))
                p.data -= dt.type(lr) * update

    def load(self, m: dict, v: dict, t: int) -> None:
        for name in self.m:
            if name not in m or name not in v:
                raise ValueError(f"optimizer state lacks moments for {name!r}")
            self.m[name][...] = m[name]
            self.v[name][...] = v[name]
        self.t = int(t)


# --------------------------------------------------------------------------
# Training loop


@dataclass
class TrainResult:
    log: list
    validation: list
    final_checkpoint: Optional[Path] = None
    best_checkpoint: Optional[Path] = None
    best_jac: Optional[float] = None


def log_line(record: dict) -> str:
    return json.dumps(record, separators=(",", ":"))


def make_checkpoint(model: Model, adam: Adam, step: int, epoch: int, config: TrainConfig,
                    extra: Optional[dict] = None) -> Checkpoint:
    meta = {"train_config": config.to_dict(), "dropout_seed": model.dropout_seed}
    meta.update(extra or {})
    return Checkpoint(model.config.to_dict(), OrderedDict((k, v.copy()) for k, v in model.state_dict().items()),
                      OrderedDict((k, v.copy()) for k, v in adam.m.items()),
                      OrderedDict((k, v.copy()) for k, v in adam.v.items()),
                      adam.t, step, epoch, meta)


def model_from_checkpoint(ckpt: Checkpoint, config: Optional[NetworkConfig] = None) -> Model:
    """Rebuild a network and load the checkpoint's tensors into it.

    With ``config`` given, the checkpoint must match that architecture; the
    first mismatched tensor is named in the error.
    """
    config = config or NetworkConfig.from_dict(ckpt.network_config)
    model = build(config, dropout_seed=ckpt.meta.get("dropout_seed", 0))
    model.load_state_dict(ckpt.model_state)
    return model


def predict_masks(model: Model, dataset, batch_size: int = 4) -> list:
    masks = []
    for images, _, _ in data_mod.batches(dataset, batch_size):
        probs = model.forward(Tensor(images), training=False)
        masks.extend(binarize(probs)[:, 0])
    return masks


def validate(model: Model, dataset, batch_size: int = 4) -> MetricsReport:
    preds = predict_masks(model, dataset, batch_size)
    gts = [dataset.load(i).mask[0, 0] for i in range(len(dataset))]
    names = [dataset.name(i) for i in range(len(dataset))]
    return evaluate_dataset(list(zip(preds, gts)), names)


def train(model: Model, dataset, config: TrainConfig, val_dataset=None,
          augment_config: Optional[data_mod.AugmentConfig] = None, out_dir=None,
          resume=None, callbacks: Sequence[Callable[[dict], None]] = (),
          max_iters: Optional[int] = None) -> TrainResult:
    """Run the optimisation loop.

    Per iteration: train-mode forward, combined loss, backward, poly-decayed
    group learning rates, Adam step. ``resume`` is a checkpoint path or
    :class:`Checkpoint`; training continues at the following iteration with
    identical results to an uninterrupted run. ``max_iters`` stops early
    without changing the schedule length.
    """
    bpe = data_mod.num_batches(len(dataset), config.batch_size)
    if bpe == 0:
        raise ValueError("training dataset is empty")
    total_iters = config.epochs * bpe
    stop = total_iters if max_iters is None else min(total_iters, max_iters)
    adam = Adam(model.groups(), config.adam_beta1, config.adam_beta2, config.adam_eps)
    start = 0
    best_jac = None
    if resume is not None:
        ckpt = load_checkpoint(resume) if not isinstance(resume, Checkpoint) else resume
        model.load_state_dict(ckpt.model_state)
        adam.load(ckpt.adam_m, ckpt.adam_v, ckpt.adam_t)
        start = ckpt.step
        best_jac = ckpt.meta.get("best_jac")

    out_dir = Path(out_dir) if out_dir is not None else None
    log_fh = val_fh = None
    if out_dir is not None:
        (out_dir / "checkpoints").mkdir(parents=True, exist_ok=True)
        mode = "a" if resume is not None else "w"
        log_fh = (out_dir / "train_log.jsonl").open(mode, encoding="utf-8")
        val_fh = (out_dir / "val_log.jsonl").open(mode, encoding="utf-8")

    result = TrainResult([], [])
    last_good: Optional[Path] = None
    shuffle_seed = config.seed if config.shuffle else None
    stream = None
    try:
        for k in range(start, stop):
            epoch, b = divmod(k, bpe)
            if stream is None or b == 0:
                stream = data_mod.batches(dataset, config.batch_size, shuffle_seed, augment_config, epoch,
                                          start_batch=b)
            images, masks, _ = next(stream)
            lrs = group_lrs(config, k, total_iters)
            model.zero_grad()
            with Tape() as tape:
                probs = model.forward(Tensor(images), training=True, step=k)
                losses = total_loss(probs, masks, config.loss)
            if not math.isfinite(losses.l_total):
                raise NonFiniteError(
                    f"non-finite loss at iteration {k + 1}; last good checkpoint: {last_good or 'none'}"
                )
            tape.backward(losses.total)
            adam.step(lrs)
            record = {"iter": k + 1, "lr_enc": lrs["encoder"], "lr_dec": lrs["decoder"],
                      "l_log": losses.l_log, "l_epe": losses.l_epe, "l_total": losses.l_total}
            result.log.append(record)
            if log_fh:
                log_fh.write(log_line(record) + "\n")
            for cb in callbacks:
                cb(record)

            epoch_done = b == bpe - 1
            if epoch_done and val_dataset is not None:
                report = validate(model, val_dataset)
                vrec = {"epoch": epoch + 1, "iter": k + 1, **report.scores()}
                result.validation.append(vrec)
                if val_fh:
                    val_fh.write(log_line(vrec) + "\n")
                if best_jac is None or report.jac > best_jac:
                    best_jac = report.jac
                    if out_dir is not None:
                        result.best_checkpoint = save_checkpoint(
                            out_dir / "checkpoints" / "best.ckpt",
                            make_checkpoint(model, adam, k + 1, epoch + 1 if epoch_done else epoch, config,
                                            {"best_jac": best_jac}))
            if out_dir is not None:
                due = config.checkpoint_every and (k + 1) % config.checkpoint_every == 0
                if due or k + 1 == stop:
                    ckpt = make_checkpoint(model, adam, k + 1, epoch + 1 if epoch_done else epoch, config,
                                           {"best_jac": best_jac})
                    name = "final.ckpt" if k + 1 == stop else f"iter_{k + 1:06d}.ckpt"
                    last_good = save_checkpoint(out_dir / "checkpoints" / name, ckpt)
                    if k + 1 == stop:
                        result.final_checkpoint = last_good
    finally:
        for fh in (log_fh, val_fh):
            if fh:
                fh.close()
    result.best_jac = best_jac
    return result
