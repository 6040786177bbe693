"""Training loop: BCE loss, Adam, cosine learning-rate schedule, flip augmentation."""

from __future__ import annotations

import csv
import dataclasses
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from . import tensor as T
from .checkpoint import Checkpoint, load_checkpoint, save_checkpoint
from .data import Sample
from .errors import ConfigError, DataError, NumericError
from .metrics import EvalReport, evaluate, mean_report
from .network import NetworkConfig, build_params, declare_network, model_forward
from .nn import ParameterStore
from .optim import AdamState, adam_step, cosine_lr
from .tensor import Tensor

logger = logging.getLogger(__name__)

__all__ = ["TrainConfig", "TrainResult", "bce_loss", "hflip", "train", "predict", "evaluate_model",
           "AdamState", "adam_step", "cosine_lr"]

LOG_HEADER = ["epoch", "step", "lr", "loss", "F", "MAE", "E", "S"]


@dataclass(frozen=True)
class TrainConfig:
    epochs: int = 75
    batch_size: int = 4
    lr_start: float = 1e-4
    lr_end: float = 1e-5
    seed: int = 0
    flip_prob: float = 0.5
    image_size: tuple[int, int] = (64, 64)

    def __post_init__(self):
        object.__setattr__(self, "image_size", tuple(int(v) for v in self.image_size))
        if not self.lr_start > self.lr_end > 0:
            raise ConfigError(f"need lr_start > lr_end > 0, got {self.lr_start}, {self.lr_end}")
        if self.batch_size < 1 or self.epochs < 1:
            raise ConfigError("epochs and batch_size must be at least 1")
        if not 0.0 <= self.flip_prob <= 1.0:
            raise ConfigError(f"flip_prob must lie in [0, 1], got {self.flip_prob}")

    def steps_per_epoch(self, n_samples: int) -> int:
        return math.ceil(n_samples / self.batch_size)


def bce_loss(pred: Tensor, gt) -> Tensor:
    """Mean binary cross-entropy with logs clamped at 1e-12."""
    g = np.asarray(gt.data if isinstance(gt, Tensor) else gt, dtype=np.float64)
    if pred.shape != g.shape:
        raise DataError(f"prediction {pred.shape} and ground truth {g.shape} differ in shape")
    if not np.isin(g, (0.0, 1.0)).all():
        raise DataError("ground truth must be binary")
    tiny = 1e-12
    log_p = T.log(T.clip(pred, tiny, 1.0))
    log_q = T.log(T.clip(1.0 - pred, tiny, 1.0))
    gt_t = Tensor(g)
    per_pixel = T.hadamard(gt_t, log_p) + T.hadamard(Tensor(1.0 - g), log_q)
    return -per_pixel.mean()


def hflip(image: np.ndarray, mask: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Mirror image and mask along the width axis."""
    if image.shape[-2:] != mask.shape[-2:]:
        raise DataError(f"image {image.shape} and mask {mask.shape} differ spatially")
    return image[..., ::-1].copy(), mask[..., ::-1].copy()


def predict(image: np.ndarray, cfg: NetworkConfig, params: ParameterStore) -> np.ndarray:
    return model_forward(Tensor(image), cfg, params).numpy()


def evaluate_model(samples: Sequence[Sample], cfg: NetworkConfig, params: ParameterStore) -> list[EvalReport]:
    return [evaluate(predict(s.image, cfg, params), s.mask) for s in samples]


@dataclass
class TrainResult:
    params: ParameterStore
    optimizer: AdamState
    epoch_log: list[dict] = field(default_factory=list)
    step_log: list[tuple[int, float, float]] = field(default_factory=list)  # (step, lr, loss)
    best_epoch: Optional[int] = None


def _fmt(v) -> str:
    return f"{v:.6f}" if isinstance(v, float) else str(v)


def write_log(path, rows: list[dict]) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(LOG_HEADER)
        for row in rows:
            writer.writerow([_fmt(row[k]) for k in LOG_HEADER])


def train(model_cfg: NetworkConfig, train_cfg: TrainConfig, dataset: Sequence[Sample],
          out_dir=None, eval_set: Optional[Sequence[Sample]] = None,
          resume=None, stop_after_epoch: Optional[int] = None) -> TrainResult:
    """Fit the network on ``dataset``.

    ``resume`` is a checkpoint path written by an earlier call with the same
    configs; training continues from the epoch after the one it records.
    ``stop_after_epoch`` ends early without changing the learning-rate
    schedule, which is what makes split runs reproduce an uninterrupted one.
    With ``out_dir`` set, writes ``train_log.csv``, ``final.ckpt`` and
    ``best.ckpt`` (lowest evaluation MAE).
    """
    if not dataset:
        raise DataError("training set is empty")
    if train_cfg.image_size != model_cfg.input_size:
        raise ConfigError(f"train image size {train_cfg.image_size} != network input {model_cfg.input_size}")
    for s in dataset:
        if s.image.shape != (3, *model_cfg.input_size):
            raise DataError(f"sample {s.ident}: image shape {s.image.shape} does not match the network")
    eval_set = dataset if eval_set is None else eval_set
    out = Path(out_dir) if out_dir is not None else None
    if out is not None:
        out.mkdir(parents=True, exist_ok=True)

    chash = model_cfg.config_hash()
    n = len(dataset)
    per_epoch = train_cfg.steps_per_epoch(n)
    total_steps = per_epoch * train_cfg.epochs
    sched_len = max(total_steps - 1, 1)
    rng = np.random.default_rng(train_cfg.seed)

    if resume is not None:
        params = declare_network(model_cfg)
        ckpt: Checkpoint = load_checkpoint(resume, params, expected_hash=chash)
        state = ckpt.optimizer or AdamState()
        if ckpt.rng_state is not None:
            rng.bit_generator.state = ckpt.rng_state
        start_epoch = ckpt.epoch + 1
    else:
        params = build_params(model_cfg, seed=train_cfg.seed)
        state = AdamState()
        start_epoch = 1

    result = TrainResult(params, state)
    best_mae = math.inf
    last_epoch = train_cfg.epochs if stop_after_epoch is None else min(stop_after_epoch, train_cfg.epochs)
    for epoch in range(start_epoch, last_epoch + 1):
        order = rng.permutation(n)
        epoch_losses = []
        lr = train_cfg.lr_start
        for b in range(per_epoch):
            step = state.t
            batch = [dataset[i] for i in order[b * train_cfg.batch_size:(b + 1) * train_cfg.batch_size]]
            flips = rng.random(len(batch)) < train_cfg.flip_prob
            try:
                with T.Tape() as tape:
                    losses = []
                    for sample, flip in zip(batch, flips):
                        img, msk = hflip(sample.image, sample.mask) if flip else (sample.image, sample.mask)
                        losses.append(bce_loss(model_forward(Tensor(img), model_cfg, params), msk))
                    loss = losses[0] if len(losses) == 1 else T.concat(
                        [l.reshape(1) for l in losses], axis=0).mean()
                T.backward(loss, tape)
            except NumericError as exc:
                raise NumericError(f"non-finite value at epoch {epoch}, batch {b}, step {step}: {exc}") from exc
            lr = cosine_lr(min(step, sched_len), sched_len, train_cfg.lr_start, train_cfg.lr_end)
            adam_step(params, state, lr)
            result.params = params
            value = loss.item()
            epoch_losses.append(value)
            result.step_log.append((step, lr, value))
        report = mean_report(evaluate_model(eval_set, model_cfg, params))
        row = {"epoch": epoch, "step": state.t, "lr": lr, "loss": float(np.mean(epoch_losses)),
               "F": report.f_beta, "MAE": report.mae, "E": report.e_measure, "S": report.s_measure}
        result.epoch_log.append(row)
        logger.info("epoch %d step %d lr %.3g loss %.5f MAE %.4f F %.4f", epoch, state.t, lr,
                    row["loss"], report.mae, report.f_beta)
        if out is not None:
            rng_state = rng.bit_generator.state
            if report.mae < best_mae:
                best_mae = report.mae
                result.best_epoch = epoch
                save_checkpoint(out / "best.ckpt", params, chash, state, rng_state, epoch)
            save_checkpoint(out / "final.ckpt", params, chash, state, rng_state, epoch)
            write_log(out / "train_log.csv", result.epoch_log)
        elif report.mae < best_mae:
            best_mae = report.mae
            result.best_epoch = epoch
    return result


def config_from_dict(cls, values: dict):
    """Build a config dataclass, rejecting unknown keys."""
    names = {f.name for f in dataclasses.fields(cls)}
    unknown = sorted(set(values) - names)
    if unknown:
        raise ConfigError(f"unknown {cls.__name__} keys: {', '.join(unknown)}")
    return cls(**values)
