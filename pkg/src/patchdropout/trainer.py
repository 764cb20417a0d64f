"""Supervised training with PatchDropout.

SGD with momentum and coupled weight decay, linear warmup then a constant
rate, label-smoothed cross-entropy, early stopping on validation top-1.
Every random choice (batch order, augmentation, keep rates, keep sets) is
keyed on the run seed and the step counter, so identical configs produce
identical logs and checkpoints.
"""

from __future__ import annotations

import csv
import io
import logging
import math
from dataclasses import asdict, dataclass, field, replace

import numpy as np

from . import numerics as nx
from .data import Dataset
from .errors import DivergedLoss
from .model import ModelConfig, ViTParams, dump_checkpoint, embed_images, forward, init_params
from .numerics import Tensor
from .sampler import SamplingSpec, apply_dropout, draw_batch, kept_count, step_rate

log = logging.getLogger(__name__)

_AUG_STREAM = 7


@dataclass(frozen=True)
class TrainConfig:
    model: ModelConfig
    sampling: SamplingSpec = field(default_factory=SamplingSpec)
    epochs: int = 30
    batch_size: int = 32
    base_lr: float = 0.01
    warmup_epochs: int = 2
    momentum: float = 0.9
    weight_decay: float = 1e-4
    label_smoothing: float = 0.1
    seed: int = 0
    early_stop_patience: int = 0  # 0 disables early stopping
    flip: bool = False
    crop_pad: int = 0
    decay_exempt: bool = False
    init_std: float = 0.02
    patch_dropout: bool = True  # False bypasses the sampler entirely

    def __post_init__(self):
        if self.epochs < 1 or self.batch_size < 1:
            raise ValueError("epochs and batch_size must be positive")
        if not 0 <= self.warmup_epochs <= self.epochs:
            raise ValueError("warmup_epochs must lie in [0, epochs]")
        if not 0.0 <= self.label_smoothing < 1.0:
            raise ValueError("label_smoothing must lie in [0, 1)")
        if not 0.0 <= self.momentum < 1.0 or self.base_lr < 0 or self.weight_decay < 0:
            raise ValueError("optimizer settings out of range")
        rows, cols = self.model.grid
        if (self.sampling.grid_rows, self.sampling.grid_cols) != (rows, cols):
            object.__setattr__(self, "sampling", self.sampling.with_grid(rows, cols))

    def to_dict(self) -> dict:
        d = asdict(self)
        d["sampling"]["rate_interval"] = (
            list(self.sampling.rate_interval) if self.sampling.rate_interval is not None else None
        )
        return d


# --------------------------------------------------------------------------
# loss and schedule


def smoothed_targets(labels: np.ndarray, num_classes: int, alpha: float) -> np.ndarray:
    t = np.full((len(labels), num_classes), alpha / num_classes)
    t[np.arange(len(labels)), labels] += 1.0 - alpha
    return t


def smoothed_cross_entropy(logits: Tensor, labels, alpha: float) -> Tensor:
    """Mean over the batch of -sum(target * log_softmax(logits))."""
    labels = np.asarray(labels, dtype=np.int64)
    B, K = logits.shape
    target = Tensor(smoothed_targets(labels, K, alpha))
    return nx.scale(nx.sum_(nx.mul(nx.log_softmax(logits, axis=-1), target)), -1.0 / B)


def target_entropy(num_classes: int, alpha: float) -> float:
    t = smoothed_targets(np.array([0]), num_classes, alpha)[0]
    t = t[t > 0]
    return float(-(t * np.log(t)).sum())


def lr_at(step: int, config: TrainConfig, steps_per_epoch: int) -> float:
    """Linear ramp reaching base_lr on the last warmup step, constant afterwards."""
    warm = config.warmup_epochs * steps_per_epoch
    if warm == 0 or step >= warm:
        return config.base_lr
    return config.base_lr * (step + 1) / warm


# --------------------------------------------------------------------------
# logs


@dataclass
class StepRecord:
    step: int
    epoch: int
    keep_rate: float
    seq_len: int
    loss: float
    lr: float


LOG_COLUMNS = ("epoch", "split", "loss", "top1", "cum_flops", "keep_rate_mean")


@dataclass
class TrainLog:
    rows: list[dict] = field(default_factory=list)
    steps: list[StepRecord] = field(default_factory=list)

    def add(self, epoch, split, loss, top1, cum_flops, keep_rate_mean) -> None:
        self.rows.append(
            dict(epoch=epoch, split=split, loss=loss, top1=top1, cum_flops=cum_flops, keep_rate_mean=keep_rate_mean)
        )

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.DictWriter(buf, fieldnames=LOG_COLUMNS, lineterminator="\n")
        w.writeheader()
        for r in self.rows:
            w.writerow({k: (repr(v) if isinstance(v, float) else v) for k, v in r.items()})
        return buf.getvalue()

    def split_rows(self, split: str) -> list[dict]:
        return [r for r in self.rows if r["split"] == split]


@dataclass
class TrainResult:
    config: TrainConfig
    params: ViTParams  # best-validation parameters
    log: TrainLog
    best_epoch: int
    best_val_top1: float
    cum_flops: int
    epochs_run: int

    def checkpoint(self) -> bytes:
        return dump_checkpoint(self.config.model, self.params)


# --------------------------------------------------------------------------
# data handling


def augment(batch: np.ndarray, config: TrainConfig, step: int) -> np.ndarray:
    """Optional horizontal flip and pad-and-crop, keyed on (seed, step)."""
    if not config.flip and config.crop_pad == 0:
        return batch
    rng = np.random.default_rng([config.seed, step, _AUG_STREAM])
    out = batch.copy()
    n, _, H, W = batch.shape
    if config.flip:
        mask = rng.random(n) < 0.5
        out[mask] = out[mask][..., ::-1]
    if config.crop_pad:
        p = config.crop_pad
        padded = np.pad(out, ((0, 0), (0, 0), (p, p), (p, p)), mode="edge")
        dy = rng.integers(0, 2 * p + 1, n)
        dx = rng.integers(0, 2 * p + 1, n)
        for i in range(n):
            out[i] = padded[i, :, dy[i] : dy[i] + H, dx[i] : dx[i] + W]
    return out


def to_pixels(images_u8: np.ndarray) -> Tensor:
    return Tensor(np.asarray(images_u8, dtype=np.float64) / 255.0)


def copy_params(params: ViTParams) -> ViTParams:
    return {k: Tensor(v.data.copy(), requires_grad=v.requires_grad, name=k) for k, v in params.items()}


def evaluate(
    params: ViTParams,
    cfg: ModelConfig,
    images: np.ndarray,
    labels: np.ndarray,
    eval_keep_rate: float | None = None,
    seed: int = 0,
    batch_size: int = 250,
) -> tuple[float, float, np.ndarray]:
    """(top-1, mean cross-entropy, probabilities) with all tokens unless a rate is given."""
    from .model import predict

    if len(labels) == 0:
        return float("nan"), float("nan"), np.zeros((0, cfg.classes))
    probs = []
    for start in range(0, len(labels), batch_size):
        x = to_pixels(images[start : start + batch_size])
        probs.append(predict(params, x, cfg, eval_keep_rate, seed=seed, offset=start).data)
    p = np.concatenate(probs)
    top1 = float((p.argmax(axis=1) == labels).mean())
    loss = float(-np.log(np.maximum(p[np.arange(len(labels)), labels], 1e-300)).mean())
    return top1, loss, p


# --------------------------------------------------------------------------
# training


def _decays(name: str, exempt: bool) -> bool:
    if not exempt:
        return True
    return not (name in ("cls", "pos") or name.endswith(".bias") or name.endswith(".gain"))


def train(config: TrainConfig, data: Dataset) -> TrainResult:
    cfg = config.model
    train_idx = data.splits["train"]
    if len(train_idx) == 0:
        raise ValueError("training split is empty")
    if data.images.shape[1:] != (cfg.channels, cfg.image_h, cfg.image_w):
        raise ValueError(f"dataset images {data.images.shape[1:]} do not match model input")
    val_x, val_y = data.split("val")

    params = init_params(cfg, seed=config.seed, init_std=config.init_std)
    velocity = {k: np.zeros_like(v.data) for k, v in params.items()}
    decay = {k: _decays(k, config.decay_exempt) for k in params}
    steps_per_epoch = math.ceil(len(train_idx) / config.batch_size)
    N = cfg.num_patches
    spec = config.sampling

    log_ = TrainLog()
    best = (-1.0, 0, copy_params(params))
    cum_flops = 0
    step = 0
    stale = 0
    epochs_run = 0
    for epoch in range(config.epochs):
        order = np.random.default_rng([config.seed, epoch]).permutation(train_idx)
        loss_sum = correct = seen = 0.0
        rate_sum = 0.0
        n_steps = 0
        for start in range(0, len(order), config.batch_size):
            idx = order[start : start + config.batch_size]
            x = to_pixels(augment(data.images[idx], config, step))
            y = data.labels[idx]
            rate = step_rate(spec, step) if config.patch_dropout else 1.0
            with nx.FLOP_METER.measure() as macs:
                tokens = embed_images(params, x, cfg)
                if config.patch_dropout:
                    tokens = apply_dropout(tokens, draw_batch(spec, step, len(idx), rate))
                logits = forward(params, tokens, cfg)
            expected_len = kept_count(rate, N) + 1
            if tokens.seq_len != expected_len:
                raise AssertionError(f"step {step}: sequence length {tokens.seq_len} != {expected_len}")
            cum_flops += macs[0]
            loss = smoothed_cross_entropy(logits, y, config.label_smoothing)
            lval = float(loss.data)
            if not math.isfinite(lval):
                raise DivergedLoss(f"non-finite loss {lval} at epoch {epoch}, step {step}")

            for p in params.values():
                p.grad = None
            loss.backward()
            lr = lr_at(step, config, steps_per_epoch)
            for k, p in params.items():
                g = p.grad
                if decay[k] and config.weight_decay:
                    g = g + config.weight_decay * p.data
                v = config.momentum * velocity[k] + g
                velocity[k] = v
                p.data = p.data - lr * v
                p.grad = None

            log_.steps.append(StepRecord(step, epoch, rate, tokens.seq_len, lval, lr))
            loss_sum += lval * len(idx)
            correct += float((logits.data.argmax(axis=1) == y).sum())
            seen += len(idx)
            rate_sum += rate
            n_steps += 1
            step += 1

        epochs_run = epoch + 1
        log_.add(epoch, "train", loss_sum / seen, correct / seen, cum_flops, rate_sum / n_steps)
        val_top1, val_loss, _ = evaluate(params, cfg, val_x, val_y)
        log_.add(epoch, "val", val_loss, val_top1, cum_flops, 1.0)
        log.debug("epoch %d train_loss %.4f val_top1 %.4f", epoch, loss_sum / seen, val_top1)

        score = val_top1 if not math.isnan(val_top1) else -loss_sum / seen
        if score > best[0]:
            best = (score, epoch, copy_params(params))
            stale = 0
        else:
            stale += 1
        if config.early_stop_patience and stale >= config.early_stop_patience:
            break

    return TrainResult(
        config=config,
        params=best[2],
        log=log_,
        best_epoch=best[1],
        best_val_top1=best[0],
        cum_flops=cum_flops,
        epochs_run=epochs_run,
    )


def with_sampling(config: TrainConfig, **changes) -> TrainConfig:
    return replace(config, sampling=replace(config.sampling, **changes))
