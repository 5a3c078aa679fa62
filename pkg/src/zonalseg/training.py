"""Dice loss, SGD with momentum, the step learning-rate schedule and the training loop."""

from __future__ import annotations

import logging
from dataclasses import asdict, dataclass, field

import numpy as np

from .array_core import Tape, Tensor, _record, as_tensor
from .architectures import forward

log = logging.getLogger(__name__)


class TrainingError(RuntimeError):
    pass


@dataclass
class TrainConfig:
    lr: float = 0.01
    momentum: float = 0.9
    weight_decay: float = 5e-4
    batch_size: int = 4
    epochs: int = 50
    decay_epochs: tuple = (20, 40)
    decay_factor: float = 0.2
    canvas: int = 72
    crop: int = 64
    flip: bool = True
    seed: int = 0
    dtype: str = "float64"
    checkpoint_epochs: tuple = field(default=())

    def __post_init__(self):
        self.decay_epochs = tuple(int(e) for e in self.decay_epochs)
        self.checkpoint_epochs = tuple(int(e) for e in self.checkpoint_epochs)
        if self.lr < 0 or self.momentum < 0 or self.weight_decay < 0:
            raise ValueError("lr, momentum and weight_decay must be non-negative")
        if self.batch_size < 1 or self.epochs < 1:
            raise ValueError("batch_size and epochs must be positive")
        if not 0 < self.decay_factor:
            raise ValueError("decay_factor must be positive")
        if any(b <= a for a, b in zip(self.decay_epochs, self.decay_epochs[1:])):
            raise ValueError(f"decay epochs must be strictly increasing, got {self.decay_epochs}")
        if self.decay_epochs and self.decay_epochs[-1] >= self.epochs:
            raise ValueError(f"decay epochs {self.decay_epochs} must be < epochs ({self.epochs})")
        if self.crop > self.canvas:
            raise ValueError(f"crop {self.crop} larger than canvas {self.canvas}")

    @classmethod
    def full_scale(cls, **overrides):
        base = dict(canvas=288, crop=256, epochs=50, batch_size=4)
        base.update(overrides)
        return cls(**base)

    def to_dict(self):
        d = asdict(self)
        d["decay_epochs"] = list(self.decay_epochs)
        d["checkpoint_epochs"] = list(self.checkpoint_epochs)
        return d


def lr_at(config, epoch):
    """Learning rate in effect during ``epoch`` (0-based)."""
    n_decays = sum(1 for e in config.decay_epochs if e <= epoch)
    return config.lr * config.decay_factor**n_decays


# --------------------------------------------------------------------------
# loss


def dice_loss_value(s, r):
    """Soft Dice loss ``-2 sum(s r) / (sum s + sum r)`` and its gradient.

    Returns ``(loss, dloss/ds)``. Empty prediction with empty truth gives a
    loss of 0 and a zero gradient.
    """
    s = np.asarray(s, dtype=float)
    r = np.asarray(r, dtype=float)
    if s.shape != r.shape:
        raise ValueError(f"dice_loss: prediction shape {s.shape} != truth shape {r.shape}")
    inter = float(np.sum(s * r))
    denom = float(np.sum(s) + np.sum(r))
    if denom == 0.0:
        return 0.0, np.zeros_like(s)
    loss = -2.0 * inter / denom
    grad = -2.0 * r / denom + 2.0 * inter / denom**2
    return loss, grad


def dice_loss(pred, truth):
    """Batch Dice loss: mean over samples of the per-sample soft Dice loss.

    ``pred`` is a Tensor (batch, ...) of probabilities, ``truth`` a boolean or
    0/1 array of the same shape.
    """
    p = as_tensor(pred)
    truth = np.asarray(truth)
    if p.shape != truth.shape:
        raise ValueError(f"dice_loss: prediction shape {p.shape} != truth shape {truth.shape}")
    n = p.shape[0]
    losses, grads = [], []
    for i in range(n):
        loss_i, g_i = dice_loss_value(p.data[i], truth[i])
        losses.append(loss_i)
        grads.append(g_i)
    result = Tensor(np.asarray(np.mean(losses), dtype=p.data.dtype))
    grad = np.stack(grads).astype(p.data.dtype) / n

    def backward(g):
        return (g * grad,)

    return _record("dice_loss", result, (p,), backward)


# --------------------------------------------------------------------------
# optimizer


@dataclass
class OptimizerState:
    velocity: dict
    epoch: int = 0
    lr: float = 0.01

    @classmethod
    def fresh(cls, weights, lr=0.01):
        return cls({k: np.zeros_like(t.data) for k, t in weights.items()}, 0, lr)


def sgd_step(state, weights, grads, lr, momentum=0.9, weight_decay=5e-4):
    """One momentum SGD update, in place.

    ``v <- momentum * v + (g + weight_decay * w)`` then ``w <- w - lr * v``.
    ``weights`` maps names to Tensors, ``grads`` maps names to arrays (a
    missing gradient counts as zero).
    """
    for name, w in weights.items():
        g = grads.get(name)
        if g is None:
            g = np.zeros_like(w.data)
        if not np.all(np.isfinite(g)):
            raise TrainingError(f"non-finite gradient for weight {name!r}")
        v = state.velocity[name]
        v *= momentum
        v += g
        if weight_decay:
            v += weight_decay * w.data
        w.data -= lr * v
    state.lr = lr
    return weights


# --------------------------------------------------------------------------
# augmentation


def center_crop(arr, size):
    h, w = arr.shape[-2:]
    if size > h or size > w:
        raise ValueError(f"crop {size} larger than canvas {h}x{w}")
    top, left = (h - size) // 2, (w - size) // 2
    return arr[..., top : top + size, left : left + size]


def augment(image, wg, cg, crop, rng, flip=True):
    """Random crop of size ``crop`` plus a horizontal flip with probability 0.5.

    The same offset and flip are applied to the image and both masks.
    Returns ``(image, wg, cg, (top, left, flipped))``.
    """
    h, w = image.shape
    if crop > h or crop > w:
        raise ValueError(f"crop {crop} larger than canvas {h}x{w}")
    top = int(rng.integers(0, h - crop + 1))
    left = int(rng.integers(0, w - crop + 1))
    flipped = bool(rng.random() < 0.5) if flip else False
    out = []
    for a in (image, wg, cg):
        a = a[top : top + crop, left : left + crop]
        if flipped:
            a = a[:, ::-1]
        out.append(np.ascontiguousarray(a))
    return out[0], out[1], out[2], (top, left, flipped)


# --------------------------------------------------------------------------
# training loop


@dataclass
class TrainResult:
    state: object
    losses: list
    lrs: list


def _training_arrays(slices):
    images, wgs, cgs = [], [], []
    for s in slices:
        if not s.wg_mask.any() or not s.cg_mask.any():
            continue
        images.append(np.where(s.wg_mask, s.image, 0.0))
        wgs.append(s.wg_mask)
        cgs.append(s.cg_mask)
    return images, wgs, cgs


def train(state, slices, config, on_epoch=None):
    """Train ``state`` in place on ``slices`` (canvas-sized SliceRecords).

    Slices with an empty gland or empty central gland are skipped. Returns a
    :class:`TrainResult` with the mean batch loss of every epoch.
    ``on_epoch(epoch, loss, lr, state)`` is called after each epoch; if it
    returns a true value training stops early.
    """
    images, wgs, cgs = _training_arrays(slices)
    if not images:
        raise TrainingError("empty training split")
    dtype = np.dtype(config.dtype)
    for t in state.weights.values():
        if t.data.dtype != dtype:
            t.data = t.data.astype(dtype)
        t.requires_grad = True
    rng = np.random.default_rng(config.seed)
    opt = OptimizerState.fresh(state.weights, config.lr)
    losses, lrs = [], []
    n = len(images)
    for epoch in range(config.epochs):
        lr = lr_at(config, epoch)
        opt.epoch = epoch
        order = rng.permutation(n)
        batch_losses = []
        for start in range(0, n, config.batch_size):
            idx = order[start : start + config.batch_size]
            xs, ys = [], []
            for i in idx:
                img, _, cg, _ = augment(images[i], wgs[i], cgs[i], config.crop, rng, config.flip)
                xs.append(img)
                ys.append(cg)
            x = np.stack(xs)[:, None].astype(dtype)
            y = np.stack(ys)[:, None]
            for t in state.weights.values():
                t.zero_grad()
            with Tape() as tape:
                loss = dice_loss(forward(state, x), y)
            tape.backward(loss)
            tape.clear()
            grads = {k: t.grad for k, t in state.weights.items() if t.grad is not None}
            sgd_step(opt, state.weights, grads, lr, config.momentum, config.weight_decay)
            batch_losses.append(float(loss.data))
        epoch_loss = float(np.mean(batch_losses))
        if not np.isfinite(epoch_loss):
            raise TrainingError(f"non-finite loss at epoch {epoch}")
        losses.append(epoch_loss)
        lrs.append(lr)
        log.debug("epoch %d loss %.6f lr %g", epoch, epoch_loss, lr)
        if on_epoch is not None and on_epoch(epoch, epoch_loss, lr, state):
            break
    for t in state.weights.values():
        t.zero_grad()
    return TrainResult(state, losses, lrs)


def predict(state, images, batch_size=8):
    """Probability maps for a stack of (H, W) images, without recording."""
    images = np.asarray(images)
    dtype = next(iter(state.weights.values())).data.dtype
    out = []
    for start in range(0, len(images), batch_size):
        x = images[start : start + batch_size][:, None].astype(dtype)
        out.append(forward(state, x).data[:, 0])
    return np.concatenate(out) if out else np.zeros((0,) + images.shape[1:])
