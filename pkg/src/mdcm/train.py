"""Deterministic training loop.

One process, one model, plain SGD with the cosine schedule.  Every random
draw is keyed by (seed, stream, epoch[, index]) so a rerun with the same
config reproduces the loss log and the checkpoints bit for bit, and a
resumed run continues the schedule exactly where the saved run stopped.

Outputs, all written into ``out_dir``:

* ``log.csv``      — one line per epoch: ``epoch,lr,loss_s,loss_con,acc``
                     (lr entering the epoch; epoch-mean loss terms;
                     training accuracy over the epoch's batches).
* ``final.ckpt``   — state after the last epoch.
* ``best.ckpt``    — state after the epoch with the highest ``acc``.
* ``config.txt``   — the fully resolved config; rerunning from this echo
                     reproduces the run.

A NaN loss aborts the run with an error naming the first operation on the
step's tape whose output contained a NaN.
"""

from __future__ import annotations

import os
from dataclasses import dataclass

import numpy as np

from . import checkpoint as ckpt
from . import data as D
from . import optim
from . import tensor as T
from .config import RunConfig, to_text, validate
from .errors import ContractError, NanLossError
from .model import Model, accuracy

LOG_HEADER = "epoch,lr,loss_s,loss_con,acc"

# Seed-stream tags; data synthesis uses 0 (train) and 1 (test), so the
# loop's own streams start above them.
_STREAM_ORDER = 3     # per-epoch batch shuffling
_STREAM_AUGMENT = 4   # per-(epoch, sample) augmentation


def first_nan_op(tape: T.Tape) -> str | None:
    """Name of the first recorded operation with a NaN output, if any."""
    for node in tape.nodes:
        if np.isnan(node.out.data).any():
            return node.op
    return None


def _resize_target(image_size: int) -> int:
    """Pre-crop size: 9/8 of the input side (64 -> 72), at least one more."""
    return max(image_size + 1, (image_size * 9 + 7) // 8)


def train_view(images: np.ndarray, idxs: np.ndarray, cfg: RunConfig,
               seed: int, epoch: int) -> np.ndarray:
    """Training-time view of ``images[idxs]``: resize, random crop, random
    horizontal flip, each sample on its own (seed, epoch, index) stream.
    With augmentation disabled the raw images pass through."""
    if not cfg.train.augment:
        return images[idxs]
    size = cfg.backbone.image_size
    big = _resize_target(size)
    out = []
    for idx in idxs:
        rng = np.random.default_rng(
            np.random.SeedSequence([seed, _STREAM_AUGMENT, epoch, int(idx)]))
        out.append(D.augment(images[int(idx)], train=True, rng=rng,
                             resize_to=big, crop_to=size))
    return np.stack(out)


def eval_view(images: np.ndarray, cfg: RunConfig) -> np.ndarray:
    """Evaluation-time view: the deterministic resize + center crop matching
    the training distribution, or the raw images if augmentation is off."""
    if not cfg.train.augment:
        return images
    size = cfg.backbone.image_size
    big = _resize_target(size)
    return np.stack([D.augment(img, train=False, resize_to=big, crop_to=size)
                     for img in images])


def epoch_order(seed: int, epoch: int, n: int) -> np.ndarray:
    rng = np.random.default_rng(
        np.random.SeedSequence([seed, _STREAM_ORDER, epoch]))
    return rng.permutation(n)


@dataclass
class TrainResult:
    log_rows: list[tuple[int, float, float, float, float]]
    best_epoch: int
    best_acc: float
    log_path: str
    final_path: str
    best_path: str
    model: Model
    state: optim.OptimState


def _format_row(row: tuple[int, float, float, float, float]) -> str:
    epoch, lr, loss_s, loss_con, acc = row
    return f"{epoch},{lr:.12g},{loss_s:.12g},{loss_con:.12g},{acc:.12g}"


def write_log(path: str, rows) -> None:
    with open(path, "w") as fh:
        fh.write(LOG_HEADER + "\n")
        for row in rows:
            fh.write(_format_row(row) + "\n")


def train_step(model: Model, state: optim.OptimState,
               images: np.ndarray, labels: np.ndarray
               ) -> tuple[float, float, float]:
    """One forward/backward/update; returns (loss_s, loss_con, batch_acc)."""
    params = model.named_parameters()
    T.zero_grads(params.values())
    with T.Tape() as tape:
        out = model.forward(images, train=True)
        total, loss_s, loss_con = model.loss(out, labels)
        if np.isnan(total.data).any():
            op = first_nan_op(tape) or "<loss output>"
            raise NanLossError(
                f"NaN loss at step {state.step}; first NaN produced by "
                f"operation '{op}'")
        acc = accuracy(model.primary_logits(out), labels)
        grads = T.backward(total)
    grad_arrays = {name: grads[p].data for name, p in params.items()
                   if p in grads}
    optim.sgd_step(params, grad_arrays, state)
    T.zero_grads(params.values())
    return float(loss_s.data), float(loss_con.data), acc


def run_training(cfg: RunConfig, split: D.SplitData, out_dir: str,
                 resume: str | None = None,
                 stop_after: int | None = None) -> TrainResult:
    """Train per config on ``split``; write log, checkpoints, config echo.

    ``stop_after`` ends the run after that many epochs while keeping the
    full-length schedule, producing a checkpoint a later ``resume`` run can
    continue from (the checkpoint stores the schedule step; velocity is not
    persisted, so a resumed run restarts momentum from zero).
    """
    cfg = validate(cfg)
    os.makedirs(out_dir, exist_ok=True)
    with open(os.path.join(out_dir, "config.txt"), "w") as fh:
        fh.write(to_text(cfg))

    n = split.images.shape[0]
    if n == 0:
        raise ContractError("run_training: empty training split")
    bsz = cfg.train.batch_size
    steps_per_epoch = (n + bsz - 1) // bsz
    total_steps = cfg.train.epochs * steps_per_epoch

    model = Model(cfg)
    params = model.named_parameters()
    state = optim.init_state(params, cfg.optim.lr, total_steps,
                             cfg.optim.momentum)
    start_epoch = 0
    if resume is not None:
        saved_step = ckpt.load_into_model(resume, model)
        if saved_step % steps_per_epoch != 0:
            raise ContractError(
                f"resume: checkpoint step {saved_step} is not an epoch "
                f"boundary for {steps_per_epoch} steps/epoch")
        state.step = saved_step
        start_epoch = saved_step // steps_per_epoch
        if start_epoch > cfg.train.epochs:
            raise ContractError(
                f"resume: checkpoint is at epoch {start_epoch}, beyond the "
                f"configured {cfg.train.epochs}")

    log_rows: list[tuple[int, float, float, float, float]] = []
    best_acc = -1.0
    best_epoch = -1
    log_path = os.path.join(out_dir, "log.csv")
    final_path = os.path.join(out_dir, "final.ckpt")
    best_path = os.path.join(out_dir, "best.ckpt")

    stop_epoch = cfg.train.epochs if stop_after is None \
        else min(cfg.train.epochs, stop_after)
    for epoch in range(start_epoch, stop_epoch):
        lr_epoch = optim.cosine_lr(state.step, total_steps, cfg.optim.lr)
        order = epoch_order(cfg.seed, epoch, n)
        sum_s = sum_con = 0.0
        n_correct = 0.0
        for b0 in range(0, n, bsz):
            idxs = order[b0:b0 + bsz]
            images = train_view(split.images, idxs, cfg, cfg.seed, epoch)
            labels = split.labels[idxs]
            loss_s, loss_con, acc = train_step(model, state, images, labels)
            sum_s += loss_s * len(idxs)
            sum_con += loss_con * len(idxs)
            n_correct += acc * len(idxs)
        row = (epoch, lr_epoch, sum_s / n, sum_con / n, n_correct / n)
        log_rows.append(row)
        write_log(log_path, log_rows)
        if row[4] > best_acc:
            best_acc = row[4]
            best_epoch = epoch
            ckpt.save_model(best_path, model, step=state.step)
        ckpt.save_model(final_path, model, step=state.step)

    if not log_rows:  # resume at the final epoch: nothing left to do
        ckpt.save_model(final_path, model, step=state.step)
    return TrainResult(log_rows=log_rows, best_epoch=best_epoch,
                       best_acc=best_acc, log_path=log_path,
                       final_path=final_path, best_path=best_path,
                       model=model, state=state)


def evaluate_accuracy(model: Model, split: D.SplitData, cfg: RunConfig,
                      batch_size: int = 32) -> float:
    """Top-1 accuracy of the model's primary logits over a split."""
    images = eval_view(split.images, cfg)
    n = images.shape[0]
    correct = 0.0
    for b0 in range(0, n, batch_size):
        out = model.forward(images[b0:b0 + batch_size], train=False)
        logits = model.primary_logits(out)
        correct += accuracy(logits, split.labels[b0:b0 + batch_size]) \
            * (min(b0 + batch_size, n) - b0)
    return correct / n
