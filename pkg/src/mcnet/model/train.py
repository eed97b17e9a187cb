"""Training loop: forward, loss, backward, Adam."""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass

import numpy as np

from mcnet.data.dataset import Batch, batch_iterator
from mcnet.engine import ops
from mcnet.engine.optim import AdamConfig, adam_step
from mcnet.engine.tensor import Tape, no_grad
from mcnet.errors import NonFiniteLossError
from mcnet.model.graph import ModelGraph

log = logging.getLogger(__name__)


def loss_kind_for(model: ModelGraph) -> str:
    return "bce" if model.config.n_classes == 1 else "cce"


def targets_for(model: ModelGraph, masks: np.ndarray) -> np.ndarray:
    dtype = model.config.np_dtype
    if model.config.n_classes == 1:
        return (np.asarray(masks) > 0).astype(dtype)[:, None]
    return ops.one_hot(masks, model.config.n_classes, dtype)


def batch_loss(model: ModelGraph, batch: Batch, loss_kind=None, mode="train"):
    loss_kind = loss_kind or loss_kind_for(model)
    pred = model.forward(batch.images, mode)
    truth = targets_for(model, batch.masks)
    fn = ops.bce_loss if loss_kind == "bce" else ops.cce_loss
    return fn(pred, truth)


def train_epoch(model: ModelGraph, batches, loss_kind=None, optimizer_cfg=None) -> list[float]:
    """One pass over ``batches``; returns the loss of every batch in order.

    Raises :class:`NonFiniteLossError` before touching the parameters if a
    batch produces a NaN/Inf loss.
    """
    opt = optimizer_cfg or AdamConfig()
    params = model.parameters()
    losses = []
    for i, batch in enumerate(batches):
        model.zero_grad()
        with Tape() as tape:
            loss = batch_loss(model, batch, loss_kind, "train")
        value = loss.item()
        if not math.isfinite(value):
            raise NonFiniteLossError(i, value)
        tape.backward(loss)
        adam_step(params, opt.lr, opt.beta1, opt.beta2, opt.eps)
        losses.append(value)
    model.zero_grad()
    return losses


def evaluate_loss(model: ModelGraph, samples, batch_size=4, loss_kind=None) -> float:
    """Mean per-sample loss in eval mode (running normalisation statistics)."""
    total, count = 0.0, 0
    with no_grad():
        for batch in batch_iterator(samples, batch_size, shuffle=False):
            loss = batch_loss(model, batch, loss_kind, "eval").item()
            total += loss * len(batch.ids)
            count += len(batch.ids)
    return total / count


@dataclass
class EpochRecord:
    epoch: int
    train_loss: float
    test_loss: float | None


def fit(model: ModelGraph, train_samples, epochs: int, batch_size=4, optimizer_cfg=None,
        seed=0, test_samples=None, on_epoch=None, stop_when=None) -> list[EpochRecord]:
    """Train for up to ``epochs`` epochs.

    ``train_loss`` is the sample-weighted mean of the epoch's batch losses;
    ``test_loss`` is an eval-mode pass over ``test_samples`` (if given).
    ``stop_when(model, record)`` returning true ends training early.
    """
    history = []
    for epoch in range(1, epochs + 1):
        batches = list(batch_iterator(train_samples, batch_size, seed=seed, epoch=epoch))
        losses = train_epoch(model, batches, optimizer_cfg=optimizer_cfg)
        sizes = [len(b.ids) for b in batches]
        train_loss = float(np.dot(losses, sizes) / sum(sizes))
        test_loss = evaluate_loss(model, test_samples, batch_size) if test_samples else None
        rec = EpochRecord(epoch, train_loss, test_loss)
        history.append(rec)
        log.info("epoch %d train %.6f test %s", epoch, train_loss, test_loss)
        if on_epoch is not None:
            on_epoch(rec)
        if stop_when is not None and stop_when(model, rec):
            break
    return history
