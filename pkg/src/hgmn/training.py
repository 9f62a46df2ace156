"""Full-batch training, evaluation and finite-difference gradient checking."""
from __future__ import annotations

import copy
import logging
from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from .checkpoint import Checkpoint
from .config import ModelConfig
from .errors import ContractError, NonFiniteError, TrainingDiverged
from .hetgraph import HeteroGraph
from .model import HgmnModel, Prepared, forward, loss_and_metrics, prepare
from .tensor import AdamState, adam_step, backward

log = logging.getLogger(__name__)


@dataclass
class EpochRow:
    epoch: int
    train_loss: float
    val_acc: float
    val_micro_f1: float
    val_macro_f1: float


@dataclass
class TrainState:
    adam: AdamState
    epoch: int = 0
    best_metric: float = -np.inf
    best_epoch: int = -1
    best_params: dict[str, np.ndarray] | None = None
    best_adam: AdamState | None = None
    history: list[EpochRow] = field(default_factory=list)
    rng_state: dict | None = None


def _splits(g: HeteroGraph, splits=None) -> dict[str, np.ndarray]:
    splits = g.splits if splits is None else {k: np.asarray(v, dtype=np.int64) for k, v in splits.items()}
    for part in ("train", "val"):
        if part not in splits or not len(splits[part]):
            raise ContractError(f"split {part!r} is missing or empty")
    names = list(splits)
    for i, a in enumerate(names):
        for b in names[i + 1:]:
            if np.intersect1d(splits[a], splits[b]).size:
                raise ContractError(f"splits {a!r} and {b!r} overlap")
    return splits


def _worst_gradient(model: HgmnModel) -> str | None:
    worst, worst_norm = None, -1.0
    for p in model.parameters():
        if p.grad is None:
            continue
        norm = float(np.linalg.norm(p.grad)) if np.isfinite(p.grad).all() else np.inf
        if norm > worst_norm:
            worst, worst_norm = p.name, norm
    return worst


def make_checkpoint(model: HgmnModel, state: TrainState, best: bool = False) -> Checkpoint:
    if best and state.best_params is not None:
        params, adam = state.best_params, state.best_adam
    else:
        params, adam = {k: p.data for k, p in model.named_parameters().items()}, state.adam
    meta = {"epoch": state.epoch, "best_epoch": state.best_epoch,
            "best_val_macro_f1": None if state.best_epoch < 0 else state.best_metric,
            "num_classes": model.num_classes, "node_types": model.type_names,
            "metapaths": model.schema_names}
    return Checkpoint(model.cfg, dict(params), adam, meta, state.rng_state)


def restore(model: HgmnModel, ckpt: Checkpoint) -> None:
    named = model.named_parameters()
    if set(named) != set(ckpt.params):
        missing = sorted(set(named) ^ set(ckpt.params))
        raise ContractError(f"checkpoint parameters do not match the model: {missing[:5]}")
    for k, arr in ckpt.params.items():
        if named[k].shape != arr.shape:
            raise ContractError(f"parameter {k!r}: checkpoint shape {arr.shape}, model {named[k].shape}")
        named[k].data = arr.copy()


def resume_state(model: HgmnModel, last: Checkpoint, best: Checkpoint | None = None) -> TrainState:
    """Rebuild the training state saved by :func:`make_checkpoint`."""
    restore(model, last)
    meta = last.meta
    state = TrainState(adam=copy.deepcopy(last.adam), epoch=meta["epoch"],
                       best_epoch=meta["best_epoch"], rng_state=last.rng_state)
    if meta.get("best_val_macro_f1") is not None:
        state.best_metric = meta["best_val_macro_f1"]
    if best is not None:
        state.best_params = {k: v.copy() for k, v in best.params.items()}
        state.best_adam = copy.deepcopy(best.adam)
    return state


def train(model: HgmnModel, g: HeteroGraph, cfg: ModelConfig | None = None,
          splits=None, prep: Prepared | None = None, state: TrainState | None = None,
          on_epoch: Callable[[EpochRow], None] | None = None) -> TrainState:
    """Run full-batch AdamW until ``cfg.num_epochs``; keeps the best-validation parameters.

    Row ``e`` reports the train loss and validation metrics of the parameters
    *before* update ``e``; those are the parameters kept when the row is best.
    """
    cfg = cfg or model.cfg
    splits = _splits(g, splits)
    prep = prep or prepare(g, cfg)
    params = model.parameters()
    if state is None:
        state = TrainState(adam=AdamState(lr=cfg.learning_rate, weight_decay=cfg.weight_decay),
                           rng_state=model.rng_state)
    train_ids, val_ids = splits["train"], splits["val"]
    for epoch in range(state.epoch, cfg.num_epochs):
        model.zero_grad()
        try:
            logits = forward(model, g, prep)
            loss, train_m = loss_and_metrics(logits, g.labels, train_ids)
            backward(loss)
            for p in params:
                if not np.isfinite(p.grad).all():
                    raise NonFiniteError(f"non-finite gradient in {p.name}")
        except NonFiniteError as exc:
            worst = _worst_gradient(model)
            raise TrainingDiverged(f"epoch {epoch + 1}: {exc}; largest gradient in {worst}",
                                   epoch=epoch + 1, worst_parameter=worst) from exc
        _, val_m = loss_and_metrics(logits, g.labels, val_ids)
        row = EpochRow(epoch + 1, train_m["loss"], val_m["accuracy"], val_m["micro_f1"],
                       val_m["macro_f1"])
        if row.val_macro_f1 > state.best_metric:
            state.best_metric = row.val_macro_f1
            state.best_epoch = row.epoch
            state.best_params = {p.name: p.data.copy() for p in params}
            state.best_adam = copy.deepcopy(state.adam)
        adam_step(params, state.adam)
        state.epoch = epoch + 1
        state.history.append(row)
        log.info("epoch %d loss %.6f val_acc %.4f val_macro_f1 %.4f", row.epoch, row.train_loss,
                 row.val_acc, row.val_macro_f1)
        if on_epoch is not None:
            on_epoch(row)
    return state


def evaluate(model: HgmnModel, g: HeteroGraph, ids, prep: Prepared | None = None) -> dict[str, float]:
    prep = prep or prepare(g, model.cfg, [g.schema(n) for n in model.schema_names])
    _, metrics = loss_and_metrics(forward(model, g, prep), g.labels, ids)
    return metrics


# ---------------------------------------------------------------- gradient check

def relative_error(a: float, b: float) -> float:
    return abs(a - b) / max(abs(a), abs(b), 1e-8)


def gradient_check(model: HgmnModel, g: HeteroGraph, epsilon: float = 1e-5,
                   max_coords: int = 25, seed: int = 0, prep: Prepared | None = None,
                   mask=None) -> dict[str, dict]:
    """Central differences of the training loss against tape gradients.

    Checks every coordinate of small tensors and a seeded sample of
    ``max_coords`` coordinates of larger ones. Returns, per parameter, the
    worst relative error plus the sampled analytic/numeric pairs.

    The perturbed losses are evaluated in ``np.longdouble`` when the platform
    gives it extra precision: with f64 the difference quotient carries about
    1e-11 of roundoff, which swamps gradients that are genuinely that small.
    """
    prep = prep or prepare(g, model.cfg)
    if mask is None:
        mask = g.splits.get("train")
        if mask is None or not len(mask):
            mask = np.flatnonzero(g.labels >= 0)
    mask = np.asarray(mask, dtype=np.int64)

    model.zero_grad()
    loss, _ = loss_and_metrics(forward(model, g, prep), g.labels, mask)
    backward(loss)
    grads = {p.name: p.grad.copy() for p in model.parameters()}
    model.zero_grad()

    wide = np.longdouble if np.finfo(np.longdouble).eps < np.finfo(np.float64).eps else np.float64
    params = model.parameters()
    saved = [p.data for p in params]
    for p in params:
        p.data = p.data.astype(wide)
    requires = [p.requires_grad for p in params]
    for p in params:
        p.requires_grad = False  # no tape needed for the perturbed passes

    def loss_value():
        loss, _ = loss_and_metrics(forward(model, g, prep), g.labels, mask)
        return loss.data

    rng = np.random.default_rng(seed)
    report = {}
    try:
        for p in params:
            flat = p.data.reshape(-1)
            grad = grads[p.name].reshape(-1)
            if flat.size <= max_coords:
                coords = np.arange(flat.size)
            else:
                coords = np.sort(rng.choice(flat.size, size=max_coords, replace=False))
            analytic, numeric, errs = [], [], []
            for i in coords:
                orig = flat[i]
                flat[i] = orig + wide(epsilon)
                up = loss_value()
                flat[i] = orig - wide(epsilon)
                down = loss_value()
                flat[i] = orig
                num = float((up - down) / (2 * wide(epsilon)))
                analytic.append(float(grad[i]))
                numeric.append(num)
                errs.append(relative_error(float(grad[i]), num))
            report[p.name] = {"max_rel_err": max(errs) if errs else 0.0,
                              "coords": coords.tolist(), "analytic": analytic, "numeric": numeric}
    finally:
        for p, data, req in zip(params, saved, requires):
            p.data, p.requires_grad = data, req
    model.zero_grad()
    return report
