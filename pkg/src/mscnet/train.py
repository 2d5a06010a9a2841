"""Loss, learning-rate schedule, Adam, the training loop and evaluation."""

from __future__ import annotations

import json
import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Dict, List, Optional, Sequence, Tuple

import numpy as np

from .autograd import Tensor, backward, clip, mean, no_grad, tlog, tsum
from .autograd.nn import Parameter
from .config import ModelConfig, TrainConfig
from .data.dataset import BiTemporalSample, Dataset, collate
from .errors import ConfigError, DataError, NumericError, UsageError
from .formats import load_checkpoint, save_checkpoint
from .metrics import ConfusionCounts, confusion, metrics_report
from .model import MSCNet, build_model
from .rng import RngContext

log = logging.getLogger(__name__)

PROB_EPS = 1e-7
CONFIG_KEY = "meta.config"
ITER_KEY = "meta.iteration"


def _label_array(label, like: Tensor) -> np.ndarray:
    y = np.asarray(getattr(label, "data", label))
    if y.shape != like.shape:
        raise DataError(f"label shape {y.shape} differs from prediction shape {like.shape}")
    if not np.all((y == 0) | (y == 1)):
        raise DataError("label must be binary (0/1)")
    return y.astype(like.dtype)


def bce_loss(prob: Tensor, label) -> Tensor:
    y = _label_array(label, prob)
    p = clip(prob, PROB_EPS, 1.0 - PROB_EPS)
    ll = y * tlog(p) + (1.0 - y) * tlog(1.0 - p)
    return -mean(ll)


def dice_loss(prob: Tensor, label) -> Tensor:
    y = _label_array(label, prob)
    inter = tsum(prob * y)
    return 1.0 - (2.0 * inter + 1.0) / (tsum(prob) + float(y.sum()) + 1.0)


def loss(prob: Tensor, label, bce_weight: float = 1.0, dice_weight: float = 1.0) -> Tensor:
    """BCE + Dice over all pixels of the batch."""
    return bce_weight * bce_loss(prob, label) + dice_weight * dice_loss(prob, label)


def lr_schedule(it: int, total: int = 40000, warmup: int = 200, base: float = 5e-4,
                power: float = 0.9) -> float:
    if it < 0 or it > total:
        raise UsageError(f"iteration {it} outside [0, {total}]")
    if it < warmup:
        return base * it / warmup
    if total == warmup:
        return base if it < total else 0.0
    return base * (1.0 - (it - warmup) / (total - warmup)) ** power


@dataclass
class TrainState:
    iteration: int = 0
    base_lr: float = 5e-4
    m: Dict[str, np.ndarray] = field(default_factory=dict)
    v: Dict[str, np.ndarray] = field(default_factory=dict)
    steps: Dict[str, int] = field(default_factory=dict)
    rng: Optional[RngContext] = None
    running_loss: float = 0.0


def adam_step(params: Sequence[Parameter], state: TrainState, lr: float, beta1: float = 0.9,
              beta2: float = 0.99, eps: float = 1e-8, weight_decay: float = 1e-4) -> None:
    """One Adam update with decoupled weight decay, in place.

    Only trainable parameters that received a gradient are touched, so
    parameters outside the graph (e.g. the unused modality) stay fixed.
    """
    for p in params:
        if not p.trainable or p.grad is None:
            continue
        key = p.name if p.name is not None else str(id(p))
        g = p.grad
        if g.shape != p.shape:
            raise RuntimeError(f"gradient shape {g.shape} != parameter shape {p.shape} for {key}")
        m = state.m.get(key)
        if m is None:
            m = state.m[key] = np.zeros_like(p.data)
            state.v[key] = np.zeros_like(p.data)
        v = state.v[key]
        t = state.steps.get(key, 0) + 1
        state.steps[key] = t
        m *= beta1
        m += (1.0 - beta1) * g
        v *= beta2
        v += (1.0 - beta2) * g * g
        m_hat = m / (1.0 - beta1 ** t)
        v_hat = v / (1.0 - beta2 ** t)
        if weight_decay:
            p.data *= 1.0 - lr * weight_decay
        p.data -= (lr * m_hat / (np.sqrt(v_hat) + eps)).astype(p.dtype)


# -- evaluation ---------------------------------------------------------------


def predict_probs(model: MSCNet, samples: Sequence[BiTemporalSample], batch_size: int = 4) -> List[np.ndarray]:
    """Eval-mode probability maps, one [H,W] float array per sample."""
    was = model.training
    model.eval()
    out = []
    try:
        with no_grad():
            for i in range(0, len(samples), batch_size):
                batch = collate(samples[i : i + batch_size], nir_channels=model.config.nir_channels)
                prob = model.forward_batch(batch).data
                out.extend(prob[k, 0] for k in range(prob.shape[0]))
    finally:
        model.train(was)
    return out


def evaluate(model: MSCNet, samples: Sequence[BiTemporalSample], threshold: Optional[float] = None,
             batch_size: int = 4) -> ConfusionCounts:
    """Micro-averaged confusion counts over ``samples``."""
    tau = model.config.threshold if threshold is None else threshold
    counts = ConfusionCounts()
    for s, prob in zip(samples, predict_probs(model, samples, batch_size)):
        counts = counts + confusion(prob > tau, s.label[0])
    return counts


def evaluate_report(model: MSCNet, samples: Sequence[BiTemporalSample], threshold: Optional[float] = None) -> dict:
    return metrics_report(evaluate(model, samples, threshold), len(samples))


# -- checkpoints ----------------------------------------------------------------


def checkpoint_entries(model: MSCNet, iteration: int = 0) -> Dict[str, np.ndarray]:
    entries = {k: np.array(v, copy=True) for k, v in model.state_dict().items()}
    entries[CONFIG_KEY] = np.frombuffer(model.config.to_json().encode("utf-8"), dtype=np.uint8).copy()
    entries[ITER_KEY] = np.array([iteration], dtype=np.float64)
    return entries


def save_model(path, model: MSCNet, iteration: int = 0) -> None:
    save_checkpoint(path, checkpoint_entries(model, iteration))


def load_model(path) -> Tuple[MSCNet, Dict[str, np.ndarray]]:
    entries = load_checkpoint(path)
    if CONFIG_KEY not in entries:
        raise DataError(f"{path}: checkpoint carries no model config")
    try:
        config = ModelConfig.from_dict(json.loads(entries[CONFIG_KEY].tobytes().decode("utf-8")))
    except (ValueError, ConfigError) as exc:
        raise DataError(f"{path}: bad embedded config ({exc})") from exc
    model = build_model(config, seed=0)
    state = {k: v for k, v in entries.items() if not k.startswith("meta.")}
    try:
        model.load_state_dict(state, strict=True)
    except ConfigError as exc:
        raise DataError(f"{path}: {exc}") from exc
    model.eval()
    return model, entries


# -- training -----------------------------------------------------------------


@dataclass
class TrainResult:
    best_f1: float
    best_iteration: int
    history: List[Tuple[int, float, float, Optional[float]]]
    losses: List[float]
    model: MSCNet


def _batches(rng: RngContext, n: int, batch_size: int):
    """Endless stream of index batches; reshuffled each epoch, tail dropped."""
    bs = min(batch_size, n)
    epoch = 0
    while True:
        order = rng.spawn(epoch).permutation(n)
        for i in range(0, n - bs + 1, bs):
            yield order[i : i + bs]
        epoch += 1


def train(config: ModelConfig, data_dir, out, seed: int = 0, iters: Optional[int] = None,
          train_split: str = "train", val_split: str = "val", stop_f1: Optional[float] = None,
          log_fn: Optional[Callable[[str], None]] = None, data: Optional[Dataset] = None,
          val_data: Optional[Dataset] = None,
          on_step: Optional[Callable[[int, MSCNet], None]] = None) -> TrainResult:
    """Train from scratch and keep the checkpoint with the best validation F1.

    Validation runs every ``val_interval`` iterations and after the last one.
    With an empty validation split the training split is scored instead.
    ``stop_f1`` (percent) ends training once validation F1 reaches it.
    ``on_step(iteration, model)`` runs after every optimizer step.
    """
    tc: TrainConfig = config.train
    total = tc.iters if iters is None else iters
    if total < 1:
        raise UsageError("iters must be >= 1")
    emit = log_fn or log.info
    data = data if data is not None else Dataset(data_dir, train_split, config.nir_channels)
    if len(data) == 0:
        raise DataError(f"{data_dir}: no samples in split {train_split!r}")
    if val_data is None:
        val_data = Dataset(data_dir, val_split, config.nir_channels) if val_split else data
    if len(val_data) == 0:
        val_data = data
    model = build_model(config, seed)
    model.train()
    params = model.trainable_parameters()
    rng = RngContext(seed, 2)
    state = TrainState(base_lr=tc.base_lr, rng=rng)
    batches = _batches(rng.spawn(0), len(data), tc.batch_size)
    flip_rng = rng.spawn(1)
    best_f1, best_it = -1.0, 0
    history: List[Tuple[int, float, float, Optional[float]]] = []
    losses: List[float] = []
    for it in range(1, total + 1):
        idx = next(batches)
        flips = [flip_rng.random() < 0.5 for _ in idx] if tc.hflip else None
        batch = data.batch(idx, flips)
        for p in params:
            p.grad = None
        prob = model.forward_batch(batch)
        lval = loss(prob, batch["label"].astype(prob.dtype), config.bce_weight, config.dice_weight)
        value = float(lval.data)
        if not np.isfinite(value):
            raise NumericError(f"non-finite loss at iteration {it}")
        backward(lval)
        lr = lr_schedule(it - 1, total, tc.warmup, tc.base_lr, tc.power)
        adam_step(params, state, lr, tc.beta1, tc.beta2, tc.adam_eps, tc.weight_decay)
        state.iteration = it
        state.running_loss = value if it == 1 else 0.9 * state.running_loss + 0.1 * value
        losses.append(value)
        if on_step is not None:
            on_step(it, model)
        val_f1 = None
        if it % tc.val_interval == 0 or it == total:
            val_f1 = float(metrics_report(evaluate(model, val_data.samples), len(val_data))["f1"])
            if val_f1 > best_f1:
                best_f1, best_it = val_f1, it
                save_model(out, model, it)
        history.append((it, lr, value, val_f1))
        if val_f1 is not None or it % 50 == 0:
            vtxt = f"{val_f1:.2f}" if val_f1 is not None else "-"
            emit(f"iter={it} lr={lr:.6g} loss={state.running_loss:.5f} val_F1={vtxt}")
        if stop_f1 is not None and val_f1 is not None and val_f1 >= stop_f1:
            break
    best_model, _ = load_model(out)
    return TrainResult(best_f1, best_it, history, losses, best_model)


__all__ = [
    "loss", "bce_loss", "dice_loss", "lr_schedule", "TrainState", "adam_step", "evaluate",
    "evaluate_report", "predict_probs", "train", "TrainResult", "save_model", "load_model",
    "checkpoint_entries",
]
