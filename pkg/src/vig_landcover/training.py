"""Losses, AdamW, plateau schedule, early stopping, the fit loop and checkpoints."""
from __future__ import annotations

import json
import logging
import math
from dataclasses import asdict, dataclass, field
from typing import Optional

import numpy as np

from .errors import ConfigurationError, DataError, FormatError, TrainingError
from .model import ModelConfig, VigModel, build_model
from .tensor import Tensor, backward, make_op
from .tensorfile import read_tensor_file, write_tensor_file

logger = logging.getLogger(__name__)


@dataclass
class TrainConfig:
    max_epochs: int = 100
    lr: float = 1e-4
    weight_decay: float = 1e-4
    betas: tuple = (0.9, 0.999)
    eps: float = 1e-8
    es_patience: int = 10
    es_tolerance: float = 1e-3
    plateau_patience: int = 5
    plateau_factor: float = 10.0
    batch_size: int = 16
    seed: int = 0

    def __post_init__(self):
        self.betas = tuple(float(b) for b in self.betas)

    def validate(self) -> "TrainConfig":
        bad = [
            name for name in ("max_epochs", "lr", "eps", "es_patience", "plateau_patience", "batch_size")
            if not getattr(self, name) > 0
        ]
        if self.weight_decay < 0 or self.es_tolerance < 0:
            bad.append("weight_decay/es_tolerance")
        if not self.plateau_factor > 1:
            bad.append("plateau_factor (must exceed 1)")
        if len(self.betas) != 2 or not all(0 <= b < 1 for b in self.betas):
            bad.append("betas")
        if bad:
            raise ConfigurationError(f"invalid training config fields: {', '.join(bad)}")
        return self

    def to_dict(self) -> dict:
        d = asdict(self)
        d["betas"] = list(self.betas)
        return d


# ---------------------------------------------------------------------------
# Losses
# ---------------------------------------------------------------------------

def _class_indices(targets, num_classes: int) -> np.ndarray:
    t = np.asarray(targets)
    if t.ndim == 2:
        if not np.all((t == 0) | (t == 1)) or not np.all(t.sum(axis=1) == 1):
            raise DataError("multiclass targets given as vectors must be one-hot")
        t = t.argmax(axis=1)
    t = t.astype(np.int64)
    if t.size and (t.min() < 0 or t.max() >= num_classes):
        raise DataError(f"class index out of range [0, {num_classes})")
    return t


def softmax_cross_entropy(logits: Tensor, targets) -> Tensor:
    B, C = logits.shape
    idx = _class_indices(targets, C)
    z = logits.data
    shifted = z - z.max(axis=1, keepdims=True)
    logsum = np.log(np.exp(shifted).sum(axis=1, keepdims=True))
    logp = shifted - logsum
    value = -logp[np.arange(B), idx].mean()

    def _backward(g):
        grad = np.exp(logp)
        grad[np.arange(B), idx] -= 1.0
        return (grad * (g / B),)

    return make_op(np.asarray(value, dtype=z.dtype), (logits,), _backward, "cross_entropy")


def sigmoid_binary_cross_entropy(logits: Tensor, targets) -> Tensor:
    z = logits.data
    t = np.asarray(targets, dtype=z.dtype)
    if t.shape != z.shape:
        raise DataError(f"multilabel targets shape {t.shape} != logits shape {z.shape}")
    if not np.all((t == 0) | (t == 1)):
        raise DataError("multilabel targets must be 0/1")
    value = (np.maximum(z, 0) - z * t + np.log1p(np.exp(-np.abs(z)))).mean()

    def _backward(g):
        p = np.where(z >= 0, 1.0 / (1.0 + np.exp(-np.abs(z))), np.exp(-np.abs(z)) / (1.0 + np.exp(-np.abs(z))))
        return ((p - t) * (g / z.size),)

    return make_op(np.asarray(value, dtype=z.dtype), (logits,), _backward, "bce")


def loss(task: str, logits: Tensor, targets) -> Tensor:
    """Mean softmax cross-entropy (multiclass) or per-class sigmoid BCE (multilabel)."""
    if task == "multiclass":
        return softmax_cross_entropy(logits, targets)
    if task == "multilabel":
        return sigmoid_binary_cross_entropy(logits, targets)
    raise ConfigurationError(f"unknown task {task!r}")


# ---------------------------------------------------------------------------
# Optimizer
# ---------------------------------------------------------------------------

@dataclass
class AdamWState:
    step: int = 0
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)


def adamw_step(params: dict, grads: dict, state: AdamWState, cfg: TrainConfig, lr: Optional[float] = None) -> AdamWState:
    """One AdamW update, in place on ``params`` (name -> array)."""
    lr = cfg.lr if lr is None else lr
    b1, b2 = cfg.betas
    state.step += 1
    t = state.step
    c1 = 1.0 - b1 ** t
    c2 = 1.0 - b2 ** t
    for name, theta in params.items():
        g = grads.get(name)
        if g is None:
            g = np.zeros_like(theta)
        m = state.m.get(name)
        if m is None:
            m = state.m[name] = np.zeros_like(theta)
            state.v[name] = np.zeros_like(theta)
        v = state.v[name]
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * g * g
        m_hat = m / c1
        v_hat = v / c2
        theta -= lr * m_hat / (np.sqrt(v_hat) + cfg.eps) + lr * cfg.weight_decay * theta
    return state


class AdamW:
    def __init__(self, named_params: dict, cfg: TrainConfig):
        self.params = named_params
        self.cfg = cfg
        self.lr = cfg.lr
        self.state = AdamWState()

    def zero_grad(self) -> None:
        for p in self.params.values():
            p.zero_grad()

    def step(self) -> None:
        arrays = {n: p.data for n, p in self.params.items()}
        grads = {n: p.grad for n, p in self.params.items() if p.grad is not None}
        adamw_step(arrays, grads, self.state, self.cfg, lr=self.lr)

    def state_arrays(self) -> dict:
        out = {}
        for n in self.state.m:
            out[f"{n}.m"] = self.state.m[n]
            out[f"{n}.v"] = self.state.v[n]
        return out


# ---------------------------------------------------------------------------
# Schedules
# ---------------------------------------------------------------------------

@dataclass
class PlateauState:
    lr: float
    patience: int = 5
    factor: float = 10.0
    tolerance: float = 1e-3
    best: float = math.inf
    counter: int = 0


def lr_plateau_update(state: PlateauState, val_loss: float) -> float:
    """Divide the learning rate by ``factor`` once ``patience`` epochs have passed without improvement."""
    if val_loss < state.best - state.tolerance:
        state.best = val_loss
        state.counter = 0
    else:
        state.counter += 1
        if state.counter > state.patience:
            state.lr /= state.factor
            state.counter = 0
    return state.lr


@dataclass
class EarlyStopState:
    patience: int = 10
    tolerance: float = 1e-3
    best: float = math.inf
    counter: int = 0


def early_stop_check(state: EarlyStopState, val_loss: float) -> str:
    if val_loss < state.best - state.tolerance:
        state.best = val_loss
        state.counter = 0
    else:
        state.counter += 1
    return "stop" if state.counter >= state.patience else "continue"


# ---------------------------------------------------------------------------
# Fit loop
# ---------------------------------------------------------------------------

@dataclass
class FitResult:
    model: VigModel
    history: list
    best_epoch: int
    best_val_loss: float
    best_state: dict
    optimizer: AdamW
    stopped_early: bool


def batch_targets(ds, idx: np.ndarray):
    if ds.task == "multiclass":
        return ds.labels[idx].argmax(axis=1)
    return ds.labels[idx]


def _batches(n: int, batch_size: int, order: np.ndarray) -> list:
    bounds = list(range(0, n, batch_size)) + [n]
    chunks = [order[a:b] for a, b in zip(bounds[:-1], bounds[1:])]
    # a trailing single sample would break train-mode batch norm
    if len(chunks) > 1 and len(chunks[-1]) == 1:
        chunks[-2] = np.concatenate([chunks[-2], chunks[-1]])
        chunks.pop()
    return chunks


def evaluate_loss(model: VigModel, ds, batch_size: int = 64) -> float:
    """Sample-weighted mean loss of ``model`` on ``ds`` in eval mode."""
    total = 0.0
    for start in range(0, len(ds), batch_size):
        idx = np.arange(start, min(len(ds), start + batch_size))
        logits = model.forward(ds.images[idx], "eval")
        total += float(loss(model.cfg.task, logits, batch_targets(ds, idx)).data) * len(idx)
    return total / len(ds)


def predict_logits(model: VigModel, images: np.ndarray, batch_size: int = 64) -> np.ndarray:
    out = [model.forward(images[s:s + batch_size], "eval").data for s in range(0, len(images), batch_size)]
    return np.concatenate(out, axis=0)


def fit(model: VigModel, train_set, val_set, cfg: TrainConfig, on_epoch=None) -> FitResult:
    """Train with AdamW, a plateau schedule and early stopping on validation loss.

    The returned model holds the parameters of the best validation epoch.
    ``on_epoch(record, model)`` runs after every epoch; returning ``"stop"``
    ends training there.
    """
    cfg.validate()
    if len(train_set) == 0 or len(val_set) == 0:
        raise DataError("fit needs non-empty training and validation sets")
    task = model.cfg.task
    params = model.named_parameters()
    opt = AdamW(params, cfg)
    plateau = PlateauState(cfg.lr, cfg.plateau_patience, cfg.plateau_factor, cfg.es_tolerance)
    stopper = EarlyStopState(cfg.es_patience, cfg.es_tolerance)
    history = []
    best = (math.inf, 0, model.state_dict())
    stopped = False

    for epoch in range(1, cfg.max_epochs + 1):
        rng = np.random.default_rng([cfg.seed, epoch])
        order = rng.permutation(len(train_set))
        lr = opt.lr
        running, seen = 0.0, 0
        for b, idx in enumerate(_batches(len(train_set), cfg.batch_size, order)):
            opt.zero_grad()
            logits = model.forward(train_set.images[idx], "train", rng=rng)
            value = loss(task, logits, batch_targets(train_set, idx))
            v = float(value.data)
            if not math.isfinite(v):
                raise TrainingError(f"non-finite loss {v} at epoch {epoch}, batch {b}, lr {lr:g}")
            backward(value)
            opt.step()
            running += v * len(idx)
            seen += len(idx)
        train_loss = running / seen
        val_loss = evaluate_loss(model, val_set)
        history.append({"epoch": epoch, "train_loss": train_loss, "val_loss": val_loss, "lr": lr})
        logger.info("epoch %d train %.6f val %.6f lr %g", epoch, train_loss, val_loss, lr)
        if val_loss < best[0]:
            best = (val_loss, epoch, model.state_dict())
        if on_epoch is not None and on_epoch(history[-1], model) == "stop":
            stopped = True
            break
        opt.lr = lr_plateau_update(plateau, val_loss)
        if early_stop_check(stopper, val_loss) == "stop":
            stopped = True
            break

    model.load_state_dict(best[2])
    return FitResult(model, history, best[1], best[0], best[2], opt, stopped)


# ---------------------------------------------------------------------------
# Checkpoints
# ---------------------------------------------------------------------------

@dataclass
class Checkpoint:
    params: dict
    opt: dict
    meta: dict

    def model_config(self) -> ModelConfig:
        return ModelConfig.from_dict(self.meta["model"])

    def build(self) -> VigModel:
        cfg = self.model_config()
        dtype = next(iter(self.params.values())).dtype if self.params else np.float32
        model = build_model(cfg, seed=0, dtype=dtype)
        model.load_state_dict(self.params)
        return model


def save_checkpoint(path, model: VigModel, optimizer: Optional[AdamW] = None, epoch: int = 0,
                    best_val_loss: float = math.nan, extra: Optional[dict] = None, state: Optional[dict] = None) -> None:
    """Write parameters, running statistics, optimizer moments and metadata.

    ``state`` overrides the model's current state (e.g. a best-epoch snapshot).
    """
    state = model.state_dict() if state is None else state
    tensors = {f"param/{n}": a for n, a in state.items()}
    meta = {"model": model.cfg.to_dict(), "epoch": epoch, "best_val_loss": best_val_loss}
    if optimizer is not None:
        for n, a in optimizer.state_arrays().items():
            tensors[f"opt/{n}"] = a
        meta["opt_step"] = optimizer.state.step
        meta["lr"] = optimizer.lr
    if extra:
        meta.update(extra)
    tensors["meta/json"] = np.frombuffer(json.dumps(meta, sort_keys=True).encode("utf-8"), dtype=np.uint8)
    write_tensor_file(path, tensors)


def load_checkpoint(path) -> Checkpoint:
    tensors = read_tensor_file(path)
    if "meta/json" not in tensors:
        raise FormatError("checkpoint has no meta/json record", tensor="meta/json")
    try:
        meta = json.loads(tensors["meta/json"].tobytes().decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise FormatError(f"checkpoint metadata is not valid JSON ({exc})", tensor="meta/json") from None
    params = {n[len("param/"):]: a for n, a in tensors.items() if n.startswith("param/")}
    opt = {n[len("opt/"):]: a for n, a in tensors.items() if n.startswith("opt/")}
    return Checkpoint(params, opt, meta)
