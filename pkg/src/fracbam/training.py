"""Adam, reduce-on-plateau scheduling, the training loop and evaluation."""

from __future__ import annotations

import csv
import io
import json
import time
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

import numpy as np

from . import tnsr
from .autodiff import Tensor, no_grad, ops
from .metrics import ConfusionCounts
from .model import DEFAULT_HEAD, ModelSpec, build_model, forward, load_model, save_model

LOG_COLUMNS = ("epoch", "train_loss", "train_acc", "val_loss", "val_acc", "lr")


class TrainingDivergedError(RuntimeError):
    """Raised when the loss stops being finite."""


@dataclass
class TrainConfig:
    learning_rate: float = 1e-3
    batch_size: int = 32
    epochs: int = 100
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    plateau_factor: float = 0.1
    plateau_patience: int = 10
    min_lr: float = 1e-6
    seed: int = 0
    width: int = 32
    input_size: int = 224
    reduction_ratio: int = 16
    dilation: int = 4
    attention: bool = True
    head: list = field(default_factory=lambda: [dict(layer) for layer in DEFAULT_HEAD])
    eval_batch_size: int = 32

    def __post_init__(self):
        if not self.learning_rate >= 0:
            raise ValueError("learning_rate must be nonnegative")
        if self.epochs < 1 or self.batch_size < 1 or self.eval_batch_size < 1:
            raise ValueError("epochs and batch sizes must be at least 1")
        if not 0 < self.plateau_factor < 1:
            raise ValueError("plateau_factor must lie in (0, 1)")
        if self.plateau_patience < 1:
            raise ValueError("plateau_patience must be at least 1")
        if not 0 <= self.seed < 2**64:
            raise ValueError("seed must be an unsigned 64-bit integer")

    def to_dict(self) -> dict:
        return asdict(self)

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True) + "\n"

    @classmethod
    def from_dict(cls, doc: dict) -> "TrainConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(doc) - known
        if unknown:
            raise ValueError(f"unknown config keys: {sorted(unknown)}")
        return cls(**doc)

    @classmethod
    def load(cls, path) -> "TrainConfig":
        return cls.from_dict(json.loads(Path(path).read_text(encoding="utf-8")))

    def build(self, channels_in: int = 3, dtype=np.float32) -> ModelSpec:
        return build_model(self.width, channels_in, self.input_size, self.reduction_ratio,
                           self.dilation, self.head, self.attention, self.seed % 2**31, dtype)


# -- optimizer --------------------------------------------------------------

@dataclass
class AdamState:
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)
    t: int = 0

    @classmethod
    def zeros_like(cls, params: dict) -> "AdamState":
        return cls({k: np.zeros_like(_array(p)) for k, p in params.items()},
                   {k: np.zeros_like(_array(p)) for k, p in params.items()}, 0)


def _array(p):
    return p.data if isinstance(p, Tensor) else p


def adam_step(params: dict, grads: dict, state: AdamState, lr: float,
              beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8) -> AdamState:
    """One bias-corrected Adam update, in place on ``params`` and ``state``.

    ``params`` maps names to arrays or Tensors; a missing or ``None`` gradient
    counts as zero.
    """
    if state.t < 0:
        raise ValueError("step counter must be nonnegative")
    state.t += 1
    c1 = 1.0 - beta1 ** state.t
    c2 = 1.0 - beta2 ** state.t
    for name, p in params.items():
        w = _array(p)
        g = grads.get(name)
        g = np.zeros_like(w) if g is None else np.asarray(g)
        m, v = state.m.get(name), state.v.get(name)
        if m is None:
            m = state.m[name] = np.zeros_like(w)
            v = state.v[name] = np.zeros_like(w)
        if g.shape != w.shape or m.shape != w.shape or v.shape != w.shape:
            raise ValueError(f"shape mismatch for {name!r}: param {w.shape}, grad {g.shape}, "
                             f"state {m.shape}")
        m *= beta1
        m += (1.0 - beta1) * g
        v *= beta2
        v += (1.0 - beta2) * (g * g)
        w -= (lr * (m / c1) / (np.sqrt(v / c2) + eps)).astype(w.dtype, copy=False)
    return state


# -- scheduler --------------------------------------------------------------

class ReduceLROnPlateau:
    """Multiply the rate by ``factor`` once the best loss has not strictly
    improved for ``patience`` consecutive epochs."""

    def __init__(self, lr, factor=0.1, patience=10, min_lr=1e-6):
        if patience < 1:
            raise ValueError("patience must be at least 1")
        if not 0 < factor < 1:
            raise ValueError("factor must lie in (0, 1)")
        self.lr = float(lr)
        self.factor = factor
        self.patience = patience
        self.min_lr = min_lr
        self.best = float("inf")
        self.bad_epochs = 0

    def step(self, loss: float) -> float:
        if loss < self.best:
            self.best = loss
            self.bad_epochs = 0
        else:
            self.bad_epochs += 1
        if self.bad_epochs >= self.patience:
            self.lr = max(self.lr * self.factor, self.min_lr) if self.lr > self.min_lr else self.lr
            self.bad_epochs = 0
        return self.lr


def plateau_schedule(history, lr, factor=0.1, patience=10, min_lr=1e-6) -> float:
    """Rate to use after the last loss in ``history``, given the current ``lr``.

    The counter is rebuilt by replaying ``history``; the rate changes only if
    the replay triggers a reduction on the final epoch.
    """
    sched = ReduceLROnPlateau(1.0, factor, patience, 0.0)
    reduced = False
    for loss in history:
        before = sched.lr
        sched.step(loss)
        reduced = sched.lr != before
    if reduced and lr > min_lr:
        return max(lr * factor, min_lr)
    return lr


# -- training ---------------------------------------------------------------

@dataclass
class EpochRecord:
    epoch: int
    train_loss: float
    train_acc: float
    val_loss: float
    val_acc: float
    lr: float
    seconds: float = 0.0


@dataclass
class TrainResult:
    log: list
    best_epoch: int
    best_val_loss: float
    model: ModelSpec
    optimizer: AdamState


def one_hot(labels, dtype, k=2):
    return np.eye(k, dtype=dtype)[np.asarray(labels)]


def log_to_csv(records) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(LOG_COLUMNS)
    for r in records:
        w.writerow([r.epoch] + [repr(float(getattr(r, c))) for c in LOG_COLUMNS[1:]])
    return buf.getvalue()


def read_log(path) -> list:
    """Parse a ``log.csv`` back into records, naming the line of any bad row."""
    lines = Path(path).read_text(encoding="utf-8").splitlines()
    if not lines or tuple(lines[0].split(",")) != LOG_COLUMNS:
        raise ValueError(f"{path}: line 1: header must be {','.join(LOG_COLUMNS)}")
    out = []
    for n, line in enumerate(lines[1:], start=2):
        cells = line.split(",")
        try:
            if len(cells) != len(LOG_COLUMNS):
                raise ValueError(f"expected {len(LOG_COLUMNS)} fields, got {len(cells)}")
            out.append(EpochRecord(int(cells[0]), *map(float, cells[1:])))
        except ValueError as exc:
            raise ValueError(f"{path}: line {n}: malformed row: {exc}") from None
    if not out:
        raise ValueError(f"{path}: log has no epochs")
    return out


def save_optimizer(state: AdamState, lr: float, path) -> None:
    named = {"step": np.array([state.t], dtype=np.float64),
             "lr": np.array([lr], dtype=np.float64)}
    for k in state.m:
        named[f"m:{k}"] = state.m[k]
        named[f"v:{k}"] = state.v[k]
    tnsr.save_pack(path, named)


def load_optimizer(path):
    named = tnsr.load_pack(path)
    state = AdamState(t=int(named.pop("step")[0]))
    lr = float(named.pop("lr")[0])
    for k, arr in named.items():
        kind, name = k.split(":", 1)
        (state.m if kind == "m" else state.v)[name] = arr.copy()
    return state, lr


def _snapshot(model):
    return ({k: t.data.copy() for k, t in model.params.items()},
            {k: b.copy() for k, b in model.buffers.items()})


def _restore(model, snap):
    params, buffers = snap
    for k, arr in params.items():
        model.params[k].data = arr.copy()
    for k, arr in buffers.items():
        model.buffers[k][...] = arr


def predict_logits(model: ModelSpec, data, batch_size: int = 32) -> np.ndarray:
    """Eval-mode logits for every item of ``data``, in order."""
    n = len(data)
    out = []
    with no_grad():
        for start in range(0, n, batch_size):
            idx = np.arange(start, min(start + batch_size, n))
            x = data.images(idx).astype(model.dtype, copy=False)
            out.append(forward(model, x, "eval").data)
    return np.concatenate(out)


def _loss_and_acc(logits, labels):
    logp = ops.log_softmax_np(logits.astype(np.float64))
    loss = float(-np.mean(logp[np.arange(len(labels)), labels]))
    acc = float(np.mean(np.argmax(logits, axis=1) == labels))
    return loss, acc


def train(model: ModelSpec, train_data, val_data, config: TrainConfig,
          checkpoint_dir=None, progress=None) -> TrainResult:
    """Fit ``model`` in place; the returned model carries the best-validation
    weights. ``train_data``/``val_data`` expose ``len``, ``labels`` and
    ``images(indices)``.

    With ``checkpoint_dir`` the best model, optimizer state and the running
    ``log.csv`` are written there after each epoch.
    """
    from .data import make_batches

    if len(train_data) == 0 or len(val_data) == 0:
        raise ValueError("train and validation splits must be nonempty")
    sched = ReduceLROnPlateau(config.learning_rate, config.plateau_factor,
                              config.plateau_patience, config.min_lr)
    state = AdamState.zeros_like(model.params)
    ckpt = Path(checkpoint_dir) if checkpoint_dir is not None else None
    if ckpt is not None:
        ckpt.mkdir(parents=True, exist_ok=True)
    labels = np.asarray(train_data.labels)
    log, best, best_epoch, best_snap = [], float("inf"), 0, None

    for epoch in range(1, config.epochs + 1):
        t0 = time.perf_counter()
        lr = sched.lr
        loss_sum, correct = 0.0, 0
        batches = make_batches(len(train_data), config.batch_size, config.seed, epoch)
        for b, idx in enumerate(batches, start=1):
            x = train_data.images(idx).astype(model.dtype, copy=False)
            y = labels[idx]
            model.zero_grad()
            rng = np.random.default_rng([config.seed, epoch, b])
            logits = forward(model, x, "train", rng)
            loss = ops.softmax_cross_entropy(logits, one_hot(y, model.dtype))
            value = float(loss.data)
            if not np.isfinite(value):
                raise TrainingDivergedError(
                    f"non-finite loss {value} at epoch {epoch}, batch {b}")
            loss.backward()
            adam_step(model.params, {k: t.grad for k, t in model.params.items()}, state, lr,
                      config.beta1, config.beta2, config.eps)
            loss_sum += value * len(idx)
            correct += int(np.sum(np.argmax(logits.data, axis=1) == y))
        val_loss, val_acc = _loss_and_acc(predict_logits(model, val_data, config.eval_batch_size),
                                          np.asarray(val_data.labels))
        rec = EpochRecord(epoch, loss_sum / len(train_data), correct / len(train_data),
                          val_loss, val_acc, lr, time.perf_counter() - t0)
        log.append(rec)
        sched.step(val_loss)
        if val_loss < best:
            best, best_epoch, best_snap = val_loss, epoch, _snapshot(model)
            if ckpt is not None:
                save_model(model, ckpt)
                save_optimizer(state, sched.lr, ckpt / "optimizer.tnsr")
        if ckpt is not None:
            (ckpt / "log.csv").write_text(log_to_csv(log), encoding="utf-8", newline="\n")
        if progress is not None:
            progress(rec)
    if best_snap is not None:
        _restore(model, best_snap)
    return TrainResult(log, best_epoch, best, model, state)


def evaluate(model: ModelSpec, data, batch_size: int = 32) -> ConfusionCounts:
    """Eval-mode argmax predictions (ties go to index 0) tallied against labels."""
    if len(data) == 0:
        raise ValueError("cannot evaluate an empty split")
    pred = np.argmax(predict_logits(model, data, batch_size), axis=1)
    return ConfusionCounts.from_predictions(pred, np.asarray(data.labels), positive=1)


def load_checkpoint(directory) -> ModelSpec:
    return load_model(directory)
