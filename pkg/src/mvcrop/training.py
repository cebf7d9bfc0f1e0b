"""Optimization: class-weighted cross-entropy, Adam, mini-batch training with
a seeded validation split and early stopping, ensemble training, and binary
checkpoints."""

from __future__ import annotations

import json
import struct
import time
from dataclasses import dataclass, replace
from pathlib import Path
from typing import Mapping, Sequence

import numpy as np

from .data import Dataset
from .errors import ConfigError, FormatError, NumericError, ShapeError
from .fusion import EnsembleModel, multi_loss
from .rngutil import member_seed, named_stream
from .tensor import Parameter, Tape, Tensor, backward, mul, neg, reduce_mean, reduce_sum, safe_log

__all__ = [
    "Adam",
    "TrainConfig",
    "TrainResult",
    "class_weights",
    "early_stop_schedule",
    "load_checkpoint",
    "save_checkpoint",
    "train",
    "train_ensemble",
    "validation_split",
    "weighted_cross_entropy",
]

_LOG_FLOOR = 1e-12


# ---------------------------------------------------------------------------
# loss
# ---------------------------------------------------------------------------


def class_weights(labels, classes: int) -> np.ndarray:
    """Per-class weights ``K * (1/f_k) / sum_j (1/f_j)`` from label frequencies.

    The weights sum to the class count; balanced labels give exactly 1.
    """
    arr = np.asarray(labels)
    if arr.dtype.kind not in "iu":
        raise ConfigError("labels must be integers")
    if arr.size == 0:
        raise ConfigError("cannot derive class weights from zero labels")
    if arr.min() < 0 or arr.max() >= classes:
        raise ConfigError(f"labels must lie in [0, {classes})")
    counts = np.bincount(arr, minlength=classes)
    if np.any(counts == 0):
        empties = np.flatnonzero(counts == 0).tolist()
        raise ConfigError(f"degenerate class(es) with zero samples: {empties}")
    freq = counts / counts.sum()
    inv = 1.0 / freq
    return classes * inv / inv.sum()


def weighted_cross_entropy(probabilities, labels, weights=None) -> Tensor:
    """Mean over the batch of ``w[y_i] * (-log p[i, y_i])``.

    ``probabilities`` are class probabilities ``[B, K]`` (rows on the
    simplex); the log argument is clamped at 1e-12. Differentiable through
    the probabilities.
    """
    probs = probabilities if isinstance(probabilities, Tensor) else Tensor(np.asarray(probabilities, dtype=np.float64))
    if probs.ndim != 2:
        raise ShapeError(f"probabilities must be [B, K], got shape {probs.shape}")
    batch, classes = probs.shape
    y = np.asarray(labels)
    if y.dtype.kind not in "iu":
        raise ConfigError("labels must be integers")
    if y.shape != (batch,):
        raise ShapeError(f"labels must have shape ({batch},), got {y.shape}")
    if y.size and (y.min() < 0 or y.max() >= classes):
        raise ConfigError(f"labels must lie in [0, {classes})")
    if weights is None:
        w = np.ones(classes, dtype=np.float64)
    else:
        w = np.asarray(weights, dtype=np.float64)
        if w.shape != (classes,):
            raise ShapeError(f"weights must have shape ({classes},), got {w.shape}")

    one_hot = np.zeros((batch, classes), dtype=np.float64)
    one_hot[np.arange(batch), y] = 1.0
    picked = reduce_sum(mul(probs, Tensor(one_hot)), axis=1)
    per_sample = mul(neg(safe_log(picked, floor=_LOG_FLOOR)), Tensor(w[y]))
    return reduce_mean(per_sample)


# ---------------------------------------------------------------------------
# optimizer
# ---------------------------------------------------------------------------


class Adam:
    """Adam with bias correction: ``theta -= lr * mhat / (sqrt(vhat) + eps)``."""

    def __init__(self, lr: float = 1e-3, beta1: float = 0.9,
                 beta2: float = 0.999, eps: float = 1e-8) -> None:
        if lr <= 0:
            raise ConfigError("learning rate must be positive")
        if not 0.0 <= beta1 < 1.0 or not 0.0 <= beta2 < 1.0:
            raise ConfigError("betas must lie in [0, 1)")
        if eps <= 0:
            raise ConfigError("eps must be positive")
        self.lr = lr
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self.state: dict[str, tuple[np.ndarray, np.ndarray]] = {}
        self.step_count = 0

    def step(self, params: Mapping[str, Parameter]) -> None:
        """Apply one update to every parameter that has a gradient."""
        self.step_count += 1
        t = self.step_count
        for name, param in params.items():
            grad = param.grad
            if grad is None:
                continue
            if not np.all(np.isfinite(grad)):
                raise NumericError(f"non-finite gradient for parameter {name!r}")
            if name in self.state:
                m, v = self.state[name]
            else:
                m = np.zeros_like(param.data)
                v = np.zeros_like(param.data)
            m = self.beta1 * m + (1.0 - self.beta1) * grad
            v = self.beta2 * v + (1.0 - self.beta2) * grad * grad
            self.state[name] = (m, v)
            mhat = m / (1.0 - self.beta1 ** t)
            vhat = v / (1.0 - self.beta2 ** t)
            param.tensor.data = param.data - self.lr * mhat / (np.sqrt(vhat) + self.eps)


def _clear_gradients(params: Mapping[str, Parameter]) -> None:
    for param in params.values():
        param.tensor.grad = None


# ---------------------------------------------------------------------------
# config and splits
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class TrainConfig:
    """Knobs of the training protocol."""

    batch_size: int = 256
    max_epochs: int = 100
    patience: int = 5
    validation_fraction: float = 0.1
    learning_rate: float = 1e-3
    min_delta: float = 0.0
    class_weighting: bool = True
    seed: int = 0

    def __post_init__(self) -> None:
        if self.batch_size < 2:
            raise ConfigError("batch size must be at least 2")
        if self.max_epochs < 1:
            raise ConfigError("max epochs must be at least 1")
        if self.patience < 1:
            raise ConfigError("patience must be at least 1")
        if not 0.0 < self.validation_fraction < 1.0:
            raise ConfigError("validation fraction must lie in (0, 1)")
        if self.learning_rate <= 0:
            raise ConfigError("learning rate must be positive")
        if self.min_delta < 0:
            raise ConfigError("min delta must be non-negative")


def validation_split(dataset: Dataset, fraction: float, seed: int):
    """Seeded uniform split into ``(train, validation)``; disjoint, exhaustive."""
    if not 0.0 < fraction < 1.0:
        raise ConfigError(f"validation fraction must lie in (0, 1), got {fraction}")
    n = len(dataset)
    if n < 2:
        raise ConfigError("need at least two samples to hold out validation data")
    n_val = int(np.floor(n * fraction + 0.5))
    n_val = min(max(n_val, 1), n - 1)
    perm = named_stream(seed, "validation-split").permutation(n)
    val_idx = np.sort(perm[:n_val])
    train_idx = np.sort(perm[n_val:])
    return dataset.subset(train_idx), dataset.subset(val_idx)


# ---------------------------------------------------------------------------
# early stopping
# ---------------------------------------------------------------------------


def early_stop_schedule(val_losses: Sequence[float], patience: int,
                        min_delta: float = 0.0) -> tuple[int, int]:
    """Apply the early-stopping rule to a loss sequence.

    Returns ``(epochs_run, best_epoch)`` (both 1-based): training stops after
    ``patience`` consecutive epochs without a strict improvement over the
    best seen loss minus ``min_delta``.
    """
    best = np.inf
    best_epoch = 0
    bad = 0
    epoch = 0
    for epoch, loss in enumerate(val_losses, start=1):
        if loss < best - min_delta:
            best = loss
            best_epoch = epoch
            bad = 0
        else:
            bad += 1
            if bad >= patience:
                return epoch, best_epoch
    return epoch, best_epoch


# ---------------------------------------------------------------------------
# training loop
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class TrainResult:
    """Per-epoch loss history plus run bookkeeping."""

    train_loss: tuple
    val_loss: tuple
    best_epoch: int
    epochs_run: int
    stopped_early: bool
    wall_clock: float
    seed: int


def _snapshot(model):
    params = {name: p.data.copy() for name, p in model.named_parameters().items()}
    buffers = {name: b.copy() for name, b in model.named_buffers().items()}
    return params, buffers


def _restore(model, state) -> None:
    params, buffers = state
    for name, param in model.named_parameters().items():
        param.tensor.data = params[name].copy()
    if buffers:
        model.load_buffers(buffers)


def _dataset_loss(model, dataset: Dataset, weights, batch_size: int) -> float:
    """Exact mean weighted negative log-likelihood over ``dataset`` (inference mode)."""
    model.set_mode("infer")
    n = len(dataset)
    w = np.ones(dataset.classes) if weights is None else weights
    total = 0.0
    for start in range(0, n, batch_size):
        idx = np.arange(start, min(start + batch_size, n))
        batch = {name: dataset.arrays[name][idx] for name in dataset.view_names}
        probs = model.forward(batch).probabilities.data
        y = dataset.labels[idx]
        picked = np.maximum(probs[np.arange(idx.size), y], _LOG_FLOOR)
        total += float(np.sum(w[y] * -np.log(picked)))
    return total / n


def train(model, dataset: Dataset, config: TrainConfig) -> TrainResult:
    """Fit ``model`` on ``dataset`` in place and return the loss history.

    Per epoch: seeded shuffle, mini-batches (trailing size-1 batches are
    dropped), forward, class-weighted cross-entropy (plus the per-view
    multi-loss term when the model carries a positive ``multiloss_gamma``),
    backward, Adam. Validation loss is measured at every epoch end; training
    stops after ``patience`` epochs without improvement and the
    best-validation parameters (and normalization buffers) are restored.
    """
    started = time.perf_counter()
    if np.unique(dataset.labels).size < 2:
        raise ConfigError("degenerate task: training data covers a single class")

    train_part, val_part = validation_split(dataset, config.validation_fraction, config.seed)
    if np.unique(train_part.labels).size < 2:
        raise ConfigError("degenerate task: training split covers a single class")
    weights = (
        class_weights(train_part.labels, dataset.classes)
        if config.class_weighting
        else None
    )

    rng = named_stream(config.seed, "train")
    params = model.named_parameters()
    optimizer = Adam(lr=config.learning_rate)
    gamma = float(getattr(model, "multiloss_gamma", 0.0))

    n_train = len(train_part)
    labels = train_part.labels
    arrays = train_part.arrays
    names = train_part.view_names

    train_losses: list[float] = []
    val_losses: list[float] = []
    best_val = np.inf
    best_epoch = 0
    best_state = _snapshot(model)
    bad = 0
    stopped_early = False

    for epoch in range(1, config.max_epochs + 1):
        model.set_mode("train")
        order = rng.permutation(n_train)
        running = 0.0
        seen = 0
        for start in range(0, n_train, config.batch_size):
            chunk = order[start : start + config.batch_size]
            if chunk.size == 1:
                if n_train == 1:
                    raise ConfigError("training split too small to batch")
                continue  # drop the trailing singleton batch
            batch = {name: arrays[name][chunk] for name in names}
            y = labels[chunk]
            with Tape() as tape:
                outputs = model.forward(batch, rng)
                loss = weighted_cross_entropy(outputs.probabilities, y, weights)
                if gamma > 0:
                    view_probs = outputs.view_probabilities
                    if not view_probs:
                        raise ConfigError(
                            "multi-loss training needs per-view probabilities"
                        )
                    view_losses = [
                        weighted_cross_entropy(p, y, weights)
                        for p in view_probs.values()
                    ]
                    loss = multi_loss(loss, view_losses, gamma)
                backward(loss, tape)
            optimizer.step(params)
            _clear_gradients(params)
            running += loss.data.item() * chunk.size
            seen += chunk.size
        train_losses.append(running / seen)

        val_loss = _dataset_loss(model, val_part, weights, config.batch_size)
        val_losses.append(val_loss)
        if val_loss < best_val - config.min_delta:
            best_val = val_loss
            best_epoch = epoch
            best_state = _snapshot(model)
            bad = 0
        else:
            bad += 1
            if bad >= config.patience:
                stopped_early = True
                break

    _restore(model, best_state)
    model.set_mode("infer")
    return TrainResult(
        train_loss=tuple(train_losses),
        val_loss=tuple(val_losses),
        best_epoch=best_epoch,
        epochs_run=len(val_losses),
        stopped_early=stopped_early,
        wall_clock=time.perf_counter() - started,
        seed=config.seed,
    )


def train_ensemble(model, dataset: Dataset, config: TrainConfig) -> dict:
    """Train every ensemble member on its own view with a derived seed.

    Each member is (re)initialized from its per-view seed and trained on the
    single-view restriction of ``dataset``, exactly as an isolated
    single-view model would be.
    """
    if not isinstance(model, EnsembleModel):
        raise ConfigError("ensemble training expects an ensemble model")
    results = {}
    for schema in model.views:
        seed = member_seed(config.seed, schema.name)
        member = model.members[schema.name]
        member.initialize(seed)
        results[schema.name] = train(
            member,
            dataset.restrict([schema.name]),
            replace(config, seed=seed),
        )
    return results


# ---------------------------------------------------------------------------
# checkpoints
# ---------------------------------------------------------------------------

_CKPT_MAGIC = b"MVLC"
_CKPT_VERSION = 1
_CKPT_HEADER = struct.Struct("<4sIQ")  # magic, version, manifest length


def save_checkpoint(model, path, extra: dict | None = None) -> None:
    """Serialize parameters and buffers: header, JSON manifest, f64 blocks."""
    params = model.named_parameters()
    buffers = model.named_buffers()
    entries = [
        {"name": name, "kind": "param", "shape": list(p.data.shape)}
        for name, p in params.items()
    ] + [
        {"name": name, "kind": "buffer", "shape": list(b.shape)}
        for name, b in buffers.items()
    ]
    manifest = {"version": _CKPT_VERSION, "entries": entries, "extra": extra or {}}
    body = json.dumps(manifest, sort_keys=True, separators=(",", ":")).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(_CKPT_HEADER.pack(_CKPT_MAGIC, _CKPT_VERSION, len(body)))
        fh.write(body)
        for name, p in params.items():
            fh.write(np.ascontiguousarray(p.data).astype("<f8", copy=False).tobytes())
        for name, b in buffers.items():
            fh.write(np.ascontiguousarray(b).astype("<f8", copy=False).tobytes())


def load_checkpoint(model, path) -> dict:
    """Restore a checkpoint into ``model`` and return the extra manifest."""
    try:
        raw = Path(path).read_bytes()
    except OSError as exc:
        raise FormatError(f"cannot read checkpoint: {exc}") from exc
    if len(raw) < _CKPT_HEADER.size:
        raise FormatError("truncated checkpoint header")
    magic, version, manifest_len = _CKPT_HEADER.unpack_from(raw, 0)
    if magic != _CKPT_MAGIC:
        raise FormatError(f"bad magic {magic!r}, expected {_CKPT_MAGIC!r}")
    if version != _CKPT_VERSION:
        raise FormatError(f"unsupported checkpoint version {version}")
    if len(raw) < _CKPT_HEADER.size + manifest_len:
        raise FormatError("truncated checkpoint manifest")
    try:
        manifest = json.loads(
            raw[_CKPT_HEADER.size : _CKPT_HEADER.size + manifest_len].decode("utf-8")
        )
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise FormatError(f"unreadable checkpoint manifest: {exc}") from exc

    params = model.named_parameters()
    buffers = model.named_buffers()
    want = {("param", n): tuple(p.data.shape) for n, p in params.items()}
    want.update({("buffer", n): tuple(b.shape) for n, b in buffers.items()})
    entries = manifest["entries"]
    got = {(e["kind"], e["name"]): tuple(e["shape"]) for e in entries}
    if want != got:
        missing = sorted(set(want) - set(got))
        surplus = sorted(set(got) - set(want))
        shapes = sorted(k for k in set(want) & set(got) if want[k] != got[k])
        raise FormatError(
            f"checkpoint does not match the model (missing {missing}, "
            f"unexpected {surplus}, shape mismatches {shapes})"
        )

    data = raw[_CKPT_HEADER.size + manifest_len :]
    offset = 0
    loaded = {}
    for entry in entries:
        shape = tuple(entry["shape"])
        nbytes = int(np.prod(shape, dtype=np.int64)) * 8
        if offset + nbytes > len(data):
            raise FormatError(f"checkpoint block {entry['name']!r} is truncated")
        loaded[(entry["kind"], entry["name"])] = (
            np.frombuffer(data[offset : offset + nbytes], dtype="<f8").reshape(shape).copy()
        )
        offset += nbytes
    if offset != len(data):
        raise FormatError("checkpoint has trailing bytes")

    for name, p in params.items():
        p.tensor.data = loaded[("param", name)]
    buffer_values = {n: loaded[("buffer", n)] for _, n in
                     [k for k in loaded if k[0] == "buffer"]}
    if buffer_values:
        model.load_buffers(buffer_values)
    return manifest["extra"]
