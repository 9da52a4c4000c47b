"""Cross-entropy objectives, SGD-with-momentum training and defensive distillation."""

from __future__ import annotations

import hashlib
import logging
from dataclasses import dataclass, replace
from typing import Callable, Optional

import numpy as np

from . import autodiff as ad
from .autodiff import DTYPE
from .model import Model, ModelSpec, forward, init_model, predict

log = logging.getLogger(__name__)

PROB_FLOOR = 1e-12


class TrainingDivergedError(ad.NonFiniteError):
    def __init__(self, epoch: int, batch: int, loss: float):
        self.epoch, self.batch, self.loss = epoch, batch, loss
        super().__init__(f"non-finite loss {loss} at epoch {epoch}, batch {batch}")


@dataclass(frozen=True)
class TrainConfig:
    learning_rate: float = 0.1
    lr_decay: float = 1.0
    decay_delay: int = 0  # epochs between decays; 0 disables both decays
    momentum: float = 0.5
    momentum_decay: float = 1.0
    batch_size: int = 128
    epochs: int = 20
    dropout_rate: float = 0.5
    temperature: float = 1.0
    rng_seed: int = 0

    def __post_init__(self):
        if not self.learning_rate > 0:
            raise ValueError("learning_rate must be positive")
        if not 0.0 <= self.momentum < 1.0:
            raise ValueError("momentum must be in [0, 1)")
        if not 0.0 <= self.dropout_rate < 1.0:
            raise ValueError("dropout_rate must be in [0, 1)")
        if self.batch_size < 1 or self.epochs < 0 or self.decay_delay < 0:
            raise ValueError("batch_size must be >= 1, epochs and decay_delay >= 0")
        if not self.temperature > 0:
            raise ValueError("temperature must be positive")


@dataclass(frozen=True)
class LabeledDataset:
    inputs: np.ndarray  # (count, C, H, W) float32
    labels: np.ndarray  # (count, N) probability vectors

    def __post_init__(self):
        labels = np.asarray(self.labels, dtype=DTYPE)
        object.__setattr__(self, "inputs", ad.as_tensor(self.inputs))
        object.__setattr__(self, "labels", labels)
        if labels.ndim != 2 or labels.shape[0] != self.inputs.shape[0]:
            raise ValueError(f"{self.inputs.shape[0]} inputs but labels shaped {labels.shape}")
        check_probabilities(labels, "labels")

    def __len__(self):
        return int(self.inputs.shape[0])

    @property
    def is_hard(self) -> bool:
        return bool(np.all((self.labels == 0) | (self.labels == 1))
                    and np.all(np.count_nonzero(self.labels, axis=1) == 1))

    @property
    def hard_labels(self) -> np.ndarray:
        return np.argmax(self.labels, axis=1)

    @classmethod
    def from_indices(cls, inputs, classes, class_count: int = 10) -> "LabeledDataset":
        classes = np.asarray(classes, dtype=np.int64)
        return cls(inputs, np.eye(class_count, dtype=DTYPE)[classes])

    @classmethod
    def from_raw(cls, raw) -> "LabeledDataset":
        return cls.from_indices(raw.images, raw.labels, raw.class_count)


def check_probabilities(p: np.ndarray, what: str = "probabilities", atol: float = 1e-5):
    p = np.asarray(p)
    if np.any(p < 0) or not np.all(np.isfinite(p)):
        raise ValueError(f"{what} must be finite and nonnegative")
    sums = p.sum(axis=-1, dtype=np.float64)
    if np.any(np.abs(sums - 1.0) > atol):
        worst = float(np.max(np.abs(sums - 1.0)))
        raise ValueError(f"{what} must sum to 1 (worst deviation {worst:.3g})")


def derive_seed(master: int, *keys) -> int:
    """Stable 63-bit seed from a master seed and any printable keys."""
    text = "/".join(str(k) for k in (master,) + keys)
    return int.from_bytes(hashlib.sha256(text.encode()).digest()[:8], "little") >> 1


def cross_entropy_loss(predictions, labels) -> float:
    """``-mean_X sum_i label_i log(max(pred_i, 1e-12))`` over a batch."""
    p = np.atleast_2d(np.asarray(predictions, dtype=np.float64))
    y = np.atleast_2d(np.asarray(labels, dtype=np.float64))
    if p.shape != y.shape:
        raise ValueError(f"predictions {p.shape} and labels {y.shape} differ in shape")
    check_probabilities(y, "labels")
    return float(-(y * np.log(np.maximum(p, PROB_FLOOR))).sum() / p.shape[0])


def kl_decomposition_check(soft_label, prediction):
    """Returns (cross_entropy, entropy, kl) in nats; CE = H(label) + KL(label || pred)."""
    y = np.asarray(soft_label, dtype=np.float64)
    p = np.asarray(prediction, dtype=np.float64)
    if y.shape != p.shape or y.ndim != 1:
        raise ValueError(f"expected two equal-length vectors, got {y.shape} and {p.shape}")
    check_probabilities(y, "soft_label")
    check_probabilities(p, "prediction")
    logp = np.log(np.maximum(p, PROB_FLOOR))
    support = y > 0
    logy = np.log(y[support])
    ce = float(-(y * logp).sum())
    entropy = float(-(y[support] * logy).sum())
    kl = float((y[support] * (logy - logp[support])).sum())
    return ce, entropy, kl


EpochCallback = Callable[[dict], None]


def _fit(spec: ModelSpec, data: LabeledDataset, config: TrainConfig, seed: int,
         eval_set: Optional[LabeledDataset], on_epoch: Optional[EpochCallback]) -> Model:
    if len(data) == 0:
        raise ValueError("cannot train on an empty dataset")
    if data.labels.shape[1] != spec.class_count:
        raise ValueError(f"labels have {data.labels.shape[1]} classes, model {spec.class_count}")
    spec = spec.with_dropout(config.dropout_rate)
    model = init_model(spec, seed, config.temperature)
    params = model.params
    velocity = {k: np.zeros_like(v) for k, v in params.items()}
    shuffle_rng = np.random.default_rng([seed, 1])
    dropout_rng = np.random.default_rng([seed, 2])
    lr, momentum = DTYPE(config.learning_rate), DTYPE(config.momentum)
    n = len(data)

    for epoch in range(1, config.epochs + 1):
        order = shuffle_rng.permutation(n)
        loss_sum = 0.0
        for b, start in enumerate(range(0, n, config.batch_size)):
            idx = order[start:start + config.batch_size]
            g = ad.Graph()
            nodes = {name: g.param(name, v) for name, v in params.items()}
            z = forward(model, g, g.input(data.inputs[idx]), dropout_rng=dropout_rng,
                        param_nodes=nodes)
            loss = ad.softmax_cross_entropy(z, data.labels[idx], config.temperature)
            value = float(loss.value)
            if not np.isfinite(value):
                raise TrainingDivergedError(epoch, b, value)
            grads = ad.backward(g, loss)
            for name, node in nodes.items():
                v = velocity[name]
                v *= momentum
                v -= lr * grads[node]
                params[name] = params[name] + v
            loss_sum += value * len(idx)
        row = {"epoch": epoch, "train_loss": loss_sum / n}
        if eval_set is not None:
            row["test_accuracy"] = float(np.mean(
                np.argmax(predict(model, eval_set.inputs, 1.0), axis=1) == eval_set.hard_labels))
        log.debug("epoch %d %s", epoch, row)
        if on_epoch is not None:
            on_epoch(row)
        if config.decay_delay and epoch % config.decay_delay == 0:
            lr = DTYPE(lr * config.lr_decay)
            momentum = DTYPE(momentum * config.momentum_decay)
    return model


def train(spec: ModelSpec, dataset: LabeledDataset, config: TrainConfig, *,
          eval_set: Optional[LabeledDataset] = None,
          on_epoch: Optional[EpochCallback] = None) -> Model:
    """Mini-batch SGD with heavy-ball momentum on hard labels at ``config.temperature``.

    Initialization, shuffling and dropout masks all derive from
    ``config.rng_seed``, so equal seeds give bit-identical parameters.
    """
    if not dataset.is_hard:
        raise ValueError("train expects hard (indicator) labels; use distill for soft labels")
    return _fit(spec, dataset, config, config.rng_seed, eval_set, on_epoch)


def soft_label_dataset(teacher: Model, dataset: LabeledDataset,
                       batch_size: int = 512) -> LabeledDataset:
    """Relabels ``dataset`` with the teacher's probabilities at its own temperature."""
    parts = [predict(teacher, dataset.inputs[i:i + batch_size], teacher.temperature)
             for i in range(0, len(dataset), batch_size)]
    labels = np.concatenate(parts) if parts else np.zeros((0, teacher.class_count), DTYPE)
    return LabeledDataset(dataset.inputs, labels)


def distill(spec: ModelSpec, dataset: LabeledDataset, config: TrainConfig, *,
            eval_set: Optional[LabeledDataset] = None,
            on_epoch: Optional[EpochCallback] = None) -> tuple[Model, Model]:
    """Defensive distillation: teacher at T on hard labels, then a freshly
    initialized student of identical architecture at the same T on the
    teacher's soft labels only.

    ``on_epoch`` rows carry a ``stage`` key ("teacher" or "student").
    """
    def tagged(stage):
        if on_epoch is None:
            return None
        return lambda row: on_epoch({"stage": stage, **row})

    teacher = train(spec, dataset, config, eval_set=eval_set, on_epoch=tagged("teacher"))
    soft = soft_label_dataset(teacher, dataset)
    student_seed = derive_seed(config.rng_seed, "student")
    student = _fit(spec, soft, replace(config, rng_seed=student_seed), student_seed,
                   eval_set, tagged("student"))
    return teacher, student

