"""Supervised training and two-phase defensive distillation."""

import logging
from dataclasses import dataclass, replace

import numpy as np

from advl.network import Network, backward, forward, init_network, log_softmax_T, softmax_T
from advl.optim import AdamState, adam_step
from advl.tensor import DTYPE

log = logging.getLogger(__name__)


class TrainingDivergedError(RuntimeError):
    def __init__(self, epoch, batch, loss):
        super().__init__(f"non-finite training loss {loss} at epoch {epoch}, batch {batch}")
        self.epoch, self.batch, self.loss = epoch, batch, loss


@dataclass
class LabeledDataset:
    """Images in ``[0, 1]`` (leading axis = sample) with integer labels."""

    images: np.ndarray
    labels: np.ndarray
    classes: int = 10

    def __post_init__(self):
        self.images = np.asarray(self.images, dtype=DTYPE)
        self.labels = np.asarray(self.labels, dtype=np.int64)
        if len(self.images) != len(self.labels):
            raise ValueError(f"{len(self.images)} images but {len(self.labels)} labels")
        if self.images.size and (self.images.min() < 0 or self.images.max() > 1):
            raise ValueError("pixel values must lie in [0, 1]")
        if self.labels.size and (self.labels.min() < 0 or self.labels.max() >= self.classes):
            raise ValueError(f"labels must lie in [0, {self.classes})")

    def __len__(self):
        return len(self.labels)

    @property
    def image_shape(self):
        return self.images.shape[1:]

    def subset(self, index):
        return LabeledDataset(self.images[index], self.labels[index], self.classes)

    def head(self, n):
        return self.subset(slice(0, n))

    def one_hot(self):
        out = np.zeros((len(self), self.classes))
        out[np.arange(len(self)), self.labels] = 1.0
        return out


@dataclass
class SoftLabelSet:
    """Teacher probability vectors, row ``i`` aligned with dataset sample ``i``."""

    probs: np.ndarray
    temperature: float = 1.0

    def __post_init__(self):
        self.probs = np.asarray(self.probs, dtype=DTYPE)
        if np.any(self.probs < 0) or not np.allclose(self.probs.sum(axis=1), 1.0, atol=1e-9):
            raise ValueError("soft labels must be probability vectors")

    def __len__(self):
        return len(self.probs)

    def entropy(self):
        p = self.probs
        with np.errstate(divide="ignore", invalid="ignore"):
            terms = np.where(p > 0, -p * np.log(p), 0.0)
        return terms.sum(axis=1)


@dataclass
class TrainConfig:
    epochs: int = 10
    batch_size: int = 128
    learning_rate: float = 0.01
    momentum: float = 0.9
    optimizer: str = "sgd"  # "sgd" (momentum) or "adam"
    beta1: float = 0.9
    beta2: float = 0.999
    adam_eps: float = 1e-8
    seed: int = 0
    temperature: float = 1.0
    lr_decay: float = 1.0  # learning rate multiplier applied after every epoch
    precision: str = "float64"  # "float32" halves training time; results are stored as float64

    def __post_init__(self):
        if self.precision not in ("float64", "float32"):
            raise ValueError(f"unknown precision {self.precision!r}")
        if self.epochs < 0 or self.batch_size < 1 or not self.learning_rate > 0:
            raise ValueError("epochs must be >= 0, batch_size >= 1 and learning_rate > 0")
        if not 0 < self.lr_decay <= 1:
            raise ValueError("lr_decay must lie in (0, 1]")
        if not self.temperature > 0:
            raise ValueError("temperature must be positive")
        if self.optimizer not in ("sgd", "adam"):
            raise ValueError(f"unknown optimizer {self.optimizer!r}")


def cross_entropy(probs, target):
    """``-sum_i target_i * log probs_i``; zero-weight terms contribute nothing."""
    probs = np.asarray(probs, dtype=DTYPE)
    target = np.asarray(target, dtype=DTYPE)
    with np.errstate(divide="ignore", invalid="ignore"):
        terms = np.where(target > 0, target * np.log(probs), 0.0)
    return -terms.sum(axis=-1)


def cross_entropy_logits(logits, target, T=1.0):
    """Cross-entropy of ``softmax_T(logits)`` against ``target`` via log-sum-exp.

    Returns ``(values, grad_logits)``.
    """
    logp = log_softmax_T(logits, T)
    target = np.asarray(target, dtype=DTYPE)
    values = -(np.where(target > 0, target * logp, 0.0)).sum(axis=-1)
    grad = (np.exp(logp) - target) / T
    return values, grad


def soft_labels(teacher, images, T=None, batch_size=500, precision=None):
    """Probability vectors of ``teacher`` at temperature ``T`` (default: its own).

    ``precision`` optionally runs the teacher's forward passes in another
    float type; the probabilities themselves are always float64.
    """
    T = teacher.temperature if T is None else T
    if precision is not None:
        teacher = teacher.astype(precision)
        images = np.asarray(images, dtype=precision)
    out = [softmax_T(forward(teacher, images[i:i + batch_size]).logits, T)
           for i in range(0, len(images), batch_size)]
    return SoftLabelSet(np.concatenate(out), T)


def accuracy(net, data, batch_size=500):
    correct = 0
    for i in range(0, len(data), batch_size):
        pred = np.argmax(forward(net, data.images[i:i + batch_size]).logits, axis=1)
        correct += int((pred == data.labels[i:i + batch_size]).sum())
    return correct / len(data)


def train(net, data, targets=None, cfg=None, history=None, on_epoch=None):
    """Fit ``net`` on ``data`` against one-hot labels or soft targets.

    ``targets`` may be ``None`` (one-hot of ``data.labels``), a
    :class:`SoftLabelSet`, or an ``N x m`` array. The network runs at
    ``cfg.temperature`` throughout; a trained copy carrying that temperature
    is returned. Per-epoch mean losses are appended to ``history`` if given,
    and ``on_epoch(epoch, net, mean_loss)`` is called after every epoch.
    """
    cfg = cfg or TrainConfig()
    if targets is None:
        y = data.one_hot()
    elif isinstance(targets, SoftLabelSet):
        y = targets.probs
    else:
        y = np.asarray(targets, dtype=DTYPE)
    if y.shape != (len(data), net.class_count):
        raise ValueError(f"targets shape {y.shape} does not match data/classes")

    net = net.with_temperature(cfg.temperature).astype(cfg.precision)
    if cfg.epochs == 0:
        return net.astype(DTYPE)
    images = data.images.astype(cfg.precision, copy=False)
    rng = np.random.default_rng(cfg.seed)
    slots = [i for i, p in enumerate(net.params) if p is not None]
    if cfg.optimizer == "adam":
        states = {(i, j): AdamState.zeros_like(net.params[i][j], cfg.learning_rate, cfg.beta1,
                                               cfg.beta2, cfg.adam_eps)
                  for i in slots for j in (0, 1)}
    else:
        velocity = {(i, j): np.zeros_like(net.params[i][j]) for i in slots for j in (0, 1)}

    n = len(data)
    for epoch in range(cfg.epochs):
        lr = cfg.learning_rate * cfg.lr_decay ** epoch
        if cfg.optimizer == "adam":
            for st in states.values():
                st.lr = lr
        order = rng.permutation(n)
        total = 0.0
        for b, start in enumerate(range(0, n, cfg.batch_size)):
            idx = order[start:start + cfg.batch_size]
            trace = forward(net, images[idx], keep_cols=True)
            values, grad_logits = cross_entropy_logits(trace.logits, y[idx], net.temperature)
            loss = float(values.mean())
            if not np.isfinite(loss):
                raise TrainingDivergedError(epoch, b, loss)
            total += loss * len(idx)
            _, grads = backward(net, trace, grad_logits / len(idx), need_input=False,
                                need_params=True)
            for i in slots:
                new = []
                for j in (0, 1):
                    key = (i, j)
                    if cfg.optimizer == "adam":
                        _, w = adam_step(states[key], net.params[i][j], grads[i][j])
                    else:
                        velocity[key] = cfg.momentum * velocity[key] - lr * grads[i][j]
                        w = net.params[i][j] + velocity[key]
                    new.append(w)
                net.params[i] = tuple(new)
        mean = total / n
        log.info("epoch %d/%d  T=%g  loss %.5f", epoch + 1, cfg.epochs, net.temperature, mean)
        if history is not None:
            history.append(mean)
        if on_epoch is not None:
            on_epoch(epoch, net, mean)
    return net.astype(DTYPE)


def distill(data, cfg, layers=None, teacher=None, student_cfg=None):
    """Two-phase defensive distillation at ``cfg.temperature``.

    The teacher is trained on hard labels at temperature T (unless a trained
    ``teacher`` is passed in), its temperature-T probabilities become the
    student's targets, and the student is trained at T on those soft labels
    only. The returned student is set to temperature 1 for deployment; the
    teacher keeps T.
    """
    T = cfg.temperature
    if T < 1:
        raise ValueError("distillation temperature must be >= 1")
    if layers is None:
        from advl.network import mnist_layers
        layers = mnist_layers(data.classes)
    if teacher is None:
        teacher = train(init_network(data.image_shape, layers, seed=cfg.seed), data, None, cfg)
    else:
        teacher = teacher.with_temperature(T)
    labels = soft_labels(teacher, data.images, T, precision=cfg.precision)
    scfg = student_cfg or replace(cfg, seed=cfg.seed + 1)
    scfg = replace(scfg, temperature=T)
    student = train(init_network(data.image_shape, layers, seed=scfg.seed), data, labels, scfg)
    return teacher, student.with_temperature(1.0)


def mean_max_probability(net, data, only_correct=True, batch_size=500):
    """Average top-1 probability, optionally over correctly classified samples."""
    tops = []
    for i in range(0, len(data), batch_size):
        tr = forward(net, data.images[i:i + batch_size])
        keep = np.ones(len(tr.probs), bool)
        if only_correct:
            keep = tr.probs.argmax(1) == data.labels[i:i + batch_size]
        tops.append(tr.probs.max(1)[keep])
    tops = np.concatenate(tops)
    return float(tops.mean()) if tops.size else float("nan")
