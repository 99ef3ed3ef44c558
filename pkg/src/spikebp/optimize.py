"""Rate-coded loss, Adam updates, weight regularization and the training loop."""

from __future__ import annotations

import logging
import time
from dataclasses import dataclass, field

import numpy as np

from .backprop import GradientSet, SolveFailure, backward
from .core import NeuronParams, Topology
from .simulate import run_forward
from .spsp import compute_tableau

log = logging.getLogger("spikebp.train")

DEFAULT_POST_GAIN_CAP = 0.5


def loss(counts, labels) -> float:
    """Half squared distance between actual and desired firing counts."""
    o = np.asarray(counts, dtype=float)
    y = np.asarray(labels, dtype=float)
    if o.shape != y.shape:
        raise ValueError("counts and labels must have the same length")
    return 0.5 * float(np.sum((o - y) ** 2))


def make_labels(class_index: int, num_classes: int, config) -> np.ndarray:
    """Desired firing counts: target_count at the labeled class, nontarget
    elsewhere."""
    if not 0 <= class_index < num_classes:
        raise ValueError(f"class index {class_index} out of range")
    y = np.full(num_classes, float(config.nontarget_count))
    y[class_index] = float(config.target_count)
    return y


def regularization_gradient(weights, lambda_reg: float):
    """Gradient of the exponential magnitude penalty; zero at w = 0."""
    w = np.asarray(weights, dtype=float)
    return lambda_reg * np.sign(w) * np.exp(np.abs(w))


@dataclass
class TrainConfig:
    target_count: float = 35.0
    nontarget_count: float = 5.0
    epochs: int = 1
    learning_rate: float = 0.001
    lambda_reg: float = 1e-5
    inhibition_weight: float = 0.0
    solver: str = "exact"
    seed: int = 0
    post_gain_cap: float = DEFAULT_POST_GAIN_CAP
    eval_every: int = 1

    def __post_init__(self):
        if not self.target_count > self.nontarget_count >= 0:
            raise ValueError("target_count > nontarget_count >= 0 required")
        if self.epochs < 1:
            raise ValueError("epochs must be >= 1")
        if self.lambda_reg < 0:
            raise ValueError("lambda_reg must be >= 0")
        if self.solver not in ("exact", "taylor"):
            raise ValueError(f"unknown solver {self.solver!r}")


@dataclass
class AdamState:
    """First/second moment estimates, one pair per trainable matrix."""

    m: list
    v: list
    t: int = 0
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    lr: float = 0.001

    @staticmethod
    def for_topology(topology: Topology, lr: float = 0.001) -> "AdamState":
        m, v = [], []
        for k in range(1, topology.n_layers):
            m.append(np.zeros_like(topology.ff_weights[k]))
            v.append(np.zeros_like(topology.ff_weights[k]))
            if topology.is_recurrent(k):
                m.append(np.zeros_like(topology.rec_weights[k]))
                v.append(np.zeros_like(topology.rec_weights[k]))
        return AdamState(m=m, v=v, lr=lr)


def adam_step(state: AdamState, gradients: GradientSet, topology: Topology) -> bool:
    """Bias-corrected Adam update applied in place to the topology's weights.

    Returns False (leaving every moment and weight untouched) when any
    gradient entry is non-finite, so one degenerate sample cannot poison the
    optimizer state.
    """
    pairs = list(gradients.pairs(topology))
    if len(pairs) != len(state.m):
        raise ValueError("gradient set does not match optimizer state")
    if any(not np.all(np.isfinite(g)) for g, _, _ in pairs):
        return False

    state.t += 1
    bc1 = 1.0 - state.beta1 ** state.t
    bc2 = 1.0 - state.beta2 ** state.t
    for idx, (g, w, mask) in enumerate(pairs):
        m, v = state.m[idx], state.v[idx]
        m *= state.beta1
        m += (1.0 - state.beta1) * g
        v *= state.beta2
        v += (1.0 - state.beta2) * g * g
        w -= state.lr * (m / bc1) / (np.sqrt(v / bc2) + state.eps)
        if mask is not None:
            w[~mask] = 0.0
    return True


@dataclass
class EpochMetrics:
    epoch: int
    train_loss: float
    train_acc: float
    test_acc: float = None
    wall_seconds: float = 0.0
    skipped: int = 0


def _predict(counts):
    return int(np.argmax(counts))  # argmax breaks ties at the lowest index


def evaluate(samples, topology: Topology, params: NeuronParams):
    """Accuracy and confusion counts of count-argmax classification."""
    n_out = topology.size(topology.n_layers - 1)
    confusion = np.zeros((n_out, n_out), dtype=int)
    correct = 0
    for sample in samples:
        episode = run_forward(topology, params, sample.input, sample.duration)
        pred = _predict(episode.counts[-1])
        confusion[sample.label, pred] += 1
        correct += int(pred == sample.label)
    accuracy = correct / len(samples) if samples else 0.0
    return accuracy, confusion


def train(train_set, topology: Topology, params: NeuronParams,
          config: TrainConfig, test_set=None, on_epoch=None):
    """Per-sample training: simulate, aggregate, backpropagate, update.

    The sample order of each epoch is a pure function of (seed, epoch).
    Samples whose sensitivity systems are singular, or whose gradients come
    out non-finite, are skipped with a warning.  on_epoch, when given, is
    called with each finished EpochMetrics row; a truthy return aborts the
    remaining epochs (the loop itself has no stopping policy).  Returns
    (topology, metrics).
    """
    if not train_set:
        raise ValueError("training set is empty")
    n_out = topology.size(topology.n_layers - 1)
    state = AdamState.for_topology(topology, lr=config.learning_rate)
    metrics = []
    for epoch in range(1, config.epochs + 1):
        t0 = time.perf_counter()
        order = np.random.default_rng([config.seed, epoch]).permutation(len(train_set))
        total_loss = 0.0
        correct = 0
        skipped = 0
        for pos in order:
            sample = train_set[pos]
            episode = run_forward(topology, params, sample.input, sample.duration,
                                  inhibition_weight=config.inhibition_weight)
            tableau = compute_tableau(episode, topology, params,
                                      post_gain_cap=config.post_gain_cap)
            y = make_labels(sample.label, n_out, config)
            total_loss += loss(episode.counts[-1], y)
            correct += int(_predict(episode.counts[-1]) == sample.label)
            try:
                grads = backward(episode, tableau, topology, params, y,
                                 solver=config.solver)
            except SolveFailure as exc:
                log.warning("sample %d skipped: %s", pos, exc)
                skipped += 1
                continue
            if config.lambda_reg > 0:
                for g, w, mask in grads.pairs(topology):
                    g += regularization_gradient(w, config.lambda_reg)
            if not adam_step(state, grads, topology):
                log.warning("sample %d skipped: non-finite gradient", pos)
                skipped += 1

        row = EpochMetrics(epoch=epoch,
                           train_loss=total_loss / len(train_set),
                           train_acc=correct / len(train_set),
                           skipped=skipped)
        if test_set is not None and (epoch % config.eval_every == 0
                                     or epoch == config.epochs):
            row.test_acc, _ = evaluate(test_set, topology, params)
        row.wall_seconds = time.perf_counter() - t0
        metrics.append(row)
        log.info("epoch %d: loss=%.4f train_acc=%.4f test_acc=%s",
                 epoch, row.train_loss, row.train_acc,
                 "n/a" if row.test_acc is None else f"{row.test_acc:.4f}")
        if on_epoch is not None and on_epoch(row):
            break
    return topology, metrics
