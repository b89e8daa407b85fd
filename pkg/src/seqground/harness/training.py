"""AdamW training over whole-task batches."""

from __future__ import annotations

import logging
import math
import time
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .. import numkernel as nk
from ..fusion_baselines import FusionVariant
from ..grounder import GrounderParams, ModelConfig, collate, forward_batch
from ..taskgen import TaskSample, Vocab
from .config import ExperimentConfig
from .metrics import batch_loss

log = logging.getLogger(__name__)


class TrainingDiverged(RuntimeError):
    pass


class AdamW:
    """Adam with decoupled weight decay, on numpy arrays in place."""

    def __init__(self, params: Sequence[nk.Tensor2D], lr=1e-4, betas=(0.9, 0.999), eps=1e-8, weight_decay=0.05):
        self.params = list(params)
        self.lr, self.betas, self.eps, self.weight_decay = lr, betas, eps, weight_decay
        self.m = [np.zeros_like(p.data) for p in self.params]
        self.v = [np.zeros_like(p.data) for p in self.params]
        self.t = 0

    def step(self) -> None:
        self.t += 1
        b1, b2 = self.betas
        c1 = 1 - b1 ** self.t
        c2 = 1 - b2 ** self.t
        for p, m, v in zip(self.params, self.m, self.v):
            if p.grad is None:
                continue
            g = p.grad
            m *= b1
            m += (1 - b1) * g
            v *= b2
            v += (1 - b2) * g * g
            p.data = p.data - self.lr * self.weight_decay * p.data \
                - self.lr * (m / c1) / (np.sqrt(v / c2) + self.eps)

    def zero_grad(self) -> None:
        nk.zero_grad(self.params)


def clip_grad_norm(params: Sequence[nk.Tensor2D], max_norm: float) -> float:
    grads = [p.grad for p in params if p.grad is not None]
    norm = math.sqrt(sum(float((g * g).sum()) for g in grads))
    if norm > max_norm:
        s = max_norm / (norm + 1e-12)
        for p in params:
            if p.grad is not None:
                p.grad = p.grad * s
    return norm


def make_batches(tasks: Sequence[TaskSample], batch_size: int, rng: np.random.Generator) -> list[list[TaskSample]]:
    """Shuffle, bucket by step count so little padding is run, shuffle batch order.

    Whole tasks only: a task is never split across batches.
    """
    order = rng.permutation(len(tasks))
    buckets: dict[int, list[TaskSample]] = {}
    for i in order:
        buckets.setdefault(tasks[i].n_steps, []).append(tasks[i])
    batches = [bucket[lo:lo + batch_size] for n in sorted(buckets)
               for bucket in [buckets[n]] for lo in range(0, len(bucket), batch_size)]
    return [batches[i] for i in rng.permutation(len(batches))]


def subsample(tasks: Sequence[TaskSample], fraction: float, seed: int) -> list[TaskSample]:
    if fraction >= 1.0:
        return list(tasks)
    n = max(1, int(round(fraction * len(tasks))))
    keep = np.sort(np.random.default_rng([seed, 1]).permutation(len(tasks))[:n])
    return [tasks[i] for i in keep]


@dataclass
class TrainResult:
    params: GrounderParams
    loss_curve: list = field(default_factory=list)
    seconds: float = 0.0


def model_config(config: ExperimentConfig, vocab: Vocab, feature_dim: int) -> ModelConfig:
    return ModelConfig(vocab.size, feature_dim, config.hidden, config.effective_l_max)


def train(config: ExperimentConfig, train_set: Sequence[TaskSample], vocab: Vocab,
          params: GrounderParams | None = None) -> TrainResult:
    if not train_set:
        raise ValueError("empty training set")
    start = time.perf_counter()
    variant = config.parsed_variant
    feature_dim = train_set[0].scene.object_features.shape[1]
    if params is None:
        params = GrounderParams.init(model_config(config, vocab, feature_dim), variant, config.seed)
    tasks = subsample(train_set, config.data_fraction, config.seed)
    rng = np.random.default_rng([config.seed, 2])
    opt = AdamW(params.parameters(), config.lr, (config.beta1, config.beta2), config.eps, config.weight_decay)
    concat = variant.fusion is FusionVariant.CONCAT_ALL
    curve = []
    for epoch in range(config.epochs):
        total, steps = 0.0, 0
        for b, chunk in enumerate(make_batches(tasks, config.batch_size, rng)):
            batch = collate(chunk, params.config.l_max, concat)
            opt.zero_grad()
            with nk.ComputeTape() as tape:
                loss = batch_loss(forward_batch(params, batch), batch)
            value = loss.item()
            if not math.isfinite(value):
                raise TrainingDiverged(f"non-finite loss {value} at epoch {epoch}, batch {b} "
                                       f"(tasks {[t.task_id for t in chunk]})")
            tape.backward(loss)
            clip_grad_norm(opt.params, config.clip_norm)
            opt.step()
            n = int(batch.step_valid.sum())
            total += value * n
            steps += n
        curve.append(total / steps)
        log.info("epoch %d  loss %.4f", epoch + 1, curve[-1])
    return TrainResult(params, curve, time.perf_counter() - start)
