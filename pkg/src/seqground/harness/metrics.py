"""Grounding loss, step/task accuracy and per-step-count subsets."""

from __future__ import annotations

from dataclasses import asdict, dataclass, field
from typing import Callable, Sequence

import numpy as np

from .. import numkernel as nk
from ..grounder import GrounderParams, TaskBatch, collate, forward_batch, predict
from ..fusion_baselines import FusionVariant
from ..numkernel import Mask1D, Tensor2D
from ..taskgen import TaskSample

SUBSET_KEYS = ("2", "3", "4", "5", "6", "7", "8+")
# the paper-style convention merges from 7 upward
SUBSET_KEYS_7PLUS = ("2", "3", "4", "5", "6", "7+")


def subset_key(n_steps: int, merge_from: int = 8) -> str:
    return f"{merge_from}+" if n_steps >= merge_from else str(n_steps)


def grounding_loss(logits: Sequence[Tensor2D], targets: Sequence[int]) -> Tensor2D:
    """Mean cross-entropy over steps; each entry of ``logits`` is ``1 x n_obj``."""
    if len(logits) != len(targets) or not logits:
        raise ValueError(f"{len(logits)} logit rows for {len(targets)} targets")
    total = None
    for lg, tgt in zip(logits, targets):
        if not 0 <= tgt < lg.cols:
            raise ValueError(f"target {tgt} out of range for {lg.cols} objects")
        term = nk.log_softmax_row_pick(lg, np.array([tgt]))
        total = term if total is None else nk.add(total, term)
    return nk.scale(total, -1.0 / len(logits))


def batch_loss(logits: Sequence[Tensor2D], batch: TaskBatch) -> Tensor2D:
    """Mean cross-entropy over every real step of every task in ``batch``."""
    weight = 1.0 / batch.step_valid.sum()
    valid = Mask1D(batch.obj_mask)
    total = None
    for s, lg in enumerate(logits):
        picked = nk.log_softmax_row_pick(lg, batch.targets[s][:, None], valid)
        term = nk.weighted_sum(picked, -weight * batch.step_valid[s][:, None, None])
        total = term if total is None else nk.add(total, term)
    return total


def step_accuracy(predictions: Sequence[Sequence[int]], targets: Sequence[Sequence[int]]) -> float:
    hits = sum(int(p == t) for ps, ts in zip(predictions, targets) for p, t in zip(ps, ts))
    return hits / sum(len(ts) for ts in targets)


def task_accuracy(predictions: Sequence[Sequence[int]], targets: Sequence[Sequence[int]]) -> float:
    return sum(int(list(ps) == list(ts)) for ps, ts in zip(predictions, targets)) / len(targets)


@dataclass
class MetricsReport:
    s_acc: float
    t_acc: float
    n_tasks: int
    n_steps: int
    subset_t_acc: dict = field(default_factory=dict)
    subset_s_acc: dict = field(default_factory=dict)
    subset_tasks: dict = field(default_factory=dict)
    subset_steps: dict = field(default_factory=dict)
    subset_t_acc_7plus: dict = field(default_factory=dict)
    backref_s_acc: float | None = None
    loss_curve: list = field(default_factory=list)
    param_count: int | None = None
    fusion_param_count: int | None = None
    variant: str | None = None
    seed: int | None = None
    config_hash: str | None = None
    wall_clock: float | None = None

    def to_dict(self, include_timing: bool = False) -> dict:
        d = asdict(self)
        if not include_timing:
            d.pop("wall_clock")
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "MetricsReport":
        return cls(**d)


def summarize(tasks: Sequence[TaskSample], predictions: Sequence[Sequence[int]]) -> MetricsReport:
    if not tasks:
        raise ValueError("cannot evaluate an empty task set")
    targets = [t.targets for t in tasks]
    rep = MetricsReport(step_accuracy(predictions, targets), task_accuracy(predictions, targets),
                        len(tasks), sum(len(t) for t in targets))
    for merge_from, out in ((8, rep.subset_t_acc), (7, rep.subset_t_acc_7plus)):
        groups: dict[str, list[int]] = {}
        for i, task in enumerate(tasks):
            groups.setdefault(subset_key(task.n_steps, merge_from), []).append(i)
        keys = SUBSET_KEYS if merge_from == 8 else SUBSET_KEYS_7PLUS
        for key in keys:
            if key not in groups:
                continue
            idx = groups[key]
            out[key] = task_accuracy([predictions[i] for i in idx], [targets[i] for i in idx])
            if merge_from == 8:
                rep.subset_s_acc[key] = step_accuracy([predictions[i] for i in idx], [targets[i] for i in idx])
                rep.subset_tasks[key] = len(idx)
                rep.subset_steps[key] = sum(len(targets[i]) for i in idx)
    hits = [int(p == t) for task, ps in zip(tasks, predictions)
            for p, t, r in zip(ps, task.targets, task.step_refs) if r["kind"] == "backref"]
    rep.backref_s_acc = sum(hits) / len(hits) if hits else None
    return rep


def predict_tasks(params: GrounderParams, tasks: Sequence[TaskSample], batch_size: int = 64) -> list[list[int]]:
    concat = params.variant.fusion is FusionVariant.CONCAT_ALL
    preds: list[list[int]] = []
    for lo in range(0, len(tasks), batch_size):
        chunk = list(tasks[lo:lo + batch_size])
        batch = collate(chunk, params.config.l_max, concat)
        logits = forward_batch(params, batch)
        per_step = np.stack([predict(lg.data[:, 0, :], batch.obj_mask) for lg in logits])
        preds += [[int(per_step[s, i]) for s in range(task.n_steps)] for i, task in enumerate(chunk)]
    return preds


def evaluate(params: GrounderParams, eval_set: Sequence[TaskSample], batch_size: int = 64) -> MetricsReport:
    if not eval_set:
        raise ValueError("cannot evaluate an empty task set")
    rep = summarize(eval_set, predict_tasks(params, eval_set, batch_size))
    rep.variant = params.variant.name
    rep.param_count = params.count()
    rep.fusion_param_count = params.count(fusion_only=True)
    return rep


def evaluate_predictor(predictor: Callable[[TaskSample], Sequence[int]], eval_set: Sequence[TaskSample]) -> MetricsReport:
    """Score an arbitrary per-task predictor (oracles, random baselines)."""
    return summarize(eval_set, [list(predictor(t)) for t in eval_set])
