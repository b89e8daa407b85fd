"""Multi-variant, multi-seed comparison against a declared baseline."""

from __future__ import annotations

import logging
import os
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from ..taskgen import TaskSample, Vocab
from .config import ExperimentConfig
from .metrics import SUBSET_KEYS, MetricsReport, evaluate
from .training import train

log = logging.getLogger(__name__)

THREADS_ENV = "SEQGROUND_THREADS"
DEFAULT_SEEDS = (1, 2, 3)


@dataclass
class VariantRow:
    variant: str
    config_hash: str
    reports: list[MetricsReport]
    mean: dict = field(default_factory=dict)
    spread: dict = field(default_factory=dict)
    delta: dict = field(default_factory=dict)
    subset_delta_t_acc: dict = field(default_factory=dict)


@dataclass
class ComparisonTable:
    baseline: str
    seeds: list[int]
    rows: list[VariantRow]

    def row(self, variant: str) -> VariantRow:
        for r in self.rows:
            if r.variant == variant:
                return r
        raise KeyError(variant)


def worker_count() -> int:
    raw = os.environ.get(THREADS_ENV, "1")
    try:
        return max(1, int(raw))
    except ValueError:
        raise ValueError(f"{THREADS_ENV} must be an integer, got {raw!r}") from None


def run_one(config: ExperimentConfig, train_set: Sequence[TaskSample], eval_set: Sequence[TaskSample],
            vocab: Vocab) -> MetricsReport:
    result = train(config, train_set, vocab)
    rep = evaluate(result.params, eval_set)
    rep.loss_curve = result.loss_curve
    rep.seed = config.seed
    rep.config_hash = config.hash()
    rep.wall_clock = result.seconds
    log.info("%s seed %d: s-acc %.3f t-acc %.3f (%.0fs)", rep.variant, config.seed, rep.s_acc, rep.t_acc,
             result.seconds)
    return rep


def _stats(values: list[float]) -> tuple[float, float | None]:
    mean = float(np.mean(values))
    return mean, (float(np.std(values, ddof=1)) if len(values) > 1 else None)


def _aggregate(reports: list[MetricsReport]) -> tuple[dict, dict]:
    mean, spread = {}, {}
    for key in ("s_acc", "t_acc"):
        mean[key], spread[key] = _stats([getattr(r, key) for r in reports])
    for key in SUBSET_KEYS:
        vals = [r.subset_t_acc[key] for r in reports if key in r.subset_t_acc]
        if len(vals) == len(reports):
            mean[f"t_acc@{key}"], spread[f"t_acc@{key}"] = _stats(vals)
    return mean, spread


def build_table(configs: Sequence[ExperimentConfig], reports: list[list[MetricsReport]],
                seeds: Sequence[int], baseline: str | None = None) -> ComparisonTable:
    rows = []
    for cfg, reps in zip(configs, reports):
        mean, spread = _aggregate(reps)
        rows.append(VariantRow(cfg.variant, cfg.with_(seed=0).hash(), reps, mean, spread))
    baseline = baseline or rows[0].variant
    base = next((r for r in rows if r.variant == baseline), None)
    if base is None:
        raise ValueError(f"baseline {baseline!r} is not among the grid variants")
    for r in rows:
        r.delta = {"s_acc": r.mean["s_acc"] - base.mean["s_acc"], "t_acc": r.mean["t_acc"] - base.mean["t_acc"]}
        r.subset_delta_t_acc = {k: r.mean[f"t_acc@{k}"] - base.mean[f"t_acc@{k}"] for k in SUBSET_KEYS
                                if f"t_acc@{k}" in r.mean and f"t_acc@{k}" in base.mean}
    return ComparisonTable(baseline, list(seeds), rows)


def run_ablation_grid(configs: Sequence[ExperimentConfig], train_set: Sequence[TaskSample],
                      eval_set: Sequence[TaskSample], vocab: Vocab, seeds: Sequence[int] = DEFAULT_SEEDS,
                      baseline: str | None = None, workers: int | None = None) -> ComparisonTable:
    if len(configs) < 2:
        raise ValueError("an ablation grid needs at least two configs")
    if len({c.eval_path for c in configs}) > 1 or len({c.train_path for c in configs}) > 1:
        raise ValueError("grid configs disagree on train/eval datasets: "
                         f"{sorted({str(c.eval_path) for c in configs})}")
    if not seeds:
        raise ValueError("need at least one seed")
    jobs = [c.with_(seed=s) for c in configs for s in seeds]
    workers = workers or worker_count()
    if workers > 1:
        with ProcessPoolExecutor(workers) as pool:
            flat = list(pool.map(run_one, jobs, [train_set] * len(jobs), [eval_set] * len(jobs),
                                 [vocab] * len(jobs)))
    else:
        flat = [run_one(j, train_set, eval_set, vocab) for j in jobs]
    per_cfg = [flat[i * len(seeds):(i + 1) * len(seeds)] for i in range(len(configs))]
    return build_table(configs, per_cfg, seeds, baseline)
