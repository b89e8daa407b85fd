"""Synthetic sequential-grounding tasks with controllable back-references.

A scene is a set of objects, each with a category, a colour and a random
appearance vector. Objects come in category groups; a group of ``d`` members
with distinct colours is *ambiguous* by category alone.

Every step names its target in one of two ways:

* ``Direct``: ``[ACT, CAT, COL]`` -- category and colour single out the object.
* ``BackRef(k)``: ``[ACT, REF_k, CAT]`` -- "the CAT from k steps ago". The
  category matches ``d`` objects, so only the target of step ``t - k``
  disambiguates it.
"""

from __future__ import annotations

import json
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Iterable

import numpy as np

FORMAT_NAME = "seqground-tasks"
FORMAT_VERSION = 1
MAX_STEPS = 10
PAD = 0


class SpecError(ValueError):
    pass


class DatasetFormatError(ValueError):
    pass


@dataclass(frozen=True)
class Vocab:
    n_actions: int
    n_categories: int
    n_colors: int
    max_depth: int = MAX_STEPS - 1

    @property
    def act0(self) -> int:
        return 1

    @property
    def cat0(self) -> int:
        return self.act0 + self.n_actions

    @property
    def col0(self) -> int:
        return self.cat0 + self.n_categories

    @property
    def ref0(self) -> int:
        return self.col0 + self.n_colors

    @property
    def size(self) -> int:
        return self.ref0 + self.max_depth

    def act(self, a: int) -> int:
        return self.act0 + a

    def cat(self, c: int) -> int:
        return self.cat0 + c

    def col(self, k: int) -> int:
        return self.col0 + k

    def ref(self, depth: int) -> int:
        return self.ref0 + depth - 1

    def decode(self, token: int) -> tuple[str, int]:
        if token == PAD:
            return "pad", 0
        for kind, lo, n in (("act", self.act0, self.n_actions), ("cat", self.cat0, self.n_categories),
                            ("col", self.col0, self.n_colors), ("ref", self.ref0, self.max_depth)):
            if lo <= token < lo + n:
                return kind, token - lo + (1 if kind == "ref" else 0)
        raise ValueError(f"token {token} outside vocabulary of size {self.size}")


DEFAULT_STEP_PROBS = {2: 0.12, 3: 0.16, 4: 0.18, 5: 0.16, 6: 0.12, 7: 0.10, 8: 0.08, 9: 0.05, 10: 0.03}


@dataclass(frozen=True)
class GenSpec:
    n_tasks: int = 2500
    min_objects: int = 6
    max_objects: int = 12
    n_categories: int = 12
    n_colors: int = 6
    n_actions: int = 6
    appearance_dims: int = 8
    distractors: int = 3
    step_probs: dict = field(default_factory=lambda: dict(DEFAULT_STEP_PROBS))
    backref_rate: float = 0.5
    min_depth: int = 1
    depth_decay: float = 0.5
    single_member_refs: bool = True
    seed: int = 0

    @property
    def vocab(self) -> Vocab:
        return Vocab(self.n_actions, self.n_categories, self.n_colors)

    @property
    def feature_dim(self) -> int:
        return self.n_categories + self.n_colors + self.appearance_dims

    def validate(self) -> None:
        probs = {int(k): float(v) for k, v in self.step_probs.items()}
        if self.n_tasks < 1:
            raise SpecError("n_tasks must be positive")
        if not probs or abs(sum(probs.values()) - 1.0) > 1e-9:
            raise SpecError(f"step_probs must sum to 1, got {sum(probs.values())}")
        if any(n < 2 or n > MAX_STEPS for n in probs) or any(p < 0 for p in probs.values()):
            raise SpecError(f"step counts must lie in [2, {MAX_STEPS}] with non-negative weights")
        if self.distractors < 2:
            raise SpecError("distractors must be >= 2 so back-references stay ambiguous")
        if not 2 <= self.min_objects <= self.max_objects:
            raise SpecError("object range must be non-empty with at least 2 objects")
        if self.max_objects < self.distractors:
            raise SpecError(f"max_objects={self.max_objects} cannot hold a group of {self.distractors}")
        if self.n_colors < self.distractors:
            raise SpecError(
                f"n_colors={self.n_colors} < distractors={self.distractors}: members of an ambiguous "
                "group could not be told apart by colour, so Direct steps would not be unique")
        if self.n_categories < self.max_objects:
            raise SpecError(
                f"n_categories={self.n_categories} < max_objects={self.max_objects}: a scene may need "
                "one category per group")
        if not 0.0 <= self.backref_rate <= 1.0:
            raise SpecError("backref_rate must lie in [0, 1]")
        if not 0.0 < self.depth_decay <= 1.0:
            raise SpecError("depth_decay must lie in (0, 1]")
        if self.min_depth < 1:
            raise SpecError("min_depth must be >= 1")
        if self.n_actions < 1 or self.appearance_dims < 0:
            raise SpecError("need at least one action token and non-negative appearance_dims")

    @classmethod
    def from_dict(cls, d: dict) -> "GenSpec":
        known = set(cls.__dataclass_fields__)
        extra = set(d) - known
        if extra:
            raise SpecError(f"unknown GenSpec keys: {sorted(extra)}")
        d = dict(d)
        if "step_probs" in d:
            d["step_probs"] = {int(k): float(v) for k, v in d["step_probs"].items()}
        return cls(**d)


@dataclass
class SceneEncoding:
    object_features: np.ndarray
    categories: list[int]
    colors: list[int]

    @property
    def object_count(self) -> int:
        return self.object_features.shape[0]


@dataclass
class TaskSample:
    task_id: int
    seed: int
    scene: SceneEncoding
    steps: list[list[int]]
    targets: list[int]
    step_refs: list[dict]

    @property
    def n_steps(self) -> int:
        return len(self.steps)

    def to_record(self) -> dict:
        return {
            "task_id": self.task_id,
            "seed": self.seed,
            "object_features": self.scene.object_features.tolist(),
            "categories": list(self.scene.categories),
            "colors": list(self.scene.colors),
            "steps": [list(s) for s in self.steps],
            "targets": list(self.targets),
            "step_refs": [dict(r) for r in self.step_refs],
        }

    @classmethod
    def from_record(cls, rec: dict) -> "TaskSample":
        feats = np.array(rec["object_features"], dtype=np.float64)
        if feats.ndim != 2:
            raise ValueError("object_features must be a matrix")
        return cls(
            task_id=int(rec["task_id"]),
            seed=int(rec["seed"]),
            scene=SceneEncoding(feats, [int(c) for c in rec["categories"]], [int(c) for c in rec["colors"]]),
            steps=[[int(x) for x in s] for s in rec["steps"]],
            targets=[int(x) for x in rec["targets"]],
            step_refs=[dict(r) for r in rec["step_refs"]],
        )

    def __eq__(self, other) -> bool:
        return isinstance(other, TaskSample) and self.to_record() == other.to_record()


def task_seed(seed: int, index: int) -> int:
    return int(np.random.SeedSequence(seed, spawn_key=(index,)).generate_state(1)[0])


def _make_scene(spec: GenSpec, rng: np.random.Generator) -> SceneEncoding:
    d = spec.distractors
    n = int(rng.integers(spec.min_objects, spec.max_objects + 1))
    n_big = int(rng.integers(1, n // d + 1))
    sizes = [d] * n_big
    rest = n - n_big * d
    while rest > 0:
        s = int(rng.integers(1, min(d - 1, rest) + 1))
        sizes.append(s)
        rest -= s
    cats = rng.choice(spec.n_categories, size=len(sizes), replace=False)
    categories, colors = [], []
    for c, s in zip(cats, sizes):
        categories += [int(c)] * s
        colors += [int(k) for k in rng.choice(spec.n_colors, size=s, replace=False)]
    order = rng.permutation(n)
    categories = [categories[i] for i in order]
    colors = [colors[i] for i in order]
    feats = np.zeros((n, spec.feature_dim))
    feats[np.arange(n), categories] = 1.0
    feats[np.arange(n), spec.n_categories + np.array(colors)] = 1.0
    if spec.appearance_dims:
        feats[:, spec.n_categories + spec.n_colors:] = rng.normal(0.0, 1.0, size=(n, spec.appearance_dims))
    return SceneEncoding(feats, categories, colors)


def _pick_depth(valid: list[int], decay: float, rng: np.random.Generator) -> int:
    # geometric over allowed depths, truncated to the valid ones
    w = np.array([decay ** (k - valid[0]) for k in valid])
    return int(valid[rng.choice(len(valid), p=w / w.sum())])


def generate_task(spec: GenSpec, index: int) -> TaskSample:
    seed = task_seed(spec.seed, index)
    rng = np.random.default_rng(seed)
    vocab = spec.vocab
    scene = _make_scene(spec, rng)
    counts = np.bincount(scene.categories, minlength=spec.n_categories)
    ambiguous = counts[scene.categories] >= spec.distractors

    ns = sorted(int(k) for k in spec.step_probs)
    n_steps = int(rng.choice(ns, p=[float(spec.step_probs[k]) for k in ns]))
    steps, targets, refs = [], [], []
    used_member: dict[int, int] = {}
    for t in range(1, n_steps + 1):
        action = vocab.act(int(rng.integers(spec.n_actions)))
        backref = t >= 2 and rng.random() < spec.backref_rate
        valid = [k for k in range(spec.min_depth, t) if ambiguous[targets[t - k - 1]]] if backref else []
        if valid:
            k = _pick_depth(valid, spec.depth_decay, rng)
            obj = targets[t - k - 1]
            steps.append([action, vocab.ref(k), vocab.cat(scene.categories[obj])])
            refs.append({"kind": "backref", "depth": k})
        else:
            # with single_member_refs a group is referenced through one member per task
            allowed = [i for i in range(scene.object_count)
                       if (not spec.single_member_refs or used_member.get(scene.categories[i], i) == i)
                       and (not targets or i != targets[-1])]
            obj = int(rng.choice(allowed)) if allowed else int(targets[-1])
            steps.append([action, vocab.cat(scene.categories[obj]), vocab.col(scene.colors[obj])])
            refs.append({"kind": "direct"})
        used_member.setdefault(scene.categories[obj], obj)
        targets.append(int(obj))
    return TaskSample(index, seed, scene, steps, targets, refs)


def generate(spec: GenSpec) -> list[TaskSample]:
    spec.validate()
    return [generate_task(spec, i) for i in range(spec.n_tasks)]


def split(tasks: list[TaskSample], seed: int, train_fraction: float = 0.8) -> tuple[list, list]:
    order = np.random.default_rng(seed).permutation(len(tasks))
    cut = int(round(train_fraction * len(tasks)))
    return [tasks[i] for i in sorted(order[:cut])], [tasks[i] for i in sorted(order[cut:])]


# -- oracles and audit --------------------------------------------------------


def attribute_candidates(scene: SceneEncoding, instruction: list[int], vocab: Vocab) -> list[int]:
    """Objects consistent with the attribute tokens of one instruction."""
    cat = col = None
    for tok in instruction:
        kind, val = vocab.decode(tok)
        if kind == "cat":
            cat = val
        elif kind == "col":
            col = val
    return [i for i in range(scene.object_count)
            if (cat is None or scene.categories[i] == cat) and (col is None or scene.colors[i] == col)]


def history_blind_predict(scene: SceneEncoding, instruction: list[int], vocab: Vocab) -> int:
    cands = attribute_candidates(scene, instruction, vocab)
    return cands[0] if cands else 0


def history_resolve(task: TaskSample, t: int, vocab: Vocab) -> list[int]:
    """Candidates for step ``t`` (0-based) once earlier targets are known."""
    cands = attribute_candidates(task.scene, task.steps[t], vocab)
    ref = task.step_refs[t]
    if ref["kind"] == "backref":
        prior = task.targets[t - ref["depth"]]
        cands = [c for c in cands if c == prior]
    return cands


@dataclass
class AuditReport:
    n_tasks: int = 0
    n_direct: int = 0
    n_backref: int = 0
    ambiguous_direct: list = field(default_factory=list)
    unresolvable_backref: list = field(default_factory=list)
    weak_backref: list = field(default_factory=list)
    malformed: list = field(default_factory=list)
    blind_backref_accuracy: float | None = None
    mean_backref_candidates: float | None = None
    seconds: float = 0.0

    @property
    def ok(self) -> bool:
        return not (self.ambiguous_direct or self.unresolvable_backref or self.weak_backref or self.malformed)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["ok"] = self.ok
        return d


def solvability_audit(tasks: Iterable[TaskSample], vocab: Vocab, distractors: int = 3) -> AuditReport:
    start = time.perf_counter()
    rep = AuditReport()
    blind_hits, n_cands = 0, []
    for task in tasks:
        rep.n_tasks += 1
        n = task.n_steps
        if not (2 <= n <= MAX_STEPS and len(task.targets) == n and len(task.step_refs) == n):
            rep.malformed.append(task.task_id)
            continue
        if any(not 0 <= o < task.scene.object_count for o in task.targets):
            rep.malformed.append(task.task_id)
            continue
        for t in range(n):
            ref = task.step_refs[t]
            cands = attribute_candidates(task.scene, task.steps[t], vocab)
            if ref["kind"] == "direct":
                rep.n_direct += 1
                if cands != [task.targets[t]]:
                    rep.ambiguous_direct.append((task.task_id, t))
                continue
            rep.n_backref += 1
            k = ref["depth"]
            if not 1 <= k <= t or history_resolve(task, t, vocab) != [task.targets[t]]:
                rep.unresolvable_backref.append((task.task_id, t))
                continue
            if len(cands) < distractors:
                rep.weak_backref.append((task.task_id, t))
            n_cands.append(len(cands))
            blind_hits += history_blind_predict(task.scene, task.steps[t], vocab) == task.targets[t]
    if rep.n_backref:
        rep.blind_backref_accuracy = blind_hits / rep.n_backref
        rep.mean_backref_candidates = float(np.mean(n_cands)) if n_cands else None
    rep.seconds = time.perf_counter() - start
    return rep


# -- serialization -----------------------------------------------------------


def _header(n: int, vocab: Vocab | None) -> dict:
    h = {"format": FORMAT_NAME, "version": FORMAT_VERSION, "count": n}
    if vocab is not None:
        h["vocab"] = asdict(vocab)
    return h


def dumps(tasks: list[TaskSample], vocab: Vocab | None = None) -> str:
    lines = [json.dumps(_header(len(tasks), vocab), sort_keys=True)]
    lines += [json.dumps(t.to_record(), sort_keys=True) for t in tasks]
    return "\n".join(lines) + "\n"


def serialize(tasks: list[TaskSample], path, vocab: Vocab | None = None) -> None:
    Path(path).write_text(dumps(tasks, vocab))


def loads(text: str) -> tuple[list[TaskSample], Vocab | None]:
    lines = text.splitlines()
    if not lines or not lines[0].strip():
        raise DatasetFormatError("missing header (line 1)")
    try:
        header = json.loads(lines[0])
    except json.JSONDecodeError as e:
        raise DatasetFormatError(f"line 1: malformed header: {e}") from None
    if not isinstance(header, dict) or header.get("format") != FORMAT_NAME:
        raise DatasetFormatError("missing header (line 1): not a seqground task file")
    if header.get("version") != FORMAT_VERSION:
        raise DatasetFormatError(
            f"line 1: schema version {header.get('version')} unsupported (expected {FORMAT_VERSION})")
    vocab = Vocab(**header["vocab"]) if "vocab" in header else None
    tasks = []
    for i, line in enumerate(lines[1:]):
        try:
            tasks.append(TaskSample.from_record(json.loads(line)))
        except (json.JSONDecodeError, KeyError, TypeError, ValueError) as e:
            raise DatasetFormatError(f"line {i + 2}: malformed record {i}: {e}") from None
    if "count" in header and header["count"] != len(tasks):
        raise DatasetFormatError(
            f"line {len(lines) + 1}: record {len(tasks)} missing (header declares {header['count']})")
    return tasks, vocab


def deserialize(path) -> list[TaskSample]:
    return loads(Path(path).read_text())[0]
