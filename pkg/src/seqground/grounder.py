"""Toy joint-embedding grounder that hosts the temporal fusion module.

Token layout of a joint embedding ``J_t`` (``T = N_obj + L_max`` rows)::

    [ object tokens (N_obj) | instruction tokens (L) | padding (L_max - L) ]

Objects are projected from their feature vectors, instruction tokens are
looked up in an embedding table, and two residual self-attention mixing
layers fuse the two streams. The grounding head is a two-layer MLP applied
to every object row.

When several tasks are batched, object slots are padded to the largest scene
in the batch; padded slots are masked exactly like padded text tokens.
"""

from __future__ import annotations

import hashlib
import json
import math
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np

from . import numkernel as nk
from .fusion_baselines import FusionRunner, FusionVariant
from .fusion_baselines import init_params as init_fusion_params
from .groundflow import MemoryConfig, MemoryMode
from .numkernel import Mask1D, Tensor2D
from .taskgen import PAD, SceneEncoding, TaskSample

CHECKPOINT_FORMAT = "seqground-checkpoint"
CHECKPOINT_VERSION = 1


@dataclass(frozen=True)
class Variant:
    """Fusion strategy plus, for GroundFlow, its memory configuration."""

    fusion: FusionVariant = FusionVariant.GROUNDFLOW
    memory: MemoryMode = MemoryMode.FULL

    @classmethod
    def parse(cls, text: str) -> "Variant":
        fusion, _, memory = text.partition("/")
        fusion = FusionVariant(fusion)
        if memory and fusion is not FusionVariant.GROUNDFLOW:
            raise ValueError(f"memory mode only applies to groundflow, got {text!r}")
        return cls(fusion, MemoryMode(memory or "full"))

    @property
    def name(self) -> str:
        if self.fusion is FusionVariant.GROUNDFLOW and self.memory is not MemoryMode.FULL:
            return f"groundflow/{self.memory.value}"
        return self.fusion.value

    def __str__(self) -> str:
        return self.name


@dataclass(frozen=True)
class ModelConfig:
    vocab_size: int
    feature_dim: int
    hidden: int = 32
    l_max: int = 4
    n_layers: int = 2


class GrounderParams:
    """Named parameter tensors of the grounder and its fusion module."""

    def __init__(self, config: ModelConfig, variant: Variant, tensors: dict[str, Tensor2D]):
        self.config = config
        self.variant = variant
        self.tensors = tensors

    @classmethod
    def init(cls, config: ModelConfig, variant: Variant, seed: int) -> "GrounderParams":
        rng = np.random.default_rng(seed)
        h = config.hidden
        t: dict[str, Tensor2D] = {
            "tok_emb": nk.uniform_init(rng, config.vocab_size, h, fan_in=h),
            "obj_proj": nk.uniform_init(rng, config.feature_dim, h),
            "obj_bias": nk.uniform_init(rng, 1, h, fan_in=config.feature_dim),
        }
        for layer in range(config.n_layers):
            p = f"mix{layer}."
            for name in ("wq", "wk", "wv"):
                t[p + name] = nk.uniform_init(rng, h, h)
            t[p + "ff1"] = nk.uniform_init(rng, h, h)
            t[p + "ff1_b"] = nk.uniform_init(rng, 1, h, fan_in=h)
            t[p + "ff2"] = nk.uniform_init(rng, h, h)
            t[p + "ff2_b"] = nk.uniform_init(rng, 1, h, fan_in=h)
        t["head.w1"] = nk.uniform_init(rng, h, h)
        t["head.b1"] = nk.uniform_init(rng, 1, h, fan_in=h)
        t["head.w2"] = nk.uniform_init(rng, h, 1)
        t["head.b2"] = nk.uniform_init(rng, 1, 1, fan_in=h)
        for name, tensor in init_fusion_params(variant.fusion, h, rng).items():
            t["fusion." + name] = tensor
        return cls(config, variant, t)

    def __getitem__(self, name: str) -> Tensor2D:
        return self.tensors[name]

    def parameters(self) -> list[Tensor2D]:
        return [self.tensors[k] for k in sorted(self.tensors)]

    def named(self) -> list[tuple[str, Tensor2D]]:
        return sorted(self.tensors.items())

    @property
    def fusion_params(self) -> dict[str, Tensor2D]:
        return {k[len("fusion."):]: v for k, v in self.tensors.items() if k.startswith("fusion.")}

    def count(self, fusion_only: bool = False) -> int:
        return sum(v.data.size for k, v in self.tensors.items()
                   if not fusion_only or k.startswith("fusion."))

    def copy(self) -> "GrounderParams":
        return GrounderParams(self.config, self.variant,
                              {k: Tensor2D(v.data.copy(), requires_grad=v.requires_grad)
                               for k, v in self.tensors.items()})

    # -- checkpoint I/O: JSON, one entry per named array with its shape --

    def to_json(self) -> str:
        doc = {
            "format": CHECKPOINT_FORMAT,
            "version": CHECKPOINT_VERSION,
            "config": asdict(self.config),
            "variant": self.variant.name,
            "arrays": {k: {"shape": list(v.data.shape), "data": v.data.reshape(-1).tolist()}
                       for k, v in self.named()},
        }
        return json.dumps(doc, sort_keys=True) + "\n"

    def save(self, path) -> None:
        Path(path).write_text(self.to_json())

    def digest(self) -> str:
        return hashlib.sha256(self.to_json().encode()).hexdigest()

    @classmethod
    def from_json(cls, text: str) -> "GrounderParams":
        doc = json.loads(text)
        if doc.get("format") != CHECKPOINT_FORMAT:
            raise ValueError("not a seqground checkpoint")
        if doc.get("version") != CHECKPOINT_VERSION:
            raise ValueError(f"checkpoint version {doc.get('version')} unsupported")
        tensors = {}
        for name, entry in doc["arrays"].items():
            data = np.array(entry["data"], dtype=nk.DTYPE)
            tensors[name] = Tensor2D(data.reshape(entry["shape"]), requires_grad=True)
        return cls(ModelConfig(**doc["config"]), Variant.parse(doc["variant"]), tensors)

    @classmethod
    def load(cls, path) -> "GrounderParams":
        return cls.from_json(Path(path).read_text())


# -- batching -------------------------------------------------------------------


@dataclass
class TaskBatch:
    """Tasks padded to a common object count, step count and instruction length.

    ``tokens`` is ``(S, B, L_max)``; ``targets``/``step_valid`` are ``(S, B)``.
    """

    features: np.ndarray
    obj_mask: np.ndarray
    tokens: np.ndarray
    targets: np.ndarray
    step_valid: np.ndarray
    n_objects: np.ndarray

    @property
    def n_steps(self) -> int:
        return self.tokens.shape[0]

    @property
    def size(self) -> int:
        return self.features.shape[0]


def concat_instructions(steps: list[list[int]], l_max: int) -> list[list[int]]:
    """Instruction stream for the concat-all baseline: all steps so far, tail-truncated."""
    out, stream = [], []
    for s in steps:
        stream = stream + list(s)
        out.append(stream[-l_max:])
    return out


def collate(tasks: list[TaskSample], l_max: int, concat_all: bool = False) -> TaskBatch:
    b = len(tasks)
    n_obj = max(t.scene.object_count for t in tasks)
    n_steps = max(t.n_steps for t in tasks)
    f = tasks[0].scene.object_features.shape[1]
    feats = np.zeros((b, n_obj, f))
    obj_mask = np.zeros((b, n_obj), dtype=bool)
    tokens = np.full((n_steps, b, l_max), PAD, dtype=np.int64)
    targets = np.zeros((n_steps, b), dtype=np.int64)
    valid = np.zeros((n_steps, b), dtype=bool)
    for i, task in enumerate(tasks):
        n = task.scene.object_count
        feats[i, :n] = task.scene.object_features
        obj_mask[i, :n] = True
        steps = concat_instructions(task.steps, l_max) if concat_all else task.steps
        for s, instr in enumerate(steps):
            if len(instr) > l_max:
                raise ValueError(f"task {task.task_id} step {s}: {len(instr)} tokens exceed l_max={l_max}")
            tokens[s, i, :len(instr)] = instr
        targets[:task.n_steps, i] = task.targets
        valid[:task.n_steps, i] = True
    return TaskBatch(feats, obj_mask, tokens, targets, valid,
                     np.array([t.scene.object_count for t in tasks]))


# -- model ------------------------------------------------------------------------


def _linear(x: Tensor2D, w: Tensor2D, b: Tensor2D | None = None) -> Tensor2D:
    y = nk.matmul(x, w)
    return nk.add_row_vector(y, b) if b is not None else y


def encode(params: GrounderParams, features: np.ndarray, obj_mask: np.ndarray,
           tokens: np.ndarray) -> tuple[Tensor2D, Mask1D]:
    """Joint embedding for one step (optionally batched over tasks)."""
    cfg = params.config
    if tokens.shape[-1] > cfg.l_max:
        raise ValueError(f"instruction length {tokens.shape[-1]} exceeds l_max={cfg.l_max}")
    if tokens.shape[-1] < cfg.l_max:
        pad = np.full(tokens.shape[:-1] + (cfg.l_max - tokens.shape[-1],), PAD, dtype=np.int64)
        tokens = np.concatenate([tokens, pad], axis=-1)
    mask = Mask1D(np.concatenate([obj_mask, tokens != PAD], axis=-1))
    objs = _linear(Tensor2D(features), params["obj_proj"], params["obj_bias"])
    text = nk.embedding(params["tok_emb"], tokens)
    x = nk.mask_rows(nk.concat_rows([objs, text]), mask)
    inv_sqrt_h = 1.0 / math.sqrt(cfg.hidden)
    for layer in range(cfg.n_layers):
        p = f"mix{layer}."
        q = nk.matmul(x, params[p + "wq"])
        k = nk.matmul(x, params[p + "wk"])
        v = nk.matmul(x, params[p + "wv"])
        att = nk.masked_softmax_rows(nk.scale(nk.matmul(q, nk.transpose(k)), inv_sqrt_h), mask)
        x = nk.add(x, nk.mask_rows(nk.matmul(att, v), mask))
        ff = _linear(nk.relu(_linear(x, params[p + "ff1"], params[p + "ff1_b"])),
                     params[p + "ff2"], params[p + "ff2_b"])
        x = nk.add(x, nk.mask_rows(ff, mask))
    return x, mask


def encode_step(params: GrounderParams, scene: SceneEncoding, instruction: list[int]) -> tuple[Tensor2D, Mask1D]:
    if scene.object_count < 2:
        raise ValueError("a scene needs at least two objects")
    if len(instruction) > params.config.l_max:
        raise ValueError(f"instruction has {len(instruction)} tokens, l_max={params.config.l_max}")
    return encode(params, scene.object_features, np.ones(scene.object_count, dtype=bool),
                  np.array(instruction, dtype=np.int64))


def ground(params: GrounderParams, fused: Tensor2D, n_obj: int) -> Tensor2D:
    """Per-object logits as a ``1 x n_obj`` row (batched: ``(B, 1, n_obj)``)."""
    if n_obj > fused.rows:
        raise ValueError(f"n_obj={n_obj} exceeds the {fused.rows} rows of the fused embedding")
    rows = nk.slice_rows(fused, 0, n_obj)
    hidden = nk.relu(_linear(rows, params["head.w1"], params["head.b1"]))
    scores = _linear(hidden, params["head.w2"], params["head.b2"])
    return nk.reshape_cols(scores, 1, n_obj)


def predict(logits: np.ndarray, valid: np.ndarray | None = None) -> np.ndarray:
    """Argmax over candidates; ties go to the lowest index."""
    x = np.asarray(logits, dtype=float)
    if valid is not None:
        x = np.where(valid, x, -np.inf)
    return np.argmax(x, axis=-1)


def forward_batch(params: GrounderParams, batch: TaskBatch) -> list[Tensor2D]:
    """Per-step logits ``(B, 1, N_slot)`` for a batch of tasks."""
    runner = FusionRunner(params.variant.fusion, MemoryConfig(params.variant.memory), params.fusion_params)
    n_slot = batch.features.shape[1]
    out = []
    for s in range(batch.n_steps):
        j_t, mask = encode(params, batch.features, batch.obj_mask, batch.tokens[s])
        fused = runner.step(j_t, mask)
        out.append(ground(params, fused, n_slot))
    return out


def forward_task(params: GrounderParams, task: TaskSample) -> list[np.ndarray]:
    """Logits for every step of one task (fresh temporal state)."""
    concat = params.variant.fusion is FusionVariant.CONCAT_ALL
    logits = forward_batch(params, collate([task], params.config.l_max, concat))
    return [lg.data[0, 0] for lg in logits]
