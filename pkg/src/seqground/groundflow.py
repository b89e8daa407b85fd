"""Recurrent cross-attention fusion with short- and long-term memory.

Step 1 passes the joint embedding through untouched. From step 2 on the
current embedding attends (no learned projections, scale ``1/sqrt(H)``) over
a history embedding built from memory:

* step 2: history is the previous fused output;
* step >= 3: history is the previous fused output plus the running sum of
  all older fused outputs, each long-term token scaled by its mean cosine
  relevance to the current tokens.
"""

from __future__ import annotations

import enum
import math
from dataclasses import dataclass, replace

import numpy as np

from . import numkernel as nk
from .numkernel import Mask1D, Tensor2D


class MemoryMode(str, enum.Enum):
    FULL = "full"
    SHORT_ONLY = "short_only"
    LONG_ONLY_MERGED = "long_only_merged"
    RAW_SHORT = "raw_short"
    RAW_LONG = "raw_long"


@dataclass(frozen=True)
class MemoryConfig:
    mode: MemoryMode = MemoryMode.FULL

    @classmethod
    def parse(cls, text: str) -> "MemoryConfig":
        return cls(MemoryMode(text))


@dataclass(frozen=True)
class TemporalState:
    """Per-task recurrent state.

    ``step_index`` is the index of the step about to be fused (1-based).
    ``token_mask`` marks token positions that were real in any fused step so
    far; it doubles as the key mask for attending over history.
    ``prev_raw``/``long_term_raw`` hold the unfused counterparts used by the
    raw-memory ablations.
    """

    step_index: int = 1
    prev_fused: Tensor2D | None = None
    long_term: Tensor2D | None = None
    token_mask: Mask1D | None = None
    prev_raw: Tensor2D | None = None
    long_term_raw: Tensor2D | None = None


def reset(state: TemporalState | None = None) -> TemporalState:
    return TemporalState()


def _check_step(state: TemporalState, j_t: Tensor2D, mask: Mask1D) -> None:
    if mask.length != j_t.rows:
        raise nk.ShapeError(f"mask length {mask.length} does not match {j_t.rows} tokens")
    if mask.flags.shape[:-1] != j_t.batch_shape:
        raise nk.ShapeError(f"mask batch {mask.flags.shape[:-1]} vs embedding batch {j_t.batch_shape}")
    if state.prev_fused is not None and state.prev_fused.shape != j_t.shape:
        raise nk.ShapeError(f"embedding {j_t.shape} does not match state {state.prev_fused.shape}")


def _masked_col_mean(a: Tensor2D, mask: Mask1D) -> Tensor2D:
    # mean over the real columns only, so padding never dilutes relevance
    w = mask.flags.astype(nk.DTYPE)
    w = w / w.sum(axis=-1, keepdims=True)
    return nk.matmul(a, Tensor2D(w[..., :, None]))


def relevance(long_term: Tensor2D, j_t: Tensor2D, mask: Mask1D) -> Tensor2D:
    """Per-token relevance of long-term memory to the current step (T x 1)."""
    return _masked_col_mean(nk.cosine_rows(long_term, j_t), mask)


def memory_retrieve(state: TemporalState, j_t: Tensor2D, config: MemoryConfig,
                    mask: Mask1D | None = None) -> Tensor2D:
    """History embedding used as keys/values for the current step."""
    if state.step_index < 2:
        raise ValueError("memory is not consulted at step 1")
    mask = mask if mask is not None else Mask1D.full(j_t.rows)
    if state.step_index == 2:
        return state.prev_fused

    mode = config.mode
    if mode is MemoryMode.SHORT_ONLY:
        return state.prev_fused
    if mode is MemoryMode.LONG_ONLY_MERGED:
        return nk.add(state.prev_fused, state.long_term)
    short = state.prev_raw if mode is MemoryMode.RAW_SHORT else state.prev_fused
    long = state.long_term_raw if mode is MemoryMode.RAW_LONG else state.long_term
    alpha = relevance(long, j_t, mask)
    return nk.add(short, nk.row_broadcast_mul(long, alpha))


def attend(j_t: Tensor2D, j_h: Tensor2D, key_mask: Mask1D, query_mask: Mask1D) -> Tensor2D:
    """``softmax(J_t J_h^T / sqrt(H)) J_h`` with padding queries zeroed."""
    scores = nk.scale(nk.matmul(j_t, nk.transpose(j_h)), 1.0 / math.sqrt(j_t.cols))
    weights = nk.masked_softmax_rows(scores, key_mask)
    return nk.mask_rows(nk.matmul(weights, j_h), query_mask)


def fuse_step(state: TemporalState, j_t: Tensor2D, config: MemoryConfig = MemoryConfig(),
              mask: Mask1D | None = None) -> tuple[Tensor2D, TemporalState]:
    mask = mask if mask is not None else Mask1D(np.ones(j_t.batch_shape + (j_t.rows,), bool))
    _check_step(state, j_t, mask)
    t = state.step_index

    if t == 1:
        fused = j_t
        return fused, TemporalState(
            step_index=2,
            prev_fused=fused,
            long_term=Tensor2D(np.zeros(j_t.shape)),
            token_mask=mask,
            prev_raw=j_t,
            long_term_raw=Tensor2D(np.zeros(j_t.shape)),
        )

    j_h = memory_retrieve(state, j_t, config, mask)
    fused = nk.add(j_t, attend(j_t, j_h, state.token_mask, mask))

    # t >= 2 here, so the next step is >= 3 and long-term memory absorbs J^_{t-1}
    return fused, replace(
        state,
        step_index=t + 1,
        prev_fused=fused,
        long_term=nk.add(state.long_term, state.prev_fused),
        token_mask=state.token_mask | mask,
        prev_raw=j_t,
        long_term_raw=nk.add(state.long_term_raw, state.prev_raw),
    )


def fuse_sequence(embeddings, config: MemoryConfig = MemoryConfig(), masks=None) -> list[Tensor2D]:
    """Run a fresh state over a list of per-step joint embeddings."""
    state = reset()
    out = []
    for i, j_t in enumerate(embeddings):
        fused, state = fuse_step(state, j_t, config, None if masks is None else masks[i])
        out.append(fused)
    return out
