"""Alternative temporal fusion strategies compared against GroundFlow.

All cells act on each token row independently with weights shared across
rows, so every variant maps a ``T x H`` joint embedding to ``T x H``.
"""

from __future__ import annotations

import enum
import math
from dataclasses import dataclass, field

import numpy as np

from . import groundflow
from . import numkernel as nk
from .numkernel import Mask1D, Tensor2D


class FusionVariant(str, enum.Enum):
    NONE = "none"
    CONCAT_ALL = "concat_all"
    LSTM = "lstm"
    GRU = "gru"
    TRANSFORMER = "transformer"
    GROUNDFLOW = "groundflow"


LSTM_GATES = ("i", "f", "g", "o")
GRU_GATES = ("z", "r", "n")


def parameter_count(variant: FusionVariant | str, hidden: int) -> int:
    """Learnable parameters the fusion strategy adds on top of the grounder."""
    variant = FusionVariant(variant)
    if variant is FusionVariant.LSTM:
        return 4 * (2 * hidden * hidden + hidden)
    if variant is FusionVariant.GRU:
        return 3 * (2 * hidden * hidden + hidden)
    if variant is FusionVariant.TRANSFORMER:
        return 4 * hidden * hidden
    return 0


def init_params(variant: FusionVariant | str, hidden: int, rng: np.random.Generator) -> dict[str, Tensor2D]:
    variant = FusionVariant(variant)
    params: dict[str, Tensor2D] = {}
    if variant in (FusionVariant.LSTM, FusionVariant.GRU):
        gates = LSTM_GATES if variant is FusionVariant.LSTM else GRU_GATES
        fan_in = 2 * hidden
        for g in gates:
            params[f"w_{g}"] = nk.uniform_init(rng, hidden, hidden, fan_in)
            params[f"u_{g}"] = nk.uniform_init(rng, hidden, hidden, fan_in)
            params[f"b_{g}"] = nk.uniform_init(rng, 1, hidden, fan_in)
    elif variant is FusionVariant.TRANSFORMER:
        for name in ("wq", "wk", "wv", "wo"):
            params[name] = nk.uniform_init(rng, hidden, hidden)
    return params


@dataclass
class BaselineState:
    variant: FusionVariant
    hidden: Tensor2D | None = None
    cell: Tensor2D | None = None
    history: list[Tensor2D] = field(default_factory=list)
    history_masks: list[Mask1D] = field(default_factory=list)
    tokens: list[int] = field(default_factory=list)
    step_index: int = 1


def init_state(variant: FusionVariant | str) -> BaselineState:
    return BaselineState(FusionVariant(variant))


def _affine(x, h, params, gate) -> Tensor2D:
    pre = nk.add(nk.matmul(x, params[f"w_{gate}"]), nk.matmul(h, params[f"u_{gate}"]))
    return nk.add_row_vector(pre, params[f"b_{gate}"])


def lstm_cell(x: Tensor2D, h: Tensor2D, c: Tensor2D, params) -> tuple[Tensor2D, Tensor2D]:
    i = nk.sigmoid(_affine(x, h, params, "i"))
    f = nk.sigmoid(_affine(x, h, params, "f"))
    g = nk.tanh(_affine(x, h, params, "g"))
    o = nk.sigmoid(_affine(x, h, params, "o"))
    c_new = nk.add(nk.hadamard(f, c), nk.hadamard(i, g))
    return nk.hadamard(o, nk.tanh(c_new)), c_new


def gru_cell(x: Tensor2D, h: Tensor2D, params) -> Tensor2D:
    z = nk.sigmoid(_affine(x, h, params, "z"))
    r = nk.sigmoid(_affine(x, h, params, "r"))
    n = nk.tanh(_affine(x, nk.hadamard(r, h), params, "n"))
    # (1 - z) * h + z * n
    return nk.add(h, nk.hadamard(z, nk.sub(n, h)))


def baseline_fuse(state: BaselineState, j_t: Tensor2D, params: dict[str, Tensor2D] | None = None,
                  mask: Mask1D | None = None, variant: FusionVariant | str | None = None
                  ) -> tuple[Tensor2D, BaselineState]:
    if variant is not None and FusionVariant(variant) is not state.variant:
        raise ValueError(f"state holds {state.variant.value}, asked to fuse with {FusionVariant(variant).value}")
    v = state.variant
    if v is FusionVariant.GROUNDFLOW:
        raise ValueError("groundflow fusion lives in seqground.groundflow")
    mask = mask if mask is not None else Mask1D(np.ones(j_t.batch_shape + (j_t.rows,), bool))
    params = params or {}
    nxt = BaselineState(v, state.hidden, state.cell, list(state.history),
                        list(state.history_masks), list(state.tokens), state.step_index + 1)

    if v in (FusionVariant.NONE, FusionVariant.CONCAT_ALL):
        return j_t, nxt

    if v in (FusionVariant.LSTM, FusionVariant.GRU):
        zeros = Tensor2D(np.zeros(j_t.shape))
        h = state.hidden if state.hidden is not None else zeros
        if v is FusionVariant.LSTM:
            c = state.cell if state.cell is not None else zeros
            h_new, c_new = lstm_cell(j_t, h, c, params)
            nxt.cell = nk.mask_rows(c_new, mask)
        else:
            h_new = gru_cell(j_t, h, params)
        nxt.hidden = nk.mask_rows(h_new, mask)
        return nxt.hidden, nxt

    if v is FusionVariant.TRANSFORMER:
        nxt.history.append(j_t)
        nxt.history_masks.append(mask)
        if not state.history:
            return j_t, nxt
        past = nk.concat_rows(state.history)
        past_mask = Mask1D(np.concatenate([m.flags for m in state.history_masks], axis=-1))
        q = nk.matmul(j_t, params["wq"])
        k = nk.matmul(past, params["wk"])
        val = nk.matmul(past, params["wv"])
        scores = nk.scale(nk.matmul(q, nk.transpose(k)), 1.0 / math.sqrt(j_t.cols))
        attn = nk.matmul(nk.masked_softmax_rows(scores, past_mask), val)
        return nk.add(j_t, nk.mask_rows(nk.matmul(attn, params["wo"]), mask)), nxt

    raise ValueError(f"unknown variant {v}")


@dataclass
class FusionRunner:
    """Uniform stepping interface over GroundFlow and the baselines."""

    variant: FusionVariant
    memory: groundflow.MemoryConfig = groundflow.MemoryConfig()
    params: dict[str, Tensor2D] = field(default_factory=dict)

    def __post_init__(self):
        self.reset()

    def reset(self) -> None:
        if self.variant is FusionVariant.GROUNDFLOW:
            self.state = groundflow.reset()
        else:
            self.state = init_state(self.variant)

    def step(self, j_t: Tensor2D, mask: Mask1D) -> Tensor2D:
        if self.variant is FusionVariant.GROUNDFLOW:
            out, self.state = groundflow.fuse_step(self.state, j_t, self.memory, mask)
        else:
            out, self.state = baseline_fuse(self.state, j_t, self.params, mask)
        return out
