"""Dense float64 matrices with tape-based reverse-mode differentiation.

A :class:`Tensor2D` holds a ``rows x cols`` matrix. The data array may carry
leading batch axes (``(..., rows, cols)``); every operation then acts on each
matrix of the stack independently, which lets the training loop push whole
batches of tasks through one tape. Nothing broadcasts across the batch axes.

Operations are recorded only while a :class:`ComputeTape` is active::

    with ComputeTape() as tape:
        loss = sum_all(hadamard(w, w))
    tape.backward(loss)
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable, Iterable, Sequence

import numpy as np

DTYPE = np.float64
COSINE_EPS = 1e-8
# Masked logits are pushed to this value before exponentiation.
MASK_SENTINEL = -1e30


class ShapeError(ValueError):
    pass


class TapeError(RuntimeError):
    pass


class Tensor2D:
    """Matrix (or stack of matrices) with an optional gradient slot."""

    __slots__ = ("data", "grad", "requires_grad")

    def __init__(self, data, requires_grad: bool = False):
        arr = np.array(data, dtype=DTYPE)
        if arr.ndim == 0:
            arr = arr.reshape(1, 1)
        elif arr.ndim == 1:
            arr = arr.reshape(1, -1)
        self.data = arr
        self.grad: np.ndarray | None = None
        self.requires_grad = requires_grad

    @classmethod
    def zeros(cls, *shape: int, requires_grad: bool = False) -> "Tensor2D":
        return cls(np.zeros(shape, dtype=DTYPE), requires_grad=requires_grad)

    @property
    def rows(self) -> int:
        return self.data.shape[-2]

    @property
    def cols(self) -> int:
        return self.data.shape[-1]

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def batch_shape(self) -> tuple[int, ...]:
        return self.data.shape[:-2]

    def item(self) -> float:
        if self.data.size != 1:
            raise ShapeError(f"item() needs a 1x1 tensor, got shape {self.shape}")
        return float(self.data.reshape(-1)[0])

    def numpy(self) -> np.ndarray:
        return self.data

    def detach(self) -> "Tensor2D":
        return Tensor2D(self.data.copy())

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self) -> str:
        return f"Tensor2D(shape={self.shape}, requires_grad={self.requires_grad})"

    def __add__(self, other: "Tensor2D") -> "Tensor2D":
        return add(self, other)

    def __sub__(self, other: "Tensor2D") -> "Tensor2D":
        return sub(self, other)

    def __mul__(self, other: "Tensor2D") -> "Tensor2D":
        return hadamard(self, other)

    def __matmul__(self, other: "Tensor2D") -> "Tensor2D":
        return matmul(self, other)

    @property
    def T(self) -> "Tensor2D":
        return transpose(self)


class Mask1D:
    """Token mask: True marks a real token, False a padding slot."""

    __slots__ = ("flags",)

    def __init__(self, flags):
        arr = np.array(flags, dtype=bool)
        if arr.ndim == 0:
            raise ShapeError("mask needs at least one axis")
        self.flags = arr

    @classmethod
    def full(cls, length: int) -> "Mask1D":
        return cls(np.ones(length, dtype=bool))

    @property
    def length(self) -> int:
        return self.flags.shape[-1]

    def as_column(self) -> np.ndarray:
        """Float mask shaped ``(..., length, 1)`` for zeroing padding rows."""
        return self.flags[..., :, None].astype(DTYPE)

    def __or__(self, other: "Mask1D") -> "Mask1D":
        return Mask1D(self.flags | other.flags)

    def __eq__(self, other) -> bool:
        return isinstance(other, Mask1D) and np.array_equal(self.flags, other.flags)

    def __repr__(self) -> str:
        return f"Mask1D(length={self.length}, real={int(self.flags.sum())})"


@dataclass
class _Record:
    out: Tensor2D
    inputs: tuple[Tensor2D, ...]
    backward: Callable[[np.ndarray], Sequence[np.ndarray | None]]


@dataclass
class ComputeTape:
    """Ordered log of primitive operations, replayed in reverse by backward."""

    records: list[_Record] = field(default_factory=list)
    consumed: bool = False

    def __enter__(self) -> "ComputeTape":
        _TAPES.append(self)
        return self

    def __exit__(self, *exc) -> None:
        _TAPES.remove(self)

    def __len__(self) -> int:
        return len(self.records)

    def reset(self) -> None:
        self.records.clear()
        self.consumed = False

    def backward(self, loss: Tensor2D) -> None:
        if loss.data.shape != (1, 1):
            raise ShapeError(f"backward needs a 1x1 loss, got shape {loss.shape}")
        if self.consumed:
            raise TapeError("tape already replayed; call reset() before another backward")
        if not loss.requires_grad:
            raise TapeError("loss does not depend on any requires_grad tensor")
        self.consumed = True
        loss.grad = np.ones((1, 1), dtype=DTYPE)
        for rec in reversed(self.records):
            g = rec.out.grad
            if g is None:
                continue
            partials = rec.backward(g)
            for inp, part in zip(rec.inputs, partials):
                if part is None or not inp.requires_grad:
                    continue
                if inp.grad is None:
                    inp.grad = np.array(part, dtype=DTYPE, copy=True)
                else:
                    inp.grad = inp.grad + part


_TAPES: list[ComputeTape] = []


def active_tape() -> ComputeTape | None:
    return _TAPES[-1] if _TAPES else None


def backward(loss: Tensor2D, tape: ComputeTape | None = None) -> None:
    tape = tape or active_tape()
    if tape is None:
        raise TapeError("no tape given and none active")
    tape.backward(loss)


def zero_grad(tensors: Iterable[Tensor2D]) -> None:
    for t in tensors:
        t.grad = None


def _result(data: np.ndarray, inputs: tuple[Tensor2D, ...], bwd) -> Tensor2D:
    needs = any(t.requires_grad for t in inputs)
    out = Tensor2D.__new__(Tensor2D)
    out.data = data
    out.grad = None
    out.requires_grad = needs
    tape = active_tape()
    if needs and tape is not None:
        tape.records.append(_Record(out, inputs, bwd))
    return out


def _check_same(a: Tensor2D, b: Tensor2D, op: str) -> None:
    if a.shape != b.shape:
        raise ShapeError(f"{op}: shape mismatch {a.shape} vs {b.shape}")


# -- products ---------------------------------------------------------------


def matmul(a: Tensor2D, b: Tensor2D) -> Tensor2D:
    if a.cols != b.rows or a.batch_shape != b.batch_shape and a.batch_shape and b.batch_shape:
        raise ShapeError(f"matmul: cannot multiply {a.shape} by {b.shape}")
    ad, bd = a.data, b.data

    def bwd(g):
        ga = g @ np.swapaxes(bd, -1, -2)
        gb = np.swapaxes(ad, -1, -2) @ g
        # shared (unbatched) weight used against a batched operand
        if ga.ndim > ad.ndim:
            ga = ga.sum(axis=tuple(range(ga.ndim - ad.ndim)))
        if gb.ndim > bd.ndim:
            gb = gb.sum(axis=tuple(range(gb.ndim - bd.ndim)))
        return ga, gb

    return _result(ad @ bd, (a, b), bwd)


def transpose(a: Tensor2D) -> Tensor2D:
    return _result(np.swapaxes(a.data, -1, -2).copy(), (a,),
                   lambda g: (np.swapaxes(g, -1, -2),))


# -- elementwise ------------------------------------------------------------


def add(a: Tensor2D, b: Tensor2D) -> Tensor2D:
    _check_same(a, b, "add")
    return _result(a.data + b.data, (a, b), lambda g: (g, g))


def sub(a: Tensor2D, b: Tensor2D) -> Tensor2D:
    _check_same(a, b, "sub")
    return _result(a.data - b.data, (a, b), lambda g: (g, -g))


def hadamard(a: Tensor2D, b: Tensor2D) -> Tensor2D:
    _check_same(a, b, "hadamard")
    ad, bd = a.data, b.data
    return _result(ad * bd, (a, b), lambda g: (g * bd, g * ad))


def scale(a: Tensor2D, c: float) -> Tensor2D:
    c = float(c)
    return _result(a.data * c, (a,), lambda g: (g * c,))


def add_row_vector(a: Tensor2D, v: Tensor2D) -> Tensor2D:
    """Add a ``1 x cols`` bias to every row of ``a``."""
    if v.rows != 1 or v.cols != a.cols or v.batch_shape:
        raise ShapeError(f"add_row_vector: bias {v.shape} does not fit {a.shape}")

    def bwd(g):
        return g, g.reshape(-1, g.shape[-1]).sum(axis=0, keepdims=True)

    return _result(a.data + v.data, (a, v), bwd)


def row_broadcast_mul(a: Tensor2D, alpha: Tensor2D) -> Tensor2D:
    """Scale row i of ``a`` by ``alpha[i, 0]`` (``alpha`` is rows x 1)."""
    if alpha.cols != 1 or alpha.rows != a.rows or alpha.batch_shape != a.batch_shape:
        raise ShapeError(f"row_broadcast_mul: {alpha.shape} cannot scale rows of {a.shape}")
    ad, al = a.data, alpha.data
    return _result(ad * al, (a, alpha),
                   lambda g: (g * al, (g * ad).sum(axis=-1, keepdims=True)))


def mask_rows(a: Tensor2D, mask: Mask1D) -> Tensor2D:
    """Zero the padding rows of ``a``."""
    if mask.length != a.rows:
        raise ShapeError(f"mask_rows: mask length {mask.length} vs {a.rows} rows")
    m = mask.as_column()
    return _result(a.data * m, (a,), lambda g: (g * m,))


def relu(a: Tensor2D) -> Tensor2D:
    pos = a.data > 0
    return _result(np.where(pos, a.data, 0.0), (a,), lambda g: (g * pos,))


def tanh(a: Tensor2D) -> Tensor2D:
    y = np.tanh(a.data)
    return _result(y, (a,), lambda g: (g * (1.0 - y * y),))


def sigmoid(a: Tensor2D) -> Tensor2D:
    y = 0.5 * (1.0 + np.tanh(0.5 * a.data))
    return _result(y, (a,), lambda g: (g * y * (1.0 - y),))


# -- reductions and reshaping ---------------------------------------------


def mean_over_cols(a: Tensor2D) -> Tensor2D:
    n = a.cols
    return _result(a.data.mean(axis=-1, keepdims=True), (a,),
                   lambda g: (np.broadcast_to(g / n, a.data.shape),))


def sum_all(a: Tensor2D) -> Tensor2D:
    shape = a.data.shape
    return _result(np.array([[a.data.sum()]]), (a,),
                   lambda g: (np.broadcast_to(g.reshape(()), shape),))


def concat_rows(parts: Sequence[Tensor2D]) -> Tensor2D:
    if not parts:
        raise ShapeError("concat_rows: nothing to concatenate")
    cols, batch = parts[0].cols, parts[0].batch_shape
    for p in parts:
        if p.cols != cols or p.batch_shape != batch:
            raise ShapeError(f"concat_rows: {p.shape} incompatible with {parts[0].shape}")
    splits = np.cumsum([p.rows for p in parts])[:-1]
    return _result(np.concatenate([p.data for p in parts], axis=-2), tuple(parts),
                   lambda g: tuple(np.split(g, splits, axis=-2)))


def slice_rows(a: Tensor2D, start: int, stop: int) -> Tensor2D:
    if not 0 <= start < stop <= a.rows:
        raise ShapeError(f"slice_rows: [{start}, {stop}) outside {a.rows} rows")
    shape = a.data.shape

    def bwd(g):
        full = np.zeros(shape, dtype=DTYPE)
        full[..., start:stop, :] = g
        return (full,)

    return _result(a.data[..., start:stop, :].copy(), (a,), bwd)


def reshape_cols(a: Tensor2D, rows: int, cols: int) -> Tensor2D:
    """Reinterpret the trailing matrix as ``rows x cols`` (same element count)."""
    if rows * cols != a.rows * a.cols:
        raise ShapeError(f"reshape_cols: {a.rows}x{a.cols} cannot become {rows}x{cols}")
    shape = a.data.shape
    new = a.data.reshape(a.batch_shape + (rows, cols))
    return _result(new.copy(), (a,), lambda g: (g.reshape(shape),))


def embedding(table: Tensor2D, ids) -> Tensor2D:
    """Gather rows of ``table`` (V x H); ``ids`` may carry batch axes."""
    ids = np.asarray(ids, dtype=np.int64)
    if table.batch_shape:
        raise ShapeError("embedding: table must be a single matrix")
    if ids.size and (ids.min() < 0 or ids.max() >= table.rows):
        raise ShapeError(f"embedding: ids outside [0, {table.rows})")
    vshape = table.data.shape

    def bwd(g):
        full = np.zeros(vshape, dtype=DTYPE)
        np.add.at(full, ids.reshape(-1), g.reshape(-1, vshape[1]))
        return (full,)

    return _result(table.data[ids], (table,), bwd)


# -- attention primitives ---------------------------------------------------


def masked_softmax_rows(x: Tensor2D, mask: Mask1D) -> Tensor2D:
    """Row-wise softmax over the unmasked columns; masked columns are exactly 0."""
    if mask.length != x.cols:
        raise ShapeError(f"masked_softmax_rows: mask length {mask.length} vs {x.cols} cols")
    keep = mask.flags[..., None, :]
    if not np.all(mask.flags.any(axis=-1)):
        raise ShapeError("masked_softmax_rows: a row has every column masked")
    z = np.where(keep, x.data, MASK_SENTINEL)
    z = z - z.max(axis=-1, keepdims=True)
    e = np.where(keep, np.exp(z), 0.0)
    y = e / e.sum(axis=-1, keepdims=True)

    def bwd(g):
        return (y * (g - (g * y).sum(axis=-1, keepdims=True)),)

    return _result(y, (x,), bwd)


def cosine_rows(a: Tensor2D, b: Tensor2D, eps: float = COSINE_EPS) -> Tensor2D:
    """Pairwise cosine similarity of rows: ``(a.rows x b.rows)``.

    Entries involving a row whose norm is below ``eps`` are defined as 0.
    """
    if a.cols != b.cols or a.batch_shape != b.batch_shape:
        raise ShapeError(f"cosine_rows: {a.shape} vs {b.shape}")
    ad, bd = a.data, b.data
    na = np.sqrt((ad * ad).sum(axis=-1, keepdims=True))
    nb = np.sqrt((bd * bd).sum(axis=-1, keepdims=True))
    oka, okb = na >= eps, nb >= eps
    ua = np.where(oka, ad / np.where(oka, na, 1.0), 0.0)
    ub = np.where(okb, bd / np.where(okb, nb, 1.0), 0.0)
    c = ua @ np.swapaxes(ub, -1, -2)

    def bwd(g):
        # d cos / d a_i = (u_b - c * u_a) / |a_i|, summed over j with weights g_ij
        gua = g @ ub
        gub = np.swapaxes(g, -1, -2) @ ua
        ga = (gua - (gua * ua).sum(axis=-1, keepdims=True) * ua) / np.where(oka, na, 1.0)
        gb = (gub - (gub * ub).sum(axis=-1, keepdims=True) * ub) / np.where(okb, nb, 1.0)
        return np.where(oka, ga, 0.0), np.where(okb, gb, 0.0)

    return _result(c, (a, b), bwd)


def log_softmax_row_pick(logits: Tensor2D, targets, valid: Mask1D | None = None) -> Tensor2D:
    """Per-row ``log softmax(logits)[target]`` as a column (rows x 1).

    ``valid`` masks padded candidate columns out of the normalizer.
    """
    targets = np.asarray(targets, dtype=np.int64)
    if targets.shape != logits.batch_shape + (logits.rows,):
        raise ShapeError(f"targets shape {targets.shape} does not match logits {logits.shape}")
    if targets.size and (targets.min() < 0 or targets.max() >= logits.cols):
        raise ShapeError(f"target outside [0, {logits.cols})")
    x = logits.data
    keep = np.ones(x.shape, dtype=bool) if valid is None else np.broadcast_to(
        valid.flags[..., None, :] if valid.flags.ndim == x.ndim - 1 else valid.flags, x.shape)
    if not np.all(np.take_along_axis(keep, targets[..., None], axis=-1)):
        raise ShapeError("target points at a masked candidate")
    z = np.where(keep, x, MASK_SENTINEL)
    z = z - z.max(axis=-1, keepdims=True)
    e = np.where(keep, np.exp(z), 0.0)
    s = e.sum(axis=-1, keepdims=True)
    picked = np.take_along_axis(z, targets[..., None], axis=-1) - np.log(s)
    p = e / s

    def bwd(g):
        onehot = np.zeros(x.shape, dtype=DTYPE)
        np.put_along_axis(onehot, targets[..., None], 1.0, axis=-1)
        return (g * (onehot - p),)

    return _result(picked, (logits,), bwd)


def weighted_sum(a: Tensor2D, weights: np.ndarray) -> Tensor2D:
    """``sum(a * weights)`` with a constant weight array, as a 1x1 tensor."""
    w = np.broadcast_to(np.asarray(weights, dtype=DTYPE), a.data.shape)
    return _result(np.array([[float((a.data * w).sum())]]), (a,),
                   lambda g: (g.reshape(()) * w,))


def constant(data) -> Tensor2D:
    return Tensor2D(data)


def uniform_init(rng: np.random.Generator, rows: int, cols: int, fan_in: int | None = None) -> Tensor2D:
    bound = 1.0 / math.sqrt(fan_in if fan_in is not None else rows)
    return Tensor2D(rng.uniform(-bound, bound, size=(rows, cols)), requires_grad=True)
