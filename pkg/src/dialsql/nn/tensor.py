"""Dense tensors with reverse-mode automatic differentiation.

Every learned quantity in the parser flows through the operations here.
Operations record themselves on the active :class:`Tape` (when one is
open) in execution order, so walking the tape backwards is a valid
reverse-topological traversal. Inference runs without a tape and pays no
recording overhead.
"""

from __future__ import annotations

import threading
from typing import Callable, Sequence

import numpy as np

__all__ = [
    "Tensor",
    "Tape",
    "TensorError",
    "DimensionError",
    "InvalidMaskError",
    "NumericError",
    "ContractError",
    "set_precision",
    "get_precision",
    "active_dtype",
    "backward",
    "softmax_masked",
]


class TensorError(Exception):
    """Base class for tensor-level failures."""


class DimensionError(TensorError):
    """Operand shapes are incompatible."""


class InvalidMaskError(TensorError):
    """A boolean mask leaves no admissible position."""


class NumericError(TensorError):
    """A non-finite value appeared where finiteness is required."""


class ContractError(TensorError):
    """An operation was called outside its contract."""


_PRECISIONS = {32: np.float32, 64: np.float64}
_precision_bits = 64


def set_precision(bits: int) -> None:
    """Select the global float width (32 or 64) for new tensors.

    Gradient checks are only reliable at 64-bit; training may use 32.
    """
    global _precision_bits
    if bits not in _PRECISIONS:
        raise ValueError(f"precision must be 32 or 64, got {bits}")
    _precision_bits = bits


def get_precision() -> int:
    return _precision_bits


def active_dtype() -> type:
    return _PRECISIONS[_precision_bits]


class Tensor:
    """A dense array plus an optional gradient of the same shape."""

    __slots__ = ("values", "grad", "requires_grad")

    def __init__(self, values, requires_grad: bool = False):
        self.values = np.asarray(values, dtype=active_dtype())
        self.grad: np.ndarray | None = None
        self.requires_grad = requires_grad

    @property
    def shape(self) -> tuple[int, ...]:
        return self.values.shape

    @property
    def size(self) -> int:
        return self.values.size

    def item(self) -> float:
        return float(self.values)

    def accumulate_grad(self, delta: np.ndarray) -> None:
        if self.grad is None:
            self.grad = np.zeros_like(self.values)
        self.grad += delta

    def zero_grad(self) -> None:
        if self.grad is None:
            self.grad = np.zeros_like(self.values)
        else:
            self.grad.fill(0.0)

    def detach(self) -> "Tensor":
        return Tensor(self.values.copy())

    def __repr__(self) -> str:  # pragma: no cover - debugging aid
        flag = ", requires_grad" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}{flag})"


_tls = threading.local()


def _tape_stack() -> list["Tape"]:
    stack = getattr(_tls, "stack", None)
    if stack is None:
        stack = []
        _tls.stack = stack
    return stack


def _active_tape() -> "Tape | None":
    stack = _tape_stack()
    return stack[-1] if stack else None


class Tape:
    """Ordered record of differentiable operations.

    Entries are (outputs, inputs, backward_fn). Construction order is a
    topological order, so :meth:`backward` replays entries reversed.
    """

    def __init__(self):
        self._entries: list[tuple[tuple[Tensor, ...], tuple[Tensor, ...], Callable[[], None]]] = []

    def __enter__(self) -> "Tape":
        _tape_stack().append(self)
        return self

    def __exit__(self, *exc) -> None:
        stack = _tape_stack()
        assert stack and stack[-1] is self
        stack.pop()

    def __len__(self) -> int:
        return len(self._entries)

    def record(self, outputs: Sequence[Tensor], inputs: Sequence[Tensor],
               backward_fn: Callable[[], None]) -> None:
        self._entries.append((tuple(outputs), tuple(inputs), backward_fn))

    def backward(self, loss: Tensor) -> None:
        """Populate gradients of every recorded requires_grad tensor.

        Tensors recorded on the tape but not on any path to ``loss`` end
        up with zero gradients.
        """
        if loss.shape != ():
            raise ContractError(f"loss must be a scalar, got shape {loss.shape}")
        loss.accumulate_grad(np.asarray(1.0, dtype=loss.values.dtype))
        for outputs, _inputs, fn in reversed(self._entries):
            if any(out.grad is not None for out in outputs):
                fn()
        for _outputs, inputs, _fn in self._entries:
            for t in inputs:
                if t.requires_grad and t.grad is None:
                    t.grad = np.zeros_like(t.values)


def backward(tape: Tape, loss: Tensor) -> None:
    tape.backward(loss)


def _record(outputs: Sequence[Tensor], inputs: Sequence[Tensor],
            backward_fn: Callable[[], None]) -> None:
    tape = _active_tape()
    if tape is not None and any(t.requires_grad for t in inputs):
        for out in outputs:
            out.requires_grad = True
        tape.record(outputs, inputs, backward_fn)


def _out_grad(out: Tensor) -> np.ndarray:
    if out.grad is None:
        return np.zeros_like(out.values)
    return out.grad


# ---------------------------------------------------------------------------
# elementwise arithmetic


def _require_same_shape(a: Tensor, b: Tensor, op: str) -> None:
    if a.shape != b.shape:
        raise DimensionError(f"{op}: shape mismatch {a.shape} vs {b.shape}")


def add(a: Tensor, b: Tensor) -> Tensor:
    _require_same_shape(a, b, "add")
    out = Tensor(a.values + b.values)

    def bwd():
        g = _out_grad(out)
        if a.requires_grad:
            a.accumulate_grad(g)
        if b.requires_grad:
            b.accumulate_grad(g)

    _record([out], [a, b], bwd)
    return out


def sub(a: Tensor, b: Tensor) -> Tensor:
    _require_same_shape(a, b, "sub")
    out = Tensor(a.values - b.values)

    def bwd():
        g = _out_grad(out)
        if a.requires_grad:
            a.accumulate_grad(g)
        if b.requires_grad:
            b.accumulate_grad(-g)

    _record([out], [a, b], bwd)
    return out


def mul(a: Tensor, b: Tensor) -> Tensor:
    _require_same_shape(a, b, "mul")
    out = Tensor(a.values * b.values)

    def bwd():
        g = _out_grad(out)
        if a.requires_grad:
            a.accumulate_grad(g * b.values)
        if b.requires_grad:
            b.accumulate_grad(g * a.values)

    _record([out], [a, b], bwd)
    return out


def affine(a: Tensor, scale: float = 1.0, shift: float = 0.0) -> Tensor:
    """Elementwise ``scale * a + shift`` with float constants."""
    out = Tensor(scale * a.values + shift)

    def bwd():
        if a.requires_grad:
            a.accumulate_grad(scale * _out_grad(out))

    _record([out], [a], bwd)
    return out


def neg(a: Tensor) -> Tensor:
    return affine(a, -1.0, 0.0)


def scale_by(a: Tensor, s: Tensor) -> Tensor:
    """Multiply an array by a scalar tensor; differentiable in both."""
    if s.shape != ():
        raise DimensionError(f"scale_by: scale must be scalar, got {s.shape}")
    out = Tensor(a.values * s.values)

    def bwd():
        g = _out_grad(out)
        if a.requires_grad:
            a.accumulate_grad(g * s.values)
        if s.requires_grad:
            s.accumulate_grad(np.sum(g * a.values))

    _record([out], [a, s], bwd)
    return out


def div_by(a: Tensor, s: Tensor) -> Tensor:
    """Divide an array by a scalar tensor."""
    if s.shape != ():
        raise DimensionError(f"div_by: divisor must be scalar, got {s.shape}")
    out = Tensor(a.values / s.values)

    def bwd():
        g = _out_grad(out)
        if a.requires_grad:
            a.accumulate_grad(g / s.values)
        if s.requires_grad:
            s.accumulate_grad(-np.sum(g * a.values) / (s.values * s.values))

    _record([out], [a, s], bwd)
    return out


# ---------------------------------------------------------------------------
# nonlinearities


def tanh(a: Tensor) -> Tensor:
    out = Tensor(np.tanh(a.values))

    def bwd():
        if a.requires_grad:
            a.accumulate_grad(_out_grad(out) * (1.0 - out.values * out.values))

    _record([out], [a], bwd)
    return out


def sigmoid(a: Tensor) -> Tensor:
    v = a.values
    out_vals = np.empty_like(v)
    pos = v >= 0
    out_vals[pos] = 1.0 / (1.0 + np.exp(-v[pos]))
    ev = np.exp(v[~pos])
    out_vals[~pos] = ev / (1.0 + ev)
    out = Tensor(out_vals)

    def bwd():
        if a.requires_grad:
            a.accumulate_grad(_out_grad(out) * out.values * (1.0 - out.values))

    _record([out], [a], bwd)
    return out


def exp(a: Tensor) -> Tensor:
    out = Tensor(np.exp(a.values))

    def bwd():
        if a.requires_grad:
            a.accumulate_grad(_out_grad(out) * out.values)

    _record([out], [a], bwd)
    return out


def log(a: Tensor) -> Tensor:
    out = Tensor(np.log(a.values))

    def bwd():
        if a.requires_grad:
            a.accumulate_grad(_out_grad(out) / a.values)

    _record([out], [a], bwd)
    return out


# ---------------------------------------------------------------------------
# reductions, indexing, shaping


def reduce_sum(a: Tensor) -> Tensor:
    out = Tensor(np.sum(a.values))

    def bwd():
        if a.requires_grad:
            a.accumulate_grad(np.full_like(a.values, _out_grad(out)))

    _record([out], [a], bwd)
    return out


def dot(a: Tensor, b: Tensor) -> Tensor:
    if a.values.ndim != 1 or b.values.ndim != 1 or a.shape != b.shape:
        raise DimensionError(f"dot: need equal-length vectors, got {a.shape} and {b.shape}")
    return matmul(a, b)


def pick(a: Tensor, index: int) -> Tensor:
    """Select one entry of a vector as a scalar."""
    if a.values.ndim != 1:
        raise DimensionError(f"pick: need a vector, got shape {a.shape}")
    out = Tensor(a.values[index])

    def bwd():
        if a.requires_grad:
            delta = np.zeros_like(a.values)
            delta[index] = _out_grad(out)
            a.accumulate_grad(delta)

    _record([out], [a], bwd)
    return out


def row(m: Tensor, index: int) -> Tensor:
    """Select one row of a matrix as a vector."""
    if m.values.ndim != 2:
        raise DimensionError(f"row: need a matrix, got shape {m.shape}")
    out = Tensor(m.values[index])

    def bwd():
        if m.requires_grad:
            delta = np.zeros_like(m.values)
            delta[index] = _out_grad(out)
            m.accumulate_grad(delta)

    _record([out], [m], bwd)
    return out


def take_rows(m: Tensor, indices: Sequence[int]) -> Tensor:
    """Gather rows of a matrix; repeated indices accumulate gradient."""
    if m.values.ndim != 2:
        raise DimensionError(f"take_rows: need a matrix, got shape {m.shape}")
    idx = np.asarray(indices, dtype=np.intp)
    out = Tensor(m.values[idx])

    def bwd():
        if m.requires_grad:
            delta = np.zeros_like(m.values)
            np.add.at(delta, idx, _out_grad(out))
            m.accumulate_grad(delta)

    _record([out], [m], bwd)
    return out


def slice_cols(m: Tensor, lo: int, hi: int) -> Tensor:
    if m.values.ndim != 2:
        raise DimensionError(f"slice_cols: need a matrix, got shape {m.shape}")
    out = Tensor(m.values[:, lo:hi])

    def bwd():
        if m.requires_grad:
            delta = np.zeros_like(m.values)
            delta[:, lo:hi] = _out_grad(out)
            m.accumulate_grad(delta)

    _record([out], [m], bwd)
    return out


def concat(parts: Sequence[Tensor]) -> Tensor:
    """Concatenate vectors into one vector."""
    parts = list(parts)
    if not parts:
        raise ContractError("concat: need at least one part")
    for p in parts:
        if p.values.ndim != 1:
            raise DimensionError(f"concat: need vectors, got shape {p.shape}")
    out = Tensor(np.concatenate([p.values for p in parts]))
    offsets = np.cumsum([0] + [p.size for p in parts])

    def bwd():
        g = _out_grad(out)
        for p, lo, hi in zip(parts, offsets[:-1], offsets[1:]):
            if p.requires_grad:
                p.accumulate_grad(g[lo:hi])

    _record([out], parts, bwd)
    return out


def stack_scalars(parts: Sequence[Tensor]) -> Tensor:
    """Collect scalar tensors into one vector."""
    parts = list(parts)
    if not parts:
        raise ContractError("stack_scalars: need at least one part")
    for p in parts:
        if p.values.ndim != 0:
            raise DimensionError(f"stack_scalars: need scalars, got shape {p.shape}")
    out = Tensor(np.array([p.values for p in parts], dtype=active_dtype()))

    def bwd():
        g = _out_grad(out)
        for k, p in enumerate(parts):
            if p.requires_grad:
                p.accumulate_grad(g[k])

    _record([out], parts, bwd)
    return out


def stack_rows(rows: Sequence[Tensor]) -> Tensor:
    """Stack equal-length vectors into a matrix, one per row."""
    rows = list(rows)
    if not rows:
        raise ContractError("stack_rows: need at least one row")
    width = rows[0].size
    for r in rows:
        if r.values.ndim != 1 or r.size != width:
            raise DimensionError("stack_rows: rows must be equal-length vectors")
    out = Tensor(np.stack([r.values for r in rows]))

    def bwd():
        g = _out_grad(out)
        for k, r in enumerate(rows):
            if r.requires_grad:
                r.accumulate_grad(g[k])

    _record([out], rows, bwd)
    return out


def vstack(blocks: Sequence[Tensor]) -> Tensor:
    """Stack matrices with equal column counts on top of each other."""
    blocks = list(blocks)
    if not blocks:
        raise ContractError("vstack: need at least one block")
    for b in blocks:
        if b.values.ndim != 2:
            raise DimensionError(f"vstack: need matrices, got shape {b.shape}")
    out = Tensor(np.concatenate([b.values for b in blocks], axis=0))
    offsets = np.cumsum([0] + [b.shape[0] for b in blocks])

    def bwd():
        g = _out_grad(out)
        for b, lo, hi in zip(blocks, offsets[:-1], offsets[1:]):
            if b.requires_grad:
                b.accumulate_grad(g[lo:hi])

    _record([out], blocks, bwd)
    return out


def concat_cols(a: Tensor, b: Tensor) -> Tensor:
    """Concatenate two matrices side by side."""
    if a.values.ndim != 2 or b.values.ndim != 2 or a.shape[0] != b.shape[0]:
        raise DimensionError(f"concat_cols: incompatible shapes {a.shape}, {b.shape}")
    out = Tensor(np.concatenate([a.values, b.values], axis=1))
    split = a.shape[1]

    def bwd():
        g = _out_grad(out)
        if a.requires_grad:
            a.accumulate_grad(g[:, :split])
        if b.requires_grad:
            b.accumulate_grad(g[:, split:])

    _record([out], [a, b], bwd)
    return out


def repeat_row(v: Tensor, n: int) -> Tensor:
    """Tile a vector into an (n, d) matrix."""
    if v.values.ndim != 1:
        raise DimensionError(f"repeat_row: need a vector, got shape {v.shape}")
    out = Tensor(np.tile(v.values, (n, 1)))

    def bwd():
        if v.requires_grad:
            v.accumulate_grad(_out_grad(out).sum(axis=0))

    _record([out], [v], bwd)
    return out


def expand_by_counts(v: Tensor, counts: Sequence[int]) -> Tensor:
    """Repeat each entry of a vector ``counts[i]`` times."""
    if v.values.ndim != 1 or v.size != len(counts):
        raise DimensionError("expand_by_counts: counts must align with vector entries")
    counts = np.asarray(counts, dtype=np.intp)
    out = Tensor(np.repeat(v.values, counts))
    offsets = np.concatenate([[0], np.cumsum(counts)[:-1]])

    def bwd():
        if v.requires_grad:
            g = _out_grad(out)
            v.accumulate_grad(np.add.reduceat(g, offsets) if g.size else np.zeros_like(v.values))

    _record([out], [v], bwd)
    return out


def transpose(m: Tensor) -> Tensor:
    if m.values.ndim != 2:
        raise DimensionError(f"transpose: need a matrix, got shape {m.shape}")
    out = Tensor(m.values.T)

    def bwd():
        if m.requires_grad:
            m.accumulate_grad(_out_grad(out).T)

    _record([out], [m], bwd)
    return out


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Matrix/vector product covering 2d@2d, 2d@1d, 1d@2d and 1d@1d."""
    an, bn = a.values.ndim, b.values.ndim
    if an not in (1, 2) or bn not in (1, 2):
        raise DimensionError(f"matmul: unsupported ranks {an} and {bn}")
    try:
        out_vals = a.values @ b.values
    except ValueError as err:
        raise DimensionError(f"matmul: incompatible shapes {a.shape} and {b.shape}") from err
    out = Tensor(out_vals)

    def bwd():
        g = _out_grad(out)
        if an == 2 and bn == 2:
            if a.requires_grad:
                a.accumulate_grad(g @ b.values.T)
            if b.requires_grad:
                b.accumulate_grad(a.values.T @ g)
        elif an == 2 and bn == 1:
            if a.requires_grad:
                a.accumulate_grad(np.outer(g, b.values))
            if b.requires_grad:
                b.accumulate_grad(a.values.T @ g)
        elif an == 1 and bn == 2:
            if a.requires_grad:
                a.accumulate_grad(b.values @ g)
            if b.requires_grad:
                b.accumulate_grad(np.outer(a.values, g))
        else:
            if a.requires_grad:
                a.accumulate_grad(g * b.values)
            if b.requires_grad:
                b.accumulate_grad(g * a.values)

    _record([out], [a, b], bwd)
    return out


# ---------------------------------------------------------------------------
# softmax


def softmax_masked(scores: Tensor, mask: Sequence[bool] | np.ndarray) -> Tensor:
    """Shift-stabilized softmax over the unmasked positions.

    Masked positions get probability exactly 0. Raises
    :class:`InvalidMaskError` when no position is admissible.
    """
    if scores.values.ndim != 1:
        raise DimensionError(f"softmax_masked: need a vector, got shape {scores.shape}")
    mask = np.asarray(mask, dtype=bool)
    if mask.shape != scores.shape:
        raise DimensionError(f"softmax_masked: mask shape {mask.shape} vs scores {scores.shape}")
    if not mask.any():
        raise InvalidMaskError("softmax_masked: mask admits no position")
    if not np.isfinite(scores.values[mask]).all():
        raise NumericError("softmax_masked: non-finite score at an unmasked position")

    shifted = scores.values - np.max(scores.values[mask])
    weights = np.where(mask, np.exp(np.where(mask, shifted, 0.0)), 0.0)
    probs = weights / weights.sum()
    out = Tensor(probs)

    def bwd():
        if scores.requires_grad:
            g = _out_grad(out)
            inner = np.dot(out.values, g)
            scores.accumulate_grad(out.values * (g - inner))

    _record([out], [scores], bwd)
    return out


def softmax(scores: Tensor) -> Tensor:
    """Softmax with all positions admissible."""
    return softmax_masked(scores, np.ones(scores.shape, dtype=bool))
