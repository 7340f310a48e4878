"""Dense float64 tensors with tape-based reverse-mode differentiation.

Every numeric quantity in the testbed (feature grids, adapter weights,
logits) lives in a :class:`Tensor`.  Operations record their backward rule
on the innermost active :class:`Tape`; ``Tape.backward`` then walks the
recording in reverse, accumulating gradients into ``Tensor.grad``.

Scope is deliberately small: row-major float64 only, no broadcasting beyond
a bias add over the last axis, and a hard error on any non-finite value.
"""

from __future__ import annotations

import math
from typing import Callable, Sequence

import numpy as np


class ShapeError(ValueError):
    """Operand shapes violate an operation's contract."""


class NonFiniteError(FloatingPointError):
    """A NaN or Inf appeared where only finite values are allowed."""


class EmptyLossError(ValueError):
    """Loss requested over a fully masked (empty) target set."""


def _check_finite(arr: np.ndarray, what: str) -> None:
    # sum() is O(n) without a temporary; any NaN/Inf poisons it.
    if arr.size and not np.isfinite(arr.sum()):
        raise NonFiniteError(f"non-finite values in {what}")


class Tensor:
    """A row-major float64 array, optionally tracked for gradients."""

    __slots__ = ("data", "requires_grad", "grad")

    def __init__(self, data, requires_grad: bool = False):
        arr = np.asarray(data, dtype=np.float64)
        _check_finite(arr, "tensor data")
        self.data = arr
        self.requires_grad = bool(requires_grad)
        self.grad: np.ndarray | None = None

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def size(self) -> int:
        return self.data.size

    def item(self) -> float:
        return self.data.item()

    def zero_grad(self) -> None:
        self.grad = None

    def accumulate_grad(self, piece: np.ndarray) -> None:
        if piece.shape != self.data.shape:
            raise ShapeError(
                f"gradient shape {piece.shape} does not match tensor shape {self.data.shape}"
            )
        if self.grad is None:
            self.grad = np.array(piece)  # own a copy; pieces may alias op internals
        else:
            self.grad += piece

    def __repr__(self) -> str:  # pragma: no cover - debugging aid
        return f"Tensor(shape={self.data.shape}, requires_grad={self.requires_grad})"


_TAPE_STACK: list["Tape"] = []


class Tape:
    """Execution-ordered recording of operations for one backward pass.

    Entries are appended in forward execution order, which is topological by
    construction; ``backward`` visits each entry exactly once in reverse.
    """

    def __init__(self):
        self._entries: list[tuple[Tensor, Callable[[np.ndarray], None]]] = []

    def __enter__(self) -> "Tape":
        _TAPE_STACK.append(self)
        return self

    def __exit__(self, exc_type, exc, tb) -> None:
        popped = _TAPE_STACK.pop()
        assert popped is self, "tapes must unwind in LIFO order"

    def __len__(self) -> int:
        return len(self._entries)

    def record(self, out: Tensor, backward: Callable[[np.ndarray], None]) -> None:
        self._entries.append((out, backward))

    def backward(self, root: Tensor, seed: np.ndarray | None = None) -> None:
        """Seed ``root.grad`` (with ones by default) and propagate in reverse."""
        if seed is None:
            seed = np.ones_like(root.data)
        root.accumulate_grad(np.asarray(seed, dtype=np.float64))
        for out, fn in reversed(self._entries):
            if out.grad is None:
                continue  # branch never reached the root
            _check_finite(out.grad, "gradient")
            fn(out.grad)


def active_tape() -> Tape | None:
    return _TAPE_STACK[-1] if _TAPE_STACK else None


def custom_op(
    out_data: np.ndarray,
    inputs: Sequence[Tensor],
    backward: Callable[[np.ndarray], None],
    name: str,
) -> Tensor:
    """Wrap a computed array as a Tensor, recording ``backward`` if taping.

    ``backward`` receives the upstream gradient and must accumulate into the
    inputs via ``Tensor.accumulate_grad``.  Exposed so higher-level modules
    can register fused kernels (pooling windows, cross-attention) on the
    same tape as the primitive ops below.
    """
    _check_finite(np.asarray(out_data), name)
    rg = any(t.requires_grad for t in inputs)
    out = Tensor(out_data, requires_grad=rg)
    tape = active_tape()
    if rg and tape is not None:
        tape.record(out, backward)
    return out


# ---------------------------------------------------------------------------
# primitive operations
# ---------------------------------------------------------------------------


def matmul(a: Tensor, b: Tensor) -> Tensor:
    if a.data.ndim != 2 or b.data.ndim != 2:
        raise ShapeError("matmul expects 2-D operands")
    if a.data.shape[1] != b.data.shape[0]:
        raise ShapeError(f"inner dimensions disagree: {a.data.shape} x {b.data.shape}")
    out_data = a.data @ b.data

    def backward(g: np.ndarray) -> None:
        if a.requires_grad:
            a.accumulate_grad(g @ b.data.T)
        if b.requires_grad:
            b.accumulate_grad(a.data.T @ g)

    return custom_op(out_data, (a, b), backward, "matmul")


def add(a: Tensor, b: Tensor) -> Tensor:
    if a.data.shape != b.data.shape:
        raise ShapeError(f"add expects equal shapes, got {a.data.shape} and {b.data.shape}")

    def backward(g: np.ndarray) -> None:
        if a.requires_grad:
            a.accumulate_grad(g)
        if b.requires_grad:
            b.accumulate_grad(g)

    return custom_op(a.data + b.data, (a, b), backward, "add")


def multiply(a: Tensor, b: Tensor) -> Tensor:
    if a.data.shape != b.data.shape:
        raise ShapeError(f"multiply expects equal shapes, got {a.data.shape} and {b.data.shape}")

    def backward(g: np.ndarray) -> None:
        if a.requires_grad:
            a.accumulate_grad(g * b.data)
        if b.requires_grad:
            b.accumulate_grad(g * a.data)

    return custom_op(a.data * b.data, (a, b), backward, "multiply")


def scale(x: Tensor, s: float) -> Tensor:
    s = float(s)

    def backward(g: np.ndarray) -> None:
        if x.requires_grad:
            x.accumulate_grad(g * s)

    return custom_op(x.data * s, (x,), backward, "scale")


def bias_add(x: Tensor, b: Tensor) -> Tensor:
    """Add a 1-D bias over the last axis (the one permitted broadcast)."""
    if b.data.ndim != 1 or x.data.shape[-1] != b.data.shape[0]:
        raise ShapeError(f"bias of shape {b.data.shape} does not fit last axis of {x.data.shape}")

    def backward(g: np.ndarray) -> None:
        if x.requires_grad:
            x.accumulate_grad(g)
        if b.requires_grad:
            b.accumulate_grad(g.reshape(-1, b.data.shape[0]).sum(axis=0))

    return custom_op(x.data + b.data, (x, b), backward, "bias_add")


_GELU_C = math.sqrt(2.0 / math.pi)


def gelu(x: Tensor) -> Tensor:
    """GELU via the tanh closed form 0.5*x*(1 + tanh(c*(x + 0.044715*x^3)))."""
    u = _GELU_C * (x.data + 0.044715 * x.data**3)
    t = np.tanh(u)
    out_data = 0.5 * x.data * (1.0 + t)

    def backward(g: np.ndarray) -> None:
        if x.requires_grad:
            du = _GELU_C * (1.0 + 3 * 0.044715 * x.data**2)
            dx = 0.5 * (1.0 + t) + 0.5 * x.data * (1.0 - t**2) * du
            x.accumulate_grad(g * dx)

    return custom_op(out_data, (x,), backward, "gelu")


def softmax(x: Tensor, axis: int = -1) -> Tensor:
    if x.data.shape[x.data.ndim + axis if axis < 0 else axis] < 1:
        raise ShapeError("softmax needs at least one element along axis")
    shifted = x.data - x.data.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    out_data = e / e.sum(axis=axis, keepdims=True)

    def backward(g: np.ndarray) -> None:
        if x.requires_grad:
            inner = (g * out_data).sum(axis=axis, keepdims=True)
            x.accumulate_grad(out_data * (g - inner))

    return custom_op(out_data, (x,), backward, "softmax")


def layer_norm(x: Tensor, gain: Tensor, bias: Tensor, eps: float = 1e-5) -> Tensor:
    d = x.data.shape[-1]
    if gain.data.shape != (d,) or bias.data.shape != (d,):
        raise ShapeError("gain/bias must match the last-axis width")
    mu = x.data.mean(axis=-1, keepdims=True)
    var = x.data.var(axis=-1, keepdims=True)  # population variance
    inv = 1.0 / np.sqrt(var + eps)
    xhat = (x.data - mu) * inv
    out_data = xhat * gain.data + bias.data

    def backward(g: np.ndarray) -> None:
        if gain.requires_grad:
            gain.accumulate_grad((g * xhat).reshape(-1, d).sum(axis=0))
        if bias.requires_grad:
            bias.accumulate_grad(g.reshape(-1, d).sum(axis=0))
        if x.requires_grad:
            gy = g * gain.data
            m1 = gy.mean(axis=-1, keepdims=True)
            m2 = (gy * xhat).mean(axis=-1, keepdims=True)
            x.accumulate_grad(inv * (gy - m1 - xhat * m2))

    return custom_op(out_data, (x, gain, bias), backward, "layer_norm")


def cross_entropy(logits: Tensor, targets: Sequence[int], mask: Sequence[float]) -> Tensor:
    """Mean negative log-softmax of ``targets`` over unmasked positions."""
    if logits.data.ndim != 2:
        raise ShapeError("cross_entropy expects [T x V] logits")
    tgt = np.asarray(targets, dtype=np.int64)
    msk = np.asarray(mask, dtype=np.float64)
    t_len, vocab = logits.data.shape
    if tgt.shape != (t_len,) or msk.shape != (t_len,):
        raise ShapeError("targets/mask length must equal the sequence length")
    if tgt.min(initial=0) < 0 or tgt.max(initial=0) >= vocab:
        raise ShapeError("target ids out of vocabulary range")
    n = msk.sum()
    if n <= 0:
        raise EmptyLossError("all positions masked out of the loss")

    shifted = logits.data - logits.data.max(axis=1, keepdims=True)
    logz = np.log(np.exp(shifted).sum(axis=1))
    loglik = shifted[np.arange(t_len), tgt] - logz
    out_data = np.array(-(msk * loglik).sum() / n)

    def backward(g: np.ndarray) -> None:
        if logits.requires_grad:
            p = np.exp(shifted)
            p /= p.sum(axis=1, keepdims=True)
            p[np.arange(t_len), tgt] -= 1.0
            logits.accumulate_grad(p * (msk * (float(g) / n))[:, None])

    return custom_op(out_data, (logits,), backward, "cross_entropy")


def concat(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    if not tensors:
        raise ShapeError("concat of zero tensors")
    out_data = np.concatenate([t.data for t in tensors], axis=axis)
    sizes = [t.data.shape[axis] for t in tensors]
    offsets = np.cumsum([0] + sizes)

    def backward(g: np.ndarray) -> None:
        idx = [slice(None)] * g.ndim
        for t, start, stop in zip(tensors, offsets[:-1], offsets[1:]):
            if t.requires_grad:
                idx[axis] = slice(start, stop)
                t.accumulate_grad(g[tuple(idx)])

    return custom_op(out_data, tuple(tensors), backward, "concat")


def split(x: Tensor, sections: int, axis: int = 0) -> list[Tensor]:
    """Split into ``sections`` equal parts along ``axis`` (dual of concat)."""
    if x.data.shape[axis] % sections != 0:
        raise ShapeError(f"axis {axis} of {x.data.shape} not divisible by {sections}")
    width = x.data.shape[axis] // sections
    outs = []
    for i in range(sections):
        idx = [slice(None)] * x.data.ndim
        idx[axis] = slice(i * width, (i + 1) * width)
        piece_idx = tuple(idx)

        def backward(g: np.ndarray, piece_idx=piece_idx) -> None:
            if x.requires_grad:
                full = np.zeros_like(x.data)
                full[piece_idx] = g
                x.accumulate_grad(full)

        outs.append(custom_op(x.data[piece_idx].copy(), (x,), backward, "split"))
    return outs


def reshape(x: Tensor, shape: Sequence[int]) -> Tensor:
    shape = tuple(int(s) for s in shape)

    def backward(g: np.ndarray) -> None:
        if x.requires_grad:
            x.accumulate_grad(g.reshape(x.data.shape))

    return custom_op(x.data.reshape(shape), (x,), backward, "reshape")


def transpose(x: Tensor, axes: Sequence[int] | None = None) -> Tensor:
    inverse = None if axes is None else np.argsort(axes)

    def backward(g: np.ndarray) -> None:
        if x.requires_grad:
            x.accumulate_grad(g.transpose(inverse) if inverse is not None else g.T)

    return custom_op(np.ascontiguousarray(x.data.transpose(axes)), (x,), backward, "transpose")


def embedding_lookup(table: Tensor, ids: Sequence[int]) -> Tensor:
    idx = np.asarray(ids, dtype=np.int64)
    if idx.ndim != 1:
        raise ShapeError("embedding ids must be a flat sequence")
    if idx.size and (idx.min() < 0 or idx.max() >= table.data.shape[0]):
        raise ShapeError("embedding id out of table range")

    def backward(g: np.ndarray) -> None:
        if table.requires_grad:
            full = np.zeros_like(table.data)
            np.add.at(full, idx, g)
            table.accumulate_grad(full)

    return custom_op(table.data[idx].copy(), (table,), backward, "embedding_lookup")


def mean(x: Tensor, axis: int) -> Tensor:
    n = x.data.shape[axis]

    def backward(g: np.ndarray) -> None:
        if x.requires_grad:
            x.accumulate_grad(np.repeat(np.expand_dims(g / n, axis), n, axis=axis))

    return custom_op(x.data.mean(axis=axis), (x,), backward, "mean")


# ---------------------------------------------------------------------------
# finite-difference checking
# ---------------------------------------------------------------------------


def grad_check(
    f: Callable[[Tensor], Tensor],
    x: Tensor,
    h: float = 1e-5,
    coords: Sequence[int] | None = None,
) -> float:
    """Max relative error between the tape gradient of ``f`` and central differences.

    ``f`` must be scalar-valued and a pure function of ``x`` (other tensors
    it closes over are held fixed).  Error per coordinate is
    ``|analytic - numeric| / max(1, |analytic|)``; ``coords`` restricts the
    probe to a subset of flat indices (all of them by default).  ``x.data``
    is perturbed in place and restored.
    """
    x.zero_grad()
    with Tape() as tape:
        out = f(x)
        if out.data.size != 1:
            raise ShapeError("grad_check needs a scalar-valued function")
        tape.backward(out)
    analytic = np.zeros_like(x.data) if x.grad is None else x.grad.copy()
    x.zero_grad()

    flat = x.data.reshape(-1)
    aflat = analytic.reshape(-1)
    indices = range(flat.size) if coords is None else coords
    max_err = 0.0
    for i in indices:
        orig = flat[i]
        flat[i] = orig + h
        fp = f(x).data.item()
        flat[i] = orig - h
        fm = f(x).data.item()
        flat[i] = orig
        numeric = (fp - fm) / (2.0 * h)
        err = abs(aflat[i] - numeric) / max(1.0, abs(aflat[i]))
        max_err = max(max_err, err)
    return max_err
