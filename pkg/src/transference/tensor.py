"""Dense tensors with tape-based reverse-mode automatic differentiation.

Data lives in numpy arrays (float32 for training storage, float64 for the
gradient-check tests; ops preserve the input dtype).  Operations executed
while a :class:`GradTape` is active are recorded in execution order, and
``backward`` replays the tape in reverse, which visits operations in
reverse topological order by construction.  Tensors are treated as
immutable values once created; gradients accumulate additively when a
tensor feeds several operations.
"""

from __future__ import annotations

from typing import Callable, Iterable, Sequence

import numpy as np

from .errors import ConfigError, ContractError, NumericError, ShapeError

DEFAULT_DTYPE = np.float32

# Additive mask value standing in for -inf: after the max-subtraction in
# softmax, exp() underflows to an exact 0.0 weight, while every stored
# tensor stays finite.
MASK_VALUE = -1e9


class Tensor:
    """A dense row-major float array plus autodiff bookkeeping."""

    __slots__ = ("data", "requires_grad", "grad")

    def __init__(self, data, requires_grad: bool = False, dtype=None):
        arr = np.asarray(data)
        if dtype is not None:
            arr = arr.astype(dtype, copy=False)
        elif arr.dtype not in (np.float32, np.float64):
            arr = arr.astype(DEFAULT_DTYPE)
        self.data = arr
        self.requires_grad = bool(requires_grad)
        self.grad = None

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def size(self) -> int:
        return self.data.size

    def item(self) -> float:
        if self.data.size != 1:
            raise ContractError(f"item() on tensor of shape {self.shape}")
        return float(self.data.reshape(()))

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, dtype={self.data.dtype}, requires_grad={self.requires_grad})"


class TapeEntry:
    """One executed operation: output, inputs, and its backward rule."""

    __slots__ = ("output", "inputs", "backward_rule")

    def __init__(self, output: Tensor, inputs: tuple[Tensor, ...],
                 backward_rule: Callable[[np.ndarray], tuple]):
        self.output = output
        self.inputs = inputs
        self.backward_rule = backward_rule


class GradTape:
    """Ordered record of executed operations (define-by-run).

    A tape is single-owner: use one per forward pass and do not share it
    across concurrent tasks.
    """

    def __init__(self):
        self.entries: list[TapeEntry] = []

    def __enter__(self) -> "GradTape":
        _TAPE_STACK.append(self)
        return self

    def __exit__(self, exc_type, exc, tb) -> None:
        _TAPE_STACK.pop()

    def record(self, output: Tensor, inputs: tuple[Tensor, ...],
               backward_rule: Callable[[np.ndarray], tuple]) -> None:
        self.entries.append(TapeEntry(output, inputs, backward_rule))


_TAPE_STACK: list[GradTape] = []


def _active_tape() -> GradTape | None:
    return _TAPE_STACK[-1] if _TAPE_STACK else None


def _make_output(data: np.ndarray, inputs: Sequence[Tensor],
                 backward_rule: Callable[[np.ndarray], tuple]) -> Tensor:
    out = Tensor(data, requires_grad=any(t.requires_grad for t in inputs),
                 dtype=data.dtype)
    tape = _active_tape()
    if tape is not None and out.requires_grad:
        tape.record(out, tuple(inputs), backward_rule)
    return out


def backward(tape: GradTape, loss: Tensor) -> dict[Tensor, np.ndarray]:
    """Accumulate d(loss)/d(leaf) for every requires-grad leaf on the tape.

    Returns a mapping keyed by leaf tensor; leaves present on the tape but
    not on any path to the loss get a zero gradient.  Also sets ``.grad``
    on those leaves.
    """
    if loss.data.size != 1:
        raise ContractError(f"backward needs a scalar loss, got shape {loss.shape}")

    grads: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
    produced = {id(entry.output) for entry in tape.entries}

    leaves: dict[int, Tensor] = {}
    for entry in tape.entries:
        for t in entry.inputs:
            if t.requires_grad and id(t) not in produced:
                leaves[id(t)] = t
    if loss.requires_grad and id(loss) not in produced:
        leaves[id(loss)] = loss

    for entry in reversed(tape.entries):
        out_grad = grads.pop(id(entry.output), None)
        if out_grad is None:
            continue
        input_grads = entry.backward_rule(out_grad)
        for t, g in zip(entry.inputs, input_grads):
            if g is None or not t.requires_grad:
                continue
            key = id(t)
            if key in grads:
                grads[key] = grads[key] + g
            else:
                grads[key] = g

    result: dict[Tensor, np.ndarray] = {}
    for key, leaf in leaves.items():
        g = grads.get(key)
        if g is None:
            g = np.zeros_like(leaf.data)
        else:
            g = np.asarray(g, dtype=leaf.data.dtype)
        leaf.grad = g
        result[leaf] = g
    return result


def _unbroadcast(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    """Sum a gradient down to `shape` after numpy broadcasting."""
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, (g_dim, s_dim) in enumerate(zip(grad.shape, shape)):
        if s_dim == 1 and g_dim != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad


def constant(data, dtype=None) -> Tensor:
    """A tensor that never takes gradients (masks, positional tables)."""
    return Tensor(data, requires_grad=False, dtype=dtype)


def add(a: Tensor, b: Tensor) -> Tensor:
    out = a.data + b.data

    def rule(g):
        return _unbroadcast(g, a.data.shape), _unbroadcast(g, b.data.shape)

    return _make_output(out, (a, b), rule)


def sub(a: Tensor, b: Tensor) -> Tensor:
    out = a.data - b.data

    def rule(g):
        return _unbroadcast(g, a.data.shape), _unbroadcast(-g, b.data.shape)

    return _make_output(out, (a, b), rule)


def mul(a: Tensor, b: Tensor) -> Tensor:
    out = a.data * b.data
    a_data, b_data = a.data, b.data

    def rule(g):
        return (_unbroadcast(g * b_data, a_data.shape),
                _unbroadcast(g * a_data, b_data.shape))

    return _make_output(out, (a, b), rule)


def scale(a: Tensor, factor: float) -> Tensor:
    out = a.data * a.data.dtype.type(factor)

    def rule(g):
        return (g * a.data.dtype.type(factor),)

    return _make_output(out, (a,), rule)


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Matrix product; leading batch dimensions broadcast."""
    if a.data.ndim < 2 or b.data.ndim < 2:
        raise ShapeError(f"matmul needs rank >= 2, got {a.shape} and {b.shape}")
    if a.data.shape[-1] != b.data.shape[-2]:
        raise ShapeError(
            f"matmul inner dimensions disagree: {a.shape} x {b.shape}")
    out = np.matmul(a.data, b.data)
    a_data, b_data = a.data, b.data

    def rule(g):
        ga = np.matmul(g, np.swapaxes(b_data, -1, -2))
        gb = np.matmul(np.swapaxes(a_data, -1, -2), g)
        return _unbroadcast(ga, a_data.shape), _unbroadcast(gb, b_data.shape)

    return _make_output(out, (a, b), rule)


def relu(a: Tensor) -> Tensor:
    out = np.maximum(a.data, 0)
    keep = a.data > 0

    def rule(g):
        return (g * keep,)

    return _make_output(out, (a,), rule)


def softmax(a: Tensor, axis: int = -1) -> Tensor:
    """Numerically stabilized softmax along `axis`; slices sum to 1."""
    if not -a.data.ndim <= axis < a.data.ndim:
        raise ShapeError(f"softmax axis {axis} invalid for shape {a.shape}")
    if np.isnan(a.data).any():
        raise NumericError("softmax input contains NaN")
    shifted = a.data - a.data.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    out = e / e.sum(axis=axis, keepdims=True)

    def rule(g):
        inner = (g * out).sum(axis=axis, keepdims=True)
        return ((g - inner) * out,)

    return _make_output(out, (a,), rule)


def log_softmax(a: Tensor, axis: int = -1) -> Tensor:
    if not -a.data.ndim <= axis < a.data.ndim:
        raise ShapeError(f"log_softmax axis {axis} invalid for shape {a.shape}")
    shifted = a.data - a.data.max(axis=axis, keepdims=True)
    out = shifted - np.log(np.exp(shifted).sum(axis=axis, keepdims=True))
    probs = np.exp(out)

    def rule(g):
        return (g - probs * g.sum(axis=axis, keepdims=True),)

    return _make_output(out, (a,), rule)


def layer_norm(a: Tensor, gain: Tensor, bias: Tensor,
               epsilon: float = 1e-6) -> Tensor:
    """Normalize the last dimension to zero mean / unit variance, then
    apply elementwise gain and bias."""
    dim = a.data.shape[-1]
    if gain.data.shape != (dim,) or bias.data.shape != (dim,):
        raise ShapeError(
            f"layer_norm gain/bias {gain.shape}/{bias.shape} do not match last dim {dim}")
    mean = a.data.mean(axis=-1, keepdims=True)
    centered = a.data - mean
    var = (centered * centered).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + a.data.dtype.type(epsilon))
    x_hat = centered * inv
    out = x_hat * gain.data + bias.data
    gain_data = gain.data

    def rule(g):
        lead_axes = tuple(range(g.ndim - 1))
        g_gain = (g * x_hat).sum(axis=lead_axes)
        g_bias = g.sum(axis=lead_axes)
        d_hat = g * gain_data
        g_a = inv * (d_hat
                     - d_hat.mean(axis=-1, keepdims=True)
                     - x_hat * (d_hat * x_hat).mean(axis=-1, keepdims=True))
        return g_a, g_gain, g_bias

    return _make_output(out, (a, gain, bias), rule)


def dropout(a: Tensor, p: float, training: bool, rng) -> Tensor:
    """Inverted dropout: zero with probability p and scale survivors by
    1/(1-p) at train time; identity in evaluation mode.

    `rng` is an integer seed or a numpy Generator; it is only consumed in
    training mode with p > 0.
    """
    if not 0.0 <= p < 1.0:
        raise ConfigError(f"dropout probability {p} outside [0, 1)")
    if not training or p == 0.0:
        return a
    gen = np.random.default_rng(rng) if isinstance(rng, int) else rng
    if gen is None:
        raise ContractError("training-mode dropout needs an RNG")
    keep = (gen.random(a.data.shape) >= p)
    factor = a.data.dtype.type(1.0 / (1.0 - p))
    mask = keep.astype(a.data.dtype) * factor
    out = a.data * mask

    def rule(g):
        return (g * mask,)

    return _make_output(out, (a,), rule)


def embedding(table: Tensor, ids: np.ndarray) -> Tensor:
    """Row lookup; backward scatter-adds into the table gradient."""
    ids = np.asarray(ids)
    if ids.size and (ids.min() < 0 or ids.max() >= table.data.shape[0]):
        raise ContractError(
            f"embedding ids outside [0, {table.data.shape[0]})")
    out = table.data[ids]

    def rule(g):
        g_table = np.zeros_like(table.data)
        np.add.at(g_table, ids.reshape(-1),
                  g.reshape(-1, table.data.shape[-1]))
        return (g_table,)

    return _make_output(out, (table,), rule)


def reshape(a: Tensor, shape: Iterable[int]) -> Tensor:
    shape = tuple(shape)
    out = a.data.reshape(shape)
    orig = a.data.shape

    def rule(g):
        return (g.reshape(orig),)

    return _make_output(out, (a,), rule)


def transpose(a: Tensor, axes: Iterable[int]) -> Tensor:
    axes = tuple(axes)
    out = np.transpose(a.data, axes)
    inverse = tuple(np.argsort(axes))

    def rule(g):
        return (np.transpose(g, inverse),)

    return _make_output(out, (a,), rule)


def reduce_sum(a: Tensor, axis: int | None = None,
               keepdims: bool = False) -> Tensor:
    out = a.data.sum(axis=axis, keepdims=keepdims)
    shape = a.data.shape

    def rule(g):
        g = np.asarray(g)
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, shape).copy(),)

    return _make_output(np.asarray(out), (a,), rule)


def gather_last(a: Tensor, index: np.ndarray) -> Tensor:
    """take_along_axis on the last axis; index shape = a.shape[:-1] + (k,)."""
    index = np.asarray(index)
    if index.shape[:-1] != a.data.shape[:-1]:
        raise ShapeError(
            f"gather index shape {index.shape} incompatible with {a.shape}")
    out = np.take_along_axis(a.data, index, axis=-1)
    flat_rows = int(np.prod(a.data.shape[:-1], dtype=np.int64)) if a.data.ndim > 1 else 1

    def rule(g):
        g_a = np.zeros_like(a.data)
        g2 = g_a.reshape(flat_rows, a.data.shape[-1])
        idx2 = index.reshape(flat_rows, index.shape[-1])
        rows = np.arange(flat_rows)[:, None]
        np.add.at(g2, (rows, idx2), g.reshape(flat_rows, index.shape[-1]))
        return (g_a,)

    return _make_output(out, (a,), rule)
