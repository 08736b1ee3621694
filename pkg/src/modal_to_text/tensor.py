"""
Dense tensors with reverse-mode automatic differentiation.

Operations executed while a `Tape` is active are recorded in order; `Tape.backward` replays the
records in exact reverse order and accumulates gradients additively into `Tensor.grad`. Without an
active tape operations run in inference mode and produce tensors that do not require grad.

Broadcasting is limited to leading-batch dimensions: the smaller operand's shape must be a suffix
of the larger operand's shape.
"""

from __future__ import annotations

import threading
from contextlib import contextmanager
from dataclasses import dataclass
from typing import Callable, List, Optional, Sequence, Tuple

import numpy as np

from modal_to_text.utility import DegenerateBatchError, DimensionError, NumericError

BackwardRule = Callable[[np.ndarray], Sequence[Optional[np.ndarray]]]


class Tensor:
    def __init__(self, data, *, requires_grad: bool = False, dtype=None, name: Optional[str] = None) -> None:
        if dtype is None:
            dtype = data.dtype if isinstance(data, np.ndarray) and np.issubdtype(data.dtype, np.floating) else np.float64
        self.data: np.ndarray = np.asarray(data, dtype=dtype)
        self.grad: Optional[np.ndarray] = None
        self.requires_grad = requires_grad
        self.node_id: Optional[int] = None
        self.tape: Optional[Tape] = None
        self.name = name

    @property
    def shape(self) -> Tuple[int, ...]:
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def size(self) -> int:
        return int(self.data.size)

    def item(self) -> float:
        if self.data.size != 1:
            raise DimensionError(f"item() needs a single-element tensor, got shape {self.shape}")
        return float(self.data.reshape(-1)[0])

    def numpy(self) -> np.ndarray:
        return self.data

    def zero_grad(self) -> None:
        self.grad = np.zeros_like(self.data)

    def backward(self) -> None:
        if self.tape is None:
            raise ValueError(f"Tensor {self.name or ''} was not produced on a tape; run the forward pass inside `with Tape():`")
        self.tape.backward(loss=self)

    def as_readable_dict(self):
        return {
            "name": self.name,
            "shape": self.shape,
            "dtype": str(self.dtype),
            "requires_grad": self.requires_grad,
            "node_id": self.node_id,
            "data": np.array2string(self.data, threshold=16),
            "has_grad": self.grad is not None,
        }

    def __repr__(self):
        return f"Tensor(shape={self.shape}, dtype={self.dtype}, requires_grad={self.requires_grad})"

    def __add__(self, other):
        return add(self, as_tensor(other))

    def __radd__(self, other):
        return add(as_tensor(other), self)

    def __sub__(self, other):
        return sub(self, as_tensor(other))

    def __mul__(self, other):
        if isinstance(other, (int, float)):
            return scale(self, float(other))
        return mul(self, as_tensor(other))

    def __rmul__(self, other):
        return self.__mul__(other)

    def __neg__(self):
        return scale(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)


@dataclass
class TapeRecord:
    name: str
    inputs: Tuple[Tensor, ...]
    output: Tensor
    backward: BackwardRule


class Tape:
    def __init__(self) -> None:
        self.records: List[TapeRecord] = []

    def __enter__(self) -> "Tape":
        _tape_stack().append(self)
        return self

    def __exit__(self, exc_type, exc_value, exc_traceback) -> None:
        _tape_stack().pop()

    def record(self, *, name: str, inputs: Tuple[Tensor, ...], output: Tensor, backward: BackwardRule) -> None:
        output.node_id = len(self.records)
        output.tape = self
        self.records.append(TapeRecord(name=name, inputs=inputs, output=output, backward=backward))

    def backward(self, *, loss: Tensor) -> None:
        if loss.tape is not self or loss.node_id is None:
            raise ValueError("loss was not recorded on this tape")
        if loss.size != 1:
            raise DimensionError(f"backward needs a scalar loss, got shape {loss.shape}")
        loss.grad = np.ones_like(loss.data)
        for record in reversed(self.records[: loss.node_id + 1]):
            grad_output = record.output.grad
            if grad_output is None:
                continue
            for tensor, grad in zip(record.inputs, record.backward(grad_output)):
                if grad is None or not tensor.requires_grad:
                    continue
                if grad.shape != tensor.shape:
                    raise DimensionError(f"{record.name} produced gradient of shape {grad.shape} for input of shape {tensor.shape}")
                if tensor.grad is None:
                    tensor.grad = np.array(grad, dtype=tensor.dtype, copy=True)
                else:
                    tensor.grad += grad


_local = threading.local()


def _tape_stack() -> List[Optional[Tape]]:
    if not hasattr(_local, "tapes"):
        _local.tapes = []
    return _local.tapes


def current_tape() -> Optional[Tape]:
    tapes = _tape_stack()
    return tapes[-1] if tapes else None


@contextmanager
def no_grad():
    # operations inside run in inference mode even when an outer tape is active
    _tape_stack().append(None)
    try:
        yield
    finally:
        _tape_stack().pop()


def as_tensor(value) -> Tensor:
    return value if isinstance(value, Tensor) else Tensor(value)


def apply_operation(*, name: str, inputs: Tuple[Tensor, ...], output_data: np.ndarray, backward: BackwardRule) -> Tensor:
    tape = current_tape()
    requires_grad = tape is not None and any(x.requires_grad for x in inputs)
    output = Tensor(output_data, requires_grad=requires_grad)
    if requires_grad and tape is not None:
        tape.record(name=name, inputs=inputs, output=output, backward=backward)
    return output


def stop_gradient(x: Tensor) -> Tensor:
    return Tensor(x.data, requires_grad=False)


def broadcast_shape(*, a: Tensor, b: Tensor, name: str) -> Tuple[int, ...]:
    if a.shape == b.shape:
        return a.shape
    longer, shorter = (a.shape, b.shape) if a.data.ndim >= b.data.ndim else (b.shape, a.shape)
    if len(shorter) == 0 or longer[len(longer) - len(shorter) :] == shorter:
        return longer
    raise DimensionError(f"{name}: shapes {a.shape} and {b.shape} are not compatible (only leading-batch broadcasting is supported)")


def unbroadcast(*, grad: np.ndarray, shape: Tuple[int, ...]) -> np.ndarray:
    if grad.shape == shape:
        return grad
    return grad.reshape((-1,) + tuple(shape)).sum(axis=0).reshape(shape)


def add(a: Tensor, b: Tensor) -> Tensor:
    broadcast_shape(a=a, b=b, name="add")
    return apply_operation(
        name="add",
        inputs=(a, b),
        output_data=a.data + b.data,
        backward=lambda g: (unbroadcast(grad=g, shape=a.shape), unbroadcast(grad=g, shape=b.shape)),
    )


def sub(a: Tensor, b: Tensor) -> Tensor:
    broadcast_shape(a=a, b=b, name="sub")
    return apply_operation(
        name="sub",
        inputs=(a, b),
        output_data=a.data - b.data,
        backward=lambda g: (unbroadcast(grad=g, shape=a.shape), unbroadcast(grad=-g, shape=b.shape)),
    )


def mul(a: Tensor, b: Tensor) -> Tensor:
    broadcast_shape(a=a, b=b, name="mul")
    return apply_operation(
        name="mul",
        inputs=(a, b),
        output_data=a.data * b.data,
        backward=lambda g: (unbroadcast(grad=g * b.data, shape=a.shape), unbroadcast(grad=g * a.data, shape=b.shape)),
    )


def scale(a: Tensor, factor: float) -> Tensor:
    return apply_operation(name="scale", inputs=(a,), output_data=a.data * factor, backward=lambda g: (g * factor,))


def matmul(a: Tensor, b: Tensor) -> Tensor:
    if a.data.ndim != 2 or b.data.ndim != 2 or a.shape[1] != b.shape[0]:
        raise DimensionError(f"matmul: cannot multiply {a.shape} by {b.shape}")
    return apply_operation(
        name="matmul",
        inputs=(a, b),
        output_data=a.data @ b.data,
        backward=lambda g: (g @ b.data.T, a.data.T @ g),
    )


def softmax(logits: Tensor, temperature: float = 1.0) -> Tensor:
    if not temperature > 0:
        raise ValueError(f"softmax temperature must be positive, got {temperature}")
    if not np.all(np.isfinite(logits.data)):
        raise NumericError(f"softmax received non-finite logits of shape {logits.shape}")
    scaled = logits.data / temperature
    exponentials = np.exp(scaled - scaled.max(axis=-1, keepdims=True))
    probabilities = exponentials / exponentials.sum(axis=-1, keepdims=True)

    def backward(g):
        return ((probabilities * (g - (g * probabilities).sum(axis=-1, keepdims=True))) / temperature,)

    return apply_operation(name="softmax", inputs=(logits,), output_data=probabilities, backward=backward)


def log(x: Tensor, floor: Optional[float] = None) -> Tensor:
    if floor is None:
        if np.any(x.data <= 0):
            raise NumericError(f"log of non-positive values in tensor of shape {x.shape}")
        return apply_operation(name="log", inputs=(x,), output_data=np.log(x.data), backward=lambda g: (g / x.data,))
    clamped = np.maximum(x.data, floor)
    passes = x.data > floor
    return apply_operation(name="log", inputs=(x,), output_data=np.log(clamped), backward=lambda g: (np.where(passes, g / clamped, 0.0),))


def exp(x: Tensor) -> Tensor:
    output_data = np.exp(x.data)
    return apply_operation(name="exp", inputs=(x,), output_data=output_data, backward=lambda g: (g * output_data,))


def relu(x: Tensor) -> Tensor:
    passes = x.data > 0
    return apply_operation(name="relu", inputs=(x,), output_data=np.where(passes, x.data, 0.0), backward=lambda g: (np.where(passes, g, 0.0),))


def concatenate(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    if not tensors:
        raise ValueError("concatenate needs at least one tensor")
    boundaries = np.cumsum([x.shape[axis] for x in tensors])[:-1]
    try:
        output_data = np.concatenate([x.data for x in tensors], axis=axis)
    except ValueError as exception:
        raise DimensionError(f"concatenate: incompatible shapes {[x.shape for x in tensors]}") from exception
    return apply_operation(
        name="concatenate",
        inputs=tuple(tensors),
        output_data=output_data,
        backward=lambda g: tuple(np.split(g, boundaries, axis=axis)),
    )


def slice_rows(x: Tensor, *, start: int, stop: int) -> Tensor:
    if not 0 <= start <= stop <= x.shape[0]:
        raise DimensionError(f"slice_rows: [{start}:{stop}] out of range for shape {x.shape}")

    def backward(g):
        grad = np.zeros_like(x.data)
        grad[start:stop] = g
        return (grad,)

    return apply_operation(name="slice_rows", inputs=(x,), output_data=x.data[start:stop].copy(), backward=backward)


def gather_rows(table: Tensor, indices: Sequence[int]) -> Tensor:
    index_array = np.asarray(indices, dtype=np.int64)
    if index_array.size and (index_array.min() < 0 or index_array.max() >= table.shape[0]):
        raise DimensionError(f"gather_rows: indices {index_array.tolist()} out of range for table of shape {table.shape}")

    def backward(g):
        grad = np.zeros_like(table.data)
        np.add.at(grad, index_array, g)
        return (grad,)

    return apply_operation(name="gather_rows", inputs=(table,), output_data=table.data[index_array], backward=backward)


def reshape(x: Tensor, shape: Tuple[int, ...]) -> Tensor:
    try:
        output_data = x.data.reshape(shape)
    except ValueError as exception:
        raise DimensionError(f"reshape: cannot reshape {x.shape} into {shape}") from exception
    return apply_operation(name="reshape", inputs=(x,), output_data=output_data, backward=lambda g: (g.reshape(x.shape),))


def transpose(x: Tensor) -> Tensor:
    if x.data.ndim != 2:
        raise DimensionError(f"transpose: expected a matrix, got shape {x.shape}")
    return apply_operation(name="transpose", inputs=(x,), output_data=x.data.T.copy(), backward=lambda g: (g.T,))


def sum_all(x: Tensor) -> Tensor:
    return apply_operation(name="sum_all", inputs=(x,), output_data=np.asarray(x.data.sum()), backward=lambda g: (np.full_like(x.data, g),))


def mean_rows(x: Tensor) -> Tensor:
    count = x.shape[0]
    if count == 0:
        raise DimensionError("mean_rows of an empty tensor")
    return apply_operation(
        name="mean_rows",
        inputs=(x,),
        output_data=x.data.mean(axis=0),
        backward=lambda g: (np.broadcast_to(g / count, x.shape).copy(),),
    )


def layer_norm(x: Tensor, gain: Tensor, bias: Tensor, epsilon: float = 1e-5) -> Tensor:
    width = x.shape[-1] if x.data.ndim else 0
    if width < 1 or gain.shape != (width,) or bias.shape != (width,):
        raise DimensionError(f"layer_norm: input {x.shape} with gain {gain.shape} and bias {bias.shape}")
    mean = x.data.mean(axis=-1, keepdims=True)
    centered = x.data - mean
    inverse_std = 1.0 / np.sqrt((centered * centered).mean(axis=-1, keepdims=True) + epsilon)
    normalized = centered * inverse_std

    def backward(g):
        grad_normalized = g * gain.data
        grad_x = inverse_std * (
            grad_normalized - grad_normalized.mean(axis=-1, keepdims=True) - normalized * (grad_normalized * normalized).mean(axis=-1, keepdims=True)
        )
        leading = tuple(range(x.data.ndim - 1))
        return (grad_x, (g * normalized).sum(axis=leading), g.sum(axis=leading))

    return apply_operation(name="layer_norm", inputs=(x, gain, bias), output_data=normalized * gain.data + bias.data, backward=backward)


def cross_entropy(probabilities: Tensor, gold_ids: Sequence[int], mask: Optional[Sequence[bool]] = None) -> Tensor:
    """
    Mean negative log-likelihood of `gold_ids` under the row distributions of `probabilities`,
    taken over the positions whose mask entry is true.
    """
    if probabilities.data.ndim != 2:
        raise DimensionError(f"cross_entropy expects an n x T' matrix, got {probabilities.shape}")
    count, vocabulary_size = probabilities.shape
    gold = np.asarray(gold_ids, dtype=np.int64)
    valid = np.ones(count, dtype=bool) if mask is None else np.asarray(mask, dtype=bool)
    if gold.shape != (count,) or valid.shape != (count,):
        raise DimensionError(f"cross_entropy: {count} positions but {gold.shape[0]} gold ids and {valid.shape[0]} mask entries")
    if count and (gold.min() < 0 or gold.max() >= vocabulary_size):
        raise ValueError(f"cross_entropy: gold ids must be in [0, {vocabulary_size}), got {gold.tolist()}")
    valid_count = int(valid.sum())
    if valid_count == 0:
        raise DegenerateBatchError("cross_entropy: every position is masked out")
    rows = np.nonzero(valid)[0]
    picked = np.maximum(probabilities.data[rows, gold[rows]], np.finfo(probabilities.dtype).tiny)
    loss = -np.log(picked).sum() / valid_count

    def backward(g):
        grad = np.zeros_like(probabilities.data)
        grad[rows, gold[rows]] = -g / (valid_count * picked)
        return (grad,)

    return apply_operation(name="cross_entropy", inputs=(probabilities,), output_data=np.asarray(loss), backward=backward)


def attention(query: Tensor, key: Tensor, value: Tensor, *, num_heads: int, causal: bool = False) -> Tensor:
    """
    Multi-head scaled dot-product attention over already projected inputs. `query` is Lq x D,
    `key` and `value` are Lk x D; heads split D evenly. Causal masking requires Lq == Lk.
    """
    query_length, width = query.shape
    key_length = key.shape[0]
    if key.shape != (key_length, width) or value.shape != (key_length, width) or width % num_heads:
        raise DimensionError(f"attention: query {query.shape}, key {key.shape}, value {value.shape}, {num_heads} heads")
    if causal and query_length != key_length:
        raise DimensionError(f"causal attention needs equal lengths, got {query_length} and {key_length}")
    head_width = width // num_heads
    factor = 1.0 / np.sqrt(head_width)

    def split(data, length):
        return data.reshape(length, num_heads, head_width).transpose(1, 0, 2)

    query_heads, key_heads, value_heads = split(query.data, query_length), split(key.data, key_length), split(value.data, key_length)
    scores = (query_heads @ key_heads.transpose(0, 2, 1)) * factor
    if causal:
        scores[:, np.triu(np.ones((query_length, key_length), dtype=bool), k=1)] = -np.inf
    exponentials = np.exp(scores - scores.max(axis=-1, keepdims=True))
    weights = exponentials / exponentials.sum(axis=-1, keepdims=True)
    output_data = (weights @ value_heads).transpose(1, 0, 2).reshape(query_length, width)

    def backward(g):
        grad_heads = split(g, query_length)
        grad_weights = grad_heads @ value_heads.transpose(0, 2, 1)
        grad_scores = weights * (grad_weights - (grad_weights * weights).sum(axis=-1, keepdims=True)) * factor
        grad_query = (grad_scores @ key_heads).transpose(1, 0, 2).reshape(query_length, width)
        grad_key = (grad_scores.transpose(0, 2, 1) @ query_heads).transpose(1, 0, 2).reshape(key_length, width)
        grad_value = (weights.transpose(0, 2, 1) @ grad_heads).transpose(1, 0, 2).reshape(key_length, width)
        return (grad_query, grad_key, grad_value)

    return apply_operation(name="attention", inputs=(query, key, value), output_data=output_data, backward=backward)


def straight_through_matmul(hard: np.ndarray, soft: Tensor, weight: Tensor) -> Tensor:
    """
    Forward computes `hard @ weight`; backward is exactly the backward of `soft @ weight`.
    """
    if hard.shape != soft.shape or soft.data.ndim != 2 or soft.shape[1] != weight.shape[0]:
        raise DimensionError(f"straight_through_matmul: hard {hard.shape}, soft {soft.shape}, weight {weight.shape}")
    return apply_operation(
        name="straight_through_matmul",
        inputs=(soft, weight),
        output_data=hard @ weight.data,
        backward=lambda g: (g @ weight.data.T, soft.data.T @ g),
    )


def dropout(x: Tensor, *, rate: float, rng: Optional[np.random.Generator]) -> Tensor:
    if rate <= 0 or rng is None:
        return x
    if rate >= 1:
        raise ValueError(f"dropout rate must be in [0, 1), got {rate}")
    keep = (rng.random(x.shape) >= rate) / (1.0 - rate)
    return apply_operation(name="dropout", inputs=(x,), output_data=x.data * keep, backward=lambda g: (g * keep,))


def numerical_gradient(*, function: Callable[[], float], tensor: Tensor, step: float = 1e-5) -> np.ndarray:
    """Central finite differences of a scalar `function` with respect to every entry of `tensor`."""
    grad = np.zeros_like(tensor.data, dtype=np.float64)
    flat = tensor.data.reshape(-1)
    for i in range(flat.size):
        original = flat[i]
        flat[i] = original + step
        upper = function()
        flat[i] = original - step
        lower = function()
        flat[i] = original
        grad.reshape(-1)[i] = (upper - lower) / (2 * step)
    return grad


def relative_error(*, actual: np.ndarray, expected: np.ndarray) -> float:
    scale_value = max(float(np.max(np.abs(actual), initial=0.0)), float(np.max(np.abs(expected), initial=0.0)), 1e-8)
    return float(np.max(np.abs(actual - expected), initial=0.0)) / scale_value
