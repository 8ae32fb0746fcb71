import math
import threading
from dataclasses import dataclass
from enum import Enum
from typing import Callable, List, Optional, Sequence, Tuple, Union

import numpy as np

from .utils import ContractError, DimensionError, DomainError, TokenIndexError

__all__ = [
    'Precision', 'DenseTensor', 'Parameter', 'ComputationTape', 'TapeNode',
    'active_tape', 'backward', 'zero_grad',
    'add', 'sub', 'mul', 'div', 'neg', 'matmul', 'reduce_sum', 'sum_lastdim', 'reduce_norm_lastdim',
    'elementwise', 'gelu', 'softmax_lastdim', 'cross_entropy', 'reshape', 'transpose',
    'embedding', 'masked_fill', 'where', 'ELEMENTWISE_FNS'
]

Scalar = Union[int, float]


class Precision(Enum):
    WIDE = 'wide'
    NARROW = 'narrow'

    @property
    def dtype(self) -> type:
        return np.float64 if self is Precision.WIDE else np.float32

    @classmethod
    def of(cls, dtype) -> 'Precision':
        return cls.WIDE if np.dtype(dtype) == np.float64 else cls.NARROW


class DenseTensor:
    """
    Row-major real array with an optional link to the tape that produced it.

    ``tape`` is set on tensors recorded by an active :class:`ComputationTape`.
    ``param`` is set on the value tensor of a :class:`Parameter`; such leaves are tracked by any active tape.
    """
    __slots__ = ('data', 'tape', 'param')

    def __init__(self, data, precision: Precision = None):
        if precision is None:
            data = np.asarray(data)
            if not np.issubdtype(data.dtype, np.floating) or data.dtype == np.float16:
                data = data.astype(np.float64)
        else:
            data = np.asarray(data, dtype=precision.dtype)
        self.data: np.ndarray = data
        self.tape: Optional[ComputationTape] = None
        self.param: Optional[Parameter] = None

    @classmethod
    def _wrap(cls, data: np.ndarray) -> 'DenseTensor':
        obj = cls.__new__(cls)
        obj.data = np.asarray(data)
        obj.tape = None
        obj.param = None
        return obj

    @property
    def shape(self) -> Tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    @property
    def precision(self) -> Precision:
        return Precision.of(self.data.dtype)

    @property
    def requires_grad(self) -> bool:
        return self.tape is not None or self.param is not None

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        if self.size != 1:
            raise ContractError(f'item() needs a single-element tensor but got shape {self.shape}')
        return float(self.data.reshape(()))

    def is_finite(self) -> bool:
        return bool(np.isfinite(self.data).all())

    def detach(self) -> 'DenseTensor':
        return DenseTensor._wrap(self.data.copy())

    def __repr__(self):
        tracked = ', tracked' if self.requires_grad else ''
        return f'DenseTensor(shape={list(self.shape)}, precision={self.precision.value}{tracked})'

    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(other, self)

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    def __rmul__(self, other):
        return mul(other, self)

    def __truediv__(self, other):
        return div(self, other)

    def __rtruediv__(self, other):
        return div(other, self)

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)


class Parameter:
    """
    Named learnable tensor with a gradient slot of the same shape.
    """

    def __init__(self, value: Union[DenseTensor, np.ndarray, Scalar], name: str, precision: Precision = None):
        if not isinstance(value, DenseTensor):
            value = DenseTensor(value, precision or Precision.WIDE)
        elif precision is not None and value.precision is not precision:
            value = DenseTensor(value.data, precision)
        self.value: DenseTensor = value
        self.value.param = self
        self.name = name
        self.grad: DenseTensor = DenseTensor._wrap(np.zeros_like(self.value.data))

    @property
    def shape(self) -> Tuple[int, ...]:
        return self.value.shape

    @property
    def size(self) -> int:
        return self.value.size

    @property
    def data(self) -> np.ndarray:
        return self.value.data

    def zero_grad(self):
        self.grad.data[...] = 0

    def accumulate(self, grad: np.ndarray):
        self.grad.data += grad.astype(self.grad.data.dtype, copy=False)

    def __repr__(self):
        return f'Parameter(name={self.name!r}, shape={list(self.shape)})'


@dataclass
class TapeNode:
    op: str
    inputs: Tuple[DenseTensor, ...]
    output: DenseTensor
    backward: Callable[[np.ndarray], Sequence[Optional[np.ndarray]]]


class ComputationTape:
    """
    Ordered record of primitive operations for one forward pass.

    Used as a context manager; operations touching tracked tensors are appended while it is active.
    Tapes are kept per thread so runs in separate threads never share one.
    """

    def __init__(self):
        self.nodes: List[TapeNode] = []

    def __enter__(self) -> 'ComputationTape':
        _tape_stack().append(self)
        return self

    def __exit__(self, exc_type, exc_val, exc_tb):
        stack = _tape_stack()
        if stack and stack[-1] is self:
            stack.pop()

    def __len__(self):
        return len(self.nodes)

    def ops(self) -> List[str]:
        return [n.op for n in self.nodes]


_local = threading.local()


def _tape_stack() -> List[ComputationTape]:
    if not hasattr(_local, 'stack'):
        _local.stack = []
    return _local.stack


def active_tape() -> Optional[ComputationTape]:
    stack = _tape_stack()
    return stack[-1] if stack else None


def tensor(data, precision: Precision = Precision.WIDE) -> DenseTensor:
    return DenseTensor(data, precision)


def _lift(value, like: DenseTensor = None) -> DenseTensor:
    if isinstance(value, DenseTensor):
        return value
    if isinstance(value, Parameter):
        return value.value
    dtype = like.data.dtype if like is not None else np.float64
    return DenseTensor._wrap(np.asarray(value, dtype=dtype))


def _emit(op: str, inputs: Tuple[DenseTensor, ...], data: np.ndarray, grad_fn) -> DenseTensor:
    out = DenseTensor._wrap(data)
    tape = active_tape()
    if tape is None:
        return out
    tracked = [t for t in inputs if t.requires_grad]
    if not tracked:
        return out
    for t in tracked:
        if t.tape is not None and t.tape is not tape:
            raise ContractError(f'"{op}" received an input recorded on a different tape')
    out.tape = tape
    tape.nodes.append(TapeNode(op, inputs, out, grad_fn))
    return out


def _unbroadcast(grad: np.ndarray, shape: Tuple[int, ...]) -> np.ndarray:
    if grad.shape == shape:
        return grad
    if extra := grad.ndim - len(shape):
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad.reshape(shape)


def _binary_operands(a, b) -> Tuple[DenseTensor, DenseTensor]:
    like = a if isinstance(a, DenseTensor) else (b if isinstance(b, DenseTensor) else None)
    a, b = _lift(a, like), _lift(b, like)
    try:
        np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise DimensionError(f'cannot broadcast shapes {list(a.shape)} and {list(b.shape)}')
    return a, b


def add(a, b) -> DenseTensor:
    a, b = _binary_operands(a, b)
    return _emit('add', (a, b), a.data + b.data, lambda g: (g, g))


def sub(a, b) -> DenseTensor:
    a, b = _binary_operands(a, b)
    return _emit('sub', (a, b), a.data - b.data, lambda g: (g, -g))


def mul(a, b) -> DenseTensor:
    a, b = _binary_operands(a, b)
    return _emit('mul', (a, b), a.data * b.data, lambda g: (g * b.data, g * a.data))


def div(a, b) -> DenseTensor:
    a, b = _binary_operands(a, b)
    out = a.data / b.data
    return _emit('div', (a, b), out, lambda g: (g / b.data, -g * out / b.data))


def neg(x) -> DenseTensor:
    x = _lift(x)
    return _emit('neg', (x,), -x.data, lambda g: (-g,))


def matmul(a: DenseTensor, b: DenseTensor) -> DenseTensor:
    """
    Matrix product over the last two dimensions, broadcasting leading (batch) dimensions.

    Parameters
    ----------
    a : DenseTensor
        Shape (..., m, n).
    b : DenseTensor
        Shape (..., n, p).

    Returns
    -------
    DenseTensor
        Shape (..., m, p).
    """
    a, b = _lift(a), _lift(b)
    if a.ndim < 2 or b.ndim < 2 or a.shape[-1] != b.shape[-2]:
        raise DimensionError(f'matmul shape mismatch: {list(a.shape)} and {list(b.shape)}')

    def grad_fn(g):
        return g @ np.swapaxes(b.data, -1, -2), np.swapaxes(a.data, -1, -2) @ g

    return _emit('matmul', (a, b), a.data @ b.data, grad_fn)


def reduce_sum(x: DenseTensor) -> DenseTensor:
    x = _lift(x)
    return _emit('reduce_sum', (x,), np.asarray(x.data.sum()), lambda g: (np.broadcast_to(g, x.shape),))


def sum_lastdim(x: DenseTensor) -> DenseTensor:
    x = _lift(x)
    return _emit('sum_lastdim', (x,), x.data.sum(axis=-1, keepdims=True),
                 lambda g: (np.broadcast_to(g, x.shape),))


def reduce_norm_lastdim(x: DenseTensor) -> DenseTensor:
    """
    Euclidean norm along the last dimension, keeping it with size 1.

    The gradient at a zero row is defined as zero.
    """
    x = _lift(x)
    if x.ndim < 1 or x.shape[-1] < 1:
        raise DimensionError(f'reduce_norm_lastdim needs a non-empty last dimension but got {list(x.shape)}')
    norm = np.sqrt((x.data * x.data).sum(axis=-1, keepdims=True))

    def grad_fn(g):
        unit = np.divide(x.data, norm, out=np.zeros_like(x.data), where=norm > 0)
        return g * unit,

    return _emit('reduce_norm_lastdim', (x,), norm, grad_fn)


def _gelu_forward(x: np.ndarray) -> np.ndarray:
    return 0.5 * x * (1.0 + np.tanh(_GELU_K * (x + 0.044715 * x ** 3)))


def _gelu_derivative(x: np.ndarray) -> np.ndarray:
    t = np.tanh(_GELU_K * (x + 0.044715 * x ** 3))
    return 0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * _GELU_K * (1.0 + 3 * 0.044715 * x * x)


_GELU_K = math.sqrt(2.0 / math.pi)


def _sqrt_forward(x: np.ndarray, _c) -> np.ndarray:
    if (x < 0).any():
        raise DomainError(f'sqrt of negative value(s): min={x.min()}')
    return np.sqrt(x)


def _log_forward(x: np.ndarray, _c) -> np.ndarray:
    if (x < 0).any():
        raise DomainError(f'log of negative value(s): min={x.min()}')
    return np.log(x)


# name -> (needs c, forward(x, c), derivative(x, y, c))
ELEMENTWISE_FNS = {
    'sin': (False, lambda x, c: np.sin(x), lambda x, y, c: np.cos(x)),
    'cos': (False, lambda x, c: np.cos(x), lambda x, y, c: -np.sin(x)),
    'sqrt': (False, _sqrt_forward, lambda x, y, c: 0.5 / y),
    'clamp_max': (True, lambda x, c: np.minimum(x, c), lambda x, y, c: (x <= c).astype(x.dtype)),
    'clamp_min': (True, lambda x, c: np.maximum(x, c), lambda x, y, c: (x >= c).astype(x.dtype)),
    'scale': (True, lambda x, c: x * c, lambda x, y, c: np.full_like(x, c)),
    'add_scalar': (True, lambda x, c: x + c, lambda x, y, c: np.ones_like(x)),
    'exp': (False, lambda x, c: np.exp(x), lambda x, y, c: y),
    'log': (False, _log_forward, lambda x, y, c: 1.0 / x),
    'tanh': (False, lambda x, c: np.tanh(x), lambda x, y, c: 1.0 - y * y),
    'square': (False, lambda x, c: x * x, lambda x, y, c: 2.0 * x),
    'gelu': (False, lambda x, c: _gelu_forward(x), lambda x, y, c: _gelu_derivative(x)),
}


def elementwise(x: DenseTensor, fn: str, c: Scalar = None) -> DenseTensor:
    """
    Apply a named scalar function per element.

    Parameters
    ----------
    x : DenseTensor
        Input.
    fn : str
        One of ``ELEMENTWISE_FNS``: 'sin', 'cos', 'sqrt', 'clamp_max', 'clamp_min', 'scale', 'add_scalar',
        'exp', 'log', 'tanh', 'square', 'gelu'.
    c : float, optional
        Parameter for 'clamp_max', 'clamp_min', 'scale', 'add_scalar'.

    Notes
    -----
    Clamp gradients pass through at the exact boundary and are zero strictly inside the clamped region.
    """
    if fn not in ELEMENTWISE_FNS:
        raise ContractError(f'unknown elementwise function "{fn}"; expected one of {sorted(ELEMENTWISE_FNS)}')
    needs_c, forward, derivative = ELEMENTWISE_FNS[fn]
    if needs_c and (c is None or not math.isfinite(c)):
        raise ContractError(f'"{fn}" needs a finite parameter but got {c}')
    x = _lift(x)
    with np.errstate(divide='ignore', invalid='ignore'):
        y = np.asarray(forward(x.data, c), dtype=x.data.dtype)

    def grad_fn(g):
        with np.errstate(divide='ignore', invalid='ignore'):
            return g * derivative(x.data, y, c),

    return _emit(fn, (x,), y, grad_fn)


def gelu(x: DenseTensor) -> DenseTensor:
    # tanh approximation
    return elementwise(x, 'gelu')


def softmax_lastdim(x: DenseTensor) -> DenseTensor:
    x = _lift(x)
    if x.ndim < 1 or x.shape[-1] < 1:
        raise DimensionError(f'softmax_lastdim needs a non-empty last dimension but got {list(x.shape)}')
    shifted = x.data - x.data.max(axis=-1, keepdims=True)
    e = np.exp(shifted)
    s = e / e.sum(axis=-1, keepdims=True)

    def grad_fn(g):
        return s * (g - (g * s).sum(axis=-1, keepdims=True)),

    return _emit('softmax_lastdim', (x,), s, grad_fn)


def cross_entropy(logits: DenseTensor, targets: np.ndarray) -> DenseTensor:
    """
    Mean negative log-likelihood of ``targets`` under softmax(``logits``) over all leading positions.

    Parameters
    ----------
    logits : DenseTensor
        Shape (..., vocab).
    targets : np.ndarray
        Integer class indices of shape ``logits.shape[:-1]``.

    Returns
    -------
    DenseTensor
        Scalar loss.
    """
    logits = _lift(logits)
    targets = np.asarray(targets)
    if targets.shape != logits.shape[:-1]:
        raise DimensionError(f'targets shape {list(targets.shape)} does not match logits {list(logits.shape)}')
    vocab = logits.shape[-1]
    if targets.size and (targets.min() < 0 or targets.max() >= vocab):
        raise TokenIndexError(f'target index out of range [0, {vocab}): '
                              f'min={targets.min()}, max={targets.max()}')
    flat = logits.data.reshape(-1, vocab)
    flat_targets = targets.reshape(-1)
    count = flat.shape[0]
    shifted = flat - flat.max(axis=-1, keepdims=True)
    log_z = np.log(np.exp(shifted).sum(axis=-1))
    rows = np.arange(count)
    loss = np.asarray((log_z - shifted[rows, flat_targets]).mean(), dtype=flat.dtype)

    def grad_fn(g):
        probs = np.exp(shifted - log_z[:, None])
        probs[rows, flat_targets] -= 1.0
        return (g * probs / count).reshape(logits.shape),

    return _emit('cross_entropy', (logits,), loss, grad_fn)


def reshape(x: DenseTensor, shape: Sequence[int]) -> DenseTensor:
    x = _lift(x)
    try:
        out = x.data.reshape(shape)
    except ValueError:
        raise DimensionError(f'cannot reshape {list(x.shape)} into {list(shape)}')
    return _emit('reshape', (x,), out, lambda g: (g.reshape(x.shape),))


def transpose(x: DenseTensor, axes: Sequence[int]) -> DenseTensor:
    x = _lift(x)
    inverse = np.argsort(axes)
    return _emit('transpose', (x,), np.transpose(x.data, axes), lambda g: (np.transpose(g, inverse),))


def embedding(weight: DenseTensor, indices: np.ndarray) -> DenseTensor:
    weight = _lift(weight)
    indices = np.asarray(indices)
    rows = weight.shape[0]
    if indices.size and (indices.min() < 0 or indices.max() >= rows):
        raise TokenIndexError(f'index out of range [0, {rows}): min={indices.min()}, max={indices.max()}')

    def grad_fn(g):
        gw = np.zeros_like(weight.data)
        np.add.at(gw, indices, g)
        return gw,

    return _emit('embedding', (weight,), weight.data[indices], grad_fn)


def masked_fill(x: DenseTensor, mask: np.ndarray, value: float) -> DenseTensor:
    x = _lift(x)
    mask = np.asarray(mask, dtype=bool)
    out = np.where(mask, np.asarray(value, dtype=x.data.dtype), x.data)
    return _emit('masked_fill', (x,), out, lambda g: (np.where(mask, 0, g),))


def where(condition: np.ndarray, a, b) -> DenseTensor:
    a, b = _binary_operands(a, b)
    condition = np.asarray(condition, dtype=bool)
    out = np.where(condition, a.data, b.data)
    return _emit('where', (a, b), out, lambda g: (np.where(condition, g, 0), np.where(condition, 0, g)))


def backward(loss: DenseTensor):
    """
    Accumulate d(loss)/d(param) into every :class:`Parameter` reachable from ``loss``.

    Nodes of the tape are visited once each in reverse recording order. Gradients add onto existing ones
    until :func:`zero_grad` clears them.
    """
    if not isinstance(loss, DenseTensor) or loss.ndim != 0:
        shape = list(loss.shape) if isinstance(loss, DenseTensor) else type(loss)
        raise ContractError(f'backward() needs a scalar (0-d) loss but got {shape}')
    if loss.tape is None:
        if loss.param is not None:
            loss.param.accumulate(np.ones_like(loss.data))
        return
    grads = {id(loss): np.ones_like(loss.data)}
    for node in reversed(loss.tape.nodes):
        g = grads.pop(id(node.output), None)
        if g is None:
            continue
        for inp, in_grad in zip(node.inputs, node.backward(g)):
            if in_grad is None or not inp.requires_grad:
                continue
            in_grad = _unbroadcast(np.asarray(in_grad), inp.shape)
            if inp.param is not None:
                inp.param.accumulate(in_grad)
            elif (key := id(inp)) in grads:
                grads[key] = grads[key] + in_grad
            else:
                grads[key] = in_grad


def zero_grad(params: Sequence[Parameter]):
    for p in params:
        p.zero_grad()
