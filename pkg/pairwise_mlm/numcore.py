"""
Dense tensors with reverse-mode automatic differentiation.

Every differentiable operation is a `Function` subclass whose `forward`
works on plain numpy arrays and whose `backward` maps the output gradient
to one gradient per parent. `Function.apply` wires the result into the
graph; `backward` walks that graph in reverse topological order.

Training runs in float32. `float64_mode()` switches newly created tensors
to float64, which is what the finite-difference gradient check needs.
"""

import contextvars
import logging
from contextlib import contextmanager
from typing import (Dict, Iterator, List, Optional, Sequence, Tuple, Union)

import numpy as np

from pairwise_mlm.exceptions import (GraphError, LabelOutOfRangeError,
                                     NonFiniteError, ShapeMismatchError)

logger = logging.getLogger(__name__)

ArrayLike = Union[np.ndarray, float, int, Sequence]

_DEFAULT_DTYPE: contextvars.ContextVar = contextvars.ContextVar("default_dtype", default=np.float32)
_GRAD_ENABLED: contextvars.ContextVar = contextvars.ContextVar("grad_enabled", default=True)

# tanh approximation of GELU
_GELU_C = float(np.sqrt(2.0 / np.pi))
_GELU_K = 0.044715


def get_default_dtype() -> np.dtype:
    return np.dtype(_DEFAULT_DTYPE.get())


@contextmanager
def float64_mode():
    """Tensors created inside the block default to float64."""
    token = _DEFAULT_DTYPE.set(np.float64)
    try:
        yield
    finally:
        _DEFAULT_DTYPE.reset(token)


@contextmanager
def no_grad():
    """Operations inside the block do not record a graph."""
    token = _GRAD_ENABLED.set(False)
    try:
        yield
    finally:
        _GRAD_ENABLED.reset(token)


def grad_enabled() -> bool:
    return _GRAD_ENABLED.get()


class Tensor:
    """
    A dense array plus the bookkeeping needed for backpropagation.

    `data` is a numpy array (row-major, so product(shape) == data.size).
    `grad`, once populated by `backward`, has the same shape as `data` and
    accumulates across backward calls until `zero_grad` is called.
    """

    def __init__(
        self,
        data: ArrayLike,
        requires_grad: bool = False,
        name: Optional[str] = None,
        dtype: Optional[np.dtype] = None,
        _ctx: Optional["Function"] = None,
    ):
        array = np.asarray(data)
        if dtype is not None:
            array = array.astype(dtype, copy=False)
        elif array.dtype.kind != "f":
            array = array.astype(get_default_dtype())
        self.data: np.ndarray = array
        self.requires_grad = requires_grad
        self.grad: Optional[np.ndarray] = None
        self.name = name
        self._ctx = _ctx

    @property
    def shape(self) -> Tuple[int, ...]:
        return self.data.shape

    @property
    def values(self) -> np.ndarray:
        return self.data

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    @property
    def dtype(self) -> np.dtype:
        return self.data.dtype

    @property
    def is_leaf(self) -> bool:
        return self._ctx is None

    def __repr__(self):
        label = f", name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}, dtype={self.dtype}, requires_grad={self.requires_grad}{label})"

    def named(self, name: str) -> "Tensor":
        self.name = name
        return self

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else float("nan")

    def detach(self) -> "Tensor":
        return Tensor(self.data, requires_grad=False, name=self.name)

    def zero_grad(self) -> None:
        self.grad = None

    def backward(self) -> List["Tensor"]:
        return backward(Graph.from_loss(self), self)

    # Operators
    def __add__(self, other):
        return Add.apply(self, other)

    def __radd__(self, other):
        return Add.apply(other, self)

    def __sub__(self, other):
        return Add.apply(self, Neg.apply(other))

    def __rsub__(self, other):
        return Add.apply(other, Neg.apply(self))

    def __neg__(self):
        return Neg.apply(self)

    def __mul__(self, other):
        return Mul.apply(self, other)

    def __rmul__(self, other):
        return Mul.apply(other, self)

    def __truediv__(self, other):
        if isinstance(other, Tensor):
            raise ShapeMismatchError("division is only supported by constants")
        return Mul.apply(self, 1.0 / np.asarray(other, dtype=np.float64))

    def __matmul__(self, other):
        return MatMul.apply(self, other)

    def sum(self, axis=None, keepdims: bool = False) -> "Tensor":
        return Sum.apply(self, axis=axis, keepdims=keepdims)

    def mean(self, axis=None, keepdims: bool = False) -> "Tensor":
        if axis is None:
            count = self.size
        else:
            axes = (axis,) if isinstance(axis, int) else tuple(axis)
            count = int(np.prod([self.shape[a] for a in axes]))
        return self.sum(axis=axis, keepdims=keepdims) * (1.0 / max(count, 1))

    def reshape(self, *shape) -> "Tensor":
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return Reshape.apply(self, shape=shape)

    def transpose(self, *axes) -> "Tensor":
        if len(axes) == 1 and isinstance(axes[0], (tuple, list)):
            axes = tuple(axes[0])
        return Transpose.apply(self, axes=axes or None)

    def swapaxes(self, a: int, b: int) -> "Tensor":
        axes = list(range(self.ndim))
        axes[a], axes[b] = axes[b], axes[a]
        return self.transpose(tuple(axes))


def parameter(data: np.ndarray, name: Optional[str] = None) -> Tensor:
    """A leaf tensor that receives gradients."""
    return Tensor(data, requires_grad=True, name=name)


def _as_tensor(value, dtype: np.dtype) -> Tensor:
    if isinstance(value, Tensor):
        return value
    return Tensor(value, dtype=dtype)


class Function:
    """
    Base class of all primitives.

    Subclasses implement `forward(*arrays, **kwargs) -> array` and
    `backward(grad) -> tuple` with one entry per parent (None for parents
    that take no gradient, e.g. integer indices).
    """

    def __init__(self):
        self.parents: Tuple[Tensor, ...] = ()

    @classmethod
    def apply(cls, *args, **kwargs) -> Tensor:
        ctx = cls()
        ref = next((a.dtype for a in args if isinstance(a, Tensor)), get_default_dtype())
        parents = tuple(_as_tensor(a, ref) for a in args)
        output = ctx.forward(*[p.data for p in parents], **kwargs)
        requires_grad = grad_enabled() and any(p.requires_grad for p in parents)
        if requires_grad:
            ctx.parents = parents
        return Tensor(
            output,
            requires_grad=requires_grad,
            dtype=output.dtype,
            _ctx=ctx if requires_grad else None,
        )

    def forward(self, *arrays, **kwargs) -> np.ndarray:
        raise NotImplementedError

    def backward(self, grad: np.ndarray) -> Tuple[Optional[np.ndarray], ...]:
        raise NotImplementedError


class Graph:
    """
    Topologically ordered record of the primitive applications reachable
    from a loss. Inputs come before the tensors computed from them.
    """

    def __init__(self, nodes: List[Tensor]):
        self.nodes = nodes

    def __len__(self):
        return len(self.nodes)

    def __iter__(self) -> Iterator[Tensor]:
        return iter(self.nodes)

    @classmethod
    def from_loss(cls, loss: Tensor) -> "Graph":
        order: List[Tensor] = []
        visited = set()
        stack: List[Tuple[Tensor, bool]] = [(loss, False)]

        while stack:
            node, expanded = stack.pop()
            if expanded:
                order.append(node)
                continue
            if id(node) in visited:
                continue
            visited.add(id(node))
            stack.append((node, True))
            if node._ctx is not None:
                for parent in node._ctx.parents:
                    if id(parent) not in visited:
                        stack.append((parent, False))

        return cls(order)

    def leaves(self) -> List[Tensor]:
        return [node for node in self.nodes if node.is_leaf and node.requires_grad]


def backward(graph: Graph, loss: Tensor) -> List[Tensor]:
    """
    Accumulates d(loss)/d(leaf) into `.grad` of every leaf that requires it.

    Returns the leaves that received a gradient. Calling it twice without
    zeroing adds the gradients up.

    Raises:
        GraphError: if `loss` is not a scalar.
    """
    if loss.size != 1:
        raise GraphError(f"backward needs a scalar loss, got shape {loss.shape}")
    if not loss.requires_grad:
        return []

    grads: Dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
    updated: List[Tensor] = []

    for node in reversed(graph.nodes):
        grad = grads.pop(id(node), None)
        if grad is None:
            continue

        if node._ctx is None:
            if node.requires_grad:
                node.grad = grad.copy() if node.grad is None else node.grad + grad
                updated.append(node)
            continue

        parent_grads = node._ctx.backward(grad)
        for parent, parent_grad in zip(node._ctx.parents, parent_grads):
            if parent_grad is None or not parent.requires_grad:
                continue
            key = id(parent)
            if key in grads:
                grads[key] = grads[key] + parent_grad
            else:
                grads[key] = parent_grad

    return updated


# --- primitives ---


def unbroadcast(grad: np.ndarray, shape: Tuple[int, ...]) -> np.ndarray:
    if grad.shape == tuple(shape):
        return grad

    ndims_added = grad.ndim - len(shape)
    if ndims_added > 0:
        grad = grad.sum(axis=tuple(range(ndims_added)))

    for i, dim in enumerate(shape):
        if dim == 1 and grad.shape[i] != 1:
            grad = grad.sum(axis=i, keepdims=True)

    return grad.reshape(shape)


class Add(Function):
    def forward(self, x, y):
        self.shapes = (x.shape, y.shape)
        return x + y

    def backward(self, grad):
        shape_x, shape_y = self.shapes
        return unbroadcast(grad, shape_x), unbroadcast(grad, shape_y)


class Neg(Function):
    def forward(self, x):
        return -x

    def backward(self, grad):
        return (-grad,)


class Mul(Function):
    def forward(self, x, y):
        self.saved = (x, y)
        return x * y

    def backward(self, grad):
        x, y = self.saved
        return unbroadcast(grad * y, x.shape), unbroadcast(grad * x, y.shape)


class MatMul(Function):
    def forward(self, x, y):
        if x.ndim < 2 or y.ndim < 2:
            raise ShapeMismatchError(f"matmul needs operands of rank >= 2, got {x.shape} and {y.shape}")
        if x.shape[-1] != y.shape[-2]:
            raise ShapeMismatchError(f"matmul shapes {x.shape} and {y.shape} do not align")
        self.saved = (x, y)
        return x @ y

    def backward(self, grad):
        x, y = self.saved
        grad_x = grad @ np.swapaxes(y, -1, -2)
        grad_y = np.swapaxes(x, -1, -2) @ grad
        return unbroadcast(grad_x, x.shape), unbroadcast(grad_y, y.shape)


class Sum(Function):
    def forward(self, x, axis=None, keepdims=False):
        self.input_shape = x.shape
        self.axis = axis
        self.keepdims = keepdims
        return np.asarray(np.sum(x, axis=axis, keepdims=keepdims))

    def backward(self, grad):
        if self.axis is not None and not self.keepdims:
            grad = np.expand_dims(grad, axis=self.axis)
        return (np.broadcast_to(grad, self.input_shape).copy(),)


class Reshape(Function):
    def forward(self, x, shape):
        self.input_shape = x.shape
        return np.reshape(x, shape)

    def backward(self, grad):
        return (np.reshape(grad, self.input_shape),)


class Transpose(Function):
    def forward(self, x, axes=None):
        self.axes = axes
        return np.transpose(x, axes)

    def backward(self, grad):
        if self.axes is None:
            return (np.transpose(grad),)
        return (np.transpose(grad, np.argsort(self.axes)),)


class Gather(Function):
    """Row lookup `table[indices]`, the embedding primitive."""

    def forward(self, table, indices):
        self.table_shape = table.shape
        self.indices = indices.astype(np.int64)
        return table[self.indices]

    def backward(self, grad):
        table_grad = np.zeros(self.table_shape, dtype=grad.dtype)
        np.add.at(table_grad, self.indices, grad)
        return table_grad, None


class Concat(Function):
    def forward(self, *arrays, axis=-1):
        self.axis = axis
        self.sizes = [a.shape[axis] for a in arrays]
        return np.concatenate(arrays, axis=axis)

    def backward(self, grad):
        splits = np.cumsum(self.sizes)[:-1]
        return tuple(np.split(grad, splits, axis=self.axis))


class Softmax(Function):
    def forward(self, x, axis=-1):
        self.axis = axis
        shifted = x - np.max(x, axis=axis, keepdims=True)
        e = np.exp(shifted)
        self.out = e / np.sum(e, axis=axis, keepdims=True)
        return self.out

    def backward(self, grad):
        y = self.out
        return (y * (grad - np.sum(grad * y, axis=self.axis, keepdims=True)),)


class LayerNorm(Function):
    def forward(self, x, gain, bias, eps=1e-5):
        mean = x.mean(axis=-1, keepdims=True)
        var = x.var(axis=-1, keepdims=True)
        self.inv_std = 1.0 / np.sqrt(var + eps)
        self.xhat = (x - mean) * self.inv_std
        self.gain = gain
        return self.xhat * gain + bias

    def backward(self, grad):
        n = self.xhat.shape[-1]
        reduce_axes = tuple(range(grad.ndim - 1))
        dgain = np.sum(grad * self.xhat, axis=reduce_axes)
        dbias = np.sum(grad, axis=reduce_axes)
        dxhat = grad * self.gain
        dx = (self.inv_std / n) * (
            n * dxhat
            - dxhat.sum(axis=-1, keepdims=True)
            - self.xhat * (dxhat * self.xhat).sum(axis=-1, keepdims=True)
        )
        return dx, dgain, dbias


class Gelu(Function):
    def forward(self, x):
        self.x = x
        self.t = np.tanh(_GELU_C * (x + _GELU_K * x ** 3))
        return 0.5 * x * (1.0 + self.t)

    def backward(self, grad):
        x, t = self.x, self.t
        dt = (1.0 - t ** 2) * _GELU_C * (1.0 + 3.0 * _GELU_K * x ** 2)
        return (grad * (0.5 * (1.0 + t) + 0.5 * x * dt),)


class Dropout(Function):
    def forward(self, x, rate=0.0, rng=None):
        keep = rng.random(x.shape) >= rate
        self.mask = keep.astype(x.dtype) / (1.0 - rate)
        return x * self.mask

    def backward(self, grad):
        return (grad * self.mask,)


class CrossEntropy(Function):
    """Per-row negative log-likelihood of integer labels under softmax(logits)."""

    def forward(self, logits, labels):
        self.labels = labels.astype(np.int64)
        shifted = logits - logits.max(axis=-1, keepdims=True)
        log_z = np.log(np.exp(shifted).sum(axis=-1, keepdims=True))
        log_probs = shifted - log_z
        self.probs = np.exp(log_probs)
        rows = np.arange(logits.shape[0])
        return -log_probs[rows, self.labels]

    def backward(self, grad):
        d = self.probs.copy()
        d[np.arange(d.shape[0]), self.labels] -= 1.0
        return d * grad[:, None], None


# --- functional API ---


def _check_finite(x: Tensor, op: str) -> None:
    if not np.all(np.isfinite(x.data)):
        raise NonFiniteError(x.name or "<unnamed>", op)


def softmax(logits: Tensor, axis: int = -1) -> Tensor:
    """
    Max-shifted exp-normalize along `axis`.

    Raises:
        NonFiniteError: if `logits` holds NaN or inf, naming the tensor.
    """
    logits = _as_tensor(logits, get_default_dtype())
    if not -logits.ndim <= axis < max(logits.ndim, 1):
        raise ShapeMismatchError(f"axis {axis} invalid for shape {logits.shape}")
    _check_finite(logits, "softmax")
    return Softmax.apply(logits, axis=axis)


def layer_norm(x: Tensor, gain: Tensor, bias: Tensor, eps: float = 1e-5) -> Tensor:
    if x.shape[-1] < 2:
        raise ShapeMismatchError(f"layer_norm needs a last axis of at least 2, got {x.shape}")
    return LayerNorm.apply(x, gain, bias, eps=eps)


def gelu(x: Tensor) -> Tensor:
    return Gelu.apply(x)


def dropout(x: Tensor, rate: float, rng: Optional[np.random.Generator], train: bool) -> Tensor:
    """Inverted dropout; the identity when not training or rate is 0."""
    if not train or rate <= 0.0:
        return x
    if rng is None:
        raise ValueError("dropout in training mode needs a random generator")
    return Dropout.apply(x, rate=rate, rng=rng)


def gather(table: Tensor, indices: np.ndarray) -> Tensor:
    return Gather.apply(table, Tensor(np.asarray(indices), dtype=np.int64))


def concat(tensors: Sequence[Tensor], axis: int = -1) -> Tensor:
    return Concat.apply(*tensors, axis=axis)


def cross_entropy(logits: Tensor, labels: np.ndarray) -> Tensor:
    """
    Per-row losses for a (N, V) logit matrix and N integer labels.

    Raises:
        LabelOutOfRangeError: if a label is outside [0, V).
        NonFiniteError: if the logits are not finite.
    """
    labels = np.asarray(labels, dtype=np.int64).reshape(-1)
    if logits.ndim != 2 or logits.shape[0] != labels.shape[0]:
        raise ShapeMismatchError(
            f"cross_entropy needs (N, V) logits and N labels, got {logits.shape} and {labels.shape}"
        )
    vocab = logits.shape[1]
    if labels.size and (labels.min() < 0 or labels.max() >= vocab):
        raise LabelOutOfRangeError(f"labels must lie in [0, {vocab}), got {labels.min()}..{labels.max()}")
    _check_finite(logits, "cross_entropy")
    return CrossEntropy.apply(logits, Tensor(labels, dtype=np.int64))


def cross_entropy_from_logits(logits: Tensor, label_index: int) -> Tensor:
    """-log softmax(logits)[label_index] for a single logit vector."""
    logits = _as_tensor(logits, get_default_dtype())
    row = logits.reshape(1, logits.size)
    return cross_entropy(row, np.array([label_index])).reshape(())


def log_softmax_np(logits: np.ndarray, axis: int = -1) -> np.ndarray:
    shifted = logits - logits.max(axis=axis, keepdims=True)
    return shifted - np.log(np.exp(shifted).sum(axis=axis, keepdims=True))


def softmax_np(logits: np.ndarray, axis: int = -1) -> np.ndarray:
    return np.exp(log_softmax_np(logits, axis=axis))


class Module:
    """
    Container of named parameters.

    Parameters are discovered from instance attributes in definition order:
    Tensors that require grad, nested Modules and lists of Modules.
    """

    def named_parameters(self, prefix: str = "") -> Iterator[Tuple[str, Tensor]]:
        for name, value in vars(self).items():
            full_name = f"{prefix}{name}"
            if isinstance(value, Tensor):
                if value.requires_grad:
                    yield full_name, value
            elif isinstance(value, Module):
                yield from value.named_parameters(f"{full_name}.")
            elif isinstance(value, (list, tuple)):
                for i, item in enumerate(value):
                    if isinstance(item, Module):
                        yield from item.named_parameters(f"{full_name}.{i}.")

    def parameters(self) -> List[Tensor]:
        return [p for _, p in self.named_parameters()]

    def zero_grad(self) -> None:
        for p in self.parameters():
            p.zero_grad()

    def state_dict(self) -> Dict[str, np.ndarray]:
        return {name: p.data for name, p in self.named_parameters()}

    def astype(self, dtype) -> "Module":
        """Casts every parameter in place."""
        for p in self.parameters():
            p.data = p.data.astype(dtype)
        return self

    def num_parameters(self) -> int:
        return int(sum(p.size for p in self.parameters()))
