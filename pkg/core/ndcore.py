"""
Dense float64 tensors with reverse-mode automatic differentiation.

Every differentiable operation is a `Function` subclass with a numpy forward
and a numpy backward. `Function.apply` records the operation on the output
tensor whenever one of the inputs requires gradients; `backward(loss)` walks
the recorded `Graph` in reverse topological order.

Broadcasting follows numpy: shapes are aligned on trailing dimensions and
only size-1 dimensions expand. Gradients are summed back over expanded
dimensions so that every gradient has the shape of its tensor.
"""

import logging
import threading
from contextlib import contextmanager
from dataclasses import dataclass
from typing import Any, Dict, Iterator, List, Optional, Sequence, Tuple, Type, Union

import numpy as np
from scipy import special

from core.exceptions import GradientError, ShapeError

logger = logging.getLogger(__name__)

LEAKY_SLOPE = 0.01

ArrayLike = Union[np.ndarray, float, int, Sequence[float], Sequence[Sequence[float]]]

# Per-thread switch, flipped by `no_grad()`. Threads start with recording on.
_STATE = threading.local()


@contextmanager
def no_grad() -> Iterator[None]:
    """Evaluate without recording operations (evaluation, sampling)."""
    previous = grad_enabled()
    _STATE.enabled = False
    try:
        yield
    finally:
        _STATE.enabled = previous


def grad_enabled() -> bool:
    return getattr(_STATE, "enabled", True)


# =============================================================================
# FUNCTION BASE
# =============================================================================

class Function:
    """
    Base class for differentiable operations.

    `forward` receives the numpy buffers of the inputs, `backward` receives the
    gradient of the loss w.r.t. the output and returns one gradient (or None)
    per input, already reduced to the input's shape.
    """

    name = "op"

    def __init__(self, *tensors: "Tensor"):
        self.tensors = tensors

    def forward(self, *args: np.ndarray, **kwargs: Any) -> np.ndarray:
        raise NotImplementedError(f"forward not implemented for {self.name}")

    def backward(self, grad: np.ndarray) -> Tuple[Optional[np.ndarray], ...]:
        raise NotImplementedError(f"backward not implemented for {self.name}")

    @classmethod
    def apply(cls, *inputs: Union["Tensor", ArrayLike], **kwargs: Any) -> "Tensor":
        tensors = tuple(as_tensor(t) for t in inputs)
        func = cls(*tensors)
        out_data = func.forward(*(t.data for t in tensors), **kwargs)

        requires_grad = grad_enabled() and any(t.requires_grad for t in tensors)
        return Tensor(out_data, requires_grad=requires_grad, creator=func if requires_grad else None)

    @staticmethod
    def unbroadcast(grad: np.ndarray, shape: Tuple[int, ...]) -> np.ndarray:
        """Sum `grad` over the dimensions that broadcasting expanded."""
        if grad.shape == shape:
            return grad
        while grad.ndim > len(shape):
            grad = grad.sum(axis=0)
        for dim, size in enumerate(shape):
            if size == 1 and grad.shape[dim] != 1:
                grad = grad.sum(axis=dim, keepdims=True)
        return grad


def _check_broadcast(op: str, a: np.ndarray, b: np.ndarray) -> None:
    try:
        np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise ShapeError(op, a.shape, b.shape,
                         suggestion="Align trailing dimensions; only size-1 dimensions expand")


# =============================================================================
# ELEMENTWISE BINARY
# =============================================================================

class Add(Function):
    name = "add"

    def forward(self, a, b):
        _check_broadcast(self.name, a, b)
        self.shapes = (a.shape, b.shape)
        return a + b

    def backward(self, grad):
        return self.unbroadcast(grad, self.shapes[0]), self.unbroadcast(grad, self.shapes[1])


class Sub(Function):
    name = "sub"

    def forward(self, a, b):
        _check_broadcast(self.name, a, b)
        self.shapes = (a.shape, b.shape)
        return a - b

    def backward(self, grad):
        return self.unbroadcast(grad, self.shapes[0]), self.unbroadcast(-grad, self.shapes[1])


class Mul(Function):
    name = "mul"

    def forward(self, a, b):
        _check_broadcast(self.name, a, b)
        self.a, self.b = a, b
        return a * b

    def backward(self, grad):
        return (self.unbroadcast(grad * self.b, self.a.shape),
                self.unbroadcast(grad * self.a, self.b.shape))


class Div(Function):
    name = "div"

    def forward(self, a, b):
        _check_broadcast(self.name, a, b)
        self.a, self.b = a, b
        return a / b

    def backward(self, grad):
        return (self.unbroadcast(grad / self.b, self.a.shape),
                self.unbroadcast(-grad * self.a / (self.b * self.b), self.b.shape))


class MatMul(Function):
    name = "matmul"

    def forward(self, a, b):
        if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[0]:
            raise ShapeError(self.name, a.shape, b.shape,
                             suggestion="matmul expects (n, k) @ (k, m)")
        self.a, self.b = a, b
        return a @ b

    def backward(self, grad):
        return grad @ self.b.T, self.a.T @ grad


# =============================================================================
# ELEMENTWISE UNARY
# =============================================================================

class Neg(Function):
    name = "neg"

    def forward(self, a):
        return -a

    def backward(self, grad):
        return (-grad,)


class Exp(Function):
    name = "exp"

    def forward(self, a):
        self.out = np.exp(a)
        return self.out

    def backward(self, grad):
        return (grad * self.out,)


class Log(Function):
    name = "log"

    def forward(self, a):
        self.a = a
        with np.errstate(divide="ignore", invalid="ignore"):
            return np.log(a)

    def backward(self, grad):
        return (grad / self.a,)


class Log1p(Function):
    name = "log1p"

    def forward(self, a):
        self.a = a
        with np.errstate(divide="ignore", invalid="ignore"):
            return np.log1p(a)

    def backward(self, grad):
        return (grad / (1.0 + self.a),)


class Pow(Function):
    name = "pow"

    def forward(self, a, exponent: float = 2.0):
        self.a, self.exponent = a, exponent
        return np.power(a, exponent)

    def backward(self, grad):
        return (grad * self.exponent * np.power(self.a, self.exponent - 1.0),)


class Sigmoid(Function):
    name = "sigmoid"

    def forward(self, a):
        self.out = special.expit(a)
        return self.out

    def backward(self, grad):
        return (grad * self.out * (1.0 - self.out),)


class Softplus(Function):
    name = "softplus"

    def forward(self, a):
        self.a = a
        return np.logaddexp(0.0, a)

    def backward(self, grad):
        return (grad * special.expit(self.a),)


class LeakyReLU(Function):
    name = "leaky_relu"

    def forward(self, a, slope: float = LEAKY_SLOPE):
        self.slope = np.where(a > 0, 1.0, slope)
        return a * self.slope

    def backward(self, grad):
        return (grad * self.slope,)


class Lgamma(Function):
    name = "lgamma"

    def forward(self, a):
        self.a = a
        return special.gammaln(a)

    def backward(self, grad):
        return (grad * special.digamma(self.a),)


class Clip(Function):
    name = "clip"

    def forward(self, a, low: float = -np.inf, high: float = np.inf):
        self.inside = (a >= low) & (a <= high)
        return np.clip(a, low, high)

    def backward(self, grad):
        return (grad * self.inside,)


class StraightThrough(Function):
    """Forward emits a fixed hard value, backward passes the gradient to the relaxed input."""

    name = "straight_through"

    def forward(self, relaxed, hard: Optional[np.ndarray] = None):
        hard = np.asarray(hard, dtype=np.float64)
        if hard.shape != relaxed.shape:
            raise ShapeError(self.name, relaxed.shape, hard.shape)
        return hard.copy()

    def backward(self, grad):
        return (grad,)


# =============================================================================
# NORMALIZATIONS
# =============================================================================

class Softmax(Function):
    name = "softmax"

    def forward(self, a, axis: int = -1):
        self.axis = axis
        shifted = a - a.max(axis=axis, keepdims=True)
        e = np.exp(shifted)
        self.out = e / e.sum(axis=axis, keepdims=True)
        return self.out

    def backward(self, grad):
        s = self.out
        return (s * (grad - (grad * s).sum(axis=self.axis, keepdims=True)),)


class LogSoftmax(Function):
    name = "log_softmax"

    def forward(self, a, axis: int = -1):
        self.axis = axis
        out = a - special.logsumexp(a, axis=axis, keepdims=True)
        self.softmax = np.exp(out)
        return out

    def backward(self, grad):
        return (grad - self.softmax * grad.sum(axis=self.axis, keepdims=True),)


# =============================================================================
# REDUCTIONS AND STRUCTURE
# =============================================================================

class Sum(Function):
    name = "sum"

    def forward(self, a, axis: Optional[Union[int, Tuple[int, ...]]] = None, keepdims: bool = False):
        self.shape, self.axis, self.keepdims = a.shape, axis, keepdims
        return np.asarray(a.sum(axis=axis, keepdims=keepdims))

    def backward(self, grad):
        if self.axis is not None and not self.keepdims:
            grad = np.expand_dims(grad, self.axis)
        return (np.broadcast_to(grad, self.shape).copy(),)


class Mean(Function):
    name = "mean"

    def forward(self, a, axis: Optional[Union[int, Tuple[int, ...]]] = None, keepdims: bool = False):
        self.shape, self.axis, self.keepdims = a.shape, axis, keepdims
        out = np.asarray(a.mean(axis=axis, keepdims=keepdims))
        self.count = a.size // max(out.size, 1)
        return out

    def backward(self, grad):
        if self.axis is not None and not self.keepdims:
            grad = np.expand_dims(grad, self.axis)
        return (np.broadcast_to(grad, self.shape) / self.count,)


class Concat(Function):
    name = "concat"

    def forward(self, *arrays, axis: int = -1):
        base = arrays[0]
        for other in arrays[1:]:
            if other.ndim != base.ndim or any(
                    s1 != s2 for d, (s1, s2) in enumerate(zip(base.shape, other.shape))
                    if d != axis % base.ndim):
                raise ShapeError(self.name, base.shape, other.shape,
                                 suggestion=f"all dimensions except axis {axis} must match")
        self.axis = axis
        self.sizes = [a.shape[axis] for a in arrays]
        return np.concatenate(arrays, axis=axis)

    def backward(self, grad):
        splits = np.cumsum(self.sizes)[:-1]
        return tuple(np.split(grad, splits, axis=self.axis))


class GetItem(Function):
    name = "getitem"

    def forward(self, a, index=None):
        self.shape, self.index = a.shape, index
        return np.array(a[index], dtype=np.float64)

    def backward(self, grad):
        out = np.zeros(self.shape)
        np.add.at(out, self.index, grad)
        return (out,)


class Reshape(Function):
    name = "reshape"

    def forward(self, a, shape: Tuple[int, ...] = ()):
        self.shape = a.shape
        try:
            return a.reshape(shape)
        except ValueError:
            raise ShapeError(self.name, a.shape, shape)

    def backward(self, grad):
        return (grad.reshape(self.shape),)


class Transpose(Function):
    name = "transpose"

    def forward(self, a):
        return a.T

    def backward(self, grad):
        return (grad.T,)


OPS: Dict[str, Type[Function]] = {
    cls.name: cls for cls in (
        Add, Sub, Mul, Div, MatMul, Neg, Exp, Log, Log1p, Pow, Sigmoid, Softplus,
        LeakyReLU, Lgamma, Clip, StraightThrough, Softmax, LogSoftmax, Sum, Mean,
        Concat, GetItem, Reshape, Transpose,
    )
}


def forward_op(kind: str, *inputs: Union["Tensor", ArrayLike], **kwargs: Any) -> "Tensor":
    """Apply a registered operation by name."""
    try:
        func = OPS[kind]
    except KeyError:
        raise ValueError(f"Unknown op '{kind}'. Known ops: {', '.join(sorted(OPS))}")
    return func.apply(*inputs, **kwargs)


# =============================================================================
# TENSOR
# =============================================================================

class Tensor:
    """Dense float64 buffer plus the operation that produced it."""

    __slots__ = ("data", "requires_grad", "grad", "creator", "name")
    # ndarray operators defer to the reflected Tensor methods
    __array_ufunc__ = None

    def __init__(self, data: ArrayLike, requires_grad: bool = False,
                 creator: Optional[Function] = None, name: Optional[str] = None):
        self.data = np.asarray(data, dtype=np.float64)
        self.requires_grad = requires_grad
        self.grad: Optional[np.ndarray] = None
        self.creator = creator
        self.name = name

    def __repr__(self) -> str:
        label = f", name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad}{label})"

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
    def T(self) -> "Tensor":
        return Transpose.apply(self)

    def item(self) -> float:
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else float("nan")

    def numpy(self) -> np.ndarray:
        return self.data

    def detach(self) -> "Tensor":
        return Tensor(self.data, requires_grad=False)

    # arithmetic -----------------------------------------------------------

    def __add__(self, other):
        return Add.apply(self, other)

    def __radd__(self, other):
        return Add.apply(other, self)

    def __sub__(self, other):
        return Sub.apply(self, other)

    def __rsub__(self, other):
        return Sub.apply(other, self)

    def __mul__(self, other):
        return Mul.apply(self, other)

    def __rmul__(self, other):
        return Mul.apply(other, self)

    def __truediv__(self, other):
        return Div.apply(self, other)

    def __rtruediv__(self, other):
        return Div.apply(other, self)

    def __neg__(self):
        return Neg.apply(self)

    def __matmul__(self, other):
        return MatMul.apply(self, other)

    def __rmatmul__(self, other):
        return MatMul.apply(other, self)

    def __pow__(self, exponent: float):
        return Pow.apply(self, exponent=float(exponent))

    def __getitem__(self, index):
        return GetItem.apply(self, index=index)

    # named ops -------------------------------------------------------------

    def sum(self, axis=None, keepdims: bool = False) -> "Tensor":
        return Sum.apply(self, axis=axis, keepdims=keepdims)

    def mean(self, axis=None, keepdims: bool = False) -> "Tensor":
        return Mean.apply(self, axis=axis, keepdims=keepdims)

    def exp(self) -> "Tensor":
        return Exp.apply(self)

    def log(self) -> "Tensor":
        return Log.apply(self)

    def log1p(self) -> "Tensor":
        return Log1p.apply(self)

    def sigmoid(self) -> "Tensor":
        return Sigmoid.apply(self)

    def softplus(self) -> "Tensor":
        return Softplus.apply(self)

    def reshape(self, *shape: int) -> "Tensor":
        return Reshape.apply(self, shape=tuple(shape))


class Parameter(Tensor):
    """A trainable leaf. `decay` marks tensors that receive weight decay."""

    __slots__ = ("decay",)

    def __init__(self, data: ArrayLike, name: Optional[str] = None, decay: bool = False):
        super().__init__(np.array(data, dtype=np.float64), requires_grad=True, name=name)
        self.decay = decay


def as_tensor(value: Union[Tensor, ArrayLike]) -> Tensor:
    return value if isinstance(value, Tensor) else Tensor(value)


# functional aliases used across the models --------------------------------

def matmul(a, b) -> Tensor:
    return MatMul.apply(a, b)


def exp(a) -> Tensor:
    return Exp.apply(a)


def log(a) -> Tensor:
    return Log.apply(a)


def log1p(a) -> Tensor:
    return Log1p.apply(a)


def sigmoid(a) -> Tensor:
    return Sigmoid.apply(a)


def softplus(a) -> Tensor:
    return Softplus.apply(a)


def leaky_relu(a, slope: float = LEAKY_SLOPE) -> Tensor:
    return LeakyReLU.apply(a, slope=slope)


def lgamma(a) -> Tensor:
    return Lgamma.apply(a)


def clip(a, low: float, high: float) -> Tensor:
    return Clip.apply(a, low=low, high=high)


def softmax(a, axis: int = -1) -> Tensor:
    return Softmax.apply(a, axis=axis)


def log_softmax(a, axis: int = -1) -> Tensor:
    return LogSoftmax.apply(a, axis=axis)


def concat(tensors: Sequence[Union[Tensor, ArrayLike]], axis: int = -1) -> Tensor:
    return Concat.apply(*tensors, axis=axis)


def straight_through(relaxed: Tensor, hard: np.ndarray) -> Tensor:
    return StraightThrough.apply(relaxed, hard=hard)


# =============================================================================
# GRAPH AND BACKWARD
# =============================================================================

@dataclass
class Graph:
    """Recorded operations reachable from an output, parents before children."""

    nodes: List[Tensor]

    @classmethod
    def from_output(cls, output: Tensor) -> "Graph":
        order: List[Tensor] = []
        visited = set()
        stack = [(output, False)]
        while stack:
            node, expanded = stack.pop()
            if expanded:
                order.append(node)
                continue
            if id(node) in visited:
                continue
            visited.add(id(node))
            stack.append((node, True))
            if node.creator is not None:
                for parent in node.creator.tensors:
                    if parent.requires_grad and id(parent) not in visited:
                        stack.append((parent, False))
        return cls(order)

    @property
    def leaves(self) -> List[Tensor]:
        return [node for node in self.nodes if node.creator is None and node.requires_grad]


def backward(loss: Tensor) -> Dict[Tensor, np.ndarray]:
    """
    Back-propagate from a scalar loss.

    Returns a map from every reachable leaf that requires gradients to its
    gradient, and stores the same array on `leaf.grad`.
    """
    if loss.data.size != 1:
        raise GradientError(f"backward needs a scalar loss, got shape {loss.shape}",
                            suggestion="Reduce the loss with .sum() or .mean()")
    if not np.all(np.isfinite(loss.data)):
        raise GradientError(f"loss is not finite ({loss.item()})")
    if not loss.requires_grad:
        return {}

    graph = Graph.from_output(loss)
    pending: Dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
    gradients: Dict[Tensor, np.ndarray] = {}

    for node in reversed(graph.nodes):
        grad = pending.pop(id(node), None)
        if grad is None:
            continue
        if node.creator is None:
            node.grad = grad
            gradients[node] = grad
            continue
        parent_grads = node.creator.backward(grad)
        for parent, parent_grad in zip(node.creator.tensors, parent_grads):
            if parent_grad is None or not parent.requires_grad:
                continue
            key = id(parent)
            pending[key] = parent_grad if key not in pending else pending[key] + parent_grad

    logger.debug(f"backward visited {len(graph.nodes)} nodes, {len(gradients)} leaves")
    return gradients
