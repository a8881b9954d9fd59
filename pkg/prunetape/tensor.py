import logging
from enum import Enum
from typing import Any, Callable, Dict, Iterable, List, Optional, Sequence, Tuple, Union

import numpy as np

from prunetape.constants import GRAD_ZERO_GUARD
from prunetape.exceptions import NonScalarLossError, ShapeMismatchError
from prunetape.schemas import Projection

logger = logging.getLogger(__name__)

ArrayLike = Union[np.ndarray, float, int, Sequence[float], Sequence[Sequence[float]]]
GradTuple = Tuple[Optional[np.ndarray], ...]


class OpKind(str, Enum):
    """Primitive operations reachable through `linear_op`."""

    MATMUL = "matmul"
    ADD = "add"
    MUL = "mul"
    SCALE = "scale"
    RELU = "relu"
    SUM = "sum"
    L2_NORM = "l2_norm"
    MAX_ZERO = "max_zero"


class Function:
    """
    Base class for differentiable operations.

    `forward` receives the raw arrays of the input tensors and returns the output
    array. `backward` receives dL/d[output] and returns one dL/d[input] per input
    (None for inputs that need no gradient).
    """

    op_name = "function"

    def __init__(self, *tensors: "Tensor"):
        self.tensors = tensors

    def forward(self, *arrays: np.ndarray, **kwargs: Any) -> np.ndarray:
        raise NotImplementedError(f"Forward pass not implemented for {self.op_name}")

    def backward(self, grad: np.ndarray) -> GradTuple:
        raise NotImplementedError(f"Backward pass not implemented for {self.op_name}")

    @classmethod
    def apply(cls, *tensors: "Tensor", **kwargs: Any) -> "Tensor":
        func = cls(*tensors)
        out = func.forward(*(t.data for t in tensors), **kwargs)
        requires_grad = any(t.requires_grad for t in tensors)
        # Constant subgraphs are not recorded.
        return Tensor(out, creator=func if requires_grad else None, requires_grad=requires_grad)

    @staticmethod
    def unbroadcast(grad: np.ndarray, to_shape: Tuple[int, ...]) -> np.ndarray:
        """Sum out the axes numpy broadcasting added or stretched."""
        if grad.shape == to_shape:
            return grad
        while grad.ndim > len(to_shape):
            grad = grad.sum(axis=0)
        for axis, extent in enumerate(to_shape):
            if extent == 1 and grad.shape[axis] != 1:
                grad = grad.sum(axis=axis, keepdims=True)
        return grad


class Tensor:
    """
    A node of the reverse-mode graph: a float64 array, the Function that produced
    it (None for leaves) and the accumulated gradient after `backward`.
    """

    # ndarray <op> Tensor must dispatch to the Tensor's reflected operator.
    __array_priority__ = 100

    def __init__(
        self,
        data: ArrayLike,
        creator: Optional[Function] = None,
        requires_grad: bool = False,
        name: Optional[str] = None,
    ):
        if creator is None:
            self.data = np.array(data, dtype=np.float64)
        else:
            self.data = np.asarray(data, dtype=np.float64)
        self.creator = creator
        self.requires_grad = requires_grad
        self.grad: Optional[np.ndarray] = None
        self.name = name

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
    def is_leaf(self) -> bool:
        return self.creator is None

    @property
    def T(self) -> "Tensor":
        return Transpose.apply(self)

    def item(self) -> float:
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else float("nan")

    def numpy(self) -> np.ndarray:
        return self.data.copy()

    def detach(self) -> "Tensor":
        return Tensor(self.data.copy())

    def zero_grad(self) -> None:
        self.grad = None

    def backward(self) -> List["Tensor"]:
        return backward(self)

    def __repr__(self) -> str:
        label = f" name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}{label}, requires_grad={self.requires_grad})"

    def __add__(self, other: Any) -> "Tensor":
        return Add.apply(self, wrap(other))

    def __radd__(self, other: Any) -> "Tensor":
        return Add.apply(wrap(other), self)

    def __sub__(self, other: Any) -> "Tensor":
        return Sub.apply(self, wrap(other))

    def __rsub__(self, other: Any) -> "Tensor":
        return Sub.apply(wrap(other), self)

    def __mul__(self, other: Any) -> "Tensor":
        if isinstance(other, (int, float)):
            return Scale.apply(self, factor=float(other))
        return Mul.apply(self, wrap(other))

    def __rmul__(self, other: Any) -> "Tensor":
        if isinstance(other, (int, float)):
            return Scale.apply(self, factor=float(other))
        return Mul.apply(wrap(other), self)

    def __truediv__(self, other: Any) -> "Tensor":
        if isinstance(other, (int, float)):
            return Scale.apply(self, factor=1.0 / float(other))
        return Div.apply(self, wrap(other))

    def __rtruediv__(self, other: Any) -> "Tensor":
        return Div.apply(wrap(other), self)

    def __neg__(self) -> "Tensor":
        return Scale.apply(self, factor=-1.0)

    def __matmul__(self, other: Any) -> "Tensor":
        return MatMul.apply(self, wrap(other))

    def __rmatmul__(self, other: Any) -> "Tensor":
        return MatMul.apply(wrap(other), self)

    def __getitem__(self, key: Any) -> "Tensor":
        return Index.apply(self, key=key)

    def sum(self, axis: Optional[int] = None, keepdims: bool = False) -> "Tensor":
        return Sum.apply(self, axis=axis, keepdims=keepdims)

    def mean(self, axis: Optional[int] = None, keepdims: bool = False) -> "Tensor":
        count = self.data.size if axis is None else self.data.shape[axis]
        return Sum.apply(self, axis=axis, keepdims=keepdims) * (1.0 / count)

    def relu(self) -> "Tensor":
        return ReLU.apply(self)

    def l2_norm(self) -> "Tensor":
        return L2Norm.apply(self)

    def reshape(self, *shape: int) -> "Tensor":
        return Reshape.apply(self, shape=shape)


class Parameter(Tensor):
    """A trainable leaf. `projection` tells the optimizer how to project it after a step."""

    def __init__(
        self,
        data: ArrayLike,
        name: Optional[str] = None,
        projection: Projection = Projection.NONE,
    ):
        super().__init__(data, requires_grad=True, name=name)
        self.projection = projection

    @property
    def is_mask(self) -> bool:
        return self.projection != Projection.NONE

    def __repr__(self) -> str:
        return f"Parameter(name={self.name!r}, shape={self.shape}, projection={self.projection.value})"


def wrap(value: Any) -> Tensor:
    """Turn constants into graph-free tensors."""
    if isinstance(value, Tensor):
        return value
    return Tensor(value)


def _broadcast_shape(a: np.ndarray, b: np.ndarray, op: str) -> Tuple[int, ...]:
    try:
        return np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise ShapeMismatchError(f"Cannot {op} shapes {a.shape} and {b.shape}") from None


class Add(Function):
    op_name = "add"

    def forward(self, a, b):
        _broadcast_shape(a, b, "add")
        self.shapes = (a.shape, b.shape)
        return a + b

    def backward(self, grad):
        return self.unbroadcast(grad, self.shapes[0]), self.unbroadcast(grad, self.shapes[1])


class Sub(Function):
    op_name = "sub"

    def forward(self, a, b):
        _broadcast_shape(a, b, "subtract")
        self.shapes = (a.shape, b.shape)
        return a - b

    def backward(self, grad):
        return self.unbroadcast(grad, self.shapes[0]), self.unbroadcast(-grad, self.shapes[1])


class Mul(Function):
    op_name = "mul"

    def forward(self, a, b):
        _broadcast_shape(a, b, "multiply")
        self.a, self.b = a, b
        return a * b

    def backward(self, grad):
        return (
            self.unbroadcast(grad * self.b, self.a.shape),
            self.unbroadcast(grad * self.a, self.b.shape),
        )


class Div(Function):
    op_name = "div"

    def forward(self, a, b):
        _broadcast_shape(a, b, "divide")
        self.a, self.b = a, b
        return a / b

    def backward(self, grad):
        return (
            self.unbroadcast(grad / self.b, self.a.shape),
            self.unbroadcast(-grad * self.a / (self.b * self.b), self.b.shape),
        )


class Scale(Function):
    op_name = "scale"

    def forward(self, a, factor: float = 1.0):
        self.factor = factor
        return a * factor

    def backward(self, grad):
        return (grad * self.factor,)


class MatMul(Function):
    """Matrix products between 1-D and 2-D operands."""

    op_name = "matmul"

    def forward(self, a, b):
        if a.ndim not in (1, 2) or b.ndim not in (1, 2):
            raise ShapeMismatchError(f"matmul supports 1-D/2-D operands, got {a.shape} and {b.shape}")
        inner_a = a.shape[-1]
        inner_b = b.shape[0]
        if inner_a != inner_b:
            raise ShapeMismatchError(f"Cannot matmul shapes {a.shape} and {b.shape}")
        self.a, self.b = a, b
        return a @ b

    def backward(self, grad):
        a, b = self.a, self.b
        if a.ndim == 2 and b.ndim == 2:
            return grad @ b.T, a.T @ grad
        if a.ndim == 2 and b.ndim == 1:
            return np.outer(grad, b), a.T @ grad
        if a.ndim == 1 and b.ndim == 2:
            return b @ grad, np.outer(a, grad)
        return grad * b, grad * a


class Transpose(Function):
    op_name = "transpose"

    def forward(self, a):
        return a.T

    def backward(self, grad):
        return (grad.T,)


class Reshape(Function):
    op_name = "reshape"

    def forward(self, a, shape: Tuple[int, ...] = ()):
        self.in_shape = a.shape
        try:
            return a.reshape(shape)
        except ValueError:
            raise ShapeMismatchError(f"Cannot reshape {a.shape} into {shape}") from None

    def backward(self, grad):
        return (grad.reshape(self.in_shape),)


class ReLU(Function):
    op_name = "relu"

    def forward(self, a):
        self.active = a > 0
        return np.where(self.active, a, 0.0)

    def backward(self, grad):
        return (grad * self.active,)


class MaxZero(ReLU):
    """max(0, x); the same rule as ReLU, kept under its own name for the projection."""

    op_name = "max_zero"


class Sum(Function):
    op_name = "sum"

    def forward(self, a, axis: Optional[int] = None, keepdims: bool = False):
        self.in_shape = a.shape
        self.axis = axis
        self.keepdims = keepdims
        return np.asarray(a.sum(axis=axis, keepdims=keepdims))

    def backward(self, grad):
        if self.axis is not None and not self.keepdims:
            grad = np.expand_dims(grad, self.axis)
        return (np.broadcast_to(grad, self.in_shape).copy(),)


class L2Norm(Function):
    """Euclidean norm of the whole tensor. The gradient at the zero tensor is defined as 0."""

    op_name = "l2_norm"

    def forward(self, a):
        self.a = a
        self.norm = float(np.sqrt(np.sum(a * a)))
        return np.asarray(self.norm)

    def backward(self, grad):
        if self.norm == GRAD_ZERO_GUARD:
            return (np.zeros_like(self.a),)
        return (grad * self.a / self.norm,)


class Index(Function):
    op_name = "index"

    def forward(self, a, key: Any = None):
        self.in_shape = a.shape
        self.key = key
        return np.asarray(a[key])

    def backward(self, grad):
        out = np.zeros(self.in_shape)
        np.add.at(out, self.key, grad)
        return (out,)


class Stack(Function):
    op_name = "stack"

    def forward(self, *arrays, axis: int = 0):
        shapes = {arr.shape for arr in arrays}
        if len(shapes) > 1:
            raise ShapeMismatchError(f"Cannot stack shapes {sorted(shapes)}")
        self.axis = axis
        return np.stack(arrays, axis=axis)

    def backward(self, grad):
        return tuple(np.take(grad, i, axis=self.axis) for i in range(grad.shape[self.axis]))


def stack(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    return Stack.apply(*tensors, axis=axis)


def linear_op(kind: Union[OpKind, str], *nodes: Any, **kwargs: Any) -> Tensor:
    """
    Dispatch one of the primitive operations by name.

    `scale` takes `factor=`; `sum` accepts `axis=` and `keepdims=`.
    """
    kind = OpKind(kind)
    tensors = [wrap(n) for n in nodes]
    expected = 2 if kind in (OpKind.MATMUL, OpKind.ADD, OpKind.MUL) else 1
    if len(tensors) != expected:
        raise ValueError(f"{kind.value} expects {expected} operand(s), got {len(tensors)}")

    if kind == OpKind.MATMUL:
        return MatMul.apply(*tensors)
    if kind == OpKind.ADD:
        return Add.apply(*tensors)
    if kind == OpKind.MUL:
        return Mul.apply(*tensors)
    if kind == OpKind.SCALE:
        return Scale.apply(tensors[0], factor=float(kwargs.get("factor", 1.0)))
    if kind == OpKind.RELU:
        return ReLU.apply(tensors[0])
    if kind == OpKind.SUM:
        return Sum.apply(tensors[0], axis=kwargs.get("axis"), keepdims=kwargs.get("keepdims", False))
    if kind == OpKind.L2_NORM:
        return L2Norm.apply(tensors[0])
    return MaxZero.apply(tensors[0])


def _topological_order(root: Tensor) -> List[Tensor]:
    """Post-order over the graph (inputs before the nodes that consume them)."""
    order: List[Tensor] = []
    visited = set()
    stack_: List[Tuple[Tensor, bool]] = [(root, False)]
    while stack_:
        node, expanded = stack_.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in visited:
            continue
        visited.add(id(node))
        stack_.append((node, True))
        if node.creator is not None:
            for parent in node.creator.tensors:
                if id(parent) not in visited:
                    stack_.append((parent, False))
    return order


def backward(loss: Tensor) -> List[Tensor]:
    """
    Reverse-mode sweep from a scalar node.

    Leaves accumulate into `.grad` (call `zero_grad` between steps); interior nodes
    get the gradient of this sweep. Returns the leaves that received a gradient.
    """
    if loss.data.size != 1:
        raise NonScalarLossError(f"backward requires a scalar loss, got shape {loss.shape}")

    order = _topological_order(loss)
    pending: Dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
    leaves: List[Tensor] = []

    for node in reversed(order):
        grad = pending.pop(id(node), None)
        if grad is None or not node.requires_grad:
            continue

        if node.creator is None:
            node.grad = grad.copy() if node.grad is None else node.grad + grad
            leaves.append(node)
            continue

        node.grad = grad
        for parent, parent_grad in zip(node.creator.tensors, node.creator.backward(grad)):
            if parent_grad is None or not parent.requires_grad:
                continue
            key = id(parent)
            pending[key] = pending[key] + parent_grad if key in pending else parent_grad

    return leaves


def numerical_gradient(fn: Callable[[], Tensor], param: Tensor, eps: float = 1e-5) -> np.ndarray:
    """Central finite differences of the scalar `fn()` with respect to `param.data`."""
    grad = np.zeros_like(param.data)
    flat = param.data.reshape(-1)
    out = grad.reshape(-1)
    for i in range(flat.size):
        original = flat[i]
        flat[i] = original + eps
        f_plus = fn().item()
        flat[i] = original - eps
        f_minus = fn().item()
        flat[i] = original
        out[i] = (f_plus - f_minus) / (2.0 * eps)
    return grad


def gradient_relative_error(
    fn: Callable[[], Tensor], params: Iterable[Tensor], eps: float = 1e-5
) -> float:
    """Max over entries of |autodiff - FD| / (|FD| + 1e-8)."""
    params = list(params)
    for p in params:
        p.zero_grad()
    backward(fn())

    worst = 0.0
    for p in params:
        analytic = p.grad if p.grad is not None else np.zeros_like(p.data)
        numeric = numerical_gradient(fn, p, eps=eps)
        err = np.abs(analytic - numeric) / (np.abs(numeric) + 1e-8)
        worst = max(worst, float(err.max(initial=0.0)))
    return worst
