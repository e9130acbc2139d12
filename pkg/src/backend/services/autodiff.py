"""
Reverse-mode automatic differentiation over dense float64 tensors.
Define-by-run: every forward pass records onto a fresh Tape, and
backward() walks the recorded nodes in reverse creation order.
"""

import threading
from dataclasses import dataclass
from enum import Enum
from types import MappingProxyType
from typing import Callable, Dict, Iterator, List, Mapping, Optional, Sequence, Tuple, Union

import numpy as np
import structlog
from scipy import linalg
from scipy.special import expit

from src.backend.core.exceptions import (
    CholeskyError,
    DomainError,
    NonFiniteError,
    ShapeMismatchError,
    TapeError,
)

logger = structlog.get_logger()

ArrayLike = Union[np.ndarray, float, int, Sequence[float], Sequence[Sequence[float]]]
BackwardFn = Callable[[np.ndarray], Tuple[Optional[np.ndarray], ...]]
AxesLike = Optional[Union[int, Tuple[int, ...]]]


class ElementwiseKind(str, Enum):
    """Supported elementwise operations"""
    ADD = "add"
    SUB = "sub"
    MUL = "mul"
    DIV = "div"
    NEG = "neg"
    EXP = "exp"
    LOG = "log"
    RELU = "relu"
    SIGMOID = "sigmoid"
    SQUARE = "square"
    SQRT = "sqrt"
    ABS = "abs"


BINARY_KINDS = frozenset({ElementwiseKind.ADD, ElementwiseKind.SUB, ElementwiseKind.MUL, ElementwiseKind.DIV})


class ReduceKind(str, Enum):
    """Supported reductions"""
    SUM = "sum"
    MEAN = "mean"
    MAX = "max"


def _as_array(data: ArrayLike) -> np.ndarray:
    array = np.array(data, dtype=np.float64)
    if any(extent <= 0 for extent in array.shape):
        raise ShapeMismatchError("Tensor extents must be positive", shapes=[array.shape])
    return array


def _check_finite(array: np.ndarray, operation: str) -> None:
    if not np.all(np.isfinite(array)):
        raise NonFiniteError(f"Non-finite values produced by {operation}", operation=operation)


@dataclass(frozen=True)
class _Node:
    parents: Tuple[int, ...]
    backward: Optional[BackwardFn]
    shape: Tuple[int, ...]


class Tensor:
    """Dense real array, optionally tracked as a node of a Tape"""

    __slots__ = ("data", "node", "tape")
    __array_ufunc__ = None

    def __init__(self, data: ArrayLike, node: Optional[int] = None, tape: Optional["Tape"] = None):
        array = _as_array(data)
        _check_finite(array, "tensor")
        self.data = array
        self.node = node
        self.tape = tape

    @property
    def shape(self) -> Tuple[int, ...]:
        return self.data.shape

    @property
    def size(self) -> int:
        return int(self.data.size)

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def is_tracked(self) -> bool:
        return self.tape is not None

    @property
    def T(self) -> "Tensor":
        return transpose(self)

    def item(self) -> float:
        if self.size != 1:
            raise ShapeMismatchError("item() needs a single-element tensor", shapes=[self.shape])
        return float(self.data.reshape(()))

    def numpy(self) -> np.ndarray:
        return self.data.copy()

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def reshape(self, *shape: Union[int, Tuple[int, ...]]) -> "Tensor":
        if len(shape) == 1 and isinstance(shape[0], tuple):
            shape = shape[0]
        return reshape(self, shape)

    def sum(self, axes: AxesLike = None, keepdims: bool = False) -> "Tensor":
        return reduce(ReduceKind.SUM, self, axes, keepdims)

    def mean(self, axes: AxesLike = None, keepdims: bool = False) -> "Tensor":
        return reduce(ReduceKind.MEAN, self, axes, keepdims)

    def __add__(self, other):
        return elementwise(ElementwiseKind.ADD, self, other)

    def __radd__(self, other):
        return elementwise(ElementwiseKind.ADD, other, self)

    def __sub__(self, other):
        return elementwise(ElementwiseKind.SUB, self, other)

    def __rsub__(self, other):
        return elementwise(ElementwiseKind.SUB, other, self)

    def __mul__(self, other):
        return elementwise(ElementwiseKind.MUL, self, other)

    def __rmul__(self, other):
        return elementwise(ElementwiseKind.MUL, other, self)

    def __truediv__(self, other):
        return elementwise(ElementwiseKind.DIV, self, other)

    def __rtruediv__(self, other):
        return elementwise(ElementwiseKind.DIV, other, self)

    def __neg__(self):
        return elementwise(ElementwiseKind.NEG, self)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, key):
        return index(self, key)

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, node={self.node})"


class Gradients(Mapping[int, np.ndarray]):
    """Immutable map from leaf node id to gradient array"""

    def __init__(self, grads: Dict[int, np.ndarray], tape: Optional["Tape"] = None):
        frozen = {}
        for node, grad in grads.items():
            grad = np.array(grad, dtype=np.float64)
            grad.flags.writeable = False
            frozen[node] = grad
        self._grads = MappingProxyType(frozen)
        self._tape = tape

    def __getitem__(self, node: int) -> np.ndarray:
        return self._grads[node]

    def __iter__(self) -> Iterator[int]:
        return iter(self._grads)

    def __len__(self) -> int:
        return len(self._grads)

    def wrt(self, tensor: Tensor) -> np.ndarray:
        """Gradient with respect to a leaf; zero when the leaf was not reached"""
        if tensor.tape is None or tensor.tape is not self._tape or tensor.node not in self._grads:
            return np.zeros_like(tensor.data)
        return self._grads[tensor.node]


class Tape:
    """Ordered record of operations for one forward pass, confined to one thread"""

    def __init__(self):
        self._nodes: List[_Node] = []
        self._owner = threading.get_ident()

    def __len__(self) -> int:
        return len(self._nodes)

    def _append(self, node: _Node) -> int:
        if threading.get_ident() != self._owner:
            raise TapeError("Tape is confined to the thread that created it")
        self._nodes.append(node)
        return len(self._nodes) - 1

    def leaf(self, data: ArrayLike) -> Tensor:
        """Register a differentiable input"""
        array = _as_array(data)
        _check_finite(array, "leaf")
        node = self._append(_Node((), None, array.shape))
        return Tensor(array, node=node, tape=self)

    def record(self, data: np.ndarray, parents: Sequence[Tensor], backward: BackwardFn, operation: str) -> Tensor:
        _check_finite(data, operation)
        parent_ids = []
        for parent in parents:
            if parent.tape is None:
                parent_ids.append(-1)
            elif parent.tape is self:
                parent_ids.append(parent.node)
            else:
                raise TapeError(f"Operands of {operation} are recorded on different tapes")
        node = self._append(_Node(tuple(parent_ids), backward, data.shape))
        return Tensor(data, node=node, tape=self)

    def backward(self, root: Tensor) -> Gradients:
        """Gradients of a scalar root for every leaf on this tape"""
        if root.tape is not self:
            raise TapeError("Root is not recorded on this tape")
        if root.size != 1:
            raise TapeError(f"backward() needs a scalar root, got shape {root.shape}")

        grads: Dict[int, np.ndarray] = {root.node: np.ones(root.shape)}
        for node_id in range(root.node, -1, -1):
            grad = grads.get(node_id)
            node = self._nodes[node_id]
            if grad is None or node.backward is None:
                continue
            for parent_id, parent_grad in zip(node.parents, node.backward(grad)):
                if parent_id < 0 or parent_grad is None:
                    continue
                parent_grad = np.asarray(parent_grad, dtype=np.float64).reshape(self._nodes[parent_id].shape)
                if parent_id in grads:
                    grads[parent_id] = grads[parent_id] + parent_grad
                else:
                    grads[parent_id] = parent_grad

        leaves = {
            node_id: grads.get(node_id, np.zeros(node.shape))
            for node_id, node in enumerate(self._nodes)
            if node.backward is None
        }
        return Gradients(leaves, tape=self)


def backward(root: Tensor) -> Gradients:
    """Reverse sweep from a scalar root; constants give an empty map"""
    if root.tape is None:
        if root.size != 1:
            raise TapeError(f"backward() needs a scalar root, got shape {root.shape}")
        return Gradients({})
    return root.tape.backward(root)


def _lift(value: Union[Tensor, ArrayLike]) -> Tensor:
    return value if isinstance(value, Tensor) else Tensor(value)


def _emit(data: np.ndarray, parents: Sequence[Tensor], backward_fn: BackwardFn, operation: str) -> Tensor:
    tape = next((p.tape for p in parents if p.tape is not None), None)
    if tape is None:
        _check_finite(data, operation)
        return Tensor(data)
    return tape.record(data, parents, backward_fn, operation)


def _fit(grad: np.ndarray, shape: Tuple[int, ...]) -> np.ndarray:
    # scalar operands receive the summed gradient
    if grad.shape == shape:
        return grad
    return np.asarray(grad.sum()).reshape(shape)


def elementwise(kind: Union[ElementwiseKind, str], a: Union[Tensor, ArrayLike], b: Optional[Union[Tensor, ArrayLike]] = None) -> Tensor:
    """Elementwise op; binary kinds need equal shapes or a scalar operand"""
    kind = ElementwiseKind(kind)
    a = _lift(a)
    if kind in BINARY_KINDS:
        if b is None:
            raise ShapeMismatchError(f"{kind.value} needs two operands", shapes=[a.shape])
        return _binary(kind, a, _lift(b))
    if b is not None:
        raise ShapeMismatchError(f"{kind.value} takes one operand", shapes=[a.shape])
    return _unary(kind, a)


def _binary(kind: ElementwiseKind, a: Tensor, b: Tensor) -> Tensor:
    if a.shape != b.shape and a.ndim != 0 and b.ndim != 0:
        raise ShapeMismatchError(f"{kind.value}: shapes {a.shape} and {b.shape} differ", shapes=[a.shape, b.shape])
    x, y = a.data, b.data

    if kind is ElementwiseKind.ADD:
        out = x + y
        grad = lambda g: (_fit(g, x.shape), _fit(g, y.shape))
    elif kind is ElementwiseKind.SUB:
        out = x - y
        grad = lambda g: (_fit(g, x.shape), _fit(-g, y.shape))
    elif kind is ElementwiseKind.MUL:
        out = x * y
        grad = lambda g: (_fit(g * y, x.shape), _fit(g * x, y.shape))
    else:
        if np.any(y == 0.0):
            raise DomainError("Division by zero", operation=kind.value)
        out = x / y
        grad = lambda g: (_fit(g / y, x.shape), _fit(-g * x / (y * y), y.shape))

    return _emit(np.asarray(out, dtype=np.float64), (a, b), grad, kind.value)


def _unary(kind: ElementwiseKind, a: Tensor) -> Tensor:
    x = a.data

    if kind is ElementwiseKind.NEG:
        out = -x
        grad = lambda g: (-g,)
    elif kind is ElementwiseKind.EXP:
        with np.errstate(over="ignore"):
            out = np.exp(x)
        grad = lambda g: (g * out,)
    elif kind is ElementwiseKind.LOG:
        if np.any(x <= 0.0):
            raise DomainError("log of non-positive input", operation=kind.value)
        out = np.log(x)
        grad = lambda g: (g / x,)
    elif kind is ElementwiseKind.RELU:
        active = x > 0.0
        out = np.where(active, x, 0.0)
        # subgradient at exactly 0 is 0
        grad = lambda g: (g * active,)
    elif kind is ElementwiseKind.SIGMOID:
        out = expit(x)
        grad = lambda g: (g * out * (1.0 - out),)
    elif kind is ElementwiseKind.SQUARE:
        out = x * x
        grad = lambda g: (2.0 * g * x,)
    elif kind is ElementwiseKind.SQRT:
        if np.any(x < 0.0):
            raise DomainError("sqrt of negative input", operation=kind.value)
        out = np.sqrt(x)
        safe = np.where(out > 0.0, out, 1.0)
        grad = lambda g: (np.where(out > 0.0, 0.5 * g / safe, 0.0),)
    else:
        out = np.abs(x)
        grad = lambda g: (g * np.sign(x),)

    return _emit(np.asarray(out, dtype=np.float64), (a,), grad, kind.value)


def relu(a: Tensor) -> Tensor:
    return elementwise(ElementwiseKind.RELU, a)


def sigmoid(a: Tensor) -> Tensor:
    return elementwise(ElementwiseKind.SIGMOID, a)


def square(a: Tensor) -> Tensor:
    return elementwise(ElementwiseKind.SQUARE, a)


def sqrt(a: Tensor) -> Tensor:
    return elementwise(ElementwiseKind.SQRT, a)


def exp(a: Tensor) -> Tensor:
    return elementwise(ElementwiseKind.EXP, a)


def log(a: Tensor) -> Tensor:
    return elementwise(ElementwiseKind.LOG, a)


def matmul(a: Union[Tensor, ArrayLike], b: Union[Tensor, ArrayLike]) -> Tensor:
    """Matrix product of two 2-D tensors"""
    a, b = _lift(a), _lift(b)
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[0]:
        raise ShapeMismatchError(f"matmul: cannot multiply {a.shape} by {b.shape}", shapes=[a.shape, b.shape])
    x, y = a.data, b.data
    return _emit(x @ y, (a, b), lambda g: (g @ y.T, x.T @ g), "matmul")


def _normalize_axes(axes: AxesLike, ndim: int) -> Tuple[int, ...]:
    if axes is None:
        return tuple(range(ndim))
    if isinstance(axes, int):
        axes = (axes,)
    if len(axes) == 0:
        raise ShapeMismatchError("Empty reduction: no axes given")
    normalized = []
    for axis in axes:
        if not -ndim <= axis < ndim:
            raise ShapeMismatchError(f"Axis {axis} out of range for rank {ndim}")
        normalized.append(axis % ndim)
    return tuple(sorted(set(normalized)))


def reduce(kind: Union[ReduceKind, str], a: Tensor, axes: AxesLike = None, keepdims: bool = False) -> Tensor:
    """Sum, mean or max over the given axes"""
    kind = ReduceKind(kind)
    a = _lift(a)
    ax = _normalize_axes(axes, a.ndim)
    x = a.data
    count = int(np.prod([x.shape[i] for i in ax])) if ax else 1

    if kind is ReduceKind.SUM:
        out = np.sum(x, axis=ax, keepdims=True)
        share = lambda g: np.broadcast_to(g, x.shape)
    elif kind is ReduceKind.MEAN:
        out = np.sum(x, axis=ax, keepdims=True) / count
        share = lambda g: np.broadcast_to(g, x.shape) / count
    else:
        out = np.max(x, axis=ax, keepdims=True)
        mask = (x == out).astype(np.float64)
        mask /= mask.sum(axis=ax, keepdims=True)
        share = lambda g: np.broadcast_to(g, x.shape) * mask

    kept_shape = out.shape
    if not keepdims:
        out = out.reshape([n for i, n in enumerate(x.shape) if i not in ax])
    return _emit(out, (a,), lambda g: (share(np.reshape(g, kept_shape)),), kind.value)


def reshape(a: Tensor, shape: Tuple[int, ...]) -> Tensor:
    original = a.shape
    try:
        out = a.data.reshape(shape)
    except ValueError as e:
        raise ShapeMismatchError(f"Cannot reshape {original} to {shape}", shapes=[original]) from e
    return _emit(out.copy(), (a,), lambda g: (np.reshape(g, original),), "reshape")


def transpose(a: Tensor) -> Tensor:
    """Reverse the axes (matrix transpose for 2-D tensors)"""
    return _emit(a.data.T.copy(), (a,), lambda g: (np.asarray(g).T,), "transpose")


def index(a: Tensor, key) -> Tensor:
    """Basic indexing/slicing; the gradient scatters back into the source shape"""
    out = np.array(a.data[key], dtype=np.float64)

    def grad(g: np.ndarray):
        full = np.zeros_like(a.data)
        np.add.at(full, key, g)
        return (full,)

    return _emit(out, (a,), grad, "index")


def repeat_columns(a: Tensor, count: int) -> Tensor:
    """(n, 1) -> (n, count) by multiplication with a row of ones"""
    return matmul(a, np.ones((1, count)))


def repeat_rows(a: Tensor, count: int) -> Tensor:
    """(1, n) -> (count, n) by multiplication with a column of ones"""
    return matmul(np.ones((count, 1)), a)


def _cholesky(matrix: np.ndarray, operation: str):
    try:
        return linalg.cho_factor(matrix, lower=True, check_finite=False)
    except linalg.LinAlgError as e:
        logger.error("Cholesky factorization failed", operation=operation, error=str(e))
        raise CholeskyError(f"{operation}: matrix is not positive definite") from e


def logdet_spd(a: Tensor) -> Tensor:
    """log det of a symmetric positive definite matrix, via Cholesky"""
    if a.ndim != 2 or a.shape[0] != a.shape[1]:
        raise ShapeMismatchError("logdet_spd needs a square matrix", shapes=[a.shape])
    factor = _cholesky(a.data, "logdet_spd")
    value = 2.0 * np.sum(np.log(np.diag(factor[0])))
    inverse = linalg.cho_solve(factor, np.eye(a.shape[0]), check_finite=False)
    return _emit(np.asarray(value), (a,), lambda g: (g * inverse,), "logdet_spd")


def inv_quad(a: Tensor, r: Tensor) -> Tensor:
    """rᵀ A⁻¹ r for SPD A; r is a vector (k,) or a batch of rows (S, k)"""
    k = a.shape[0]
    if a.ndim != 2 or a.shape[1] != k or r.shape[-1] != k or r.ndim > 2:
        raise ShapeMismatchError("inv_quad: incompatible operands", shapes=[a.shape, r.shape])
    factor = _cholesky(a.data, "inv_quad")
    solved = linalg.cho_solve(factor, r.data.T, check_finite=False)
    value = np.sum(r.data.T * solved, axis=0)

    def grad(g: np.ndarray):
        weighted = solved * g
        grad_a = -(weighted @ solved.T) if solved.ndim == 2 else -np.outer(weighted, solved)
        return grad_a, 2.0 * weighted.T

    return _emit(np.asarray(value), (a, r), grad, "inv_quad")


def relative_error(analytic: np.ndarray, numeric: np.ndarray) -> float:
    """Norm-wise relative error between two gradient arrays"""
    scale = max(float(np.max(np.abs(analytic))), float(np.max(np.abs(numeric))))
    if scale == 0.0:
        return 0.0
    return float(np.max(np.abs(analytic - numeric))) / scale


def gradcheck(fn: Callable[..., Tensor], inputs: Sequence[ArrayLike], step: float = 1e-5) -> float:
    """
    Compare tape gradients of a scalar function against central finite
    differences with step h = step * max(1, |value|).

    Returns:
        Worst norm-wise relative error over all inputs
    """
    arrays = [np.array(x, dtype=np.float64) for x in inputs]
    tape = Tape()
    leaves = [tape.leaf(array) for array in arrays]
    grads = backward(fn(*leaves))

    worst = 0.0
    for position, array in enumerate(arrays):
        numeric = np.zeros_like(array)
        for idx in np.ndindex(array.shape):
            h = step * max(1.0, abs(array[idx]))
            shifted = []
            for sign in (1.0, -1.0):
                inputs = [Tensor(x) for x in arrays]
                moved = array.copy()
                moved[idx] += sign * h
                inputs[position] = Tensor(moved)
                shifted.append(fn(*inputs).item())
            numeric[idx] = (shifted[0] - shifted[1]) / (2.0 * h)
        worst = max(worst, relative_error(grads.wrt(leaves[position]), numeric))
    return worst
