"""Dense float64 tensors with reverse-mode automatic differentiation.

Every operation is a module-level function that computes its result with numpy
and, when any input requires a gradient, records a backward closure on the
output. ``Graph`` collects the records reachable from an output in topological
order and ``backward`` walks them in reverse, accumulating gradients left to
right so that repeated runs are bit-identical.

Tensors are immutable: their arrays are flagged read-only and no operation
writes into an existing array.
"""
from __future__ import annotations

from typing import Callable, Dict, List, Mapping, Optional, Sequence, Tuple, Union

import numpy as np

from src.utils.errors import DimensionError, InputError, NumericError

ArrayLike = Union[np.ndarray, float, int, Sequence]
BackwardFn = Callable[[np.ndarray], Tuple[Optional[np.ndarray], ...]]

LEAKY_SLOPE = 0.2
LAYER_NORM_EPS = 1e-5
UNARY_KINDS = ("sigmoid", "tanh", "leaky_relu", "exp", "sqrt", "neg")
REDUCE_KINDS = ("sum", "mean", "l2norm")


def _frozen(data: ArrayLike, copy: bool) -> np.ndarray:
    arr = np.array(data, dtype=np.float64) if copy else np.asarray(data, dtype=np.float64)
    arr.setflags(write=False)
    return arr


def _check_finite(arr: np.ndarray, op: str) -> None:
    if not np.isfinite(arr).all():
        raise NumericError(f"{op} produced non-finite values")


class Tensor:
    """An immutable float64 array plus the record of the operation that made it."""

    __slots__ = ("data", "requires_grad", "name", "op", "parents", "_backward")

    def __init__(self, data: ArrayLike, requires_grad: bool = False, name: Optional[str] = None):
        arr = _frozen(data, copy=True)
        _check_finite(arr, "leaf")
        self.data = arr
        self.requires_grad = requires_grad
        self.name = name
        self.op = "leaf"
        self.parents: Tuple[Tensor, ...] = ()
        self._backward: Optional[BackwardFn] = None

    @classmethod
    def _result(cls, data: np.ndarray, op: str, parents: Sequence["Tensor"], backward: BackwardFn) -> "Tensor":
        arr = _frozen(data, copy=False)
        _check_finite(arr, op)
        out = cls.__new__(cls)
        out.data = arr
        out.requires_grad = any(p.requires_grad for p in parents)
        out.name = None
        out.op = op
        out.parents = tuple(parents) if out.requires_grad else ()
        out._backward = backward if out.requires_grad else None
        return out

    @property
    def shape(self) -> Tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return int(self.data.size)

    def item(self) -> float:
        if self.size != 1:
            raise DimensionError(f"item() needs a single element, got shape {self.shape}")
        return float(self.data.reshape(-1)[0])

    def numpy(self) -> np.ndarray:
        return self.data

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def __add__(self, other): return add(self, other)
    def __radd__(self, other): return add(other, self)
    def __sub__(self, other): return sub(self, other)
    def __rsub__(self, other): return sub(other, self)
    def __mul__(self, other): return mul(self, other)
    def __rmul__(self, other): return mul(other, self)
    def __truediv__(self, other): return div(self, other)
    def __rtruediv__(self, other): return div(other, self)
    def __neg__(self): return apply_unary("neg", self)
    def __matmul__(self, other): return matmul(self, other)

    def __repr__(self) -> str:
        label = f", name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}, op={self.op!r}, requires_grad={self.requires_grad}{label})"


TensorLike = Union[Tensor, ArrayLike]


def as_tensor(value: TensorLike) -> Tensor:
    return value if isinstance(value, Tensor) else Tensor(value)


def unbroadcast(grad: np.ndarray, shape: Tuple[int, ...]) -> np.ndarray:
    """Sum out the axes numpy broadcasting added or stretched to reach ``grad.shape``."""
    if grad.shape == shape:
        return grad
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, extent in enumerate(shape):
        if extent == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad


def _broadcast_shape(a: Tensor, b: Tensor, op: str) -> Tuple[int, ...]:
    try:
        return np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise DimensionError(f"{op}: shapes {a.shape} and {b.shape} do not broadcast")


# elementwise binary ----------------------------------------------------------

def add(a: TensorLike, b: TensorLike) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape(a, b, "add")

    def backward(g):
        return unbroadcast(g, a.shape), unbroadcast(g, b.shape)
    return Tensor._result(a.data + b.data, "add", (a, b), backward)


def sub(a: TensorLike, b: TensorLike) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape(a, b, "sub")

    def backward(g):
        return unbroadcast(g, a.shape), unbroadcast(-g, b.shape)
    return Tensor._result(a.data - b.data, "sub", (a, b), backward)


def mul(a: TensorLike, b: TensorLike) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape(a, b, "mul")

    def backward(g):
        return unbroadcast(g * b.data, a.shape), unbroadcast(g * a.data, b.shape)
    return Tensor._result(a.data * b.data, "mul", (a, b), backward)


def div(a: TensorLike, b: TensorLike) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape(a, b, "div")
    if np.any(b.data == 0.0):
        raise NumericError(f"div: zero in denominator of shape {b.shape}")
    out = a.data / b.data

    def backward(g):
        return unbroadcast(g / b.data, a.shape), unbroadcast(-g * out / b.data, b.shape)
    return Tensor._result(out, "div", (a, b), backward)


# linear algebra ----------------------------------------------------------------

def matmul(a: TensorLike, b: TensorLike) -> Tensor:
    """Matrix product over the last two axes; leading axes broadcast."""
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim < 2 or b.ndim < 2 or a.shape[-1] != b.shape[-2]:
        raise DimensionError(f"matmul: cannot multiply {a.shape} by {b.shape}")
    try:
        np.broadcast_shapes(a.shape[:-2], b.shape[:-2])
    except ValueError:
        raise DimensionError(f"matmul: batch axes of {a.shape} and {b.shape} do not broadcast")

    def backward(g):
        ga = np.matmul(g, np.swapaxes(b.data, -1, -2))
        gb = np.matmul(np.swapaxes(a.data, -1, -2), g)
        return unbroadcast(ga, a.shape), unbroadcast(gb, b.shape)
    return Tensor._result(np.matmul(a.data, b.data), "matmul", (a, b), backward)


# unary ------------------------------------------------------------------------

def _sigmoid(x: np.ndarray) -> np.ndarray:
    e = np.exp(-np.abs(x))
    return np.where(x >= 0, 1.0 / (1.0 + e), e / (1.0 + e))


def apply_unary(kind: str, x: TensorLike, slope: float = LEAKY_SLOPE) -> Tensor:
    x = as_tensor(x)
    xd = x.data
    if kind == "sigmoid":
        y = _sigmoid(xd)

        def backward(g):
            return (g * y * (1.0 - y),)
    elif kind == "tanh":
        y = np.tanh(xd)

        def backward(g):
            return (g * (1.0 - y * y),)
    elif kind == "leaky_relu":
        y = np.where(xd > 0, xd, slope * xd)

        def backward(g):
            return (g * np.where(xd > 0, 1.0, slope),)
    elif kind == "exp":
        y = np.exp(xd)

        def backward(g):
            return (g * y,)
    elif kind == "sqrt":
        if np.any(xd < 0):
            raise InputError("sqrt of a negative value")
        y = np.sqrt(xd)

        def backward(g):
            # subgradient 0 at the origin
            safe = np.where(y > 0, y, 1.0)
            return (np.where(y > 0, g / (2.0 * safe), 0.0),)
    elif kind == "neg":
        y = -xd

        def backward(g):
            return (-g,)
    else:
        raise InputError(f"unknown unary kind {kind!r}; expected one of {UNARY_KINDS}")
    return Tensor._result(y, kind, (x,), backward)


def sigmoid(x: TensorLike) -> Tensor:
    return apply_unary("sigmoid", x)


def tanh(x: TensorLike) -> Tensor:
    return apply_unary("tanh", x)


def leaky_relu(x: TensorLike, slope: float = LEAKY_SLOPE) -> Tensor:
    return apply_unary("leaky_relu", x, slope=slope)


def sqrt(x: TensorLike) -> Tensor:
    return apply_unary("sqrt", x)


def exp(x: TensorLike) -> Tensor:
    return apply_unary("exp", x)


# reductions ---------------------------------------------------------------------

def _normalize_axis(axis: int, ndim: int, op: str) -> int:
    if not -ndim <= axis < ndim:
        raise InputError(f"{op}: axis {axis} out of range for rank {ndim}")
    return axis % ndim


def reduce(kind: str, x: TensorLike, axis: Optional[int] = None, keepdims: bool = False) -> Tensor:
    """Sum, mean or Euclidean norm along ``axis`` (all axes when ``axis`` is None)."""
    x = as_tensor(x)
    if kind not in REDUCE_KINDS:
        raise InputError(f"unknown reduction {kind!r}; expected one of {REDUCE_KINDS}")
    if axis is None:
        axes = tuple(range(x.ndim))
        count = x.size
    else:
        axes = (_normalize_axis(axis, x.ndim, kind),)
        count = x.shape[axes[0]]

    def expand(g: np.ndarray) -> np.ndarray:
        if not keepdims:
            g = np.expand_dims(g, axes)
        return np.broadcast_to(g, x.shape)

    if kind == "sum":
        y = x.data.sum(axis=axes, keepdims=keepdims)

        def backward(g):
            return (np.array(expand(g)),)
    elif kind == "mean":
        y = x.data.sum(axis=axes, keepdims=keepdims) / count

        def backward(g):
            return (expand(g) / count,)
    else:
        norm = np.sqrt((x.data * x.data).sum(axis=axes, keepdims=True))
        y = norm if keepdims else np.squeeze(norm, axis=axes)

        def backward(g):
            safe = np.where(norm > 0, norm, 1.0)
            return (np.where(norm > 0, expand(g) * x.data / safe, 0.0),)
    return Tensor._result(y, kind, (x,), backward)


def sum_(x: TensorLike, axis: Optional[int] = None, keepdims: bool = False) -> Tensor:
    return reduce("sum", x, axis, keepdims)


def mean(x: TensorLike, axis: Optional[int] = None, keepdims: bool = False) -> Tensor:
    return reduce("mean", x, axis, keepdims)


def l2norm(x: TensorLike, axis: int = -1, keepdims: bool = False) -> Tensor:
    return reduce("l2norm", x, axis, keepdims)


def softmax(x: TensorLike, axis: int = -1, mask: Optional[np.ndarray] = None) -> Tensor:
    """Softmax with max-subtraction. ``mask`` (broadcastable bool) marks admissible entries."""
    x = as_tensor(x)
    axis = _normalize_axis(axis, x.ndim, "softmax")
    z = x.data
    if mask is not None:
        mask = np.broadcast_to(np.asarray(mask, dtype=bool), x.shape)
        if not mask.any(axis=axis).all():
            raise InputError("softmax: a row has no admissible entries")
        z = np.where(mask, z, -np.inf)
    e = np.exp(z - z.max(axis=axis, keepdims=True))
    y = e / e.sum(axis=axis, keepdims=True)

    def backward(g):
        return (y * (g - (g * y).sum(axis=axis, keepdims=True)),)
    return Tensor._result(y, "softmax", (x,), backward)


# shape manipulation -------------------------------------------------------------------

def reshape(x: TensorLike, shape: Sequence[int]) -> Tensor:
    x = as_tensor(x)
    try:
        y = x.data.reshape(tuple(shape))
    except ValueError:
        raise DimensionError(f"reshape: cannot view {x.shape} as {tuple(shape)}")

    def backward(g):
        return (g.reshape(x.shape),)
    return Tensor._result(y, "reshape", (x,), backward)


def transpose(x: TensorLike, axes: Optional[Sequence[int]] = None) -> Tensor:
    x = as_tensor(x)
    axes = tuple(reversed(range(x.ndim))) if axes is None else tuple(a % x.ndim for a in axes)
    if sorted(axes) != list(range(x.ndim)):
        raise DimensionError(f"transpose: {axes} is not a permutation for shape {x.shape}")
    inverse = tuple(np.argsort(axes))

    def backward(g):
        return (np.transpose(g, inverse),)
    return Tensor._result(np.transpose(x.data, axes), "transpose", (x,), backward)


def swapaxes(x: TensorLike, a: int, b: int) -> Tensor:
    x = as_tensor(x)
    axes = list(range(x.ndim))
    axes[a], axes[b] = axes[b], axes[a]
    return transpose(x, axes)


def concat(tensors: Sequence[TensorLike], axis: int = 0) -> Tensor:
    tensors = [as_tensor(t) for t in tensors]
    if not tensors:
        raise InputError("concat: nothing to concatenate")
    axis = _normalize_axis(axis, tensors[0].ndim, "concat")
    try:
        y = np.concatenate([t.data for t in tensors], axis=axis)
    except ValueError:
        raise DimensionError(f"concat: incompatible shapes {[t.shape for t in tensors]}")
    bounds = np.cumsum([t.shape[axis] for t in tensors])[:-1]

    def backward(g):
        return tuple(np.split(g, bounds, axis=axis))
    return Tensor._result(y, "concat", tensors, backward)


def stack(tensors: Sequence[TensorLike], axis: int = 0) -> Tensor:
    tensors = [as_tensor(t) for t in tensors]
    if not tensors:
        raise InputError("stack: nothing to stack")
    try:
        y = np.stack([t.data for t in tensors], axis=axis)
    except ValueError:
        raise DimensionError(f"stack: incompatible shapes {[t.shape for t in tensors]}")
    axis = axis % y.ndim

    def backward(g):
        return tuple(np.take(g, i, axis=axis) for i in range(len(tensors)))
    return Tensor._result(y, "stack", tensors, backward)


def take(x: TensorLike, indices: Sequence[int], axis: int = 0) -> Tensor:
    """Gather along ``axis``; the backward pass scatter-adds repeated indices."""
    x = as_tensor(x)
    axis = _normalize_axis(axis, x.ndim, "take")
    idx = np.asarray(indices, dtype=np.int64)
    if idx.size and (idx.min() < -x.shape[axis] or idx.max() >= x.shape[axis]):
        raise InputError(f"take: index out of range for axis of extent {x.shape[axis]}")

    def backward(g):
        moved = np.zeros((x.shape[axis],) + x.shape[:axis] + x.shape[axis + 1:])
        np.add.at(moved, idx, np.moveaxis(g, axis, 0))
        return (np.moveaxis(moved, 0, axis),)
    return Tensor._result(np.take(x.data, idx, axis=axis), "take", (x,), backward)


# composites ---------------------------------------------------------------------------

def linear(x: TensorLike, weight: TensorLike, bias: Optional[TensorLike] = None) -> Tensor:
    """``x @ weight.T + bias`` with ``weight`` stored as [out x in]."""
    out = matmul(x, swapaxes(weight, -1, -2))
    return out if bias is None else add(out, bias)


def layer_norm(x: TensorLike, gamma: TensorLike, beta: TensorLike, axis: int = -1,
               eps: float = LAYER_NORM_EPS) -> Tensor:
    centered = sub(x, mean(x, axis=axis, keepdims=True))
    var = mean(mul(centered, centered), axis=axis, keepdims=True)
    return add(mul(div(centered, sqrt(add(var, eps))), gamma), beta)


# graph + backward ---------------------------------------------------------------------

class Graph:
    """Operation records reachable from ``output``, parents before children."""

    def __init__(self, output: Tensor):
        self.output = output
        self.nodes: List[Tensor] = []
        seen = set()
        stack: List[Tuple[Tensor, int]] = [(output, 0)]
        while stack:
            node, child = stack.pop()
            if child == 0 and id(node) in seen:
                continue
            if child < len(node.parents):
                stack.append((node, child + 1))
                parent = node.parents[child]
                if id(parent) not in seen:
                    stack.append((parent, 0))
            else:
                seen.add(id(node))
                self.nodes.append(node)
        self.index = {id(n): i for i, n in enumerate(self.nodes)}

    def leaves(self) -> List[Tensor]:
        return [n for n in self.nodes if n.op == "leaf" and n.requires_grad]

    def __len__(self) -> int:
        return len(self.nodes)


def backward(graph: Graph, seed: Optional[ArrayLike] = None) -> Dict[str, np.ndarray]:
    """Gradients of ``graph.output`` (contracted with ``seed``) for every trainable leaf."""
    out = graph.output
    if seed is None:
        seed_arr = np.ones(out.shape)
    else:
        seed_arr = np.asarray(seed, dtype=np.float64)
        if seed_arr.shape != out.shape:
            raise DimensionError(f"backward: seed shape {seed_arr.shape} does not match output shape {out.shape}")

    grads: Dict[int, np.ndarray] = {id(out): seed_arr}
    for node in reversed(graph.nodes):
        g = grads.get(id(node))
        if g is None or node._backward is None:
            continue
        for parent, pg in zip(node.parents, node._backward(g)):
            if pg is None or not parent.requires_grad:
                continue
            key = id(parent)
            grads[key] = grads[key] + pg if key in grads else pg

    result: Dict[str, np.ndarray] = {}
    for i, leaf in enumerate(graph.leaves()):
        name = leaf.name or f"leaf_{i}"
        if name in result:
            raise InputError(f"backward: two trainable leaves share the name {name!r}")
        result[name] = np.asarray(grads.get(id(leaf), np.zeros(leaf.shape)), dtype=np.float64)
    return result


def gradients(loss: Tensor) -> Dict[str, np.ndarray]:
    return backward(Graph(loss))


def bind(tree: Mapping[str, np.ndarray], requires_grad: bool = False) -> Dict[str, Tensor]:
    """Wrap a flat parameter dictionary as named leaves."""
    return {name: Tensor(value, requires_grad=requires_grad, name=name) for name, value in tree.items()}


def grad_check(f: Callable[[Dict[str, Tensor]], Tensor], point: Mapping[str, ArrayLike],
               h: float = 1e-5, max_coords: Optional[int] = None,
               rng: Optional[np.random.Generator] = None, floor: float = 1e-8) -> float:
    """Max relative deviation between analytic and central-difference gradients.

    Deviations are divided by max(floor, |numeric|).

    ``f`` receives the point as named tensors and must return a single element.
    With ``max_coords`` only that many coordinates (drawn with ``rng``) are probed.
    """
    arrays = {k: np.array(v, dtype=np.float64) for k, v in point.items()}
    out = f(bind(arrays, requires_grad=True))
    if out.size != 1:
        raise DimensionError(f"grad_check: f must be scalar, got shape {out.shape}")
    analytic = backward(Graph(out), np.ones(out.shape))

    coords = [(name, idx) for name, arr in arrays.items() for idx in np.ndindex(arr.shape)]
    if max_coords is not None and len(coords) > max_coords:
        rng = rng if rng is not None else np.random.Generator(np.random.Philox(0))
        picks = np.sort(rng.choice(len(coords), size=max_coords, replace=False))
        coords = [coords[i] for i in picks]

    def evaluate(name: str, idx: Tuple[int, ...], delta: float) -> float:
        shifted = dict(arrays)
        probe = arrays[name].copy()
        probe[idx] += delta
        shifted[name] = probe
        return f(bind(shifted)).item()

    worst = 0.0
    for name, idx in coords:
        numeric = (evaluate(name, idx, h) - evaluate(name, idx, -h)) / (2.0 * h)
        exact = float(analytic.get(name, np.zeros(arrays[name].shape))[idx])
        worst = max(worst, abs(exact - numeric) / max(floor, abs(numeric)))
    return worst


# parameters ---------------------------------------------------------------------------

class ParamGroup:
    """Mixin for frozen dataclasses whose fields are named parameter tensors."""

    @classmethod
    def from_tree(cls, tree: Mapping[str, Tensor], prefix: str):
        names = [f for f in cls.__dataclass_fields__]
        missing = [f"{prefix}.{n}" for n in names if f"{prefix}.{n}" not in tree]
        if missing:
            raise InputError(f"{cls.__name__}: missing parameters {missing}")
        return cls(**{n: tree[f"{prefix}.{n}"] for n in names})


def uniform_init(rng: np.random.Generator, shape: Tuple[int, ...], fan_in: int) -> np.ndarray:
    bound = 1.0 / np.sqrt(max(fan_in, 1))
    return rng.uniform(-bound, bound, size=shape)
