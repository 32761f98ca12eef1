"""
Dense 2-D numerics with tape-based reverse-mode differentiation.

Every value is a float64 numpy array with exactly two dimensions. A `Tape`
records nodes in creation order; `backward` walks that order in reverse, so
gradient accumulation order is fixed and results are bit-reproducible.
"""
from __future__ import annotations

from typing import Callable, Dict, List, Optional, Sequence, Tuple

import numpy as np

from .errors import NumericError, ShapeError

Tensor2D = np.ndarray
BackwardFn = Callable[[np.ndarray], Sequence[Optional[np.ndarray]]]

ELEMENTWISE_KINDS = ("add", "sub", "mul", "scale", "exp", "relu", "sigmoid", "tanh")
REDUCE_KINDS = ("sum", "mean", "weighted_row_sum")


def as_tensor(values) -> Tensor2D:
    """Coerce scalars, rows and matrices to a float64 2-D array."""
    array = np.asarray(values, dtype=np.float64)
    if array.ndim == 0:
        return array.reshape(1, 1)
    if array.ndim == 1:
        return array.reshape(1, -1)
    if array.ndim != 2:
        raise ShapeError(f"expected a 2-D tensor, got {array.ndim} dimensions")
    return array


def _shape_str(shape: Tuple[int, ...]) -> str:
    return "x".join(str(dim) for dim in shape)


class Node:
    __slots__ = ("tape", "index", "value", "op", "parents", "grad", "name", "requires_grad", "_backward")

    def __init__(
        self,
        tape: "Tape",
        value: Tensor2D,
        op: str,
        parents: Tuple["Node", ...] = (),
        backward: Optional[BackwardFn] = None,
        name: Optional[str] = None,
        requires_grad: bool = False,
    ):
        self.tape = tape
        self.index = len(tape.nodes)
        self.value = value
        self.op = op
        self.parents = parents
        self.grad: Optional[Tensor2D] = None
        self.name = name
        self.requires_grad = requires_grad
        self._backward = backward

    @property
    def shape(self) -> Tuple[int, int]:
        return self.value.shape

    def __repr__(self):
        label = f" {self.name}" if self.name else ""
        return f"Node({self.op}{label}, shape={_shape_str(self.shape)})"


class Tape:
    """Compute graph recorded in creation order (a valid topological order)."""

    def __init__(self):
        self.nodes: List[Node] = []

    def __len__(self):
        return len(self.nodes)

    def constant(self, value) -> Node:
        return self._append(Node(self, as_tensor(value), "const"))

    def variable(self, value, name: Optional[str] = None) -> Node:
        return self._append(Node(self, as_tensor(value), "var", name=name, requires_grad=True))

    def record(self, value: Tensor2D, op: str, parents: Sequence[Node], backward: BackwardFn) -> Node:
        parents = tuple(parents)
        for parent in parents:
            if parent.tape is not self:
                raise NumericError(f"{op}: operand belongs to a different tape")
        requires_grad = any(parent.requires_grad for parent in parents)
        node = Node(
            self,
            value,
            op,
            parents=parents,
            backward=backward if requires_grad else None,
            requires_grad=requires_grad,
        )
        return self._append(node)

    def variables(self) -> List[Node]:
        return [node for node in self.nodes if node.op == "var"]

    def _append(self, node: Node) -> Node:
        self.nodes.append(node)
        return node


ComputeGraph = Tape


def _check_node(x: Node, op: str) -> None:
    if not isinstance(x, Node):
        raise NumericError(f"{op}: expected a Node, got {type(x).__name__}")


def _broadcast_shape(a: Node, b: Node, op: str) -> Tuple[int, int]:
    _check_node(a, op)
    _check_node(b, op)
    try:
        return np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise ShapeError(
            f"{op}: shapes {_shape_str(a.shape)} and {_shape_str(b.shape)} are not conformable"
        ) from None


def _unbroadcast(grad: np.ndarray, shape: Tuple[int, int]) -> np.ndarray:
    if grad.shape == shape:
        return grad
    axes = tuple(axis for axis in range(2) if shape[axis] == 1 and grad.shape[axis] != 1)
    return grad.sum(axis=axes, keepdims=True).reshape(shape)


# ---- linear algebra ----

def matmul(a: Node, b: Node) -> Node:
    _check_node(a, "matmul")
    _check_node(b, "matmul")
    if a.shape[1] != b.shape[0]:
        raise ShapeError(
            f"matmul: inner dimensions disagree ({_shape_str(a.shape)} x {_shape_str(b.shape)})"
        )
    a_value, b_value = a.value, b.value

    def backward(g):
        return g @ b_value.T, a_value.T @ g

    return a.tape.record(a_value @ b_value, "matmul", (a, b), backward)


def transpose(x: Node) -> Node:
    _check_node(x, "transpose")
    return x.tape.record(x.value.T.copy(), "transpose", (x,), lambda g: (g.T,))


def concat_cols(a: Node, b: Node) -> Node:
    _check_node(a, "concat_cols")
    _check_node(b, "concat_cols")
    if a.shape[0] != b.shape[0]:
        raise ShapeError(
            f"concat_cols: row counts disagree ({_shape_str(a.shape)} vs {_shape_str(b.shape)})"
        )
    split = a.shape[1]

    def backward(g):
        return g[:, :split], g[:, split:]

    return a.tape.record(np.concatenate([a.value, b.value], axis=1), "concat_cols", (a, b), backward)


# ---- elementwise ----

def add(a: Node, b: Node) -> Node:
    _broadcast_shape(a, b, "add")
    a_shape, b_shape = a.shape, b.shape
    return a.tape.record(
        a.value + b.value,
        "add",
        (a, b),
        lambda g: (_unbroadcast(g, a_shape), _unbroadcast(g, b_shape)),
    )


def sub(a: Node, b: Node) -> Node:
    _broadcast_shape(a, b, "sub")
    a_shape, b_shape = a.shape, b.shape
    return a.tape.record(
        a.value - b.value,
        "sub",
        (a, b),
        lambda g: (_unbroadcast(g, a_shape), _unbroadcast(-g, b_shape)),
    )


def mul(a: Node, b: Node) -> Node:
    _broadcast_shape(a, b, "mul")
    a_value, b_value = a.value, b.value

    def backward(g):
        return _unbroadcast(g * b_value, a_value.shape), _unbroadcast(g * a_value, b_value.shape)

    return a.tape.record(a_value * b_value, "mul", (a, b), backward)


def scale(x: Node, factor: float) -> Node:
    _check_node(x, "scale")
    factor = float(factor)
    return x.tape.record(x.value * factor, "scale", (x,), lambda g: (g * factor,))


def exp(x: Node) -> Node:
    _check_node(x, "exp")
    out = np.exp(x.value)
    return x.tape.record(out, "exp", (x,), lambda g: (g * out,))


def relu(x: Node) -> Node:
    _check_node(x, "relu")
    # Subgradient at exactly zero is zero.
    active = x.value > 0.0
    return x.tape.record(np.where(active, x.value, 0.0), "relu", (x,), lambda g: (g * active,))


def _stable_sigmoid(values: np.ndarray) -> np.ndarray:
    out = np.empty_like(values)
    positive = values >= 0
    out[positive] = 1.0 / (1.0 + np.exp(-values[positive]))
    exp_values = np.exp(values[~positive])
    out[~positive] = exp_values / (1.0 + exp_values)
    return out


def sigmoid(x: Node) -> Node:
    _check_node(x, "sigmoid")
    out = _stable_sigmoid(x.value)
    return x.tape.record(out, "sigmoid", (x,), lambda g: (g * out * (1.0 - out),))


def tanh(x: Node) -> Node:
    _check_node(x, "tanh")
    out = np.tanh(x.value)
    return x.tape.record(out, "tanh", (x,), lambda g: (g * (1.0 - out * out),))


_UNARY = {"exp": exp, "relu": relu, "sigmoid": sigmoid, "tanh": tanh}
_BINARY = {"add": add, "sub": sub, "mul": mul}


def elementwise(kind: str, *inputs: Node, factor: Optional[float] = None) -> Node:
    """Dispatch an entrywise operation by name."""
    if kind in _UNARY:
        if len(inputs) != 1:
            raise NumericError(f"{kind} takes one input, got {len(inputs)}")
        return _UNARY[kind](inputs[0])
    if kind in _BINARY:
        if len(inputs) != 2:
            raise NumericError(f"{kind} takes two inputs, got {len(inputs)}")
        return _BINARY[kind](*inputs)
    if kind == "scale":
        if len(inputs) != 1 or factor is None:
            raise NumericError("scale takes one input and a factor")
        return scale(inputs[0], factor)
    raise NumericError(f"unknown elementwise op '{kind}'")


# ---- normalization and reductions ----

def softmax_rows(x: Node) -> Node:
    """Softmax along a vector: down a column vector, otherwise across each row."""
    _check_node(x, "softmax_rows")
    axis = 0 if x.shape[1] == 1 else 1
    shifted = x.value - x.value.max(axis=axis, keepdims=True)
    exps = np.exp(shifted)
    out = exps / exps.sum(axis=axis, keepdims=True)

    def backward(g):
        return (out * (g - (g * out).sum(axis=axis, keepdims=True)),)

    return x.tape.record(out, "softmax", (x,), backward)


def reduce_sum(x: Node) -> Node:
    _check_node(x, "sum")
    shape = x.shape
    return x.tape.record(
        np.array([[x.value.sum()]]),
        "sum",
        (x,),
        lambda g: (np.full(shape, g[0, 0]),),
    )


def reduce_mean(x: Node) -> Node:
    _check_node(x, "mean")
    shape = x.shape
    count = float(x.value.size)
    if count == 0:
        raise ShapeError("mean: empty tensor")
    return x.tape.record(
        np.array([[x.value.sum() / count]]),
        "mean",
        (x,),
        lambda g: (np.full(shape, g[0, 0] / count),),
    )


def weighted_row_sum(x: Node, weights: Node) -> Node:
    """Return the 1xD row sum_i w_i * x_i for an NxD x and Nx1 weights."""
    _check_node(x, "weighted_row_sum")
    _check_node(weights, "weighted_row_sum")
    if weights.shape != (x.shape[0], 1):
        raise ShapeError(
            f"weighted_row_sum: weights {_shape_str(weights.shape)} do not match {x.shape[0]} rows"
        )
    x_value, w_value = x.value, weights.value

    def backward(g):
        return w_value @ g, x_value @ g.T

    return x.tape.record(w_value.T @ x_value, "weighted_row_sum", (x, weights), backward)


def reduce(kind: str, x: Node, weights: Optional[Node] = None) -> Node:
    if kind == "sum":
        return reduce_sum(x)
    if kind == "mean":
        return reduce_mean(x)
    if kind == "weighted_row_sum":
        if weights is None:
            raise NumericError("weighted_row_sum requires weights")
        return weighted_row_sum(x, weights)
    raise NumericError(f"unknown reduction '{kind}'")


# ---- regularization ----

def dropout(x: Node, rate: float, mode: str, rng: Optional[np.random.Generator] = None) -> Node:
    """Inverted dropout; identity in eval mode or at rate 0."""
    _check_node(x, "dropout")
    if not (0.0 <= rate < 1.0):
        raise NumericError(f"dropout rate must lie in [0, 1), got {rate}")
    if mode not in ("train", "eval"):
        raise NumericError(f"dropout mode must be 'train' or 'eval', got '{mode}'")
    if mode == "eval" or rate == 0.0:
        return x
    if rng is None:
        raise NumericError("dropout in train mode needs a seeded random stream")
    mask = (rng.random(x.shape) >= rate) / (1.0 - rate)
    return x.tape.record(x.value * mask, "dropout", (x,), lambda g: (g * mask,))


# ---- reverse pass ----

def backward(tape: Tape, root: Node) -> Dict[str, Tensor2D]:
    """
    Accumulate d(root)/d(node) into every node that requires gradients.

    Returns gradients of the named variables on the tape; variables the root
    does not depend on get zero gradients.
    """
    _check_node(root, "backward")
    if root.tape is not tape:
        raise NumericError("backward: root belongs to a different tape")
    if root.shape != (1, 1):
        raise ShapeError(f"backward: root must be 1x1, got {_shape_str(root.shape)}")

    for node in tape.nodes:
        node.grad = None
    root.grad = np.ones((1, 1))

    for node in reversed(tape.nodes[: root.index + 1]):
        if node.grad is None or node._backward is None:
            continue
        parent_grads = node._backward(node.grad)
        for parent, parent_grad in zip(node.parents, parent_grads):
            if parent_grad is None or not parent.requires_grad:
                continue
            if parent.grad is None:
                parent.grad = np.array(parent_grad, dtype=np.float64)
            else:
                parent.grad = parent.grad + parent_grad

    grads: Dict[str, Tensor2D] = {}
    for node in tape.variables():
        if node.name is None:
            continue
        grads[node.name] = node.grad if node.grad is not None else np.zeros_like(node.value)
    return grads

