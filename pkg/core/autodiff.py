"""
Reverse-mode automatic differentiation for the ranker.
Holds the computation tape, the differentiable tensor operations and the
neural building blocks (GRU cell, two-layer perceptron, softmax, cosine).
"""

import logging
from dataclasses import dataclass
from typing import Callable, Dict, List, Optional, Sequence, Tuple, Union

import numpy as np

logger = logging.getLogger(__name__)

COSINE_EPS = 1e-12
LOG_CLAMP = 1e-12

ArrayLike = Union[np.ndarray, float, int]


class AutodiffError(Exception):
    """Base exception for tape and tensor errors."""
    pass


class ShapeError(AutodiffError):
    """Raised when operand shapes do not line up."""
    pass


class BackwardError(AutodiffError):
    """Raised when backward() is called on an invalid root or tape state."""
    pass


class Parameter:
    """
    A trainable array that outlives individual tapes.

    Gradients from every tape the parameter was bound to accumulate in
    ``grad`` until ``zero_grad`` is called.
    """

    def __init__(self, value: np.ndarray, name: str = ""):
        value = np.array(value)
        if value.ndim > 2:
            raise ShapeError(f"Parameter {name!r} has rank {value.ndim}, at most 2 supported")
        self.value = value
        self.grad = np.zeros_like(value)
        self.name = name

    @property
    def shape(self) -> Tuple[int, ...]:
        return self.value.shape

    def zero_grad(self):
        self.grad = np.zeros_like(self.value)

    def __repr__(self):
        return f"Parameter({self.name!r}, shape={self.shape})"


class Tensor:
    """A value recorded on a tape, with an optional gradient slot."""

    __slots__ = ("value", "grad", "tape", "node_id", "parents", "backward_fn", "source")

    def __init__(self, value: np.ndarray, tape: "Tape", node_id: int,
                 parents: Tuple["Tensor", ...] = (),
                 backward_fn: Optional[Callable[[np.ndarray], Sequence[Optional[np.ndarray]]]] = None,
                 source: Optional[Parameter] = None):
        self.value = value
        self.grad: Optional[np.ndarray] = None
        self.tape = tape
        self.node_id = node_id
        self.parents = parents
        self.backward_fn = backward_fn
        self.source = source

    @property
    def shape(self) -> Tuple[int, ...]:
        return self.value.shape

    @property
    def ndim(self) -> int:
        return self.value.ndim

    def numpy(self) -> np.ndarray:
        return self.value

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

    def __neg__(self):
        return scale(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    def __repr__(self):
        return f"Tensor(node={self.node_id}, shape={self.shape})"


class Tape:
    """
    Records operations in evaluation order so gradients can be replayed backwards.

    A tape with ``record=False`` only evaluates values; it is used for scoring
    with frozen parameters.
    """

    def __init__(self, dtype=np.float64, record: bool = True):
        self.dtype = np.dtype(dtype)
        self.record = record
        self._nodes: List[Tensor] = []
        self._bound: Dict[int, Tensor] = {}
        self._consumed = False
        self._next_id = 0

    def __len__(self):
        return len(self._nodes)

    def _new(self, value: np.ndarray, parents: Tuple[Tensor, ...] = (),
             backward_fn=None, source: Optional[Parameter] = None) -> Tensor:
        node = Tensor(value, self, self._next_id,
                      parents if self.record else (),
                      backward_fn if self.record else None,
                      source)
        self._next_id += 1
        if self.record:
            self._nodes.append(node)
        return node

    def constant(self, value: ArrayLike) -> Tensor:
        """Wrap an array that receives no gradient of interest."""
        return self._new(np.asarray(value, dtype=self.dtype))

    def param(self, parameter: Parameter) -> Tensor:
        """Bind a parameter to this tape; repeated binds return the same node."""
        key = id(parameter)
        node = self._bound.get(key)
        if node is None:
            node = self._new(np.asarray(parameter.value, dtype=self.dtype), source=parameter)
            self._bound[key] = node
        return node

    def backward(self, loss: Tensor):
        """
        Propagate d(loss)/d(node) through the tape and accumulate parameter gradients.

        Args:
            loss: Scalar tensor recorded on this tape

        Raises:
            BackwardError: If the root is not scalar, belongs to another tape,
                the tape was not recording, or backward already ran
        """
        if not self.record:
            raise BackwardError("Tape was created with record=False")
        if self._consumed:
            raise BackwardError("backward() already ran on this tape; call reset() first")
        if loss.tape is not self:
            raise BackwardError("Loss tensor belongs to a different tape")
        if loss.value.size != 1:
            raise BackwardError(f"Loss must be scalar, got shape {loss.shape}")

        self._consumed = True
        loss.grad = np.ones_like(loss.value)
        for node in reversed(self._nodes):
            if node.grad is None:
                continue
            if node.source is not None:
                node.source.grad = node.source.grad + node.grad.astype(node.source.grad.dtype)
            if node.backward_fn is None:
                continue
            parent_grads = node.backward_fn(node.grad)
            for parent, grad in zip(node.parents, parent_grads):
                if grad is None:
                    continue
                if parent.grad is None:
                    parent.grad = np.array(grad, dtype=self.dtype)
                else:
                    parent.grad = parent.grad + grad

    def reset(self):
        """Drop recorded nodes so the tape can be reused."""
        self._nodes.clear()
        self._bound.clear()
        self._consumed = False


# ---------------------------------------------------------------------------
# operations
# ---------------------------------------------------------------------------

def _tape_of(*operands) -> Tape:
    for operand in operands:
        if isinstance(operand, Tensor):
            return operand.tape
    raise AutodiffError("At least one operand must be a Tensor")


def _lift(tape: Tape, operand) -> Tensor:
    if isinstance(operand, Tensor):
        if operand.tape is not tape:
            raise AutodiffError("Operands recorded on different tapes")
        return operand
    return tape.constant(operand)


def _unbroadcast(grad: np.ndarray, shape: Tuple[int, ...]) -> np.ndarray:
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, size in enumerate(shape):
        if size == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad


def _check_broadcast(a: Tensor, b: Tensor, op: str):
    try:
        np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise ShapeError(f"{op}: shapes {a.shape} and {b.shape} do not broadcast")


def add(a, b) -> Tensor:
    tape = _tape_of(a, b)
    a, b = _lift(tape, a), _lift(tape, b)
    _check_broadcast(a, b, "add")

    def backward(g):
        return _unbroadcast(g, a.shape), _unbroadcast(g, b.shape)

    return tape._new(a.value + b.value, (a, b), backward)


def sub(a, b) -> Tensor:
    tape = _tape_of(a, b)
    a, b = _lift(tape, a), _lift(tape, b)
    _check_broadcast(a, b, "sub")

    def backward(g):
        return _unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)

    return tape._new(a.value - b.value, (a, b), backward)


def mul(a, b) -> Tensor:
    """Element-wise product with numpy broadcasting."""
    tape = _tape_of(a, b)
    a, b = _lift(tape, a), _lift(tape, b)
    _check_broadcast(a, b, "mul")

    def backward(g):
        return _unbroadcast(g * b.value, a.shape), _unbroadcast(g * a.value, b.shape)

    return tape._new(a.value * b.value, (a, b), backward)


def scale(a: Tensor, factor: float) -> Tensor:
    def backward(g):
        return (g * factor,)

    return a.tape._new(a.value * factor, (a,), backward)


def matmul(a, b) -> Tensor:
    """
    Matrix product following numpy semantics for operands of rank 1 or 2.

    Raises:
        ShapeError: If the inner dimensions differ
    """
    tape = _tape_of(a, b)
    a, b = _lift(tape, a), _lift(tape, b)
    if a.ndim == 0 or b.ndim == 0 or a.shape[-1] != b.shape[0]:
        raise ShapeError(f"matmul: shapes {a.shape} and {b.shape} are not aligned")
    av, bv = a.value, b.value

    def backward(g):
        if av.ndim == 2 and bv.ndim == 2:
            return g @ bv.T, av.T @ g
        if av.ndim == 2:
            return np.outer(g, bv), av.T @ g
        if bv.ndim == 2:
            return bv @ g, np.outer(av, g)
        return g * bv, g * av

    return tape._new(av @ bv, (a, b), backward)


def transpose(a: Tensor) -> Tensor:
    def backward(g):
        return (g.T,)

    return a.tape._new(a.value.T, (a,), backward)


def reshape(a: Tensor, shape: Tuple[int, ...]) -> Tensor:
    original = a.shape
    try:
        value = a.value.reshape(shape)
    except ValueError:
        raise ShapeError(f"reshape: cannot reshape {original} into {shape}")

    def backward(g):
        return (g.reshape(original),)

    return a.tape._new(value, (a,), backward)


def sigmoid(a: Tensor) -> Tensor:
    # split by sign so exp never overflows
    x = a.value
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)

    def backward(g):
        return (g * out * (1.0 - out),)

    return a.tape._new(out, (a,), backward)


def tanh(a: Tensor) -> Tensor:
    out = np.tanh(a.value)

    def backward(g):
        return (g * (1.0 - out * out),)

    return a.tape._new(out, (a,), backward)


def log(a: Tensor, floor: float = LOG_CLAMP) -> Tensor:
    """Natural log with the argument clamped from below at ``floor``."""
    clamped = np.maximum(a.value, floor)
    active = a.value > floor

    def backward(g):
        return (np.where(active, g / clamped, 0.0),)

    return a.tape._new(np.log(clamped), (a,), backward)


def sum_all(a: Tensor) -> Tensor:
    shape = a.shape

    def backward(g):
        return (np.broadcast_to(g, shape).copy(),)

    return a.tape._new(np.asarray(a.value.sum()), (a,), backward)


def concat(tensors: Sequence[Tensor]) -> Tensor:
    """Concatenate along the last axis."""
    if not tensors:
        raise ShapeError("concat: nothing to concatenate")
    tape = _tape_of(*tensors)
    parts = [_lift(tape, t) for t in tensors]
    lead = {p.shape[:-1] for p in parts}
    if len(lead) != 1:
        raise ShapeError(f"concat: leading shapes differ: {[p.shape for p in parts]}")
    widths = [p.shape[-1] for p in parts]
    bounds = np.cumsum([0] + widths)

    def backward(g):
        return tuple(g[..., bounds[i]:bounds[i + 1]] for i in range(len(parts)))

    return tape._new(np.concatenate([p.value for p in parts], axis=-1), tuple(parts), backward)


def stack(tensors: Sequence[Tensor]) -> Tensor:
    """Stack equal-shaped vectors into the rows of a matrix."""
    if not tensors:
        raise ShapeError("stack: nothing to stack")
    tape = _tape_of(*tensors)
    parts = [_lift(tape, t) for t in tensors]
    if len({p.shape for p in parts}) != 1 or parts[0].ndim != 1:
        raise ShapeError(f"stack: expected equal-length vectors, got {[p.shape for p in parts]}")

    def backward(g):
        return tuple(g[i] for i in range(len(parts)))

    return tape._new(np.stack([p.value for p in parts]), tuple(parts), backward)


def index(a: Tensor, i: int) -> Tensor:
    """Row ``i`` of a matrix or element ``i`` of a vector."""
    shape = a.shape

    def backward(g):
        full = np.zeros(shape, dtype=g.dtype)
        full[i] = g
        return (full,)

    return a.tape._new(np.array(a.value[i]), (a,), backward)


def softmax(scores: Tensor) -> Tensor:
    """
    Numerically stable softmax of a vector (max-subtracted before exp).
    """
    if scores.ndim != 1 or scores.shape[0] < 1:
        raise ShapeError(f"softmax: expected non-empty vector, got {scores.shape}")
    shifted = scores.value - scores.value.max()
    e = np.exp(shifted)
    out = e / e.sum()

    def backward(g):
        return (out * (g - np.dot(g, out)),)

    return scores.tape._new(out, (scores,), backward)


def cosine(x, y) -> Tensor:
    """
    Cosine similarity of two vectors; 0 when either norm is below 1e-12.
    """
    tape = _tape_of(x, y)
    x, y = _lift(tape, x), _lift(tape, y)
    if x.shape != y.shape or x.ndim != 1:
        raise ShapeError(f"cosine: expected equal-length vectors, got {x.shape} and {y.shape}")
    xv, yv = x.value, y.value
    nx, ny = np.linalg.norm(xv), np.linalg.norm(yv)
    if nx < COSINE_EPS or ny < COSINE_EPS:
        def backward_zero(g):
            return np.zeros_like(xv), np.zeros_like(yv)

        return tape._new(np.asarray(0.0, dtype=tape.dtype), (x, y), backward_zero)
    c = float(np.dot(xv, yv) / (nx * ny))

    def backward(g):
        gx = g * (yv / (nx * ny) - c * xv / (nx * nx))
        gy = g * (xv / (nx * ny) - c * yv / (ny * ny))
        return gx, gy

    return tape._new(np.asarray(c, dtype=tape.dtype), (x, y), backward)


def cosine_rows(u, rows) -> Tensor:
    """
    Cosine of vector ``u`` with every row of matrix ``rows``.

    Zero-norm rows (or a zero ``u``) score 0 and pass no gradient.
    """
    tape = _tape_of(u, rows)
    u, rows = _lift(tape, u), _lift(tape, rows)
    if u.ndim != 1 or rows.ndim != 2 or rows.shape[1] != u.shape[0]:
        raise ShapeError(f"cosine_rows: shapes {u.shape} and {rows.shape} are not aligned")
    uv, dv = u.value, rows.value
    nu = np.linalg.norm(uv)
    nd = np.linalg.norm(dv, axis=1)
    valid = (nd >= COSINE_EPS) & (nu >= COSINE_EPS)
    denom = np.where(valid, nu * nd, 1.0)
    out = np.where(valid, (dv @ uv) / denom, 0.0)

    def backward(g):
        gv = np.where(valid, g, 0.0)
        safe_nd = np.where(valid, nd, 1.0)
        safe_nu = nu if nu >= COSINE_EPS else 1.0
        gu = (gv / denom) @ dv - (gv * out).sum() * uv / (safe_nu * safe_nu)
        gd = np.outer(gv / denom, uv) - (gv * out / (safe_nd * safe_nd))[:, None] * dv
        return gu, gd

    return tape._new(out.astype(tape.dtype), (u, rows), backward)


def pairwise_logistic_loss(scores: Tensor, pairs: np.ndarray, weights: np.ndarray) -> Tensor:
    """
    Sum over pairs (i, j) of ``-weight * log(sigmoid(s_i - s_j))``.

    The log argument is clamped at 1e-12, so the per-pair loss is at most
    ``-log(1e-12)`` and a clamped pair passes no gradient.

    Args:
        scores: Vector of document scores
        pairs: Integer array of shape (P, 2), preferred document first
        weights: Non-negative weights of shape (P,)
    """
    pairs = np.asarray(pairs, dtype=int).reshape(-1, 2)
    weights = np.asarray(weights, dtype=scores.tape.dtype).reshape(-1)
    if pairs.shape[0] != weights.shape[0]:
        raise ShapeError(f"pairwise_logistic_loss: {pairs.shape[0]} pairs but {weights.shape[0]} weights")
    s = scores.value
    diff = s[pairs[:, 0]] - s[pairs[:, 1]]
    raw = np.logaddexp(0.0, -diff)
    cap = -np.log(LOG_CLAMP)
    active = raw < cap
    value = np.asarray((weights * np.minimum(raw, cap)).sum(), dtype=scores.tape.dtype)

    def backward(g):
        # d/d(diff) of -log(sigmoid(diff)) is -sigmoid(-diff)
        sig_neg = np.exp(-np.logaddexp(0.0, diff))
        coeff = np.where(active, -g * weights * sig_neg, 0.0)
        grad = np.zeros_like(s)
        np.add.at(grad, pairs[:, 0], coeff)
        np.add.at(grad, pairs[:, 1], -coeff)
        return (grad,)

    return scores.tape._new(value, (scores,), backward)


# ---------------------------------------------------------------------------
# neural primitives
# ---------------------------------------------------------------------------

def glorot_uniform(rng: np.random.Generator, rows: int, cols: int, dtype=np.float64) -> np.ndarray:
    """Uniform(-a, a) with a = sqrt(6 / (fan_in + fan_out))."""
    limit = np.sqrt(6.0 / (rows + cols))
    return rng.uniform(-limit, limit, size=(rows, cols)).astype(dtype)


def _apply(tape: Tape, weight: Parameter, x: Tensor) -> Tensor:
    w = tape.param(weight)
    if x.ndim == 1:
        return matmul(w, x)
    return matmul(x, transpose(w))


def _with_bias(tape: Tape, value: Tensor, bias: Optional[Parameter]) -> Tensor:
    if bias is None:
        return value
    return add(value, tape.param(bias))


@dataclass
class GruParams:
    """
    Gate and candidate weights of one GRU layer.

    ``W_*`` map the input (h x in), ``V_*`` map the previous state (h x h).
    Biases are optional; they are ``None`` in strict mode.
    """
    W_r: Parameter
    V_r: Parameter
    W_z: Parameter
    V_z: Parameter
    W: Parameter
    V: Parameter
    b_r: Optional[Parameter] = None
    b_z: Optional[Parameter] = None
    b: Optional[Parameter] = None

    @property
    def n_in(self) -> int:
        return self.W.shape[1]

    @property
    def n_hidden(self) -> int:
        return self.W.shape[0]

    @classmethod
    def create(cls, n_in: int, n_hidden: int, rng: Optional[np.random.Generator] = None,
               use_bias: bool = True, dtype=np.float64, prefix: str = "gru") -> "GruParams":
        """Glorot-initialised weights when ``rng`` is given, all zeros otherwise."""
        def weight(name, rows, cols):
            if rng is None:
                value = np.zeros((rows, cols), dtype=dtype)
            else:
                value = glorot_uniform(rng, rows, cols, dtype)
            return Parameter(value, f"{prefix}.{name}")

        def bias(name):
            return Parameter(np.zeros(n_hidden, dtype=dtype), f"{prefix}.{name}") if use_bias else None

        return cls(
            W_r=weight("W_r", n_hidden, n_in), V_r=weight("V_r", n_hidden, n_hidden),
            W_z=weight("W_z", n_hidden, n_in), V_z=weight("V_z", n_hidden, n_hidden),
            W=weight("W", n_hidden, n_in), V=weight("V", n_hidden, n_hidden),
            b_r=bias("b_r"), b_z=bias("b_z"), b=bias("b"),
        )

    def parameters(self) -> List[Parameter]:
        ordered = [self.W_r, self.V_r, self.b_r, self.W_z, self.V_z, self.b_z, self.W, self.V, self.b]
        return [p for p in ordered if p is not None]


def gru_step(tape: Tape, p: GruParams, x: Tensor, h_prev: Tensor) -> Tensor:
    """
    One GRU update; works on a single vector or on a batch of rows.

        r = sigmoid(W_r x + V_r h_prev + b_r)
        z = sigmoid(W_z x + V_z h_prev + b_z)
        c = tanh(W x + V (r * h_prev) + b)
        h = (1 - z) * h_prev + z * c

    Raises:
        ShapeError: If x or h_prev do not match the layer widths
    """
    if x.shape[-1] != p.n_in or h_prev.shape[-1] != p.n_hidden or x.ndim != h_prev.ndim:
        raise ShapeError(
            f"gru_step: layer is {p.n_in}->{p.n_hidden}, got x {x.shape} and h {h_prev.shape}"
        )
    r = sigmoid(_with_bias(tape, add(_apply(tape, p.W_r, x), _apply(tape, p.V_r, h_prev)), p.b_r))
    z = sigmoid(_with_bias(tape, add(_apply(tape, p.W_z, x), _apply(tape, p.V_z, h_prev)), p.b_z))
    c = tanh(_with_bias(tape, add(_apply(tape, p.W, x), _apply(tape, p.V, mul(r, h_prev))), p.b))
    return add(mul(sub(1.0, z), h_prev), mul(z, c))


@dataclass
class MlpParams:
    """Two-layer perceptron: A2 tanh(A1 x + b1) + b2. Biases are ``None`` in strict mode."""
    A1: Parameter
    A2: Parameter
    b1: Optional[Parameter] = None
    b2: Optional[Parameter] = None

    @property
    def n_in(self) -> int:
        return self.A1.shape[1]

    @property
    def n_out(self) -> int:
        return self.A2.shape[0]

    @classmethod
    def create(cls, n_in: int, n_hidden: int, n_out: int, rng: Optional[np.random.Generator] = None,
               use_bias: bool = True, dtype=np.float64, prefix: str = "mlp") -> "MlpParams":
        def weight(name, rows, cols):
            if rng is None:
                value = np.zeros((rows, cols), dtype=dtype)
            else:
                value = glorot_uniform(rng, rows, cols, dtype)
            return Parameter(value, f"{prefix}.{name}")

        def bias(name, size):
            return Parameter(np.zeros(size, dtype=dtype), f"{prefix}.{name}") if use_bias else None

        return cls(
            A1=weight("A1", n_hidden, n_in), A2=weight("A2", n_out, n_hidden),
            b1=bias("b1", n_hidden), b2=bias("b2", n_out),
        )

    def parameters(self) -> List[Parameter]:
        return [p for p in (self.A1, self.b1, self.A2, self.b2) if p is not None]


def mlp_forward(tape: Tape, p: MlpParams, x: Tensor) -> Tensor:
    """Apply the perceptron to a vector or to each row of a matrix."""
    if x.shape[-1] != p.n_in:
        raise ShapeError(f"mlp_forward: expects width {p.n_in}, got {x.shape}")
    hidden = tanh(_with_bias(tape, _apply(tape, p.A1, x), p.b1))
    return _with_bias(tape, _apply(tape, p.A2, hidden), p.b2)
