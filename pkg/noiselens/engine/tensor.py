"""Dense float32 tensors with tape-based reverse-mode differentiation.

Operations executed inside ``with Tape() as tape:`` are recorded in order; calling
``backward(loss, tape)`` replays the record in reverse and populates ``grad`` on every
``requires_grad`` tensor that the loss depends on. Outside a tape no graph is kept.
"""
import threading

import numpy as np

from noiselens.core.exceptions import DomainError, ShapeError, TapeError

DTYPE = np.float32

_local = threading.local()


def _tape_stack():
    stack = getattr(_local, "stack", None)
    if stack is None:
        stack = _local.stack = []
    return stack


def active_tape():
    """Return the innermost tape entered on this thread, or None."""
    stack = _tape_stack()
    return stack[-1] if stack else None


class TapeRecord:
    __slots__ = ("op", "inputs", "output", "backward_fn")

    def __init__(self, op, inputs, output, backward_fn):
        self.op = op
        self.inputs = inputs
        self.output = output
        self.backward_fn = backward_fn


class Tape:
    """Ordered record of executed differentiable operations.

    Records are appended as operations run, so every operation's inputs were produced
    before it (topological order by construction). One tape is meant to live for one
    training step and be discarded after ``backward``.
    """

    def __init__(self):
        self.records = []
        self._outputs = set()

    def record(self, op, inputs, output, backward_fn):
        self.records.append(TapeRecord(op, tuple(inputs), output, backward_fn))
        self._outputs.add(id(output))

    def __contains__(self, tensor):
        return id(tensor) in self._outputs

    def __len__(self):
        return len(self.records)

    def __enter__(self):
        _tape_stack().append(self)
        return self

    def __exit__(self, exc_type, exc, tb):
        stack = _tape_stack()
        if stack and stack[-1] is self:
            stack.pop()
        return False


class Tensor:
    """n-dimensional float32 array with optional gradient-tape participation."""

    __slots__ = ("data", "requires_grad", "grad", "name")
    __array_priority__ = 100

    def __init__(self, data, requires_grad=False, name=None):
        array = np.array(data, dtype=DTYPE)
        if any(dim < 1 for dim in array.shape):
            raise ShapeError(f"Tensor dimensions must be >= 1, got {array.shape}")
        self.data = np.ascontiguousarray(array)
        self.requires_grad = bool(requires_grad)
        self.grad = None
        self.name = name

    @classmethod
    def _wrap(cls, array, requires_grad=False):
        tensor = cls.__new__(cls)
        tensor.data = np.ascontiguousarray(np.asarray(array, dtype=DTYPE))
        tensor.requires_grad = requires_grad
        tensor.grad = None
        tensor.name = None
        return tensor

    # -- introspection --------------------------------------------------

    @property
    def shape(self):
        return self.data.shape

    @property
    def size(self):
        return self.data.size

    @property
    def ndim(self):
        return self.data.ndim

    def numpy(self):
        return self.data

    def item(self):
        if self.size != 1:
            raise ShapeError(f"item() needs a single-element tensor, got shape {self.shape}")
        return float(self.data.reshape(()))

    def detach(self):
        return Tensor._wrap(self.data.copy())

    def zero_grad(self):
        self.grad = None

    def __repr__(self):
        flag = ", requires_grad=True" if self.requires_grad else ""
        label = f", name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}{flag}{label})"

    # -- arithmetic -----------------------------------------------------

    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(other, self)

    def __sub__(self, other):
        return subtract(self, other)

    def __rsub__(self, other):
        return subtract(other, self)

    def __mul__(self, other):
        return multiply(self, other)

    def __rmul__(self, other):
        return multiply(other, self)

    def __truediv__(self, other):
        return divide(self, other)

    def __rtruediv__(self, other):
        return divide(other, self)

    def __neg__(self):
        return negate(self)

    def __getitem__(self, index):
        return getitem(self, index)

    def exp(self):
        return exponential(self)

    def log(self):
        return logarithm(self)

    def tanh(self):
        return tanh(self)

    def sigmoid(self):
        return sigmoid(self)

    def relu(self):
        return relu(self)

    def leaky_relu(self, slope=0.2):
        return leaky_relu(self, slope)

    def abs(self):
        return absolute(self)

    def sqrt(self):
        return sqrt(self)

    def square(self):
        return square(self)

    def clip(self, lo, hi):
        return clip(self, lo, hi)

    def sum(self, axis=None, keepdims=False):
        return reduce_sum(self, axis, keepdims)

    def mean(self, axis=None, keepdims=False):
        return reduce_mean(self, axis, keepdims)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, *axes):
        if len(axes) == 1 and isinstance(axes[0], (tuple, list)):
            axes = tuple(axes[0])
        return transpose(self, axes or None)


def as_tensor(value):
    """Wrap plain numbers/arrays as constant tensors; pass tensors through."""
    return value if isinstance(value, Tensor) else Tensor(value)


def make_result(op, array, inputs, backward_fn):
    """Create an op output and record it on the active tape when gradients are needed."""
    requires = any(t.requires_grad for t in inputs)
    out = Tensor._wrap(array, requires)
    tape = active_tape()
    if requires and tape is not None:
        tape.record(op, inputs, out, backward_fn)
    return out


# -- elementwise ------------------------------------------------------------


def _operands(a, b):
    if a.shape == b.shape:
        return a.data, b.data
    if b.size == 1:
        return a.data, b.data.reshape(())
    if a.size == 1:
        return a.data.reshape(()), b.data
    raise ShapeError(f"Shapes {a.shape} and {b.shape} are neither equal nor scalar-vs-tensor")


def _unbroadcast(grad, tensor):
    if grad.shape == tensor.shape:
        return grad
    return np.asarray(grad.sum(), dtype=DTYPE).reshape(tensor.shape)


def add(a, b):
    a, b = as_tensor(a), as_tensor(b)
    x, y = _operands(a, b)
    return make_result(
        "add", x + y, (a, b), lambda g: (_unbroadcast(g, a), _unbroadcast(g, b))
    )


def subtract(a, b):
    a, b = as_tensor(a), as_tensor(b)
    x, y = _operands(a, b)
    return make_result(
        "subtract", x - y, (a, b), lambda g: (_unbroadcast(g, a), _unbroadcast(-g, b))
    )


def multiply(a, b):
    a, b = as_tensor(a), as_tensor(b)
    x, y = _operands(a, b)
    return make_result(
        "multiply",
        x * y,
        (a, b),
        lambda g: (_unbroadcast(g * y, a), _unbroadcast(g * x, b)),
    )


def divide(a, b):
    a, b = as_tensor(a), as_tensor(b)
    x, y = _operands(a, b)
    if np.any(y == 0):
        raise DomainError("Division by zero")
    out = x / y
    return make_result(
        "divide",
        out,
        (a, b),
        lambda g: (_unbroadcast(g / y, a), _unbroadcast(-g * out / y, b)),
    )


def negate(a):
    a = as_tensor(a)
    return make_result("negate", -a.data, (a,), lambda g: (-g,))


def exponential(a):
    a = as_tensor(a)
    out = np.exp(a.data)
    return make_result("exponential", out, (a,), lambda g: (g * out,))


def logarithm(a):
    a = as_tensor(a)
    if np.any(a.data <= 0):
        raise DomainError("Logarithm of a non-positive value; clamp the argument first")
    x = a.data
    return make_result("logarithm", np.log(x), (a,), lambda g: (g / x,))


def tanh(a):
    a = as_tensor(a)
    out = np.tanh(a.data)
    return make_result("tanh", out, (a,), lambda g: (g * (1.0 - out * out),))


def _sigmoid(x):
    return (0.5 * (1.0 + np.tanh(0.5 * x))).astype(DTYPE)


def sigmoid(a):
    a = as_tensor(a)
    out = _sigmoid(a.data)
    return make_result("sigmoid", out, (a,), lambda g: (g * out * (1.0 - out),))


def leaky_relu(a, slope=0.2):
    a = as_tensor(a)
    positive = a.data > 0
    out = np.where(positive, a.data, a.data * DTYPE(slope))
    scale = np.where(positive, DTYPE(1.0), DTYPE(slope))
    return make_result("leaky_relu", out, (a,), lambda g: (g * scale,))


def relu(a):
    a = as_tensor(a)
    positive = a.data > 0
    return make_result(
        "relu", np.where(positive, a.data, DTYPE(0.0)), (a,), lambda g: (g * positive,)
    )


def absolute(a):
    a = as_tensor(a)
    sign = np.sign(a.data)
    return make_result("absolute", np.abs(a.data), (a,), lambda g: (g * sign,))


def sqrt(a):
    a = as_tensor(a)
    if np.any(a.data < 0):
        raise DomainError("Square root of a negative value")
    out = np.sqrt(a.data)
    safe = np.maximum(out, DTYPE(1e-12))
    return make_result("sqrt", out, (a,), lambda g: (g * 0.5 / safe,))


def square(a):
    a = as_tensor(a)
    x = a.data
    return make_result("square", x * x, (a,), lambda g: (g * 2.0 * x,))


def softplus(a):
    """log(1 + exp(a)), evaluated without overflow."""
    a = as_tensor(a)
    x = a.data
    out = np.maximum(x, 0) + np.log1p(np.exp(-np.abs(x)))
    slope = _sigmoid(x)
    return make_result("softplus", out, (a,), lambda g: (g * slope,))


def clip(a, lo, hi):
    """Clamp to [lo, hi]; the gradient is zero where the clamp is active."""
    a = as_tensor(a)
    x = a.data
    inside = (x >= lo) & (x <= hi)
    return make_result(
        "clip", np.clip(x, DTYPE(lo), DTYPE(hi)), (a,), lambda g: (g * inside,)
    )


_UNARY = {
    "negate": negate,
    "exponential": exponential,
    "logarithm": logarithm,
    "tanh": tanh,
    "sigmoid": sigmoid,
    "leaky_relu": leaky_relu,
    "relu": relu,
    "abs": absolute,
    "sqrt": sqrt,
    "square": square,
    "softplus": softplus,
    "clip": clip,
}

_BINARY = {
    "add": add,
    "subtract": subtract,
    "multiply": multiply,
    "divide": divide,
}


def elementwise(kind, a, b=None, **params):
    """Apply an elementwise operation by name.

    Args:
        kind: One of the binary kinds (add, subtract, multiply, divide) or unary kinds
            (negate, exponential, logarithm, tanh, sigmoid, leaky_relu, relu, abs, sqrt,
            square, softplus, clip).
        a: First operand.
        b: Second operand for binary kinds.
        **params: Extra parameters, e.g. ``slope`` for leaky_relu or ``lo``/``hi`` for clip.

    Returns:
        Tensor: The result, shaped like the non-scalar operand.
    """
    if kind in _BINARY:
        if b is None:
            raise ShapeError(f"'{kind}' needs two operands")
        return _BINARY[kind](a, b)
    if kind in _UNARY:
        return _UNARY[kind](a, **params)
    raise ValueError(f"Unknown elementwise kind: {kind}")


# -- reductions and structure -----------------------------------------------


def _normalize_axes(axis, ndim):
    if axis is None:
        return tuple(range(ndim))
    if isinstance(axis, int):
        axis = (axis,)
    return tuple(sorted(ax % ndim for ax in axis))


def _expand_grad(g, shape, axes):
    kept = tuple(1 if i in axes else dim for i, dim in enumerate(shape))
    return np.ascontiguousarray(np.broadcast_to(g.reshape(kept), shape))


def reduce_sum(a, axis=None, keepdims=False):
    a = as_tensor(a)
    axes = _normalize_axes(axis, a.ndim)
    out = np.asarray(a.data.sum(axis=axes, keepdims=keepdims), dtype=DTYPE)
    return make_result(
        "sum", out, (a,), lambda g: (_expand_grad(g, a.shape, axes),)
    )


def reduce_mean(a, axis=None, keepdims=False):
    a = as_tensor(a)
    axes = _normalize_axes(axis, a.ndim)
    count = int(np.prod([a.shape[ax] for ax in axes])) if axes else 1
    out = np.asarray(a.data.mean(axis=axes, keepdims=keepdims), dtype=DTYPE)
    return make_result(
        "mean", out, (a,), lambda g: (_expand_grad(g, a.shape, axes) / DTYPE(count),)
    )


def reshape(a, shape):
    a = as_tensor(a)
    try:
        out = a.data.reshape(shape)
    except ValueError as e:
        raise ShapeError(str(e)) from e
    return make_result("reshape", out, (a,), lambda g: (g.reshape(a.shape),))


def transpose(a, axes=None):
    a = as_tensor(a)
    axes = tuple(reversed(range(a.ndim))) if axes is None else tuple(axes)
    inverse = tuple(np.argsort(axes))
    return make_result(
        "transpose", a.data.transpose(axes), (a,), lambda g: (g.transpose(inverse),)
    )


def getitem(a, index):
    a = as_tensor(a)
    out = np.array(a.data[index], dtype=DTYPE)
    if out.ndim and min(out.shape) < 1:
        raise ShapeError(f"Index {index!r} selects an empty slice of {a.shape}")

    parts = index if isinstance(index, tuple) else (index,)
    basic = all(
        part is None or part is Ellipsis or isinstance(part, (int, np.integer, slice))
        for part in parts
    )

    def backward_fn(g):
        full = np.zeros(a.shape, dtype=DTYPE)
        if basic:
            full[index] += g
        else:
            np.add.at(full, index, g)
        return (full,)

    return make_result("getitem", out, (a,), backward_fn)


def concat(tensors, axis=0):
    tensors = [as_tensor(t) for t in tensors]
    try:
        out = np.concatenate([t.data for t in tensors], axis=axis)
    except ValueError as e:
        raise ShapeError(str(e)) from e
    bounds = np.cumsum([t.shape[axis] for t in tensors])[:-1]

    def backward_fn(g):
        return tuple(np.ascontiguousarray(part) for part in np.split(g, bounds, axis=axis))

    return make_result("concat", out, tensors, backward_fn)


# -- backward ---------------------------------------------------------------


def backward(loss, tape=None):
    """Populate ``grad`` on every requires_grad tensor reachable from ``loss``.

    Gradients accumulate additively: a tensor used several times receives the sum of
    its contributions, and leaf tensors that already hold a gradient are added to.

    Args:
        loss: Scalar tensor produced on ``tape``.
        tape: Tape that recorded the computation; defaults to the active tape.

    Raises:
        TapeError: If the loss is not a scalar or was not produced on the tape.
    """
    tape = tape if tape is not None else active_tape()
    if loss.size != 1:
        raise TapeError(f"Loss must be a scalar, got shape {loss.shape}")
    if tape is None or loss not in tape:
        raise TapeError("Loss was not produced on the given tape")

    pending = {id(loss): np.ones(loss.shape, dtype=DTYPE)}
    leaves = {}
    for record in reversed(tape.records):
        grad = pending.pop(id(record.output), None)
        if grad is None:
            continue
        out = record.output
        out.grad = grad if out.grad is None else out.grad + grad
        for tensor, tensor_grad in zip(record.inputs, record.backward_fn(grad)):
            if tensor_grad is None or not tensor.requires_grad:
                continue
            key = id(tensor)
            if key in pending:
                pending[key] = pending[key] + tensor_grad
            else:
                pending[key] = np.asarray(tensor_grad, dtype=DTYPE)
                leaves[key] = tensor

    for key, grad in pending.items():
        tensor = leaves[key]
        tensor.grad = grad if tensor.grad is None else tensor.grad + grad
