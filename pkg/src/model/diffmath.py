"""Differentiable numerical core.

Dense float64 matrices wrapped in `Node`s that remember the primitive that
produced them. `backward` replays the recorded adjoints in reverse creation
order, which is a valid reverse topological order because a node can only be
built from nodes that already exist.
"""

import itertools
from collections.abc import Callable, Sequence

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view


class DiffMathError(Exception):
    """Base error for the differentiable core."""
    pass


class DimensionError(DiffMathError):
    """Raised when operand shapes are incompatible."""
    pass


class ContractError(DiffMathError):
    """Raised when a caller breaks an operation's precondition."""
    pass


class ConvolutionConfigError(DiffMathError):
    """Raised when a kernel cannot be applied to the given input."""
    pass


class NonFiniteEvaluationError(DiffMathError):
    """Raised when a checked function evaluates to NaN or Inf."""
    pass


_node_ids = itertools.count()


def as_array2(value) -> np.ndarray:
    """Coerce scalars, vectors and matrices to a 2-D float64 array (copied)."""
    arr = np.array(value, dtype=np.float64)
    if arr.ndim == 0:
        return arr.reshape(1, 1)
    if arr.ndim == 1:
        return arr.reshape(1, -1)
    if arr.ndim != 2:
        raise DimensionError(f"Expected at most 2 dimensions, got shape {arr.shape}")
    return arr


class Node:
    """A value in the computation graph.

    Leaves created with `leaf()` receive gradients; constants do not. Values
    are read-only once produced so they can be shared between threads.
    """

    __slots__ = ("value", "grad", "op", "parents", "requires_grad", "name", "_vjp", "_id")

    def __init__(
        self,
        value: np.ndarray,
        parents: tuple = (),
        vjp: Callable | None = None,
        op: str = "const",
        requires_grad: bool = False,
        name: str | None = None,
    ):
        value.flags.writeable = False
        self.value = value
        self.grad: np.ndarray | None = None
        self.op = op
        self.parents = parents
        self.requires_grad = requires_grad
        self.name = name
        self._vjp = vjp
        self._id = next(_node_ids)

    @property
    def shape(self) -> tuple[int, int]:
        return self.value.shape

    @property
    def rows(self) -> int:
        return self.value.shape[0]

    @property
    def cols(self) -> int:
        return self.value.shape[1]

    @property
    def T(self) -> "Node":
        return transpose(self)

    def item(self) -> float:
        if self.value.shape != (1, 1):
            raise ContractError(f"item() needs a 1x1 node, got {self.value.shape}")
        return float(self.value[0, 0])

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

    def __matmul__(self, other):
        return matmul(self, other)

    def __neg__(self):
        return neg(self)

    def __repr__(self) -> str:
        label = self.name or self.op
        return f"Node({label}, shape={self.value.shape})"


def leaf(value, name: str | None = None) -> Node:
    """Create a trainable leaf; gradients accumulate over all of its uses."""
    return Node(as_array2(value), op="leaf", requires_grad=True, name=name)


def constant(value) -> Node:
    """Create a node that never receives a gradient."""
    return Node(as_array2(value), op="const")


def lift(x) -> Node:
    """Wrap raw arrays as constants; nodes pass through unchanged."""
    return x if isinstance(x, Node) else constant(x)


def _result(value: np.ndarray, parents: tuple, vjp: Callable, op: str) -> Node:
    requires_grad = any(p.requires_grad for p in parents)
    return Node(value, parents, vjp if requires_grad else None, op, requires_grad)


def _unbroadcast(grad: np.ndarray, shape: tuple[int, int]) -> np.ndarray:
    if grad.shape == shape:
        return grad
    axes = tuple(i for i, (g, s) in enumerate(zip(grad.shape, shape)) if s == 1 and g != 1)
    return grad.sum(axis=axes, keepdims=True)


def _broadcast_shape(a: Node, b: Node, op: str) -> tuple[int, int]:
    try:
        return np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise DimensionError(f"{op}: cannot broadcast {a.shape} with {b.shape}") from None


# --- elementwise ------------------------------------------------------------


def add(a, b) -> Node:
    """Elementwise a + b, broadcasting a row or column vector."""
    a, b = lift(a), lift(b)
    _broadcast_shape(a, b, "add")

    def vjp(g):
        return _unbroadcast(g, a.shape), _unbroadcast(g, b.shape)

    return _result(a.value + b.value, (a, b), vjp, "add")


def sub(a, b) -> Node:
    """Elementwise a - b, broadcasting a row or column vector."""
    a, b = lift(a), lift(b)
    _broadcast_shape(a, b, "sub")

    def vjp(g):
        return _unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)

    return _result(a.value - b.value, (a, b), vjp, "sub")


def mul(a, b) -> Node:
    """Elementwise product, broadcasting a row or column vector."""
    a, b = lift(a), lift(b)
    _broadcast_shape(a, b, "mul")

    def vjp(g):
        return _unbroadcast(g * b.value, a.shape), _unbroadcast(g * a.value, b.shape)

    return _result(a.value * b.value, (a, b), vjp, "mul")


def div(a, b) -> Node:
    """Elementwise quotient, broadcasting a row or column vector."""
    a, b = lift(a), lift(b)
    _broadcast_shape(a, b, "div")
    out = a.value / b.value

    def vjp(g):
        return (
            _unbroadcast(g / b.value, a.shape),
            _unbroadcast(-g * out / b.value, b.shape),
        )

    return _result(out, (a, b), vjp, "div")


def neg(a) -> Node:
    a = lift(a)
    return _result(-a.value, (a,), lambda g: (-g,), "neg")


def scale(a, factor: float) -> Node:
    """Multiply by a fixed scalar."""
    a = lift(a)
    return _result(a.value * factor, (a,), lambda g: (g * factor,), "scale")


def square(a) -> Node:
    """Elementwise square."""
    a = lift(a)
    return _result(a.value * a.value, (a,), lambda g: (2.0 * g * a.value,), "square")


def power(a, exponent: float) -> Node:
    """Elementwise power with a fixed exponent."""
    a = lift(a)
    out = a.value**exponent

    def vjp(g):
        return (g * exponent * a.value ** (exponent - 1.0),)

    return _result(out, (a,), vjp, "power")


def relu(a) -> Node:
    """max(a, 0); the gradient at exactly 0 is 0."""
    a = lift(a)
    active = a.value > 0
    return _result(np.where(active, a.value, 0.0), (a,), lambda g: (g * active,), "relu")


def tanh(a) -> Node:
    """Elementwise tanh."""
    a = lift(a)
    out = np.tanh(a.value)
    return _result(out, (a,), lambda g: (g * (1.0 - out * out),), "tanh")


def exp(a) -> Node:
    """Elementwise exp."""
    a = lift(a)
    out = np.exp(a.value)
    return _result(out, (a,), lambda g: (g * out,), "exp")


def sin(a) -> Node:
    a = lift(a)
    return _result(np.sin(a.value), (a,), lambda g: (g * np.cos(a.value),), "sin")


# --- reductions and reshaping ----------------------------------------------


def sum_all(a) -> Node:
    """Sum of every entry as a 1 x 1 node."""
    a = lift(a)
    return _result(
        np.array([[a.value.sum()]]), (a,), lambda g: (np.full(a.shape, g[0, 0]),), "sum"
    )


def mean_all(a) -> Node:
    """Mean of every entry as a 1 x 1 node."""
    a = lift(a)
    n = a.value.size
    return _result(
        np.array([[a.value.mean()]]), (a,), lambda g: (np.full(a.shape, g[0, 0] / n),), "mean"
    )


def sum_rows(a) -> Node:
    """Sum across columns: (n, m) -> (n, 1)."""
    a = lift(a)
    return _result(
        a.value.sum(axis=1, keepdims=True),
        (a,),
        lambda g: (np.broadcast_to(g, a.shape).copy(),),
        "sum_rows",
    )


def mean_cols(a) -> Node:
    """Average down the rows: (n, m) -> (1, m)."""
    a = lift(a)
    n = a.rows
    return _result(
        a.value.mean(axis=0, keepdims=True),
        (a,),
        lambda g: (np.broadcast_to(g / n, a.shape).copy(),),
        "mean_cols",
    )


def transpose(a) -> Node:
    a = lift(a)
    return _result(a.value.T.copy(), (a,), lambda g: (g.T,), "transpose")


def reshape(a, rows: int, cols: int) -> Node:
    """Row-major reshape to (rows, cols)."""
    a = lift(a)
    if rows * cols != a.value.size:
        raise DimensionError(f"reshape: cannot view {a.shape} as ({rows}, {cols})")
    return _result(
        a.value.reshape(rows, cols).copy(), (a,), lambda g: (g.reshape(a.shape),), "reshape"
    )


def slice_cols(a, start: int, stop: int) -> Node:
    """Columns [start, stop) of a."""
    a = lift(a)
    if not 0 <= start <= stop <= a.cols:
        raise DimensionError(f"slice_cols: [{start}:{stop}] out of range for {a.shape}")

    def vjp(g):
        full = np.zeros(a.shape)
        full[:, start:stop] = g
        return (full,)

    return _result(a.value[:, start:stop].copy(), (a,), vjp, "slice_cols")


def concat_cols(nodes: Sequence) -> Node:
    """Side-by-side concatenation; row counts must agree."""
    nodes = tuple(lift(n) for n in nodes)
    rows = {n.rows for n in nodes}
    if len(rows) != 1:
        raise DimensionError(f"concat_cols: row counts differ {[n.shape for n in nodes]}")
    bounds = np.cumsum([0] + [n.cols for n in nodes])

    def vjp(g):
        return tuple(g[:, bounds[i]:bounds[i + 1]] for i in range(len(nodes)))

    return _result(np.hstack([n.value for n in nodes]), nodes, vjp, "concat_cols")


def concat_rows(nodes: Sequence) -> Node:
    """Stacked concatenation; column counts must agree."""
    nodes = tuple(lift(n) for n in nodes)
    cols = {n.cols for n in nodes}
    if len(cols) != 1:
        raise DimensionError(f"concat_rows: column counts differ {[n.shape for n in nodes]}")
    bounds = np.cumsum([0] + [n.rows for n in nodes])

    def vjp(g):
        return tuple(g[bounds[i]:bounds[i + 1], :] for i in range(len(nodes)))

    return _result(np.vstack([n.value for n in nodes]), nodes, vjp, "concat_rows")


# --- linear algebra ---------------------------------------------------------


def matmul(a, b) -> Node:
    """Matrix product, differentiable in both operands."""
    a, b = lift(a), lift(b)
    if a.cols != b.rows:
        raise DimensionError(f"matmul: shapes {a.shape} and {b.shape} are not aligned")

    def vjp(g):
        return g @ b.value.T, a.value.T @ g

    return _result(a.value @ b.value, (a, b), vjp, "matmul")


def softmax_rows(m) -> Node:
    """Row-wise softmax with per-row max subtraction."""
    m = lift(m)
    shifted = m.value - m.value.max(axis=1, keepdims=True)
    e = np.exp(shifted)
    out = e / e.sum(axis=1, keepdims=True)

    def vjp(g):
        return (out * (g - (g * out).sum(axis=1, keepdims=True)),)

    return _result(out, (m,), vjp, "softmax_rows")


# --- convolution ------------------------------------------------------------


def same_padding(k: int) -> tuple[int, int]:
    """Leading and trailing zero pads that keep the output length; even kernels trail."""
    lead = (k - 1) // 2
    return lead, k - 1 - lead


def _check_kernel(k: int, length: int):
    if k < 1:
        raise ConvolutionConfigError(f"Kernel size must be >= 1, got {k}")
    if length < 1:
        raise ConvolutionConfigError("Input must contain at least one step")
    if k > 2 * length + 1:
        raise ConvolutionConfigError(
            f"Kernel of size {k} is larger than the padded input of length {length}"
        )


def conv1d_same(x, kernel, bias) -> Node:
    """Cross-correlate a 1xT row with a 1xk kernel plus a scalar bias.

    Output length equals input length. Differentiable in x, kernel and bias.
    """
    x, kernel, bias = lift(x), lift(kernel), lift(bias)
    if x.rows != 1 or kernel.rows != 1 or bias.shape != (1, 1):
        raise DimensionError(
            f"conv1d_same expects 1xT, 1xk, 1x1; got {x.shape}, {kernel.shape}, {bias.shape}"
        )
    length, k = x.cols, kernel.cols
    _check_kernel(k, length)
    lead, trail = same_padding(k)
    padded = np.pad(x.value[0], (lead, trail))
    windows = sliding_window_view(padded, k)
    out = (windows @ kernel.value[0] + bias.value[0, 0]).reshape(1, length)

    def vjp(g):
        row = g[0]
        d_padded = np.zeros(padded.shape)
        for m in range(k):
            d_padded[m:m + length] += row * kernel.value[0, m]
        d_x = d_padded[lead:lead + length].reshape(1, length)
        d_kernel = (row @ windows).reshape(1, k)
        return d_x, d_kernel, np.array([[row.sum()]])

    return _result(out, (x, kernel, bias), vjp, "conv1d_same")


def unfold_same(x, k: int) -> Node:
    """Sliding windows of a CxT input as a Tx(C*k) patch matrix.

    Column c*k + m holds channel c at offset m of the window, with the same
    padding as `conv1d_same`, so `unfold_same(x, k) @ W` applies C-channel
    filters in one product.
    """
    x = lift(x)
    channels, length = x.shape
    _check_kernel(k, length)
    lead, trail = same_padding(k)
    padded = np.pad(x.value, ((0, 0), (lead, trail)))
    windows = sliding_window_view(padded, k, axis=1)
    out = windows.transpose(1, 0, 2).reshape(length, channels * k).copy()

    def vjp(g):
        per_channel = g.reshape(length, channels, k).transpose(1, 0, 2)
        d_padded = np.zeros(padded.shape)
        for m in range(k):
            d_padded[:, m:m + length] += per_channel[:, :, m]
        return (d_padded[:, lead:lead + length],)

    return _result(out, (x,), vjp, "unfold_same")


# --- reverse pass -----------------------------------------------------------


def _reachable(loss: Node) -> list[Node]:
    seen: set[int] = set()
    stack = [loss]
    nodes = []
    while stack:
        node = stack.pop()
        if node._id in seen or not node.requires_grad:
            continue
        seen.add(node._id)
        nodes.append(node)
        stack.extend(node.parents)
    nodes.sort(key=lambda n: n._id, reverse=True)
    return nodes


def backward(loss: Node, wrt: Sequence[Node] | None = None):
    """Propagate d(loss)/d(node) back to every trainable leaf.

    Args:
        loss: 1x1 node
        wrt: Optional leaves to report, in order; unreached leaves get zeros

    Returns:
        List of gradients for `wrt`, or a dict leaf -> gradient when `wrt` is None.
        Leaf `.grad` attributes are set either way.
    """
    if loss.shape != (1, 1):
        raise ContractError(f"backward needs a scalar (1x1) loss, got shape {loss.shape}")

    grads: dict[int, np.ndarray] = {loss._id: np.ones((1, 1))}
    leaves = []
    for node in _reachable(loss):
        if node._vjp is None:
            if node.op == "leaf":
                leaves.append(node)
            continue
        g = grads.pop(node._id, None)
        if g is None:
            continue
        for parent, pg in zip(node.parents, node._vjp(g)):
            if not parent.requires_grad:
                continue
            prev = grads.get(parent._id)
            grads[parent._id] = pg if prev is None else prev + pg

    for node in leaves:
        node.grad = grads.get(node._id, np.zeros(node.shape))

    if wrt is None:
        return {node: node.grad for node in sorted(leaves, key=lambda n: n._id)}
    return [grads.get(node._id, np.zeros(node.shape)) for node in wrt]


def _evaluate(f: Callable[[Node], Node], theta: np.ndarray) -> float:
    out = f(constant(theta))
    if out.shape != (1, 1):
        raise ContractError(f"grad_check needs a scalar function, got shape {out.shape}")
    value = out.item()
    if not np.isfinite(value):
        raise NonFiniteEvaluationError(f"Function evaluated to {value}")
    return value


def grad_check(f: Callable[[Node], Node], theta, step: float = 1e-5) -> float:
    """Compare analytic and central-difference gradients of a scalar graph.

    Args:
        f: Builds a 1x1 node from a parameter node shaped like `theta`
        theta: Point to check at
        step: Finite-difference step

    Returns:
        max |analytic - numeric| / max(1e-8, |analytic| + |numeric|)
    """
    theta = as_array2(theta)
    param = leaf(theta, name="theta")
    out = f(param)
    if out.shape != (1, 1):
        raise ContractError(f"grad_check needs a scalar function, got shape {out.shape}")
    if not np.isfinite(out.value).all():
        raise NonFiniteEvaluationError(f"Function evaluated to {out.item()}")
    (analytic,) = backward(out, wrt=[param])

    numeric = np.zeros_like(theta)
    for idx in np.ndindex(theta.shape):
        plus = theta.copy()
        plus[idx] += step
        minus = theta.copy()
        minus[idx] -= step
        numeric[idx] = (_evaluate(f, plus) - _evaluate(f, minus)) / (2.0 * step)

    denom = np.maximum(1e-8, np.abs(analytic) + np.abs(numeric))
    return float(np.max(np.abs(analytic - numeric) / denom))
