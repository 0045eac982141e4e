"""Dense tensors with reverse-mode automatic differentiation.

Every operation returns a new :class:`Tensor`. When gradient recording is
enabled and at least one operand requires a gradient, the result keeps a
reference to its operands plus a closure mapping the output gradient to the
operand gradients. :meth:`Tensor.backward` walks that graph once in reverse
topological order and then frees it.

Only the operations the sequence model needs are provided. Shapes are
checked explicitly at every op boundary and any non-finite result raises
:class:`~sedmamba.errors.NumericError`.
"""

from __future__ import annotations

import threading
from contextlib import contextmanager
from typing import Callable, Sequence

import numpy as np
from scipy.special import expit

from .errors import ConfigError, DimensionError, GraphError, NumericError

_state = threading.local()


def is_grad_enabled() -> bool:
    return getattr(_state, "enabled", True)


@contextmanager
def no_grad():
    """Disable graph recording in the current thread."""
    prev = is_grad_enabled()
    _state.enabled = False
    try:
        yield
    finally:
        _state.enabled = prev


BackwardFn = Callable[[np.ndarray], Sequence["np.ndarray | None"]]


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "op", "_parents", "_backward", "_consumed")

    def __init__(self, data, requires_grad: bool = False, dtype=None):
        if dtype is None:
            dtype = data.dtype if isinstance(data, np.ndarray) and data.dtype == np.float32 else np.float64
        self.data = np.array(data, dtype=dtype)
        self.grad: np.ndarray | None = None
        self.requires_grad = requires_grad
        self.op = "leaf"
        self._parents: tuple[Tensor, ...] = ()
        self._backward: BackwardFn | None = None
        self._consumed = False

    def __repr__(self):
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}, op={self.op}{flag})"

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else float("nan")

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def zero_grad(self):
        self.grad = None

    # operator sugar
    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return add(self, neg(as_tensor(other)))

    def __rsub__(self, other):
        return add(as_tensor(other), neg(self))

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)

    def sum(self, axis=None):
        return tsum(self, axis)

    def mean(self):
        return mean(self)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def backward(self):
        """Accumulate d(self)/d(leaf) into ``grad`` of every tracked leaf."""
        if self.data.size != 1:
            raise GraphError(f"backward() needs a scalar loss, got shape {self.shape}")
        if self._consumed:
            raise GraphError("graph already consumed by a previous backward(); run a new forward pass")
        if not self.requires_grad:
            raise GraphError("loss is detached from the graph: nothing requires a gradient")

        order = _topological_order(self)
        grads: dict[int, np.ndarray] = {id(self): np.ones_like(self.data)}
        for node in reversed(order):
            g = grads.pop(id(node), None)
            if g is None:
                continue
            if node._backward is None:
                node.grad = g.copy() if node.grad is None else node.grad + g
                continue
            for parent, pg in zip(node._parents, node._backward(g)):
                if pg is None or not parent.requires_grad:
                    continue
                if pg.shape != parent.shape:
                    raise GraphError(f"{node.op}: gradient shape {pg.shape} != operand shape {parent.shape}")
                key = id(parent)
                grads[key] = pg if key not in grads else grads[key] + pg
        for node in order:
            if node._backward is not None:
                node._parents = ()
                node._backward = None
                node._consumed = True
        self._consumed = True


def _topological_order(root: Tensor) -> list[Tensor]:
    # iterative DFS; scan references build graphs thousands of nodes deep
    order: list[Tensor] = []
    seen: set[int] = set()
    stack: list[tuple[Tensor, bool]] = [(root, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for p in node._parents:
            if id(p) not in seen and p.requires_grad:
                stack.append((p, False))
    return order


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _check_finite(op: str, out: np.ndarray):
    if not np.all(np.isfinite(out)):
        raise NumericError(f"{op}: non-finite value in output")


def make_result(op: str, out: np.ndarray, parents: Sequence[Tensor], backward: BackwardFn) -> Tensor:
    """Wrap ``out`` as the result of ``op``, recording it when needed.

    Custom fused operations (e.g. the selective scan) use this to join the
    graph with their own analytic backward rule.
    """
    _check_finite(op, out)
    t = Tensor.__new__(Tensor)
    t.data = out
    t.grad = None
    t.op = op
    t._consumed = False
    if is_grad_enabled() and any(p.requires_grad for p in parents):
        t.requires_grad = True
        t._parents = tuple(parents)
        t._backward = backward
    else:
        t.requires_grad = False
        t._parents = ()
        t._backward = None
    return t


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for axis, n in enumerate(shape):
        if n == 1 and g.shape[axis] != 1:
            g = g.sum(axis=axis, keepdims=True)
    return g


def _broadcast_check(op: str, a: Tensor, b: Tensor):
    try:
        np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise DimensionError(f"{op}: shapes {a.shape} and {b.shape} do not broadcast") from None


# ---------------------------------------------------------------------------
# elementwise
# ---------------------------------------------------------------------------

def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_check("add", a, b)
    out = a.data + b.data
    return make_result("add", out, (a, b), lambda g: (_unbroadcast(g, a.shape), _unbroadcast(g, b.shape)))


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_check("mul", a, b)
    out = a.data * b.data
    return make_result(
        "mul", out, (a, b),
        lambda g: (_unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)),
    )


def neg(a: Tensor) -> Tensor:
    return make_result("neg", -a.data, (a,), lambda g: (-g,))


def exp(x: Tensor) -> Tensor:
    with np.errstate(over="ignore"):
        out = np.exp(x.data)
    return make_result("exp", out, (x,), lambda g: (g * out,))


def log(x: Tensor) -> Tensor:
    if np.any(x.data <= 0):
        raise NumericError("log: argument must be positive")
    out = np.log(x.data)
    return make_result("log", out, (x,), lambda g: (g / x.data,))


def sigmoid(x: Tensor) -> Tensor:
    s = expit(x.data)
    return make_result("sigmoid", s, (x,), lambda g: (g * s * (1.0 - s),))


def silu(x: Tensor) -> Tensor:
    s = expit(x.data)
    out = x.data * s
    return make_result("silu", out, (x,), lambda g: (g * (s * (1.0 + x.data * (1.0 - s))),))


def softplus(x: Tensor) -> Tensor:
    # logaddexp(0, x) = max(x, 0) + log1p(exp(-|x|)), no overflow for large |x|
    out = np.logaddexp(0.0, x.data)
    return make_result("softplus", out, (x,), lambda g: (g * expit(x.data),))


def clamp(x: Tensor, lo: float, hi: float) -> Tensor:
    out = np.clip(x.data, lo, hi)
    inside = (x.data >= lo) & (x.data <= hi)
    return make_result("clamp", out, (x,), lambda g: (g * inside,))


_UNARY = {"silu": silu, "sigmoid": sigmoid, "softplus": softplus, "exp": exp}
_BINARY = {"mul": mul, "add": add}


def elementwise(x, fn: str, other=None) -> Tensor:
    """Apply a named pointwise function: silu, sigmoid, softplus, exp, mul, add."""
    if fn in _UNARY:
        if other is not None:
            raise ConfigError(f"{fn} is unary")
        return _UNARY[fn](as_tensor(x))
    if fn in _BINARY:
        if other is None:
            raise ConfigError(f"{fn} needs a second operand")
        return _BINARY[fn](x, other)
    raise ConfigError(f"unknown elementwise function {fn!r}")


# ---------------------------------------------------------------------------
# reductions and shape manipulation
# ---------------------------------------------------------------------------

def tsum(x: Tensor, axis=None) -> Tensor:
    out = np.asarray(x.data.sum(axis=axis))

    def backward(g):
        if axis is None:
            return (np.broadcast_to(g, x.shape).copy(),)
        return (np.broadcast_to(np.expand_dims(g, axis), x.shape).copy(),)

    return make_result("sum", out, (x,), backward)


def mean(x: Tensor) -> Tensor:
    n = x.data.size
    out = np.asarray(x.data.mean())
    return make_result("mean", out, (x,), lambda g: (np.full(x.shape, g / n),))


def reshape(x: Tensor, shape) -> Tensor:
    shape = tuple(shape)
    try:
        out = x.data.reshape(shape)
    except ValueError:
        raise DimensionError(f"reshape: cannot view {x.shape} as {shape}") from None
    return make_result("reshape", out, (x,), lambda g: (g.reshape(x.shape),))


def take_row(x: Tensor, t: int) -> Tensor:
    """Row ``t`` of a tensor (index along axis 0)."""
    out = x.data[t].copy()

    def backward(g):
        gx = np.zeros_like(x.data)
        gx[t] = g
        return (gx,)

    return make_result("take_row", out, (x,), backward)


def stack_rows(rows: Sequence[Tensor]) -> Tensor:
    rows = [as_tensor(r) for r in rows]
    if not rows:
        raise DimensionError("stack_rows: empty list")
    if any(r.shape != rows[0].shape for r in rows):
        raise DimensionError("stack_rows: rows differ in shape")
    out = np.stack([r.data for r in rows])
    return make_result("stack_rows", out, rows, lambda g: tuple(g[i] for i in range(len(rows))))


def concat_channels(parts: Sequence[Tensor]) -> Tensor:
    """Concatenate ``[L, C_i]`` tensors along the channel axis, in order."""
    parts = [as_tensor(p) for p in parts]
    if not parts:
        raise DimensionError("concat_channels: no parts")
    if any(p.ndim != 2 for p in parts):
        raise DimensionError("concat_channels: every part must be [L, C]")
    length = parts[0].shape[0]
    if any(p.shape[0] != length for p in parts):
        raise DimensionError(f"concat_channels: lengths differ {[p.shape[0] for p in parts]}")
    if len(parts) == 1:
        return parts[0]
    out = np.concatenate([p.data for p in parts], axis=1)
    edges = np.cumsum([0] + [p.shape[1] for p in parts])

    def backward(g):
        return tuple(g[:, edges[i]:edges[i + 1]].copy() for i in range(len(parts)))

    return make_result("concat_channels", out, parts, backward)


def slice_channels(x: Tensor, start: int, stop: int) -> Tensor:
    if x.ndim != 2 or not 0 <= start < stop <= x.shape[1]:
        raise DimensionError(f"slice_channels: bad range [{start}, {stop}) for shape {x.shape}")
    out = x.data[:, start:stop].copy()

    def backward(g):
        gx = np.zeros_like(x.data)
        gx[:, start:stop] = g
        return (gx,)

    return make_result("slice_channels", out, (x,), backward)


# ---------------------------------------------------------------------------
# linear algebra and convolution
# ---------------------------------------------------------------------------

def matmul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim != 2 or b.ndim != 2:
        raise DimensionError(f"matmul: expected 2-D operands, got {a.shape} and {b.shape}")
    if a.shape[1] != b.shape[0]:
        raise DimensionError(f"matmul: inner dimensions differ, {a.shape} @ {b.shape}")
    out = a.data @ b.data
    return make_result("matmul", out, (a, b), lambda g: (g @ b.data.T, a.data.T @ g))


def linear(x: Tensor, weight: Tensor, bias: Tensor | None = None) -> Tensor:
    """``x @ weight.T + bias`` with weight stored as ``[out, in]``."""
    if weight.ndim != 2 or x.ndim != 2 or x.shape[1] != weight.shape[1]:
        raise DimensionError(f"linear: input {x.shape} incompatible with weight {weight.shape}")
    out = x.data @ weight.data.T
    parents = [x, weight]
    if bias is not None:
        if bias.shape != (weight.shape[0],):
            raise DimensionError(f"linear: bias shape {bias.shape} != ({weight.shape[0]},)")
        out = out + bias.data
        parents.append(bias)

    def backward(g):
        grads = [g @ weight.data, g.T @ x.data]
        if bias is not None:
            grads.append(g.sum(axis=0))
        return grads

    return make_result("linear", out, parents, backward)


PADDINGS = ("same", "causal", "none")


def conv_padding(k: int, dilation: int, padding: str) -> tuple[int, int]:
    """Zero padding (left, right) applied along time."""
    span = (k - 1) * dilation
    if padding == "same":
        if k % 2 == 0:
            raise ConfigError(f"same-symmetric padding needs an odd kernel size, got {k}")
        return span // 2, span // 2
    if padding == "causal":
        return span, 0
    if padding == "none":
        return 0, 0
    raise ConfigError(f"unknown padding {padding!r}; expected one of {PADDINGS}")


def conv1d(signal: Tensor, kernel: Tensor, bias: Tensor | None = None, dilation: int = 1,
           padding: str = "same", groups: int = 1) -> Tensor:
    """Dilated cross-correlation along time.

    ``signal`` is ``[L, C_in]``, ``kernel`` is ``[C_out, C_in / groups, k]``.
    Only ``groups == 1`` and depthwise (``groups == C_in == C_out``) are
    supported.
    """
    if dilation < 1 or int(dilation) != dilation:
        raise ConfigError(f"dilation must be a positive integer, got {dilation}")
    if signal.ndim != 2 or kernel.ndim != 3:
        raise DimensionError(f"conv1d: signal {signal.shape} must be [L, C], kernel {kernel.shape} [O, I, k]")
    length, c_in = signal.shape
    c_out, c_per_group, k = kernel.shape
    depthwise = groups != 1
    if depthwise and not (groups == c_in == c_out and c_per_group == 1):
        raise ConfigError(f"conv1d: only depthwise grouping is supported (groups={groups}, kernel {kernel.shape})")
    if not depthwise and c_per_group != c_in:
        raise DimensionError(f"conv1d: kernel expects {c_per_group} input channels, signal has {c_in}")
    if bias is not None and bias.shape != (c_out,):
        raise DimensionError(f"conv1d: bias shape {bias.shape} != ({c_out},)")

    left, right = conv_padding(k, dilation, padding)
    out_len = length + left + right - (k - 1) * dilation
    if out_len < 1:
        raise DimensionError(f"conv1d: sequence of length {length} too short for kernel span {(k - 1) * dilation + 1}")
    x = signal.data
    xp = np.pad(x, ((left, right), (0, 0))) if left or right else x
    w = kernel.data
    taps = [slice(j * dilation, j * dilation + out_len) for j in range(k)]

    out = np.zeros((out_len, c_out), dtype=x.dtype)
    for j, sl in enumerate(taps):
        if depthwise:
            out += xp[sl] * w[:, 0, j]
        else:
            out += xp[sl] @ w[:, :, j].T
    if bias is not None:
        out += bias.data

    def backward(g):
        gxp = np.zeros_like(xp)
        gw = np.zeros_like(w)
        for j, sl in enumerate(taps):
            if depthwise:
                gxp[sl] += g * w[:, 0, j]
                gw[:, 0, j] = (g * xp[sl]).sum(axis=0)
            else:
                gxp[sl] += g @ w[:, :, j]
                gw[:, :, j] = g.T @ xp[sl]
        grads = [gxp[left:left + length], gw]
        if bias is not None:
            grads.append(g.sum(axis=0))
        return grads

    parents = [signal, kernel] + ([bias] if bias is not None else [])
    return make_result("conv1d", out, parents, backward)
