"""Tape-based reverse-mode automatic differentiation over float64 numpy arrays.

Operations record themselves on the innermost active :class:`Tape` whenever one
of their inputs requires a gradient. Outside a tape every op is a plain numpy
computation, which keeps inference and attribution forward passes cheap.

    >>> x = Tensor([3.0], requires_grad=True)
    >>> with Tape() as tape:
    ...     y = x * x
    >>> grads = backward(tape, y)
    >>> float(grads[x][0])
    6.0
"""

from __future__ import annotations

import threading
from typing import Callable, Iterable, Sequence

import numpy as np

MASK_VALUE = -1e9
_GELU_C = np.sqrt(2.0 / np.pi)

_local = threading.local()


class AutodiffError(RuntimeError):
    pass


class ShapeError(ValueError):
    """Raised when an op receives inputs whose shapes do not conform."""

    def __init__(self, op: str, *shapes):
        self.op = op
        self.shapes = tuple(tuple(s) for s in shapes)
        dims = " vs ".join(str(s) for s in self.shapes)
        super().__init__(f"{op}: incompatible shapes {dims}")


class NonFiniteGradientError(AutodiffError):
    def __init__(self, op: str, index: int):
        self.op = op
        self.index = index
        super().__init__(f"non-finite gradient produced by op #{index} ({op})")


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "name")

    def __init__(self, data, requires_grad: bool = False, name: str | None = None):
        self.data = np.asarray(data, dtype=np.float64)
        self.grad: np.ndarray | None = None
        self.requires_grad = bool(requires_grad)
        self.name = name

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    @property
    def values(self) -> np.ndarray:
        """Row-major flat view of the data."""
        return self.data.reshape(-1)

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data)

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self) -> str:
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}{flag})"

    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __truediv__(self, other):
        return div(self, other)

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, index):
        return getitem(self, index)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, *axes):
        if len(axes) == 1 and isinstance(axes[0], (tuple, list)):
            axes = tuple(axes[0])
        return transpose(self, axes or None)

    def sum(self, axis=None, keepdims=False):
        return tsum(self, axis=axis, keepdims=keepdims)

    def mean(self, axis=None, keepdims=False):
        return mean(self, axis=axis, keepdims=keepdims)


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


class Node:
    __slots__ = ("op", "inputs", "out", "backward", "fn", "dfn")

    def __init__(self, op, inputs, out, backward, fn=None, dfn=None):
        self.op = op
        self.inputs = inputs
        self.out = out
        self.backward = backward
        self.fn = fn
        self.dfn = dfn


class Tape:
    """Ordered record of differentiable operations.

    Use as a context manager; ops executed inside the block are appended in
    execution order, which is a valid topological order by construction.
    """

    def __init__(self):
        self.nodes: list[Node] = []

    def __enter__(self) -> "Tape":
        stack = getattr(_local, "stack", None)
        if stack is None:
            stack = _local.stack = []
        stack.append(self)
        return self

    def __exit__(self, *exc) -> None:
        _local.stack.pop()

    def __len__(self) -> int:
        return len(self.nodes)


def _active_tape() -> Tape | None:
    stack = getattr(_local, "stack", None)
    return stack[-1] if stack else None


class no_grad:
    """Suspend recording inside a block, even when an outer tape is active."""

    def __enter__(self):
        stack = getattr(_local, "stack", None)
        if stack is None:
            stack = _local.stack = []
        self._saved = list(stack)
        stack.clear()
        return self

    def __exit__(self, *exc):
        _local.stack[:] = self._saved


def _record(op, inputs, out_data, backward, fn=None, dfn=None) -> Tensor:
    tape = _active_tape()
    needs = tape is not None and any(t.requires_grad for t in inputs)
    out = Tensor(out_data, requires_grad=needs)
    if needs:
        tape.nodes.append(Node(op, tuple(inputs), out, backward, fn, dfn))
    return out


def _unbroadcast(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    if grad.shape == shape:
        return grad
    extra = grad.ndim - len(shape)
    if extra > 0:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad


def _broadcast_shape(op, a, b):
    try:
        return np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise ShapeError(op, a.shape, b.shape) from None


# -- binary elementwise ------------------------------------------------------


def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape("add", a, b)
    sa, sb = a.shape, b.shape
    return _record(
        "add", (a, b), a.data + b.data,
        lambda g: (_unbroadcast(g, sa), _unbroadcast(g, sb)),
    )


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape("sub", a, b)
    sa, sb = a.shape, b.shape
    return _record(
        "sub", (a, b), a.data - b.data,
        lambda g: (_unbroadcast(g, sa), _unbroadcast(-g, sb)),
    )


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape("mul", a, b)

    def backward(g):
        ga = _unbroadcast(g * b.data, a.shape) if a.requires_grad else None
        gb = _unbroadcast(g * a.data, b.shape) if b.requires_grad else None
        return ga, gb

    return _record("mul", (a, b), a.data * b.data, backward)


def div(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape("div", a, b)
    out = a.data / b.data

    def backward(g):
        ga = _unbroadcast(g / b.data, a.shape) if a.requires_grad else None
        gb = _unbroadcast(-g * out / b.data, b.shape) if b.requires_grad else None
        return ga, gb

    return _record("div", (a, b), out, backward)


def neg(a) -> Tensor:
    a = as_tensor(a)
    return _record("neg", (a,), -a.data, lambda g: (-g,))


def affine_const(a: Tensor, scale: np.ndarray, shift: np.ndarray) -> Tensor:
    """``a * scale + shift`` with constant (non-differentiable) coefficients."""
    a = as_tensor(a)
    try:
        out = a.data * scale + shift
    except ValueError:
        raise ShapeError("affine_const", a.shape, np.shape(scale), np.shape(shift)) from None
    sa = a.shape
    return _record("affine_const", (a,), out, lambda g: (_unbroadcast(g * scale, sa),))


# -- linear algebra -----------------------------------------------------------


def matmul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim < 1 or b.ndim < 1 or a.shape[-1] != b.shape[-2 if b.ndim > 1 else 0]:
        raise ShapeError("matmul", a.shape, b.shape)
    if b.ndim < 2 or a.ndim < 2:
        raise ShapeError("matmul", a.shape, b.shape)
    try:
        out = np.matmul(a.data, b.data)
    except ValueError:
        raise ShapeError("matmul", a.shape, b.shape) from None

    def backward(g):
        ga = gb = None
        if a.requires_grad:
            ga = _unbroadcast(np.matmul(g, np.swapaxes(b.data, -1, -2)), a.shape)
        if b.requires_grad:
            if b.ndim == 2:
                ad = a.data.reshape(-1, a.shape[-1])
                gb = ad.T @ g.reshape(-1, g.shape[-1])
            else:
                gb = _unbroadcast(np.matmul(np.swapaxes(a.data, -1, -2), g), b.shape)
        return ga, gb

    return _record("matmul", (a, b), out, backward)


def reshape(a, shape) -> Tensor:
    a = as_tensor(a)
    try:
        out = a.data.reshape(shape)
    except ValueError:
        raise ShapeError("reshape", a.shape, tuple(shape)) from None
    sa = a.shape
    return _record("reshape", (a,), out, lambda g: (g.reshape(sa),))


def transpose(a, axes=None) -> Tensor:
    a = as_tensor(a)
    if axes is None:
        axes = tuple(reversed(range(a.ndim)))
    inv = tuple(np.argsort(axes))
    return _record("transpose", (a,), a.data.transpose(axes), lambda g: (g.transpose(inv),))


def swapaxes(a, i: int, j: int) -> Tensor:
    a = as_tensor(a)
    return _record("swapaxes", (a,), np.swapaxes(a.data, i, j), lambda g: (np.swapaxes(g, i, j),))


def concat(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    tensors = [as_tensor(t) for t in tensors]
    try:
        out = np.concatenate([t.data for t in tensors], axis=axis)
    except ValueError:
        raise ShapeError("concat", *[t.shape for t in tensors]) from None
    bounds = np.cumsum([t.shape[axis] for t in tensors])[:-1]
    return _record("concat", tuple(tensors), out, lambda g: tuple(np.split(g, bounds, axis=axis)))


def getitem(a, index) -> Tensor:
    a = as_tensor(a)
    out = a.data[index]

    def backward(g):
        full = np.zeros_like(a.data)
        np.add.at(full, index, g)
        return (full,)

    return _record("getitem", (a,), np.array(out, dtype=np.float64), backward)


def gather_last(a, index: np.ndarray) -> Tensor:
    """Pick ``a[..., index[...]]`` along the last axis."""
    a = as_tensor(a)
    index = np.asarray(index)
    if index.shape != a.shape[:-1]:
        raise ShapeError("gather_last", a.shape, index.shape)
    out = np.take_along_axis(a.data, index[..., None], axis=-1)[..., 0]

    def backward(g):
        full = np.zeros_like(a.data)
        np.put_along_axis(full, index[..., None], g[..., None], axis=-1)
        return (full,)

    return _record("gather_last", (a,), out, backward)


def embedding(weight, ids: np.ndarray) -> Tensor:
    weight = as_tensor(weight)
    ids = np.asarray(ids, dtype=np.int64)
    if weight.ndim != 2:
        raise ShapeError("embedding", weight.shape, ids.shape)
    if ids.size and (ids.min() < 0 or ids.max() >= weight.shape[0]):
        raise ShapeError("embedding", weight.shape, (int(ids.min()), int(ids.max())))

    def backward(g):
        full = np.zeros_like(weight.data)
        np.add.at(full, ids.reshape(-1), g.reshape(-1, weight.shape[1]))
        return (full,)

    return _record("embedding", (weight,), weight.data[ids], backward)


# -- reductions ---------------------------------------------------------------


def tsum(a, axis=None, keepdims=False) -> Tensor:
    a = as_tensor(a)
    out = a.data.sum(axis=axis, keepdims=keepdims)
    sa = a.shape

    def backward(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, sa).copy(),)

    return _record("sum", (a,), out, backward)


def mean(a, axis=None, keepdims=False) -> Tensor:
    a = as_tensor(a)
    n = a.size if axis is None else np.prod([a.shape[i] for i in np.atleast_1d(axis)])
    return tsum(a, axis=axis, keepdims=keepdims) * (1.0 / n)


# -- elementwise nonlinearities ----------------------------------------------
# Each records its scalar function and derivative so a Rescale-rule backward
# (DeepLIFT) can substitute secant slopes for local derivatives.


def _unary(op: str, fn: Callable, dfn: Callable, a) -> Tensor:
    a = as_tensor(a)
    x = a.data
    return _record(op, (a,), fn(x), lambda g: (g * dfn(x),), fn=fn, dfn=dfn)


def _sigmoid(x):
    return 0.5 * (1.0 + np.tanh(0.5 * x))


def _swish(x):
    return x * _sigmoid(x)


def _dswish(x):
    s = _sigmoid(x)
    return s + x * s * (1.0 - s)


def _gelu(x):
    return 0.5 * x * (1.0 + np.tanh(_GELU_C * (x + 0.044715 * x**3)))


def _dgelu(x):
    u = _GELU_C * (x + 0.044715 * x**3)
    t = np.tanh(u)
    du = _GELU_C * (1.0 + 3 * 0.044715 * x**2)
    return 0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * du


def _relu(x):
    return np.maximum(x, 0.0)


def _drelu(x):
    return (x > 0).astype(np.float64)


def _dtanh(x):
    t = np.tanh(x)
    return 1.0 - t * t


def _dsigmoid(x):
    s = _sigmoid(x)
    return s * (1.0 - s)


def swish(a) -> Tensor:
    return _unary("swish", _swish, _dswish, a)


def gelu(a) -> Tensor:
    return _unary("gelu", _gelu, _dgelu, a)


def relu(a) -> Tensor:
    return _unary("relu", _relu, _drelu, a)


def tanh(a) -> Tensor:
    return _unary("tanh", np.tanh, _dtanh, a)


def sigmoid(a) -> Tensor:
    return _unary("sigmoid", _sigmoid, _dsigmoid, a)


def exp(a) -> Tensor:
    return _unary("exp", np.exp, np.exp, a)


def log(a) -> Tensor:
    return _unary("log", np.log, lambda x: 1.0 / x, a)


ACTIVATIONS = {"swish": swish, "gelu": gelu, "relu": relu, "tanh": tanh}


# -- normalisations -----------------------------------------------------------


def _masked_input(op, a, mask):
    if mask is None:
        return a.data
    mask = np.asarray(mask, dtype=np.float64)
    try:
        return a.data + mask
    except ValueError:
        raise ShapeError(op, a.shape, mask.shape) from None


def softmax(a, mask: np.ndarray | None = None, axis: int = -1) -> Tensor:
    """Softmax of ``a + mask``; ``mask`` holds 0 or a large negative value."""
    a = as_tensor(a)
    z = _masked_input("softmax", a, mask)
    z = z - z.max(axis=axis, keepdims=True)
    e = np.exp(z)
    y = e / e.sum(axis=axis, keepdims=True)

    def backward(g):
        return (y * (g - (g * y).sum(axis=axis, keepdims=True)),)

    return _record("softmax", (a,), y, backward)


def log_softmax(a, mask: np.ndarray | None = None, axis: int = -1) -> Tensor:
    a = as_tensor(a)
    z = _masked_input("log_softmax", a, mask)
    z = z - z.max(axis=axis, keepdims=True)
    lse = np.log(np.exp(z).sum(axis=axis, keepdims=True))
    out = z - lse
    p = np.exp(out)

    def backward(g):
        return (g - p * g.sum(axis=axis, keepdims=True),)

    return _record("log_softmax", (a,), out, backward)


def layer_norm(a, gamma, beta, eps: float = 1e-5) -> Tensor:
    a, gamma, beta = as_tensor(a), as_tensor(gamma), as_tensor(beta)
    if gamma.shape != a.shape[-1:] or beta.shape != a.shape[-1:]:
        raise ShapeError("layer_norm", a.shape, gamma.shape, beta.shape)
    x = a.data
    mu = x.mean(axis=-1, keepdims=True)
    xc = x - mu
    inv = 1.0 / np.sqrt((xc * xc).mean(axis=-1, keepdims=True) + eps)
    xhat = xc * inv
    out = xhat * gamma.data + beta.data

    def backward(g):
        gx = gg = gb = None
        if a.requires_grad:
            gh = g * gamma.data
            gx = inv * (gh - gh.mean(axis=-1, keepdims=True)
                        - xhat * (gh * xhat).mean(axis=-1, keepdims=True))
        if gamma.requires_grad:
            gg = (g * xhat).reshape(-1, x.shape[-1]).sum(axis=0)
        if beta.requires_grad:
            gb = g.reshape(-1, x.shape[-1]).sum(axis=0)
        return gx, gg, gb

    return _record("layer_norm", (a, gamma, beta), out, backward)


def cross_entropy(logits, targets: np.ndarray, valid: np.ndarray | None = None) -> Tensor:
    """Mean token cross-entropy over positions where ``valid`` is true."""
    logits = as_tensor(logits)
    targets = np.asarray(targets, dtype=np.int64)
    if targets.shape != logits.shape[:-1]:
        raise ShapeError("cross_entropy", logits.shape, targets.shape)
    valid = np.ones(targets.shape, bool) if valid is None else np.asarray(valid, bool)
    n = max(int(valid.sum()), 1)
    z = logits.data - logits.data.max(axis=-1, keepdims=True)
    lse = np.log(np.exp(z).sum(axis=-1, keepdims=True))
    logp = z - lse
    picked = np.take_along_axis(logp, targets[..., None], axis=-1)[..., 0]
    loss = -(picked * valid).sum() / n

    def backward(g):
        p = np.exp(logp)
        np.put_along_axis(p, targets[..., None],
                          np.take_along_axis(p, targets[..., None], axis=-1) - 1.0, axis=-1)
        return (g * p * (valid[..., None] / n),)

    return _record("cross_entropy", (logits,), np.array(loss), backward)


# -- backward -----------------------------------------------------------------

RESCALE_OPS = frozenset({"swish", "gelu", "relu", "tanh", "sigmoid", "exp"})


class Gradients:
    """Mapping from tensors to the gradients of one backward pass."""

    def __init__(self):
        self._grads: dict[int, np.ndarray] = {}
        self._tensors: dict[int, Tensor] = {}

    def __getitem__(self, t: Tensor) -> np.ndarray:
        try:
            return self._grads[id(t)]
        except KeyError:
            return np.zeros_like(t.data)

    def __contains__(self, t: Tensor) -> bool:
        return id(t) in self._grads

    def __len__(self) -> int:
        return len(self._grads)

    def tensors(self) -> list[Tensor]:
        return list(self._tensors.values())


def backward(tape: Tape, output: Tensor, seed=None, *, reference: Tape | None = None,
             check_finite: bool = True) -> Gradients:
    """Propagate ``seed`` (default ones) from ``output`` back through ``tape``.

    Every tensor that requires a gradient and lies on a path to ``output``
    gets its ``.grad`` set (overwriting any previous value) and appears in the
    returned :class:`Gradients`.

    With ``reference`` (a tape recorded by the same code on a baseline input),
    elementwise nonlinearities use the Rescale rule: the local derivative is
    replaced by ``(f(x) - f(x')) / (x - x')``, falling back to ``f'(x)`` where
    ``|x - x'| < 1e-9``. All other ops keep their local gradient.
    """
    if not tape.nodes or not output.requires_grad:
        raise AutodiffError("backward called without a recorded forward pass")
    if tape.nodes[-1].out is not output and not any(n.out is output for n in tape.nodes):
        raise AutodiffError("output was not produced on this tape")
    if reference is not None and len(reference.nodes) != len(tape.nodes):
        raise AutodiffError("reference tape does not mirror the input tape")
    seed = np.ones_like(output.data) if seed is None else np.asarray(seed, dtype=np.float64)
    if seed.shape != output.shape:
        raise ShapeError("backward", output.shape, seed.shape)

    result = Gradients()
    pending: dict[int, np.ndarray] = {id(output): seed}
    holders: dict[int, Tensor] = {id(output): output}
    for index in range(len(tape.nodes) - 1, -1, -1):
        node = tape.nodes[index]
        key = id(node.out)
        g = pending.pop(key, None)
        if g is None:
            continue
        holders.pop(key, None)
        node.out.grad = g
        result._grads[key] = g
        result._tensors[key] = node.out
        if reference is not None and node.op in RESCALE_OPS:
            x = node.inputs[0].data
            x0 = reference.nodes[index].inputs[0].data
            dx = x - x0
            small = np.abs(dx) < 1e-9
            slope = (node.fn(x) - node.fn(x0)) / np.where(small, 1.0, dx)
            in_grads = (g * np.where(small, node.dfn(x), slope),)
        else:
            in_grads = node.backward(g)
        for t, ig in zip(node.inputs, in_grads):
            if ig is None or not t.requires_grad:
                continue
            if check_finite and not np.all(np.isfinite(ig)):
                raise NonFiniteGradientError(node.op, index)
            k = id(t)
            if k in pending:
                pending[k] = pending[k] + ig
            else:
                pending[k] = ig
                holders[k] = t
    for k, g in pending.items():
        t = holders[k]
        t.grad = g
        result._grads[k] = g
        result._tensors[k] = t
    return result


def grad(fn: Callable[..., Tensor], *inputs: Tensor, seed=None) -> list[np.ndarray]:
    """Evaluate ``fn(*inputs)`` on a fresh tape and return input gradients."""
    with Tape() as tape:
        out = fn(*inputs)
    grads = backward(tape, out, seed)
    return [grads[t] for t in inputs]


def finite_difference_check(function: Callable[[Tensor], Tensor], point, epsilon: float = 1e-5) -> float:
    """Max relative error between reverse-mode and central-difference gradients.

    ``function`` maps a tensor to a scalar tensor. The error per coordinate is
    ``|analytic - central| / (|analytic| + |central| + 1e-12)``.
    """
    if epsilon <= 0:
        raise ValueError("epsilon must be positive")
    x = Tensor(np.array(point, dtype=np.float64), requires_grad=True)
    with Tape() as tape:
        out = function(x)
    if out.size != 1:
        raise ShapeError("finite_difference_check", out.shape, ())
    if not np.isfinite(out.data).all():
        raise AutodiffError("function value is not finite")
    analytic = backward(tape, out)[x].reshape(-1)

    base = x.data.reshape(-1)
    central = np.empty_like(base)
    for i in range(base.size):
        vals = []
        for step in (epsilon, -epsilon):
            shifted = base.copy()
            shifted[i] += step
            val = function(Tensor(shifted.reshape(x.shape))).data
            if not np.isfinite(val).all():
                raise AutodiffError(f"function value is not finite at coordinate {i}")
            vals.append(float(val))
        central[i] = (vals[0] - vals[1]) / (2 * epsilon)
    err = np.abs(analytic - central) / (np.abs(analytic) + np.abs(central) + 1e-12)
    return float(err.max()) if err.size else 0.0


def parameters_requiring_grad(params: Iterable[Tensor]) -> list[Tensor]:
    return [p for p in params if p.requires_grad]


# -- random numbers -------------------------------------------------------------


def make_rng(seed: int | Sequence[int]) -> np.random.Generator:
    """Counter-based (Philox) generator; sequences of ints give independent streams."""
    return np.random.Generator(np.random.Philox(np.random.SeedSequence(seed)))


def spawn_rngs(seed: int, n: int) -> list[np.random.Generator]:
    return [np.random.Generator(np.random.Philox(s)) for s in np.random.SeedSequence(seed).spawn(n)]
