"""Dense tensors with define-by-run reverse-mode differentiation.

Every primitive returns a new :class:`Tensor`. When any input tracks gradients
the output records its parents and a closure mapping the output gradient to
one gradient per parent. :func:`backward` walks the recorded graph in reverse
topological order. Leaf gradients accumulate across calls; intermediate
tensors only keep their gradient when :meth:`Tensor.retain_grad` was called,
which is how activation sites are recorded for importance scoring.

Values and gradients are checked for NaN/Inf after every operation.
"""
from __future__ import annotations

import contextlib
from typing import Callable, Iterator, Sequence

import numpy as np

from neuron_alloc import kernels
from neuron_alloc.errors import NumericError, ShapeError, UsageError

BackwardFn = Callable[[np.ndarray], Sequence["np.ndarray | None"]]

_FLOAT_TYPES = (np.float32, np.float64)

_grad_enabled = True


@contextlib.contextmanager
def no_grad() -> Iterator[None]:
    """Build no graph inside the block (decoding, evaluation)."""
    global _grad_enabled
    previous = _grad_enabled
    _grad_enabled = False
    try:
        yield
    finally:
        _grad_enabled = previous


def _check_finite(arr: np.ndarray, what: str) -> None:
    if not np.isfinite(arr).all():
        raise NumericError(f"{what}: non-finite value encountered")


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "op", "parents", "_backward", "_retain")

    def __init__(self, data, requires_grad: bool = False, dtype=None):
        if dtype is None:
            dtype = data.dtype if isinstance(data, np.ndarray) and data.dtype in _FLOAT_TYPES else np.float32
        arr = np.asarray(data, dtype=dtype)
        _check_finite(arr, "tensor")
        self.data = arr
        self.grad: np.ndarray | None = None
        self.requires_grad = requires_grad
        self.op: str | None = None
        self.parents: tuple[Tensor, ...] = ()
        self._backward: BackwardFn | None = None
        self._retain = False

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def is_leaf(self) -> bool:
        return self.op is None

    def retain_grad(self) -> "Tensor":
        self._retain = True
        return self

    def zero_grad(self) -> None:
        self.grad = None

    def item(self) -> float:
        return float(self.data.reshape(()))

    def numpy(self) -> np.ndarray:
        return self.data

    def backward(self) -> None:
        backward(self)

    def __repr__(self) -> str:
        tag = f", op={self.op}" if self.op else ""
        return f"Tensor(shape={self.shape}, dtype={self.dtype}{tag})"


def _result(data: np.ndarray, op: str, parents: Sequence[Tensor], fn: BackwardFn) -> Tensor:
    _check_finite(data, op)
    out = Tensor.__new__(Tensor)
    out.data = data
    out.grad = None
    out._retain = False
    out.op = op
    if _grad_enabled and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out.parents = tuple(parents)
        out._backward = fn
    else:
        out.requires_grad = False
        out.parents = ()
        out._backward = None
    return out


def _unbroadcast(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, dim in enumerate(shape):
        if dim == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad


def _broadcast_shape(op: str, a: Tensor, b: Tensor) -> None:
    try:
        np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise ShapeError(f"{op}: shapes {a.shape} and {b.shape} do not broadcast") from None


def _same_dtype(op: str, *ts: Tensor) -> None:
    if len({t.dtype for t in ts}) > 1:
        raise ShapeError(f"{op}: mixed dtypes {[str(t.dtype) for t in ts]}")


# -- primitives ---------------------------------------------------------------

def matmul(a: Tensor, b: Tensor) -> Tensor:
    """``(..., n, k) @ (k, m)`` or batched ``(B..., n, k) @ (B..., k, m)``."""
    _same_dtype("matmul", a, b)
    if a.data.ndim < 2 or b.data.ndim < 2:
        raise ShapeError(f"matmul: shapes {a.shape} and {b.shape} need at least 2 dims")
    n, k = a.shape[-2:]
    if b.shape[-2] != k:
        raise ShapeError(f"matmul: shapes {a.shape} and {b.shape} have mismatched inner dims")
    m = b.shape[-1]
    if b.data.ndim == 2:
        a3 = a.data.reshape(1, -1, k)
        out = kernels.bmm(a3, b.data.reshape(1, k, m)).reshape(a.shape[:-1] + (m,))

        def fn(g):
            g3 = g.reshape(1, -1, m)
            ga = kernels.bmm(g3, np.ascontiguousarray(b.data.T).reshape(1, m, k)) if a.requires_grad else None
            gb = None
            if b.requires_grad:
                gb = kernels.bmm(np.ascontiguousarray(a3[0].T)[None], g3)[0]
            return (ga.reshape(a.shape) if ga is not None else None), gb

        return _result(out, "matmul", (a, b), fn)

    if a.shape[:-2] != b.shape[:-2]:
        raise ShapeError(f"matmul: batch dims of {a.shape} and {b.shape} differ")
    lead = a.shape[:-2]
    a3 = a.data.reshape(-1, n, k)
    b3 = b.data.reshape(-1, k, m)
    out = kernels.bmm(a3, b3).reshape(lead + (n, m))

    def fn(g):
        g3 = g.reshape(-1, n, m)
        ga = gb = None
        if a.requires_grad:
            ga = kernels.bmm(g3, np.ascontiguousarray(b3.transpose(0, 2, 1))).reshape(a.shape)
        if b.requires_grad:
            gb = kernels.bmm(np.ascontiguousarray(a3.transpose(0, 2, 1)), g3).reshape(b.shape)
        return ga, gb

    return _result(out, "matmul", (a, b), fn)


def add(a: Tensor, b: Tensor) -> Tensor:
    _same_dtype("add", a, b)
    _broadcast_shape("add", a, b)
    out = a.data + b.data
    return _result(out, "add", (a, b), lambda g: (_unbroadcast(g, a.shape), _unbroadcast(g, b.shape)))


def mul(a: Tensor, b: Tensor) -> Tensor:
    _same_dtype("mul", a, b)
    _broadcast_shape("mul", a, b)
    out = a.data * b.data
    return _result(
        out,
        "mul",
        (a, b),
        lambda g: (_unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)),
    )


def scale(a: Tensor, c: float) -> Tensor:
    c = a.dtype.type(c)
    return _result(a.data * c, "scale", (a,), lambda g: (g * c,))


def relu(a: Tensor) -> Tensor:
    # derivative at exactly 0 is 0
    active = a.data > 0
    out = np.where(active, a.data, a.dtype.type(0))
    return _result(out, "relu", (a,), lambda g: (np.where(active, g, a.dtype.type(0)),))


def softmax(a: Tensor) -> Tensor:
    """Softmax over the last axis."""
    shifted = a.data - a.data.max(axis=-1, keepdims=True)
    e = np.exp(shifted)
    y = e / e.sum(axis=-1, keepdims=True)

    def fn(g):
        return (y * (g - (g * y).sum(axis=-1, keepdims=True)),)

    return _result(y, "softmax", (a,), fn)


def layer_norm(x: Tensor, gain: Tensor, bias: Tensor, eps: float = 1e-5) -> Tensor:
    _same_dtype("layer_norm", x, gain, bias)
    d = x.shape[-1]
    if gain.shape != (d,) or bias.shape != (d,):
        raise ShapeError(f"layer_norm: input {x.shape} with gain {gain.shape} and bias {bias.shape}")
    eps = x.dtype.type(eps)
    mu = x.data.mean(axis=-1, keepdims=True)
    centered = x.data - mu
    var = (centered * centered).mean(axis=-1, keepdims=True)
    rstd = 1 / np.sqrt(var + eps)
    xhat = centered * rstd
    out = xhat * gain.data + bias.data

    def fn(g):
        gx = None
        if x.requires_grad:
            dxhat = g * gain.data
            gx = rstd * (
                dxhat
                - dxhat.mean(axis=-1, keepdims=True)
                - xhat * (dxhat * xhat).mean(axis=-1, keepdims=True)
            )
        flat = (-1, d)
        gg = (g * xhat).reshape(flat).sum(axis=0) if gain.requires_grad else None
        gb = g.reshape(flat).sum(axis=0) if bias.requires_grad else None
        return gx, gg, gb

    return _result(out, "layer_norm", (x, gain, bias), fn)


def embedding_lookup(table: Tensor, ids) -> Tensor:
    ids = np.asarray(ids, dtype=np.int64)
    if table.data.ndim != 2:
        raise ShapeError(f"embedding_lookup: table shape {table.shape} is not 2-D")
    if ids.size and (ids.min() < 0 or ids.max() >= table.shape[0]):
        raise ShapeError(f"embedding_lookup: ids outside [0, {table.shape[0]}) for table {table.shape}")
    out = table.data[ids]

    def fn(g):
        gt = np.zeros_like(table.data)
        np.add.at(gt, ids.reshape(-1), g.reshape(-1, table.shape[1]))
        return (gt,)

    return _result(out, "embedding_lookup", (table,), fn)


def concat(tensors: Sequence[Tensor], axis: int = -1) -> Tensor:
    if not tensors:
        raise ShapeError("concat: no inputs")
    _same_dtype("concat", *tensors)
    try:
        out = np.concatenate([t.data for t in tensors], axis=axis)
    except ValueError:
        raise ShapeError(f"concat: shapes {[t.shape for t in tensors]} disagree off axis {axis}") from None
    bounds = np.cumsum([t.shape[axis] for t in tensors])[:-1]

    def fn(g):
        return tuple(np.split(g, bounds, axis=axis))

    return _result(out, "concat", tuple(tensors), fn)


def transpose(a: Tensor, axes: Sequence[int] | None = None) -> Tensor:
    axes = tuple(reversed(range(a.data.ndim))) if axes is None else tuple(axes)
    if sorted(axes) != list(range(a.data.ndim)):
        raise ShapeError(f"transpose: axes {axes} invalid for shape {a.shape}")
    inverse = tuple(np.argsort(axes))
    return _result(np.transpose(a.data, axes), "transpose", (a,), lambda g: (np.transpose(g, inverse),))


def reshape(a: Tensor, shape: Sequence[int]) -> Tensor:
    try:
        out = a.data.reshape(tuple(shape))
    except ValueError:
        raise ShapeError(f"reshape: cannot reshape {a.shape} to {tuple(shape)}") from None
    return _result(out, "reshape", (a,), lambda g: (g.reshape(a.shape),))


def mask_mul(a: Tensor, bits) -> Tensor:
    """Multiply by a 0/1 vector broadcast along the last axis."""
    bits = np.asarray(bits)
    if bits.ndim != 1 or bits.shape[0] != a.shape[-1]:
        raise ShapeError(f"mask_mul: bit vector of shape {bits.shape} for activation {a.shape}")
    if not np.isin(bits, (0, 1)).all():
        raise ShapeError("mask_mul: mask entries must be 0 or 1")
    m = bits.astype(a.dtype)
    return _result(a.data * m, "mask_mul", (a,), lambda g: (g * m,))


def sum_all(a: Tensor) -> Tensor:
    out = np.asarray(a.data.sum(), dtype=a.dtype)
    return _result(out, "sum", (a,), lambda g: (np.broadcast_to(g, a.shape).copy(),))


def dropout(a: Tensor, rate: float, rng: np.random.Generator) -> Tensor:
    if rate <= 0.0:
        return a
    keep = rng.random(a.shape) >= rate
    factor = (keep / (1.0 - rate)).astype(a.dtype)
    return _result(a.data * factor, "dropout", (a,), lambda g: (g * factor,))


def cross_entropy(logits: Tensor, targets, pad_id: int) -> Tensor:
    """Mean token negative log-likelihood over non-pad targets."""
    targets = np.asarray(targets, dtype=np.int64).reshape(-1)
    if logits.data.ndim != 2 or logits.shape[0] != targets.shape[0]:
        raise ShapeError(f"cross_entropy: logits {logits.shape} for {targets.shape[0]} targets")
    valid = targets != pad_id
    count = int(valid.sum())
    if count == 0:
        raise NumericError("empty loss support")
    vocab = logits.shape[1]
    if targets[valid].max() >= vocab or targets[valid].min() < 0:
        raise ShapeError(f"cross_entropy: target id outside vocabulary of size {vocab}")
    x = logits.data
    shifted = x - x.max(axis=1, keepdims=True)
    e = np.exp(shifted)
    z = e.sum(axis=1, keepdims=True)
    rows = np.nonzero(valid)[0]
    logp = shifted[rows, targets[rows]] - np.log(z[rows, 0])
    out = np.asarray(-logp.sum() / count, dtype=x.dtype)

    def fn(g):
        probs = e / z
        probs[rows, targets[rows]] -= 1
        probs[~valid] = 0
        return (probs * (g / count),)

    return _result(out, "cross_entropy", (logits,), fn)


_PRIMITIVES: dict[str, Callable[..., Tensor]] = {
    "matmul": matmul,
    "add": add,
    "mul": mul,
    "scale": scale,
    "relu": relu,
    "softmax": softmax,
    "layer_norm": layer_norm,
    "embedding_lookup": embedding_lookup,
    "concat": lambda *ts, axis=-1: concat(ts, axis=axis),
    "transpose": transpose,
    "reshape": reshape,
    "mask_mul": mask_mul,
    "sum": sum_all,
}


def forward_primitive(kind: str, inputs: Sequence, **kwargs) -> Tensor:
    """Apply a primitive by name, e.g. ``forward_primitive("relu", [x])``."""
    try:
        fn = _PRIMITIVES[kind]
    except KeyError:
        raise UsageError(f"unknown primitive '{kind}'") from None
    return fn(*inputs, **kwargs)


# -- reverse pass -------------------------------------------------------------

def _topo_order(root: Tensor) -> list[Tensor]:
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
        for p in node.parents:
            if p.requires_grad and id(p) not in seen:
                stack.append((p, False))
    return order


def backward(loss: Tensor) -> None:
    """Populate ``.grad`` on every reachable leaf (accumulating) and retained node."""
    if not loss.requires_grad or loss.is_leaf:
        raise UsageError("backward() needs a tensor produced by a tracked graph")
    if loss.data.size != 1:
        raise UsageError(f"backward() needs a scalar, got shape {loss.shape}")
    grads: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
    for node in reversed(_topo_order(loss)):
        g = grads.pop(id(node), None)
        if g is None:
            continue
        if node.is_leaf or node._retain:
            node.grad = g.copy() if node.grad is None else node.grad + g
        if node._backward is None:
            continue
        for parent, pg in zip(node.parents, node._backward(g)):
            if pg is None or not parent.requires_grad:
                continue
            _check_finite(pg, f"backward through {node.op}")
            prev = grads.get(id(parent))
            grads[id(parent)] = pg if prev is None else prev + pg


# -- parameters and optimisation ----------------------------------------------

class Parameter:
    """A named trainable tensor with Adam moment buffers."""

    __slots__ = ("name", "tensor", "exp_avg", "exp_avg_sq")

    def __init__(self, name: str, data: np.ndarray):
        self.name = name
        self.tensor = Tensor(data, requires_grad=True)
        self.exp_avg = np.zeros_like(self.tensor.data)
        self.exp_avg_sq = np.zeros_like(self.tensor.data)

    @property
    def data(self) -> np.ndarray:
        return self.tensor.data

    @property
    def grad(self) -> np.ndarray | None:
        return self.tensor.grad

    def reset_state(self) -> None:
        self.exp_avg = np.zeros_like(self.tensor.data)
        self.exp_avg_sq = np.zeros_like(self.tensor.data)


def zero_grad(params: Sequence[Parameter]) -> None:
    for p in params:
        p.tensor.grad = None


def adam_step(
    params: Sequence[Parameter],
    lr: float,
    beta1: float = 0.9,
    beta2: float = 0.98,
    eps: float = 1e-9,
    step_count: int = 1,
    update_masks: dict[str, np.ndarray] | None = None,
) -> None:
    """Bias-corrected Adam, in place. Gradients are left untouched.

    ``update_masks`` maps parameter names to boolean arrays; entries that are
    False keep their value and both moments unchanged for this step.
    """
    if step_count < 1:
        raise UsageError(f"adam_step: step_count must be >= 1, got {step_count}")
    for p in params:
        if p.grad is not None:
            _check_finite(p.grad, f"adam_step gradient of {p.name}")
    bc1 = 1.0 - beta1**step_count
    bc2 = 1.0 - beta2**step_count
    for p in params:
        g = p.grad
        if g is None:
            continue
        dt = p.data.dtype.type
        m = dt(beta1) * p.exp_avg + dt(1.0 - beta1) * g
        v = dt(beta2) * p.exp_avg_sq + dt(1.0 - beta2) * (g * g)
        update = dt(lr) * (m / dt(bc1)) / (np.sqrt(v / dt(bc2)) + dt(eps))
        new = p.data - update
        allowed = None if update_masks is None else update_masks.get(p.name)
        if allowed is not None:
            new = np.where(allowed, new, p.data)
            m = np.where(allowed, m, p.exp_avg)
            v = np.where(allowed, v, p.exp_avg_sq)
        p.exp_avg = m
        p.exp_avg_sq = v
        p.tensor.data = new
