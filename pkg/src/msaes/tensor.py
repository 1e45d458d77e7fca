"""Dense tensors with tape-based reverse-mode differentiation.

Every trainable computation in the package is expressed through the
functions in this module. Operations are recorded on the active :class:`Tape`
(entered with ``with Tape() as tape:``) whenever one of their inputs requires
a gradient; :func:`backward` then walks the tape in reverse.

Backward rules live in the ``BACKWARD`` registry keyed by op name, so a rule
can be swapped out (the gradcheck harness relies on this for fault injection).
"""

from __future__ import annotations

import contextlib
import logging
from dataclasses import dataclass, field
from typing import Any, Callable, Iterator, Sequence

import numpy as np

logger = logging.getLogger(__name__)

_DTYPES: list[type] = [np.float32]
_TAPES: list["Tape"] = []


class ShapeError(ValueError):
    """Operand shapes are incompatible for the requested operation."""


def default_dtype() -> type:
    return _DTYPES[-1]


@contextlib.contextmanager
def precision(dtype: type) -> Iterator[None]:
    """Temporarily change the dtype used for newly created tensors.

    float32 is the working precision; float64 is used by finite-difference
    checks where float32 round-off would swamp the comparison.
    """
    _DTYPES.append(np.dtype(dtype).type)
    try:
        yield
    finally:
        _DTYPES.pop()


class Tensor:
    __slots__ = ("data", "requires_grad", "grad", "name")

    def __init__(self, data: Any, requires_grad: bool = False, name: str | None = None,
                 dtype: type | None = None):
        arr = np.asarray(data, dtype=dtype or default_dtype())
        if arr.ndim == 0:
            arr = arr.reshape(())
        self.data = arr
        self.requires_grad = requires_grad
        self.grad: np.ndarray | None = None
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

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else _raise_nonscalar(self)

    def zero_grad(self) -> None:
        self.grad = None

    def detach(self) -> "Tensor":
        return Tensor(self.data.copy(), dtype=self.data.dtype.type)

    def __repr__(self) -> str:
        tag = f" name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad}{tag})"

    def __add__(self, other): return add(self, other)
    def __radd__(self, other): return add(other, self)
    def __sub__(self, other): return sub(self, other)
    def __rsub__(self, other): return sub(other, self)
    def __mul__(self, other): return mul(self, other)
    def __rmul__(self, other): return mul(other, self)
    def __truediv__(self, other): return div(self, other)
    def __neg__(self): return neg(self)
    def __matmul__(self, other): return matmul(self, other)
    def __getitem__(self, index): return getitem(self, index)

    @property
    def T(self) -> "Tensor":
        return transpose(self)


def _raise_nonscalar(t: Tensor) -> float:
    raise ShapeError(f"item() needs a single-element tensor, got shape {t.shape}")


def as_tensor(x: Any) -> Tensor:
    if isinstance(x, Tensor):
        return x
    return Tensor(x)


def parameter(data: Any, name: str | None = None) -> Tensor:
    return Tensor(data, requires_grad=True, name=name)


@dataclass
class Node:
    op: str
    inputs: tuple[Tensor, ...]
    output: Tensor
    ctx: dict = field(default_factory=dict)


class Tape:
    """Ordered record of differentiable operations.

    Nodes are appended as operations execute, so every node's inputs were
    produced earlier on the tape (or are leaves). A tape can be reused for
    several :func:`backward` calls; gradients accumulate into ``.grad`` until
    the caller clears them.
    """

    def __init__(self) -> None:
        self.nodes: list[Node] = []

    def __enter__(self) -> "Tape":
        _TAPES.append(self)
        return self

    def __exit__(self, *exc) -> None:
        _TAPES.pop()

    def __len__(self) -> int:
        return len(self.nodes)

    def reset(self) -> None:
        self.nodes.clear()


@contextlib.contextmanager
def no_record() -> Iterator[None]:
    """Suspend recording, e.g. for evaluation inside a training step."""
    saved = list(_TAPES)
    _TAPES.clear()
    try:
        yield
    finally:
        _TAPES.extend(saved)


def _record(op: str, inputs: Sequence[Tensor], out_data: np.ndarray, **ctx) -> Tensor:
    needs = bool(_TAPES) and any(t.requires_grad for t in inputs)
    out = Tensor(out_data, requires_grad=needs, dtype=out_data.dtype.type)
    if needs:
        _TAPES[-1].nodes.append(Node(op, tuple(inputs), out, ctx))
    return out


def _unbroadcast(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    if grad.shape == shape:
        return grad
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, n in enumerate(shape):
        if n == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad


def _check_elementwise(a: Tensor, b: Tensor, op: str) -> None:
    if a.shape == b.shape or a.size == 1 or b.size == 1:
        return
    try:
        np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise ShapeError(f"{op}: shapes {a.shape} and {b.shape} do not agree") from None


# ---------------------------------------------------------------------------
# elementwise arithmetic


def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _check_elementwise(a, b, "add")
    return _record("add", (a, b), a.data + b.data)


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _check_elementwise(a, b, "sub")
    return _record("sub", (a, b), a.data - b.data)


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _check_elementwise(a, b, "mul")
    return _record("mul", (a, b), a.data * b.data)


def div(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _check_elementwise(a, b, "div")
    return _record("div", (a, b), a.data / b.data)


def neg(a) -> Tensor:
    a = as_tensor(a)
    return _record("neg", (a,), -a.data)


def square(a) -> Tensor:
    a = as_tensor(a)
    return _record("square", (a,), a.data * a.data)


def sqrt(a) -> Tensor:
    a = as_tensor(a)
    out = np.sqrt(a.data)
    return _record("sqrt", (a,), out, out=out)


def exp(a) -> Tensor:
    a = as_tensor(a)
    out = np.exp(a.data)
    return _record("exp", (a,), out, out=out)


def log(a) -> Tensor:
    a = as_tensor(a)
    return _record("log", (a,), np.log(a.data))


def tanh(a) -> Tensor:
    a = as_tensor(a)
    out = np.tanh(a.data)
    return _record("tanh", (a,), out, out=out)


def sigmoid(a) -> Tensor:
    a = as_tensor(a)
    x = a.data
    # split by sign so exp never overflows
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return _record("sigmoid", (a,), out, out=out)


def relu(a) -> Tensor:
    a = as_tensor(a)
    return _record("relu", (a,), np.maximum(a.data, 0))


_GELU_C = float(np.sqrt(2.0 / np.pi))


def gelu(a) -> Tensor:
    """tanh approximation of GELU."""
    a = as_tensor(a)
    x = a.data
    inner = np.tanh(_GELU_C * (x + 0.044715 * (x * x * x)))
    return _record("gelu", (a,), 0.5 * x * (1.0 + inner), inner=inner)


_ELEMENTWISE = {"add": add, "mul": mul, "sub": sub, "div": div,
                "tanh": tanh, "sigmoid": sigmoid, "relu": relu, "gelu": gelu}


def elementwise(op: str, *operands) -> Tensor:
    try:
        fn = _ELEMENTWISE[op]
    except KeyError:
        raise ValueError(f"unknown elementwise op {op!r}") from None
    return fn(*operands)


# ---------------------------------------------------------------------------
# linear algebra and reductions


def matmul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim < 1 or b.ndim < 1 or a.shape[-1] != b.shape[-2 if b.ndim > 1 else 0]:
        raise ShapeError(f"matmul: inner dimensions of {a.shape} and {b.shape} differ")
    if a.ndim == 1 or b.ndim == 1:
        raise ShapeError("matmul expects operands of rank >= 2; reshape vectors first")
    if a.ndim > 2 and b.ndim == 2:
        # fold leading axes into one GEMM instead of a batched loop
        lead = a.shape[:-1]
        out = (a.data.reshape(-1, a.shape[-1]) @ b.data).reshape(*lead, b.shape[-1])
        return _record("matmul", (a, b), out, folded=True)
    return _record("matmul", (a, b), np.matmul(a.data, b.data), folded=False)


def sum(a, axis=None, keepdims: bool = False) -> Tensor:  # noqa: A001
    a = as_tensor(a)
    return _record("sum", (a,), np.sum(a.data, axis=axis, keepdims=keepdims),
                   axis=axis, keepdims=keepdims)


def mean(a, axis=None, keepdims: bool = False) -> Tensor:
    a = as_tensor(a)
    n = a.size if axis is None else int(np.prod([a.shape[i] for i in np.atleast_1d(axis)]))
    return mul(sum(a, axis=axis, keepdims=keepdims), 1.0 / n)


def reshape(a, shape) -> Tensor:
    a = as_tensor(a)
    return _record("reshape", (a,), a.data.reshape(shape))


def transpose(a, axes=None) -> Tensor:
    a = as_tensor(a)
    if axes is None:
        axes = tuple(range(a.ndim))[::-1]
    return _record("transpose", (a,), np.transpose(a.data, axes), axes=tuple(axes))


def getitem(a, index) -> Tensor:
    a = as_tensor(a)
    return _record("getitem", (a,), np.asarray(a.data[index]), index=index)


def concat(tensors: Sequence, axis: int = -1) -> Tensor:
    ts = [as_tensor(t) for t in tensors]
    out = np.concatenate([t.data for t in ts], axis=axis)
    sizes = [t.shape[axis] for t in ts]
    return _record("concat", ts, out, axis=axis, sizes=sizes)


def stack(tensors: Sequence, axis: int = 0) -> Tensor:
    ts = [as_tensor(t) for t in tensors]
    return _record("stack", ts, np.stack([t.data for t in ts], axis=axis), axis=axis)


def embedding(table: Tensor, ids: np.ndarray) -> Tensor:
    ids = np.asarray(ids, dtype=np.int64)
    if ids.size and (ids.min() < 0 or ids.max() >= table.shape[0]):
        raise ShapeError(f"embedding ids out of range for table of {table.shape[0]} rows")
    return _record("embedding", (table,), table.data[ids], ids=ids)


def softmax(v, axis: int = -1, mask: np.ndarray | None = None) -> Tensor:
    """Numerically stable softmax; ``mask`` (broadcastable, 1 = keep) zeroes
    excluded positions exactly."""
    v = as_tensor(v)
    if v.shape[axis] < 1:
        raise ShapeError("softmax over an empty axis")
    x = v.data
    if not np.all(np.isfinite(x)):
        raise FloatingPointError("softmax received non-finite input")
    if mask is not None:
        keep = np.broadcast_to(np.asarray(mask, dtype=bool), x.shape)
        x = np.where(keep, x, -np.inf)
    shifted = x - np.max(x, axis=axis, keepdims=True)
    e = np.exp(shifted)
    out = e / np.sum(e, axis=axis, keepdims=True)
    return _record("softmax", (v,), out.astype(v.data.dtype, copy=False), out=out, axis=axis)


def max_over_rows(h, mask: np.ndarray | None = None) -> Tensor:
    """Column-wise max over the second-to-last axis.

    ``h`` is ``(..., n, d)``; ``mask`` is ``(..., n)`` with 1 for rows that take
    part. Ties go to the lowest row index.
    """
    h = as_tensor(h)
    if h.ndim < 2 or h.shape[-2] == 0:
        raise ShapeError(f"max_over_rows needs at least one row, got shape {h.shape}")
    x = h.data
    if mask is not None:
        keep = np.asarray(mask, dtype=bool)
        if not np.all(keep.any(axis=-1)):
            raise ShapeError("max_over_rows: every row is masked")
        x = np.where(keep[..., None], x, -np.inf)
    idx = np.argmax(x, axis=-2)  # first occurrence
    out = np.take_along_axis(x, idx[..., None, :], axis=-2)[..., 0, :]
    return _record("max_over_rows", (h,), out, idx=idx)


def layer_norm(x, gamma: Tensor, beta: Tensor, eps: float = 1e-12) -> Tensor:
    x = as_tensor(x)
    mu = x.data.mean(axis=-1, keepdims=True)
    xc = x.data - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv
    out = xhat * gamma.data + beta.data
    return _record("layer_norm", (x, gamma, beta), out, xhat=xhat, inv=inv)


def make_rng(seed: int) -> np.random.Generator:
    """Counter-based (Philox) generator used for dropout masks."""
    return np.random.Generator(np.random.Philox(key=int(seed)))


def dropout(t, rate: float, training: bool, rng: np.random.Generator | None = None) -> Tensor:
    t = as_tensor(t)
    if not 0.0 <= rate < 1.0:
        raise ValueError(f"dropout rate must lie in [0, 1), got {rate}")
    if not training or rate == 0.0:
        return t
    if rng is None:
        raise ValueError("training-mode dropout needs an rng")
    keep = rng.random(t.shape) >= rate
    scale = np.asarray(1.0 / (1.0 - rate), dtype=t.data.dtype)
    m = keep.astype(t.data.dtype) * scale
    return _record("dropout", (t,), t.data * m, m=m)


# ---------------------------------------------------------------------------
# backward rules: fn(grad_out, node) -> tuple of input grads (None = skip)


def _b_add(g, n):
    a, b = n.inputs
    return _unbroadcast(g, a.shape), _unbroadcast(g, b.shape)


def _b_sub(g, n):
    a, b = n.inputs
    return _unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)


def _b_mul(g, n):
    a, b = n.inputs
    return _unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)


def _b_div(g, n):
    a, b = n.inputs
    return (_unbroadcast(g / b.data, a.shape),
            _unbroadcast(-g * a.data / (b.data * b.data), b.shape))


def _b_matmul(g, n):
    a, b = n.inputs
    if n.ctx["folded"]:
        g2 = g.reshape(-1, g.shape[-1])
        ga = (g2 @ b.data.T).reshape(a.shape) if a.requires_grad else None
        gb = a.data.reshape(-1, a.shape[-1]).T @ g2 if b.requires_grad else None
        return ga, gb
    ga = np.matmul(g, np.swapaxes(b.data, -1, -2)) if a.requires_grad else None
    gb = np.matmul(np.swapaxes(a.data, -1, -2), g) if b.requires_grad else None
    return (None if ga is None else _unbroadcast(ga, a.shape),
            None if gb is None else _unbroadcast(gb, b.shape))


def _b_sum(g, n):
    (a,) = n.inputs
    axis = n.ctx["axis"]
    if axis is not None and not n.ctx["keepdims"]:
        g = np.expand_dims(g, axis)
    return (np.broadcast_to(g, a.shape),)


def _b_getitem(g, n):
    (a,) = n.inputs
    out = np.zeros(a.shape, dtype=g.dtype)
    np.add.at(out, n.ctx["index"], g)
    return (out,)


def _b_concat(g, n):
    axis = n.ctx["axis"]
    splits = np.cumsum(n.ctx["sizes"])[:-1]
    return tuple(np.split(g, splits, axis=axis))


def _b_stack(g, n):
    axis = n.ctx["axis"]
    return tuple(np.take(g, i, axis=axis) for i in range(len(n.inputs)))


def _b_embedding(g, n):
    (table,) = n.inputs
    out = np.zeros(table.shape, dtype=g.dtype)
    np.add.at(out, n.ctx["ids"], g)
    return (out,)


def _b_softmax(g, n):
    y = n.ctx["out"]
    axis = n.ctx["axis"]
    return (y * (g - np.sum(g * y, axis=axis, keepdims=True)),)


def _b_max_over_rows(g, n):
    (h,) = n.inputs
    out = np.zeros(h.shape, dtype=g.dtype)
    np.put_along_axis(out, n.ctx["idx"][..., None, :], g[..., None, :], axis=-2)
    return (out,)


def _b_layer_norm(g, n):
    x, gamma, beta = n.inputs
    xhat, inv = n.ctx["xhat"], n.ctx["inv"]
    gx_hat = g * gamma.data
    d = x.shape[-1]
    gx = inv / d * (d * gx_hat - gx_hat.sum(-1, keepdims=True)
                    - xhat * (gx_hat * xhat).sum(-1, keepdims=True))
    return (gx, _unbroadcast(g * xhat, gamma.shape), _unbroadcast(g, beta.shape))


def _b_gelu(g, n):
    (a,) = n.inputs
    x, t = a.data, n.ctx["inner"]
    dinner = _GELU_C * (1.0 + 3 * 0.044715 * x * x)
    return (g * (0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * dinner),)


BACKWARD: dict[str, Callable[[np.ndarray, Node], tuple]] = {
    "add": _b_add,
    "sub": _b_sub,
    "mul": _b_mul,
    "div": _b_div,
    "neg": lambda g, n: (-g,),
    "square": lambda g, n: (2.0 * g * n.inputs[0].data,),
    "sqrt": lambda g, n: (g * 0.5 / n.ctx["out"],),
    "exp": lambda g, n: (g * n.ctx["out"],),
    "log": lambda g, n: (g / n.inputs[0].data,),
    "tanh": lambda g, n: (g * (1.0 - n.ctx["out"] ** 2),),
    "sigmoid": lambda g, n: (g * n.ctx["out"] * (1.0 - n.ctx["out"]),),
    "relu": lambda g, n: (g * (n.inputs[0].data > 0),),
    "gelu": _b_gelu,
    "matmul": _b_matmul,
    "sum": _b_sum,
    "reshape": lambda g, n: (g.reshape(n.inputs[0].shape),),
    "transpose": lambda g, n: (np.transpose(g, np.argsort(n.ctx["axes"])),),
    "getitem": _b_getitem,
    "concat": _b_concat,
    "stack": _b_stack,
    "embedding": _b_embedding,
    "softmax": _b_softmax,
    "max_over_rows": _b_max_over_rows,
    "layer_norm": _b_layer_norm,
    "dropout": lambda g, n: (g * n.ctx["m"],),
}


def backward(loss: Tensor, tape: Tape) -> None:
    """Accumulate d(loss)/d(leaf) into ``.grad`` of every leaf on ``tape``.

    Leaves that sit on the tape but are not connected to ``loss`` receive a
    zero gradient. Repeated calls add to existing gradients.
    """
    if loss.size != 1:
        raise ShapeError(f"backward needs a scalar loss, got shape {loss.shape}")
    produced = {id(node.output) for node in tape.nodes}
    if id(loss) not in produced and not loss.requires_grad:
        raise ValueError("loss was not produced on this tape")
    grads: dict[int, np.ndarray] = {id(loss): np.ones(loss.shape, dtype=loss.data.dtype)}
    leaves: dict[int, Tensor] = {}
    for node in reversed(tape.nodes):
        for t in node.inputs:
            if t.requires_grad and id(t) not in produced:
                leaves[id(t)] = t
        g = grads.pop(id(node.output), None)
        if g is None:
            continue
        in_grads = BACKWARD[node.op](g, node)
        for t, gi in zip(node.inputs, in_grads):
            if gi is None or not t.requires_grad:
                continue
            key = id(t)
            if key in grads:
                grads[key] = grads[key] + gi
            else:
                grads[key] = gi
    if id(loss) not in produced and loss.requires_grad:
        leaves[id(loss)] = loss
    for key, leaf in leaves.items():
        g = grads.get(key)
        if g is None:
            g = np.zeros(leaf.shape, dtype=leaf.data.dtype)
        leaf.grad = g.astype(leaf.data.dtype, copy=False) if leaf.grad is None else leaf.grad + g


def numerical_grad(fn: Callable[[], Tensor], t: Tensor, eps: float = 1e-3) -> np.ndarray:
    """Central finite differences of scalar ``fn()`` with respect to ``t.data``."""
    out = np.zeros(t.shape, dtype=np.float64)
    flat = t.data.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + eps
        fp = fn().item()
        flat[i] = orig - eps
        fm = fn().item()
        flat[i] = orig
        out.reshape(-1)[i] = (fp - fm) / (2 * eps)
    return out


def relative_error(analytic: np.ndarray, numeric: np.ndarray, floor: float = 1e-8) -> float:
    """Norm-wise relative error ``|a - n| / max(|a|, |n|, floor)``.

    The floor keeps gradients that are identically zero (e.g. attention key
    biases, which cancel inside the softmax) from turning round-off noise into
    a unit relative error.
    """
    a = np.asarray(analytic, dtype=np.float64).ravel()
    n = np.asarray(numeric, dtype=np.float64).ravel()
    scale = max(np.linalg.norm(a), np.linalg.norm(n), floor)
    return float(np.linalg.norm(a - n) / scale)
