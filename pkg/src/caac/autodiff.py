"""Dense float64 tensors with define-by-run reverse-mode differentiation.

Operations executed while a :class:`Tape` is active are recorded on it; calling
``tape.backward(loss)`` walks the recorded nodes in reverse and accumulates
gradients into every ``requires_grad`` tensor that the loss depends on.

Broadcasting is deliberately narrow: a scalar against any tensor, or a
``[d]`` vector against a ``[..., d]`` tensor. Anything else must go through
:func:`expand` so every backward rule stays easy to audit.
"""

from __future__ import annotations

import itertools
import math
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

__all__ = [
    "Tensor",
    "Tape",
    "AdamState",
    "Adam",
    "ShapeError",
    "NonFiniteError",
    "tensor",
    "constant",
    "add",
    "sub",
    "mul",
    "scale",
    "neg",
    "matmul",
    "transpose",
    "reshape",
    "expand",
    "concat",
    "take",
    "sum",
    "mean",
    "softmax",
    "layer_norm",
    "relu",
    "gelu",
    "exp",
    "log1p",
    "elementwise",
    "backward",
    "adam_step",
    "gradcheck",
]


class ShapeError(ValueError):
    """Operand shapes are incompatible for the requested operation."""


class NonFiniteError(FloatingPointError):
    """A forward computation produced NaN or Inf."""


_ids = itertools.count()


class Tensor:
    """An n-dimensional float64 array that may carry a gradient."""

    __slots__ = ("data", "requires_grad", "grad", "node_id", "uid", "__weakref__")

    def __init__(self, data, requires_grad: bool = False):
        arr = np.array(data, dtype=np.float64, order="C")
        if arr.ndim == 0:
            arr = arr.reshape(1)
        self.data = arr
        self.requires_grad = bool(requires_grad)
        self.grad: np.ndarray | None = None
        self.node_id: int | None = None
        self.uid = next(_ids)

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def size(self) -> int:
        return self.data.size

    def numpy(self) -> np.ndarray:
        return self.data

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad})"

    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, other)

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)


def tensor(data, requires_grad: bool = False) -> Tensor:
    return Tensor(data, requires_grad=requires_grad)


def constant(data) -> Tensor:
    return Tensor(data, requires_grad=False)


@dataclass
class _Node:
    inputs: tuple[Tensor, ...]
    output: Tensor
    backward: Callable[[np.ndarray], Sequence[np.ndarray | None]]


class Tape:
    """Ordered record of the operations of one forward pass.

    Use as a context manager; a fresh tape is expected for every forward pass.
    """

    _stack: list["Tape"] = []

    def __init__(self):
        self.nodes: list[_Node] = []

    def __enter__(self) -> "Tape":
        Tape._stack.append(self)
        return self

    def __exit__(self, *exc) -> None:
        Tape._stack.remove(self)

    @classmethod
    def active(cls) -> "Tape | None":
        return cls._stack[-1] if cls._stack else None

    def record(self, inputs, output, rule) -> None:
        output.node_id = len(self.nodes)
        self.nodes.append(_Node(tuple(inputs), output, rule))

    def backward(self, loss: Tensor) -> None:
        backward(self, loss)


def _check_finite(arr: np.ndarray, op: str) -> np.ndarray:
    if not np.isfinite(arr).all():
        raise NonFiniteError(f"{op} produced non-finite values")
    return arr


def _as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _emit(op: str, data: np.ndarray, inputs: Sequence[Tensor], rule) -> Tensor:
    _check_finite(data, op)
    out = Tensor.__new__(Tensor)
    out.data = data
    out.grad = None
    out.node_id = None
    out.uid = next(_ids)
    out.requires_grad = any(t.requires_grad for t in inputs)
    tape = Tape.active()
    if out.requires_grad and tape is not None:
        tape.record(inputs, out, rule)
    return out


# -- broadcasting ----------------------------------------------------------


def _broadcast_kind(a: np.ndarray, b: np.ndarray) -> str:
    """Classify a binary operand pair: 'same', 'scalar_a', 'scalar_b', 'vec_a', 'vec_b'."""
    if a.shape == b.shape:
        return "same"
    if a.size == 1 and a.ndim <= 1:
        return "scalar_a"
    if b.size == 1 and b.ndim <= 1:
        return "scalar_b"
    if b.ndim == 1 and a.ndim >= 1 and a.shape[-1] == b.shape[0]:
        return "vec_b"
    if a.ndim == 1 and b.ndim >= 1 and b.shape[-1] == a.shape[0]:
        return "vec_a"
    raise ShapeError(f"cannot broadcast shapes {a.shape} and {b.shape}")


def _reduce_to(grad: np.ndarray, kind: str, which: str, shape) -> np.ndarray:
    if kind == "same":
        return grad
    if kind == f"scalar_{which}":
        return np.array([grad.sum()]).reshape(shape)
    if kind == f"vec_{which}":
        return grad.reshape(-1, shape[0]).sum(axis=0)
    return grad


def _binary_operands(a, b):
    a, b = _as_tensor(a), _as_tensor(b)
    kind = _broadcast_kind(a.data, b.data)
    ad, bd = a.data, b.data
    if kind == "scalar_a":
        ad = ad.reshape(())
    elif kind == "scalar_b":
        bd = bd.reshape(())
    return a, b, ad, bd, kind


# -- elementwise -----------------------------------------------------------


def add(a, b) -> Tensor:
    a, b, ad, bd, kind = _binary_operands(a, b)
    out_shape = np.broadcast_shapes(ad.shape, bd.shape)

    def rule(g):
        return (_reduce_to(g, kind, "a", a.shape), _reduce_to(g, kind, "b", b.shape))

    return _emit("add", (ad + bd).reshape(out_shape), (a, b), rule)


def sub(a, b) -> Tensor:
    a, b, ad, bd, kind = _binary_operands(a, b)

    def rule(g):
        return (_reduce_to(g, kind, "a", a.shape), _reduce_to(-g, kind, "b", b.shape))

    return _emit("sub", ad - bd, (a, b), rule)


def mul(a, b) -> Tensor:
    a, b, ad, bd, kind = _binary_operands(a, b)

    def rule(g):
        return (
            _reduce_to(g * bd, kind, "a", a.shape),
            _reduce_to(g * ad, kind, "b", b.shape),
        )

    return _emit("mul", ad * bd, (a, b), rule)


def scale(x: Tensor, c: float) -> Tensor:
    """Multiply by a Python scalar that is not itself differentiated."""
    c = float(c)
    return _emit("scale", x.data * c, (x,), lambda g: (g * c,))


def neg(x: Tensor) -> Tensor:
    return scale(x, -1.0)


def relu(x: Tensor) -> Tensor:
    mask = x.data > 0
    return _emit("relu", np.where(mask, x.data, 0.0), (x,), lambda g: (g * mask,))


_GELU_C = math.sqrt(2.0 / math.pi)


def _sigmoid(z: np.ndarray) -> np.ndarray:
    e = np.exp(-np.abs(z))
    return np.where(z >= 0, 1.0 / (1.0 + e), e / (1.0 + e))


def gelu(x: Tensor) -> Tensor:
    """GELU, tanh approximation."""
    xd = x.data
    inner = _GELU_C * (xd + 0.044715 * xd**3)
    # 0.5 * (1 + tanh(u)) == sigmoid(2u); avoids cancellation when tanh saturates
    s_pos = _sigmoid(2.0 * inner)
    s_neg = _sigmoid(-2.0 * inner)
    out = xd * s_pos

    def rule(g):
        dinner = _GELU_C * (1.0 + 3 * 0.044715 * xd**2)
        return (g * (s_pos + 2.0 * xd * s_pos * s_neg * dinner),)

    return _emit("gelu", out, (x,), rule)


def exp(x: Tensor) -> Tensor:
    with np.errstate(over="ignore"):
        out = np.exp(x.data)
    return _emit("exp", out, (x,), lambda g: (g * out,))


def log1p(x: Tensor) -> Tensor:
    with np.errstate(invalid="ignore", divide="ignore"):
        out = np.log1p(x.data)
    xd = x.data
    return _emit("log1p", out, (x,), lambda g: (g / (1.0 + xd),))


_ELEMENTWISE = {
    "add": add,
    "sub": sub,
    "mul": mul,
    "relu": relu,
    "gelu": gelu,
    "exp": exp,
    "log1p": log1p,
}


def elementwise(kind: str, *operands) -> Tensor:
    """Dispatch an elementwise operation by name."""
    try:
        fn = _ELEMENTWISE[kind]
    except KeyError:
        raise ValueError(f"unknown elementwise op {kind!r}") from None
    return fn(*operands)


# -- structural ------------------------------------------------------------


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Matrix product over the last two axes.

    ``a`` may carry leading batch axes; ``b`` is either a 2-D matrix shared
    across the batch or has exactly ``a``'s batch axes.
    """
    if a.data.ndim < 2 or b.data.ndim < 2:
        raise ShapeError(f"matmul needs at least 2-D operands, got {a.shape} and {b.shape}")
    if a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"matmul shape mismatch: {a.shape} @ {b.shape}")
    if b.data.ndim > 2 and b.shape[:-2] != a.shape[:-2]:
        raise ShapeError(f"matmul batch mismatch: {a.shape} @ {b.shape}")
    ad, bd = a.data, b.data
    out = ad @ bd

    def rule(g):
        ga = g @ np.swapaxes(bd, -1, -2)
        if bd.ndim == 2:
            gb = ad.reshape(-1, ad.shape[-1]).T @ g.reshape(-1, g.shape[-1])
        else:
            gb = np.swapaxes(ad, -1, -2) @ g
        return ga, gb

    return _emit("matmul", out, (a, b), rule)


def transpose(x: Tensor, axes: Sequence[int]) -> Tensor:
    axes = tuple(axes)
    inv = tuple(np.argsort(axes))
    out = np.ascontiguousarray(np.transpose(x.data, axes))
    return _emit("transpose", out, (x,), lambda g: (np.transpose(g, inv),))


def reshape(x: Tensor, shape: Sequence[int]) -> Tensor:
    old = x.shape
    try:
        out = x.data.reshape(tuple(shape))
    except ValueError as err:
        raise ShapeError(f"cannot reshape {old} to {tuple(shape)}") from err
    return _emit("reshape", out, (x,), lambda g: (g.reshape(old),))


def expand(x: Tensor, axis: int, n: int) -> Tensor:
    """Insert a new axis at ``axis`` and repeat ``x`` ``n`` times along it."""
    out = np.repeat(np.expand_dims(x.data, axis), n, axis=axis)
    return _emit("expand", out, (x,), lambda g: (g.sum(axis=axis),))


def concat(xs: Sequence[Tensor], axis: int) -> Tensor:
    xs = tuple(xs)
    out = np.concatenate([t.data for t in xs], axis=axis)
    bounds = np.cumsum([t.shape[axis] for t in xs])[:-1]

    def rule(g):
        return tuple(np.split(g, bounds, axis=axis))

    return _emit("concat", out, xs, rule)


def take(x: Tensor, axis: int, start: int, stop: int) -> Tensor:
    """Contiguous slice ``[start:stop]`` along ``axis``."""
    index = [slice(None)] * x.data.ndim
    index[axis] = slice(start, stop)
    index = tuple(index)
    shape = x.shape

    def rule(g):
        full = np.zeros(shape)
        full[index] = g
        return (full,)

    return _emit("take", np.ascontiguousarray(x.data[index]), (x,), rule)


def sum(x: Tensor) -> Tensor:  # noqa: A001 - mirrors numpy naming
    shape = x.shape
    return _emit("sum", np.array([x.data.sum()]), (x,), lambda g: (np.full(shape, g[0]),))


def mean(x: Tensor) -> Tensor:
    shape, n = x.shape, x.size
    return _emit(
        "mean", np.array([x.data.mean()]), (x,), lambda g: (np.full(shape, g[0] / n),)
    )


# -- fused -----------------------------------------------------------------


def softmax(x: Tensor) -> Tensor:
    """Softmax along the last axis (max-subtracted)."""
    shifted = x.data - x.data.max(axis=-1, keepdims=True)
    e = np.exp(shifted)
    y = e / e.sum(axis=-1, keepdims=True)

    def rule(g):
        return (y * (g - (g * y).sum(axis=-1, keepdims=True)),)

    return _emit("softmax", y, (x,), rule)


def layer_norm(x: Tensor, gain: Tensor, bias: Tensor, eps: float = 1e-5) -> Tensor:
    d = x.shape[-1]
    if d < 2:
        raise ShapeError("layer_norm needs a last axis of at least 2")
    if gain.shape != (d,) or bias.shape != (d,):
        raise ShapeError(f"layer_norm affine params must be [{d}], got {gain.shape}, {bias.shape}")
    xd = x.data
    mu = xd.mean(axis=-1, keepdims=True)
    xc = xd - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv
    out = xhat * gain.data + bias.data

    def rule(g):
        gx = g * gain.data
        dx = inv * (
            gx - gx.mean(axis=-1, keepdims=True) - xhat * (gx * xhat).mean(axis=-1, keepdims=True)
        )
        flat_g = g.reshape(-1, d)
        return dx, (flat_g * xhat.reshape(-1, d)).sum(axis=0), flat_g.sum(axis=0)

    return _emit("layer_norm", out, (x, gain, bias), rule)


# -- reverse pass ----------------------------------------------------------


def backward(tape: Tape, loss: Tensor) -> None:
    """Populate ``.grad`` on every differentiable tensor reachable from ``loss``."""
    if loss.size != 1:
        raise ShapeError(f"backward needs a scalar loss, got shape {loss.shape}")
    grads: dict[int, np.ndarray] = {loss.uid: np.ones_like(loss.data)}
    for node in reversed(tape.nodes):
        g = grads.pop(node.output.uid, None)
        if g is None:
            continue
        node.output.grad = g
        for inp, gi in zip(node.inputs, node.backward(g)):
            if gi is None or not inp.requires_grad:
                continue
            if inp.node_id is None or inp.node_id >= len(tape.nodes) or tape.nodes[inp.node_id].output is not inp:
                # leaf: accumulate directly
                inp.grad = gi.copy() if inp.grad is None else inp.grad + gi
            elif inp.uid in grads:
                grads[inp.uid] = grads[inp.uid] + gi
            else:
                grads[inp.uid] = gi
    if loss.node_id is None and loss.requires_grad:
        loss.grad = np.ones_like(loss.data)


# -- optimizer -------------------------------------------------------------


@dataclass
class AdamState:
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    epsilon: float = 1e-8
    t: int = 0
    m: list[np.ndarray] = field(default_factory=list)
    v: list[np.ndarray] = field(default_factory=list)


def adam_step(params: Sequence[Tensor], state: AdamState, grads=None) -> AdamState:
    """One bias-corrected Adam update, in place on ``params``.

    ``grads`` defaults to each parameter's ``.grad``; a missing gradient counts
    as zero.
    """
    if grads is None:
        grads = [p.grad for p in params]
    if len(grads) != len(params):
        raise ValueError(f"{len(params)} parameters but {len(grads)} gradients")
    if not state.m:
        state.m = [np.zeros_like(p.data) for p in params]
        state.v = [np.zeros_like(p.data) for p in params]
    if len(state.m) != len(params):
        raise ValueError("optimizer state does not match the parameter list")
    state.t += 1
    b1, b2 = state.beta1, state.beta2
    c1 = 1.0 - b1**state.t
    c2 = 1.0 - b2**state.t
    for p, g, m, v in zip(params, grads, state.m, state.v):
        if g is None:
            g = np.zeros_like(p.data)
        elif g.shape != p.data.shape:
            raise ValueError(f"gradient shape {g.shape} does not match parameter {p.shape}")
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * g * g
        p.data -= state.lr * (m / c1) / (np.sqrt(v / c2) + state.epsilon)
    return state


class Adam:
    """Thin owner of an :class:`AdamState` bound to a parameter list."""

    def __init__(self, params: Sequence[Tensor], lr=1e-3, beta1=0.9, beta2=0.999, epsilon=1e-8):
        self.params = list(params)
        self.state = AdamState(lr=lr, beta1=beta1, beta2=beta2, epsilon=epsilon)

    def zero_grad(self) -> None:
        for p in self.params:
            p.grad = None

    def step(self) -> None:
        adam_step(self.params, self.state)


# -- gradient checking -----------------------------------------------------


def gradcheck(fn: Callable[..., Tensor], inputs: Sequence[np.ndarray], h: float = 1e-5,
              guard: float = 1e-8) -> float:
    """Max elementwise relative error between reverse-mode and central differences.

    ``fn`` maps Tensors to a scalar Tensor. Relative error is
    ``|a - n| / max(|a|, |n|, guard)``.
    """
    arrays = [np.array(x, dtype=np.float64) for x in inputs]
    ts = [Tensor(x, requires_grad=True) for x in arrays]
    with Tape() as tape:
        loss = fn(*ts)
    tape.backward(loss)
    worst = 0.0
    for i, x in enumerate(arrays):
        analytic = ts[i].grad if ts[i].grad is not None else np.zeros_like(x)
        flat = x.reshape(-1)
        for j in range(flat.size):
            orig = flat[j]
            flat[j] = orig + h
            fp = fn(*[Tensor(a) for a in arrays]).data[0]
            flat[j] = orig - h
            fm = fn(*[Tensor(a) for a in arrays]).data[0]
            flat[j] = orig
            numeric = (fp - fm) / (2 * h)
            a = analytic.reshape(-1)[j]
            err = abs(a - numeric) / max(abs(a), abs(numeric), guard)
            worst = max(worst, err)
    return worst
