"""Dense tensors with tape-based reverse-mode differentiation.

Everything the forecaster differentiates is built from the primitives in
``PRIMITIVES``. A primitive is a pair ``(forward, vjp)`` working on plain
float64 numpy arrays; :func:`apply_primitive` wraps the arrays in
:class:`Tensor` objects and records the call on the active
:class:`GradientTape` so that :func:`backward` can replay adjoints.

Example::

    w = Parameter("w", np.ones(3))
    with GradientTape() as tape:
        loss = ops.sum(ops.square(w))
    backward(tape, loss)
    w.grad  # array([2., 2., 2.])
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable, Iterable, Sequence

import numpy as np

__all__ = [
    "Tensor",
    "Parameter",
    "GradientTape",
    "ShapeError",
    "GradientError",
    "PRIMITIVES",
    "apply_primitive",
    "active_tape",
    "backward",
    "gradient_check",
    "GradientCheckReport",
    "adam_step",
    "clip_global_norm",
    "global_grad_norm",
    "ops",
]


class ShapeError(ValueError):
    """Raised when a primitive receives inputs of non-conforming shapes."""

    def __init__(self, kind: str, shapes: Sequence[tuple], detail: str = ""):
        self.kind = kind
        self.shapes = tuple(tuple(s) for s in shapes)
        msg = f"{kind}: incompatible shapes {', '.join(str(s) for s in self.shapes)}"
        if detail:
            msg += f" ({detail})"
        super().__init__(msg)


class GradientError(ArithmeticError):
    """Non-finite values met while propagating or applying gradients."""


class Tensor:
    """A float64 array that can take part in recorded computations."""

    __slots__ = ("data", "requires_grad", "grad", "__weakref__")
    __array_priority__ = 100  # keep ndarray <op> Tensor dispatching to Tensor

    def __init__(self, data, requires_grad: bool = False):
        self.data = np.array(data, dtype=np.float64)
        self.requires_grad = requires_grad
        self.grad = np.zeros_like(self.data) if requires_grad else None

    @property
    def shape(self) -> tuple:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    def item(self) -> float:
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else float("nan")

    def numpy(self) -> np.ndarray:
        return self.data

    def __repr__(self):
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad})"

    # operator sugar; every operator routes through apply_primitive
    def __add__(self, other):
        return ops.add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return ops.subtract(self, other)

    def __rsub__(self, other):
        return ops.subtract(other, self)

    def __mul__(self, other):
        if np.isscalar(other):
            return ops.scale(self, float(other))
        return ops.multiply(self, other)

    def __rmul__(self, other):
        return self.__mul__(other)

    def __truediv__(self, other):
        if np.isscalar(other):
            return ops.scale(self, 1.0 / float(other))
        return ops.divide(self, other)

    def __rtruediv__(self, other):
        return ops.divide(other, self)

    def __neg__(self):
        return ops.scale(self, -1.0)

    def __matmul__(self, other):
        return ops.matmul(self, other)

    def __getitem__(self, key):
        return ops.slice(self, key)


class Parameter(Tensor):
    """A named trainable tensor carrying its gradient and Adam moments."""

    __slots__ = ("name", "adam_m", "adam_v", "step_count")

    def __init__(self, name: str, value):
        super().__init__(value, requires_grad=True)
        self.name = name
        self.adam_m = np.zeros_like(self.data)
        self.adam_v = np.zeros_like(self.data)
        self.step_count = 0

    def zero_grad(self):
        self.grad[...] = 0.0

    def __repr__(self):
        return f"Parameter({self.name!r}, shape={self.shape})"


# ---------------------------------------------------------------------------
# tape


@dataclass
class TapeRecord:
    kind: str
    inputs: tuple
    output: Tensor
    attrs: dict


class GradientTape:
    """Ordered log of executed primitives.

    Use as a context manager; while active, every primitive whose output
    depends on a tensor with ``requires_grad`` is appended to ``records``.
    """

    def __init__(self):
        self.records: list[TapeRecord] = []

    def __enter__(self):
        _TAPE_STACK.append(self)
        return self

    def __exit__(self, *exc):
        _TAPE_STACK.pop()
        return False

    def __len__(self):
        return len(self.records)

    def clear(self):
        self.records.clear()


_TAPE_STACK: list[GradientTape] = []


def active_tape() -> GradientTape | None:
    return _TAPE_STACK[-1] if _TAPE_STACK else None


# ---------------------------------------------------------------------------
# primitives


def _unbroadcast(g: np.ndarray, shape: tuple) -> np.ndarray:
    """Sum ``g`` down to ``shape`` (reverse of numpy broadcasting)."""
    if g.shape == shape:
        return g
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for axis, n in enumerate(shape):
        if n == 1 and g.shape[axis] != 1:
            g = g.sum(axis=axis, keepdims=True)
    return g


def _broadcast_check(kind, a, b):
    try:
        np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise ShapeError(kind, [a.shape, b.shape], "not broadcastable") from None


def _fwd_matmul(a, b):
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[0]:
        raise ShapeError("matmul", [a.shape, b.shape])
    return a @ b


def _vjp_matmul(g, out, a, b):
    return g @ b.T, a.T @ g


def _fwd_add(a, b):
    _broadcast_check("add", a, b)
    return a + b


def _vjp_add(g, out, a, b):
    return _unbroadcast(g, a.shape), _unbroadcast(g, b.shape)


def _fwd_subtract(a, b):
    _broadcast_check("subtract", a, b)
    return a - b


def _vjp_subtract(g, out, a, b):
    return _unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)


def _fwd_multiply(a, b):
    _broadcast_check("multiply", a, b)
    return a * b


def _vjp_multiply(g, out, a, b):
    return _unbroadcast(g * b, a.shape), _unbroadcast(g * a, b.shape)


def _fwd_divide(a, b):
    _broadcast_check("divide", a, b)
    return a / b


def _vjp_divide(g, out, a, b):
    return _unbroadcast(g / b, a.shape), _unbroadcast(-g * out / b, b.shape)


def _fwd_scale(a, *, scalar):
    return a * scalar


def _vjp_scale(g, out, a, *, scalar):
    return (g * scalar,)


def _fwd_sigmoid(a):
    # split by sign so exp never overflows
    out = np.empty_like(a)
    pos = a >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-a[pos]))
    e = np.exp(a[~pos])
    out[~pos] = e / (1.0 + e)
    return out


def _vjp_sigmoid(g, out, a):
    return (g * out * (1.0 - out),)


def _fwd_tanh(a):
    return np.tanh(a)


def _vjp_tanh(g, out, a):
    return (g * (1.0 - out * out),)


def _fwd_exp(a):
    return np.exp(a)


def _vjp_exp(g, out, a):
    return (g * out,)


def _fwd_log(a):
    if np.any(a <= 0):
        raise ValueError("log: non-positive input")
    return np.log(a)


def _vjp_log(g, out, a):
    return (g / a,)


def _fwd_square(a):
    return a * a


def _vjp_square(g, out, a):
    return (2.0 * g * a,)


def _fwd_concat(*arrays):
    lead = {x.shape[:-1] for x in arrays}
    if len(lead) != 1:
        raise ShapeError("concat", [x.shape for x in arrays], "leading dimensions differ")
    return np.concatenate(arrays, axis=-1)


def _vjp_concat(g, out, *arrays):
    bounds = np.cumsum([0] + [x.shape[-1] for x in arrays])
    return tuple(g[..., bounds[i]:bounds[i + 1]] for i in range(len(arrays)))


def _fwd_slice(a, *, key):
    try:
        return np.array(a[key])
    except IndexError as err:
        raise ShapeError("slice", [a.shape], str(err)) from None


def _vjp_slice(g, out, a, *, key):
    ga = np.zeros_like(a)
    np.add.at(ga, key, g)
    return (ga,)


def _fwd_sum(a, *, axis=None):
    return np.asarray(a.sum(axis=axis))


def _vjp_sum(g, out, a, *, axis=None):
    if axis is not None:
        g = np.expand_dims(g, axis)
    return (np.broadcast_to(g, a.shape).copy(),)


def _fwd_mean(a, *, axis=None):
    return np.asarray(a.mean(axis=axis))


def _vjp_mean(g, out, a, *, axis=None):
    n = a.size if axis is None else a.shape[axis]
    if axis is not None:
        g = np.expand_dims(g, axis)
    return (np.broadcast_to(g / n, a.shape).copy(),)


def _fwd_reshape(a, *, shape):
    try:
        return a.reshape(shape)
    except ValueError:
        raise ShapeError("reshape", [a.shape, shape]) from None


def _vjp_reshape(g, out, a, *, shape):
    return (g.reshape(a.shape),)


def _fwd_gather_rows(a, *, index):
    if index.size and (index.min() < 0 or index.max() >= a.shape[0]):
        raise ShapeError("gather_rows", [a.shape, index.shape], "index out of range")
    return a[index]


def _vjp_gather_rows(g, out, a, *, index):
    ga = np.zeros_like(a)
    np.add.at(ga, index, g)
    return (ga,)


def _fwd_clamp(a, *, lo, hi):
    return np.clip(a, lo, hi)


def _vjp_clamp(g, out, a, *, lo, hi):
    return (g * ((a >= lo) & (a <= hi)),)


def _fwd_spmm(a, *, op):
    if a.ndim != 2 or op.shape[1] != a.shape[0]:
        raise ShapeError("spmm", [op.shape, a.shape])
    return op @ a


def _vjp_spmm(g, out, a, *, op):
    return (op.T @ g,)


PRIMITIVES: dict[str, tuple[Callable, Callable]] = {
    "matmul": (_fwd_matmul, _vjp_matmul),
    "add": (_fwd_add, _vjp_add),
    "subtract": (_fwd_subtract, _vjp_subtract),
    "multiply": (_fwd_multiply, _vjp_multiply),
    "divide": (_fwd_divide, _vjp_divide),
    "scale": (_fwd_scale, _vjp_scale),
    "sigmoid": (_fwd_sigmoid, _vjp_sigmoid),
    "tanh": (_fwd_tanh, _vjp_tanh),
    "exp": (_fwd_exp, _vjp_exp),
    "log": (_fwd_log, _vjp_log),
    "square": (_fwd_square, _vjp_square),
    "concat": (_fwd_concat, _vjp_concat),
    "slice": (_fwd_slice, _vjp_slice),
    "sum": (_fwd_sum, _vjp_sum),
    "mean": (_fwd_mean, _vjp_mean),
    "reshape": (_fwd_reshape, _vjp_reshape),
    "gather_rows": (_fwd_gather_rows, _vjp_gather_rows),
    "clamp": (_fwd_clamp, _vjp_clamp),
    "spmm": (_fwd_spmm, _vjp_spmm),
}


def _as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def apply_primitive(kind: str, *inputs, **attrs) -> Tensor:
    """Evaluate primitive ``kind`` on ``inputs`` and record it on the active tape."""
    try:
        forward, _ = PRIMITIVES[kind]
    except KeyError:
        raise ValueError(f"unknown primitive {kind!r}") from None
    tensors = tuple(_as_tensor(x) for x in inputs)
    out = Tensor(forward(*(t.data for t in tensors), **attrs))
    tape = active_tape()
    if tape is not None and any(t.requires_grad for t in tensors):
        out.requires_grad = True
        tape.records.append(TapeRecord(kind, tensors, out, attrs))
    return out


class _Ops:
    """Functional spellings of the primitives."""

    @staticmethod
    def matmul(a, b):
        return apply_primitive("matmul", a, b)

    @staticmethod
    def add(a, b):
        return apply_primitive("add", a, b)

    @staticmethod
    def subtract(a, b):
        return apply_primitive("subtract", a, b)

    @staticmethod
    def multiply(a, b):
        return apply_primitive("multiply", a, b)

    @staticmethod
    def divide(a, b):
        return apply_primitive("divide", a, b)

    @staticmethod
    def scale(a, scalar: float):
        return apply_primitive("scale", a, scalar=float(scalar))

    @staticmethod
    def sigmoid(a):
        return apply_primitive("sigmoid", a)

    @staticmethod
    def tanh(a):
        return apply_primitive("tanh", a)

    @staticmethod
    def exp(a):
        return apply_primitive("exp", a)

    @staticmethod
    def log(a):
        return apply_primitive("log", a)

    @staticmethod
    def square(a):
        return apply_primitive("square", a)

    @staticmethod
    def concat(tensors):
        return apply_primitive("concat", *tensors)

    @staticmethod
    def slice(a, key):
        return apply_primitive("slice", a, key=key)

    @staticmethod
    def sum(a, axis=None):
        return apply_primitive("sum", a, axis=axis)

    @staticmethod
    def mean(a, axis=None):
        return apply_primitive("mean", a, axis=axis)

    @staticmethod
    def reshape(a, shape):
        return apply_primitive("reshape", a, shape=tuple(shape))

    @staticmethod
    def gather_rows(a, index):
        return apply_primitive("gather_rows", a, index=np.asarray(index, dtype=np.intp))

    @staticmethod
    def clamp(a, lo: float, hi: float):
        return apply_primitive("clamp", a, lo=lo, hi=hi)

    @staticmethod
    def spmm(op, a):
        """Constant (sparse or dense) matrix times a tensor; ``op`` gets no gradient."""
        return apply_primitive("spmm", a, op=op)


ops = _Ops()


# ---------------------------------------------------------------------------
# reverse pass


def backward(tape: GradientTape, loss: Tensor) -> dict[int, np.ndarray]:
    """Replay ``tape`` in reverse from ``loss``, accumulating into ``.grad``.

    Leaf tensors with ``requires_grad`` (parameters included) receive their
    adjoint added to ``.grad``; unreachable leaves are left untouched.
    Returns the leaf adjoints keyed by ``id``.
    """
    if loss.size != 1:
        raise ShapeError("backward", [loss.shape], "loss must be a scalar")
    adj: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
    leaves: dict[int, Tensor] = {}
    for rec in reversed(tape.records):
        g = adj.pop(id(rec.output), None)
        if g is None:
            continue
        _, vjp = PRIMITIVES[rec.kind]
        grads = vjp(g, rec.output.data, *(t.data for t in rec.inputs), **rec.attrs)
        for t, gi in zip(rec.inputs, grads):
            if not t.requires_grad:
                continue
            if not np.all(np.isfinite(gi)):
                raise GradientError(f"non-finite adjoint in {rec.kind!r} backward")
            key = id(t)
            adj[key] = adj[key] + gi if key in adj else np.array(gi, dtype=np.float64)
            if t.grad is not None:
                leaves[key] = t
    for key, t in leaves.items():
        t.grad += adj[key].reshape(t.grad.shape)
    return {key: adj[key] for key in leaves}


# ---------------------------------------------------------------------------
# finite-difference oracle


@dataclass
class GradientCheckReport:
    """Per-parameter max relative error between tape and central differences."""

    errors: dict[str, float] = field(default_factory=dict)
    tol: float = 1e-4

    @property
    def max_error(self) -> float:
        return max(self.errors.values(), default=0.0)

    @property
    def passed(self) -> bool:
        return self.max_error <= self.tol

    def __str__(self):
        rows = [f"{k}: {v:.3e}" for k, v in sorted(self.errors.items())]
        return f"gradient check {'PASS' if self.passed else 'FAIL'} (max {self.max_error:.3e}, tol {self.tol:.1e})\n" + "\n".join(rows)


def _eval_scalar(f) -> float:
    out = f()
    val = out.data if isinstance(out, Tensor) else np.asarray(out, dtype=np.float64)
    if val.size != 1 or not np.isfinite(val).all():
        raise GradientError("gradient_check: f must return a finite scalar")
    return float(val.reshape(-1)[0])


def gradient_check(f: Callable[[], Tensor], params: Iterable[Parameter], h: float = 1e-5,
                   tol: float = 1e-4) -> GradientCheckReport:
    """Compare tape gradients of ``f`` against central finite differences.

    The error for one parameter is ``max|analytic - numeric| / max(max|analytic|,
    max|numeric|)`` (norm-wise in the infinity norm, so entries with a near-zero
    derivative do not dominate).
    """
    if h <= 0:
        raise ValueError("h must be positive")
    params = list(params)
    saved = [p.grad.copy() for p in params]
    for p in params:
        p.zero_grad()
    with GradientTape() as tape:
        loss = f()
    if not np.all(np.isfinite(loss.data)):
        raise GradientError("gradient_check: f returned a non-finite value")
    backward(tape, loss)
    report = GradientCheckReport(tol=tol)
    for p in params:
        analytic = p.grad.copy()
        numeric = np.zeros_like(p.data)
        flat = p.data.reshape(-1)
        nflat = numeric.reshape(-1)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + h
            fp = _eval_scalar(f)
            flat[i] = orig - h
            fm = _eval_scalar(f)
            flat[i] = orig
            nflat[i] = (fp - fm) / (2.0 * h)
        scale = max(np.abs(analytic).max(initial=0.0), np.abs(numeric).max(initial=0.0))
        diff = np.abs(analytic - numeric).max(initial=0.0)
        report.errors[p.name] = 0.0 if scale == 0.0 else diff / scale
    for p, g in zip(params, saved):
        p.grad[...] = g
    return report


# ---------------------------------------------------------------------------
# optimisation


def adam_step(params: Iterable[Parameter], lr: float = 0.003, beta1: float = 0.9,
              beta2: float = 0.999, eps: float = 1e-8, weight_decay: float = 0.0):
    """One Adam update with classic L2 (``weight_decay * value`` added to the gradient).

    Gradients are zeroed afterwards.
    """
    params = list(params)
    for p in params:
        if not np.all(np.isfinite(p.grad)):
            raise GradientError(f"non-finite gradient for parameter {p.name!r}")
    for p in params:
        g = p.grad + weight_decay * p.data if weight_decay else p.grad
        p.step_count += 1
        p.adam_m = beta1 * p.adam_m + (1.0 - beta1) * g
        p.adam_v = beta2 * p.adam_v + (1.0 - beta2) * g * g
        m_hat = p.adam_m / (1.0 - beta1 ** p.step_count)
        v_hat = p.adam_v / (1.0 - beta2 ** p.step_count)
        p.data -= lr * m_hat / (np.sqrt(v_hat) + eps)
        p.zero_grad()
    return params


def global_grad_norm(params: Iterable[Parameter]) -> float:
    return math.sqrt(sum(float(np.sum(p.grad * p.grad)) for p in params))


def clip_global_norm(params: Iterable[Parameter], max_norm: float) -> float:
    """Rescale all gradients so their joint L2 norm is at most ``max_norm``."""
    if max_norm <= 0:
        raise ValueError("max_norm must be positive")
    params = list(params)
    norm = global_grad_norm(params)
    if norm <= max_norm:
        return 1.0
    scale = max_norm / norm
    for p in params:
        p.grad *= scale
    return scale
