"""Minimal reverse-mode automatic differentiation over dense numpy arrays.

The graph is define-by-run: each op records its parents and a backward
closure on the output tensor, and ``Tensor.backward()`` replays the tape
in reverse topological order.  Training and decoding run in 32-bit;
a 64-bit mode exists for gradient checking and oracle-equivalence tests.
"""

from __future__ import annotations

import contextlib
import math

import numpy as np

from .errors import ContractError, DimensionError, NumericError

DEFAULT_DTYPE = np.float32

_grad_enabled = True
_checked = False


@contextlib.contextmanager
def no_grad():
    """Disable graph recording (decoding / finite-difference evals)."""
    global _grad_enabled
    prev = _grad_enabled
    _grad_enabled = False
    try:
        yield
    finally:
        _grad_enabled = prev


@contextlib.contextmanager
def checked(enabled: bool = True):
    """Enable NaN/Inf detection on op outputs (training mode)."""
    global _checked
    prev = _checked
    _checked = enabled
    try:
        yield
    finally:
        _checked = prev


def is_checked() -> bool:
    return _checked


class Tensor:
    """Dense real array with an optional gradient buffer."""

    __slots__ = ("data", "grad", "requires_grad", "name", "_parents", "_backward_fn")

    def __init__(self, data, requires_grad=False, dtype=None, name=None):
        if isinstance(data, Tensor):
            data = data.data
        arr = np.asarray(data, dtype=dtype if dtype is not None else None)
        if arr.dtype not in (np.float32, np.float64):
            arr = arr.astype(DEFAULT_DTYPE)
        self.data = arr
        self.grad = None
        self.requires_grad = bool(requires_grad)
        self.name = name
        self._parents = ()
        self._backward_fn = None

    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    @property
    def size(self):
        return self.data.size

    @property
    def dtype(self):
        return self.data.dtype

    def item(self) -> float:
        return float(self.data)

    def detach(self) -> "Tensor":
        return Tensor(self.data, requires_grad=False)

    def zero_grad(self):
        self.grad = None

    def __repr__(self):
        tag = f" name={self.name}" if self.name else ""
        return f"Tensor(shape={self.data.shape}, dtype={self.data.dtype}{tag})"

    # operator sugar; the implementations live in module functions below
    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(self, other)

    def __neg__(self):
        return neg(self)

    def __sub__(self, other):
        return add(self, neg(_as_tensor(other, self.dtype)))

    def __rsub__(self, other):
        return add(neg(self), _as_tensor(other, self.dtype))

    def __mul__(self, other):
        return mul(self, other)

    def __rmul__(self, other):
        return mul(self, other)

    def __truediv__(self, other):
        return div(self, other)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, key):
        return slice_(self, key)

    def backward(self):
        """Populate ``grad`` on every requires_grad leaf reachable from self.

        Only defined for scalar outputs (losses).
        """
        if self.size != 1:
            raise ContractError(
                f"backward() requires a scalar, got shape {self.data.shape}"
            )
        order = _toposort(self)
        self.grad = np.ones_like(self.data)
        for node in reversed(order):
            fn = node._backward_fn
            if fn is None or node.grad is None:
                continue
            for parent, g in zip(node._parents, fn(node.grad)):
                if g is None or not parent.requires_grad:
                    continue
                if parent.grad is None:
                    parent.grad = np.zeros_like(parent.data)
                parent.grad += g


def _toposort(root: Tensor):
    order, seen, stack = [], set(), [(root, False)]
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
            if id(p) not in seen:
                stack.append((p, False))
    return order


def _as_tensor(x, dtype) -> Tensor:
    if isinstance(x, Tensor):
        return x
    return Tensor(np.asarray(x, dtype=dtype))


def _make(op: str, out_data: np.ndarray, parents, backward_fn) -> Tensor:
    if _checked and not np.all(np.isfinite(out_data)):
        raise NumericError(f"non-finite values produced by op '{op}'")
    out = Tensor(out_data)
    if _grad_enabled and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = tuple(parents)
        out._backward_fn = backward_fn
    return out


def _unbroadcast(grad: np.ndarray, shape) -> np.ndarray:
    """Sum a broadcasted gradient back down to ``shape``."""
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, (g, s) in enumerate(zip(grad.shape, shape)):
        if s == 1 and g != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad


# ---------------------------------------------------------------------------
# elementwise ops

def add(a, b) -> Tensor:
    a = _as_tensor(a, getattr(b, "dtype", None))
    b = _as_tensor(b, a.dtype)
    try:
        out = a.data + b.data
    except ValueError:
        raise DimensionError(f"add: shapes {a.shape} and {b.shape} do not broadcast")
    return _make(
        "add",
        out,
        (a, b),
        lambda g: (_unbroadcast(g, a.shape), _unbroadcast(g, b.shape)),
    )


def neg(a: Tensor) -> Tensor:
    return _make("neg", -a.data, (a,), lambda g: (-g,))


def mul(a, b) -> Tensor:
    a = _as_tensor(a, getattr(b, "dtype", None))
    b = _as_tensor(b, a.dtype)
    try:
        out = a.data * b.data
    except ValueError:
        raise DimensionError(f"mul: shapes {a.shape} and {b.shape} do not broadcast")
    return _make(
        "mul",
        out,
        (a, b),
        lambda g: (_unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)),
    )


def div(a, b) -> Tensor:
    a = _as_tensor(a, getattr(b, "dtype", None))
    b = _as_tensor(b, a.dtype)
    try:
        out = a.data / b.data
    except ValueError:
        raise DimensionError(f"div: shapes {a.shape} and {b.shape} do not broadcast")

    def backward(g):
        ga = _unbroadcast(g / b.data, a.shape)
        gb = _unbroadcast(-g * a.data / (b.data * b.data), b.shape)
        return ga, gb

    return _make("div", out, (a, b), backward)


def tanh(a: Tensor) -> Tensor:
    out = np.tanh(a.data)
    return _make("tanh", out, (a,), lambda g: (g * (1.0 - out * out),))


def sigmoid(a: Tensor) -> Tensor:
    out = np.empty_like(a.data)
    pos = a.data >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-a.data[pos]))
    ex = np.exp(a.data[~pos])
    out[~pos] = ex / (1.0 + ex)
    return _make("sigmoid", out, (a,), lambda g: (g * out * (1.0 - out),))


def exp(a: Tensor) -> Tensor:
    out = np.exp(a.data)
    return _make("exp", out, (a,), lambda g: (g * out,))


def log(a: Tensor) -> Tensor:
    return _make("log", np.log(a.data), (a,), lambda g: (g / a.data,))


def sqrt(a: Tensor) -> Tensor:
    out = np.sqrt(a.data)
    return _make("sqrt", out, (a,), lambda g: (g * 0.5 / out,))


# ---------------------------------------------------------------------------
# reductions and shape ops

def sum_(a: Tensor, axis=None, keepdims=False) -> Tensor:
    out = a.data.sum(axis=axis, keepdims=keepdims)

    def backward(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, a.shape).copy(),)

    return _make("sum", np.asarray(out), (a,), backward)


def mean_(a: Tensor, axis=None, keepdims=False) -> Tensor:
    n = a.size if axis is None else a.shape[axis]
    return mul(sum_(a, axis=axis, keepdims=keepdims), 1.0 / float(n))


def reshape(a: Tensor, shape) -> Tensor:
    old = a.shape
    return _make("reshape", a.data.reshape(shape), (a,), lambda g: (g.reshape(old),))


def transpose(a: Tensor) -> Tensor:
    if a.ndim != 2:
        raise DimensionError(f"transpose: expected 2-d, got shape {a.shape}")
    return _make("transpose", a.data.T.copy(), (a,), lambda g: (g.T,))


def concat(tensors, axis=0) -> Tensor:
    tensors = list(tensors)
    if not tensors:
        raise ContractError("concat: empty input list")
    out = np.concatenate([t.data for t in tensors], axis=axis)
    offsets = np.cumsum([t.shape[axis] for t in tensors])[:-1]

    def backward(g):
        return tuple(np.split(g, offsets, axis=axis))

    return _make("concat", out, tensors, backward)


def slice_(a: Tensor, key) -> Tensor:
    out = a.data[key]

    def backward(g):
        full = np.zeros_like(a.data)
        full[key] = g
        return (full,)

    return _make("slice", np.ascontiguousarray(out), (a,), backward)


# ---------------------------------------------------------------------------
# linear algebra

def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Matrix product: 2d @ 2d, nd @ 1d (matvec on last axis), or 1d @ 2d."""
    if not isinstance(a, Tensor) or not isinstance(b, Tensor):
        raise ContractError("matmul expects Tensor operands")
    if a.ndim == 2 and b.ndim == 2:
        if a.shape[1] != b.shape[0]:
            raise DimensionError(f"matmul: shapes {a.shape} and {b.shape} mismatch")
        out = a.data @ b.data
        return _make(
            "matmul", out, (a, b), lambda g: (g @ b.data.T, a.data.T @ g)
        )
    if b.ndim == 1 and a.ndim >= 2:
        if a.shape[-1] != b.shape[0]:
            raise DimensionError(f"matmul: shapes {a.shape} and {b.shape} mismatch")
        out = a.data @ b.data

        def backward(g):
            ga = g[..., None] * b.data
            gb = a.data.reshape(-1, a.shape[-1]).T @ g.reshape(-1)
            return ga, gb

        return _make("matmul", out, (a, b), backward)
    if a.ndim == 1 and b.ndim == 2:
        if a.shape[0] != b.shape[0]:
            raise DimensionError(f"matmul: shapes {a.shape} and {b.shape} mismatch")
        out = a.data @ b.data
        return _make(
            "matmul", out, (a, b), lambda g: (g @ b.data.T, np.outer(a.data, g))
        )
    raise DimensionError(f"matmul: unsupported ranks {a.shape} @ {b.shape}")


# ---------------------------------------------------------------------------
# softmax family

def softmax(a: Tensor, axis: int = -1) -> Tensor:
    shifted = a.data - a.data.max(axis=axis, keepdims=True)
    ex = np.exp(shifted)
    out = ex / ex.sum(axis=axis, keepdims=True)

    def backward(g):
        dot = (g * out).sum(axis=axis, keepdims=True)
        return (out * (g - dot),)

    return _make("softmax", out, (a,), backward)


def log_softmax(a: Tensor, axis: int = -1) -> Tensor:
    shifted = a.data - a.data.max(axis=axis, keepdims=True)
    lse = np.log(np.exp(shifted).sum(axis=axis, keepdims=True))
    out = shifted - lse

    def backward(g):
        return (g - np.exp(out) * g.sum(axis=axis, keepdims=True),)

    return _make("log_softmax", out, (a,), backward)


def standardize(a: Tensor, eps: float) -> Tensor:
    """Zero-mean unit-variance over the last axis (population std, eps guard)."""
    mean = a.data.mean(axis=-1, keepdims=True)
    centered = a.data - mean
    var = np.square(centered).mean(axis=-1, keepdims=True)
    inv_std = 1.0 / np.sqrt(var + eps)
    out = centered * inv_std

    def backward(g):
        gm = g.mean(axis=-1, keepdims=True)
        gy = (g * out).mean(axis=-1, keepdims=True)
        return ((g - gm - out * gy) * inv_std,)

    return _make("standardize", out, (a,), backward)


# ---------------------------------------------------------------------------
# gather / scatter ops

def embedding_lookup(table: Tensor, ids) -> Tensor:
    """Row-gather: ids of any integer shape -> ids.shape + (dim,)."""
    ids = np.asarray(ids, dtype=np.int64)
    if table.ndim != 2:
        raise DimensionError(f"embedding_lookup: table must be 2-d, got {table.shape}")
    if ids.size and (ids.min() < 0 or ids.max() >= table.shape[0]):
        raise ContractError("embedding_lookup: id out of range")
    out = table.data[ids]

    def backward(g):
        gt = np.zeros_like(table.data)
        np.add.at(gt, ids.reshape(-1), g.reshape(-1, table.shape[1]))
        return (gt,)

    return _make("embedding_lookup", out, (table,), backward)


def take_rows(a: Tensor, idx) -> Tensor:
    """Pick one entry per row: (n, v) with idx (n,) -> (n,)."""
    idx = np.asarray(idx, dtype=np.int64)
    if a.ndim != 2 or idx.ndim != 1 or idx.shape[0] != a.shape[0]:
        raise DimensionError(f"take_rows: shapes {a.shape} and {idx.shape} mismatch")
    rows = np.arange(a.shape[0])
    out = a.data[rows, idx]

    def backward(g):
        ga = np.zeros_like(a.data)
        ga[rows, idx] = g
        return (ga,)

    return _make("take_rows", out, (a,), backward)


# ---------------------------------------------------------------------------
# gradient utilities

def clip_global_norm(grads, max_norm: float) -> float:
    """Scale gradient buffers in place so their global L2 norm is <= max_norm.

    Returns the pre-clip norm.
    """
    if max_norm <= 0:
        raise ContractError("clip_global_norm: max_norm must be positive")
    total = 0.0
    for g in grads:
        if g is None:
            continue
        total += float(np.square(g, dtype=np.float64).sum())
    norm = math.sqrt(total)
    if norm > max_norm:
        # shrink a hair below the target so 32-bit rounding of the scaled
        # entries cannot push the post-clip norm back above max_norm
        scale = max_norm / (norm * (1.0 + 1e-6))
        for g in grads:
            if g is not None:
                g *= scale
    return norm


class GradCheckReport:
    """Per-parameter relative errors between analytic and numeric gradients."""

    def __init__(self, errors: dict, tol: float):
        self.errors = errors
        self.tol = tol
        self.max_rel_err = max(errors.values()) if errors else 0.0
        self.passed = self.max_rel_err <= tol

    def __repr__(self):
        state = "PASS" if self.passed else "FAIL"
        return f"GradCheckReport({state}, max_rel_err={self.max_rel_err:.3e})"


def grad_check(build_loss, params, step: float = 1e-3, tol: float = 1e-4) -> GradCheckReport:
    """Compare analytic gradients of ``build_loss()`` against central differences.

    ``params`` is a list of (name, Tensor) or bare Tensors in 64-bit mode.
    The relative error for a parameter is max|a - n| scaled by the larger
    of the two gradients' max magnitudes, so near-zero entries are judged
    against the parameter's gradient scale rather than their own.
    """
    named = [p if isinstance(p, tuple) else (f"p{i}", p) for i, p in enumerate(params)]
    for name, p in named:
        if p.dtype != np.float64:
            raise ContractError(f"grad_check: parameter {name} must be float64")
        p.requires_grad = True
        p.grad = None

    loss = build_loss()
    loss.backward()
    analytic = {name: (p.grad.copy() if p.grad is not None else np.zeros_like(p.data))
                for name, p in named}

    errors = {}
    with no_grad():
        for name, p in named:
            numeric = np.zeros_like(p.data)
            flat = p.data.reshape(-1)
            num_flat = numeric.reshape(-1)
            for i in range(flat.size):
                orig = flat[i]
                flat[i] = orig + step
                up = build_loss().item()
                flat[i] = orig - step
                down = build_loss().item()
                flat[i] = orig
                num_flat[i] = (up - down) / (2.0 * step)
            a = analytic[name]
            scale = max(np.abs(a).max(initial=0.0), np.abs(numeric).max(initial=0.0), 1e-8)
            errors[name] = float(np.abs(a - numeric).max(initial=0.0) / scale)
    return GradCheckReport(errors, tol)
