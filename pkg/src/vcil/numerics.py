"""Float64 tensors with a reverse-mode differentiation tape.

Every op builds its output eagerly and, when any input requires a gradient,
records a closure that pushes the output gradient back to its inputs.
``backward`` replays those closures in reverse topological order.

Broadcasting is deliberately narrow: after stripping leading 1s, one shape
must be a suffix of the other (``[B, N, d] + [d]``), or one operand must be a
single element.  Anything else raises ``ShapeError``.
"""
from __future__ import annotations

import contextlib
import threading
import warnings
from typing import Callable, Iterable, Sequence

import numpy as np
from scipy.special import erf

DTYPE = np.float64
KL_FLOOR = 1e-12

_state = threading.local()


class ShapeError(ValueError):
    pass


class DegenerateCosineWarning(RuntimeWarning):
    """A cosine was requested for a zero vector; 0 was returned."""


def grad_enabled() -> bool:
    return getattr(_state, "enabled", True)


@contextlib.contextmanager
def no_grad():
    prev = grad_enabled()
    _state.enabled = False
    try:
        yield
    finally:
        _state.enabled = prev


class Tensor:
    __slots__ = ("data", "requires_grad", "grad", "_parents", "_backward", "op", "name")

    def __init__(self, data, requires_grad: bool = False, name: str | None = None):
        arr = np.asarray(data, dtype=DTYPE)
        if arr.size == 0:
            raise ShapeError(f"empty tensor of shape {list(arr.shape)}")
        self.data = arr
        self.requires_grad = requires_grad
        self.grad: np.ndarray | None = None
        self._parents: tuple[Tensor, ...] = ()
        self._backward: Callable[[np.ndarray], None] | None = None
        self.op = "leaf"
        self.name = name

    # -- introspection -------------------------------------------------
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
    def values(self) -> list[float]:
        """Row-major flat values."""
        return self.data.ravel().tolist()

    def item(self) -> float:
        return float(self.data.reshape(-1)[0]) if self.size == 1 else _not_scalar(self)

    def numpy(self) -> np.ndarray:
        return self.data

    def detach(self) -> Tensor:
        return Tensor(self.data)

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self) -> str:
        tag = f", name={self.name!r}" if self.name else ""
        return f"Tensor(shape={list(self.shape)}, op={self.op}{tag})"

    def backward(self) -> None:
        backward(self)

    # -- operator sugar ------------------------------------------------
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
        return mul(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, idx):
        return index(self, idx)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, *axes):
        return transpose(self, axes or None)

    def sum(self, axis=None, keepdims=False):
        return sum_(self, axis, keepdims)

    def mean(self, axis=None, keepdims=False):
        return mean(self, axis, keepdims)


def _not_scalar(t: Tensor) -> float:
    raise ShapeError(f"item() needs a single-element tensor, got shape {list(t.shape)}")


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _make(data: np.ndarray, parents: Sequence[Tensor], op: str, backward_fn) -> Tensor:
    out = Tensor.__new__(Tensor)
    out.data = data
    out.grad = None
    out.name = None
    out.op = op
    needs = grad_enabled() and any(p.requires_grad for p in parents)
    out.requires_grad = needs
    if needs:
        out._parents = tuple(parents)
        out._backward = backward_fn
    else:
        out._parents = ()
        out._backward = None
    return out


def _accumulate(t: Tensor, g: np.ndarray) -> None:
    if not t.requires_grad:
        return
    if g.shape != t.data.shape:
        g = _unbroadcast(g, t.data.shape)
    if t.grad is None:
        t.grad = np.array(g, dtype=DTYPE, copy=True)
    else:
        t.grad = t.grad + g


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    if int(np.prod(shape, dtype=np.int64)) == 1:
        return np.asarray(g.sum()).reshape(shape)
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for ax, n in enumerate(shape):
        if n == 1 and g.shape[ax] != 1:
            g = g.sum(axis=ax, keepdims=True)
    return g


def _strip(shape: tuple[int, ...]) -> tuple[int, ...]:
    i = 0
    while i < len(shape) and shape[i] == 1:
        i += 1
    return shape[i:]


def broadcast_shape(a: tuple[int, ...], b: tuple[int, ...]) -> tuple[int, ...]:
    """Result shape under the leading-1 rule, or ``ShapeError``."""
    if a == b:
        return a
    if int(np.prod(a, dtype=np.int64)) == 1:
        return b if len(b) >= len(a) else a
    if int(np.prod(b, dtype=np.int64)) == 1:
        return a if len(a) >= len(b) else b
    sa, sb = _strip(a), _strip(b)
    longer, shorter = (a, sb) if len(sa) >= len(sb) else (b, sa)
    if _strip(longer)[len(_strip(longer)) - len(shorter):] == shorter:
        return longer
    raise ShapeError(f"shapes {list(a)} and {list(b)} are not broadcast-compatible")


# -- elementwise ---------------------------------------------------------------

def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    broadcast_shape(a.shape, b.shape)

    def bw(g):
        _accumulate(a, g)
        _accumulate(b, g)

    return _make(a.data + b.data, (a, b), "add", bw)


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    broadcast_shape(a.shape, b.shape)

    def bw(g):
        _accumulate(a, g)
        _accumulate(b, -g)

    return _make(a.data - b.data, (a, b), "sub", bw)


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    broadcast_shape(a.shape, b.shape)

    def bw(g):
        _accumulate(a, g * b.data)
        _accumulate(b, g * a.data)

    return _make(a.data * b.data, (a, b), "mul", bw)


def div(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    broadcast_shape(a.shape, b.shape)
    out = a.data / b.data

    def bw(g):
        _accumulate(a, g / b.data)
        _accumulate(b, -g * out / b.data)

    return _make(out, (a, b), "div", bw)


def exp(x: Tensor) -> Tensor:
    out = np.exp(x.data)
    return _make(out, (x,), "exp", lambda g: _accumulate(x, g * out))


def log(x: Tensor) -> Tensor:
    return _make(np.log(x.data), (x,), "log", lambda g: _accumulate(x, g / x.data))


def sqrt(x: Tensor) -> Tensor:
    out = np.sqrt(x.data)
    return _make(out, (x,), "sqrt", lambda g: _accumulate(x, g * 0.5 / out))


def clip_min(x: Tensor, floor: float) -> Tensor:
    """max(x, floor); gradient passes only where x is above the floor."""
    mask = x.data > floor
    out = np.where(mask, x.data, floor)
    return _make(out, (x,), "clip_min", lambda g: _accumulate(x, g * mask))


_SQRT2 = np.sqrt(2.0)
_INV_SQRT2PI = 1.0 / np.sqrt(2.0 * np.pi)


def gelu(x: Tensor) -> Tensor:
    """Exact GeLU, x * Phi(x)."""
    cdf = 0.5 * (1.0 + erf(x.data / _SQRT2))
    out = x.data * cdf

    def bw(g):
        pdf = _INV_SQRT2PI * np.exp(-0.5 * x.data * x.data)
        _accumulate(x, g * (cdf + x.data * pdf))

    return _make(out, (x,), "gelu", bw)


# -- shape ops -----------------------------------------------------------------

def reshape(x: Tensor, shape) -> Tensor:
    shape = tuple(int(s) for s in shape)
    try:
        out = x.data.reshape(shape)
    except ValueError as exc:
        raise ShapeError(f"cannot reshape {list(x.shape)} to {list(shape)}") from exc
    return _make(out, (x,), "reshape", lambda g: _accumulate(x, g.reshape(x.shape)))


def transpose(x: Tensor, axes=None) -> Tensor:
    """Permute axes; with no axes, swap the last two."""
    if axes is None:
        if x.ndim < 2:
            raise ShapeError(f"transpose needs >= 2 dims, got {list(x.shape)}")
        axes = list(range(x.ndim))
        axes[-1], axes[-2] = axes[-2], axes[-1]
    axes = tuple(axes)
    inv = tuple(np.argsort(axes))
    return _make(x.data.transpose(axes), (x,), "transpose", lambda g: _accumulate(x, g.transpose(inv)))


def concatenate(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    tensors = [as_tensor(t) for t in tensors]
    try:
        out = np.concatenate([t.data for t in tensors], axis=axis)
    except ValueError as exc:
        shapes = ", ".join(str(list(t.shape)) for t in tensors)
        raise ShapeError(f"cannot concatenate shapes {shapes} on axis {axis}") from exc
    bounds = np.cumsum([t.shape[axis] for t in tensors])[:-1]

    def bw(g):
        for t, piece in zip(tensors, np.split(g, bounds, axis=axis)):
            _accumulate(t, piece)

    return _make(out, tensors, "concat", bw)


def stack(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    parts = [reshape(t, t.shape[:axis] + (1,) + t.shape[axis:]) for t in tensors]
    return concatenate(parts, axis=axis)


def index(x: Tensor, idx) -> Tensor:
    out = x.data[idx]

    fancy = any(isinstance(i, (np.ndarray, list)) for i in (idx if isinstance(idx, tuple) else (idx,)))

    def bw(g):
        full = np.zeros_like(x.data)
        if fancy:
            np.add.at(full, idx, g)
        else:
            full[idx] += g
        _accumulate(x, full)

    return _make(np.array(out, dtype=DTYPE), (x,), "index", bw)


def broadcast_to(x: Tensor, shape) -> Tensor:
    shape = tuple(shape)
    broadcast_shape(x.shape, shape)
    return _make(np.broadcast_to(x.data, shape).copy(), (x,), "broadcast", lambda g: _accumulate(x, g))


def repeat(x: Tensor, n: int, axis: int) -> Tensor:
    """Tile a size-1 axis ``n`` times (explicit, not broadcasting)."""
    if x.shape[axis] != 1:
        raise ShapeError(f"repeat needs a size-1 axis, got {list(x.shape)} at axis {axis}")
    out = np.repeat(x.data, n, axis=axis)
    return _make(out, (x,), "repeat", lambda g: _accumulate(x, g.sum(axis=axis, keepdims=True)))


# -- reductions ----------------------------------------------------------------

def sum_(x: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    out = x.data.sum(axis=axis, keepdims=keepdims)

    def bw(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        _accumulate(x, np.broadcast_to(g, x.shape))

    return _make(np.asarray(out, dtype=DTYPE), (x,), "sum", bw)


def mean(x: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    if axis is None:
        n = x.size
    else:
        axes = axis if isinstance(axis, tuple) else (axis,)
        n = int(np.prod([x.shape[a] for a in axes]))
    return mul(sum_(x, axis, keepdims), 1.0 / n)


# -- linear algebra ------------------------------------------------------------

def matmul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim < 2 or b.ndim < 2 or a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"matmul shapes {list(a.shape)} and {list(b.shape)} do not conform")
    out = np.matmul(a.data, b.data)

    def bw(g):
        if a.requires_grad:
            _accumulate(a, np.matmul(g, np.swapaxes(b.data, -1, -2)))
        if b.requires_grad:
            if b.ndim == 2 and a.ndim > 2:
                ga = a.data.reshape(-1, a.shape[-1])
                _accumulate(b, ga.T @ g.reshape(-1, g.shape[-1]))
            else:
                _accumulate(b, np.matmul(np.swapaxes(a.data, -1, -2), g))

    return _make(out, (a, b), "matmul", bw)


def linear(x: Tensor, weight: Tensor, bias: Tensor | None = None) -> Tensor:
    """x @ weight (+ bias); weight is stored [in, out]."""
    y = matmul(x, weight)
    return y if bias is None else add(y, bias)


# -- activations and normalisation ---------------------------------------------

def softmax(x: Tensor, axis: int = -1) -> Tensor:
    if x.shape[axis] == 0:
        raise ShapeError(f"softmax over empty axis {axis} of {list(x.shape)}")
    z = x.data - x.data.max(axis=axis, keepdims=True)
    e = np.exp(z)
    out = e / e.sum(axis=axis, keepdims=True)

    def bw(g):
        _accumulate(x, out * (g - (g * out).sum(axis=axis, keepdims=True)))

    return _make(out, (x,), "softmax", bw)


def log_softmax(x: Tensor, axis: int = -1) -> Tensor:
    z = x.data - x.data.max(axis=axis, keepdims=True)
    lse = np.log(np.exp(z).sum(axis=axis, keepdims=True))
    out = z - lse

    def bw(g):
        p = np.exp(out)
        _accumulate(x, g - p * g.sum(axis=axis, keepdims=True))

    return _make(out, (x,), "log_softmax", bw)


def layer_norm(x: Tensor, weight: Tensor | None = None, bias: Tensor | None = None,
               eps: float = 1e-5) -> Tensor:
    """Normalise over the last axis, then apply the optional affine terms."""
    mu = x.data.mean(axis=-1, keepdims=True)
    xc = x.data - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv

    def bw(g):
        gm = g.mean(axis=-1, keepdims=True)
        gx = (g * xhat).mean(axis=-1, keepdims=True)
        _accumulate(x, inv * (g - gm - xhat * gx))

    out = _make(xhat, (x,), "layer_norm", bw)
    if weight is not None:
        out = mul(out, weight)
    if bias is not None:
        out = add(out, bias)
    return out


# -- losses and similarities -----------------------------------------------------

def cross_entropy(logits: Tensor, labels) -> Tensor:
    """Mean over rows of -log softmax(logits)[label]."""
    labels = np.atleast_1d(np.asarray(labels, dtype=np.int64))
    z = logits if logits.ndim > 1 else reshape(logits, (1,) + logits.shape)
    c = z.shape[-1]
    if labels.shape[0] != z.shape[0]:
        raise ShapeError(f"{labels.shape[0]} labels for logits of shape {list(logits.shape)}")
    if np.any(labels < 0) or np.any(labels >= c):
        raise ValueError(f"label out of range for {c} classes: {labels.tolist()}")
    lsm = log_softmax(z, axis=-1)
    picked = index(lsm, (np.arange(labels.shape[0]), labels))
    return mul(mean(picked), -1.0)


def kl_divergence(p_logits: Tensor, q_logits: Tensor, axis: int = -1) -> Tensor:
    """KL(softmax(p) || softmax(q)) averaged over leading axes.

    Probabilities are floored at 1e-12 inside the log.  The backward pass uses
    the closed forms (q - p for the q logits), so identical inputs give
    exactly zero gradients.
    """
    p_logits, q_logits = as_tensor(p_logits), as_tensor(q_logits)
    if p_logits.shape != q_logits.shape:
        raise ShapeError(f"kl_divergence shapes {list(p_logits.shape)} and {list(q_logits.shape)} differ")
    if p_logits.shape[axis] == 0:
        raise ShapeError("kl_divergence over an empty axis")

    def probs(z):
        e = np.exp(z - z.max(axis=axis, keepdims=True))
        return e / e.sum(axis=axis, keepdims=True)

    p = probs(p_logits.data)
    q = probs(q_logits.data)
    logratio = np.log(np.maximum(p, KL_FLOOR)) - np.log(np.maximum(q, KL_FLOOR))
    rows = (p * logratio).sum(axis=axis, keepdims=True)
    n_rows = rows.size
    value = rows.sum() / n_rows

    def bw(g):
        scale = np.asarray(g).reshape(()) / n_rows
        _accumulate(q_logits, scale * (q - p))
        _accumulate(p_logits, scale * p * (logratio - rows))

    return _make(np.asarray(value, dtype=DTYPE), (p_logits, q_logits), "kl", bw)


def cosine_similarity(a: Tensor, b: Tensor, axis: int = -1, eps: float = 0.0) -> Tensor:
    """Cosine along ``axis``.  Zero vectors give 0 and a DegenerateCosineWarning."""
    a, b = as_tensor(a), as_tensor(b)
    if a.shape != b.shape:
        raise ShapeError(f"cosine_similarity shapes {list(a.shape)} and {list(b.shape)} differ")
    na = np.sqrt((a.data * a.data).sum(axis=axis, keepdims=True))
    nb = np.sqrt((b.data * b.data).sum(axis=axis, keepdims=True))
    ok = (na > eps) & (nb > eps) & (na > 0) & (nb > 0)
    if not np.all(ok):
        warnings.warn("cosine of a zero vector; returning 0", DegenerateCosineWarning, stacklevel=2)
    sa = np.where(ok, na, 1.0)
    sb = np.where(ok, nb, 1.0)
    dot = (a.data * b.data).sum(axis=axis, keepdims=True)
    cos = np.where(ok, dot / (sa * sb), 0.0)
    cos = np.clip(cos, -1.0, 1.0)

    def bw(g):
        ge = np.expand_dims(g, axis) * ok
        _accumulate(a, ge * (b.data / (sa * sb) - cos * a.data / (sa * sa)))
        _accumulate(b, ge * (a.data / (sa * sb) - cos * b.data / (sb * sb)))

    out = _make(np.squeeze(cos, axis=axis), (a, b), "cosine", bw)
    return out


def cosine_np(a: np.ndarray, b: np.ndarray) -> float:
    """Plain-array cosine with the same zero-vector convention."""
    a = np.asarray(a, dtype=DTYPE).ravel()
    b = np.asarray(b, dtype=DTYPE).ravel()
    if a.shape != b.shape:
        raise ShapeError(f"cosine shapes {list(a.shape)} and {list(b.shape)} differ")
    na, nb = np.linalg.norm(a), np.linalg.norm(b)
    if na == 0.0 or nb == 0.0:
        warnings.warn("cosine of a zero vector; returning 0", DegenerateCosineWarning, stacklevel=2)
        return 0.0
    return float(np.clip(a @ b / (na * nb), -1.0, 1.0))


# -- tape ----------------------------------------------------------------------

def tape(root: Tensor) -> list[Tensor]:
    """Topologically ordered nodes reachable from ``root`` (inputs first)."""
    order: list[Tensor] = []
    seen: set[int] = set()
    stack_: list[tuple[Tensor, bool]] = [(root, False)]
    while stack_:
        node, expanded = stack_.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack_.append((node, True))
        for p in node._parents:
            if id(p) not in seen:
                stack_.append((p, False))
    return order


def backward(loss: Tensor) -> None:
    """Populate ``.grad`` on every requires-grad leaf reachable from ``loss``.

    Gradients accumulate across calls; call ``zero_grad`` on leaves to reset.
    Interior node gradients are released after use.
    """
    if loss.size != 1:
        raise ShapeError(f"backward needs a scalar loss, got shape {list(loss.shape)}")
    if not loss.requires_grad:
        raise ValueError("loss is not on the tape (no input requires grad)")
    order = tape(loss)
    grads: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
    for node in reversed(order):
        g = grads.pop(id(node), None)
        if g is None:
            continue
        if node._backward is None:
            if node.grad is None:
                node.grad = np.array(g, copy=True)
            else:
                node.grad = node.grad + g
            continue
        # route parent grads through a scratch dict instead of .grad on interior nodes
        saved = [(p, p.grad) for p in node._parents if p._backward is not None]
        for p, _ in saved:
            p.grad = None
        node._backward(g)
        for p, old in saved:
            if p.grad is not None:
                prev = grads.get(id(p))
                grads[id(p)] = p.grad if prev is None else prev + p.grad
            p.grad = old


def zero_grad(params: Iterable[Tensor]) -> None:
    for p in params:
        p.grad = None


# -- independent oracle ------------------------------------------------------------

def finite_difference_check(f: Callable[[np.ndarray], float], x, h: float = 1e-4) -> np.ndarray:
    """Central-difference gradient of scalar ``f`` at ``x``; test-only oracle."""
    x0 = np.array(x.data if isinstance(x, Tensor) else x, dtype=DTYPE)
    grad = np.zeros_like(x0)
    flat = x0.reshape(-1)
    gflat = grad.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + h
        fp = float(f(x0.copy()))
        flat[i] = orig - h
        fm = float(f(x0.copy()))
        flat[i] = orig
        gflat[i] = (fp - fm) / (2.0 * h)
    return grad


def relative_error(analytic: np.ndarray, numeric: np.ndarray, floor: float = 1e-8) -> float:
    """||a - n|| / max(||a||, ||n||, floor)."""
    a = np.asarray(analytic).ravel()
    n = np.asarray(numeric).ravel()
    denom = max(np.linalg.norm(a), np.linalg.norm(n), floor)
    return float(np.linalg.norm(a - n) / denom)
