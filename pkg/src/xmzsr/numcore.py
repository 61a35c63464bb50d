"""Dense float64 tensors with tape-based reverse-mode differentiation.

Everything in this package computes through `Tensor`. The tape is dynamic:
each operation records its parents and a backward closure, and `backward`
replays the closures in reverse topological order. Data lives in numpy
arrays (row-major float64); numpy supplies the dense kernels, this module
supplies the differentiation and the Adam optimizer.

Elementwise binary ops deliberately restrict broadcasting: shapes must be
equal, or one operand must match the trailing axes of the other (broadcast
over leading batch axes only). Anything fancier is a shape bug waiting to
happen at this scale.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .errors import ConfigError, ContractError, DimensionError, NumericError

__all__ = [
    "Tensor",
    "AdamState",
    "adam_step",
    "backward",
    "grad_check",
    "matmul",
    "transpose",
    "relu",
    "sigmoid",
    "softplus",
    "exp",
    "log",
    "sqrt",
    "clamp_min",
    "tsum",
    "tmean",
    "softmax",
    "logsumexp_rows",
    "lse_rows_plus",
    "row_normalize",
    "scale_rows",
    "gather_rows",
    "stack_rows",
    "reshape",
    "grad_reverse",
]


class Tensor:
    """A node in the computation tape.

    `data` is always a float64 ndarray. A tensor participates in
    differentiation when `requires_grad` is true; gradients accumulate
    into `grad` during `backward`.
    """

    __slots__ = ("data", "requires_grad", "grad", "_parents", "_backward")

    def __init__(self, data, requires_grad: bool = False):
        self.data = np.asarray(data, dtype=np.float64)
        self.requires_grad = requires_grad
        self.grad = None
        self._parents = ()
        self._backward = None

    @property
    def shape(self):
        return self.data.shape

    @property
    def size(self):
        return self.data.size

    def item(self) -> float:
        return float(self.data)

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def zero_grad(self) -> None:
        self.grad = np.zeros_like(self.data)

    def __repr__(self):
        return f"Tensor(shape={self.data.shape}, requires_grad={self.requires_grad})"

    # Operator sugar; scalars are wrapped as constants.
    def __add__(self, other):
        return add(self, _as_tensor(other))

    def __radd__(self, other):
        return add(_as_tensor(other), self)

    def __sub__(self, other):
        return sub(self, _as_tensor(other))

    def __rsub__(self, other):
        return sub(_as_tensor(other), self)

    def __mul__(self, other):
        return mul(self, _as_tensor(other))

    def __rmul__(self, other):
        return mul(_as_tensor(other), self)

    def __truediv__(self, other):
        return div(self, _as_tensor(other))

    def __rtruediv__(self, other):
        return div(_as_tensor(other), self)

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)


def _as_tensor(x) -> Tensor:
    if isinstance(x, Tensor):
        return x
    return Tensor(np.asarray(x, dtype=np.float64))


def _make(data: np.ndarray, parents, backward, op: str) -> Tensor:
    if not np.all(np.isfinite(data)):
        raise NumericError(f"non-finite values produced by '{op}'")
    out = Tensor(data)
    if any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = tuple(parents)
        out._backward = backward
    return out


def _check_broadcast(a: Tensor, b: Tensor, op: str) -> None:
    sa, sb = a.data.shape, b.data.shape
    if sa == sb:
        return
    if sb == () or sa == ():
        return
    # leading-batch broadcast: the smaller operand matches the trailing axes
    if len(sb) < len(sa) and sa[len(sa) - len(sb):] == sb:
        return
    if len(sa) < len(sb) and sb[len(sb) - len(sa):] == sa:
        return
    raise DimensionError(f"'{op}': shapes {sa} and {sb} do not conform")


def _unbroadcast(grad: np.ndarray, shape) -> np.ndarray:
    """Sum a broadcast gradient back down to `shape`."""
    if grad.shape == tuple(shape):
        return grad
    extra = grad.ndim - len(shape)
    if extra > 0:
        grad = grad.sum(axis=tuple(range(extra)))
    return grad.reshape(shape)


# ---------------------------------------------------------------------------
# elementwise binary ops


def add(a: Tensor, b: Tensor) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    _check_broadcast(a, b, "add")
    out = a.data + b.data

    def bwd(g):
        return (_unbroadcast(g, a.data.shape), _unbroadcast(g, b.data.shape))

    return _make(out, (a, b), bwd, "add")


def sub(a: Tensor, b: Tensor) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    _check_broadcast(a, b, "sub")
    out = a.data - b.data

    def bwd(g):
        return (_unbroadcast(g, a.data.shape), _unbroadcast(-g, b.data.shape))

    return _make(out, (a, b), bwd, "sub")


def mul(a: Tensor, b: Tensor) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    _check_broadcast(a, b, "mul")
    out = a.data * b.data

    def bwd(g):
        return (
            _unbroadcast(g * b.data, a.data.shape),
            _unbroadcast(g * a.data, b.data.shape),
        )

    return _make(out, (a, b), bwd, "mul")


def div(a: Tensor, b: Tensor) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    _check_broadcast(a, b, "div")
    out = a.data / b.data

    def bwd(g):
        return (
            _unbroadcast(g / b.data, a.data.shape),
            _unbroadcast(-g * a.data / (b.data * b.data), b.data.shape),
        )

    return _make(out, (a, b), bwd, "div")


def neg(a: Tensor) -> Tensor:
    def bwd(g):
        return (-g,)

    return _make(-a.data, (a,), bwd, "neg")


# ---------------------------------------------------------------------------
# linear algebra


def matmul(a: Tensor, b: Tensor) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    if a.data.ndim != 2 or b.data.ndim != 2:
        raise DimensionError(
            f"'matmul': expects 2-D operands, got {a.data.shape} and {b.data.shape}"
        )
    if a.data.shape[1] != b.data.shape[0]:
        raise DimensionError(
            f"'matmul': inner dims differ, {a.data.shape} vs {b.data.shape}"
        )
    out = a.data @ b.data

    def bwd(g):
        return (g @ b.data.T, a.data.T @ g)

    return _make(out, (a, b), bwd, "matmul")


def transpose(a: Tensor) -> Tensor:
    if a.data.ndim != 2:
        raise DimensionError(f"'transpose': expects 2-D, got {a.data.shape}")

    def bwd(g):
        return (g.T,)

    return _make(a.data.T, (a,), bwd, "transpose")


def reshape(a: Tensor, shape) -> Tensor:
    shape = tuple(shape)
    out = a.data.reshape(shape)
    old = a.data.shape

    def bwd(g):
        return (g.reshape(old),)

    return _make(out, (a,), bwd, "reshape")


# ---------------------------------------------------------------------------
# elementwise nonlinearities


def relu(a: Tensor) -> Tensor:
    out = np.maximum(a.data, 0.0)

    def bwd(g):
        return (g * (a.data > 0.0),)

    return _make(out, (a,), bwd, "relu")


def sigmoid(a: Tensor) -> Tensor:
    x = a.data
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)

    def bwd(g):
        return (g * out * (1.0 - out),)

    return _make(out, (a,), bwd, "sigmoid")


def softplus(a: Tensor) -> Tensor:
    # log(1 + e^x), computed as max(x, 0) + log1p(e^{-|x|})
    x = a.data
    out = np.maximum(x, 0.0) + np.log1p(np.exp(-np.abs(x)))

    def bwd(g):
        s = np.empty_like(x)
        pos = x >= 0
        s[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
        ex = np.exp(x[~pos])
        s[~pos] = ex / (1.0 + ex)
        return (g * s,)

    return _make(out, (a,), bwd, "softplus")


def exp(a: Tensor) -> Tensor:
    out = np.exp(a.data)

    def bwd(g):
        return (g * out,)

    return _make(out, (a,), bwd, "exp")


def log(a: Tensor) -> Tensor:
    out = np.log(a.data)

    def bwd(g):
        return (g / a.data,)

    return _make(out, (a,), bwd, "log")


def sqrt(a: Tensor) -> Tensor:
    """Square root with a guarded gradient at zero.

    The derivative denominator is clamped so a zero input yields a large
    but finite gradient instead of an Inf; callers that need an exact-zero
    gradient at degenerate points should mask explicitly (see semantic loss).
    """
    out = np.sqrt(a.data)

    def bwd(g):
        return (g * 0.5 / np.maximum(out, 1e-12),)

    return _make(out, (a,), bwd, "sqrt")


def clamp_min(a: Tensor, floor: float) -> Tensor:
    """max(x, floor); gradient is zero wherever the floor is active."""
    out = np.maximum(a.data, floor)

    def bwd(g):
        return (g * (a.data > floor),)

    return _make(out, (a,), bwd, "clamp_min")


# ---------------------------------------------------------------------------
# reductions


def tsum(a: Tensor, axis=None) -> Tensor:
    out = a.data.sum(axis=axis)
    shape = a.data.shape

    def bwd(g):
        if axis is None:
            return (np.broadcast_to(g, shape).copy(),)
        return (np.broadcast_to(np.expand_dims(g, axis), shape).copy(),)

    return _make(out, (a,), bwd, "sum")


def tmean(a: Tensor, axis=None) -> Tensor:
    n = a.data.size if axis is None else a.data.shape[axis]
    return mul(tsum(a, axis=axis), Tensor(1.0 / n))


def softmax(a: Tensor) -> Tensor:
    """Softmax over the last axis (max-shifted for stability)."""
    x = a.data
    shifted = x - x.max(axis=-1, keepdims=True)
    e = np.exp(shifted)
    out = e / e.sum(axis=-1, keepdims=True)

    def bwd(g):
        dot = (g * out).sum(axis=-1, keepdims=True)
        return (out * (g - dot),)

    return _make(out, (a,), bwd, "softmax")


def logsumexp_rows(a: Tensor) -> Tensor:
    """log Σ_j exp(x_ij) over the last axis."""
    x = a.data
    m = x.max(axis=-1, keepdims=True)
    e = np.exp(x - m)
    s = e.sum(axis=-1, keepdims=True)
    out = (m + np.log(s)).reshape(x.shape[:-1])

    def bwd(g):
        w = e / s
        return (np.expand_dims(g, -1) * w,)

    return _make(out, (a,), bwd, "logsumexp")


def lse_rows_plus(m: Tensor, v: Tensor) -> Tensor:
    """Fused log Σ_j exp(M_ij + v_j); one tape node per Sinkhorn half-step."""
    if m.data.ndim != 2 or v.data.ndim != 1 or m.data.shape[1] != v.data.shape[0]:
        raise DimensionError(
            f"'lse_rows_plus': shapes {m.data.shape} and {v.data.shape} do not conform"
        )
    x = m.data + v.data
    mx = x.max(axis=1, keepdims=True)
    e = np.exp(x - mx)
    s = e.sum(axis=1, keepdims=True)
    out = (mx + np.log(s)).ravel()

    def bwd(g):
        w = e / s
        gw = g[:, None] * w
        return (gw, gw.sum(axis=0))

    return _make(out, (m, v), bwd, "lse_rows_plus")


def row_normalize(a: Tensor) -> Tensor:
    """Divide each row by its sum; all-zero rows stay zero."""
    if a.data.ndim != 2:
        raise DimensionError(f"'row_normalize': expects 2-D, got {a.data.shape}")
    r = a.data.sum(axis=1, keepdims=True)
    nz = r != 0.0
    safe = np.where(nz, r, 1.0)
    out = a.data / safe

    def bwd(g):
        dot = (g * out).sum(axis=1, keepdims=True)
        return (np.where(nz, (g - dot) / safe, 0.0),)

    return _make(out, (a,), bwd, "row_normalize")


def scale_rows(a: Tensor, s: Tensor) -> Tensor:
    """y_ij = x_ij * s_i."""
    if a.data.ndim != 2 or s.data.ndim != 1 or a.data.shape[0] != s.data.shape[0]:
        raise DimensionError(
            f"'scale_rows': shapes {a.data.shape} and {s.data.shape} do not conform"
        )
    out = a.data * s.data[:, None]

    def bwd(g):
        return (g * s.data[:, None], (g * a.data).sum(axis=1))

    return _make(out, (a, s), bwd, "scale_rows")


def gather_rows(a: Tensor, idx) -> Tensor:
    """Differentiable row selection (duplicate indices accumulate)."""
    idx = np.asarray(idx, dtype=np.intp)
    if a.data.ndim != 2:
        raise DimensionError(f"'gather_rows': expects 2-D, got {a.data.shape}")
    if idx.size and (idx.min() < 0 or idx.max() >= a.data.shape[0]):
        raise ContractError("'gather_rows': index out of range")
    out = a.data[idx]

    def bwd(g):
        ga = np.zeros_like(a.data)
        np.add.at(ga, idx, g)
        return (ga,)

    return _make(out, (a,), bwd, "gather_rows")


def stack_rows(tensors) -> Tensor:
    """Stack 1-D tensors of equal length into a matrix."""
    tensors = [_as_tensor(t) for t in tensors]
    if not tensors:
        raise DimensionError("'stack_rows': empty input")
    n = tensors[0].data.shape
    for t in tensors:
        if t.data.shape != n or t.data.ndim != 1:
            raise DimensionError("'stack_rows': rows must be equal-length vectors")
    out = np.stack([t.data for t in tensors])

    def bwd(g):
        return tuple(g[i] for i in range(len(tensors)))

    return _make(out, tuple(tensors), bwd, "stack_rows")


def concat_vecs(tensors) -> Tensor:
    """Concatenate 1-D tensors."""
    tensors = [_as_tensor(t) for t in tensors]
    if not tensors or any(t.data.ndim != 1 for t in tensors):
        raise DimensionError("'concat_vecs': expects a nonempty list of vectors")
    out = np.concatenate([t.data for t in tensors])
    sizes = [t.data.shape[0] for t in tensors]
    bounds = np.cumsum([0] + sizes)

    def bwd(g):
        return tuple(g[bounds[i]:bounds[i + 1]] for i in range(len(tensors)))

    return _make(out, tuple(tensors), bwd, "concat_vecs")


def grad_reverse(a: Tensor) -> Tensor:
    """Identity forward, negated gradient (domain-adversarial coupling)."""

    def bwd(g):
        return (-g,)

    return _make(a.data.copy(), (a,), bwd, "grad_reverse")


# ---------------------------------------------------------------------------
# backward pass


def backward(loss: Tensor) -> None:
    """Populate grads of every requires_grad leaf reachable from `loss`.

    The tape is consumed: intermediate nodes drop their parent links so a
    second backward through the same graph is impossible by construction.
    """
    if loss.data.size != 1:
        raise ContractError(f"backward: loss must be scalar, got shape {loss.data.shape}")
    if not loss.requires_grad:
        return

    topo: list[Tensor] = []
    seen = set()
    stack = [(loss, False)]
    while stack:
        node, processed = stack.pop()
        if processed:
            topo.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for p in node._parents:
            if p.requires_grad and id(p) not in seen:
                stack.append((p, False))

    grads: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
    for node in reversed(topo):
        g = grads.pop(id(node), None)
        if g is None or node._backward is None:
            if g is not None and node.requires_grad and node._backward is None:
                node.grad = g if node.grad is None else node.grad + g
            continue
        parent_grads = node._backward(g)
        for p, pg in zip(node._parents, parent_grads):
            if not p.requires_grad or pg is None:
                continue
            acc = grads.get(id(p))
            grads[id(p)] = pg if acc is None else acc + pg
        node._parents = ()
        node._backward = None


# ---------------------------------------------------------------------------
# Adam with decoupled weight decay


@dataclass
class AdamState:
    """Optimizer state for one parameter list.

    `beta1` is the first-moment momentum (0.9); `weight_decay` is applied
    decoupled from the moment estimates.
    """

    learning_rate: float = 1e-4
    beta1: float = 0.9
    beta2: float = 0.999
    epsilon: float = 1e-8
    weight_decay: float = 0.0
    step_count: int = 0
    first_moment: list = field(default_factory=list)
    second_moment: list = field(default_factory=list)


def adam_step(params: list[Tensor], state: AdamState) -> None:
    """One deterministic Adam update over `params` (grads must be populated)."""
    if not state.first_moment:
        state.first_moment = [np.zeros_like(p.data) for p in params]
        state.second_moment = [np.zeros_like(p.data) for p in params]
    if len(state.first_moment) != len(params):
        raise ContractError("adam_step: state does not match parameter list")
    state.step_count += 1
    t = state.step_count
    b1, b2 = state.beta1, state.beta2
    c1 = 1.0 - b1 ** t
    c2 = 1.0 - b2 ** t
    lr = state.learning_rate
    for p, m, v in zip(params, state.first_moment, state.second_moment):
        if p.grad is None:
            raise ContractError("adam_step: parameter has no gradient")
        if p.grad.shape != p.data.shape:
            raise ContractError("adam_step: gradient shape mismatch")
        g = p.grad
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * (g * g)
        if state.weight_decay:
            p.data -= lr * state.weight_decay * p.data
        p.data -= lr * (m / c1) / (np.sqrt(v / c2) + state.epsilon)


# ---------------------------------------------------------------------------
# finite-difference oracle


def grad_check(f, point: Tensor, h: float = 1e-5) -> float:
    """Max relative error between tape gradients and central differences.

    `f` must map a Tensor to a scalar Tensor and be smooth at `point`.
    """
    x = Tensor(point.data.copy(), requires_grad=True)
    y = f(x)
    if y.data.size != 1:
        raise ContractError("grad_check: f must be scalar-valued")
    backward(y)
    analytic = x.grad if x.grad is not None else np.zeros_like(x.data)

    flat = point.data.ravel()
    numeric = np.zeros_like(flat)
    for i in range(flat.size):
        bump = flat.copy()
        bump[i] += h
        fp = f(Tensor(bump.reshape(point.data.shape))).item()
        bump[i] -= 2 * h
        fm = f(Tensor(bump.reshape(point.data.shape))).item()
        numeric[i] = (fp - fm) / (2 * h)
    if not (np.all(np.isfinite(numeric)) and np.all(np.isfinite(analytic))):
        raise NumericError("grad_check: non-finite derivative encountered")
    an = analytic.ravel()
    rel = np.abs(an - numeric) / (np.abs(an) + np.abs(numeric) + 1e-12)
    return float(rel.max()) if rel.size else 0.0


def xavier_uniform(rng: np.random.Generator, fan_in: int, fan_out: int, shape) -> np.ndarray:
    bound = math.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-bound, bound, size=shape)
