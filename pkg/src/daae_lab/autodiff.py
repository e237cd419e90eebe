"""Dense float64 tensors with reverse-mode automatic differentiation.

Every operation returns a new :class:`Tensor`. When any input is tracked
(``requires_grad=True``) the result records its parents and a closure that
maps the output gradient to input gradients. :meth:`Tensor.backward` walks the
graph once in reverse topological order.

Leaf gradients accumulate across ``backward`` calls; call
:meth:`Tensor.zero_grad` (or ``Adam.zero_grad``) between optimizer steps.
"""

from __future__ import annotations

import contextlib
import itertools
import math
from dataclasses import dataclass, field
from typing import Callable, Dict, List, Mapping, Optional, Sequence

import numpy as np

DTYPE = np.float64

_node_ids = itertools.count()
_grad_enabled = True


class NumericError(FloatingPointError):
    """Raised when a value or gradient becomes NaN or infinite."""


@contextlib.contextmanager
def no_grad():
    """Disable graph construction inside the block (evaluation only)."""
    global _grad_enabled
    prev = _grad_enabled
    _grad_enabled = False
    try:
        yield
    finally:
        _grad_enabled = prev


class Tensor:
    """An n-dimensional float64 array that can take part in a gradient graph."""

    __slots__ = ("data", "grad", "requires_grad", "node_id", "name", "_parents", "_backward")
    __array_ufunc__ = None  # make ndarray <op> Tensor defer to Tensor's operators

    def __init__(self, data, requires_grad: bool = False, name: Optional[str] = None):
        arr = np.array(data, dtype=DTYPE) if not isinstance(data, np.ndarray) else data
        if arr.dtype != DTYPE:
            arr = arr.astype(DTYPE)
        self.data = arr
        self.requires_grad = requires_grad
        self.grad: Optional[np.ndarray] = None
        self.node_id = next(_node_ids)
        self.name = name
        self._parents: tuple = ()
        self._backward: Optional[Callable[[np.ndarray], Sequence[Optional[np.ndarray]]]] = None

    @property
    def shape(self):
        return self.data.shape

    @property
    def size(self) -> int:
        return self.data.size

    @property
    def ndim(self) -> int:
        return self.data.ndim

    def item(self) -> float:
        if self.data.size != 1:
            raise ValueError(f"item() needs a single-element tensor, got shape {self.shape}")
        return float(self.data.reshape(-1)[0])

    def numpy(self) -> np.ndarray:
        return self.data

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self) -> str:
        tag = f", name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}{tag}, requires_grad={self.requires_grad})"

    # operator sugar
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
        if isinstance(other, Tensor):
            return mul(self, reciprocal(other))
        return mul(self, 1.0 / float(other))

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, idx):
        return getitem(self, idx)

    def sum(self, axis=None):
        return sum_(self, axis)

    def mean(self, axis=None):
        return mean(self, axis)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def backward(self, grad: Optional[np.ndarray] = None) -> None:
        """Backpropagate from this scalar into every tracked leaf.

        Raises:
            ValueError: if the tensor is not a scalar and no seed gradient is given.
        """
        if grad is None:
            if self.data.size != 1:
                raise ValueError(f"backward() needs a scalar root, got shape {self.shape}")
            grad = np.ones_like(self.data)
        order = _topological_order(self)
        grads: Dict[int, np.ndarray] = {self.node_id: np.asarray(grad, dtype=DTYPE)}
        owned = set()  # buffers safe to update in place
        for node in reversed(order):
            g = grads.pop(node.node_id, None)
            if g is None:
                continue
            if node._backward is None:
                if node.requires_grad:
                    node.grad = g.copy() if node.grad is None else node.grad + g
                continue
            for parent, pg in zip(node._parents, node._backward(g)):
                if pg is None or not parent.requires_grad:
                    continue
                pid = parent.node_id
                prev = grads.get(pid)
                if isinstance(pg, _Scatter):
                    if prev is None:
                        prev = np.zeros(parent.shape, dtype=DTYPE)
                    elif pid not in owned:
                        prev = prev.copy()
                    prev[pg.index] += pg.values
                    grads[pid] = prev
                    owned.add(pid)
                elif prev is None:
                    grads[pid] = pg
                elif pid in owned:
                    prev += pg
                else:
                    grads[pid] = prev + pg
                    owned.add(pid)


class _Scatter:
    """Gradient confined to ``index`` of the parent; accumulated in place."""

    __slots__ = ("index", "values")

    def __init__(self, index, values):
        self.index = index
        self.values = values


def _topological_order(root: Tensor) -> List[Tensor]:
    order: List[Tensor] = []
    seen = set()
    stack = [(root, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if node.node_id in seen:
            continue
        seen.add(node.node_id)
        stack.append((node, True))
        for p in node._parents:
            if p.requires_grad and p.node_id not in seen:
                stack.append((p, False))
    return order


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _make(data: np.ndarray, parents: Sequence[Tensor], backward) -> Tensor:
    out = Tensor(data)
    if _grad_enabled and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = tuple(parents)
        out._backward = backward
    return out


def _unbroadcast(g: np.ndarray, shape) -> np.ndarray:
    if g.shape == shape:
        return g
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for ax, n in enumerate(shape):
        if n == 1 and g.shape[ax] != 1:
            g = g.sum(axis=ax, keepdims=True)
    return g


def _broadcast_check(a: Tensor, b: Tensor, op: str) -> None:
    try:
        np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise ValueError(f"{op}: incompatible shapes {a.shape} and {b.shape}") from None


# elementwise arithmetic

def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_check(a, b, "add")
    sa, sb = a.shape, b.shape
    return _make(a.data + b.data, (a, b), lambda g: (_unbroadcast(g, sa), _unbroadcast(g, sb)))


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_check(a, b, "sub")
    sa, sb = a.shape, b.shape
    return _make(a.data - b.data, (a, b), lambda g: (_unbroadcast(g, sa), -_unbroadcast(g, sb)))


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_check(a, b, "mul")
    ad, bd = a.data, b.data
    return _make(
        ad * bd,
        (a, b),
        lambda g: (_unbroadcast(g * bd, ad.shape), _unbroadcast(g * ad, bd.shape)),
    )


def neg(a) -> Tensor:
    a = as_tensor(a)
    return _make(-a.data, (a,), lambda g: (-g,))


def reciprocal(a) -> Tensor:
    a = as_tensor(a)
    out = 1.0 / a.data
    return _make(out, (a,), lambda g: (-g * out * out,))


def matmul(a, b) -> Tensor:
    """Matrix product of 2-D operands, ``(n, k) @ (k, m) -> (n, m)``."""
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[0]:
        raise ValueError(f"matmul: incompatible shapes {a.shape} and {b.shape}")
    ad, bd = a.data, b.data
    return _make(ad @ bd, (a, b), lambda g: (g @ bd.T, ad.T @ g))


# nonlinearities

def sigmoid(a) -> Tensor:
    a = as_tensor(a)
    out = _stable_sigmoid(a.data)
    return _make(out, (a,), lambda g: (g * out * (1.0 - out),))


def _stable_sigmoid(x: np.ndarray) -> np.ndarray:
    # tanh form never overflows and is one ufunc pass
    return 0.5 + 0.5 * np.tanh(0.5 * x)


def log_sigmoid(a) -> Tensor:
    """``log(sigmoid(a))`` without overflow for large ``|a|``."""
    a = as_tensor(a)
    x = a.data
    out = np.minimum(x, 0.0) - np.log1p(np.exp(-np.abs(x)))
    return _make(out, (a,), lambda g: (g * _stable_sigmoid(-x),))


def tanh(a) -> Tensor:
    a = as_tensor(a)
    out = np.tanh(a.data)
    return _make(out, (a,), lambda g: (g * (1.0 - out * out),))


def relu(a) -> Tensor:
    a = as_tensor(a)
    pos = a.data > 0
    return _make(a.data * pos, (a,), lambda g: (g * pos,))


def exp(a) -> Tensor:
    a = as_tensor(a)
    out = np.exp(a.data)
    return _make(out, (a,), lambda g: (g * out,))


def log(a) -> Tensor:
    a = as_tensor(a)
    x = a.data
    return _make(np.log(x), (a,), lambda g: (g / x,))


def abs_(a) -> Tensor:
    a = as_tensor(a)
    s = np.sign(a.data)
    return _make(np.abs(a.data), (a,), lambda g: (g * s,))


# reductions and shape ops

def sum_(a, axis=None) -> Tensor:
    a = as_tensor(a)
    shape = a.shape

    def bw(g):
        if axis is not None:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, shape).copy(),)

    return _make(np.asarray(a.data.sum(axis=axis)), (a,), bw)


def mean(a, axis=None) -> Tensor:
    a = as_tensor(a)
    n = a.size if axis is None else a.shape[axis]
    return mul(sum_(a, axis), 1.0 / n)


def reshape(a, shape) -> Tensor:
    a = as_tensor(a)
    old = a.shape
    try:
        out = a.data.reshape(shape)
    except ValueError:
        raise ValueError(f"reshape: cannot view shape {old} as {tuple(shape)}") from None
    return _make(out, (a,), lambda g: (g.reshape(old),))


def getitem(a, idx) -> Tensor:
    """Basic slicing (ints, slices); the gradient lands only in the sliced region."""
    a = as_tensor(a)
    return _make(np.array(a.data[idx]), (a,), lambda g: (_Scatter(idx, g),))


def concat(tensors: Sequence[Tensor], axis: int = -1) -> Tensor:
    ts = [as_tensor(t) for t in tensors]
    ref = list(ts[0].shape)
    ax = axis % len(ref)
    for t in ts[1:]:
        other = list(t.shape)
        if len(other) != len(ref) or any(o != r for k, (o, r) in enumerate(zip(other, ref)) if k != ax):
            raise ValueError(f"concat: incompatible shapes {ts[0].shape} and {t.shape}")
    splits = np.cumsum([t.shape[ax] for t in ts])[:-1]
    return _make(
        np.concatenate([t.data for t in ts], axis=ax),
        ts,
        lambda g: tuple(np.split(g, splits, axis=ax)),
    )


def stack(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    ts = [as_tensor(t) for t in tensors]
    for t in ts[1:]:
        if t.shape != ts[0].shape:
            raise ValueError(f"stack: incompatible shapes {ts[0].shape} and {t.shape}")
    n = len(ts)
    return _make(
        np.stack([t.data for t in ts], axis=axis),
        ts,
        lambda g: tuple(np.take(g, k, axis=axis) for k in range(n)),
    )


def embedding(weight: Tensor, ids) -> Tensor:
    """Gather rows of a ``(V, E)`` table; output shape is ``ids.shape + (E,)``."""
    ids = np.asarray(ids, dtype=np.int64)
    V = weight.shape[0]
    if ids.size and (ids.min() < 0 or ids.max() >= V):
        raise ValueError(f"embedding: token id out of range for table of shape {weight.shape}")
    shape = weight.shape

    def bw(g):
        full = np.zeros(shape, dtype=DTYPE)
        np.add.at(full, ids.reshape(-1), g.reshape(-1, shape[1]))
        return (full,)

    return _make(weight.data[ids], (weight,), bw)


def log_softmax(a, axis: int = -1) -> Tensor:
    a = as_tensor(a)
    x = a.data
    shifted = x - x.max(axis=axis, keepdims=True)
    out = shifted - np.log(np.exp(shifted).sum(axis=axis, keepdims=True))
    soft = np.exp(out)
    return _make(out, (a,), lambda g: (g - soft * g.sum(axis=axis, keepdims=True),))


def softmax(x: np.ndarray, axis: int = -1) -> np.ndarray:
    z = x - x.max(axis=axis, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=axis, keepdims=True)


def softmax_cross_entropy(logits, targets, weights=None) -> Tensor:
    """Weighted sum of ``-log softmax(logits)[target]`` over all rows.

    Args:
        logits: ``(N, V)`` tensor.
        targets: ``N`` integer class ids.
        weights: optional ``N`` non-negative row weights (zero masks a row out).

    Returns:
        Scalar tensor ``sum_n w_n * nll_n``.
    """
    logits = as_tensor(logits)
    x = logits.data
    targets = np.asarray(targets, dtype=np.int64).reshape(-1)
    if x.ndim != 2 or x.shape[0] != targets.shape[0]:
        raise ValueError(f"softmax_cross_entropy: logits {x.shape} vs targets {targets.shape}")
    w = np.ones(len(targets)) if weights is None else np.asarray(weights, dtype=DTYPE).reshape(-1)
    rows = np.arange(len(targets))
    shifted = x - x.max(axis=1, keepdims=True)
    lse = np.log(np.exp(shifted).sum(axis=1))
    nll = lse - shifted[rows, targets]
    soft = np.exp(shifted - lse[:, None])

    def bw(g):
        d = soft.copy()
        d[rows, targets] -= 1.0
        return (d * (w * g)[:, None],)

    return _make(np.asarray((w * nll).sum()), (logits,), bw)


def gru_scan(xs, w_h, b_h, mask: Optional[np.ndarray] = None) -> Tensor:
    """Fused GRU recurrence over pre-projected inputs.

    ``xs`` is ``(T, B, 3H)`` holding ``x_t W_x + b_x`` with gate blocks ordered
    (reset, update, candidate). Returns all hidden states ``(T, B, H)`` from a
    zero initial state. Where ``mask[t, b]`` is false the state is carried
    through unchanged. Equivalent to unrolling the cell from primitive ops,
    with a single graph node and hand-written backpropagation through time.
    """
    xs, w_h, b_h = as_tensor(xs), as_tensor(w_h), as_tensor(b_h)
    T, B, G = xs.shape
    H = w_h.shape[0]
    if G != 3 * H or w_h.shape != (H, 3 * H) or b_h.shape != (3 * H,):
        raise ValueError(f"gru_scan: incompatible shapes {xs.shape} and {w_h.shape}")
    X, W, bias = xs.data, w_h.data, b_h.data
    m = None if mask is None else np.asarray(mask, dtype=DTYPE)[:, :, None]
    hs = np.empty((T, B, H))
    prev = np.zeros((B, H))
    cache = []
    for t in range(T):
        hh = prev @ W + bias
        ru = _stable_sigmoid(X[t, :, : 2 * H] + hh[:, : 2 * H])
        n = np.tanh(X[t, :, 2 * H :] + ru[:, :H] * hh[:, 2 * H :])
        new = n + ru[:, H:] * (prev - n)
        if m is not None:
            new = prev + m[t] * (new - prev)
        cache.append((hh, ru, n))
        hs[t] = new
        prev = new

    def bw(g):
        dX = np.empty_like(X)
        dHH = np.empty_like(X)
        carry = np.zeros((B, H))
        for t in reversed(range(T)):
            hh, ru, n = cache[t]
            hp = hs[t - 1] if t > 0 else np.zeros((B, H))
            dh = g[t] + carry
            if m is not None:
                dnew = dh * m[t]
                carry = dh - dnew
            else:
                dnew = dh
                carry = 0.0
            r, u = ru[:, :H], ru[:, H:]
            da = dnew * (1.0 - u) * (1.0 - n * n)
            gate = dHH[t, :, : 2 * H]
            gate[:, :H] = da * hh[:, 2 * H :]
            gate[:, H:] = dnew * (hp - n)
            gate *= ru * (1.0 - ru)
            dHH[t, :, 2 * H :] = da * r
            dX[t, :, : 2 * H] = gate
            dX[t, :, 2 * H :] = da
            carry = carry + dnew * u + dHH[t] @ W.T
        # weight gradients in one product over all steps
        prev_h = np.concatenate([np.zeros((1, B, H)), hs[:-1]]).reshape(-1, H)
        dW = prev_h.T @ dHH.reshape(-1, G)
        db = dHH.sum(axis=(0, 1))
        return dX, dW, db

    return _make(hs, (xs, w_h, b_h), bw)


# parameters and optimization

def parameter(shape, rng: np.random.Generator, scale: float = 0.1, name=None) -> Tensor:
    """Weight matrix drawn uniformly from ``[-scale, scale]``."""
    return Tensor(rng.uniform(-scale, scale, size=shape), requires_grad=True, name=name)


def zeros_parameter(shape, name=None) -> Tensor:
    return Tensor(np.zeros(shape), requires_grad=True, name=name)


def finite_difference_check(
    fn: Callable[..., Tensor],
    point,
    eps: float = 1e-5,
    coords: Optional[int] = None,
    rng: Optional[np.random.Generator] = None,
) -> float:
    """Compare autodiff gradients of a scalar function against central differences.

    ``point`` is an array or a sequence of arrays (one per argument of ``fn``);
    ``fn`` receives :class:`Tensor` arguments. Returns
    ``max |analytic - numeric| / max(1, |analytic|)`` over the checked coordinates.

    By default every coordinate is checked. With ``coords`` set, that many
    coordinates (drawn without replacement from ``rng`` across all arguments)
    are checked instead, which keeps checks on whole models affordable.
    """
    if eps <= 0:
        raise ValueError("eps must be positive")
    single = isinstance(point, (np.ndarray, float, int))
    arrays = [np.array(point, dtype=DTYPE)] if single else [np.array(p, dtype=DTYPE) for p in point]
    tensors = [Tensor(a.copy(), requires_grad=True) for a in arrays]
    out = fn(*tensors)
    if out.size != 1:
        raise ValueError(f"finite_difference_check needs a scalar function, got shape {out.shape}")
    if not np.isfinite(out.data).all():
        raise NumericError("function value is not finite at the check point")
    out.backward()
    sizes = [t.size for t in tensors]
    chosen = None
    if coords is not None and coords < sum(sizes):
        rng = rng if rng is not None else np.random.default_rng(0)
        chosen = np.sort(rng.choice(sum(sizes), size=coords, replace=False))
    worst = 0.0
    offset = 0
    with no_grad():
        for t in tensors:
            analytic = np.zeros_like(t.data) if t.grad is None else t.grad
            flat = t.data.reshape(-1)
            if chosen is None:
                ks = range(flat.size)
            else:
                ks = chosen[(chosen >= offset) & (chosen < offset + flat.size)] - offset
            offset += flat.size
            for k in ks:
                orig = flat[k]
                flat[k] = orig + eps
                fp = fn(*tensors).item()
                flat[k] = orig - eps
                fm = fn(*tensors).item()
                flat[k] = orig
                if not (math.isfinite(fp) and math.isfinite(fm)):
                    raise NumericError(f"function value is not finite near coordinate {k}")
                num = (fp - fm) / (2 * eps)
                a = analytic.reshape(-1)[k]
                worst = max(worst, abs(a - num) / max(1.0, abs(a)))
    return worst


@dataclass
class AdamState:
    """Moment buffers and step count for one set of parameters."""

    lr: float = 5e-4
    beta1: float = 0.5
    beta2: float = 0.999
    eps: float = 1e-8
    t: int = 0
    m: Dict[str, np.ndarray] = field(default_factory=dict)
    v: Dict[str, np.ndarray] = field(default_factory=dict)


def adam_step(params: Mapping[str, Tensor], grads: Mapping[str, np.ndarray], state: AdamState) -> None:
    """Apply one bias-corrected Adam update in place and advance ``state.t``.

    Parameters without an entry in ``grads`` are treated as having zero gradient.
    """
    for name, g in grads.items():
        if name not in params:
            raise KeyError(f"gradient for unknown parameter {name!r}")
        if g.shape != params[name].shape:
            raise ValueError(f"adam: gradient shape {g.shape} does not match parameter {name!r} {params[name].shape}")
        if not np.isfinite(g).all():
            raise NumericError(f"non-finite gradient for parameter {name!r}")
    state.t += 1
    t = state.t
    c1 = 1.0 - state.beta1 ** t
    c2 = 1.0 - state.beta2 ** t
    for name, p in params.items():
        g = grads.get(name)
        if g is None:
            g = np.zeros_like(p.data)
        m = state.m.get(name)
        if m is None:
            m = state.m[name] = np.zeros_like(p.data)
            state.v[name] = np.zeros_like(p.data)
        v = state.v[name]
        m *= state.beta1
        m += (1.0 - state.beta1) * g
        v *= state.beta2
        v += (1.0 - state.beta2) * g * g
        p.data -= state.lr * (m / c1) / (np.sqrt(v / c2) + state.eps)


class Adam:
    """Adam over a named parameter dict, reading each parameter's ``.grad``."""

    def __init__(self, params: Mapping[str, Tensor], lr=5e-4, beta1=0.5, beta2=0.999, eps=1e-8):
        self.params = dict(params)
        self.state = AdamState(lr=lr, beta1=beta1, beta2=beta2, eps=eps)

    def zero_grad(self) -> None:
        for p in self.params.values():
            p.grad = None

    def step(self) -> None:
        grads = {n: p.grad for n, p in self.params.items() if p.grad is not None}
        adam_step(self.params, grads, self.state)
