"""Dense float64 tensors with reverse-mode automatic differentiation.

Every operation returns a new :class:`Tensor` that remembers its parents and a
closure mapping the output gradient to parent gradients. Calling
:func:`backward` on a scalar sorts the reachable graph into a :class:`Tape`
(topological order) and replays it in reverse exactly once.

numpy provides the array storage; all derivative rules live here.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Iterable, Sequence

import numpy as np

from .errors import ContractError, DimensionError, NonFiniteError

LEAKY_SLOPE = 0.01

BackwardFn = Callable[[np.ndarray], Sequence["np.ndarray | None"]]


def _check_finite(arr: np.ndarray, op: str) -> None:
    if not np.isfinite(arr).all():
        raise NonFiniteError(f"non-finite values produced by {op!r}")


class Tensor:
    __slots__ = ("data", "requires_grad", "grad", "name", "_parents", "_backward", "_op")

    def __init__(self, data, requires_grad: bool = False, name: str | None = None):
        arr = np.array(data, dtype=np.float64)
        _check_finite(arr, "tensor construction")
        self.data = arr
        self.requires_grad = requires_grad
        self.grad: np.ndarray | None = None
        self.name = name
        self._parents: tuple[Tensor, ...] = ()
        self._backward: BackwardFn | None = None
        self._op = "leaf"

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
        return float(self.data)

    def zero_grad(self) -> None:
        self.grad = np.zeros_like(self.data)

    def __repr__(self) -> str:
        label = f", name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}, op={self._op!r}{label})"

    # operator sugar
    def __add__(self, other):
        return add(self, _lift(other))

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, _lift(other))

    def __rsub__(self, other):
        return sub(_lift(other), self)

    def __mul__(self, other):
        if isinstance(other, (int, float)):
            return scale(self, float(other))
        return mul(self, other)

    def __rmul__(self, other):
        return self.__mul__(other)

    def __neg__(self):
        return scale(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, key):
        return index(self, key)

    @property
    def T(self):
        return transpose(self)

    def backward(self) -> "Tape":
        return backward(self)


def _lift(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def record(data: np.ndarray, parents: Iterable[Tensor], backward_fn: BackwardFn, op: str) -> Tensor:
    """Wrap a forward result as a tape node.

    ``backward_fn`` receives the output gradient and returns one gradient (or
    ``None``) per parent, in order.
    """
    data = np.asarray(data)
    if data.dtype.kind != "f":
        data = data.astype(np.float64)
    _check_finite(data, op)
    out = Tensor.__new__(Tensor)
    out.data = data
    out.grad = None
    out.name = None
    out._op = op
    parents = tuple(parents)
    if any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = parents
        out._backward = backward_fn
    else:
        out.requires_grad = False
        out._parents = ()
        out._backward = None
    return out


# ---------------------------------------------------------------- tape

@dataclass
class Tape:
    """Operations reachable from a root, inputs strictly before outputs."""

    nodes: list[Tensor] = field(default_factory=list)

    @classmethod
    def from_root(cls, root: Tensor) -> "Tape":
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
            for parent in node._parents:
                if parent.requires_grad and id(parent) not in seen:
                    stack.append((parent, False))
        return cls(order)

    def __len__(self) -> int:
        return len(self.nodes)

    def run_backward(self, root: Tensor) -> None:
        grads: dict[int, np.ndarray] = {id(root): np.ones_like(root.data)}
        for node in reversed(self.nodes):
            g = grads.pop(id(node), None)
            if g is None:
                continue
            node.grad = g.copy() if node.grad is None else node.grad + g
            if node._backward is None:
                continue
            parent_grads = node._backward(g)
            for parent, pg in zip(node._parents, parent_grads):
                if pg is None or not parent.requires_grad:
                    continue
                key = id(parent)
                if key in grads:
                    grads[key] = grads[key] + pg
                else:
                    grads[key] = np.asarray(pg, dtype=np.float64)


def backward(root: Tensor, tape: Tape | None = None) -> Tape:
    """Populate ``.grad`` on every grad-requiring tensor reachable from ``root``.

    Gradients accumulate across calls; zero them between steps.
    """
    if root.data.size != 1:
        raise ContractError(f"backward needs a scalar root, got shape {root.shape}")
    if not root.requires_grad:
        return Tape()
    if tape is None:
        tape = Tape.from_root(root)
    tape.run_backward(root)
    return tape


# ---------------------------------------------------------------- broadcasting

def _binary_shapes(a: Tensor, b: Tensor, op: str) -> None:
    if a.shape == b.shape:
        return
    if b.ndim == 1 and a.ndim >= 1 and a.shape[-1:] == b.shape:
        return
    if a.ndim == 1 and b.ndim >= 1 and b.shape[-1:] == a.shape:
        return
    raise DimensionError(f"{op}: cannot combine shapes {a.shape} and {b.shape}")


def _reduce_to(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    if g.shape == shape:
        return g
    return g.reshape(-1, shape[-1]).sum(axis=0)


# ---------------------------------------------------------------- elementwise

def add(a: Tensor, b: Tensor) -> Tensor:
    _binary_shapes(a, b, "add")
    return record(a.data + b.data, (a, b),
                  lambda g: (_reduce_to(g, a.shape), _reduce_to(g, b.shape)), "add")


def sub(a: Tensor, b: Tensor) -> Tensor:
    _binary_shapes(a, b, "sub")
    return record(a.data - b.data, (a, b),
                  lambda g: (_reduce_to(g, a.shape), -_reduce_to(g, b.shape)), "sub")


def mul(a: Tensor, b: Tensor) -> Tensor:
    _binary_shapes(a, b, "mul")
    ad, bd = a.data, b.data
    return record(ad * bd, (a, b),
                  lambda g: (_reduce_to(g * bd, a.shape), _reduce_to(g * ad, b.shape)), "mul")


def scale(a: Tensor, c: float) -> Tensor:
    return record(a.data * c, (a,), lambda g: (g * c,), "scale")


def exp(a: Tensor) -> Tensor:
    with np.errstate(over="ignore"):
        y = np.exp(a.data)
    return record(y, (a,), lambda g: (g * y,), "exp")


def tanh(a: Tensor) -> Tensor:
    y = np.tanh(a.data)
    return record(y, (a,), lambda g: (g * (1.0 - y * y),), "tanh")


def _sigmoid(x: np.ndarray) -> np.ndarray:
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


def _softplus(x: np.ndarray) -> np.ndarray:
    return np.logaddexp(0.0, x)


def sigmoid(a: Tensor) -> Tensor:
    y = _sigmoid(a.data)
    return record(y, (a,), lambda g: (g * y * (1.0 - y),), "sigmoid")


def softplus(a: Tensor) -> Tensor:
    x = a.data
    return record(_softplus(x), (a,), lambda g: (g * _sigmoid(x),), "softplus")


def silu(a: Tensor) -> Tensor:
    x = a.data
    s = _sigmoid(x)
    return record(x * s, (a,), lambda g: (g * s * (1.0 + x * (1.0 - s)),), "silu")


def leaky_relu(a: Tensor, slope: float = LEAKY_SLOPE) -> Tensor:
    x = a.data
    d = np.where(x > 0, 1.0, slope)
    return record(x * d, (a,), lambda g: (g * d,), "leaky_relu")


_UNARY = {"exp": exp, "tanh": tanh, "softplus": softplus, "silu": silu,
          "leaky_relu": leaky_relu, "sigmoid": sigmoid}
_BINARY = {"add": add, "mul": mul, "sub": sub}


def elementwise(op: str, *args: Tensor) -> Tensor:
    """Dispatch by name, e.g. ``elementwise("tanh", x)``."""
    if op in _UNARY:
        if len(args) != 1:
            raise ContractError(f"{op} takes one operand, got {len(args)}")
        return _UNARY[op](args[0])
    if op in _BINARY:
        if len(args) != 2:
            raise ContractError(f"{op} takes two operands, got {len(args)}")
        return _BINARY[op](*args)
    raise ContractError(f"unknown elementwise op {op!r}")


# ---------------------------------------------------------------- linear algebra

def matmul(a: Tensor, b: Tensor) -> Tensor:
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[0]:
        raise DimensionError(f"matmul: incompatible shapes {a.shape} and {b.shape}")
    ad, bd = a.data, b.data
    return record(ad @ bd, (a, b), lambda g: (g @ bd.T, ad.T @ g), "matmul")


def linear(x: Tensor, w: Tensor, b: Tensor | None = None) -> Tensor:
    """``x @ w.T + b`` for ``x`` of shape (m, in) and ``w`` of shape (out, in)."""
    y = matmul(x, transpose(w))
    return y if b is None else add(y, b)


def transpose(a: Tensor) -> Tensor:
    if a.ndim != 2:
        raise DimensionError(f"transpose expects a matrix, got shape {a.shape}")
    return record(a.data.T, (a,), lambda g: (g.T,), "transpose")


def reshape(a: Tensor, shape: tuple[int, ...]) -> Tensor:
    src = a.shape
    try:
        y = a.data.reshape(shape)
    except ValueError as exc:
        raise DimensionError(f"reshape: {src} -> {shape}: {exc}") from None
    return record(y, (a,), lambda g: (g.reshape(src),), "reshape")


def sum(a: Tensor, axis: int | None = None) -> Tensor:  # noqa: A001
    src = a.shape
    y = a.data.sum(axis=axis)
    if axis is None:
        return record(y, (a,), lambda g: (np.broadcast_to(g, src).copy(),), "sum")
    ax = axis % a.ndim
    return record(y, (a,), lambda g: (np.broadcast_to(np.expand_dims(g, ax), src).copy(),), "sum")


def mean(a: Tensor, axis: int | None = None) -> Tensor:
    n = a.size if axis is None else a.shape[axis]
    return scale(sum(a, axis), 1.0 / n)


def concat(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    if not tensors:
        raise ContractError("concat needs at least one tensor")
    try:
        y = np.concatenate([t.data for t in tensors], axis=axis)
    except ValueError as exc:
        raise DimensionError(f"concat: {exc}") from None
    bounds = np.cumsum([t.shape[axis] for t in tensors])[:-1]
    return record(y, tensors, lambda g: tuple(np.split(g, bounds, axis=axis)), "concat")


def index(a: Tensor, key) -> Tensor:
    """Basic or integer-array indexing; gradients scatter-add back."""
    src = a.shape
    y = a.data[key]

    def _bw(g):
        full = np.zeros(src, dtype=g.dtype)
        np.add.at(full, key, g)
        return (full,)

    return record(np.array(y), (a,), _bw, "index")


def gather_rows(a: Tensor, idx) -> Tensor:
    """Rows ``a[idx]`` for an integer index vector."""
    idx = np.asarray(idx, dtype=np.int64)
    if idx.ndim != 1:
        raise DimensionError(f"gather_rows expects a 1-D index, got shape {idx.shape}")
    n = a.shape[0]
    if idx.size and (idx.min() < 0 or idx.max() >= n):
        raise ContractError(f"gather_rows: index out of range for {n} rows")
    src = a.shape

    return record(a.data[idx], (a,), lambda g: (_scatter_rows(np.add, idx, g, n, 0.0),),
                  "gather_rows")


def scale_rows(a: Tensor, w: Tensor) -> Tensor:
    """Multiply row ``i`` of matrix ``a`` by scalar ``w[i]``."""
    if a.ndim != 2 or w.shape != (a.shape[0],):
        raise DimensionError(f"scale_rows: shapes {a.shape} and {w.shape}")
    ad, wd = a.data, w.data
    return record(ad * wd[:, None], (a, w),
                  lambda g: (g * wd[:, None], (g * ad).sum(axis=1)), "scale_rows")


# ---------------------------------------------------------------- segment ops

def _scatter_rows(ufunc, idx: np.ndarray, rows: np.ndarray, n: int, fill: float) -> np.ndarray:
    """``out[k] = ufunc.reduce(rows[idx == k])``, ``fill`` where no row lands.

    Rows reduce in their original order within each bucket, so results do
    not depend on how the buckets happen to interleave.
    """
    out = np.full((n,) + rows.shape[1:], fill, dtype=rows.dtype)
    if idx.size == 0:
        return out
    order = np.argsort(idx, kind="stable")
    s = idx[order]
    starts = np.flatnonzero(np.concatenate([[True], s[1:] != s[:-1]]))
    out[s[starts]] = ufunc.reduceat(rows[order], starts, axis=0)
    return out


def _check_segments(seg: np.ndarray, m: int, n: int, op: str) -> np.ndarray:
    seg = np.asarray(seg, dtype=np.int64)
    if seg.shape != (m,):
        raise DimensionError(f"{op}: {m} rows but {seg.shape} segment ids")
    if m and (seg.min() < 0 or seg.max() >= n):
        raise ContractError(f"{op}: segment id out of range [0, {n})")
    return seg


def segment_sum(a: Tensor, seg, num_segments: int) -> Tensor:
    """Sum rows of ``a`` that share a segment id, in row order."""
    seg = _check_segments(seg, a.shape[0], num_segments, "segment_sum")
    out = _scatter_rows(np.add, seg, a.data, num_segments, 0.0)
    return record(out, (a,), lambda g: (g[seg],), "segment_sum")


def segment_softmax(scores: Tensor, seg, num_segments: int) -> Tensor:
    """Softmax over rows sharing a segment id, independently per column."""
    seg = _check_segments(seg, scores.shape[0], num_segments, "segment_softmax")
    x = scores.data
    peak = _scatter_rows(np.maximum, seg, x, num_segments, -np.inf)
    e = np.exp(x - peak[seg])
    total = _scatter_rows(np.add, seg, e, num_segments, 0.0)
    y = e / total[seg]

    def _bw(g):
        dot = _scatter_rows(np.add, seg, g * y, num_segments, 0.0)
        return (y * (g - dot[seg]),)

    return record(y, (scores,), _bw, "segment_softmax")


def softmax_lastdim(x: Tensor) -> Tensor:
    if x.ndim == 0 or x.shape[-1] == 0:
        raise DimensionError(f"softmax over an empty last dimension (shape {x.shape})")
    z = x.data - x.data.max(axis=-1, keepdims=True)
    e = np.exp(z)
    y = e / e.sum(axis=-1, keepdims=True)
    return record(y, (x,), lambda g: (y * (g - (g * y).sum(axis=-1, keepdims=True)),), "softmax")


def log_softmax_lastdim(x: Tensor) -> Tensor:
    z = x.data - x.data.max(axis=-1, keepdims=True)
    lse = np.log(np.exp(z).sum(axis=-1, keepdims=True))
    y = z - lse
    p = np.exp(y)
    return record(y, (x,), lambda g: (g - p * g.sum(axis=-1, keepdims=True),), "log_softmax")


def cross_entropy(logits: Tensor, labels) -> Tensor:
    """Mean negative log-likelihood of integer ``labels`` under row-wise softmax."""
    labels = np.asarray(labels, dtype=np.int64)
    if logits.ndim != 2 or labels.shape != (logits.shape[0],):
        raise DimensionError(f"cross_entropy: logits {logits.shape}, labels {labels.shape}")
    if labels.size == 0:
        raise ContractError("cross_entropy over zero rows")
    m = labels.size
    z = logits.data - logits.data.max(axis=1, keepdims=True)
    lse = np.log(np.exp(z).sum(axis=1, keepdims=True))
    logp = z - lse
    loss = -logp[np.arange(m), labels].mean()

    def _bw(g):
        d = np.exp(logp)
        d[np.arange(m), labels] -= 1.0
        return (d * (g / m),)

    return record(loss, (logits,), _bw, "cross_entropy")


# ---------------------------------------------------------------- optimiser

@dataclass
class AdamState:
    """Adam moments with decoupled weight decay, keyed by parameter name."""

    lr: float = 1e-3
    weight_decay: float = 0.0
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    step: int = 0
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)


def adam_step(params: Sequence[Tensor], state: AdamState) -> None:
    """One AdamW update in place, then zero the gradients."""
    for i, p in enumerate(params):
        if p.grad is None:
            raise ContractError(f"parameter {p.name or i!r} has no gradient")
    state.step += 1
    t = state.step
    bc1 = 1.0 - state.beta1 ** t
    bc2 = 1.0 - state.beta2 ** t
    for i, p in enumerate(params):
        key = p.name or str(i)
        g = p.grad
        m = state.m.get(key)
        if m is None:
            m = state.m[key] = np.zeros_like(p.data)
            state.v[key] = np.zeros_like(p.data)
        v = state.v[key]
        if m.shape != p.data.shape:
            raise DimensionError(f"moment buffer for {key!r} has shape {m.shape}, parameter {p.shape}")
        if state.weight_decay:
            p.data -= state.lr * state.weight_decay * p.data
        m *= state.beta1
        m += (1.0 - state.beta1) * g
        v *= state.beta2
        v += (1.0 - state.beta2) * g * g
        p.data -= state.lr * (m / bc1) / (np.sqrt(v / bc2) + state.eps)
        p.grad = np.zeros_like(p.data)
