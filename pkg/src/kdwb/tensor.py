"""Dense float64 tensors with reverse-mode automatic differentiation.

Every operation that touches a tensor with ``requires_grad`` records its
inputs and a local backward rule. :func:`backward` linearises the recorded
graph into a :class:`Tape` (topological order) and replays it in reverse,
visiting each node once.

Broadcasting is deliberately narrow: elementwise ops accept same-shape
operands, Python scalars, a trailing-suffix "bias" operand, or a constant
(non-differentiable) numpy array that broadcasts onto the tensor's shape.
"""

from __future__ import annotations

import contextlib
import threading
from typing import Callable, Iterable, Sequence

import numpy as np
from scipy.special import ndtr

__all__ = [
    "Tensor",
    "Tape",
    "ShapeError",
    "ContractError",
    "NonFiniteError",
    "no_grad",
    "grad_enabled",
    "backward",
    "matmul",
    "softmax_rows",
    "log_softmax_rows",
    "layer_norm",
    "gelu",
    "tanh",
    "embedding",
    "finite_diff_check",
]

_state = threading.local()


class ShapeError(ValueError):
    """Operand shapes are incompatible for the requested operation."""


class ContractError(RuntimeError):
    """A precondition of the autodiff API was violated."""


class NonFiniteError(FloatingPointError):
    """A tensor holds NaN or Inf."""


def grad_enabled() -> bool:
    return getattr(_state, "enabled", True)


@contextlib.contextmanager
def no_grad():
    """Disable graph recording in the current thread."""
    prev = grad_enabled()
    _state.enabled = False
    try:
        yield
    finally:
        _state.enabled = prev


class Tensor:
    __slots__ = ("data", "requires_grad", "grad", "name", "_parents", "_backward")

    def __init__(self, data, requires_grad: bool = False, name: str | None = None):
        self.data = np.asarray(data, dtype=np.float64)
        self.requires_grad = bool(requires_grad)
        self.grad: np.ndarray | None = None
        self.name = name
        self._parents: tuple[Tensor, ...] = ()
        self._backward: Callable[[np.ndarray], Sequence[np.ndarray | None]] | None = None

    # -- introspection -----------------------------------------------------
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
    def is_leaf(self) -> bool:
        return self._backward is None

    def item(self) -> float:
        return float(self.data)

    def numpy(self) -> np.ndarray:
        return self.data

    def is_finite(self) -> bool:
        return bool(np.isfinite(self.data).all())

    def check_finite(self, what: str | None = None) -> None:
        if not self.is_finite():
            raise NonFiniteError(f"non-finite values in {what or self.name or 'tensor'}")

    def zero_grad(self) -> None:
        self.grad = None

    def detach(self) -> Tensor:
        return Tensor(self.data)

    def __repr__(self) -> str:
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}{flag})"

    # -- operators ---------------------------------------------------------
    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return add(self, neg(other) if isinstance(other, Tensor) else -np.asarray(other))

    def __rsub__(self, other):
        return add(neg(self), other)

    def __neg__(self):
        return neg(self)

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __truediv__(self, other):
        if isinstance(other, Tensor):
            raise ShapeError("division by a tensor is not supported")
        return mul(self, 1.0 / np.asarray(other, dtype=np.float64))

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, index):
        return getitem(self, index)

    def sum(self, axis=None, keepdims: bool = False) -> Tensor:
        return tsum(self, axis, keepdims)

    def mean(self, axis=None, keepdims: bool = False) -> Tensor:
        n = self.size if axis is None else np.prod([self.shape[a] for a in np.atleast_1d(axis)])
        return tsum(self, axis, keepdims) * (1.0 / float(n))

    def reshape(self, *shape) -> Tensor:
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, *axes) -> Tensor:
        if len(axes) == 1 and isinstance(axes[0], (tuple, list)):
            axes = tuple(axes[0])
        return transpose(self, axes or None)

    def exp(self) -> Tensor:
        return texp(self)

    def log(self) -> Tensor:
        return tlog(self)


# ---------------------------------------------------------------------------
# graph plumbing
# ---------------------------------------------------------------------------

def _wrap(data: np.ndarray, parents: tuple[Tensor, ...], rule) -> Tensor:
    out = Tensor(data)
    if grad_enabled() and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = parents
        out._backward = rule
    return out


def _as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


class Tape:
    """Topologically ordered record of the nodes reachable from a root.

    Inputs always precede the nodes that consume them.
    """

    def __init__(self, nodes: list[Tensor]):
        self.nodes = nodes

    def __len__(self) -> int:
        return len(self.nodes)

    @classmethod
    def record(cls, root: Tensor) -> Tape:
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
            for p in node._parents:
                if p.requires_grad and id(p) not in seen:
                    stack.append((p, False))
        return cls(order)

    def backward(self, seed: np.ndarray) -> None:
        root = self.nodes[-1]
        pending: dict[int, np.ndarray] = {id(root): seed}
        for node in reversed(self.nodes):
            g = pending.pop(id(node), None)
            if g is None:
                continue
            if node.is_leaf:
                node.grad = g.copy() if node.grad is None else node.grad + g
                continue
            for parent, pg in zip(node._parents, node._backward(g)):
                if pg is None or not parent.requires_grad:
                    continue
                key = id(parent)
                if key in pending:
                    pending[key] = pending[key] + pg
                else:
                    pending[key] = pg


def backward(loss: Tensor, inputs: Iterable[Tensor] | None = None) -> None:
    """Accumulate d(loss)/d(leaf) into ``.grad`` of every reachable leaf.

    Leaves listed in ``inputs`` that the loss does not depend on receive a
    zero gradient instead of staying ``None``.
    """
    if loss.size != 1:
        raise ContractError(f"backward needs a scalar loss, got shape {loss.shape}")
    if loss.requires_grad:
        Tape.record(loss).backward(np.ones_like(loss.data))
    elif inputs is None:
        raise ContractError("loss does not depend on any tensor that requires grad")
    for leaf in inputs or ():
        if leaf.grad is None:
            leaf.grad = np.zeros_like(leaf.data)


# ---------------------------------------------------------------------------
# elementwise
# ---------------------------------------------------------------------------

def _reduce_to(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    if g.shape == shape:
        return g
    lead = g.ndim - len(shape)
    g = g.sum(axis=tuple(range(lead))) if lead > 0 else g
    keep = tuple(i for i, (a, b) in enumerate(zip(g.shape, shape)) if b == 1 and a != 1)
    if keep:
        g = g.sum(axis=keep, keepdims=True)
    return g


def add(a: Tensor, b) -> Tensor:
    if not isinstance(b, Tensor):
        const = np.asarray(b, dtype=np.float64)
        try:
            data = a.data + const
        except ValueError as exc:
            raise ShapeError(str(exc)) from None
        if data.shape != a.shape:
            raise ShapeError(f"constant of shape {const.shape} would broadcast {a.shape} up")
        return _wrap(data, (a,), lambda g: (g,))
    if a.shape != b.shape:
        if a.shape[a.ndim - b.ndim:] == b.shape:
            pass
        elif b.shape[b.ndim - a.ndim:] == a.shape:
            a, b = b, a
        else:
            raise ShapeError(f"cannot add shapes {a.shape} and {b.shape}")
    sa, sb = a.shape, b.shape
    return _wrap(a.data + b.data, (a, b), lambda g: (_reduce_to(g, sa), _reduce_to(g, sb)))


def neg(a: Tensor) -> Tensor:
    return _wrap(-a.data, (a,), lambda g: (-g,))


def mul(a: Tensor, b) -> Tensor:
    if not isinstance(b, Tensor):
        const = np.asarray(b, dtype=np.float64)
        data = a.data * const
        if data.shape != a.shape:
            raise ShapeError(f"constant of shape {const.shape} would broadcast {a.shape} up")
        return _wrap(data, (a,), lambda g: (g * const,))
    if a.shape != b.shape:
        raise ShapeError(f"elementwise product needs equal shapes, got {a.shape} and {b.shape}")
    ad, bd = a.data, b.data
    return _wrap(ad * bd, (a, b), lambda g: (g * bd, g * ad))


def texp(a: Tensor) -> Tensor:
    out = np.exp(a.data)
    return _wrap(out, (a,), lambda g: (g * out,))


def tlog(a: Tensor) -> Tensor:
    ad = a.data
    return _wrap(np.log(ad), (a,), lambda g: (g / ad,))


def tanh(a: Tensor) -> Tensor:
    out = np.tanh(a.data)
    return _wrap(out, (a,), lambda g: (g * (1.0 - out * out),))


_INV_SQRT_2PI = 0.3989422804014327


def gelu(a: Tensor) -> Tensor:
    """x * Phi(x) with the exact Gaussian CDF."""
    x = a.data
    cdf = ndtr(x)

    def rule(g):
        return (g * (cdf + x * _INV_SQRT_2PI * np.exp(-0.5 * x * x)),)

    return _wrap(x * cdf, (a,), rule)


# ---------------------------------------------------------------------------
# reductions and shape ops
# ---------------------------------------------------------------------------

def tsum(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    shape = a.shape
    out = a.data.sum(axis=axis, keepdims=keepdims)

    def rule(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, shape).copy(),)

    return _wrap(np.asarray(out), (a,), rule)


def reshape(a: Tensor, shape) -> Tensor:
    src = a.shape
    return _wrap(a.data.reshape(shape), (a,), lambda g: (g.reshape(src),))


def transpose(a: Tensor, axes=None) -> Tensor:
    if axes is None:
        axes = tuple(range(a.ndim - 2)) + (a.ndim - 1, a.ndim - 2)
    inv = tuple(np.argsort(axes))
    return _wrap(a.data.transpose(axes), (a,), lambda g: (g.transpose(inv),))


def getitem(a: Tensor, index) -> Tensor:
    """Basic (view) indexing only; advanced indexing goes through :func:`embedding`."""
    parts = index if isinstance(index, tuple) else (index,)
    if any(isinstance(p, (list, np.ndarray, Tensor)) for p in parts):
        raise ShapeError("only basic slicing is differentiable; use embedding() for gathers")
    shape = a.shape
    out = a.data[index]

    def rule(g):
        full = np.zeros(shape)
        full[index] = g
        return (full,)

    return _wrap(np.array(out), (a,), rule)


def embedding(table: Tensor, ids: np.ndarray) -> Tensor:
    """Gather rows of a 2-D ``table``; repeated ids accumulate gradient."""
    ids = np.asarray(ids)
    if table.ndim != 2:
        raise ShapeError("embedding table must be 2-D")
    if ids.size and (ids.min() < 0 or ids.max() >= table.shape[0]):
        raise IndexError(f"id out of range for table with {table.shape[0]} rows")
    rows = table.shape

    def rule(g):
        full = np.zeros(rows)
        np.add.at(full, ids.reshape(-1), g.reshape(-1, rows[1]))
        return (full,)

    return _wrap(table.data[ids], (table,), rule)


# ---------------------------------------------------------------------------
# linear algebra
# ---------------------------------------------------------------------------

def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Matrix product over the last two axes.

    ``b`` may be 2-D while ``a`` carries leading batch axes (a linear layer);
    otherwise leading axes must agree exactly.
    """
    a, b = _as_tensor(a), _as_tensor(b)
    if a.ndim < 2 or b.ndim < 2:
        raise ShapeError(f"matmul needs matrices, got {a.shape} and {b.shape}")
    if a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"inner extents differ: {a.shape} @ {b.shape}")
    if b.ndim != 2 and a.shape[:-2] != b.shape[:-2]:
        raise ShapeError(f"batch extents differ: {a.shape} @ {b.shape}")
    ad, bd = a.data, b.data
    out = ad @ bd

    def rule(g):
        ga = g @ np.swapaxes(bd, -1, -2) if a.requires_grad else None
        gb = None
        if b.requires_grad:
            if bd.ndim == 2:
                gb = ad.reshape(-1, ad.shape[-1]).T @ g.reshape(-1, g.shape[-1])
            else:
                gb = np.swapaxes(ad, -1, -2) @ g
        return ga, gb

    return _wrap(out, (a, b), rule)


def softmax_rows(x: Tensor) -> Tensor:
    """Softmax over the last axis with per-row max subtraction."""
    z = x.data - x.data.max(axis=-1, keepdims=True)
    e = np.exp(z)
    p = e / e.sum(axis=-1, keepdims=True)

    def rule(g):
        return (p * (g - (g * p).sum(axis=-1, keepdims=True)),)

    return _wrap(p, (x,), rule)


def log_softmax_rows(x: Tensor) -> Tensor:
    z = x.data - x.data.max(axis=-1, keepdims=True)
    lse = np.log(np.exp(z).sum(axis=-1, keepdims=True))
    out = z - lse
    p = np.exp(out)

    def rule(g):
        return (g - p * g.sum(axis=-1, keepdims=True),)

    return _wrap(out, (x,), rule)


def layer_norm(x: Tensor, gain: Tensor, bias: Tensor, eps: float = 1e-5) -> Tensor:
    """Normalise over the last axis, then scale by ``gain`` and shift by ``bias``."""
    if eps <= 0:
        raise ValueError("eps must be positive")
    n = x.shape[-1]
    if gain.shape != (n,) or bias.shape != (n,):
        raise ShapeError(f"gain/bias must have shape ({n},)")
    mu = x.data.mean(axis=-1, keepdims=True)
    xc = x.data - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv
    gd = gain.data
    out = xhat * gd + bias.data

    def rule(g):
        gx = None
        if x.requires_grad:
            gh = g * gd
            gx = inv * (gh - gh.mean(axis=-1, keepdims=True)
                        - xhat * (gh * xhat).mean(axis=-1, keepdims=True))
        lead = tuple(range(g.ndim - 1))
        ggain = (g * xhat).sum(axis=lead) if gain.requires_grad else None
        gbias = g.sum(axis=lead) if bias.requires_grad else None
        return gx, ggain, gbias

    return _wrap(out, (x, gain, bias), rule)


# ---------------------------------------------------------------------------
# gradient checking
# ---------------------------------------------------------------------------

def finite_diff_check(f: Callable[[Tensor], Tensor], x, h: float = 1e-5) -> float:
    """Largest relative gap between tape and central-difference gradients.

    ``f`` maps a tensor shaped like ``x`` to a scalar tensor. The relative
    error of each element uses ``max(|analytic|, |numeric|, 1e-8)`` as its
    denominator.
    """
    if not 1e-7 <= h <= 1e-3:
        raise ValueError("step h must lie in [1e-7, 1e-3]")
    base = np.array(x.data if isinstance(x, Tensor) else x, dtype=np.float64)

    leaf = Tensor(base.copy(), requires_grad=True)
    backward(f(leaf), inputs=[leaf])
    analytic = leaf.grad

    numeric = np.empty_like(base)
    probe = base.copy()
    flat, nflat = probe.reshape(-1), numeric.reshape(-1)
    with no_grad():
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + h
            up = f(Tensor(probe.copy())).item()
            flat[i] = orig - h
            down = f(Tensor(probe.copy())).item()
            flat[i] = orig
            nflat[i] = (up - down) / (2.0 * h)

    denom = np.maximum(np.maximum(np.abs(analytic), np.abs(numeric)), 1e-8)
    return float((np.abs(analytic - numeric) / denom).max()) if base.size else 0.0
