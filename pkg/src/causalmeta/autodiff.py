"""Dense float64 tensors with reverse-mode differentiation.

Backward rules are written with the same tensor operations as the forward
pass, so a gradient computed with ``create_graph=True`` is itself recorded and
can be differentiated again.  That is all the bi-level (MAML-style) code needs
for exact second-order meta-gradients.

Binary elementwise operations accept equal shapes or a size-1 operand.  Any
other broadcast has to be spelled out with :func:`broadcast_to`.
"""

from __future__ import annotations

import builtins
import contextlib
import itertools
import math
from typing import Callable, Mapping

import numpy as np

__all__ = [
    "Tensor", "ParamSet", "ShapeError", "DomainError", "NonFiniteError",
    "tensor", "constant", "no_grad", "is_grad_enabled",
    "matmul", "elementwise", "add", "sub", "mul", "div", "neg", "exp", "log",
    "tanh", "sigmoid", "softplus", "relu", "transpose", "reshape",
    "broadcast_to", "sum_to", "reduce", "sum", "mean", "max",
    "nll_loss", "mse_loss", "grad", "sgd_step", "finite_diff_grad",
    "topological_order",
]

_ids = itertools.count()
_grad_enabled = True


class ShapeError(ValueError):
    pass


class DomainError(ValueError):
    pass


class NonFiniteError(FloatingPointError):
    pass


@contextlib.contextmanager
def no_grad():
    """Disable graph recording inside the block."""
    global _grad_enabled
    prev = _grad_enabled
    _grad_enabled = False
    try:
        yield
    finally:
        _grad_enabled = prev


def is_grad_enabled() -> bool:
    return _grad_enabled


class Tensor:
    """A float64 array, optionally tracked on the differentiation graph.

    ``_parents`` and ``_vjp`` are set only for tracked op results.  ``_id``
    increases monotonically, so a parent always has a smaller id than its
    children and sorting by id gives a valid topological order.
    """

    __slots__ = ("data", "requires_grad", "_parents", "_vjp", "_id", "name")
    __array_priority__ = 100

    def __init__(self, data, requires_grad: bool = False, name: str | None = None):
        arr = np.asarray(data, dtype=np.float64)
        if arr.ndim and 0 in arr.shape:
            raise ShapeError(f"tensor extents must be positive, got {arr.shape}")
        self.data = arr
        self.requires_grad = requires_grad
        self._parents: tuple[Tensor, ...] = ()
        self._vjp = None
        self._id = next(_ids)
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

    def item(self) -> float:
        if self.data.size != 1:
            raise ShapeError(f"item() needs a single-element tensor, got shape {self.shape}")
        return float(self.data.reshape(-1)[0])

    def numpy(self) -> np.ndarray:
        return self.data.copy()

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def __repr__(self) -> str:
        flag = ", tracked" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}{flag})"

    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(other, self)

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    def __rmul__(self, other):
        return mul(other, self)

    def __truediv__(self, other):
        return div(self, other)

    def __rtruediv__(self, other):
        return div(other, self)

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)

    @property
    def T(self) -> "Tensor":
        return transpose(self)


def tensor(data, requires_grad: bool = False, name: str | None = None) -> Tensor:
    return Tensor(data, requires_grad=requires_grad, name=name)


def constant(data) -> Tensor:
    return data if isinstance(data, Tensor) else Tensor(data)


def _result(data: np.ndarray, parents: tuple[Tensor, ...], vjp) -> Tensor:
    out = Tensor.__new__(Tensor)
    out.data = data
    out.name = None
    out._id = next(_ids)
    if _grad_enabled and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = parents
        out._vjp = vjp
    else:
        out.requires_grad = False
        out._parents = ()
        out._vjp = None
    return out


def _check_finite(data: np.ndarray, op: str) -> np.ndarray:
    if not np.isfinite(data).all():
        raise NonFiniteError(f"{op} produced non-finite values")
    return data


# ---------------------------------------------------------------- shape ops

def reshape(a: Tensor, shape) -> Tensor:
    a = constant(a)
    shape = tuple(shape)
    src = a.shape
    try:
        data = a.data.reshape(shape)
    except ValueError as exc:
        raise ShapeError(f"cannot reshape {src} to {shape}") from exc
    return _result(data, (a,), lambda g: (reshape(g, src),))


def transpose(a: Tensor) -> Tensor:
    """Swap the last two axes."""
    a = constant(a)
    if a.ndim < 2:
        raise ShapeError(f"transpose needs at least 2 dims, got {a.shape}")
    return _result(np.swapaxes(a.data, -1, -2), (a,), lambda g: (transpose(g),))


def broadcast_to(a: Tensor, shape) -> Tensor:
    """Explicit numpy-style broadcast; the adjoint is :func:`sum_to`."""
    a = constant(a)
    shape = tuple(shape)
    if a.shape == shape:
        return a
    src = a.shape
    try:
        data = np.broadcast_to(a.data, shape)
    except ValueError as exc:
        raise ShapeError(f"cannot broadcast {src} to {shape}") from exc
    return _result(data, (a,), lambda g: (sum_to(g, src),))


def sum_to(a: Tensor, shape) -> Tensor:
    """Sum ``a`` down to ``shape`` (inverse of a numpy broadcast)."""
    a = constant(a)
    shape = tuple(shape)
    if a.shape == shape:
        return a
    src = a.shape
    lead = a.ndim - len(shape)
    if lead < 0:
        raise ShapeError(f"cannot sum {src} to larger shape {shape}")
    axes = tuple(range(lead)) + tuple(
        lead + i for i, n in enumerate(shape) if n == 1 and src[lead + i] != 1
    )
    data = a.data.sum(axis=axes, keepdims=True)
    if lead:
        data = data.reshape(data.shape[lead:])
    if data.shape != shape:
        raise ShapeError(f"cannot sum {src} to {shape}")
    return _result(data, (a,), lambda g: (broadcast_to(g, src),))


# ------------------------------------------------------------- elementwise

def _pair(a, b, op: str) -> tuple[Tensor, Tensor, tuple[int, ...]]:
    a = constant(a)
    b = constant(b)
    sa, sb = a.shape, b.shape
    if sa == sb:
        return a, b, sa
    if b.size == 1 and len(sb) <= len(sa):
        return a, b, sa
    if a.size == 1 and len(sa) <= len(sb):
        return a, b, sb
    raise ShapeError(f"{op}: incompatible shapes {sa} and {sb}")


def add(a, b) -> Tensor:
    a, b, shape = _pair(a, b, "add")
    sa, sb = a.shape, b.shape
    return _result(a.data + b.data, (a, b), lambda g: (sum_to(g, sa), sum_to(g, sb)))


def sub(a, b) -> Tensor:
    a, b, shape = _pair(a, b, "sub")
    sa, sb = a.shape, b.shape
    return _result(a.data - b.data, (a, b), lambda g: (sum_to(g, sa), neg(sum_to(g, sb))))


def mul(a, b) -> Tensor:
    a, b, shape = _pair(a, b, "mul")
    sa, sb = a.shape, b.shape
    return _result(a.data * b.data, (a, b),
                   lambda g: (sum_to(mul(g, b), sa), sum_to(mul(g, a), sb)))


def div(a, b) -> Tensor:
    a, b, shape = _pair(a, b, "div")
    if (b.data == 0).any():
        raise DomainError("div: division by zero")
    sa, sb = a.shape, b.shape
    out = _check_finite(a.data / b.data, "div")

    def vjp(g):
        ga = div(g, b)
        return sum_to(ga, sa), sum_to(neg(mul(ga, div(a, b))), sb)

    return _result(out, (a, b), vjp)


def neg(a) -> Tensor:
    a = constant(a)
    return _result(-a.data, (a,), lambda g: (neg(g),))


def exp(a) -> Tensor:
    a = constant(a)
    with np.errstate(over="ignore"):
        data = _check_finite(np.exp(a.data), "exp")
    holder: list[Tensor] = []
    out = _result(data, (a,), lambda g: (mul(g, holder[0]),))
    holder.append(out)
    return out


def log(a) -> Tensor:
    a = constant(a)
    if (a.data <= 0).any():
        raise DomainError("log of non-positive value")
    return _result(np.log(a.data), (a,), lambda g: (div(g, a),))


def tanh(a) -> Tensor:
    a = constant(a)
    holder: list[Tensor] = []

    def vjp(g):
        y = holder[0]
        return (mul(g, sub(1.0, mul(y, y))),)

    out = _result(np.tanh(a.data), (a,), vjp)
    holder.append(out)
    return out


def sigmoid(a) -> Tensor:
    a = constant(a)
    data = 0.5 * (1.0 + np.tanh(0.5 * a.data))
    holder: list[Tensor] = []

    def vjp(g):
        y = holder[0]
        return (mul(g, mul(y, sub(1.0, y))),)

    out = _result(data, (a,), vjp)
    holder.append(out)
    return out


def softplus(a) -> Tensor:
    a = constant(a)
    return _result(np.logaddexp(0.0, a.data), (a,), lambda g: (mul(g, sigmoid(a)),))


def relu(a) -> Tensor:
    a = constant(a)
    mask = (a.data > 0).astype(np.float64)
    return _result(a.data * mask, (a,), lambda g: (mul(g, Tensor(mask)),))


_UNARY = {"neg": neg, "exp": exp, "log": log, "tanh": tanh, "softplus": softplus,
          "relu": relu, "sigmoid": sigmoid}
_BINARY = {"add": add, "sub": sub, "mul": mul, "div": div}


def elementwise(op: str, a, b=None) -> Tensor:
    """Apply the elementwise operation named ``op``."""
    if op in _BINARY:
        if b is None:
            raise TypeError(f"{op} needs two operands")
        return _BINARY[op](a, b)
    if op in _UNARY:
        if b is not None:
            raise TypeError(f"{op} takes one operand")
        return _UNARY[op](a)
    raise ValueError(f"unknown elementwise op {op!r}")


# ----------------------------------------------------------------- matmul

def matmul(a, b) -> Tensor:
    """Matrix product; leading (batch) axes follow numpy matmul rules."""
    a = constant(a)
    b = constant(b)
    if a.ndim < 2 or b.ndim < 2 or a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"matmul: incompatible shapes {a.shape} and {b.shape}")
    try:
        data = _check_finite(np.matmul(a.data, b.data), "matmul")
    except ValueError as exc:
        raise ShapeError(f"matmul: incompatible shapes {a.shape} and {b.shape}") from exc
    sa, sb = a.shape, b.shape

    def vjp(g):
        return (sum_to(matmul(g, transpose(b)), sa),
                sum_to(matmul(transpose(a), g), sb))

    return _result(data, (a, b), vjp)


# -------------------------------------------------------------- reductions

def _norm_axes(axes, ndim: int) -> tuple[int, ...]:
    if axes is None:
        return tuple(range(ndim))
    if isinstance(axes, int):
        axes = (axes,)
    out = []
    for ax in axes:
        if not -ndim <= ax < ndim:
            raise ValueError(f"invalid axis {ax} for tensor with {ndim} dims")
        out.append(ax % ndim)
    if len(set(out)) != len(out):
        raise ValueError(f"repeated axis in {axes}")
    return tuple(sorted(out))


def _kept_shape(shape, axes) -> tuple[int, ...]:
    return tuple(1 if i in axes else n for i, n in enumerate(shape))


def sum(a, axes=None, keepdims: bool = False) -> Tensor:  # noqa: A001
    a = constant(a)
    ax = _norm_axes(axes, a.ndim)
    src = a.shape
    kept = _kept_shape(src, ax)
    data = _check_finite(np.asarray(a.data.sum(axis=ax, keepdims=keepdims)), "sum")

    def vjp(g):
        return (broadcast_to(reshape(g, kept), src),)

    return _result(data, (a,), vjp)


def mean(a, axes=None, keepdims: bool = False) -> Tensor:
    a = constant(a)
    ax = _norm_axes(axes, a.ndim)
    count = math.prod(a.shape[i] for i in ax)
    return mul(sum(a, ax, keepdims), 1.0 / count)


def max(a, axes=None, keepdims: bool = False) -> Tensor:  # noqa: A001
    """Maximum; ties share the incoming gradient equally."""
    a = constant(a)
    ax = _norm_axes(axes, a.ndim)
    src = a.shape
    kept = _kept_shape(src, ax)
    top = a.data.max(axis=ax, keepdims=True)
    mask = (a.data == top).astype(np.float64)
    mask /= mask.sum(axis=ax, keepdims=True)
    data = top if keepdims else top.reshape(tuple(n for i, n in enumerate(src) if i not in ax))

    def vjp(g):
        return (mul(broadcast_to(reshape(g, kept), src), Tensor(mask)),)

    return _result(data, (a,), vjp)


_REDUCE = {"sum": sum, "mean": mean, "max": max}


def reduce(op: str, a, axes=None, keepdims: bool = False) -> Tensor:
    if op not in _REDUCE:
        raise ValueError(f"unknown reduction {op!r}")
    return _REDUCE[op](a, axes, keepdims)


# ------------------------------------------------------------------ losses

def nll_loss(logits, labels) -> Tensor:
    """Mean negative log-softmax probability of the true class.

    ``logits`` has shape ``[..., N, C]`` and ``labels`` the matching
    ``[..., N]`` integer class indices.  The mean runs over every row, which
    for equal-sized tasks stacked on a leading axis equals the mean of the
    per-task means.
    """
    logits = constant(logits)
    labels = np.asarray(labels)
    if logits.ndim < 2:
        raise ShapeError(f"nll_loss: logits must be [..., N, C], got {logits.shape}")
    n_cls = logits.shape[-1]
    if labels.shape != logits.shape[:-1]:
        raise ShapeError(f"nll_loss: labels shape {labels.shape} does not match {logits.shape}")
    if labels.size and (labels.min() < 0 or labels.max() >= n_cls
                        or not np.all(labels == np.round(labels))):
        raise ValueError(f"nll_loss: labels must be integers in [0, {n_cls})")
    onehot = np.zeros(logits.shape)
    np.put_along_axis(onehot, labels.astype(np.int64)[..., None], 1.0, axis=-1)
    shift = np.broadcast_to(logits.data.max(axis=-1, keepdims=True), logits.shape)
    shifted = sub(logits, Tensor(shift))
    lse = log(sum(exp(shifted), -1))
    picked = sum(mul(shifted, Tensor(onehot)), -1)
    return mean(sub(lse, picked))


def mse_loss(pred, target) -> Tensor:
    pred = constant(pred)
    target = constant(target)
    if pred.shape != target.shape:
        raise ShapeError(f"mse_loss: shapes {pred.shape} and {target.shape} differ")
    diff = sub(pred, target)
    return mean(mul(diff, diff))


# --------------------------------------------------------------- gradients

class ParamSet(dict):
    """Ordered ``name -> Tensor`` mapping holding one group of parameters."""

    def tracked(self) -> "ParamSet":
        """Fresh leaf copies that require grad."""
        return ParamSet((k, Tensor(v.data, requires_grad=True, name=k)) for k, v in self.items())

    def detached(self) -> "ParamSet":
        return ParamSet((k, Tensor(v.data, name=k)) for k, v in self.items())

    def arrays(self) -> dict[str, np.ndarray]:
        return {k: v.data for k, v in self.items()}

    def num_params(self) -> int:
        return builtins.sum(v.size for v in self.values())

    def prefixed(self, prefix: str) -> "ParamSet":
        return ParamSet((prefix + k, v) for k, v in self.items())


def topological_order(root: Tensor) -> list[Tensor]:
    """Tracked nodes reachable from ``root``, parents before children."""
    seen: set[int] = set()
    nodes: list[Tensor] = []
    stack = [root]
    while stack:
        node = stack.pop()
        if node._id in seen or not node.requires_grad:
            continue
        seen.add(node._id)
        nodes.append(node)
        stack.extend(node._parents)
    nodes.sort(key=lambda t: t._id)
    return nodes


_last_sweep: dict[str, int] = {"nodes": 0, "visits": 0, "distinct": 0}


def last_sweep_stats() -> dict[str, int]:
    """Counts from the most recent :func:`grad` call.

    ``nodes`` is the number of graph nodes on a path from a target to the
    loss, ``visits`` the number of backward-function calls made and
    ``distinct`` the number of distinct nodes among them.
    """
    return dict(_last_sweep)


def grad(loss: Tensor, params, create_graph: bool = False,
         allow_unused: bool = False):
    """Gradient of a scalar ``loss`` with respect to ``params``.

    ``params`` may be a mapping of names to tensors (a dict of gradients is
    returned) or a sequence of tensors (a list is returned).  Targets need
    not be leaves.  With ``create_graph`` the returned gradients are tracked,
    so they can be differentiated again.
    """
    if loss.size != 1:
        raise ShapeError(f"grad needs a scalar loss, got shape {loss.shape}")
    named = isinstance(params, Mapping)
    items = list(params.items()) if named else [(str(i), p) for i, p in enumerate(params)]
    order = topological_order(loss) if loss.requires_grad else []
    target_ids = {p._id for _, p in items}
    # keep only nodes that lie on a path from some target to the loss
    relevant: set[int] = set()
    for node in order:
        if node._id in target_ids or any(p._id in relevant for p in node._parents):
            relevant.add(node._id)
    reached = {k for k, p in items if p._id in relevant}
    unreached = [k for k, _ in items if k not in reached]
    if unreached and not allow_unused:
        raise ValueError(f"loss does not depend on parameter(s): {', '.join(unreached)}")

    grads: dict[int, Tensor] = {}
    visited: list[int] = []
    ctx = contextlib.nullcontext() if create_graph else no_grad()
    with ctx:
        grads[loss._id] = Tensor(np.ones(loss.shape))
        for node in reversed(order):
            if node._id not in relevant or node._vjp is None:
                continue
            g = grads.get(node._id)
            if g is None:
                continue
            visited.append(node._id)
            for parent, pg in zip(node._parents, node._vjp(g)):
                if pg is None or parent._id not in relevant:
                    continue
                prev = grads.get(parent._id)
                grads[parent._id] = pg if prev is None else add(prev, pg)

    interior = builtins.sum(1 for n in order if n._id in relevant and n._vjp is not None)
    _last_sweep.update(nodes=interior, visits=len(visited), distinct=len(set(visited)))
    out = []
    for k, p in items:
        g = grads.get(p._id)
        if g is None:
            g = Tensor(np.zeros(p.shape))
        elif not create_graph and g.requires_grad:
            g = Tensor(g.data)
        out.append((k, g))
    return dict(out) if named else [g for _, g in out]


def sgd_step(params: Mapping[str, Tensor], grads: Mapping[str, Tensor], lr: float,
             create_graph: bool = False) -> ParamSet:
    """Functional update ``p - lr * grad``.

    With ``create_graph`` the new values stay differentiable with respect to
    the old ones; otherwise fresh tracked leaves are returned.
    """
    if lr < 0:
        raise ValueError(f"learning rate must be non-negative, got {lr}")
    missing = [k for k in params if k not in grads]
    if missing:
        raise KeyError(f"missing gradient for: {', '.join(missing)}")
    if create_graph:
        return ParamSet((k, sub(p, mul(grads[k], lr))) for k, p in params.items())
    return ParamSet(
        (k, Tensor(p.data - lr * grads[k].data, requires_grad=True, name=k))
        for k, p in params.items()
    )


def finite_diff_grad(fn: Callable[[ParamSet], Tensor | float], params: Mapping[str, Tensor],
                     h: float = 1e-5) -> dict[str, np.ndarray]:
    """Central-difference gradient estimate, one coordinate at a time."""
    if h <= 0:
        raise ValueError("step h must be positive")
    base = {k: np.array(v.data, dtype=np.float64) for k, v in params.items()}

    def evaluate(arrays) -> float:
        # inputs are untracked, so nothing is recorded unless fn asks for it
        val = fn(ParamSet((k, Tensor(a)) for k, a in arrays.items()))
        val = float(val.item() if isinstance(val, Tensor) else val)
        if not math.isfinite(val):
            raise NonFiniteError("function value is not finite")
        return val

    out: dict[str, np.ndarray] = {}
    for name, arr in base.items():
        g = np.zeros_like(arr)
        flat = g.reshape(-1)
        for i in range(arr.size):
            plus = dict(base)
            minus = dict(base)
            p = arr.copy()
            p.reshape(-1)[i] += h
            m = arr.copy()
            m.reshape(-1)[i] -= h
            plus[name] = p
            minus[name] = m
            flat[i] = (evaluate(plus) - evaluate(minus)) / (2 * h)
        out[name] = g
    return out
