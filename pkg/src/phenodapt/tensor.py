"""Reverse-mode autodiff on float64 numpy buffers.

Define-by-run: ops append nodes to the ambient Graph (tape); the tape is
rebuilt every training step. Without an active Graph, ops run forward-only,
which is what evaluation passes use. Everything is float64 so gradient
checks are not confounded by precision.

Implicit broadcasting in binary ops is restricted to leading-dimension
expansion (the smaller shape must be a suffix of the larger); anything else
must go through an explicit `broadcast_to`.
"""

from __future__ import annotations

import numpy as np


class ShapeError(ValueError):
    """Operand shapes do not conform for the named op."""

    def __init__(self, op: str, *shapes):
        self.op = op
        self.shapes = shapes
        super().__init__(f"{op}: incompatible shapes {' and '.join(str(s) for s in shapes)}")


class GraphError(RuntimeError):
    pass


class NonFiniteGradError(RuntimeError):
    """A parameter gradient contains NaN or inf."""

    def __init__(self, name: str):
        self.name = name
        super().__init__(f"non-finite gradient in parameter {name!r}")


class Tensor:
    """Dense n-d float64 array participating in the differentiation graph.

    `grad` is allocated (zeros) iff requires_grad; backward() accumulates
    into it, so a parameter the loss never touches keeps an exactly-zero
    gradient.
    """

    __slots__ = ("data", "grad", "requires_grad", "name", "_node", "_graph")

    def __init__(self, data, requires_grad: bool = False, name: str | None = None):
        arr = np.asarray(data, dtype=np.float64)
        if any(d < 1 for d in arr.shape):
            raise ShapeError("tensor", arr.shape)
        self.data = arr
        self.requires_grad = requires_grad
        self.grad = np.zeros_like(arr) if requires_grad else None
        self.name = name
        self._node = -1
        self._graph = None

    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    def item(self) -> float:
        return float(self.data)

    def zero_grad(self):
        if self.grad is not None:
            self.grad[...] = 0.0

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def backward(self):
        backward(self)

    def __repr__(self):
        tag = f" name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}{tag})"

    # operator sugar; `other` may be a Tensor or a plain scalar/array constant
    def __add__(self, other):
        return add(self, _wrap(other))

    def __radd__(self, other):
        return add(_wrap(other), self)

    def __sub__(self, other):
        return sub(self, _wrap(other))

    def __rsub__(self, other):
        return sub(_wrap(other), self)

    def __mul__(self, other):
        return mul(self, _wrap(other))

    def __rmul__(self, other):
        return mul(_wrap(other), self)

    def __truediv__(self, other):
        return div(self, _wrap(other))

    def __rtruediv__(self, other):
        return div(_wrap(other), self)

    def __matmul__(self, other):
        return matmul(self, _wrap(other))

    def __neg__(self):
        return neg(self)

    def sum(self, axis=None, keepdims=False):
        return tsum(self, axis, keepdims)

    def mean(self, axis=None, keepdims=False):
        return tmean(self, axis, keepdims)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, axes=None):
        return transpose(self, axes)

    def swapaxes(self, a, b):
        return swapaxes(self, a, b)

    def relu(self):
        return relu(self)

    def exp(self):
        return exp(self)

    def log(self):
        return log(self)

    def sqrt(self):
        return sqrt(self)


def _wrap(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


class _Node:
    __slots__ = ("op", "parents", "backward", "leaf")

    def __init__(self, op, parents, backward, leaf=None):
        self.op = op
        self.parents = parents
        self.backward = backward
        self.leaf = leaf


_ACTIVE: "Graph | None" = None


class Graph:
    """Append-only tape; node k's parents all have index < k.

    Use as a context manager around one forward/backward pass:

        with Graph():
            loss = ...
            loss.backward()
    """

    def __init__(self):
        self.nodes: list[_Node] = []
        self._leaf_ids: dict[int, int] = {}
        self._prev = None

    def __enter__(self):
        global _ACTIVE
        self._prev = _ACTIVE
        _ACTIVE = self
        return self

    def __exit__(self, *exc):
        global _ACTIVE
        _ACTIVE = self._prev
        return False

    def _node_of(self, t: Tensor) -> int:
        if t._graph is self:
            return t._node
        if t.requires_grad:
            nid = self._leaf_ids.get(id(t))
            if nid is None:
                nid = len(self.nodes)
                self.nodes.append(_Node("leaf", (), None, t))
                self._leaf_ids[id(t)] = nid
            return nid
        return -1  # constant: no gradient flows here


def active_graph() -> Graph | None:
    return _ACTIVE


def _tracked(t: Tensor) -> bool:
    return t.requires_grad or t._graph is _ACTIVE and t._graph is not None


def _record(op: str, out_data: np.ndarray, parents, bwd) -> Tensor:
    out = Tensor(out_data)
    g = _ACTIVE
    if g is None or not any(_tracked(p) for p in parents):
        return out
    pids = tuple(g._node_of(p) for p in parents)
    out._node = len(g.nodes)
    out._graph = g
    g.nodes.append(_Node(op, pids, bwd))
    return out


def backward(loss: Tensor):
    """Populate .grad of every reachable parameter with d(loss)/d(param)."""
    if loss.data.shape != ():
        raise ShapeError("backward(loss must be scalar)", loss.data.shape)
    g = loss._graph
    if g is None:
        raise GraphError("backward: loss was not recorded on an active Graph")
    grads: list[np.ndarray | None] = [None] * len(g.nodes)
    grads[loss._node] = np.ones(())
    for idx in range(loss._node, -1, -1):
        gout = grads[idx]
        if gout is None:
            continue
        node = g.nodes[idx]
        if node.op == "leaf":
            node.leaf.grad += gout
        else:
            for pid, contrib in zip(node.parents, node.backward(gout)):
                if pid < 0 or contrib is None:
                    continue
                if grads[pid] is None:
                    grads[pid] = np.array(contrib) if np.isscalar(contrib) else contrib.copy() if contrib.base is not None else contrib
                else:
                    grads[pid] = grads[pid] + contrib
        grads[idx] = None


# ---------------------------------------------------------------------------
# elementwise binary ops (suffix broadcasting only)

def _binary(a, b):
    return _wrap(a), _wrap(b)


def _check_suffix(op, a, b):
    sa, sb = a.data.shape, b.data.shape
    if sa == sb:
        return
    if len(sa) >= len(sb) and (len(sb) == 0 or sa[len(sa) - len(sb):] == sb):
        return
    if len(sb) > len(sa) and (len(sa) == 0 or sb[len(sb) - len(sa):] == sa):
        return
    raise ShapeError(op, sa, sb)


def _unbroadcast(g: np.ndarray, shape: tuple) -> np.ndarray:
    if g.shape == shape:
        return g
    return g.sum(axis=tuple(range(g.ndim - len(shape)))).reshape(shape)


def add(a: Tensor, b: Tensor) -> Tensor:
    a, b = _binary(a, b)
    _check_suffix("add", a, b)
    def bwd(g):
        return _unbroadcast(g, a.data.shape), _unbroadcast(g, b.data.shape)
    return _record("add", a.data + b.data, (a, b), bwd)


def sub(a: Tensor, b: Tensor) -> Tensor:
    a, b = _binary(a, b)
    _check_suffix("sub", a, b)
    def bwd(g):
        return _unbroadcast(g, a.data.shape), _unbroadcast(-g, b.data.shape)
    return _record("sub", a.data - b.data, (a, b), bwd)


def mul(a: Tensor, b: Tensor) -> Tensor:
    a, b = _binary(a, b)
    _check_suffix("mul", a, b)
    da, db = a.data, b.data
    def bwd(g):
        return _unbroadcast(g * db, da.shape), _unbroadcast(g * da, db.shape)
    return _record("mul", da * db, (a, b), bwd)


def div(a: Tensor, b: Tensor) -> Tensor:
    a, b = _binary(a, b)
    _check_suffix("div", a, b)
    da, db = a.data, b.data
    def bwd(g):
        return _unbroadcast(g / db, da.shape), _unbroadcast(-g * da / (db * db), db.shape)
    return _record("div", da / db, (a, b), bwd)


def neg(a: Tensor) -> Tensor:
    return _record("neg", -a.data, (a,), lambda g: (-g,))


# ---------------------------------------------------------------------------
# unary math

def exp(a: Tensor) -> Tensor:
    out = np.exp(a.data)
    return _record("exp", out, (a,), lambda g: (g * out,))


def log(a: Tensor) -> Tensor:
    da = a.data
    return _record("log", np.log(da), (a,), lambda g: (g / da,))


def sqrt(a: Tensor) -> Tensor:
    out = np.sqrt(a.data)
    return _record("sqrt", out, (a,), lambda g: (g * (0.5 / out),))


def power(a: Tensor, p: float) -> Tensor:
    da = a.data
    def bwd(g):
        return (g * p * da ** (p - 1.0),)
    return _record("power", da ** p, (a,), bwd)


def relu(a: Tensor) -> Tensor:
    da = a.data
    mask = da > 0.0
    return _record("relu", np.where(mask, da, 0.0), (a,), lambda g: (g * mask,))


# ---------------------------------------------------------------------------
# matmul: 2-d, batched n-d with equal batch dims, or one unbatched side

def matmul(a: Tensor, b: Tensor) -> Tensor:
    a, b = _binary(a, b)
    da, db = a.data, b.data
    if da.ndim < 2 or db.ndim < 2:
        raise ShapeError("matmul", da.shape, db.shape)
    if da.shape[-1] != db.shape[-2]:
        raise ShapeError("matmul", da.shape, db.shape)
    ba, bb = da.shape[:-2], db.shape[:-2]
    if ba != bb and ba != () and bb != ():
        raise ShapeError("matmul", da.shape, db.shape)

    def bwd(g):
        ga = g @ db.swapaxes(-1, -2)
        gb = da.swapaxes(-1, -2) @ g
        if ga.ndim > da.ndim:
            ga = ga.sum(axis=tuple(range(ga.ndim - da.ndim)))
        if gb.ndim > db.ndim:
            gb = gb.sum(axis=tuple(range(gb.ndim - db.ndim)))
        return ga, gb

    return _record("matmul", da @ db, (a, b), bwd)


# ---------------------------------------------------------------------------
# reductions

def _axis_tuple(axis, ndim):
    if axis is None:
        return tuple(range(ndim))
    if isinstance(axis, int):
        return (axis % ndim,)
    return tuple(ax % ndim for ax in axis)


def tsum(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    axes = _axis_tuple(axis, a.data.ndim)
    shape = a.data.shape

    def bwd(g):
        gg = g
        if not keepdims:
            for ax in sorted(axes):
                gg = np.expand_dims(gg, ax)
        return (np.broadcast_to(gg, shape),)

    return _record("sum", a.data.sum(axis=axes, keepdims=keepdims), (a,), bwd)


def tmean(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    axes = _axis_tuple(axis, a.data.ndim)
    shape = a.data.shape
    count = 1
    for ax in axes:
        count *= shape[ax]

    def bwd(g):
        gg = g
        if not keepdims:
            for ax in sorted(axes):
                gg = np.expand_dims(gg, ax)
        return (np.broadcast_to(gg, shape) / count,)

    return _record("mean", a.data.mean(axis=axes, keepdims=keepdims), (a,), bwd)


def softmax(a: Tensor, axis: int = -1) -> Tensor:
    da = a.data
    shifted = da - da.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    out = e / e.sum(axis=axis, keepdims=True)

    def bwd(g):
        dot = (g * out).sum(axis=axis, keepdims=True)
        return ((g - dot) * out,)

    return _record("softmax", out, (a,), bwd)


# ---------------------------------------------------------------------------
# shape manipulation

def reshape(a: Tensor, shape) -> Tensor:
    orig = a.data.shape
    try:
        out = a.data.reshape(shape)
    except ValueError:
        raise ShapeError("reshape", orig, tuple(shape))
    return _record("reshape", out, (a,), lambda g: (g.reshape(orig),))


def transpose(a: Tensor, axes=None) -> Tensor:
    if axes is None:
        axes = tuple(reversed(range(a.data.ndim)))
    axes = tuple(axes)
    inv = tuple(np.argsort(axes))
    return _record("transpose", a.data.transpose(axes), (a,), lambda g: (g.transpose(inv),))


def swapaxes(a: Tensor, ax1: int, ax2: int) -> Tensor:
    return _record("swapaxes", a.data.swapaxes(ax1, ax2), (a,),
                   lambda g: (g.swapaxes(ax1, ax2),))


def concat(tensors, axis: int = 0) -> Tensor:
    tensors = list(tensors)
    datas = [t.data for t in tensors]
    nd = datas[0].ndim
    for d in datas[1:]:
        if d.ndim != nd or d.shape[:axis % nd] != datas[0].shape[:axis % nd]:
            pass  # np.concatenate validates fully below
    try:
        out = np.concatenate(datas, axis=axis)
    except ValueError:
        raise ShapeError("concat", *[d.shape for d in datas])
    sizes = [d.shape[axis] for d in datas]
    offsets = np.cumsum([0] + sizes)

    def bwd(g):
        sl = [slice(None)] * g.ndim
        outs = []
        for i in range(len(datas)):
            sl[axis] = slice(offsets[i], offsets[i + 1])
            outs.append(g[tuple(sl)])
        return tuple(outs)

    return _record("concat", out, tuple(tensors), bwd)


def narrow(a: Tensor, axis: int, start: int, stop: int) -> Tensor:
    """Slice [start:stop) along one axis."""
    nd = a.data.ndim
    axis = axis % nd
    if not (0 <= start < stop <= a.data.shape[axis]):
        raise ShapeError(f"narrow[{start}:{stop}]", a.data.shape)
    sl = [slice(None)] * nd
    sl[axis] = slice(start, stop)
    sl = tuple(sl)
    shape = a.data.shape

    def bwd(g):
        full = np.zeros(shape)
        full[sl] = g
        return (full,)

    return _record("narrow", a.data[sl], (a,), bwd)


def broadcast_to(a: Tensor, shape) -> Tensor:
    shape = tuple(shape)
    da = a.data
    try:
        out = np.broadcast_to(da, shape)
    except ValueError:
        raise ShapeError("broadcast", da.shape, shape)
    lead = len(shape) - da.ndim
    expanded = tuple(i + lead for i in range(da.ndim) if da.shape[i] == 1 and shape[i + lead] != 1)

    def bwd(g):
        gg = g.sum(axis=tuple(range(lead))) if lead else g
        if expanded:
            gg = gg.sum(axis=tuple(i - lead for i in expanded), keepdims=True)
        return (gg.reshape(da.shape),)

    return _record("broadcast", np.array(out), (a,), bwd)


# ---------------------------------------------------------------------------
# special ops

def grad_reverse(x: Tensor, lam: float) -> Tensor:
    """Identity forward; backward multiplies the incoming gradient by -lam."""
    if lam < 0:
        raise ValueError(f"grad_reverse: lambda must be >= 0, got {lam}")
    return _record("grad_reverse", x.data.copy(), (x,), lambda g: (g * (-lam),))


def cosine_similarity(a: Tensor, b: Tensor) -> Tensor:
    """Cosine similarity of two 1-d vectors; differentiable in both.

    Zero-norm inputs are an error so degenerate embeddings surface loudly;
    the rank loss applies its own epsilon guard instead.
    """
    if a.data.ndim != 1 or b.data.ndim != 1 or a.data.shape != b.data.shape:
        raise ShapeError("cosine_similarity", a.data.shape, b.data.shape)
    if not a.data.any() or not b.data.any():
        raise ValueError("cosine_similarity: zero-norm input vector")
    dot = tsum(mul(a, b))
    na = sqrt(tsum(mul(a, a)))
    nb = sqrt(tsum(mul(b, b)))
    return div(dot, mul(na, nb))


# ---------------------------------------------------------------------------
# optimizer

class AdamState:
    """Per-parameter first/second moment buffers plus the shared step count."""

    def __init__(self, beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8):
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self.step_count = 0
        self.m: dict[int, np.ndarray] = {}
        self.v: dict[int, np.ndarray] = {}


class Adam:
    """Adam with bias correction over a fixed parameter collection."""

    def __init__(self, params, lr: float = 1e-4,
                 beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8):
        if lr <= 0:
            raise ValueError(f"Adam: lr must be > 0, got {lr}")
        if isinstance(params, dict):
            self.params = list(params.items())
        else:
            self.params = [(p.name or f"param{i}", p) for i, p in enumerate(params)]
        self.lr = lr
        self.state = AdamState(beta1, beta2, eps)
        for key, p in self.params:
            self.state.m[id(p)] = np.zeros_like(p.data)
            self.state.v[id(p)] = np.zeros_like(p.data)

    def zero_grad(self):
        for _, p in self.params:
            p.zero_grad()

    def step(self):
        s = self.state
        s.step_count += 1
        b1c = 1.0 - s.beta1 ** s.step_count
        b2c = 1.0 - s.beta2 ** s.step_count
        for name, p in self.params:
            g = p.grad
            if not np.all(np.isfinite(g)):
                raise NonFiniteGradError(name)
            m = s.m[id(p)]
            v = s.v[id(p)]
            m *= s.beta1
            m += (1.0 - s.beta1) * g
            v *= s.beta2
            v += (1.0 - s.beta2) * (g * g)
            p.data -= self.lr * (m / b1c) / (np.sqrt(v / b2c) + s.eps)
