"""Minimal reverse-mode differentiation over numpy arrays, plus ADAM.

Every differentiable value is a :class:`Node` owned by a :class:`Tape`.
Operations append nodes to the tape in execution order; :meth:`Tape.backward`
walks that record once in reverse.  The primitive set is deliberately small:
it covers the encoder, hypernetwork, dynamic decoder and both losses and
nothing else.

Arrays may carry leading batch dimensions.  Matrix operands follow the
``(out, in)`` convention, so ``affine(W, b, x)`` evaluates ``x @ W.T + b``
for row-stacked inputs.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import ContractError, EmptyCloudError, ShapeError

__all__ = [
    "Node",
    "Tape",
    "affine",
    "scaled_affine",
    "relu",
    "maxpool_columns",
    "add",
    "sub",
    "mul",
    "square",
    "sum",
    "mean",
    "gather_rows",
    "take",
    "reshape",
    "concat",
    "broadcast_to",
    "AdamState",
    "adam_step",
]


class Node:
    """A value recorded on a tape."""

    __slots__ = ("value", "tape", "parents", "backward_fn", "requires_grad", "name", "aux")

    def __init__(self, value, tape, parents=(), backward_fn=None, requires_grad=False, name=None):
        self.value = value
        self.tape = tape
        self.parents = parents
        self.backward_fn = backward_fn
        self.requires_grad = requires_grad
        self.name = name
        self.aux = None

    @property
    def shape(self):
        return self.value.shape

    @property
    def dtype(self):
        return self.value.dtype

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

    def __getitem__(self, key):
        return take(self, key)

    def __repr__(self):
        label = f" {self.name!r}" if self.name else ""
        return f"Node{label}(shape={self.value.shape}, dtype={self.value.dtype})"


class Tape:
    """Ordered record of operations.

    >>> tape = Tape()
    >>> x = tape.leaf(np.array(3.0))
    >>> grads = tape.backward(square(x))
    >>> float(grads[x])
    6.0
    """

    def __init__(self):
        self.nodes = []
        self.leaves = []

    def leaf(self, value, name=None):
        """Register a differentiable input."""
        node = Node(_as_float_array(value), self, requires_grad=True, name=name)
        self.leaves.append(node)
        return node

    def release(self):
        """Drop recorded nodes so the graph is freed without waiting for the cycle collector."""
        self.nodes.clear()
        self.leaves.clear()

    def __enter__(self):
        return self

    def __exit__(self, *exc):
        self.release()
        return False

    def const(self, value, name=None):
        """Register a non-differentiable input."""
        return Node(_as_float_array(value), self, name=name)

    def record(self, value, parents, backward_fn):
        requires_grad = any(p.requires_grad for p in parents)
        node = Node(value, self, parents, backward_fn if requires_grad else None, requires_grad)
        if requires_grad:
            self.nodes.append(node)
        return node

    def backward(self, loss):
        """Return ``{leaf: dloss/dleaf}`` for every leaf on this tape.

        Leaves that do not influence ``loss`` receive zero arrays.
        """
        if loss.tape is not self:
            raise ContractError("loss node belongs to a different tape")
        if loss.value.size != 1:
            raise ContractError(f"loss must be scalar, got shape {loss.value.shape}")
        grads = {id(loss): np.ones_like(loss.value)}
        for node in reversed(self.nodes):
            g = grads.pop(id(node), None)
            if g is None:
                continue
            needs = tuple(p.requires_grad for p in node.parents)
            parent_grads = node.backward_fn(g, needs)
            for parent, pg, need in zip(node.parents, parent_grads, needs):
                if not need or pg is None:
                    continue
                key = id(parent)
                if key in grads:
                    grads[key] = grads[key] + pg
                else:
                    grads[key] = pg
        out = {}
        for leaf in self.leaves:
            g = grads.get(id(leaf))
            out[leaf] = np.zeros_like(leaf.value) if g is None else g.reshape(leaf.value.shape)
        return out


def _as_float_array(value):
    arr = np.asarray(value)
    if not np.issubdtype(arr.dtype, np.floating):
        arr = arr.astype(np.float64)
    return arr


def _tape_of(*items):
    for item in items:
        if isinstance(item, Node):
            return item.tape
    return Tape()


def _lift(tape, item):
    if isinstance(item, Node):
        if item.tape is not tape:
            raise ContractError("operands recorded on different tapes")
        return item
    return tape.const(item)


def _unbroadcast(grad, shape):
    if grad.shape == shape:
        return grad
    ndiff = grad.ndim - len(shape)
    if ndiff > 0:
        grad = grad.sum(axis=tuple(range(ndiff)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad


def _lift_pair(tape, a, b):
    # plain Python numbers adopt the other operand's dtype, as numpy scalars would
    if isinstance(a, (int, float)) and isinstance(b, Node):
        a = np.asarray(a, dtype=b.dtype)
    if isinstance(b, (int, float)) and isinstance(a, Node):
        b = np.asarray(b, dtype=a.dtype)
    return _lift(tape, a), _lift(tape, b)


# -- elementwise -------------------------------------------------------------


def add(a, b):
    tape = _tape_of(a, b)
    a, b = _lift_pair(tape, a, b)
    sa, sb = a.shape, b.shape

    def backward(g, needs):
        return (_unbroadcast(g, sa) if needs[0] else None, _unbroadcast(g, sb) if needs[1] else None)

    return tape.record(a.value + b.value, (a, b), backward)


def sub(a, b):
    tape = _tape_of(a, b)
    a, b = _lift_pair(tape, a, b)
    sa, sb = a.shape, b.shape

    def backward(g, needs):
        return (_unbroadcast(g, sa) if needs[0] else None, _unbroadcast(-g, sb) if needs[1] else None)

    return tape.record(a.value - b.value, (a, b), backward)


def mul(a, b):
    tape = _tape_of(a, b)
    a, b = _lift_pair(tape, a, b)
    av, bv = a.value, b.value

    def backward(g, needs):
        return (
            _unbroadcast(g * bv, av.shape) if needs[0] else None,
            _unbroadcast(g * av, bv.shape) if needs[1] else None,
        )

    return tape.record(av * bv, (a, b), backward)


def square(x):
    tape = _tape_of(x)
    x = _lift(tape, x)
    xv = x.value

    def backward(g, needs):
        return (2.0 * xv * g,)

    return tape.record(xv * xv, (x,), backward)


def _add_inplace(out, b):
    # ``out`` is a fresh temporary, so reuse its buffer unless b would upcast
    if np.result_type(out, b) == out.dtype:
        out += b
        return out
    return out + b


def relu(x):
    """Element-wise ``max(0, x)``; the subgradient at 0 is taken as 0."""
    tape = _tape_of(x)
    x = _lift(tape, x)
    out = np.maximum(x.value, 0)

    def backward(g, needs):
        return (g * (out > 0),)

    return tape.record(out, (x,), backward)


# -- reductions --------------------------------------------------------------


def sum(x, axis=None):  # noqa: A001 - mirrors numpy
    tape = _tape_of(x)
    x = _lift(tape, x)
    shape = x.shape

    def backward(g, needs):
        if axis is None:
            return (np.broadcast_to(g, shape).copy(),)
        return (np.broadcast_to(np.expand_dims(g, axis), shape).copy(),)

    return tape.record(np.asarray(x.value.sum(axis=axis)), (x,), backward)


def mean(x):
    tape = _tape_of(x)
    x = _lift(tape, x)
    shape, n = x.shape, x.value.size

    def backward(g, needs):
        return (np.broadcast_to(g / n, shape).copy(),)

    return tape.record(np.asarray(x.value.mean()), (x,), backward)


def maxpool_columns(features, axis=-2):
    """Column-wise max over the row axis (``axis``, default ``-2``).

    Returns ``(pooled, argmax)``.  Ties go to the lowest row index, and the
    gradient of each pooled element flows only to its winning row.  Pass
    ``axis=-1`` for channel-major features ``(..., C, N)``, which pools
    along contiguous memory and is much faster for large clouds.
    """
    tape = _tape_of(features)
    features = _lift(tape, features)
    if axis not in (-1, -2):
        raise ShapeError(f"axis must be -1 or -2, got {axis}")
    if features.value.ndim < 2:
        raise ShapeError(f"features must be at least 2-D (rows x cols), got {features.shape}")
    if features.shape[axis] == 0:
        raise EmptyCloudError("cannot max-pool an empty feature matrix")
    fv = features.value
    arg = np.argmax(fv, axis=axis)
    pooled = np.take_along_axis(fv, np.expand_dims(arg, axis), axis=axis).squeeze(axis)
    shape = fv.shape

    def backward(g, needs):
        out = np.zeros(shape, dtype=g.dtype)
        np.put_along_axis(out, np.expand_dims(arg, axis), np.expand_dims(g, axis), axis=axis)
        return (out,)

    node = tape.record(pooled, (features,), backward)
    node.aux = arg
    return node, arg


# -- dense layers ------------------------------------------------------------


def affine(W, b, x):
    """``x @ W.T + b`` with a shared ``(out, in)`` weight matrix."""
    tape = _tape_of(W, b, x)
    W, x = _lift(tape, W), _lift(tape, x)
    b = None if b is None else _lift(tape, b)
    Wv, xv = W.value, x.value
    if Wv.ndim != 2:
        raise ShapeError(f"W must be 2-D (out, in), got {Wv.shape}")
    if xv.shape[-1] != Wv.shape[1]:
        raise ShapeError(f"x has {xv.shape[-1]} features but W expects {Wv.shape[1]}")
    if b is not None and b.shape != (Wv.shape[0],):
        raise ShapeError(f"b has shape {b.shape}, expected ({Wv.shape[0]},)")
    out = xv @ Wv.T
    if b is not None:
        out = _add_inplace(out, b.value)
    parents = (W, x) if b is None else (W, x, b)

    def backward(g, needs):
        g2 = g.reshape(-1, g.shape[-1])
        gW = g2.T @ xv.reshape(-1, xv.shape[-1]) if needs[0] else None
        gx = g @ Wv if needs[1] else None
        if b is None:
            return gW, gx
        return gW, gx, (g2.sum(axis=0) if needs[2] else None)

    return tape.record(out, parents, backward)


def scaled_affine(W, s, b, x):
    """Scaled affine map ``(W x) * s + b`` with element-wise ``s``.

    Shapes: either a single parameter set ``W (out, in)``, ``s, b (out,)``
    applied to ``x (..., in)``, or a batch of parameter sets
    ``W (B, out, in)``, ``s, b (B, out)`` applied to ``x (B, N, in)``.
    """
    tape = _tape_of(W, s, b, x)
    W, s, b, x = (_lift(tape, v) for v in (W, s, b, x))
    Wv, sv, bv, xv = W.value, s.value, b.value, x.value
    batched = Wv.ndim == 3
    if Wv.ndim not in (2, 3):
        raise ShapeError(f"W must be (out, in) or (B, out, in), got {Wv.shape}")
    n_out, n_in = Wv.shape[-2:]
    if xv.shape[-1] != n_in:
        raise ShapeError(f"x has {xv.shape[-1]} features but W expects {n_in}")
    if sv.shape != Wv.shape[:-1]:
        raise ShapeError(f"s has shape {sv.shape}, expected {Wv.shape[:-1]}")
    if bv.shape != Wv.shape[:-1]:
        raise ShapeError(f"b has shape {bv.shape}, expected {Wv.shape[:-1]}")
    if batched and (xv.ndim != 3 or xv.shape[0] != Wv.shape[0]):
        raise ShapeError(f"batched W {Wv.shape} needs x of shape (B, N, in), got {xv.shape}")
    # (W x) * s == (s[:, None] * W) x; folding keeps the per-point work to one matmul
    Ws = Wv * sv[..., None]
    out = xv @ np.swapaxes(Ws, -1, -2)
    out = _add_inplace(out, bv[:, None, :] if batched else bv)

    def backward(g, needs):
        gW = gs = gb = gx = None
        if needs[0] or needs[1]:
            if batched:
                M = np.swapaxes(g, -1, -2) @ xv
            else:
                M = g.reshape(-1, n_out).T @ xv.reshape(-1, n_in)
            if needs[0]:
                gW = M * sv[..., None]
            if needs[1]:
                gs = (M * Wv).sum(axis=-1)
        if needs[2]:
            gb = g.sum(axis=1) if batched else g.reshape(-1, n_out).sum(axis=0)
        if needs[3]:
            gx = g @ Ws
        return gW, gs, gb, gx

    return tape.record(out, (W, s, b, x), backward)


def channel_affine(W, b, x):
    """``W @ x + b[:, None]`` for channel-major ``x (..., in, N)``."""
    tape = _tape_of(W, b, x)
    W, b, x = _lift(tape, W), _lift(tape, b), _lift(tape, x)
    Wv, bv, xv = W.value, b.value, x.value
    if Wv.ndim != 2:
        raise ShapeError(f"W must be 2-D (out, in), got {Wv.shape}")
    if xv.ndim < 2 or xv.shape[-2] != Wv.shape[1]:
        raise ShapeError(f"x must be (..., {Wv.shape[1]}, N), got {xv.shape}")
    if bv.shape != (Wv.shape[0],):
        raise ShapeError(f"b has shape {bv.shape}, expected ({Wv.shape[0]},)")
    out = _add_inplace(Wv @ xv, bv[:, None])

    def backward(g, needs):
        gW = gb = gx = None
        if needs[0]:
            gW = g @ np.swapaxes(xv, -1, -2)
            gW = gW.reshape(-1, *Wv.shape).sum(axis=0)
        if needs[1]:
            gb = g.sum(axis=-1).reshape(-1, Wv.shape[0]).sum(axis=0)
        if needs[2]:
            gx = Wv.T @ g
        return gW, gb, gx

    return tape.record(out, (W, b, x), backward)


# -- indexing and shaping ----------------------------------------------------


def gather_rows(x, index):
    """Select rows ``x[..., index, :]``; the index is a constant of the graph."""
    tape = _tape_of(x)
    x = _lift(tape, x)
    index = np.asarray(index, dtype=np.intp)
    shape = x.shape

    def backward(g, needs):
        out = np.zeros(shape, dtype=g.dtype)
        np.add.at(out, (Ellipsis, index, slice(None)), g)
        return (out,)

    return tape.record(x.value[..., index, :], (x,), backward)


def take(x, key):
    """Basic or advanced indexing ``x[key]``."""
    tape = _tape_of(x)
    x = _lift(tape, x)
    shape = x.shape

    parts = key if isinstance(key, tuple) else (key,)
    basic = all(k is Ellipsis or k is None or isinstance(k, (slice, int, np.integer)) for k in parts)

    def backward(g, needs):
        out = np.zeros(shape, dtype=g.dtype)
        if basic:  # a view never repeats an element, so plain assignment suffices
            out[key] = g
        else:
            np.add.at(out, key, g)
        return (out,)

    return tape.record(x.value[key], (x,), backward)


def swap_last(x):
    """Exchange the last two axes."""
    tape = _tape_of(x)
    x = _lift(tape, x)

    def backward(g, needs):
        return (np.swapaxes(g, -1, -2),)

    return tape.record(np.swapaxes(x.value, -1, -2), (x,), backward)


def reshape(x, shape):
    tape = _tape_of(x)
    x = _lift(tape, x)
    old = x.shape

    def backward(g, needs):
        return (g.reshape(old),)

    return tape.record(x.value.reshape(shape), (x,), backward)


def concat(items, axis=-1):
    tape = _tape_of(*items)
    items = [_lift(tape, v) for v in items]
    sizes = [v.shape[axis] for v in items]
    splits = np.cumsum(sizes)[:-1]

    def backward(g, needs):
        return tuple(np.split(g, splits, axis=axis))

    return tape.record(np.concatenate([v.value for v in items], axis=axis), tuple(items), backward)


def broadcast_to(x, shape):
    tape = _tape_of(x)
    x = _lift(tape, x)
    old = x.shape

    def backward(g, needs):
        return (_unbroadcast(g, old),)

    return tape.record(np.broadcast_to(x.value, shape), (x,), backward)


# -- optimizer ---------------------------------------------------------------


@dataclass
class AdamState:
    """Moment buffers for :func:`adam_step`, keyed like the parameter dict."""

    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    t: int = 0
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)


_ADAM_CHUNK = 1 << 15  # elements per block; keeps every pass inside L2


def _adam_update(p, m, v, g, b1, b2, bc1, bc2, eps, lr):
    tmp = np.empty(min(_ADAM_CHUNK, p.size), dtype=p.dtype)
    for lo in range(0, p.size, _ADAM_CHUNK):
        hi = min(lo + _ADAM_CHUNK, p.size)
        pc, mc, vc, gc, t = p[lo:hi], m[lo:hi], v[lo:hi], g[lo:hi], tmp[: hi - lo]
        np.multiply(gc, 1.0 - b1, out=t)
        mc *= b1
        mc += t
        np.multiply(gc, gc, out=t)
        t *= 1.0 - b2
        vc *= b2
        vc += t
        # p -= lr * (m / bc1) / (sqrt(v / bc2) + eps)
        np.divide(vc, bc2, out=t)
        np.sqrt(t, out=t)
        t += eps
        np.divide(mc, t, out=t)
        t *= lr / bc1
        pc -= t


def adam_step(params, grads, state, lr):
    """Apply one bias-corrected ADAM update to ``params`` in place.

    ``params`` and ``grads`` are dicts of equally shaped arrays.  Keys absent
    from ``grads`` are skipped.  Returns ``(params, state)``.
    """
    for key, g in grads.items():
        if key not in params:
            raise ShapeError(f"gradient for unknown parameter {key!r}")
        if g.shape != params[key].shape:
            raise ShapeError(f"gradient for {key!r} has shape {g.shape}, parameter has {params[key].shape}")
        if key in state.m and state.m[key].shape != g.shape:
            raise ShapeError(f"moment buffer for {key!r} has shape {state.m[key].shape}, gradient has {g.shape}")
    state.t += 1
    b1, b2 = state.beta1, state.beta2
    bc1 = 1.0 - b1**state.t
    bc2 = 1.0 - b2**state.t
    for key, g in grads.items():
        p = params[key]
        if key not in state.m:
            state.m[key] = np.zeros_like(p)
            state.v[key] = np.zeros_like(p)
        flat = p.reshape(-1)  # a copy when p is not contiguous; written back below
        _adam_update(flat, state.m[key].reshape(-1), state.v[key].reshape(-1),
                     np.ascontiguousarray(g, dtype=p.dtype).reshape(-1), b1, b2, bc1, bc2, state.eps, lr)
        if not np.shares_memory(flat, p):
            p[...] = flat.reshape(p.shape)
    return params, state
