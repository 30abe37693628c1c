"""Minimal reverse-mode automatic differentiation over numpy arrays.

Every differentiable operation builds a :class:`Node` that records its parent
tensors, the arrays it must keep for the backward pass, and a backward rule.
:func:`backward` walks the graph in reverse topological order.

Arrays kept for backward are reported to an optional :class:`Tape` tracker,
which counts live stored-activation bytes and per-tag backward executions.
Those counters back the memory accounting in :mod:`stnas.metrics`.
"""
from __future__ import annotations

import contextlib
import threading
from typing import Callable, Iterable, Sequence

import numpy as np


class ContractError(ValueError):
    """Operand shapes or arguments violate an operation's contract."""


class GraphError(RuntimeError):
    """The computation graph is malformed (e.g. contains a cycle)."""


class NumericError(FloatingPointError):
    """A forward value became NaN or Inf."""


_DTYPES = {32: np.float32, 64: np.float64}
_config = {"dtype": np.float32, "debug": False}
_local = threading.local()


def set_precision(bits: int) -> None:
    if bits not in _DTYPES:
        raise ContractError(f"precision must be 32 or 64, got {bits}")
    _config["dtype"] = _DTYPES[bits]


def get_dtype():
    return _config["dtype"]


@contextlib.contextmanager
def precision(bits: int):
    old = _config["dtype"]
    set_precision(bits)
    try:
        yield
    finally:
        _config["dtype"] = old


def set_debug(flag: bool) -> None:
    """Check every forward output for NaN/Inf when enabled."""
    _config["debug"] = bool(flag)


def _grad_enabled() -> bool:
    return getattr(_local, "grad_enabled", True)


@contextlib.contextmanager
def no_grad():
    old = _grad_enabled()
    _local.grad_enabled = False
    try:
        yield
    finally:
        _local.grad_enabled = old


class Tape:
    """Counts bytes of arrays retained for backward and backward executions.

    Arrays are deduplicated by identity, so an input shared by several
    consumers is counted once, as it would be in a real allocator.
    """

    def __init__(self):
        self.live_bytes = 0
        self.peak_bytes = 0
        self._refs: dict[int, list] = {}
        self.backward_counts: dict = {}
        self.forward_counts: dict = {}

    def retain(self, arrays: Sequence[np.ndarray]) -> None:
        for a in arrays:
            key = id(a)
            entry = self._refs.get(key)
            if entry is None:
                # keep the array alive so its id cannot be reused while counted
                self._refs[key] = [a, 1]
                self.live_bytes += a.nbytes
            else:
                entry[1] += 1
        self.peak_bytes = max(self.peak_bytes, self.live_bytes)

    def release(self, arrays: Sequence[np.ndarray]) -> None:
        for a in arrays:
            key = id(a)
            entry = self._refs.get(key)
            if entry is None:
                continue
            entry[1] -= 1
            if entry[1] == 0:
                del self._refs[key]
                self.live_bytes -= a.nbytes

    def count_forward(self, tag) -> None:
        self.forward_counts[tag] = self.forward_counts.get(tag, 0) + 1

    def count_backward(self, tag) -> None:
        self.backward_counts[tag] = self.backward_counts.get(tag, 0) + 1


def active_tape() -> Tape | None:
    return getattr(_local, "tape", None)


@contextlib.contextmanager
def track(tape: Tape | None = None):
    """Install a :class:`Tape` for the current thread."""
    tape = tape if tape is not None else Tape()
    old = active_tape()
    _local.tape = tape
    try:
        yield tape
    finally:
        _local.tape = old


class Node:
    __slots__ = ("parents", "saved", "backward_fn", "tag", "released")

    def __init__(self, parents, saved, backward_fn, tag=None):
        self.parents = parents
        self.saved = saved
        self.backward_fn = backward_fn
        self.tag = tag
        self.released = False


class Tensor:
    """A dense array with an optional gradient and a link to its producer."""

    __array_priority__ = 100

    def __init__(self, values, requires_grad: bool = False, dtype=None, name: str | None = None):
        if isinstance(values, Tensor):
            values = values.values
        self.values = np.asarray(values, dtype=dtype or get_dtype())
        self.requires_grad = bool(requires_grad)
        self.grad: np.ndarray | None = None
        self.node: Node | None = None
        self.name = name

    @property
    def shape(self) -> tuple:
        return self.values.shape

    @property
    def ndim(self) -> int:
        return self.values.ndim

    @property
    def dtype(self):
        return self.values.dtype

    def numpy(self) -> np.ndarray:
        return self.values

    def item(self) -> float:
        return float(self.values)

    def __repr__(self):
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad})"

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

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, index):
        return getitem(self, index)


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def make_op(values: np.ndarray, parents: Sequence[Tensor], saved: Sequence[np.ndarray],
            backward_fn: Callable, tag=None) -> Tensor:
    """Wrap a forward result and register its backward rule.

    ``backward_fn(grad_out, saved)`` returns one gradient (or None) per parent.
    """
    if _config["debug"] and not np.all(np.isfinite(values)):
        raise NumericError("non-finite value produced in forward pass")
    needs = _grad_enabled() and any(p.requires_grad for p in parents)
    out = Tensor.__new__(Tensor)
    out.values = values
    out.grad = None
    out.name = None
    out.requires_grad = needs
    out.node = None
    if needs:
        out.node = Node(tuple(parents), tuple(saved), backward_fn, tag)
        tape = active_tape()
        if tape is not None:
            tape.retain(out.node.saved)
    return out


def _toposort(root: Tensor) -> list[Tensor]:
    order: list[Tensor] = []
    state: dict[int, int] = {}  # 1 = on stack, 2 = done
    stack = [(root, False)]
    while stack:
        t, expanded = stack.pop()
        key = id(t)
        if expanded:
            state[key] = 2
            order.append(t)
            continue
        s = state.get(key)
        if s == 2:
            continue
        if s == 1:
            raise GraphError("cycle detected in computation graph")
        state[key] = 1
        stack.append((t, True))
        if t.node is not None:
            for p in t.node.parents:
                if p.requires_grad:
                    ps = state.get(id(p))
                    if ps == 1:
                        raise GraphError("cycle detected in computation graph")
                    if ps is None:
                        stack.append((p, False))
    return order


def backward(root: Tensor, params: Iterable[Tensor] | None = None,
             free: bool = True) -> dict[int, np.ndarray]:
    """Back-propagate from a scalar ``root``.

    Returns a map ``id(leaf) -> gradient`` and stores each leaf gradient in
    ``leaf.grad`` (overwriting, never accumulating across calls).  Parameters
    passed in ``params`` that are unreachable get a zero gradient.  With
    ``free`` the stored arrays of each node are dropped once its rule fires.
    """
    if root.values.size != 1:
        raise ContractError(f"backward needs a scalar root, got shape {root.shape}")
    grads: dict[int, np.ndarray] = {}
    leaves: dict[int, Tensor] = {}
    if root.requires_grad:
        order = _toposort(root)
        grads[id(root)] = np.ones_like(root.values)
        tape = active_tape()
        for t in reversed(order):
            g = grads.get(id(t))
            node = t.node
            if node is None:
                leaves[id(t)] = t
                continue
            if g is None:
                continue
            if node.released:
                raise GraphError("backward through a graph whose buffers were already freed")
            parent_grads = node.backward_fn(g, node.saved)
            if tape is not None and node.tag is not None:
                tape.count_backward(node.tag)
            for p, pg in zip(node.parents, parent_grads):
                if pg is None or not p.requires_grad:
                    continue
                if pg.shape != p.values.shape:
                    raise GraphError(f"gradient shape {pg.shape} != value shape {p.values.shape}")
                prev = grads.get(id(p))
                grads[id(p)] = pg if prev is None else prev + pg
            if id(t) != id(root):
                del grads[id(t)]
            if free:
                if tape is not None:
                    tape.release(node.saved)
                node.saved = ()
                node.released = True
    result = {k: grads[k] for k in leaves if k in grads}
    for k, leaf in leaves.items():
        leaf.grad = result.get(k)
    if params is not None:
        for p in params:
            if id(p) not in result:
                result[id(p)] = np.zeros_like(p.values)
                p.grad = result[id(p)]
    return result


# ---------------------------------------------------------------- broadcasting

def _check_trailing(a: tuple, b: tuple) -> tuple:
    """Shapes broadcast only when one is a suffix of the other."""
    if len(a) >= len(b):
        big, small = a, b
    else:
        big, small = b, a
    if len(small) and tuple(big[len(big) - len(small):]) != tuple(small):
        raise ContractError(f"shapes {a} and {b} are not trailing-compatible")
    return big


def _unbroadcast(g: np.ndarray, shape: tuple) -> np.ndarray:
    extra = g.ndim - len(shape)
    if extra > 0:
        g = g.sum(axis=tuple(range(extra)))
    return g


# ------------------------------------------------------------------ primitives

def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _check_trailing(a.shape, b.shape)
    sa, sb = a.shape, b.shape
    return make_op(a.values + b.values, (a, b), (),
                   lambda g, s: (_unbroadcast(g, sa), _unbroadcast(g, sb)))


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _check_trailing(a.shape, b.shape)
    sa, sb = a.shape, b.shape
    return make_op(a.values - b.values, (a, b), (),
                   lambda g, s: (_unbroadcast(g, sa), -_unbroadcast(g, sb)))


def neg(a) -> Tensor:
    a = as_tensor(a)
    return make_op(-a.values, (a,), (), lambda g, s: (-g,))


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _check_trailing(a.shape, b.shape)
    return _mul_op(a, b, a.shape, b.shape)


def _mul_op(a, b, sa, sb):
    keep_a = b.requires_grad
    keep_b = a.requires_grad
    saved = []
    if keep_a:
        saved.append(a.values)
    if keep_b:
        saved.append(b.values)

    def bw(g, s):
        it = iter(s)
        av = next(it) if keep_a else None
        bv = next(it) if keep_b else None
        ga = _unbroadcast(g * bv, sa) if keep_b else None
        gb = _unbroadcast(g * av, sb) if keep_a else None
        return ga, gb

    return make_op(a.values * b.values, (a, b), saved, bw)


def matmul(a, b) -> Tensor:
    """``a[..., k] @ b[k, m]``; ``b`` must be two-dimensional."""
    a, b = as_tensor(a), as_tensor(b)
    if b.ndim != 2 or a.ndim < 1 or a.shape[-1] != b.shape[0]:
        raise ContractError(f"matmul shapes {a.shape} @ {b.shape} incompatible")
    keep_a, keep_b = b.requires_grad, a.requires_grad
    saved = ([a.values] if keep_a else []) + ([b.values] if keep_b else [])

    def bw(g, s):
        it = iter(s)
        av = next(it) if keep_a else None
        bv = next(it) if keep_b else None
        ga = g @ bv.T if keep_b else None
        gb = None
        if keep_a:
            gb = av.reshape(-1, av.shape[-1]).T @ g.reshape(-1, g.shape[-1])
        return ga, gb

    return make_op(a.values @ b.values, (a, b), saved, bw)


def exp(a) -> Tensor:
    a = as_tensor(a)
    y = np.exp(a.values)
    return make_op(y, (a,), (y,), lambda g, s: (g * s[0],))


def log(a) -> Tensor:
    a = as_tensor(a)
    return make_op(np.log(a.values), (a,), (a.values,), lambda g, s: (g / s[0],))


def relu(a) -> Tensor:
    a = as_tensor(a)
    y = np.maximum(a.values, 0)
    return make_op(y, (a,), (y,), lambda g, s: (g * (s[0] > 0),))


def sum(a, axis=None, keepdims: bool = False) -> Tensor:  # noqa: A001
    a = as_tensor(a)
    shape = a.shape

    def bw(g, s):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, shape).copy(),)

    return make_op(np.sum(a.values, axis=axis, keepdims=keepdims), (a,), (), bw)


def mean(a, axis=None, keepdims: bool = False) -> Tensor:
    a = as_tensor(a)
    n = a.values.size if axis is None else np.prod([a.shape[i] for i in np.atleast_1d(axis)])
    return mul(sum(a, axis=axis, keepdims=keepdims), 1.0 / float(n))


def reshape(a, shape) -> Tensor:
    a = as_tensor(a)
    old = a.shape
    return make_op(a.values.reshape(shape), (a,), (), lambda g, s: (g.reshape(old),))


def getitem(a, index) -> Tensor:
    a = as_tensor(a)
    shape, dtype = a.shape, a.dtype

    def bw(g, s):
        out = np.zeros(shape, dtype=dtype)
        np.add.at(out, index, g)
        return (out,)

    return make_op(np.asarray(a.values[index]), (a,), (), bw)


def softmax(a, axis: int = -1) -> Tensor:
    a = as_tensor(a)
    z = a.values - a.values.max(axis=axis, keepdims=True)
    e = np.exp(z)
    y = e / e.sum(axis=axis, keepdims=True)

    def bw(g, s):
        y = s[0]
        return (y * (g - (g * y).sum(axis=axis, keepdims=True)),)

    return make_op(y, (a,), (y,), bw)


def log_softmax(a, axis: int = -1) -> Tensor:
    a = as_tensor(a)
    z = a.values - a.values.max(axis=axis, keepdims=True)
    y = z - np.log(np.exp(z).sum(axis=axis, keepdims=True))

    def bw(g, s):
        return (g - np.exp(s[0]) * g.sum(axis=axis, keepdims=True),)

    return make_op(y, (a,), (y,), bw)


def detach(a) -> Tensor:
    """Same values, no gradient path."""
    a = as_tensor(a)
    return Tensor(a.values, requires_grad=False, dtype=a.dtype)


def straight_through(hard, soft) -> Tensor:
    """Forward ``hard``, backward into ``soft``.

    Equivalent to ``soft + detach(hard - soft)`` without the rounding that
    expression introduces: the forward value is exactly ``hard``.
    """
    hard, soft = as_tensor(hard), as_tensor(soft)
    if hard.shape != soft.shape:
        raise ContractError(f"straight_through shapes differ: {hard.shape} vs {soft.shape}")
    if hard.requires_grad:
        raise ContractError("straight_through: hard operand must not carry a gradient path")
    values = hard.values.astype(soft.dtype, copy=False)
    return make_op(values, (soft,), (), lambda g, s: (g,))


def weighted_sum(weights, outputs: Sequence[Tensor]) -> Tensor:
    """``sum_k weights[k] * outputs[k]`` for a length-K weight vector.

    When the weight values are exactly one-hot the selected output array is
    returned as-is (no copy), so the result is bit-identical to running the
    selected operand alone.  Zero weights send no gradient to their operand.
    """
    weights = as_tensor(weights)
    outputs = [as_tensor(o) for o in outputs]
    if weights.ndim != 1 or weights.shape[0] != len(outputs) or not outputs:
        raise ContractError("weighted_sum needs one weight per output")
    shape = outputs[0].shape
    for o in outputs:
        if o.shape != shape:
            raise ContractError(f"weighted_sum operands differ in shape: {o.shape} vs {shape}")
    w = weights.values
    hot = np.flatnonzero(w)
    if hot.size == 1 and w[hot[0]] == 1:
        values = outputs[hot[0]].values
    else:
        values = outputs[0].values * w[0]
        for k in range(1, len(outputs)):
            values = values + outputs[k].values * w[k]
    keep_outputs = weights.requires_grad
    saved = [w] + ([o.values for o in outputs] if keep_outputs else [])

    def bw(g, s):
        wv = s[0]
        gw = None
        if keep_outputs:
            gw = np.array([np.sum(g * o) for o in s[1:]], dtype=wv.dtype)
        gos = [None if wv[k] == 0 else g * wv[k] for k in range(len(wv))]
        return (gw, *gos)

    return make_op(values, (weights, *outputs), saved, bw)


def conv1d(x, weight, bias, stride: int = 1, dilation: int = 1, tag=None) -> Tensor:
    """Time convolution over ``x[batch, T, in]`` with ``weight[taps, in, out]``.

    ``taps`` must be odd (2h+1); tap j sits at offset (j - h) * dilation and
    the input is zero-padded by h * dilation frames on each side, giving
    ``ceil(T / stride)`` output frames.
    """
    x, weight, bias = as_tensor(x), as_tensor(weight), as_tensor(bias)
    if stride < 1 or dilation < 1:
        raise ContractError(f"stride and dilation must be >= 1, got {stride}, {dilation}")
    if x.ndim != 3 or weight.ndim != 3 or weight.shape[0] % 2 != 1:
        raise ContractError(f"conv1d shapes x{x.shape} w{weight.shape} invalid")
    if x.shape[2] != weight.shape[1] or bias.shape != (weight.shape[2],):
        raise ContractError(f"conv1d dims x{x.shape} w{weight.shape} b{bias.shape} mismatch")
    taps = weight.shape[0]
    h = taps // 2
    pad = h * dilation
    T = x.shape[1]
    t_out = -(-T // stride)
    xp = np.pad(x.values, ((0, 0), (pad, pad), (0, 0)))
    span = stride * (t_out - 1) + 1
    w = weight.values
    out = np.broadcast_to(bias.values, (x.shape[0], t_out, w.shape[2])).copy()
    for j in range(taps):
        start = j * dilation
        out += xp[:, start:start + span:stride, :] @ w[j]
    need_x = weight.requires_grad
    need_w = x.requires_grad
    saved = ([x.values] if need_x else []) + ([w] if need_w else [])

    def bw(g, s):
        it = iter(s)
        xv = next(it) if need_x else None
        wv = next(it) if need_w else None
        gx = gw = None
        if need_w:
            gxp = np.zeros((g.shape[0], T + 2 * pad, wv.shape[1]), dtype=g.dtype)
            for j in range(taps):
                start = j * dilation
                gxp[:, start:start + span:stride, :] += g @ wv[j].T
            gx = gxp[:, pad:pad + T, :]
        if need_x:
            xpv = np.pad(xv, ((0, 0), (pad, pad), (0, 0)))
            g2 = g.reshape(-1, g.shape[-1])
            gw = np.stack([
                xpv[:, j * dilation:j * dilation + span:stride, :].reshape(-1, xv.shape[2]).T @ g2
                for j in range(taps)
            ])
        gb = g.sum(axis=(0, 1))
        return gx, gw, gb

    return make_op(out, (x, weight, bias), saved, bw, tag=tag)


def layer_norm(x, gain, bias, eps: float = 1e-5) -> Tensor:
    """Normalise the last axis to zero mean / unit variance, then scale and shift."""
    x, gain, bias = as_tensor(x), as_tensor(gain), as_tensor(bias)
    d = x.shape[-1]
    if gain.shape != (d,) or bias.shape != (d,):
        raise ContractError(f"layer_norm gain/bias must have shape ({d},)")
    mu = x.values.mean(axis=-1, keepdims=True)
    var = x.values.var(axis=-1, keepdims=True)
    rstd = 1.0 / np.sqrt(var + eps)
    xhat = (x.values - mu) * rstd
    y = xhat * gain.values + bias.values
    saved = (xhat, rstd, gain.values)

    def bw(g, s):
        xhat, rstd, gv = s
        gxhat = g * gv
        gx = rstd * (gxhat - gxhat.mean(axis=-1, keepdims=True)
                     - xhat * (gxhat * xhat).mean(axis=-1, keepdims=True))
        lead = tuple(range(g.ndim - 1))
        return gx, (g * xhat).sum(axis=lead), g.sum(axis=lead)

    return make_op(y.astype(x.dtype, copy=False), (x, gain, bias), saved, bw)


def dropout(x, p: float, train: bool, rng: np.random.Generator | None = None) -> Tensor:
    """Inverted dropout: keep with probability 1-p and rescale by 1/(1-p)."""
    x = as_tensor(x)
    if not 0.0 <= p < 1.0:
        raise ContractError(f"dropout probability must lie in [0, 1), got {p}")
    if not train or p == 0.0:
        return x
    if rng is None:
        raise ContractError("train-mode dropout needs an rng")
    mask = rng.random(x.shape) >= p
    scale = x.dtype.type(1.0 / (1.0 - p))
    y = x.values * mask * scale
    return make_op(y, (x,), (mask,), lambda g, s: (g * s[0] * scale,))
