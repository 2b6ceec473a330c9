"""A small reverse-mode autodiff engine over float64 numpy arrays.

Operations are recorded on the active :class:`Tape` in execution order, so
walking the tape backwards is a valid topological order and the backward
pass is deterministic. Primitives are deliberately coarse (a fused
attention, layer-norm and cross-entropy each count as one node) so that
numpy does the heavy lifting.

Example:
    >>> import numpy as np
    >>> g = grad(lambda p: mul(p["x"], p["x"]), {"x": np.array(3.0)})
    >>> float(g["x"])
    6.0
"""

from __future__ import annotations

import math
import threading
from typing import Callable, Mapping

import numpy as np

_state = threading.local()


class NonFiniteError(FloatingPointError):
    """A computation produced NaN or inf."""

    def __init__(self, message: str, op: str | None = None):
        super().__init__(message)
        self.op = op


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "parents", "backward_fn", "op")
    __array_ufunc__ = None  # make `ndarray <op> Tensor` defer to the reflected method

    def __init__(self, data, requires_grad: bool = False, parents: tuple = (),
                 backward_fn: Callable | None = None, op: str = "leaf"):
        self.data = np.asarray(data, dtype=np.float64)
        self.grad: np.ndarray | None = None
        self.requires_grad = requires_grad
        self.parents = parents
        self.backward_fn = backward_fn
        self.op = op

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    def __repr__(self) -> str:
        return f"Tensor(op={self.op}, shape={self.shape}, requires_grad={self.requires_grad})"

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

    def __neg__(self):
        return scale(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    def __rmatmul__(self, other):
        return matmul(other, self)

    def __truediv__(self, c: float):
        return scale(self, 1.0 / c)


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


class Tape:
    """Records differentiable operations while active (use as a context manager)."""

    def __init__(self):
        self.nodes: list[Tensor] = []

    def __enter__(self) -> Tape:
        stack = getattr(_state, "tapes", None)
        if stack is None:
            stack = _state.tapes = []
        stack.append(self)
        return self

    def __exit__(self, *exc) -> None:
        _state.tapes.pop()

    def backward(self, loss: Tensor) -> None:
        if loss.data.size != 1:
            raise ValueError("backward needs a scalar loss")
        if not np.isfinite(loss.data).all():
            raise NonFiniteError(*self._first_nonfinite())
        loss.grad = np.ones_like(loss.data)
        for node in reversed(self.nodes):
            g = node.grad
            if g is None:
                continue
            parent_grads = node.backward_fn(g)
            for parent, pg in zip(node.parents, parent_grads):
                if pg is None or not parent.requires_grad:
                    continue
                parent.grad = pg if parent.grad is None else parent.grad + pg
            if node.parents:
                node.grad = None  # intermediate gradients are not needed afterwards

    def _first_nonfinite(self) -> tuple[str, str | None]:
        for i, node in enumerate(self.nodes):
            if not np.isfinite(node.data).all():
                return f"non-finite value first produced by primitive '{node.op}' (tape position {i})", node.op
        return "non-finite loss", None


def _active_tape() -> Tape | None:
    stack = getattr(_state, "tapes", None)
    return stack[-1] if stack else None


def _make(data: np.ndarray, parents: tuple[Tensor, ...], backward_fn: Callable, op: str) -> Tensor:
    needs = any(p.requires_grad for p in parents)
    out = Tensor(data, requires_grad=needs, parents=parents if needs else (),
                 backward_fn=backward_fn if needs else None, op=op)
    if needs:
        tape = _active_tape()
        if tape is not None:
            tape.nodes.append(out)
    return out


# --- flop accounting -------------------------------------------------------------


class FlopCounter:
    """Counts matmul multiply-adds (as 2 flops each) issued while active."""

    def __init__(self):
        self.forward = 0
        self.backward = 0

    @property
    def total(self) -> int:
        return self.forward + self.backward

    def __enter__(self) -> FlopCounter:
        _state.flops = self
        return self

    def __exit__(self, *exc) -> None:
        _state.flops = None


def _count(n: int, backward: bool = False) -> None:
    fc = getattr(_state, "flops", None)
    if fc is not None:
        if backward:
            fc.backward += int(n)
        else:
            fc.forward += int(n)


def _mm_flops(a_shape, b_shape) -> int:
    batch = np.broadcast_shapes(a_shape[:-2], b_shape[:-2]) if len(a_shape) > 2 or len(b_shape) > 2 else ()
    m = a_shape[-2] if len(a_shape) > 1 else 1
    k = a_shape[-1]
    n = b_shape[-1]
    return 2 * int(np.prod(batch, dtype=np.int64)) * m * k * n


# --- elementwise / structural ------------------------------------------------------


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    if g.shape == shape:
        return g
    extra = g.ndim - len(shape)
    if extra:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g


def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    sa, sb = a.shape, b.shape
    return _make(a.data + b.data, (a, b),
                 lambda g: (_unbroadcast(g, sa), _unbroadcast(g, sb)), "add")


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    sa, sb = a.shape, b.shape
    return _make(a.data - b.data, (a, b),
                 lambda g: (_unbroadcast(g, sa), _unbroadcast(-g, sb)), "sub")


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    ad, bd = a.data, b.data

    def back(g):
        return (_unbroadcast(g * bd, ad.shape) if a.requires_grad else None,
                _unbroadcast(g * ad, bd.shape) if b.requires_grad else None)

    return _make(ad * bd, (a, b), back, "mul")


def scale(a, c: float) -> Tensor:
    a = as_tensor(a)
    return _make(a.data * c, (a,), lambda g: (g * c,), "scale")


def reshape(a, shape) -> Tensor:
    a = as_tensor(a)
    old = a.shape
    return _make(a.data.reshape(shape), (a,), lambda g: (g.reshape(old),), "reshape")


def transpose(a, axes) -> Tensor:
    a = as_tensor(a)
    inv = np.argsort(axes)
    return _make(a.data.transpose(axes), (a,), lambda g: (g.transpose(inv),), "transpose")


def getitem(a, key) -> Tensor:
    """Slice or integer-array indexing; repeated indices accumulate."""
    a = as_tensor(a)
    shape = a.shape

    fancy = any(isinstance(k, (list, np.ndarray)) for k in (key if isinstance(key, tuple) else (key,)))

    def back(g):
        full = np.zeros(shape)
        if fancy:
            np.add.at(full, key, g)
        else:
            full[key] = g
        return (full,)

    return _make(a.data[key], (a,), back, "getitem")


def sum_(a, axis=None) -> Tensor:
    a = as_tensor(a)
    shape = a.shape

    def back(g):
        if axis is not None:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, shape).copy(),)

    return _make(a.data.sum(axis=axis), (a,), back, "sum")


def mean(a, axis=None) -> Tensor:
    a = as_tensor(a)
    n = a.data.size if axis is None else a.shape[axis]
    return scale(sum_(a, axis), 1.0 / n)


def relu(a) -> Tensor:
    a = as_tensor(a)
    pos = a.data > 0
    return _make(np.where(pos, a.data, 0.0), (a,), lambda g: (g * pos,), "relu")


_GELU_C = math.sqrt(2.0 / math.pi)


def gelu_np(x: np.ndarray) -> np.ndarray:
    return 0.5 * x * (1.0 + np.tanh(_GELU_C * x * (1.0 + 0.044715 * x * x)))


def gelu(a) -> Tensor:
    """tanh-approximated GELU."""
    a = as_tensor(a)
    x = a.data
    x2 = x * x
    t = np.tanh(_GELU_C * x * (1.0 + 0.044715 * x2))
    out = 0.5 * x * (1.0 + t)

    def back(g):
        d = 0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * _GELU_C * (1.0 + 3 * 0.044715 * x2)
        return (g * d,)

    return _make(out, (a,), back, "gelu")


def tanh(a) -> Tensor:
    a = as_tensor(a)
    t = np.tanh(a.data)
    return _make(t, (a,), lambda g: (g * (1.0 - t * t),), "tanh")


# --- linear algebra ----------------------------------------------------------------


def matmul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    ad, bd = a.data, b.data
    _count(_mm_flops(ad.shape, bd.shape))

    def back(g):
        ga = gb = None
        if a.requires_grad:
            ga = g @ np.swapaxes(bd, -1, -2)
            _count(_mm_flops(g.shape, np.swapaxes(bd, -1, -2).shape), backward=True)
            ga = _unbroadcast(ga, ad.shape)
        if b.requires_grad:
            if bd.ndim == 2 and ad.ndim > 2:
                a2 = ad.reshape(-1, ad.shape[-1])
                gb = a2.T @ g.reshape(-1, g.shape[-1])
                _count(_mm_flops(a2.T.shape, (a2.shape[0], g.shape[-1])), backward=True)
            else:
                gb = np.swapaxes(ad, -1, -2) @ g
                _count(_mm_flops(np.swapaxes(ad, -1, -2).shape, g.shape), backward=True)
                gb = _unbroadcast(gb, bd.shape)
        return ga, gb

    return _make(ad @ bd, (a, b), back, "matmul")


def embedding(table, ids) -> Tensor:
    """Row lookup ``table[ids]``; ids are integer constants."""
    table = as_tensor(table)
    ids = np.asarray(ids, dtype=np.int64)
    shape = table.shape

    def back(g):
        full = np.zeros(shape)
        np.add.at(full, ids.ravel(), g.reshape(-1, shape[-1]))
        return (full,)

    return _make(table.data[ids], (table,), back, "embedding")


# --- normalisation / probabilities ------------------------------------------------------


def layer_norm_np(x: np.ndarray, g: np.ndarray, b: np.ndarray, eps: float = 1e-5) -> np.ndarray:
    mu = x.mean(axis=-1, keepdims=True)
    xc = x - mu
    inv = 1.0 / np.sqrt((xc * xc).mean(axis=-1, keepdims=True) + eps)
    return xc * inv * g + b


def layer_norm(x, gain, bias, eps: float = 1e-5) -> Tensor:
    x, gain, bias = as_tensor(x), as_tensor(gain), as_tensor(bias)
    xd = x.data
    mu = xd.mean(axis=-1, keepdims=True)
    xc = xd - mu
    inv = 1.0 / np.sqrt((xc * xc).mean(axis=-1, keepdims=True) + eps)
    xhat = xc * inv
    gd = gain.data

    def back(g):
        lead = tuple(range(g.ndim - 1))
        gg = (g * xhat).sum(axis=lead) if gain.requires_grad else None
        gb = g.sum(axis=lead) if bias.requires_grad else None
        gx = None
        if x.requires_grad:
            dxhat = g * gd
            gx = inv * (dxhat - dxhat.mean(axis=-1, keepdims=True)
                        - xhat * (dxhat * xhat).mean(axis=-1, keepdims=True))
        return gx, gg, gb

    return _make(xhat * gd + bias.data, (x, gain, bias), back, "layer_norm")


def softmax_np(x: np.ndarray, mask: np.ndarray | None = None, inplace: bool = False) -> np.ndarray:
    """Softmax over the last axis; masked (False) entries get exactly zero weight."""
    if mask is not None:
        z = x + np.where(mask, 0.0, -np.inf)
    else:
        z = x if inplace else x.copy()
    z -= z.max(axis=-1, keepdims=True)
    np.exp(z, out=z)
    z /= z.sum(axis=-1, keepdims=True)
    return z


def softmax(x, mask: np.ndarray | None = None) -> Tensor:
    """Softmax over the last axis; ``mask`` (True = visible) zeroes hidden entries."""
    x = as_tensor(x)
    p = softmax_np(x.data, mask)

    def back(g):
        return (p * (g - (g * p).sum(axis=-1, keepdims=True)),)

    return _make(p, (x,), back, "softmax")


def logsumexp(x) -> Tensor:
    x = as_tensor(x)
    m = x.data.max(axis=-1, keepdims=True)
    e = np.exp(x.data - m)
    s = e.sum(axis=-1, keepdims=True)
    out = (np.log(s) + m)[..., 0]
    p = e / s
    return _make(out, (x,), lambda g: (g[..., None] * p,), "logsumexp")


def cross_entropy(logits, targets, weights: np.ndarray | None = None) -> Tensor:
    """Mean negative log-likelihood of integer ``targets`` under ``softmax(logits)``.

    ``weights`` (0/1 per row) drops rows such as padding; the mean is taken
    over the kept rows.
    """
    logits = as_tensor(logits)
    z = logits.data.reshape(-1, logits.shape[-1])
    t = np.asarray(targets, dtype=np.int64).ravel()
    w = np.ones(t.size) if weights is None else np.asarray(weights, dtype=np.float64).ravel()
    n = max(w.sum(), 1.0)
    m = z.max(axis=-1, keepdims=True)
    e = np.exp(z - m)
    s = e.sum(axis=-1, keepdims=True)
    lse = np.log(s)[:, 0] + m[:, 0]
    rows = np.arange(t.size)
    safe_t = np.where(w > 0, t, 0)
    nll = lse - z[rows, safe_t]
    loss = np.sum(w * nll) / n
    shape = logits.shape

    def back(g):
        d = e / s
        d[rows, safe_t] -= 1.0
        d *= (w / n)[:, None] * g
        return (d.reshape(shape),)

    return _make(np.asarray(loss), (logits,), back, "cross_entropy")


def causal_mask(t_q: int, t_k: int | None = None) -> np.ndarray:
    """Boolean mask, True where query ``i`` may see key ``j`` (keys aligned to the end)."""
    t_k = t_q if t_k is None else t_k
    return np.arange(t_k)[None, :] <= (np.arange(t_q)[:, None] + (t_k - t_q))


def attention_np(q: np.ndarray, k: np.ndarray, v: np.ndarray, mask: np.ndarray | None) -> np.ndarray:
    s = q @ np.swapaxes(k, -1, -2)
    s *= 1.0 / math.sqrt(q.shape[-1])
    return softmax_np(s, mask, inplace=True) @ v


def attention(q, k, v, mask: np.ndarray | bool | None = True) -> Tensor:
    """``softmax(q k^T / sqrt(d_k)) v`` over the last two axes.

    ``mask=True`` applies a causal mask; an explicit boolean array (True =
    visible) is broadcast against the score matrix.
    """
    q, k, v = as_tensor(q), as_tensor(k), as_tensor(v)
    if mask is True:
        mask = causal_mask(q.shape[-2], k.shape[-2])
    elif mask is False:
        mask = None
    c = 1.0 / math.sqrt(q.shape[-1])
    qd, kd, vd = q.data, k.data, v.data
    kt = np.swapaxes(kd, -1, -2)
    _count(_mm_flops(qd.shape, kt.shape))
    s = qd @ kt
    s *= c
    p = softmax_np(s, mask, inplace=True)
    _count(_mm_flops(p.shape, vd.shape))
    out = p @ vd

    def back(g):
        gq = gk = gv = None
        if v.requires_grad:
            gv = np.swapaxes(p, -1, -2) @ g
            _count(_mm_flops(p.shape, g.shape), backward=True)
        if q.requires_grad or k.requires_grad:
            dp = g @ np.swapaxes(vd, -1, -2)
            _count(_mm_flops(g.shape, vd.shape[:-2] + (vd.shape[-1], vd.shape[-2])), backward=True)
            dp -= (dp * p).sum(axis=-1, keepdims=True)
            dp *= p
            dp *= c
            ds = dp
            if q.requires_grad:
                gq = ds @ kd
                _count(_mm_flops(ds.shape, kd.shape), backward=True)
            if k.requires_grad:
                gk = np.swapaxes(ds, -1, -2) @ qd
                _count(_mm_flops(ds.shape, qd.shape), backward=True)
        return (None if gq is None else _unbroadcast(gq, qd.shape),
                None if gk is None else _unbroadcast(gk, kd.shape),
                None if gv is None else _unbroadcast(gv, vd.shape))

    return _make(out, (q, k, v), back, "attention")


# --- drivers ---------------------------------------------------------------------------


def value_and_grad(loss_fn: Callable[[dict[str, Tensor]], Tensor | tuple],
                   params: Mapping[str, np.ndarray], wrt=None):
    """Evaluate ``loss_fn`` and its gradient with respect to ``params``.

    ``loss_fn`` receives a dict of leaf tensors and returns a scalar
    tensor, or a tuple whose first element is that scalar (the rest is
    passed back as ``aux``). Only names in ``wrt`` (default: all) are
    differentiated; the others are treated as constants.

    Returns ``(loss, grads, aux)``.
    """
    names = list(params) if wrt is None else [n for n in params if n in set(wrt)]
    leaves = {n: Tensor(v, requires_grad=(n in names)) for n, v in params.items()}
    with Tape() as tape:
        out = loss_fn(leaves)
    loss, aux = (out[0], out[1:]) if isinstance(out, tuple) else (out, ())
    if loss.requires_grad:
        tape.backward(loss)
    elif not np.isfinite(loss.data).all():
        raise NonFiniteError("non-finite loss")
    grads = {n: (leaves[n].grad if leaves[n].grad is not None else np.zeros_like(leaves[n].data))
             for n in names}
    return float(loss.data), grads, aux


def grad(loss_fn, params: Mapping[str, np.ndarray], wrt=None) -> dict[str, np.ndarray]:
    return value_and_grad(loss_fn, params, wrt)[1]


def _loss_value(loss_fn, params) -> float:
    out = loss_fn({n: Tensor(v) for n, v in params.items()})
    return float((out[0] if isinstance(out, tuple) else out).data)


def finite_diff_check(loss_fn, params: Mapping[str, np.ndarray], step: float = 1e-5,
                      max_coords: int | None = None, seed: int = 0, wrt=None) -> float:
    """Largest relative error between analytic and central-difference gradients.

    The error per coordinate is ``|a - n| / max(|a|, |n|, 1e-12)``. With
    ``max_coords`` set, a seeded random subset of coordinates is checked
    instead of all of them.
    """
    if step <= 0:
        raise ValueError("step must be positive")
    params = {n: np.array(v, dtype=np.float64) for n, v in params.items()}
    analytic = grad(loss_fn, params, wrt)
    coords = [(n, i) for n in analytic for i in range(params[n].size)]
    if max_coords is not None and len(coords) > max_coords:
        rng = np.random.default_rng(seed)
        coords = [coords[j] for j in sorted(rng.choice(len(coords), max_coords, replace=False))]
    worst = 0.0
    for name, i in coords:
        flat = params[name].reshape(-1)
        orig = flat[i]
        flat[i] = orig + step
        up = _loss_value(loss_fn, params)
        flat[i] = orig - step
        down = _loss_value(loss_fn, params)
        flat[i] = orig
        numeric = (up - down) / (2 * step)
        a = analytic[name].reshape(-1)[i]
        err = abs(a - numeric) / max(abs(a), abs(numeric), 1e-12)
        worst = max(worst, err)
    return worst
