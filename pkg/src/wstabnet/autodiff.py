"""Dense tensors with reverse-mode automatic differentiation.

Every operation records its inputs and a backward closure on the value it
returns; calling :func:`backward` on a scalar replays the recorded graph in
reverse topological order and accumulates gradients on the leaves. The op
set is exactly what the table recognizer needs: matmul, convolution,
softmax, layer norm, embeddings, cross-entropy, and a handful of elementwise
and shape ops.

Broadcasting is deliberately restricted: two operands must either match in
shape, or the smaller one must equal a trailing suffix of the larger (the
bias / per-position-offset case). Anything else needs an explicit reshape.
"""

from __future__ import annotations

import threading

import numpy as np


class ShapeMismatch(ValueError):
    pass


class IdOutOfRange(IndexError):
    pass


class EmptyAfterIgnore(ValueError):
    """Every position of a cross-entropy batch carried the ignore id."""


class NotScalar(ValueError):
    """backward() was asked to differentiate a non-scalar."""


_GRAD_STATE = threading.local()


def _grad_enabled() -> bool:
    return getattr(_GRAD_STATE, "enabled", True)


class no_grad:
    """Context manager that suspends graph recording (evaluation paths).

    The flag is per-thread, so concurrent inference never disturbs a
    training thread.
    """

    def __enter__(self):
        self._prev = _grad_enabled()
        _GRAD_STATE.enabled = False
        return self

    def __exit__(self, *exc):
        _GRAD_STATE.enabled = self._prev
        return False


class Tensor:
    """A dense array plus its place in the recorded differentiation graph."""

    __slots__ = ("data", "requires_grad", "_grad", "_parents", "_backward")

    def __init__(self, data, requires_grad: bool = False, dtype=None):
        arr = np.asarray(data, dtype=dtype)
        if arr.dtype not in (np.float32, np.float64):
            arr = arr.astype(np.float64)
        self.data = arr
        self.requires_grad = requires_grad
        self._grad: np.ndarray | None = None
        self._parents: tuple[Tensor, ...] = ()
        self._backward = None

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def grad(self) -> np.ndarray:
        if self._grad is None:
            return np.zeros_like(self.data)
        return self._grad

    def zero_grad(self) -> None:
        self._grad = None

    def item(self) -> float:
        return float(self.data)

    def __repr__(self) -> str:
        return f"Tensor(shape={self.data.shape}, requires_grad={self.requires_grad})"

    # Operators cover the small cases tests reach for; network code mostly
    # calls the module-level functions directly.
    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, other)

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __neg__(self):
        return scale(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    def sum(self):
        return tsum(self)

    def mean(self):
        return tmean(self)

    def reshape(self, shape):
        return reshape(self, shape)


def _result(data, parents, backward) -> Tensor:
    """Wrap an op result; ops on constants stay off the tape entirely."""
    out = Tensor(data)
    if _grad_enabled() and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = tuple(parents)
        out._backward = backward
    return out


def _suffix_axes(big: tuple[int, ...], small: tuple[int, ...]):
    """Leading axes to reduce when ``small`` broadcast against ``big``."""
    if big == small:
        return None
    if small == big[len(big) - len(small) :]:
        return tuple(range(len(big) - len(small)))
    raise ShapeMismatch(f"cannot broadcast {small} against {big}")


def add(a: Tensor, b) -> Tensor:
    if not isinstance(b, Tensor):
        av = a.data

        def back_scalar(g):
            return (g,)

        return _result(av + float(b), (a,), back_scalar)
    if b.data.ndim > a.data.ndim:
        return add(b, a)
    axes = _suffix_axes(a.shape, b.shape)

    def back(g):
        gb = g if axes is None else g.sum(axis=axes)
        return g, gb

    return _result(a.data + b.data, (a, b), back)


def sub(a: Tensor, b) -> Tensor:
    if not isinstance(b, Tensor):
        def back_scalar(g):
            return (g,)

        return _result(a.data - float(b), (a,), back_scalar)
    axes = _suffix_axes(a.shape, b.shape)

    def back(g):
        gb = -g if axes is None else -g.sum(axis=axes)
        return g, gb

    return _result(a.data - b.data, (a, b), back)


def mul(a: Tensor, b) -> Tensor:
    if not isinstance(b, Tensor):
        return scale(a, float(b))
    if b.data.ndim > a.data.ndim:
        return mul(b, a)
    axes = _suffix_axes(a.shape, b.shape)
    ad, bd = a.data, b.data

    def back(g):
        ga = g * bd
        gb = g * ad
        if axes is not None:
            gb = gb.sum(axis=axes)
        return ga, gb

    return _result(ad * bd, (a, b), back)


def scale(a: Tensor, s: float) -> Tensor:
    def back(g):
        return (g * s,)

    return _result(a.data * s, (a,), back)


def matmul(a: Tensor, b: Tensor) -> Tensor:
    if a.data.ndim != 2 or b.data.ndim != 2 or a.shape[1] != b.shape[0]:
        raise ShapeMismatch(f"matmul {a.shape} @ {b.shape}")
    ad, bd = a.data, b.data

    def back(g):
        return g @ bd.T, ad.T @ g

    return _result(ad @ bd, (a, b), back)


def relu(x: Tensor) -> Tensor:
    mask = x.data > 0

    def back(g):
        return (g * mask,)

    return _result(x.data * mask, (x,), back)


def tsum(x: Tensor) -> Tensor:
    shape = x.shape

    def back(g):
        return (np.broadcast_to(g, shape).copy(),)

    return _result(x.data.sum(), (x,), back)


def tmean(x: Tensor) -> Tensor:
    shape = x.shape
    n = x.data.size

    def back(g):
        return (np.broadcast_to(g / n, shape).copy(),)

    return _result(x.data.mean(), (x,), back)


def softmax(x: Tensor, axis: int = -1) -> Tensor:
    shifted = x.data - x.data.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    y = e / e.sum(axis=axis, keepdims=True)

    def back(g):
        return ((g - (g * y).sum(axis=axis, keepdims=True)) * y,)

    return _result(y, (x,), back)


def cross_entropy(logits: Tensor, targets, ignore_id: int = -1) -> Tensor:
    """Mean negative log-likelihood over positions not carrying ignore_id."""
    t = np.asarray(targets, dtype=np.int64)
    if logits.data.ndim != 2 or t.ndim != 1 or t.shape[0] != logits.shape[0]:
        raise ShapeMismatch(f"cross_entropy logits {logits.shape} targets {t.shape}")
    n_classes = logits.shape[1]
    valid = t != ignore_id
    if not valid.any():
        raise EmptyAfterIgnore("all target positions carry the ignore id")
    checked = t[valid]
    if checked.min() < 0 or checked.max() >= n_classes:
        raise IdOutOfRange(f"target outside [0, {n_classes})")
    x = logits.data
    m = x.max(axis=1, keepdims=True)
    lse = m[:, 0] + np.log(np.exp(x - m).sum(axis=1))
    rows = np.nonzero(valid)[0]
    n = rows.size
    nll = (lse[rows] - x[rows, t[rows]]).sum() / n

    def back(g):
        probs = np.exp(x - lse[:, None])
        gx = probs
        gx[rows, t[rows]] -= 1.0
        gx[~valid] = 0.0
        gx *= float(g) / n
        return (gx,)

    return _result(nll, (logits,), back)


def layer_norm(x: Tensor, gain: Tensor, bias: Tensor, eps: float = 1e-5) -> Tensor:
    """Normalize the last axis to zero mean and unit variance, then affine."""
    d = x.shape[-1]
    if gain.shape != (d,) or bias.shape != (d,):
        raise ShapeMismatch(f"layer_norm gain/bias must be ({d},)")
    mu = x.data.mean(axis=-1, keepdims=True)
    centered = x.data - mu
    var = (centered * centered).mean(axis=-1, keepdims=True)
    inv_std = 1.0 / np.sqrt(var + eps)
    xhat = centered * inv_std
    y = xhat * gain.data + bias.data
    lead = tuple(range(x.data.ndim - 1))
    gd = gain.data

    def back(g):
        dxhat = g * gd
        dx = (
            dxhat
            - dxhat.mean(axis=-1, keepdims=True)
            - xhat * (dxhat * xhat).mean(axis=-1, keepdims=True)
        ) * inv_std
        return dx, (g * xhat).sum(axis=lead), g.sum(axis=lead)

    return _result(y, (x, gain, bias), back)


def conv2d(
    x: Tensor,
    kernel: Tensor,
    bias: Tensor | None = None,
    stride: int = 1,
    pad: int = 0,
) -> Tensor:
    """Cross-correlation of [C_in, H, W] with [C_out, C_in, kh, kw]."""
    if x.data.ndim != 3 or kernel.data.ndim != 4:
        raise ShapeMismatch(f"conv2d x {x.shape} kernel {kernel.shape}")
    c_in, h, w = x.shape
    c_out, kc, kh, kw = kernel.shape
    if kc != c_in:
        raise ShapeMismatch(f"conv2d channels {c_in} vs kernel {kc}")
    if bias is not None and bias.shape != (c_out,):
        raise ShapeMismatch(f"conv2d bias must be ({c_out},)")
    h_out = (h + 2 * pad - kh) // stride + 1
    w_out = (w + 2 * pad - kw) // stride + 1
    if h_out < 1 or w_out < 1:
        raise ShapeMismatch(f"conv2d output would be {h_out}x{w_out}")
    xp = np.pad(x.data, ((0, 0), (pad, pad), (pad, pad))) if pad else x.data
    kd = kernel.data
    # im2col: one [C_out, C_in*kh*kw] x [C_in*kh*kw, H'*W'] product.
    windows = np.lib.stride_tricks.sliding_window_view(xp, (kh, kw), axis=(1, 2))
    windows = windows[:, ::stride, ::stride]  # [C_in, H', W', kh, kw]
    cols = np.ascontiguousarray(windows.transpose(0, 3, 4, 1, 2)).reshape(
        c_in * kh * kw, h_out * w_out
    )
    k2 = kd.reshape(c_out, c_in * kh * kw)
    out = (k2 @ cols).reshape(c_out, h_out, w_out)
    if bias is not None:
        out = out + bias.data[:, None, None]

    def back(g):
        g2 = g.reshape(c_out, -1)
        dk = (g2 @ cols.T).reshape(kd.shape)
        dcols = (k2.T @ g2).reshape(c_in, kh, kw, h_out, w_out)
        dxp = np.zeros_like(xp)
        for a in range(kh):
            for b in range(kw):
                dxp[
                    :,
                    a : a + stride * h_out : stride,
                    b : b + stride * w_out : stride,
                ] += dcols[:, a, b]
        dx = dxp[:, pad : pad + h, pad : pad + w] if pad else dxp
        if bias is not None:
            return dx, dk, g.sum(axis=(1, 2))
        return dx, dk

    parents = (x, kernel) if bias is None else (x, kernel, bias)
    return _result(out, parents, back)


def embed(table: Tensor, ids) -> Tensor:
    """Gather rows of an embedding table."""
    idx = np.asarray(ids, dtype=np.int64)
    if idx.ndim != 1:
        raise ShapeMismatch("embed ids must be 1-D")
    n_rows = table.shape[0]
    if idx.size and (idx.min() < 0 or idx.max() >= n_rows):
        raise IdOutOfRange(f"id outside [0, {n_rows})")
    shape = table.shape

    def back(g):
        dt = np.zeros(shape, dtype=g.dtype)
        np.add.at(dt, idx, g)
        return (dt,)

    return _result(table.data[idx], (table,), back)


def reshape(x: Tensor, shape) -> Tensor:
    old = x.shape

    def back(g):
        return (g.reshape(old),)

    return _result(x.data.reshape(shape), (x,), back)


def transpose_axes(x: Tensor, axes) -> Tensor:
    axes = tuple(axes)
    inverse = tuple(np.argsort(axes))

    def back(g):
        return (g.transpose(inverse),)

    return _result(x.data.transpose(axes), (x,), back)


def narrow(x: Tensor, axis: int, start: int, length: int) -> Tensor:
    index = [slice(None)] * x.data.ndim
    index[axis] = slice(start, start + length)
    index = tuple(index)
    shape = x.shape

    def back(g):
        dx = np.zeros(shape, dtype=g.dtype)
        dx[index] = g
        return (dx,)

    return _result(x.data[index].copy(), (x,), back)


def concat(tensors, axis: int = 0) -> Tensor:
    tensors = list(tensors)
    sizes = [t.shape[axis] for t in tensors]
    bounds = np.cumsum([0] + sizes)

    def back(g):
        outs = []
        index = [slice(None)] * g.ndim
        for k in range(len(sizes)):
            index[axis] = slice(bounds[k], bounds[k + 1])
            outs.append(g[tuple(index)].copy())
        return tuple(outs)

    return _result(np.concatenate([t.data for t in tensors], axis=axis), tensors, back)


def dropout(x: Tensor, p: float, rng: np.random.Generator | None) -> Tensor:
    """Inverted dropout; identity when rng is None (evaluation) or p == 0."""
    if rng is None or p <= 0.0:
        return x
    keep = (rng.random(x.shape) >= p) / (1.0 - p)

    def back(g):
        return (g * keep,)

    return _result(x.data * keep, (x,), back)


def backward(loss: Tensor) -> None:
    """Populate gradients of every leaf that the scalar loss depends on.

    Gradients accumulate across calls; reset with ``zero_grad``. The graph
    walk is iterative, so arbitrarily deep recorded graphs are fine.
    """
    if loss.data.size != 1:
        raise NotScalar(f"backward needs a scalar, got shape {loss.shape}")
    order: list[Tensor] = []
    seen: set[int] = set()
    stack: list[tuple[Tensor, bool]] = [(loss, False)]
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
    flowing: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
    for node in reversed(order):
        g = flowing.pop(id(node), None)
        if g is None:
            continue
        if node._backward is None:
            if node.requires_grad:
                node._grad = g if node._grad is None else node._grad + g
            continue
        for parent, pg in zip(node._parents, node._backward(g)):
            if pg is None or not parent.requires_grad:
                continue
            key = id(parent)
            if key in flowing:
                flowing[key] = flowing[key] + pg
            else:
                flowing[key] = pg


def zero_grad(params) -> None:
    for p in params.values() if isinstance(params, dict) else params:
        p.zero_grad()


def grad_check(f, params: dict[str, Tensor], h: float = 1e-5, tol: float = 1e-4) -> dict:
    """Compare recorded gradients of ``f()`` against central differences.

    ``f`` must be a deterministic closure over ``params`` returning a scalar
    Tensor. The reported relative error is the largest absolute deviation
    over the largest absolute finite-difference entry, per parameter and
    overall; the check passes iff the overall error is within ``tol``.
    """
    zero_grad(params)
    loss = f()
    backward(loss)
    analytic = {name: p.grad.copy() for name, p in params.items()}

    per_param: dict[str, float] = {}
    worst_diff = 0.0
    worst_ref = 0.0
    for name, p in params.items():
        p.data = np.ascontiguousarray(p.data)
        fd = np.zeros_like(p.data)
        flat = p.data.reshape(-1)
        fd_flat = fd.reshape(-1)
        with no_grad():
            for i in range(flat.size):
                saved = flat[i]
                flat[i] = saved + h
                up = float(f().data)
                flat[i] = saved - h
                down = float(f().data)
                flat[i] = saved
                fd_flat[i] = (up - down) / (2.0 * h)
        diff = float(np.abs(analytic[name] - fd).max()) if fd.size else 0.0
        ref = float(np.abs(fd).max()) if fd.size else 0.0
        per_param[name] = diff / (ref + 1e-12)
        worst_diff = max(worst_diff, diff)
        worst_ref = max(worst_ref, ref)
    max_rel_err = worst_diff / (worst_ref + 1e-12)
    return {
        "max_rel_err": max_rel_err,
        "per_param": per_param,
        "pass": max_rel_err <= tol,
        "h": h,
        "tol": tol,
        "n_params": int(sum(p.data.size for p in params.values())),
    }
