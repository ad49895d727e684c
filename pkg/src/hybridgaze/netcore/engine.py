"""Array-level reverse-mode differentiation.

A :class:`Tensor` wraps an ndarray and remembers how it was produced.  Calling
:func:`backward` on a scalar result walks the recorded graph in reverse
topological order and accumulates ``.grad`` on every tensor that requires it.
Each op below pairs a numpy forward with its vector-Jacobian product.
"""

from __future__ import annotations

import numpy as np

from .. import geometry, heatmap, losses


class GraphUsageError(RuntimeError):
    """backward() called on something that is not a live forward result."""


class NonFiniteError(FloatingPointError):
    pass


class Tensor:
    __slots__ = ("data", "grad", "parents", "vjp", "requires_grad", "name")

    def __init__(self, data, parents=(), vjp=None, requires_grad=False, name=None):
        self.data = np.asarray(data)
        self.grad = None
        self.parents = tuple(parents)
        self.vjp = vjp
        self.requires_grad = requires_grad or any(p.requires_grad for p in self.parents)
        self.name = name

    @property
    def shape(self):
        return self.data.shape

    def __repr__(self):
        return f"Tensor(shape={self.shape}, name={self.name!r})"


def _node(data, parents, vjp):
    parents = tuple(parents)
    if any(p.requires_grad for p in parents):
        return Tensor(data, parents, vjp)
    return Tensor(data)


def constant(x, dtype=None) -> Tensor:
    return Tensor(np.asarray(x, dtype=dtype))


def parameter(x, name=None) -> Tensor:
    return Tensor(x, requires_grad=True, name=name)


def detach(t: Tensor) -> Tensor:
    return Tensor(t.data)


def _topological(root: Tensor):
    order, seen = [], set()
    stack = [(root, False)]
    while stack:
        node, done = stack.pop()
        if done:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for p in node.parents:
            if p.requires_grad and id(p) not in seen:
                stack.append((p, False))
    return order


def backward(root: Tensor, grad=None, check_finite: bool = True) -> None:
    """Accumulate d root / d t into ``t.grad`` for every tensor upstream of ``root``."""
    if not isinstance(root, Tensor):
        raise GraphUsageError("backward() needs the Tensor produced by a forward pass")
    if not root.requires_grad:
        raise GraphUsageError("result does not depend on any parameter; run forward first")
    if root.parents and root.vjp is None:
        raise GraphUsageError("graph already consumed by a previous backward(); run forward again")
    if grad is None:
        if root.data.size != 1:
            raise GraphUsageError("implicit gradient only defined for scalar results")
        grad = np.ones_like(root.data)
    order = _topological(root)
    for node in order:
        if node.parents:
            node.grad = None
    root.grad = np.asarray(grad, dtype=root.data.dtype)
    for node in reversed(order):
        if node.vjp is None or node.grad is None:
            continue
        grads = node.vjp(node.grad)
        for parent, g in zip(node.parents, grads):
            if g is None or not parent.requires_grad:
                continue
            if check_finite and not np.all(np.isfinite(g)):
                raise NonFiniteError(f"non-finite gradient flowing into {parent!r}")
            g = np.asarray(g, dtype=parent.data.dtype)
            if g.shape != parent.data.shape:
                g = _unbroadcast(g, parent.data.shape)
            parent.grad = g if parent.grad is None else parent.grad + g
        if node.parents:
            # release intermediate buffers once consumed
            node.vjp = None


def _unbroadcast(g, shape):
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for ax, n in enumerate(shape):
        if n == 1 and g.shape[ax] != 1:
            g = g.sum(axis=ax, keepdims=True)
    return g


# ---------------------------------------------------------------------------
# elementwise and shape ops

def add(a: Tensor, b: Tensor) -> Tensor:
    return _node(a.data + b.data, (a, b), lambda g: (g, g))


def add_scalar(a: Tensor, c: float) -> Tensor:
    return _node(a.data + c, (a,), lambda g: (g,))


def scale(a: Tensor, c: float) -> Tensor:
    return _node(a.data * c, (a,), lambda g: (g * c,))


def weighted_sum(terms) -> Tensor:
    """``sum(w * t)`` over ``(weight, Tensor)`` pairs."""
    terms = list(terms)
    value = sum(w * t.data for w, t in terms)
    return _node(np.asarray(value), [t for _, t in terms],
                 lambda g: tuple(w * g for w, _ in terms))


def relu(x: Tensor) -> Tensor:
    mask = x.data > 0
    return _node(x.data * mask, (x,), lambda g: (g * mask,))


def softplus(x: Tensor) -> Tensor:
    out = np.logaddexp(0, x.data)
    return _node(out.astype(x.data.dtype), (x,),
                 lambda g: (g * (1.0 / (1.0 + np.exp(-x.data))),))


def transpose(x: Tensor, axes) -> Tensor:
    inv = np.argsort(axes)
    return _node(np.transpose(x.data, axes), (x,), lambda g: (np.transpose(g, inv),))


def take(x: Tensor, index, axis: int) -> Tensor:
    """Select a single index along ``axis`` (axis is dropped)."""
    out = np.take(x.data, index, axis=axis)

    def vjp(g):
        full = np.zeros_like(x.data)
        sl = [slice(None)] * x.data.ndim
        sl[axis] = index
        full[tuple(sl)] = g
        return (full,)
    return _node(out, (x,), vjp)


def sum_last(x: Tensor) -> Tensor:
    return _node(x.data.sum(axis=-1), (x,),
                 lambda g: (np.broadcast_to(g[..., None], x.data.shape),))


# ---------------------------------------------------------------------------
# network layers (NHWC)

def conv2d(x: Tensor, w: Tensor, b: Tensor, stride: int = 1, pad: int = 1) -> Tensor:
    """2-D cross-correlation; ``x`` is (N, H, W, C) and ``w`` is (k, k, C, O).

    Accumulates one matmul per kernel tap, which beats a single im2col matmul
    for the narrow channel counts used here.
    """
    xd = x.data
    n, h, wd, c = xd.shape
    k, _, _, o = w.data.shape
    ho = (h + 2 * pad - k) // stride + 1
    wo = (wd + 2 * pad - k) // stride + 1
    xp = np.pad(xd, ((0, 0), (pad, pad), (pad, pad), (0, 0))) if pad else xd

    def tap(i, j):
        return (slice(None), slice(i, i + stride * (ho - 1) + 1, stride),
                slice(j, j + stride * (wo - 1) + 1, stride), slice(None))

    taps = [(i, j, np.ascontiguousarray(xp[tap(i, j)]).reshape(-1, c))
            for i in range(k) for j in range(k)]
    out = np.broadcast_to(b.data, (n * ho * wo, o)).copy()
    for i, j, cols in taps:
        out += cols @ w.data[i, j]
    out = out.reshape(n, ho, wo, o)

    def vjp(g):
        g2 = g.reshape(-1, o)
        dw = np.empty_like(w.data)
        for i, j, cols in taps:
            dw[i, j] = cols.T @ g2
        db = g2.sum(axis=0)
        dx = None
        if x.requires_grad:
            dxp = np.zeros_like(xp)
            for i, j, _ in taps:
                dxp[tap(i, j)] += (g2 @ w.data[i, j].T).reshape(n, ho, wo, c)
            dx = dxp[:, pad:pad + h, pad:pad + wd, :] if pad else dxp
        return dx, dw, db
    return _node(out, (x, w, b), vjp)


def upsample2x(x: Tensor) -> Tensor:
    """Nearest-neighbour 2x upsampling of an (N, H, W, C) tensor."""
    out = x.data.repeat(2, axis=1).repeat(2, axis=2)
    n, h, w, c = x.data.shape
    return _node(out, (x,), lambda g: (g.reshape(n, h, 2, w, 2, c).sum(axis=(2, 4)),))


def global_avg_pool(x: Tensor) -> Tensor:
    n, h, w, c = x.data.shape
    return _node(x.data.mean(axis=(1, 2)), (x,),
                 lambda g: (np.broadcast_to(g[:, None, None, :] / (h * w), x.data.shape),))


def flatten(x: Tensor) -> Tensor:
    shape = x.data.shape
    return _node(x.data.reshape(shape[0], -1), (x,), lambda g: (g.reshape(shape),))


def linear(x: Tensor, w: Tensor, b: Tensor) -> Tensor:
    out = x.data @ w.data + b.data
    return _node(out, (x, w, b),
                 lambda g: (g @ w.data.T, x.data.T @ g, g.sum(axis=0)))


# ---------------------------------------------------------------------------
# heatmap decoding and geometry

def spatial_softmax(logits: Tensor) -> Tensor:
    probs = heatmap.spatial_softmax(logits.data)
    return _node(probs, (logits,), lambda g: (heatmap.spatial_softmax_vjp(probs, g),))


def soft_argmax(probs: Tensor, scale: float = 1.0) -> Tensor:
    res = probs.data.shape[-2:]
    return _node(heatmap.soft_argmax(probs.data, scale), (probs,),
                 lambda g: (heatmap.soft_argmax_vjp(g, res, scale),))


def reconstruct_gaze(landmarks: Tensor, radius: Tensor) -> Tensor:
    """(theta, phi) from decoded landmarks (N, 10, 2) and radius (N, 1)."""
    iris = landmarks.data[:, 0, :]
    eye = landmarks.data[:, 1, :]
    r = radius.data[:, 0]
    out = geometry.reconstruct_gaze(iris, eye, r).astype(landmarks.data.dtype)

    def vjp(g):
        jac = geometry.recon_jacobian(iris, eye, r)
        d = np.einsum("nk,nkj->nj", g, jac)
        dl = np.zeros(landmarks.data.shape)
        dl[:, 0, :] = d[:, 0:2]
        dl[:, 1, :] = d[:, 2:4]
        return dl, d[:, 4:5]
    return _node(out, (landmarks, radius), vjp)


# ---------------------------------------------------------------------------
# losses (per-sample outputs, shape (N,))

def heatmap_l1(probs: Tensor, target) -> Tensor:
    loss, sign = heatmap.heatmap_loss(probs.data, target)
    return _node(loss, (probs,), lambda g: (g[:, None, None, None] * sign,))


def abs_diff(pred: Tensor, target) -> Tensor:
    diff = pred.data - np.asarray(target, dtype=pred.data.dtype)
    return _node(np.abs(diff), (pred,), lambda g: (g * np.sign(diff),))


def uncertainty_loss(residual: Tensor, alpha: Tensor) -> Tensor:
    loss, d_res, d_alpha = losses.uncertainty_gaze_loss(residual.data, alpha.data)
    dt = residual.data.dtype
    return _node(loss.astype(dt), (residual, alpha),
                 lambda g: (g[:, None] * d_res, g[:, None] * d_alpha))


def masked_mean(x: Tensor, mask) -> Tensor:
    """Mean over the samples selected by ``mask``; exactly 0 (no gradient) when none are."""
    mask = np.asarray(mask, dtype=bool)
    cnt = int(mask.sum())
    if cnt == 0:
        return Tensor(np.zeros((), dtype=x.data.dtype))
    w = mask.astype(x.data.dtype) / cnt
    return _node(np.asarray((x.data * w).sum()), (x,), lambda g: (g * w,))
