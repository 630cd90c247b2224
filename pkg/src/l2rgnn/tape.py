"""Reverse-mode automatic differentiation on numpy arrays.

A small tape: just the operations needed for message-passing forward
passes, weighted cross-entropy, and the random-Fourier cross-covariance
penalty. Gradients are exact for the recorded computation; correctness is
pinned by central finite differences in the test suite. This is not a
general-purpose autodiff system.
"""
from __future__ import annotations

import numpy as np


class Tensor:
    """Node in the computation graph.

    Leaf tensors created directly (``Tensor(x)``) are trainable parameters.
    Constants are either raw numpy arrays passed into ops, or tensors built
    with ``requires=False`` (see :func:`constant` / :func:`stop_grad`).
    """

    __slots__ = ("data", "grad", "_parents", "_vjps")

    def __init__(self, data, requires=True, _parents=(), _vjps=()):
        self.data = np.asarray(data, dtype=np.float64)
        self.grad = None
        # _parents holds only ancestors that need gradients; None marks a
        # constant, () a trainable leaf.
        self._parents = _parents if (requires or _parents) else None
        self._vjps = _vjps

    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    @property
    def requires_grad(self):
        return self._parents is not None

    def item(self):
        return float(self.data)

    def __repr__(self):
        return f"Tensor(shape={self.data.shape}, requires={self.requires_grad})"

    # operator sugar
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

    def __matmul__(self, other):
        return matmul(self, other)

    def __neg__(self):
        return mul(self, -1.0)

    def __getitem__(self, key):
        return getitem(self, key)


def constant(x):
    """Wrap data as a non-differentiable tensor."""
    return Tensor(x, requires=False)


def stop_grad(t):
    """Detach: same values, no gradient flow."""
    return Tensor(_data(t), requires=False)


def _data(x):
    if isinstance(x, Tensor):
        return x.data
    return np.asarray(x, dtype=np.float64)


def _node(out, pairs):
    """Build an op output; keep only parents that need gradients."""
    live = tuple((p, f) for p, f in pairs if isinstance(p, Tensor) and p.requires_grad)
    if not live:
        return Tensor(out, requires=False)
    parents, vjps = zip(*live)
    return Tensor(out, _parents=parents, _vjps=vjps)


def _unbroadcast(g, shape):
    """Sum gradient g down to the given broadcasted-input shape."""
    if g.shape == shape:
        return g
    extra = g.ndim - len(shape)
    if extra > 0:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, s in enumerate(shape) if s == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g


# ---------------------------------------------------------------------------
# arithmetic


def add(a, b):
    ad, bd = _data(a), _data(b)
    return _node(ad + bd, [
        (a, lambda g: _unbroadcast(g, ad.shape)),
        (b, lambda g: _unbroadcast(g, bd.shape)),
    ])


def sub(a, b):
    ad, bd = _data(a), _data(b)
    return _node(ad - bd, [
        (a, lambda g: _unbroadcast(g, ad.shape)),
        (b, lambda g: _unbroadcast(-g, bd.shape)),
    ])


def mul(a, b):
    ad, bd = _data(a), _data(b)
    return _node(ad * bd, [
        (a, lambda g: _unbroadcast(g * bd, ad.shape)),
        (b, lambda g: _unbroadcast(g * ad, bd.shape)),
    ])


def div(a, b):
    ad, bd = _data(a), _data(b)
    return _node(ad / bd, [
        (a, lambda g: _unbroadcast(g / bd, ad.shape)),
        (b, lambda g: _unbroadcast(-g * ad / (bd * bd), bd.shape)),
    ])


def matmul(a, b):
    """Matrix product; supports stacked (batched) operands, ndim >= 2."""
    ad, bd = _data(a), _data(b)
    if ad.ndim < 2 or bd.ndim < 2:
        raise ValueError("matmul operands must have ndim >= 2")
    out = ad @ bd
    return _node(out, [
        (a, lambda g: _unbroadcast(g @ bd.swapaxes(-1, -2), ad.shape)),
        (b, lambda g: _unbroadcast(ad.swapaxes(-1, -2) @ g, bd.shape)),
    ])


def transpose(a):
    """Swap the last two axes."""
    ad = _data(a)
    return _node(ad.swapaxes(-1, -2), [(a, lambda g: g.swapaxes(-1, -2))])


def permute(a, axes):
    ad = _data(a)
    inverse = np.argsort(axes)
    return _node(ad.transpose(axes), [(a, lambda g: g.transpose(inverse))])


def masked_pair_frobenius(cu, cv, mask, scale):
    """Sum over variable pairs of squared Frobenius norms of feature
    cross-covariances, computed for all pairs at once.

    cu, cv: (d, N, n_feat) stacked centered feature maps per variable;
    mask: (d, d) constant pair weights (usually 0/1 over i < j);
    scale: 1/(N-1). Returns the scalar
    sum_ij mask[i,j] * || scale * cu[i]^T cv[j] ||_F^2.
    """
    cud, cvd = _data(cu), _data(cv)
    mask = np.asarray(mask, dtype=np.float64)
    sig = np.einsum("ina,jnb->ijab", cud, cvd, optimize=True) * scale
    out = float(np.einsum("ij,ijab->", mask, sig * sig))

    def vjp_cu(g):
        coeff = (2.0 * scale * g) * mask[:, :, None, None] * sig
        return np.einsum("ijab,jnb->ina", coeff, cvd, optimize=True)

    def vjp_cv(g):
        coeff = (2.0 * scale * g) * mask[:, :, None, None] * sig
        return np.einsum("ijab,ina->jnb", coeff, cud, optimize=True)

    return _node(np.float64(out), [(cu, vjp_cu), (cv, vjp_cv)])


def reshape(a, shape):
    ad = _data(a)
    return _node(ad.reshape(shape), [(a, lambda g: g.reshape(ad.shape))])


def concat(parts, axis=0):
    datas = [_data(p) for p in parts]
    out = np.concatenate(datas, axis=axis)
    sizes = [d.shape[axis] for d in datas]
    offsets = np.cumsum([0] + sizes)

    def make_vjp(i):
        sl = [slice(None)] * out.ndim
        sl[axis] = slice(offsets[i], offsets[i + 1])
        sl = tuple(sl)
        return lambda g: g[sl]

    return _node(out, [(p, make_vjp(i)) for i, p in enumerate(parts)])


def getitem(a, key):
    ad = _data(a)
    out = ad[key]

    def vjp(g):
        z = np.zeros_like(ad)
        np.add.at(z, key, g)
        return z

    return _node(out, [(a, vjp)])


def slice_cols(a, j0, j1):
    """Contiguous column slice a[:, j0:j1] of a 2-D tensor."""
    ad = _data(a)
    out = ad[:, j0:j1]

    def vjp(g):
        z = np.zeros_like(ad)
        z[:, j0:j1] = g
        return z

    return _node(out, [(a, vjp)])


# ---------------------------------------------------------------------------
# reductions


def sum_(a, axis=None, keepdims=False):
    ad = _data(a)
    out = ad.sum(axis=axis, keepdims=keepdims)

    def vjp(g):
        if axis is None:
            return np.broadcast_to(g, ad.shape).copy()
        gg = g if keepdims else np.expand_dims(g, axis)
        return np.broadcast_to(gg, ad.shape).copy()

    return _node(out, [(a, vjp)])


def mean_(a, axis=None, keepdims=False):
    ad = _data(a)
    n = ad.size if axis is None else ad.shape[axis]
    out = ad.mean(axis=axis, keepdims=keepdims)

    def vjp(g):
        if axis is None:
            return np.broadcast_to(g / n, ad.shape).copy()
        gg = g if keepdims else np.expand_dims(g, axis)
        return np.broadcast_to(gg / n, ad.shape).copy()

    return _node(out, [(a, vjp)])


# ---------------------------------------------------------------------------
# nonlinearities


def relu(a):
    ad = _data(a)
    mask = ad > 0
    return _node(np.where(mask, ad, 0.0), [(a, lambda g: g * mask)])


def cos_(a):
    ad = _data(a)
    return _node(np.cos(ad), [(a, lambda g: -g * np.sin(ad))])


def softplus(a):
    """log(1 + exp(x)), numerically stable; gradient is the logistic sigmoid."""
    ad = _data(a)
    out = np.logaddexp(0.0, ad)
    e = np.exp(-np.abs(ad))
    sig = np.where(ad >= 0, 1.0 / (1.0 + e), e / (1.0 + e))
    return _node(out, [(a, lambda g: g * sig)])


def logsumexp(a, axis=-1):
    ad = _data(a)
    m = ad.max(axis=axis, keepdims=True)
    e = np.exp(ad - m)
    s = e.sum(axis=axis, keepdims=True)
    out = (m + np.log(s)).squeeze(axis)
    soft = e / s

    def vjp(g):
        return np.expand_dims(g, axis) * soft

    return _node(out, [(a, vjp)])


def select_index(a, idx):
    """Pick out[i] = a[i, idx[i]] for a 2-D tensor and integer index vector."""
    ad = _data(a)
    idx = np.asarray(idx, dtype=np.intp)
    rows = np.arange(ad.shape[0])
    out = ad[rows, idx]

    def vjp(g):
        z = np.zeros_like(ad)
        z[rows, idx] = g
        return z

    return _node(out, [(a, vjp)])


# ---------------------------------------------------------------------------
# backward pass


def backward(loss):
    """Accumulate gradients of a scalar loss into every reachable tensor."""
    if loss.data.ndim != 0:
        raise ValueError("backward expects a scalar loss")
    if not loss.requires_grad:
        return

    # iterative post-order topological sort over the live subgraph
    topo = []
    seen = set()
    stack = [(loss, False)]
    while stack:
        t, expanded = stack.pop()
        if expanded:
            topo.append(t)
            continue
        if id(t) in seen:
            continue
        seen.add(id(t))
        stack.append((t, True))
        for p in t._parents:
            if p.requires_grad and id(p) not in seen:
                stack.append((p, False))

    loss.grad = np.ones_like(loss.data)
    for t in reversed(topo):
        g = t.grad
        if g is None:
            continue
        for p, vjp in zip(t._parents, t._vjps):
            if not p.requires_grad:
                continue
            pg = vjp(g)
            p.grad = pg if p.grad is None else p.grad + pg


def zero_grads(params):
    for t in params:
        t.grad = None
