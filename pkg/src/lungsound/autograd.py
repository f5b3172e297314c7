"""Small reverse-mode autodiff over numpy arrays.

Each op builds an output ``Tensor`` holding a closure that pushes the output
gradient back into its parents.  ``Tensor.backward`` walks the graph in
reverse topological order.  Only the handful of ops the respiratory network
needs are provided; convolutions use channels-last (NHWC) layout.
"""

import numpy as np


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward", "name")

    def __init__(self, data, requires_grad=False, _parents=(), name=None):
        self.data = np.asarray(data)
        self.grad = None
        self.requires_grad = requires_grad
        self._parents = _parents
        self._backward = None
        self.name = name

    @property
    def shape(self):
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    def __repr__(self):
        return f"Tensor(shape={self.data.shape}, dtype={self.data.dtype}, name={self.name!r})"

    def backward(self, grad=None):
        """Accumulate d(self)/d(leaf) into ``.grad`` of every reachable tensor."""
        if grad is None:
            if self.data.size != 1:
                raise ValueError("backward() on a non-scalar tensor needs an explicit gradient")
            grad = np.ones_like(self.data)
        grad = np.asarray(grad, dtype=self.data.dtype)
        if grad.shape != self.data.shape:
            raise ValueError(f"gradient shape {grad.shape} does not match tensor shape {self.data.shape}")

        order = []
        seen = set()
        stack = [(self, False)]
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

        self.grad = grad if self.grad is None else self.grad + grad
        for node in reversed(order):
            if node._backward is not None and node.grad is not None:
                node._backward(node.grad)

    # operator sugar
    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return add(self, neg(as_tensor(other, self.dtype)))

    def __rsub__(self, other):
        return add(as_tensor(other, self.dtype), neg(self))

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, idx):
        return getitem(self, idx)


def as_tensor(x, dtype=None):
    if isinstance(x, Tensor):
        return x
    return Tensor(np.asarray(x, dtype=dtype))


def _accum(t, g):
    if not t.requires_grad:
        return
    t.grad = g if t.grad is None else t.grad + g


def _unbroadcast(g, shape):
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for axis, n in enumerate(shape):
        if n == 1 and g.shape[axis] != 1:
            g = g.sum(axis=axis, keepdims=True)
    return g


def _result(data, parents, backward):
    parents = tuple(parents)
    out = Tensor(data, requires_grad=any(p.requires_grad for p in parents), _parents=parents)
    if out.requires_grad:
        out._backward = backward
    return out


def add(a, b):
    a = as_tensor(a)
    b = as_tensor(b, a.dtype)

    def backward(g):
        _accum(a, _unbroadcast(g, a.shape))
        _accum(b, _unbroadcast(g, b.shape))

    return _result(a.data + b.data, (a, b), backward)


def neg(a):
    def backward(g):
        _accum(a, -g)

    return _result(-a.data, (a,), backward)


def mul(a, b):
    a = as_tensor(a)
    b = as_tensor(b, a.dtype)

    def backward(g):
        if a.requires_grad:
            _accum(a, _unbroadcast(g * b.data, a.shape))
        if b.requires_grad:
            _accum(b, _unbroadcast(g * a.data, b.shape))

    return _result(a.data * b.data, (a, b), backward)


def matmul(a, b):
    """Matrix product; ``a`` may carry leading batch axes, ``b`` is 2-D or matches them."""

    def backward(g):
        if a.requires_grad:
            _accum(a, _unbroadcast(g @ np.swapaxes(b.data, -1, -2), a.shape))
        if b.requires_grad:
            if b.data.ndim == 2 and a.data.ndim > 2:
                gb = a.data.reshape(-1, a.shape[-1]).T @ g.reshape(-1, g.shape[-1])
            else:
                gb = _unbroadcast(np.swapaxes(a.data, -1, -2) @ g, b.shape)
            _accum(b, gb)

    return _result(a.data @ b.data, (a, b), backward)


def sum(a, axis=None, keepdims=False):
    def backward(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        _accum(a, np.broadcast_to(g, a.shape).copy())

    return _result(a.data.sum(axis=axis, keepdims=keepdims), (a,), backward)


def mean(a, axis=None, keepdims=False):
    n = a.data.size if axis is None else np.prod([a.shape[i] for i in np.atleast_1d(axis)])
    return mul(sum(a, axis=axis, keepdims=keepdims), np.asarray(1.0 / n, dtype=a.dtype))


def reshape(a, shape):
    def backward(g):
        _accum(a, g.reshape(a.shape))

    return _result(a.data.reshape(shape), (a,), backward)


def transpose(a, axes):
    inverse = np.argsort(axes)

    def backward(g):
        _accum(a, np.transpose(g, inverse))

    return _result(np.transpose(a.data, axes), (a,), backward)


def getitem(a, idx):
    def backward(g):
        full = np.zeros_like(a.data)
        np.add.at(full, idx, g) if _fancy(idx) else full.__setitem__(idx, g)
        _accum(a, full)

    # contiguous copy: negative-stride views drop numpy matmul off its BLAS path
    return _result(np.ascontiguousarray(a.data[idx]), (a,), backward)


def _fancy(idx):
    items = idx if isinstance(idx, tuple) else (idx,)
    return any(isinstance(i, (list, np.ndarray)) for i in items)


def concat(tensors, axis=-1):
    tensors = [as_tensor(t) for t in tensors]
    sizes = [t.shape[axis] for t in tensors]
    bounds = np.cumsum([0] + sizes)

    def backward(g):
        for t, lo, hi in zip(tensors, bounds[:-1], bounds[1:]):
            if t.requires_grad:
                sl = [slice(None)] * g.ndim
                sl[axis] = slice(lo, hi)
                _accum(t, g[tuple(sl)])

    return _result(np.concatenate([t.data for t in tensors], axis=axis), tensors, backward)


def stack(tensors, axis=0):
    tensors = list(tensors)

    def backward(g):
        for i, t in enumerate(tensors):
            if t.requires_grad:
                _accum(t, np.take(g, i, axis=axis))

    return _result(np.stack([t.data for t in tensors], axis=axis), tensors, backward)


def exp(a):
    out = np.exp(a.data)

    def backward(g):
        _accum(a, g * out)

    return _result(out, (a,), backward)


def log(a, floor=None):
    """Natural log; values below ``floor`` are clamped and receive zero gradient."""
    x = a.data if floor is None else np.maximum(a.data, floor)

    def backward(g):
        gx = g / x
        if floor is not None:
            gx = np.where(a.data >= floor, gx, 0)
        _accum(a, gx)

    return _result(np.log(x), (a,), backward)


def tanh(a):
    out = np.tanh(a.data)

    def backward(g):
        _accum(a, g * (1 - out * out))

    return _result(out, (a,), backward)


def sigmoid(a):
    out = 0.5 * (1 + np.tanh(0.5 * a.data))

    def backward(g):
        _accum(a, g * out * (1 - out))

    return _result(out, (a,), backward)


def relu(a):
    mask = a.data > 0

    def backward(g):
        _accum(a, g * mask)

    return _result(a.data * mask, (a,), backward)


def softmax(a, axis=-1):
    z = a.data - a.data.max(axis=axis, keepdims=True)
    e = np.exp(z)
    out = e / e.sum(axis=axis, keepdims=True)

    def backward(g):
        _accum(a, out * (g - (g * out).sum(axis=axis, keepdims=True)))

    return _result(out, (a,), backward)


def dropout(a, rate, rng):
    """Inverted dropout; identity when ``rng`` is None or ``rate`` is 0."""
    if rng is None or rate <= 0:
        return a
    keep = (rng.random(a.shape) >= rate).astype(a.dtype) / (1 - rate)
    return mul(a, Tensor(keep))


def _im2col(xp, k, h, w):
    # xp: (N, H+k-1, W+k-1, C) -> (N*H*W, k*k*C), kernel-offset-major then channel
    n, _, _, c = xp.shape
    cols = np.empty((n, h, w, k, k, c), dtype=xp.dtype)
    for di in range(k):
        for dj in range(k):
            cols[:, :, :, di, dj, :] = xp[:, di:di + h, dj:dj + w, :]
    return cols.reshape(n * h * w, k * k * c)


def conv2d(x, w, b):
    """'Same' 2-D convolution (cross-correlation), stride 1.

    x: (N, H, W, C_in); w: (k, k, C_in, C_out); b: (C_out,).
    """
    n, h, wd, c = x.shape
    k = w.shape[0]
    p = k // 2
    xp = np.pad(x.data, ((0, 0), (p, p), (p, p), (0, 0)))
    cols = _im2col(xp, k, h, wd)
    wmat = w.data.reshape(k * k * c, -1)
    out = (cols @ wmat).reshape(n, h, wd, -1) + b.data

    def backward(g):
        g2 = g.reshape(-1, g.shape[-1])
        if w.requires_grad:
            _accum(w, (cols.T @ g2).reshape(w.shape))
        if b.requires_grad:
            _accum(b, g2.sum(axis=0))
        if x.requires_grad:
            dcols = (g2 @ wmat.T).reshape(n, h, wd, k, k, c)
            dxp = np.zeros_like(xp)
            for di in range(k):
                for dj in range(k):
                    dxp[:, di:di + h, dj:dj + wd, :] += dcols[:, :, :, di, dj, :]
            _accum(x, dxp[:, p:p + h, p:p + wd, :])

    return _result(out, (x, w, b), backward)


def max_pool2d(x, size=2):
    """Non-overlapping max pool over axes 1 and 2 (NHWC); trailing remainder dropped.

    Ties route the gradient to the first maximal element in row-major window order.
    """
    h, w = x.shape[1], x.shape[2]
    ho, wo = h // size, w // size
    views = [
        (di, dj, x.data[:, di:ho * size:size, dj:wo * size:size, :])
        for di in range(size)
        for dj in range(size)
    ]
    out = views[0][2].copy()
    for _, _, v in views[1:]:
        np.maximum(out, v, out=out)
    masks = []
    taken = np.zeros(out.shape, dtype=bool)
    for di, dj, v in views:
        m = (v == out) & ~taken
        taken |= m
        masks.append((di, dj, m))

    def backward(g):
        gx = np.zeros_like(x.data)
        for di, dj, m in masks:
            gx[:, di:ho * size:size, dj:wo * size:size, :] = g * m
        _accum(x, gx)

    return _result(out, (x,), backward)


def batch_norm(x, gamma, beta, running_mean, running_var, train, eps=1e-5):
    """Normalize over every axis but the last.

    In train mode batch statistics are used and returned alongside the output
    so the caller can fold them into its running averages; in eval mode the
    running statistics are used and ``None`` is returned for the batch stats.
    """
    axes = tuple(range(x.data.ndim - 1))
    if train:
        mu = x.data.mean(axis=axes)
        var = x.data.var(axis=axes)
    else:
        mu, var = running_mean, running_var
    inv = 1.0 / np.sqrt(var + eps)
    xhat = (x.data - mu) * inv
    out = gamma.data * xhat + beta.data
    m = x.data.size // x.shape[-1]

    def backward(g):
        if gamma.requires_grad:
            _accum(gamma, (g * xhat).sum(axis=axes))
        if beta.requires_grad:
            _accum(beta, g.sum(axis=axes))
        if x.requires_grad:
            gx_hat = g * gamma.data
            if train:
                gx = inv / m * (m * gx_hat - gx_hat.sum(axis=axes) - xhat * (gx_hat * xhat).sum(axis=axes))
            else:
                gx = gx_hat * inv
            _accum(x, gx.astype(x.dtype, copy=False))

    out = _result(out.astype(x.dtype, copy=False), (x, gamma, beta), backward)
    return out, ((mu, var) if train else None)
