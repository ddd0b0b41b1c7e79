"""Minimal reverse-mode automatic differentiation over numpy arrays.

Only what the denoisers need: broadcasting arithmetic, matmul, GELU,
softmax, reshapes, gathers and NHWC convolutions.  Graphs are built
eagerly; :meth:`Tensor.backward` walks them in reverse topological order.
"""
import numpy as np
from numpy.lib.stride_tricks import sliding_window_view


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward")

    def __init__(self, data, requires_grad=False, parents=(), backward=None):
        self.data = np.asarray(data, dtype=np.float64)
        self.grad = None
        self.requires_grad = requires_grad
        self._parents = parents
        self._backward = backward

    @property
    def shape(self):
        return self.data.shape

    def __repr__(self):
        return f"Tensor(shape={self.data.shape}, requires_grad={self.requires_grad})"

    def _accumulate(self, g):
        if self.grad is None:
            self.grad = np.array(g, dtype=np.float64, copy=True)
        else:
            self.grad += g

    def backward(self, grad=None):
        order, seen = [], set()
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
        self._accumulate(np.ones_like(self.data) if grad is None else grad)
        for node in reversed(order):
            if node._backward is not None and node.grad is not None:
                node._backward(node.grad)
                if node._parents:
                    node.grad = None  # free intermediate gradients

    __add__ = lambda self, other: add(self, other)
    __radd__ = lambda self, other: add(other, self)
    __sub__ = lambda self, other: add(self, neg(as_tensor(other)))
    __rsub__ = lambda self, other: add(other, neg(self))
    __mul__ = lambda self, other: mul(self, other)
    __rmul__ = lambda self, other: mul(other, self)
    __neg__ = lambda self: neg(self)
    __matmul__ = lambda self, other: matmul(self, other)


def as_tensor(x):
    return x if isinstance(x, Tensor) else Tensor(x)


def _node(data, parents, backward):
    parents = tuple(p for p in parents if p.requires_grad)
    if not parents:
        return Tensor(data)
    return Tensor(data, True, parents, backward)


def _unbroadcast(g, shape):
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for ax, n in enumerate(shape):
        if n == 1 and g.shape[ax] != 1:
            g = g.sum(axis=ax, keepdims=True)
    return g


def add(a, b):
    a, b = as_tensor(a), as_tensor(b)

    def backward(g):
        if a.requires_grad:
            a._accumulate(_unbroadcast(g, a.shape))
        if b.requires_grad:
            b._accumulate(_unbroadcast(g, b.shape))

    return _node(a.data + b.data, (a, b), backward)


def neg(a):
    return _node(-a.data, (a,), lambda g: a._accumulate(-g))


def mul(a, b):
    a, b = as_tensor(a), as_tensor(b)

    def backward(g):
        if a.requires_grad:
            a._accumulate(_unbroadcast(g * b.data, a.shape))
        if b.requires_grad:
            b._accumulate(_unbroadcast(g * a.data, b.shape))

    return _node(a.data * b.data, (a, b), backward)


def matmul(a, b):
    """``a @ b`` where ``b`` is 2-D (weights) or both share batch dims."""
    a, b = as_tensor(a), as_tensor(b)

    def backward(g):
        if a.requires_grad:
            a._accumulate(_unbroadcast(g @ np.swapaxes(b.data, -1, -2), a.shape))
        if b.requires_grad:
            if b.data.ndim == 2:
                gb = a.data.reshape(-1, a.shape[-1]).T @ g.reshape(-1, g.shape[-1])
            else:
                gb = _unbroadcast(np.swapaxes(a.data, -1, -2) @ g, b.shape)
            b._accumulate(gb)

    return _node(a.data @ b.data, (a, b), backward)


def linear(x, weight, bias=None):
    out = matmul(x, weight)
    return out if bias is None else add(out, bias)


_GELU_C = np.sqrt(2.0 / np.pi)


def gelu(x):
    """tanh approximation of GELU."""
    xd = x.data
    x2 = xd * xd
    th = np.tanh(_GELU_C * xd * (1.0 + 0.044715 * x2))

    def backward(g):
        du = _GELU_C * (1.0 + 3 * 0.044715 * x2)
        x._accumulate(g * (0.5 * (1.0 + th) + 0.5 * xd * (1.0 - th * th) * du))

    return _node(0.5 * xd * (1.0 + th), (x,), backward)


def softmax(x, axis=-1):
    z = x.data - x.data.max(axis=axis, keepdims=True)
    e = np.exp(z)
    s = e / e.sum(axis=axis, keepdims=True)

    def backward(g):
        x._accumulate(s * (g - (g * s).sum(axis=axis, keepdims=True)))

    return _node(s, (x,), backward)


def sum_all(x):
    return _node(np.array(x.data.sum()), (x,), lambda g: x._accumulate(np.broadcast_to(g, x.shape)))


def mean_all(x):
    n = x.data.size
    return _node(np.array(x.data.mean()), (x,), lambda g: x._accumulate(np.broadcast_to(g / n, x.shape)))


def reshape(x, shape):
    return _node(x.data.reshape(shape), (x,), lambda g: x._accumulate(g.reshape(x.shape)))


def swapaxes(x, a1, a2):
    return _node(np.swapaxes(x.data, a1, a2), (x,), lambda g: x._accumulate(np.swapaxes(g, a1, a2)))


def concat(tensors, axis=-1):
    tensors = [as_tensor(t) for t in tensors]
    sizes = np.cumsum([t.shape[axis] for t in tensors])[:-1]

    def backward(g):
        for t, part in zip(tensors, np.split(g, sizes, axis=axis)):
            if t.requires_grad:
                t._accumulate(part)

    return _node(np.concatenate([t.data for t in tensors], axis=axis), tensors, backward)


def gather_rows(x, index):
    """``out[b, n] = x[b, index[b, n]]`` for ``x`` of shape ``(B, T, d)``."""
    batch = np.arange(x.shape[0])[:, None]

    def backward(g):
        gx = np.zeros_like(x.data)
        np.add.at(gx, (batch, index), g)
        x._accumulate(gx)

    return _node(x.data[batch, index], (x,), backward)


def avgpool2(x):
    """2x2 average pooling over the spatial axes of an NHWC tensor."""
    B, H, W, C = x.shape
    out = x.data.reshape(B, H // 2, 2, W // 2, 2, C).mean(axis=(2, 4))

    def backward(g):
        gx = np.repeat(np.repeat(g, 2, axis=1), 2, axis=2) * 0.25
        x._accumulate(gx)

    return _node(out, (x,), backward)


def upsample2(x):
    """Nearest-neighbour 2x upsampling of an NHWC tensor."""
    B, H, W, C = x.shape
    out = np.repeat(np.repeat(x.data, 2, axis=1), 2, axis=2)

    def backward(g):
        x._accumulate(g.reshape(B, H, 2, W, 2, C).sum(axis=(2, 4)))

    return _node(out, (x,), backward)


def _im2col(xp, k, H, W):
    """``(B, H+k-1, W+k-1, C)`` padded input to ``(B*H*W, k*k*C)`` patch rows."""
    B, C = xp.shape[0], xp.shape[3]
    cols = sliding_window_view(xp, (k, k), axis=(1, 2)).transpose(0, 1, 2, 4, 5, 3)
    return cols.reshape(B * H * W, k * k * C)


def conv2d(x, weight, bias=None):
    """Same-padded, stride-1 NHWC convolution; ``weight`` is ``(k, k, Cin, Cout)``."""
    x, weight = as_tensor(x), as_tensor(weight)
    k, _, cin, cout = weight.shape
    B, H, W, _ = x.shape
    pad = k // 2
    padding = ((0, 0), (pad, pad), (pad, pad), (0, 0))
    cols = _im2col(np.pad(x.data, padding), k, H, W)
    wmat = weight.data.reshape(k * k * cin, cout)
    out = (cols @ wmat).reshape(B, H, W, cout)

    def backward(g):
        gflat = g.reshape(B * H * W, cout)
        if weight.requires_grad:
            weight._accumulate((cols.T @ gflat).reshape(weight.shape))
        if x.requires_grad:
            # input gradient is a same-padded correlation with the flipped, transposed kernel
            wflip = weight.data[::-1, ::-1].transpose(0, 1, 3, 2).reshape(k * k * cout, cin)
            gx = _im2col(np.pad(g, padding), k, H, W) @ wflip
            x._accumulate(gx.reshape(B, H, W, cin))

    out_t = _node(out, (x, weight), backward)
    return out_t if bias is None else add(out_t, bias)
