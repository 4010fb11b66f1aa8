"""Reverse-mode automatic differentiation over numpy arrays.

A ``Tensor`` wraps an ndarray together with the recipe that produced it.
Calling :meth:`Tensor.backward` on a scalar walks the recorded graph in
reverse topological order and accumulates gradients into every tensor
created with ``requires_grad=True``.

The engine is deliberately small: it implements exactly the operations the
training losses and networks need, nothing more.  All ops are dtype-neutral
so the same code runs in float32 (training, matching the 32-bit checkpoint
format) and float64 (gradient verification against finite differences).
"""

from __future__ import annotations

import numpy as np

__all__ = [
    "Tensor",
    "tensor",
    "parameter",
    "add",
    "mul",
    "matmul",
    "total",
    "log",
    "exp",
    "expm1",
    "log1p",
    "sigmoid",
    "relu",
    "clip",
    "softmax",
    "euclidean_distance",
    "conv2d",
    "max_pool2d",
    "batch_norm2d",
]


class Tensor:
    """An ndarray with an optional gradient and backward recipe."""

    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward")

    def __init__(self, data, requires_grad: bool = False, dtype=None):
        self.data = np.asarray(data, dtype=dtype)
        self.grad = None
        self.requires_grad = bool(requires_grad)
        self._parents = ()
        self._backward = None

    # -- introspection -------------------------------------------------

    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def size(self):
        return self.data.size

    def item(self) -> float:
        return float(self.data)

    def __repr__(self):
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.data.shape}, dtype={self.data.dtype}{flag})"

    # -- graph management ----------------------------------------------

    def detach(self) -> "Tensor":
        """A view of the same data with the graph cut."""
        return Tensor(self.data)

    def zero_grad(self) -> None:
        self.grad = None

    def backward(self, grad=None) -> None:
        """Accumulate d(self)/d(leaf) into every reachable leaf's ``.grad``."""
        if not self.requires_grad:
            raise RuntimeError("backward() on a tensor that does not require grad")
        if grad is None:
            if self.data.size != 1:
                raise RuntimeError("backward() without an explicit gradient "
                                   "requires a scalar tensor")
            grad = np.ones_like(self.data)
        # Iterative post-order topological sort; recursion would overflow on
        # deep per-step graphs.
        topo: list[Tensor] = []
        seen: set[int] = set()
        stack: list[tuple[Tensor, bool]] = [(self, False)]
        while stack:
            node, expanded = stack.pop()
            if expanded:
                topo.append(node)
                continue
            if id(node) in seen:
                continue
            seen.add(id(node))
            stack.append((node, True))
            for p in node._parents:
                if id(p) not in seen:
                    stack.append((p, False))
        self.grad = grad if self.grad is None else self.grad + grad
        for node in reversed(topo):
            if node._backward is not None and node.grad is not None:
                node._backward(node.grad)

    # -- operator sugar --------------------------------------------------

    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __neg__(self):
        return mul(self, -1.0)

    def __sub__(self, other):
        return add(self, mul(other, -1.0) if isinstance(other, Tensor) else -other)

    def __rsub__(self, other):
        return add(mul(self, -1.0), other)

    def __truediv__(self, other):
        if isinstance(other, Tensor):
            return mul(self, power(other, -1.0))
        return mul(self, 1.0 / other)

    def __matmul__(self, other):
        return matmul(self, other)

    def __pow__(self, exponent):
        return power(self, exponent)

    def __getitem__(self, idx):
        return getitem(self, idx)

    def reshape(self, *shape):
        return reshape(self, shape if len(shape) > 1 else shape[0])

    def transpose(self, *axes):
        return transpose(self, axes if axes else None)

    @property
    def T(self):
        return transpose(self, None)

    def sum(self, axis=None, keepdims=False):
        return total(self, axis=axis, keepdims=keepdims)

    def mean(self, axis=None, keepdims=False):
        n = self.data.size if axis is None else np.prod(
            [self.data.shape[a] for a in np.atleast_1d(axis)])
        return mul(total(self, axis=axis, keepdims=keepdims), 1.0 / float(n))

    def flatten(self):
        return reshape(self, (self.data.size,))


def tensor(data, dtype=None) -> Tensor:
    """Constant tensor (no gradient)."""
    return Tensor(data, requires_grad=False, dtype=dtype)


def parameter(data, dtype=None) -> Tensor:
    """Trainable leaf tensor."""
    return Tensor(data, requires_grad=True, dtype=dtype)


# -- plumbing -----------------------------------------------------------


def _from_op(data: np.ndarray, parents: tuple, backward) -> Tensor:
    out = Tensor.__new__(Tensor)
    out.data = data
    out.grad = None
    out.requires_grad = any(p.requires_grad for p in parents)
    if out.requires_grad:
        out._parents = parents
        out._backward = backward
    else:
        out._parents = ()
        out._backward = None
    return out


def _accumulate(t: Tensor, g: np.ndarray) -> None:
    if not t.requires_grad:
        return
    g = _unbroadcast(g, t.data.shape)
    t.grad = g if t.grad is None else t.grad + g


def _unbroadcast(g: np.ndarray, shape: tuple) -> np.ndarray:
    """Sum ``g`` down to ``shape`` (reverse of numpy broadcasting)."""
    if g.shape == shape:
        return g
    extra = g.ndim - len(shape)
    if extra > 0:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, (gs, ss) in enumerate(zip(g.shape, shape)) if ss == 1 and gs != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g.reshape(shape)


def _as_operand(x):
    """Tensors pass through; ndarrays become constants; python scalars stay raw
    so numpy's weak promotion keeps float32 graphs in float32."""
    if isinstance(x, Tensor):
        return x
    if np.isscalar(x):
        return x
    return Tensor(np.asarray(x))


# -- elementwise and reduction ops ---------------------------------------


def add(a, b) -> Tensor:
    a, b = _as_operand(a), _as_operand(b)
    if not isinstance(a, Tensor):
        a, b = b, a
    if isinstance(b, Tensor):
        data = a.data + b.data

        def backward(g):
            _accumulate(a, g)
            _accumulate(b, g)

        return _from_op(data, (a, b), backward)
    data = a.data + b

    def backward(g):
        _accumulate(a, g)

    return _from_op(data, (a,), backward)


def mul(a, b) -> Tensor:
    a, b = _as_operand(a), _as_operand(b)
    if not isinstance(a, Tensor):
        a, b = b, a
    if isinstance(b, Tensor):
        data = a.data * b.data

        def backward(g):
            _accumulate(a, g * b.data)
            _accumulate(b, g * a.data)

        return _from_op(data, (a, b), backward)
    data = a.data * b

    def backward(g):
        _accumulate(a, g * b)

    return _from_op(data, (a,), backward)


def power(a: Tensor, exponent) -> Tensor:
    if isinstance(exponent, Tensor):
        raise TypeError("only scalar exponents are supported")
    data = a.data ** exponent

    def backward(g):
        _accumulate(a, g * exponent * a.data ** (exponent - 1.0))

    return _from_op(data, (a,), backward)


def matmul(a: Tensor, b: Tensor) -> Tensor:
    a, b = _as_operand(a), _as_operand(b)
    data = a.data @ b.data

    def backward(g):
        if a.requires_grad:
            _accumulate(a, g @ b.data.T if b.data.ndim == 2 else np.outer(g, b.data))
        if b.requires_grad:
            _accumulate(b, a.data.T @ g if a.data.ndim == 2 else np.outer(a.data, g))

    if a.data.ndim > 2 or b.data.ndim > 2:
        raise ValueError("matmul supports at most 2-D operands")
    return _from_op(data, (a, b), backward)


def total(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    data = a.data.sum(axis=axis, keepdims=keepdims)

    def backward(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        _accumulate(a, np.broadcast_to(g, a.data.shape))

    return _from_op(data, (a,), backward)


def log(a: Tensor) -> Tensor:
    a = _as_operand(a)
    data = np.log(a.data)

    def backward(g):
        _accumulate(a, g / a.data)

    return _from_op(data, (a,), backward)


def exp(a: Tensor) -> Tensor:
    data = np.exp(a.data)

    def backward(g):
        _accumulate(a, g * data)

    return _from_op(data, (a,), backward)


def expm1(a: Tensor) -> Tensor:
    """exp(x) - 1, accurate near zero."""
    data = np.expm1(a.data)

    def backward(g):
        _accumulate(a, g * np.exp(a.data))

    return _from_op(data, (a,), backward)


def log1p(a: Tensor) -> Tensor:
    """log(1 + x), accurate near zero."""
    data = np.log1p(a.data)

    def backward(g):
        _accumulate(a, g / (1.0 + a.data))

    return _from_op(data, (a,), backward)


def sigmoid(a: Tensor) -> Tensor:
    x = a.data
    data = np.where(x >= 0, 1.0 / (1.0 + np.exp(-np.abs(x))),
                    np.exp(-np.abs(x)) / (1.0 + np.exp(-np.abs(x))))

    def backward(g):
        _accumulate(a, g * data * (1.0 - data))

    return _from_op(data, (a,), backward)


def relu(a: Tensor) -> Tensor:
    data = np.maximum(a.data, 0)

    def backward(g):
        _accumulate(a, g * (a.data > 0))

    return _from_op(data, (a,), backward)


def clip(a: Tensor, lo: float, hi: float) -> Tensor:
    """Clamp values; gradient is passed through strictly inside the range."""
    data = np.clip(a.data, lo, hi)

    def backward(g):
        _accumulate(a, g * ((a.data > lo) & (a.data < hi)))

    return _from_op(data, (a,), backward)


def softmax(a: Tensor, axis: int) -> Tensor:
    shifted = a.data - a.data.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    data = e / e.sum(axis=axis, keepdims=True)

    def backward(g):
        inner = (g * data).sum(axis=axis, keepdims=True)
        _accumulate(a, data * (g - inner))

    return _from_op(data, (a,), backward)


def euclidean_distance(a: Tensor, b: Tensor) -> Tensor:
    """L2 norm of the elementwise difference over flattened operands.

    The subgradient at zero distance is taken as 0, so identical inputs are
    safe during training.
    """
    a, b = _as_operand(a), _as_operand(b)
    if a.data.shape != b.data.shape:
        raise ValueError(f"shape mismatch: {a.data.shape} vs {b.data.shape}")
    diff = a.data - b.data
    dist = float(np.sqrt((diff * diff).sum()))
    data = np.asarray(dist, dtype=a.data.dtype)

    def backward(g):
        if dist > 0:
            scaled = (g / dist) * diff
        else:
            scaled = np.zeros_like(diff)
        _accumulate(a, scaled)
        _accumulate(b, -scaled)

    return _from_op(data, (a, b), backward)


# -- shape ops ------------------------------------------------------------


def reshape(a: Tensor, shape) -> Tensor:
    data = a.data.reshape(shape)

    def backward(g):
        _accumulate(a, g.reshape(a.data.shape))

    return _from_op(data, (a,), backward)


def transpose(a: Tensor, axes=None) -> Tensor:
    data = a.data.transpose(axes)

    def backward(g):
        if axes is None:
            _accumulate(a, g.transpose())
        else:
            _accumulate(a, g.transpose(np.argsort(axes)))

    return _from_op(data, (a,), backward)


def getitem(a: Tensor, idx) -> Tensor:
    data = a.data[idx]

    def backward(g):
        buf = np.zeros_like(a.data)
        np.add.at(buf, idx, g)
        _accumulate(a, buf)

    return _from_op(data, (a,), backward)


# -- convolution and friends ----------------------------------------------


def _conv_geometry(h, w, kh, kw, stride, padding):
    ho = (h + 2 * padding - kh) // stride + 1
    wo = (w + 2 * padding - kw) // stride + 1
    return ho, wo


def _im2col(x: np.ndarray, kh: int, kw: int, stride: int, padding: int) -> np.ndarray:
    n, c, h, w = x.shape
    ho, wo = _conv_geometry(h, w, kh, kw, stride, padding)
    if padding:
        x = np.pad(x, ((0, 0), (0, 0), (padding, padding), (padding, padding)))
    s0, s1, s2, s3 = x.strides
    view = np.lib.stride_tricks.as_strided(
        x, (n, c, kh, kw, ho, wo), (s0, s1, s2, s3, s2 * stride, s3 * stride),
        writeable=False)
    return np.ascontiguousarray(view.transpose(0, 4, 5, 1, 2, 3)).reshape(
        n * ho * wo, c * kh * kw)


def _col2im(cols: np.ndarray, xshape, kh, kw, stride, padding) -> np.ndarray:
    n, c, h, w = xshape
    ho, wo = _conv_geometry(h, w, kh, kw, stride, padding)
    out = np.zeros((n, c, h + 2 * padding, w + 2 * padding), dtype=cols.dtype)
    cols = cols.reshape(n, ho, wo, c, kh, kw).transpose(0, 3, 4, 5, 1, 2)
    for i in range(kh):
        for j in range(kw):
            out[:, :, i:i + stride * ho:stride, j:j + stride * wo:stride] += cols[:, :, i, j]
    if padding:
        out = out[:, :, padding:padding + h, padding:padding + w]
    return out


def conv2d(x: Tensor, w: Tensor, b: Tensor | None = None,
           stride: int = 1, padding: int = 0) -> Tensor:
    """2-D convolution, NCHW layout, square stride/padding."""
    n, cin, h, wid = x.data.shape
    cout, cin_w, kh, kw = w.data.shape
    if cin != cin_w:
        raise ValueError(f"input has {cin} channels, kernel expects {cin_w}")
    ho, wo = _conv_geometry(h, wid, kh, kw, stride, padding)
    cols = _im2col(x.data, kh, kw, stride, padding)
    wmat = w.data.reshape(cout, -1)
    out = cols @ wmat.T
    if b is not None:
        out = out + b.data
    data = np.ascontiguousarray(out.reshape(n, ho, wo, cout).transpose(0, 3, 1, 2))

    def backward(g):
        gmat = np.ascontiguousarray(g.transpose(0, 2, 3, 1)).reshape(-1, cout)
        if w.requires_grad:
            _accumulate(w, (gmat.T @ cols).reshape(w.data.shape))
        if b is not None and b.requires_grad:
            _accumulate(b, gmat.sum(axis=0))
        if x.requires_grad:
            _accumulate(x, _col2im(gmat @ wmat, x.data.shape, kh, kw, stride, padding))

    parents = (x, w) if b is None else (x, w, b)
    return _from_op(data, parents, backward)


def max_pool2d(x: Tensor, kernel: int, stride: int, padding: int = 0) -> Tensor:
    n, c, h, w = x.data.shape
    ho, wo = _conv_geometry(h, w, kernel, kernel, stride, padding)
    pad_value = -np.inf
    xp = x.data
    if padding:
        xp = np.pad(xp, ((0, 0), (0, 0), (padding, padding), (padding, padding)),
                    constant_values=pad_value)
    s0, s1, s2, s3 = xp.strides
    view = np.lib.stride_tricks.as_strided(
        xp, (n, c, ho, wo, kernel, kernel),
        (s0, s1, s2 * stride, s3 * stride, s2, s3), writeable=False)
    windows = view.reshape(n, c, ho, wo, kernel * kernel)
    arg = windows.argmax(axis=-1)
    data = np.take_along_axis(windows, arg[..., None], axis=-1)[..., 0]

    def backward(g):
        buf = np.zeros((n, c, h + 2 * padding, w + 2 * padding), dtype=g.dtype)
        ni, ci, oi, oj = np.indices((n, c, ho, wo))
        rows = oi * stride + arg // kernel
        cols_ = oj * stride + arg % kernel
        np.add.at(buf, (ni, ci, rows, cols_), g)
        if padding:
            buf = buf[:, :, padding:padding + h, padding:padding + w]
        _accumulate(x, buf)

    return _from_op(data, (x,), backward)


def batch_norm2d(x: Tensor, gamma: Tensor, beta: Tensor,
                 running_mean: np.ndarray, running_var: np.ndarray,
                 training: bool, momentum: float = 0.1, eps: float = 1e-5) -> Tensor:
    """Per-channel batch normalization over (N, H, W).

    ``running_mean``/``running_var`` are plain arrays owned by the caller and
    are updated in place when ``training`` is true.
    """
    nchw = x.data.shape
    m = nchw[0] * nchw[2] * nchw[3]
    gshape = (1, -1, 1, 1)
    if training:
        mean = x.data.mean(axis=(0, 2, 3))
        var = x.data.var(axis=(0, 2, 3))
        unbiased = var * m / max(m - 1, 1)
        running_mean *= (1.0 - momentum)
        running_mean += momentum * mean
        running_var *= (1.0 - momentum)
        running_var += momentum * unbiased
    else:
        mean = running_mean
        var = running_var
    inv_std = 1.0 / np.sqrt(var + eps)
    xhat = (x.data - mean.reshape(gshape)) * inv_std.reshape(gshape)
    data = gamma.data.reshape(gshape) * xhat + beta.data.reshape(gshape)

    def backward(g):
        if gamma.requires_grad:
            _accumulate(gamma, (g * xhat).sum(axis=(0, 2, 3)))
        if beta.requires_grad:
            _accumulate(beta, g.sum(axis=(0, 2, 3)))
        if x.requires_grad:
            gx = g * gamma.data.reshape(gshape)
            if training:
                ivs = inv_std.reshape(gshape)
                gsum = gx.sum(axis=(0, 2, 3), keepdims=True)
                gdot = (gx * xhat).sum(axis=(0, 2, 3), keepdims=True)
                dx = ivs * (gx - gsum / m - xhat * gdot / m)
            else:
                dx = gx * inv_std.reshape(gshape)
            _accumulate(x, dx)

    return _from_op(data, (x, gamma, beta), backward)
