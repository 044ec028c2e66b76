"""Dense tensor with reverse-mode autodiff."""

from contextlib import contextmanager

import numpy as np

from lgrnet.errors import InvalidState

_grad_enabled = True


@contextmanager
def no_grad():
    """Disable graph recording inside the block (inference)."""
    global _grad_enabled
    prev, _grad_enabled = _grad_enabled, False
    try:
        yield
    finally:
        _grad_enabled = prev


def is_grad_enabled():
    return _grad_enabled


def _unbroadcast(grad, shape):
    """Sum ``grad`` down to ``shape`` after numpy broadcasting."""
    if grad.shape == shape:
        return grad
    extra = grad.ndim - len(shape)
    if extra > 0:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad


def _data(x):
    return x.data if isinstance(x, Tensor) else x


class Tensor:
    """An n-dimensional array carrying an optional gradient.

    Operations on tensors that require gradients record a backward closure;
    ``backward()`` walks the recorded graph in reverse topological order.
    """

    __array_priority__ = 100

    def __init__(self, data, requires_grad=False, parents=(), backward=None, op=""):
        self.data = np.asarray(data)
        self.requires_grad = bool(requires_grad)
        self.grad = None
        self._parents = parents
        self._backward = backward
        self.op = op

    # -- construction helpers ---------------------------------------------
    @classmethod
    def _make(cls, data, parents, backward, op):
        live = tuple(p for p in parents if isinstance(p, Tensor) and p.requires_grad)
        if not live or not _grad_enabled:
            return cls(data, op=op)
        return cls(data, requires_grad=True, parents=live, backward=backward, op=op)

    def _accum(self, g):
        if not self.requires_grad:
            return
        if self.grad is None:
            self.grad = np.array(g, dtype=self.data.dtype, copy=True)
        else:
            self.grad += g

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

    def numpy(self):
        return self.data

    def item(self):
        return self.data.item()

    def detach(self):
        return Tensor(self.data)

    def __repr__(self):
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}, dtype={self.dtype}{flag})"

    def __len__(self):
        return len(self.data)

    # -- backward -----------------------------------------------------------
    def backward(self, grad=None):
        if not self.requires_grad:
            raise InvalidState("backward() on a tensor that is not part of a recorded graph")
        if grad is None:
            if self.data.size != 1:
                raise InvalidState("backward() without a gradient needs a scalar output")
            grad = np.ones_like(self.data)
        order = []
        seen = set()
        stack = [(self, False)]
        while stack:
            node, done = stack.pop()
            if done:
                order.append(node)
                continue
            if id(node) in seen:
                continue
            seen.add(id(node))
            stack.append((node, True))
            for p in node._parents:
                if id(p) not in seen:
                    stack.append((p, False))
        self._accum(np.asarray(grad, dtype=self.data.dtype))
        for node in reversed(order):
            if node._backward is not None and node.grad is not None:
                node._backward(node.grad)
                if node is not self:
                    # interior node: release its gradient once propagated
                    node.grad = None

    # -- arithmetic -----------------------------------------------------------
    def __add__(self, other):
        od = _data(other)
        out_data = self.data + od

        def backward(g):
            self._accum(_unbroadcast(g, self.shape))
            if isinstance(other, Tensor):
                other._accum(_unbroadcast(g, other.shape))

        return Tensor._make(out_data, (self, other), backward, "add")

    __radd__ = __add__

    def __neg__(self):
        return Tensor._make(-self.data, (self,), lambda g: self._accum(-g), "neg")

    def __sub__(self, other):
        return self + (-other if isinstance(other, Tensor) else -np.asarray(other))

    def __rsub__(self, other):
        return (-self) + other

    def __mul__(self, other):
        od = _data(other)
        out_data = self.data * od

        def backward(g):
            self._accum(_unbroadcast(g * od, self.shape))
            if isinstance(other, Tensor):
                other._accum(_unbroadcast(g * self.data, other.shape))

        return Tensor._make(out_data, (self, other), backward, "mul")

    __rmul__ = __mul__

    def __truediv__(self, other):
        od = _data(other)
        out_data = self.data / od

        def backward(g):
            self._accum(_unbroadcast(g / od, self.shape))
            if isinstance(other, Tensor):
                other._accum(_unbroadcast(-g * out_data / od, other.shape))

        return Tensor._make(out_data, (self, other), backward, "div")

    def __rtruediv__(self, other):
        return Tensor(np.asarray(other)) / self

    def __pow__(self, exponent):
        out_data = self.data ** exponent

        def backward(g):
            self._accum(g * exponent * self.data ** (exponent - 1))

        return Tensor._make(out_data, (self,), backward, "pow")

    def __matmul__(self, other):
        od = _data(other)
        out_data = self.data @ od

        def backward(g):
            if self.requires_grad:
                if od.ndim == 2:
                    self._accum(g @ od.T)
                else:
                    self._accum(_unbroadcast(g @ np.swapaxes(od, -1, -2), self.shape))
            if isinstance(other, Tensor) and other.requires_grad:
                if od.ndim == 2:
                    a = self.data.reshape(-1, self.shape[-1])
                    other._accum(a.T @ g.reshape(-1, g.shape[-1]))
                else:
                    other._accum(_unbroadcast(np.swapaxes(self.data, -1, -2) @ g, other.shape))

        return Tensor._make(out_data, (self, other), backward, "matmul")

    # -- reductions and shape ------------------------------------------------
    def sum(self, axis=None, keepdims=False):
        out_data = self.data.sum(axis=axis, keepdims=keepdims)

        def backward(g):
            if axis is not None and not keepdims:
                g = np.expand_dims(g, axis)
            self._accum(np.broadcast_to(g, self.shape))

        return Tensor._make(out_data, (self,), backward, "sum")

    def mean(self, axis=None, keepdims=False):
        n = self.data.size if axis is None else np.prod(
            [self.shape[a] for a in np.atleast_1d(axis)])
        return self.sum(axis=axis, keepdims=keepdims) * (1.0 / float(n))

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        out_data = self.data.reshape(shape)
        return Tensor._make(out_data, (self,), lambda g: self._accum(g.reshape(self.shape)),
                            "reshape")

    def transpose(self, *axes):
        if len(axes) == 1 and isinstance(axes[0], (tuple, list)):
            axes = tuple(axes[0])
        inv = np.argsort(axes)
        out_data = self.data.transpose(axes)
        return Tensor._make(out_data, (self,), lambda g: self._accum(g.transpose(inv)),
                            "transpose")

    def __getitem__(self, key):
        key = key.data if isinstance(key, Tensor) else key
        out_data = self.data[key]

        parts = key if isinstance(key, tuple) else (key,)
        basic = all(k is None or k is Ellipsis or isinstance(k, (int, slice)) for k in parts)

        def backward(g):
            full = np.zeros_like(self.data)
            if basic:
                full[key] += g  # basic indexing never repeats an element
            else:
                np.add.at(full, key, g)
            self._accum(full)

        return Tensor._make(out_data, (self,), backward, "getitem")

    # -- elementwise -----------------------------------------------------------
    def relu(self):
        mask = self.data > 0
        return Tensor._make(self.data * mask, (self,), lambda g: self._accum(g * mask), "relu")

    def exp(self):
        out_data = np.exp(self.data)
        return Tensor._make(out_data, (self,), lambda g: self._accum(g * out_data), "exp")

    def log(self):
        return Tensor._make(np.log(self.data), (self,), lambda g: self._accum(g / self.data),
                            "log")

    def abs(self):
        sign = np.sign(self.data)
        return Tensor._make(np.abs(self.data), (self,), lambda g: self._accum(g * sign), "abs")


def tensor(data, requires_grad=False, dtype=None):
    arr = np.asarray(data, dtype=dtype)
    return Tensor(arr, requires_grad=requires_grad)


def as_tensor(x):
    return x if isinstance(x, Tensor) else Tensor(np.asarray(x))


def concat(tensors, axis=-1):
    tensors = [as_tensor(t) for t in tensors]
    out_data = np.concatenate([t.data for t in tensors], axis=axis)
    sizes = np.cumsum([t.shape[axis] for t in tensors])[:-1]

    def backward(g):
        for t, piece in zip(tensors, np.split(g, sizes, axis=axis)):
            t._accum(piece)

    return Tensor._make(out_data, tuple(tensors), backward, "concat")


def gather_rows(x, idx):
    """Batched row gather: ``x`` is B x N x C, ``idx`` is B x ... integer indices
    into N; returns B x ... x C."""
    idx = np.asarray(idx)
    b = x.shape[0]
    bi = np.arange(b).reshape((b,) + (1,) * (idx.ndim - 1))
    out_data = x.data[bi, idx]

    def backward(g):
        n, c = x.shape[1], x.shape[-1]
        flat = (bi * n + idx).reshape(-1)
        gx = np.zeros((b * n, c), dtype=g.dtype)
        np.add.at(gx, flat, g.reshape(-1, c))
        x._accum(gx.reshape(x.shape))

    return Tensor._make(out_data, (x,), backward, "gather_rows")
