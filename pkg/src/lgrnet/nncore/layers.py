import numpy as np

from lgrnet.errors import InvalidArgument
from lgrnet.nncore import functional as F
from lgrnet.nncore.tensor import Tensor


class Parameter(Tensor):
    def __init__(self, data):
        super().__init__(data, requires_grad=True)


class Module:
    """Container of parameters, buffers and submodules.

    Attributes holding a :class:`Parameter`, a :class:`Module` or a list of
    modules are discovered automatically; buffers are numpy arrays named in
    ``_buffer_names``.
    """

    _buffer_names = ()

    def __init__(self):
        self.training = True

    def named_parameters(self, prefix=""):
        for name, value in vars(self).items():
            full = f"{prefix}{name}"
            if isinstance(value, Parameter):
                yield full, value
            elif isinstance(value, Module):
                yield from value.named_parameters(full + ".")
            elif isinstance(value, (list, tuple)):
                for i, item in enumerate(value):
                    if isinstance(item, Module):
                        yield from item.named_parameters(f"{full}.{i}.")

    def parameters(self):
        return [p for _, p in self.named_parameters()]

    def modules(self):
        yield self
        for value in vars(self).values():
            if isinstance(value, Module):
                yield from value.modules()
            elif isinstance(value, (list, tuple)):
                for item in value:
                    if isinstance(item, Module):
                        yield from item.modules()

    def named_buffers(self, prefix=""):
        for name in self._buffer_names:
            yield f"{prefix}{name}", getattr(self, name)
        for name, value in vars(self).items():
            if isinstance(value, Module):
                yield from value.named_buffers(f"{prefix}{name}.")
            elif isinstance(value, (list, tuple)):
                for i, item in enumerate(value):
                    if isinstance(item, Module):
                        yield from item.named_buffers(f"{prefix}{name}.{i}.")

    def state_dict(self):
        state = {name: p.data for name, p in self.named_parameters()}
        state.update(dict(self.named_buffers()))
        return state

    def load_state_dict(self, state, strict=True):
        params = dict(self.named_parameters())
        buffers = dict(self.named_buffers())
        expected = set(params) | set(buffers)
        if strict and set(state) != expected:
            missing = sorted(expected - set(state))
            extra = sorted(set(state) - expected)
            raise InvalidArgument(f"state mismatch: missing={missing[:5]} unexpected={extra[:5]}")
        for name, arr in state.items():
            target = params[name].data if name in params else buffers.get(name)
            if target is None:
                continue
            if target.shape != arr.shape:
                raise InvalidArgument(f"{name}: shape {arr.shape} != {target.shape}")
            target[...] = arr

    def train(self, mode=True):
        for m in self.modules():
            m.training = mode
        return self

    def eval(self):
        return self.train(False)

    def zero_grad(self):
        for p in self.parameters():
            p.grad = None

    def astype(self, dtype):
        for p in self.parameters():
            p.data = p.data.astype(dtype)
        for m in self.modules():
            for name in m._buffer_names:
                setattr(m, name, getattr(m, name).astype(dtype))
        return self

    def __call__(self, *args, **kwargs):
        return self.forward(*args, **kwargs)


def _uniform(rng, fan_in, shape, dtype):
    bound = np.sqrt(6.0 / fan_in)  # He-uniform for ReLU stacks
    return rng.uniform(-bound, bound, size=shape).astype(dtype)


class Conv3d(Module):
    """3D convolution layer; ``channels_last`` selects B x D x H x W x C input."""

    def __init__(self, in_channels, out_channels, kernel_size=3, padding=None, rng=None,
                 dtype=np.float32, channels_last=False):
        super().__init__()
        self.channels_last = channels_last
        if kernel_size % 2 == 0 and padding is None:
            raise InvalidArgument("even kernels need an explicit padding")
        rng = rng if rng is not None else np.random.default_rng(0)
        self.in_channels = in_channels
        self.out_channels = out_channels
        self.kernel_size = kernel_size
        self.padding = (kernel_size - 1) // 2 if padding is None else padding
        fan_in = in_channels * kernel_size ** 3
        self.weight = Parameter(_uniform(
            rng, fan_in, (out_channels, in_channels) + (kernel_size,) * 3, dtype))
        self.bias = Parameter(np.zeros(out_channels, dtype=dtype))

    def forward(self, x):
        conv = F.conv3d_cl if self.channels_last else F.conv3d
        return conv(x, self.weight, self.bias, self.padding)


class BatchNorm(Module):
    _buffer_names = ("running_mean", "running_var")

    def __init__(self, channels, axis=1, momentum=0.9, eps=1e-5, dtype=np.float32):
        super().__init__()
        self.axis = axis
        self.momentum = momentum
        self.eps = eps
        self.gamma = Parameter(np.ones(channels, dtype=dtype))
        self.beta = Parameter(np.zeros(channels, dtype=dtype))
        self.running_mean = np.zeros(channels, dtype=dtype)
        self.running_var = np.ones(channels, dtype=dtype)

    def forward(self, x):
        return F.batch_norm(x, self.gamma, self.beta, self.running_mean, self.running_var,
                            self.training, self.momentum, self.eps, self.axis)


class Linear(Module):
    """Affine map on the last axis (a shared per-point layer for N x C input)."""

    def __init__(self, in_features, out_features, rng=None, dtype=np.float32, zero=False):
        super().__init__()
        rng = rng if rng is not None else np.random.default_rng(0)
        self.in_features = in_features
        self.out_features = out_features
        w = np.zeros((in_features, out_features), dtype=dtype) if zero else _uniform(
            rng, in_features, (in_features, out_features), dtype)
        self.weight = Parameter(w)
        self.bias = Parameter(np.zeros(out_features, dtype=dtype))

    def forward(self, x):
        return x @ self.weight + self.bias


class SharedMLP(Module):
    """Stack of Linear -> BatchNorm -> ReLU over the last axis."""

    def __init__(self, widths, rng=None, dtype=np.float32, momentum=0.9, final_act=True):
        super().__init__()
        rng = rng if rng is not None else np.random.default_rng(0)
        self.linears = []
        self.norms = []
        self.final_act = final_act
        n = len(widths) - 1
        for i, (a, b) in enumerate(zip(widths[:-1], widths[1:])):
            self.linears.append(Linear(a, b, rng=rng, dtype=dtype))
            last = i == n - 1
            self.norms.append(None if (last and not final_act)
                              else BatchNorm(b, axis=-1, momentum=momentum, dtype=dtype))
        self.norms = [m for m in self.norms if m is not None]

    def forward(self, x):
        n = len(self.linears)
        for i, lin in enumerate(self.linears):
            x = lin(x)
            if i < n - 1 or self.final_act:
                x = self.norms[i](x).relu()
        return x
