"""Parameter containers and layers built on :mod:`pseudoct.tensor`."""

from __future__ import annotations

import numpy as np

from . import tensor as T
from .tensor import Tensor

INIT_STD = 0.02


class Param(Tensor):
    """A trainable leaf tensor whose gradient accumulates across uses."""

    __slots__ = ()

    def __init__(self, data, dtype=None):
        super().__init__(data, requires_grad=True, dtype=dtype)


class Module:
    """Attribute-walking container, in the spirit of ``torch.nn.Module``.

    Parameters, buffers (plain numpy arrays listed in ``_buffer_names``),
    submodules and lists of submodules are discovered in attribute
    insertion order, which fixes the checkpoint layout.
    """

    _buffer_names: tuple[str, ...] = ()
    training = True

    def named_parameters(self, prefix=""):
        for name, value in vars(self).items():
            if isinstance(value, Param):
                yield prefix + name, value
            elif isinstance(value, Module):
                yield from value.named_parameters(f"{prefix}{name}.")
            elif isinstance(value, list):
                for i, item in enumerate(value):
                    if isinstance(item, Module):
                        yield from item.named_parameters(f"{prefix}{name}.{i}.")

    def parameters(self):
        return [p for _, p in self.named_parameters()]

    def named_buffers(self, prefix=""):
        for name in self._buffer_names:
            yield prefix + name, getattr(self, name)
        for name, value in vars(self).items():
            if isinstance(value, Module):
                yield from value.named_buffers(f"{prefix}{name}.")
            elif isinstance(value, list):
                for i, item in enumerate(value):
                    if isinstance(item, Module):
                        yield from item.named_buffers(f"{prefix}{name}.{i}.")

    def modules(self):
        yield self
        for value in vars(self).values():
            if isinstance(value, Module):
                yield from value.modules()
            elif isinstance(value, list):
                for item in value:
                    if isinstance(item, Module):
                        yield from item.modules()

    def train(self, mode=True):
        for m in self.modules():
            m.training = mode
        return self

    def eval(self):
        return self.train(False)

    def zero_grad(self):
        for p in self.parameters():
            p.grad = None

    def requires_grad_(self, flag=True):
        for p in self.parameters():
            p.requires_grad = flag
        return self

    def num_parameters(self) -> int:
        return sum(p.data.size for p in self.parameters())

    def __call__(self, *args, **kwargs):
        return self.forward(*args, **kwargs)


def normal_param(rng, shape, dtype):
    return Param(rng.normal(0.0, INIT_STD, size=shape).astype(dtype))


class Conv3d(Module):
    def __init__(self, cin, cout, k, stride=1, pad=0, *, rng, dtype=np.float32):
        self.stride, self.pad, self.k = stride, pad, k
        self.weight = normal_param(rng, (cout, cin, k, k, k), dtype)
        self.bias = Param(np.zeros(cout, dtype=dtype))

    def forward(self, x):
        return T.conv3d(x, self.weight, self.bias, self.stride, self.pad)

    def out_shape(self, shape):
        n, _, *spatial = shape
        return (n, self.weight.shape[0]) + tuple(
            T.conv_out_size(s, self.k, self.stride, self.pad) for s in spatial
        )


class ConvTranspose3d(Module):
    def __init__(self, cin, cout, k, stride=1, pad=0, *, rng, dtype=np.float32):
        self.stride, self.pad, self.k = stride, pad, k
        self.weight = normal_param(rng, (cin, cout, k, k, k), dtype)
        self.bias = Param(np.zeros(cout, dtype=dtype))

    def forward(self, x):
        return T.conv_transpose3d(x, self.weight, self.bias, self.stride, self.pad)

    def out_shape(self, shape):
        n, _, *spatial = shape
        return (n, self.weight.shape[1]) + tuple(
            T.conv_transpose_out_size(s, self.k, self.stride, self.pad) for s in spatial
        )


class BatchNorm3d(Module):
    _buffer_names = ("running_mean", "running_var")

    def __init__(self, channels, momentum=0.1, eps=1e-5, *, dtype=np.float32):
        self.momentum, self.eps = momentum, eps
        self.gamma = Param(np.ones(channels, dtype=dtype))
        self.beta = Param(np.zeros(channels, dtype=dtype))
        self.running_mean = np.zeros(channels, dtype=dtype)
        self.running_var = np.ones(channels, dtype=dtype)

    def forward(self, x):
        return T.batch_norm3d(
            x, self.gamma, self.beta, self.running_mean, self.running_var,
            training=self.training, momentum=self.momentum, eps=self.eps,
        )


class Linear(Module):
    """``x @ W + b`` over the last axis."""

    def __init__(self, fan_in, fan_out, *, rng, dtype=np.float32):
        self.weight = normal_param(rng, (fan_in, fan_out), dtype)
        self.bias = Param(np.zeros(fan_out, dtype=dtype))

    def forward(self, x):
        return T.matmul(x, self.weight) + self.bias


class LayerNorm(Module):
    def __init__(self, width, eps=1e-5, *, dtype=np.float32):
        self.eps = eps
        self.gamma = Param(np.ones(width, dtype=dtype))
        self.beta = Param(np.zeros(width, dtype=dtype))

    def forward(self, x):
        return T.layer_norm(x, self.gamma, self.beta, axis=-1, eps=self.eps)
