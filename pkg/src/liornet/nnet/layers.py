"""Parameterised building blocks on top of :mod:`liornet.nnet.autograd`."""

from __future__ import annotations

import numpy as np

from . import autograd as ag
from .autograd import Tensor


class Module:
    training = True

    def named_parameters(self, prefix=""):
        for name, value in vars(self).items():
            full = f"{prefix}{name}"
            if isinstance(value, Tensor) and value.requires_grad:
                yield full, value
            elif isinstance(value, Module):
                yield from value.named_parameters(full + ".")
            elif isinstance(value, (list, tuple)):
                for i, item in enumerate(value):
                    if isinstance(item, Module):
                        yield from item.named_parameters(f"{full}.{i}.")
            elif isinstance(value, dict):
                for key in sorted(value):
                    if isinstance(value[key], Module):
                        yield from value[key].named_parameters(f"{full}.{key}.")

    def named_buffers(self, prefix=""):
        for name, value in vars(self).items():
            full = f"{prefix}{name}"
            if isinstance(value, np.ndarray):
                yield full, value
            elif isinstance(value, Module):
                yield from value.named_buffers(full + ".")
            elif isinstance(value, (list, tuple)):
                for i, item in enumerate(value):
                    if isinstance(item, Module):
                        yield from item.named_buffers(f"{full}.{i}.")
            elif isinstance(value, dict):
                for key in sorted(value):
                    if isinstance(value[key], Module):
                        yield from value[key].named_buffers(f"{full}.{key}.")

    def parameters(self):
        return [p for _, p in self.named_parameters()]

    def modules(self):
        yield self
        for value in vars(self).values():
            children = []
            if isinstance(value, Module):
                children = [value]
            elif isinstance(value, (list, tuple)):
                children = [v for v in value if isinstance(v, Module)]
            elif isinstance(value, dict):
                children = [value[k] for k in sorted(value) if isinstance(value[k], Module)]
            for child in children:
                yield from child.modules()

    def train(self, mode=True):
        for m in self.modules():
            m.training = mode
        return self

    def eval(self):
        return self.train(False)

    def zero_grad(self):
        for p in self.parameters():
            p.grad = None

    def __call__(self, *args, **kwargs):
        return self.forward(*args, **kwargs)


class Conv2d(Module):
    def __init__(self, c_in, c_out, k=3, bias=False, rng=None, std=None):
        rng = rng or np.random.default_rng(0)
        std = np.sqrt(2.0 / (c_in * k * k)) if std is None else std
        self.weight = Tensor(rng.normal(0.0, std, size=(c_out, c_in, k, k)), requires_grad=True)
        self.bias = Tensor(np.zeros(c_out), requires_grad=True) if bias else None
        self.padding = k // 2

    def forward(self, x):
        return ag.conv2d(x, self.weight, self.bias, padding=self.padding)


class BatchNorm2d(Module):
    """Batch norm; ``identity=True`` turns it into a pass-through (for tests)."""

    def __init__(self, channels, momentum=0.1, eps=1e-5):
        self.gamma = Tensor(np.ones(channels), requires_grad=True)
        self.beta = Tensor(np.zeros(channels), requires_grad=True)
        self.running_mean = np.zeros(channels)
        self.running_var = np.ones(channels)
        self.momentum = momentum
        self.eps = eps
        self.identity = False

    def forward(self, x):
        if self.identity:
            return x
        return ag.batch_norm(x, self.gamma, self.beta, self.running_mean, self.running_var,
                             self.training, self.momentum, self.eps)


class ResidualBlock(Module):
    """``relu(bn(conv(relu(bn(conv(x)))))) + proj(x)``; proj is a 1x1 conv when widths differ."""

    def __init__(self, c_in, c_out, rng=None):
        rng = rng or np.random.default_rng(0)
        self.conv1 = Conv2d(c_in, c_out, 3, rng=rng)
        self.bn1 = BatchNorm2d(c_out)
        self.conv2 = Conv2d(c_out, c_out, 3, rng=rng)
        self.bn2 = BatchNorm2d(c_out)
        self.proj = Conv2d(c_in, c_out, 1, rng=rng) if c_in != c_out else None

    def forward(self, x):
        h = ag.relu(self.bn1(self.conv1(x)))
        h = ag.relu(self.bn2(self.conv2(h)))
        return h + (self.proj(x) if self.proj is not None else x)


def set_batchnorm_identity(module: Module, identity: bool = True):
    for m in module.modules():
        if isinstance(m, BatchNorm2d):
            m.identity = identity
