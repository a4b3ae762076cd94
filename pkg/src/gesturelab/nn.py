"""Layers, parameter containers and the Adam optimizer."""

import numpy as np

from . import autodiff as ad


class Module:
    """Collects parameters from attributes that are Tensors, Modules or lists of Modules."""

    def named_parameters(self, prefix=""):
        for name, value in vars(self).items():
            if isinstance(value, ad.Tensor) and value.requires_grad:
                yield prefix + name, value
            elif isinstance(value, Module):
                yield from value.named_parameters(f"{prefix}{name}.")
            elif isinstance(value, (list, tuple)):
                for i, item in enumerate(value):
                    if isinstance(item, Module):
                        yield from item.named_parameters(f"{prefix}{name}.{i}.")

    def parameters(self):
        return [p for _, p in self.named_parameters()]

    def state_dict(self):
        return {name: p.data.copy() for name, p in self.named_parameters()}

    def load_state_dict(self, state, strict=True):
        own = dict(self.named_parameters())
        missing = sorted(set(own) - set(state))
        if strict and missing:
            raise KeyError(f"checkpoint is missing parameters: {missing[:5]}")
        for name, p in own.items():
            if name in state:
                value = np.asarray(state[name], dtype=np.float64)
                if value.shape != p.shape:
                    raise ad.ShapeError(f"parameter {name}: checkpoint shape {value.shape} != {p.shape}")
                p.data = value.copy()

    def zero_grad(self):
        for p in self.parameters():
            p.grad = None


def xavier_uniform(rng, shape, fan_in, fan_out):
    limit = np.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-limit, limit, size=shape)


class Conv1d(Module):
    def __init__(self, c_in, c_out, kernel=1, dilation=1, rng=None):
        rng = rng if rng is not None else np.random.default_rng(0)
        self.dilation = dilation
        self.weight = ad.Tensor(
            xavier_uniform(rng, (c_out, c_in, kernel), c_in * kernel, c_out * kernel), requires_grad=True
        )
        self.bias = ad.Tensor(np.zeros(c_out), requires_grad=True)

    def __call__(self, x):
        return ad.conv1d(x, self.weight, self.bias, dilation=self.dilation)


class ResBlock(Module):
    """Two dilated non-causal convolutions with ReLU and a residual connection.

    ``out = relu(conv2(relu(conv1(x))) + skip(x))`` where ``skip`` is the
    identity or a 1x1 projection when the channel count changes.
    """

    def __init__(self, c_in, c_out, kernel=3, dilation=1, rng=None):
        self.conv1 = Conv1d(c_in, c_out, kernel, dilation, rng)
        self.conv2 = Conv1d(c_out, c_out, kernel, dilation, rng)
        self.skip = Conv1d(c_in, c_out, 1, 1, rng) if c_in != c_out else None

    def __call__(self, x):
        h = self.conv2(ad.relu(self.conv1(x)))
        return ad.relu(h + (x if self.skip is None else self.skip(x)))


class TCN(Module):
    """Stack of residual blocks with dilations 1, 2, 4, ...

    Five blocks of kernel-3 convolutions give a receptive field of 125 frames.
    """

    def __init__(self, c_in, channels, kernel=3, rng=None):
        self.blocks = []
        prev = c_in
        for i, c in enumerate(channels):
            self.blocks.append(ResBlock(prev, c, kernel, 2 ** i, rng))
            prev = c
        self.kernel = kernel

    @property
    def out_channels(self):
        return self.blocks[-1].conv2.weight.shape[0]

    def receptive_field(self):
        return 1 + sum(2 * (self.kernel - 1) * b.conv1.dilation for b in self.blocks)

    def __call__(self, x, return_all=False):
        outs = []
        for block in self.blocks:
            x = block(x)
            outs.append(x)
        return outs if return_all else x


class Adam:
    def __init__(self, params, lr=1e-4, betas=(0.9, 0.999), eps=1e-8):
        self.params = list(params)
        self.lr = lr
        self.b1, self.b2 = betas
        self.eps = eps
        self.t = 0
        self.m = [np.zeros_like(p.data) for p in self.params]
        self.v = [np.zeros_like(p.data) for p in self.params]

    def step(self):
        self.t += 1
        c1 = 1 - self.b1 ** self.t
        c2 = 1 - self.b2 ** self.t
        for p, m, v in zip(self.params, self.m, self.v):
            if p.grad is None:
                continue
            g = p.grad
            m *= self.b1
            m += (1 - self.b1) * g
            v *= self.b2
            v += (1 - self.b2) * g * g
            p.data = p.data - self.lr * (m / c1) / (np.sqrt(v / c2) + self.eps)

    def zero_grad(self):
        for p in self.params:
            p.grad = None
