"""Building blocks: linear layers, per-cloud feature normalization, MLP stacks."""

from __future__ import annotations

import numpy as np

from .tensor import Tensor


def kaiming_uniform(rng, fan_in: int, shape) -> np.ndarray:
    bound = np.sqrt(6.0 / fan_in)
    return rng.uniform(-bound, bound, shape)


class Linear:
    def __init__(self, n_in: int, n_out: int, rng):
        self.W = Tensor(kaiming_uniform(rng, n_in, (n_in, n_out)), requires_grad=True)
        self.b = Tensor(np.zeros(n_out), requires_grad=True)

    def __call__(self, x: Tensor) -> Tensor:
        return x @ self.W + self.b

    def params(self, prefix: str):
        yield f"{prefix}.W", self.W
        yield f"{prefix}.b", self.b


class FeatureNorm:
    """Normalize each channel over the point axis (axis -2) of one cloud.

    Training mode uses the statistics of the cloud at hand (independently per
    batch element, so results never depend on batch composition); inference
    uses running averages. Substitutes for batch normalization at desk scale.
    """

    def __init__(self, n_ch: int, momentum: float = 0.1, eps: float = 1e-5):
        self.gamma = Tensor(np.ones(n_ch), requires_grad=True)
        self.beta = Tensor(np.zeros(n_ch), requires_grad=True)
        self.running_mean = np.zeros(n_ch)
        self.running_var = np.ones(n_ch)
        self.momentum = momentum
        self.eps = eps

    def __call__(self, x: Tensor, training: bool) -> Tensor:
        if training:
            mu = x.mean(axis=-2, keepdims=True)
            var = ((x - mu) ** 2).mean(axis=-2, keepdims=True)
            m = self.momentum
            flat = (-1, x.shape[-1])
            self.running_mean = (1 - m) * self.running_mean + m * mu.data.reshape(
                flat
            ).mean(axis=0)
            self.running_var = (1 - m) * self.running_var + m * var.data.reshape(
                flat
            ).mean(axis=0)
            xhat = (x - mu) / (var + self.eps).sqrt()
        else:
            xhat = (x - self.running_mean) / np.sqrt(self.running_var + self.eps)
        return xhat * self.gamma + self.beta

    def params(self, prefix: str):
        yield f"{prefix}.gamma", self.gamma
        yield f"{prefix}.beta", self.beta


class PointMLP:
    """Stack of per-point linear layers with optional norm, ReLU throughout.

    The first layer is never normalized: per-cloud mean subtraction would
    exactly cancel rigid offsets of the input points (and constant-per-point
    features such as a tiled global vector) before any nonlinearity has a
    chance to encode them.
    """

    def __init__(self, widths, rng, norm: bool = True):
        self.layers = []
        for i, (n_in, n_out) in enumerate(zip(widths, widths[1:])):
            use_norm = norm and i > 0
            self.layers.append(
                (Linear(n_in, n_out, rng), FeatureNorm(n_out) if use_norm else None)
            )

    def __call__(self, x: Tensor, training: bool) -> Tensor:
        for lin, fn in self.layers:
            x = lin(x)
            if fn is not None:
                x = fn(x, training)
            x = x.relu()
        return x

    def params(self, prefix: str):
        for i, (lin, fn) in enumerate(self.layers):
            yield from lin.params(f"{prefix}.{i}")
            if fn is not None:
                yield from fn.params(f"{prefix}.{i}.norm")

    def norm_layers(self, prefix: str):
        for i, (_, fn) in enumerate(self.layers):
            if fn is not None:
                yield f"{prefix}.{i}.norm", fn


class VectorMLP:
    """Plain linear/ReLU stack on pooled vectors; the last layer stays bare."""

    def __init__(self, widths, rng, final_relu: bool = False):
        self.layers = [
            Linear(n_in, n_out, rng) for n_in, n_out in zip(widths, widths[1:])
        ]
        self.final_relu = final_relu

    def __call__(self, x: Tensor) -> Tensor:
        last = len(self.layers) - 1
        for i, lin in enumerate(self.layers):
            x = lin(x)
            if i < last or self.final_relu:
                x = x.relu()
        return x

    def params(self, prefix: str):
        for i, lin in enumerate(self.layers):
            yield from lin.params(f"{prefix}.{i}")
