"""Parameterized building blocks shared by the gates and the reconstructor."""

from __future__ import annotations

import numpy as np

from . import tensor as T
from .tensor import Parameter, RunningStats, Tensor


def uniform_kernel(rng: np.random.Generator, shape, fan_in: int, gain: float = 1.0) -> np.ndarray:
    """Centered uniform init with variance ``gain**2 / fan_in``."""
    bound = gain * np.sqrt(3.0 / fan_in)
    return rng.uniform(-bound, bound, size=shape).astype(T.default_dtype())


class Conv:
    """Convolution layer holding ``[kh,kw,Cin,Cout]`` weights and a bias."""

    def __init__(self, name: str, kh: int, kw: int, cin: int, cout: int, rng: np.random.Generator,
                 stride=(1, 1), padding: str = "same", bias: bool = True, gain: float = 1.0):
        self.name = name
        self.stride = stride
        self.padding = padding
        self.weight = Parameter(f"{name}.weight", uniform_kernel(rng, (kh, kw, cin, cout), kh * kw * cin, gain))
        self.bias = Parameter(f"{name}.bias", np.zeros((1, 1, 1, cout), dtype=T.default_dtype())) if bias else None

    @property
    def kernel_shape(self):
        return self.weight.shape

    def __call__(self, x: Tensor) -> Tensor:
        return T.conv2d(x, self.weight.value, self.bias.value if self.bias else None,
                        stride=self.stride, padding=self.padding)

    def parameters(self) -> list[Parameter]:
        return [self.weight] + ([self.bias] if self.bias else [])


class ConvTranspose:
    """Transposed convolution holding ``[kh,kw,Cout,Cin]`` weights."""

    def __init__(self, name: str, kh: int, kw: int, cin: int, cout: int, rng: np.random.Generator,
                 stride=(1, 1), bias: bool = True):
        self.name = name
        self.stride = stride
        # each output pixel receives exactly one contribution when stride == kernel
        fan_in = cin if tuple(stride) == (kh, kw) else kh * kw * cin
        self.weight = Parameter(f"{name}.weight", uniform_kernel(rng, (kh, kw, cout, cin), fan_in))
        self.bias = Parameter(f"{name}.bias", np.zeros((1, 1, 1, cout), dtype=T.default_dtype())) if bias else None

    @property
    def kernel_shape(self):
        return self.weight.shape

    def __call__(self, x: Tensor) -> Tensor:
        return T.conv_transpose2d(x, self.weight.value, self.bias.value if self.bias else None, stride=self.stride)

    def parameters(self) -> list[Parameter]:
        return [self.weight] + ([self.bias] if self.bias else [])


class BatchNorm:
    """Batchnorm with learnable affine and running statistics.

    ``slots`` > 1 keeps separate running statistics per slot (used for the
    recurrent unit, one slot per step) while sharing gamma and beta.
    """

    def __init__(self, name: str, channels: int, slots: int = 1, momentum: float = 0.1, epsilon: float = 1e-5):
        self.name = name
        self.channels = channels
        self.momentum = momentum
        self.epsilon = epsilon
        dt = T.default_dtype()
        self.gamma = Parameter(f"{name}.gamma", np.ones((1, 1, 1, channels), dtype=dt))
        self.beta = Parameter(f"{name}.beta", np.zeros((1, 1, 1, channels), dtype=dt))
        self.stats = [RunningStats(channels) for _ in range(slots)]

    def __call__(self, x: Tensor, train: bool, slot: int = 0) -> Tensor:
        stats = self.stats[min(slot, len(self.stats) - 1)]
        return T.batchnorm(x, self.gamma.value, self.beta.value, "train" if train else "eval",
                           stats, self.momentum, self.epsilon)

    def parameters(self) -> list[Parameter]:
        return [self.gamma, self.beta]

    def buffers(self) -> dict[str, np.ndarray]:
        """Running statistics packed as ``[1, 1, slots, C]`` arrays plus counts."""
        mean = np.concatenate([s.mean for s in self.stats], axis=2)
        var = np.concatenate([s.var for s in self.stats], axis=2)
        count = np.array([s.count for s in self.stats], dtype=np.float32).reshape(1, 1, -1, 1)
        return {f"{self.name}.running_mean": mean, f"{self.name}.running_var": var,
                f"{self.name}.running_count": count}

    def load_buffers(self, arrays: dict[str, np.ndarray]) -> None:
        mean = arrays[f"{self.name}.running_mean"]
        var = arrays[f"{self.name}.running_var"]
        count = arrays[f"{self.name}.running_count"]
        slots = mean.shape[2]
        self.stats = []
        for s in range(slots):
            rs = RunningStats(self.channels, dtype=mean.dtype)
            rs.mean = mean[:, :, s : s + 1, :].copy()
            rs.var = var[:, :, s : s + 1, :].copy()
            rs.count = int(count[0, 0, s, 0])
            self.stats.append(rs)
