"""A small module system: parameter discovery, buffers, train/eval, state."""
from __future__ import annotations

from typing import Iterator

import numpy as np

from . import functional as F
from .tensor import Tensor


def parameter(data: np.ndarray) -> Tensor:
    return Tensor(data, requires_grad=True)


class Module:
    training: bool = True

    def __init__(self) -> None:
        self._buffers: dict[str, np.ndarray] = {}

    def __call__(self, *args, **kwargs):
        return self.forward(*args, **kwargs)

    def forward(self, *args, **kwargs):
        raise NotImplementedError

    def _children(self) -> Iterator[tuple[str, object]]:
        for name, value in vars(self).items():
            if name.startswith("_") or name == "training":
                continue
            if isinstance(value, (Module, Tensor)):
                yield name, value
            elif isinstance(value, (list, tuple)):
                for i, v in enumerate(value):
                    if isinstance(v, (Module, Tensor)):
                        yield f"{name}.{i}", v
            elif isinstance(value, dict):
                for k, v in value.items():
                    if isinstance(v, (Module, Tensor)):
                        yield f"{name}.{k}", v

    def named_parameters(self, prefix: str = "") -> Iterator[tuple[str, Tensor]]:
        for name, child in self._children():
            full = f"{prefix}{name}"
            if isinstance(child, Tensor):
                if child.requires_grad:
                    yield full, child
            else:
                yield from child.named_parameters(full + ".")

    def parameters(self) -> list[Tensor]:
        return [p for _, p in self.named_parameters()]

    def named_buffers(self, prefix: str = "") -> Iterator[tuple[str, np.ndarray]]:
        for name, buf in self._buffers.items():
            yield f"{prefix}{name}", buf
        for name, child in self._children():
            if isinstance(child, Module):
                yield from child.named_buffers(f"{prefix}{name}.")

    def modules(self) -> Iterator["Module"]:
        yield self
        for _, child in self._children():
            if isinstance(child, Module):
                yield from child.modules()

    def train(self, mode: bool = True) -> "Module":
        for m in self.modules():
            m.training = mode
        return self

    def eval(self) -> "Module":
        return self.train(False)

    def state_dict(self) -> dict[str, np.ndarray]:
        state = {name: p.data.copy() for name, p in self.named_parameters()}
        state.update({f"{name}#buf": b.copy() for name, b in self.named_buffers()})
        return state

    def load_state_dict(self, state: dict[str, np.ndarray]) -> None:
        params = dict(self.named_parameters())
        buffers = dict(self.named_buffers())
        expected = set(params) | {f"{n}#buf" for n in buffers}
        missing = expected - set(state)
        if missing:
            raise KeyError(f"state is missing {sorted(missing)[:5]}")
        for name, p in params.items():
            src = state[name]
            if src.shape != p.shape:
                raise ValueError(f"{name}: shape {src.shape} != {p.shape}")
            p.data = src.astype(p.dtype, copy=True)
        for name, b in buffers.items():
            b[...] = state[f"{name}#buf"]


def kaiming(rng: np.random.Generator, shape, fan_in: int, dtype) -> np.ndarray:
    return (rng.standard_normal(shape) * np.sqrt(2.0 / fan_in)).astype(dtype)


class Conv2d(Module):
    def __init__(self, c_in: int, c_out: int, k: int, stride: int = 1, *, rng, dtype=np.float32):
        super().__init__()
        self.stride = stride
        self.weight = parameter(kaiming(rng, (c_out, c_in, k, k), c_in * k * k, dtype))

    def forward(self, x: Tensor) -> Tensor:
        return F.conv2d(x, self.weight, self.stride)


class DepthwiseConv2d(Module):
    def __init__(self, channels: int, k: int, stride: int = 1, *, rng, dtype=np.float32):
        super().__init__()
        self.stride = stride
        self.weight = parameter(kaiming(rng, (channels, 1, k, k), k * k, dtype))

    def forward(self, x: Tensor) -> Tensor:
        return F.depthwise_conv2d(x, self.weight, self.stride)


class BatchNorm2d(Module):
    def __init__(self, channels: int, affine: bool = True, *, dtype=np.float32,
                 momentum: float = 0.1, eps: float = 1e-5):
        super().__init__()
        self.momentum, self.eps = momentum, eps
        self.gamma = parameter(np.ones(channels, dtype)) if affine else None
        self.beta = parameter(np.zeros(channels, dtype)) if affine else None
        self._buffers["running_mean"] = np.zeros(channels, dtype)
        self._buffers["running_var"] = np.ones(channels, dtype)

    def forward(self, x: Tensor) -> Tensor:
        return F.batch_norm2d(x, self.gamma, self.beta,
                              self._buffers["running_mean"], self._buffers["running_var"],
                              self.training, self.momentum, self.eps)


class Linear(Module):
    def __init__(self, n_in: int, n_out: int, *, rng, dtype=np.float32):
        super().__init__()
        bound = 1.0 / np.sqrt(n_in)
        self.weight = parameter(rng.uniform(-bound, bound, (n_out, n_in)).astype(dtype))
        self.bias = parameter(rng.uniform(-bound, bound, n_out).astype(dtype))

    def forward(self, x: Tensor) -> Tensor:
        return F.linear(x, self.weight, self.bias)


class SeparableConv(Module):
    """ReLU -> depthwise k x k -> pointwise 1 x 1 -> batch norm."""

    KERNELS = (1, 3, 5)

    def __init__(self, c_in: int, c_out: int, k: int, stride: int = 1, affine: bool = True,
                 *, rng, dtype=np.float32):
        super().__init__()
        if k not in self.KERNELS:
            raise ValueError(f"separable conv kernel must be one of {self.KERNELS}, got {k}")
        self.depthwise = DepthwiseConv2d(c_in, k, stride, rng=rng, dtype=dtype)
        self.pointwise = Conv2d(c_in, c_out, 1, rng=rng, dtype=dtype)
        self.bn = BatchNorm2d(c_out, affine, dtype=dtype)

    def forward(self, x: Tensor) -> Tensor:
        return self.bn(self.pointwise(self.depthwise(F.relu(x))))
