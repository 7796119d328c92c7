"""Parameter containers and the few layer types the models are built from.

Module tracks parameters (Tensor attributes), persistent buffers
(numpy arrays registered by name, e.g. batchnorm running stats) and
submodules, all in attribute insertion order so checkpoint naming is stable.
"""
from __future__ import annotations

import numpy as np

from . import ops
from .errors import CheckpointError, ContractViolation
from .tensor import Tensor


class Module:
    def __init__(self):
        self._buffer_names: list[str] = []
        self.training = True

    def register_buffer(self, name: str, arr: np.ndarray):
        setattr(self, name, arr)
        self._buffer_names.append(name)

    def _children(self):
        for name, val in self.__dict__.items():
            if isinstance(val, Module):
                yield name, val
            elif isinstance(val, ModuleList):
                for i, m in enumerate(val):
                    yield f"{name}.{i}", m

    def named_parameters(self, prefix: str = "") -> dict[str, Tensor]:
        out: dict[str, Tensor] = {}
        for name, val in self.__dict__.items():
            if isinstance(val, Tensor) and val.requires_grad:
                out[prefix + name] = val
        for name, child in self._children():
            out.update(child.named_parameters(prefix + name + "."))
        return out

    def named_buffers(self, prefix: str = "") -> dict[str, np.ndarray]:
        out: dict[str, np.ndarray] = {}
        for name in self._buffer_names:
            out[prefix + name] = getattr(self, name)
        for name, child in self._children():
            out.update(child.named_buffers(prefix + name + "."))
        return out

    def parameters(self) -> list[Tensor]:
        return list(self.named_parameters().values())

    def state_dict(self) -> dict[str, np.ndarray]:
        out = {k: v.data for k, v in self.named_parameters().items()}
        for k, v in self.named_buffers().items():
            if k in out:
                raise ContractViolation(f"duplicate state name '{k}'")
            out[k] = v
        return out

    def load_state_dict(self, blobs: dict):
        own = self.state_dict()
        missing = sorted(set(own) - set(blobs))
        extra = sorted(set(blobs) - set(own))
        if missing or extra:
            raise CheckpointError(
                f"state mismatch, missing={missing[:4]} extra={extra[:4]}")
        for k, arr in own.items():
            src = blobs[k]
            if tuple(src.shape) != tuple(arr.shape):
                raise CheckpointError(
                    f"'{k}': shape {src.shape} vs expected {arr.shape}")
            arr[...] = src.astype(arr.dtype)

    def train(self, mode: bool = True):
        self.training = mode
        for _, child in self._children():
            child.train(mode)
        return self

    def eval(self):
        return self.train(False)


class ModuleList(list):
    pass


def _kaiming(rng: np.random.Generator, shape, fan_in: int) -> np.ndarray:
    std = np.sqrt(2.0 / max(1, fan_in))
    return (rng.standard_normal(shape) * std).astype(np.float32)


class Conv2d(Module):
    def __init__(self, cin: int, cout: int, k: int, rng: np.random.Generator,
                 stride: int = 1, padding: int = 0, bias: bool = True):
        super().__init__()
        self.stride = stride
        self.padding = padding
        self.weight = Tensor(_kaiming(rng, (cout, cin, k, k), cin * k * k),
                             requires_grad=True)
        self.bias = Tensor(np.zeros(cout, dtype=np.float32),
                           requires_grad=True) if bias else None

    def __call__(self, x: Tensor) -> Tensor:
        return ops.conv2d(x, self.weight, self.bias, self.stride,
                          self.padding)


class Conv3d(Module):
    def __init__(self, cin: int, cout: int, k: int, rng: np.random.Generator,
                 stride: int = 1, padding: int = 0, bias: bool = True):
        super().__init__()
        self.stride = stride
        self.padding = padding
        self.weight = Tensor(
            _kaiming(rng, (cout, cin, k, k, k), cin * k ** 3),
            requires_grad=True)
        self.bias = Tensor(np.zeros(cout, dtype=np.float32),
                           requires_grad=True) if bias else None

    def __call__(self, x: Tensor) -> Tensor:
        return ops.conv3d(x, self.weight, self.bias, self.stride,
                          self.padding)


class BatchNorm(Module):
    """Channel-axis batch normalization for 2-D or 3-D feature maps."""

    def __init__(self, c: int, momentum: float = 0.1, eps: float = 1e-5):
        super().__init__()
        self.momentum = momentum
        self.eps = eps
        self.gamma = Tensor(np.ones(c, dtype=np.float32), requires_grad=True)
        self.beta = Tensor(np.zeros(c, dtype=np.float32), requires_grad=True)
        self.register_buffer("running_mean", np.zeros(c, dtype=np.float32))
        self.register_buffer("running_var", np.ones(c, dtype=np.float32))

    def __call__(self, x: Tensor) -> Tensor:
        return ops.batchnorm(x, self.gamma, self.beta, self.running_mean,
                             self.running_var, self.training, self.momentum,
                             self.eps)


class Linear(Module):
    def __init__(self, cin: int, cout: int, rng: np.random.Generator,
                 bias: bool = True):
        super().__init__()
        self.weight = Tensor(_kaiming(rng, (cin, cout), cin),
                             requires_grad=True)
        self.bias = Tensor(np.zeros(cout, dtype=np.float32),
                           requires_grad=True) if bias else None

    def __call__(self, x: Tensor) -> Tensor:
        out = ops.matmul(x, self.weight)
        if self.bias is not None:
            out = ops.add(out, ops.reshape(self.bias, (1, -1)))
        return out


class MLP(Module):
    """Stack of Linear layers with relu between them, none after the last."""

    def __init__(self, sizes, rng: np.random.Generator, bias: bool = True):
        super().__init__()
        if len(sizes) < 2:
            raise ContractViolation("MLP: need at least input and output size")
        self.layers = ModuleList(
            Linear(sizes[i], sizes[i + 1], rng, bias=bias)
            for i in range(len(sizes) - 1))

    def __call__(self, x: Tensor) -> Tensor:
        for i, layer in enumerate(self.layers):
            x = layer(x)
            if i + 1 < len(self.layers):
                x = ops.relu(x)
        return x

    def zero_(self):
        """Zero every weight and bias (handy for saturation tests)."""
        for layer in self.layers:
            layer.weight.data[...] = 0
            if layer.bias is not None:
                layer.bias.data[...] = 0

    def scale_final_(self, factor: float):
        """Shrink the last layer so early outputs start near zero."""
        self.layers[-1].weight.data *= factor
