"""Minimal module system and reusable layers built on the tensor core.

Parameter names are hierarchical (``head.fc1.weight``) and derived from
attribute paths in insertion order, so collection order is deterministic.
Initialisation draws one independent RNG stream per parameter, keyed by
``(seed, parameter name)``: adding parameters to a model never perturbs the
initial values of existing ones.
"""
from __future__ import annotations

import numpy as np

from .errors import ConfigError, ShapeError
from .rngutil import named_stream
from .tensor import (
    Parameter,
    Tensor,
    add,
    batch_norm_infer,
    batch_norm_train,
    conv1d_same,
    dropout,
    layer_norm,
    matmul,
    reshape,
)


class Module:
    """Base class: walks attributes to collect parameters, buffers, children."""

    mode: str = "train"

    def _entries(self):
        for attr, obj in self.__dict__.items():
            if attr.startswith("_") and attr != "_buffers":
                continue
            yield attr, obj

    def named_parameters(self, prefix: str = "") -> dict[str, Parameter]:
        out: dict[str, Parameter] = {}
        for attr, obj in self._entries():
            name = f"{prefix}{attr}"
            if isinstance(obj, Parameter):
                obj.name = name
                out[name] = obj
            elif isinstance(obj, Module):
                out.update(obj.named_parameters(f"{name}."))
            elif isinstance(obj, (list, tuple)):
                for i, item in enumerate(obj):
                    if isinstance(item, Module):
                        out.update(item.named_parameters(f"{name}.{i}."))
                    elif isinstance(item, Parameter):
                        item.name = f"{name}.{i}"
                        out[item.name] = item
            elif isinstance(obj, dict):
                for key, item in obj.items():
                    if isinstance(item, Module):
                        out.update(item.named_parameters(f"{name}.{key}."))
        return out

    def named_buffers(self, prefix: str = "") -> dict[str, np.ndarray]:
        out: dict[str, np.ndarray] = {}
        buffers = getattr(self, "_buffers", None)
        if buffers:
            for key, arr in buffers.items():
                out[f"{prefix}{key}"] = arr
        for attr, obj in self._entries():
            name = f"{prefix}{attr}"
            if isinstance(obj, Module):
                out.update(obj.named_buffers(f"{name}."))
            elif isinstance(obj, (list, tuple)):
                for i, item in enumerate(obj):
                    if isinstance(item, Module):
                        out.update(item.named_buffers(f"{name}.{i}."))
            elif isinstance(obj, dict):
                for key, item in obj.items():
                    if isinstance(item, Module):
                        out.update(item.named_buffers(f"{name}.{key}."))
        return out

    def modules(self):
        yield self
        for _, obj in self._entries():
            if isinstance(obj, Module):
                yield from obj.modules()
            elif isinstance(obj, (list, tuple)):
                for item in obj:
                    if isinstance(item, Module):
                        yield from item.modules()
            elif isinstance(obj, dict):
                for item in obj.values():
                    if isinstance(item, Module):
                        yield from item.modules()

    def set_mode(self, mode: str) -> None:
        if mode not in ("train", "infer"):
            raise ConfigError(f"unknown mode {mode!r}")
        for m in self.modules():
            m.mode = mode

    def initialize(self, seed: int) -> None:
        for name, p in self.named_parameters().items():
            if p.init == "zeros":
                p.tensor.data = np.zeros(p.data.shape)
            elif p.init == "ones":
                p.tensor.data = np.ones(p.data.shape)
            elif p.init == "fanin_uniform":
                fan = p.fan if p.fan else max(1, p.data.shape[0])
                bound = 1.0 / np.sqrt(fan)
                rng = named_stream(seed, f"init/{name}")
                p.tensor.data = rng.uniform(-bound, bound, size=p.data.shape)
            else:
                raise ConfigError(f"unknown init policy {p.init!r} on {name}")
            p.tensor.grad = None

    def load_buffers(self, values: dict[str, np.ndarray]) -> None:
        own = self.named_buffers()
        for name, arr in values.items():
            if name not in own:
                raise ShapeError(f"unknown buffer {name!r}")
            if own[name].shape != arr.shape:
                raise ShapeError(f"buffer {name!r} shape mismatch")
            own[name][...] = arr

    def parameter_count(self) -> int:
        return sum(p.data.size for p in self.named_parameters().values())


def parameter_count(module: Module) -> int:
    return module.parameter_count()


class Linear(Module):
    def __init__(self, in_dim: int, out_dim: int, zero_init: bool = False) -> None:
        w_init = "zeros" if zero_init else "fanin_uniform"
        self.weight = Parameter(np.zeros((in_dim, out_dim)), init=w_init, fan=in_dim)
        self.bias = Parameter(np.zeros(out_dim), init="zeros")

    def forward(self, x: Tensor) -> Tensor:
        lead = x.shape[:-1]
        flat = reshape(x, (-1, x.shape[-1])) if x.ndim != 2 else x
        out = add(matmul(flat, self.weight.tensor), self.bias.tensor)
        if x.ndim != 2:
            out = reshape(out, lead + (out.shape[-1],))
        return out

    __call__ = forward


class Conv1dSame(Module):
    """Same-padded 1-D convolution along the time axis of ``[B, T, C]`` input."""

    def __init__(self, in_ch: int, out_ch: int, kernel: int) -> None:
        if kernel < 1 or kernel % 2 == 0:
            raise ConfigError(f"kernel must be odd and positive, got {kernel}")
        self.weight = Parameter(np.zeros((out_ch, in_ch, kernel)),
                                init="fanin_uniform", fan=in_ch * kernel)
        self.bias = Parameter(np.zeros(out_ch), init="zeros")

    def forward(self, x: Tensor) -> Tensor:
        return conv1d_same(x, self.weight.tensor, self.bias.tensor)

    __call__ = forward


class BatchNorm(Module):
    """Batch normalisation over all axes but the last (per-feature stats)."""

    def __init__(self, dim: int, momentum: float = 0.1, eps: float = 1e-5) -> None:
        self.gamma = Parameter(np.ones(dim), init="ones")
        self.beta = Parameter(np.zeros(dim), init="zeros")
        self.momentum = momentum
        self.eps = eps
        self._buffers = {
            "running_mean": np.zeros(dim),
            "running_var": np.ones(dim),
        }

    def forward(self, x: Tensor) -> Tensor:
        if self.mode == "train":
            out, mean, var = batch_norm_train(x, self.gamma.tensor, self.beta.tensor, self.eps)
            m = self.momentum
            self._buffers["running_mean"] = (1 - m) * self._buffers["running_mean"] + m * mean
            self._buffers["running_var"] = (1 - m) * self._buffers["running_var"] + m * var
            return out
        return batch_norm_infer(
            x, self.gamma.tensor, self.beta.tensor,
            self._buffers["running_mean"], self._buffers["running_var"], self.eps,
        )

    __call__ = forward


class LayerNorm(Module):
    def __init__(self, dim: int, eps: float = 1e-5) -> None:
        self.gain = Parameter(np.ones(dim), init="ones")
        self.bias = Parameter(np.zeros(dim), init="zeros")
        self.eps = eps

    def forward(self, x: Tensor) -> Tensor:
        return layer_norm(x, self.gain.tensor, self.bias.tensor, self.eps)

    __call__ = forward


class Dropout(Module):
    def __init__(self, rate: float) -> None:
        if not 0.0 <= rate < 1.0:
            raise ConfigError(f"dropout rate must be in [0, 1), got {rate}")
        self.rate = rate

    def forward(self, x: Tensor, rng: np.random.Generator | None) -> Tensor:
        return dropout(x, self.rate, rng, self.mode)

    __call__ = forward
