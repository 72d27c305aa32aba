"""Parameter containers and the small set of layers the decoder is built from."""

from __future__ import annotations

from typing import Iterator

import numpy as np

from . import tensor as T
from .tensor import Parameter, Tensor


def trunc_normal(rng: np.random.Generator, shape, std: float = 0.02) -> np.ndarray:
    """Normal(0, std) samples redrawn until they fall inside +-2 std."""
    out = rng.normal(0.0, std, size=shape)
    bad = np.abs(out) > 2 * std
    while bad.any():
        out[bad] = rng.normal(0.0, std, size=int(bad.sum()))
        bad = np.abs(out) > 2 * std
    return out.astype(np.float32)


class Module:
    """Base class; parameters and child modules are discovered from attributes."""

    def named_parameters(self, prefix: str = "") -> Iterator[tuple[str, Parameter]]:
        for key, value in vars(self).items():
            name = f"{prefix}{key}"
            if isinstance(value, Parameter):
                yield name, value
            elif isinstance(value, Module):
                yield from value.named_parameters(name + ".")
            elif isinstance(value, (list, tuple)):
                for i, item in enumerate(value):
                    if isinstance(item, Module):
                        yield from item.named_parameters(f"{name}.{i}.")
                    elif isinstance(item, Parameter):
                        yield f"{name}.{i}", item
            elif isinstance(value, dict):
                for k, item in value.items():
                    if isinstance(item, Module):
                        yield from item.named_parameters(f"{name}.{k}.")

    def parameters(self) -> list[Parameter]:
        return [p for _, p in self.named_parameters()]

    def num_parameters(self) -> int:
        return sum(p.size for p in self.parameters())

    def zero_grad(self) -> None:
        for p in self.parameters():
            p.zero_grad()

    def astype(self, dtype) -> "Module":
        """Convert every parameter in place (float64 is used for gradient checks)."""
        for p in self.parameters():
            p.data = np.ascontiguousarray(p.data.astype(dtype))
            p.zero_grad()
        return self

    def state_dict(self) -> dict[str, np.ndarray]:
        return {name: p.data.copy() for name, p in self.named_parameters()}

    def load_state_dict(self, state: dict[str, np.ndarray]) -> None:
        own = dict(self.named_parameters())
        missing = set(own) - set(state)
        unexpected = set(state) - set(own)
        if missing or unexpected:
            raise KeyError(f"state mismatch: missing={sorted(missing)} unexpected={sorted(unexpected)}")
        for name, p in own.items():
            p.assign(state[name])


class Linear(Module):
    """Token-wise affine map; weight stored (in, out) so that y = x @ W + b."""

    def __init__(self, d_in: int, d_out: int, rng: np.random.Generator, bias: bool = True):
        self.weight = Parameter(trunc_normal(rng, (d_in, d_out)))
        if bias:
            self.bias = Parameter(np.zeros(d_out, dtype=np.float32))
        else:
            self.bias = None

    def __call__(self, x: Tensor) -> Tensor:
        return T.linear(x, self.weight, self.bias)


class LayerNorm(Module):
    def __init__(self, dim: int, eps: float = 1e-5):
        self.weight = Parameter(np.ones(dim, dtype=np.float32))
        self.bias = Parameter(np.zeros(dim, dtype=np.float32))
        self.eps = eps

    def __call__(self, x: Tensor) -> Tensor:
        return T.layer_norm(x, self.weight, self.bias, self.eps)


class Conv1x1(Module):
    def __init__(self, c_in: int, c_out: int, rng: np.random.Generator, bias: bool = True):
        self.weight = Parameter(trunc_normal(rng, (c_out, c_in)))
        self.bias = Parameter(np.zeros(c_out, dtype=np.float32)) if bias else None

    def __call__(self, x: Tensor) -> Tensor:
        return T.conv1x1(x, self.weight, self.bias)


class MixFFN(Module):
    """Linear expand, depthwise 3x3 on the spatial layout, GELU, linear project back."""

    def __init__(self, dim: int, expansion: int, rng: np.random.Generator):
        hidden = dim * expansion
        self.fc1 = Linear(dim, hidden, rng)
        self.dw_weight = Parameter(trunc_normal(rng, (hidden, 3, 3)))
        self.dw_bias = Parameter(np.zeros(hidden, dtype=np.float32))
        self.fc2 = Linear(hidden, dim, rng)

    def __call__(self, x: Tensor, height: int, width: int) -> Tensor:
        h = self.fc1(x)
        h = T.tokens_to_spatial(h, height, width)
        h = T.depthwise_conv3x3(h, self.dw_weight, self.dw_bias)
        h = T.gelu(T.spatial_to_tokens(h))
        return self.fc2(h)
