"""Minimal module system over the autodiff tensors.

A Module is any object whose Tensor attributes with requires_grad=True are
its parameters; submodules and (nested) lists of submodules are walked
recursively, producing dotted parameter names. All randomness in weight
init flows through named Rng streams, so initialization is a pure function
of (seed, parameter path) and independent of construction order.
"""

from __future__ import annotations

import numpy as np

from .autodiff import Tensor, gelu, layer_norm
from .errors import TransferError
from .rng import Rng

INIT_SIGMA = 0.02


class Module:
    def named_parameters(self, prefix: str = "") -> dict[str, Tensor]:
        out: dict[str, Tensor] = {}

        def walk(name: str, val) -> None:
            if isinstance(val, Tensor):
                if val.requires_grad:
                    out[name] = val
            elif isinstance(val, Module):
                for k, v in val.named_parameters().items():
                    out[f"{name}.{k}"] = v
            elif isinstance(val, (list, tuple)):
                for i, item in enumerate(val):
                    walk(f"{name}.{i}", item)

        for attr, val in vars(self).items():
            walk(f"{prefix}{attr}" if prefix else attr, val)
        return out

    def load_parameters(self, values: dict[str, np.ndarray], strict_subset: bool = True) -> list[str]:
        """Copy arrays into matching named parameters. Returns the names
        written. Unknown names or shape mismatches raise TransferError."""
        params = self.named_parameters()
        written = []
        for name in sorted(values):
            if name not in params:
                raise TransferError(f"no parameter named {name!r} in target model")
            p = params[name]
            arr = values[name]
            if tuple(arr.shape) != p.shape:
                raise TransferError(
                    f"parameter {name!r}: checkpoint shape {tuple(arr.shape)} "
                    f"!= model shape {p.shape}")
            p.data = np.ascontiguousarray(arr, dtype=p.dtype)
            written.append(name)
        if strict_subset and not written:
            raise TransferError("no parameters were transferred")
        return written


class Linear(Module):
    """y = x @ W (+ b) with W ~ N(0, 0.02^2), b = 0."""

    def __init__(self, rng: Rng, d_in: int, d_out: int, dtype=np.float32, bias: bool = True):
        self.weight = Tensor(rng.child("weight").normal((d_in, d_out), INIT_SIGMA, dtype),
                             requires_grad=True)
        self.bias = Tensor(np.zeros(d_out, dtype=dtype), requires_grad=True) if bias else None

    def __call__(self, x: Tensor) -> Tensor:
        y = x @ self.weight
        return y + self.bias if self.bias is not None else y


class LayerNorm(Module):
    def __init__(self, dim: int, dtype=np.float32, eps: float = 1e-5):
        self.gamma = Tensor(np.ones(dim, dtype=dtype), requires_grad=True)
        self.beta = Tensor(np.zeros(dim, dtype=dtype), requires_grad=True)
        self.eps = eps

    def __call__(self, x: Tensor) -> Tensor:
        return layer_norm(x, self.gamma, self.beta, self.eps)


class Mlp(Module):
    def __init__(self, rng: Rng, dim: int, hidden: int, dtype=np.float32):
        self.fc1 = Linear(rng.child("fc1"), dim, hidden, dtype)
        self.fc2 = Linear(rng.child("fc2"), hidden, dim, dtype)

    def __call__(self, x: Tensor) -> Tensor:
        return self.fc2(gelu(self.fc1(x)))
