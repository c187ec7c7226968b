# plainmask - Plain Mask Transformer
# Copyright © 2026 PlainMask Developers
#
# This file is part of the PlainMask project and distributed under the
# terms of a 3-clause BSD license. See the LICENSE file in that project
# for the detailed conditions.

from __future__ import annotations

from typing import Any, Callable, Dict, Iterator, List, Optional, Sequence, Set, Tuple

import numpy as np

from .numerics import (
    DimensionError,
    Tensor,
    batch_norm,
    default_dtype,
    gelu,
    layer_norm,
    matmul,
)


class Parameter(Tensor):
    """A learnable tensor owned by a module."""

    def __init__(self, data: Any, requires_grad: bool = True):
        super().__init__(data, requires_grad=requires_grad, dtype=default_dtype())


class Buffer(Tensor):
    """A non-learnable tensor that is part of a module's state."""

    def __init__(self, data: Any):
        super().__init__(data, requires_grad=False, dtype=default_dtype())


class Module(object):
    """Base class for everything that owns parameters.

    Parameters, buffers and sub-modules are discovered by walking the
    instance attributes in definition order, descending into lists of
    modules. A tensor reachable through several paths is reported once,
    under the first path.
    """

    def _walk(self, kind: type, prefix: str, seen: Set[int]) -> Iterator[Tuple[str, Tensor]]:
        for name, value in vars(self).items():
            if isinstance(value, kind):
                if id(value) not in seen:
                    seen.add(id(value))
                    yield prefix + name, value
            elif isinstance(value, Module):
                if id(value) not in seen:
                    seen.add(id(value))
                    yield from value._walk(kind, f"{prefix}{name}.", seen)
            elif isinstance(value, (list, tuple)):
                for i, item in enumerate(value):
                    if isinstance(item, Module) and id(item) not in seen:
                        seen.add(id(item))
                        yield from item._walk(kind, f"{prefix}{name}.{i}.", seen)

    def named_parameters(self) -> Iterator[Tuple[str, Parameter]]:
        for name, p in self._walk(Parameter, "", set()):
            yield name, p  # type: ignore[misc]

    def named_buffers(self) -> Iterator[Tuple[str, Buffer]]:
        for name, b in self._walk(Buffer, "", set()):
            yield name, b  # type: ignore[misc]

    def parameters(self) -> List[Parameter]:
        return [p for _, p in self.named_parameters()]

    def trainable_parameters(self) -> Dict[str, Parameter]:
        return {n: p for n, p in self.named_parameters() if p.requires_grad}

    def freeze(self) -> None:
        """Makes every parameter gradient-exempt."""
        for p in self.parameters():
            p.requires_grad = False
            p.grad = None

    def zero_grad(self) -> None:
        for p in self.parameters():
            p.grad = None

    def state_dict(self) -> Dict[str, np.ndarray]:
        """Gets parameters and buffers, keyed by their attribute path."""
        state = {n: p.data for n, p in self.named_parameters()}
        state.update({n: b.data for n, b in self.named_buffers()})
        return state

    def load_state_dict(self, state: Dict[str, np.ndarray]) -> None:
        """Copies values into parameters and buffers.

        :raises KeyError: If a tensor of this module is missing.
        :raises DimensionError: If a shape differs.
        """
        targets: List[Tuple[str, Tensor]] = list(self.named_parameters())
        targets += list(self.named_buffers())
        for name, t in targets:
            value = np.asarray(state[name])
            if value.shape != t.shape:
                raise DimensionError(f"{name}: expected shape {t.shape}, got {value.shape}")
            t.data = np.array(value, dtype=t.dtype, copy=True)

    def num_parameters(self) -> int:
        return sum(p.data.size for p in self.parameters())


class Linear(Module):
    """Affine map ``x @ weight + bias`` over the last axis."""

    weight: Parameter
    bias: Optional[Parameter]

    def __init__(
        self,
        in_dim: int,
        out_dim: int,
        rng: np.random.Generator,
        std: float = 0.02,
        bias: bool = True,
        zero_init: bool = False,
    ):
        if zero_init:
            self.weight = Parameter(np.zeros((in_dim, out_dim)))
        else:
            self.weight = Parameter(rng.normal(0.0, std, size=(in_dim, out_dim)))
        self.bias = Parameter(np.zeros(out_dim)) if bias else None

    def __call__(self, x: Tensor) -> Tensor:
        y = matmul(x, self.weight)
        if self.bias is not None:
            y = y + self.bias
        return y


class MLP(Module):
    """Stack of Linear layers with GELU in between."""

    layers: List[Linear]

    def __init__(
        self,
        dims: Sequence[int],
        rng: np.random.Generator,
        std: float = 0.02,
        zero_last: bool = False,
        activation: Callable[[Tensor], Tensor] = gelu,
    ):
        n = len(dims) - 1
        self.layers = [
            Linear(dims[i], dims[i + 1], rng, std, zero_init=zero_last and i == n - 1)
            for i in range(n)
        ]
        self._activation = activation

    def __call__(self, x: Tensor) -> Tensor:
        for i, layer in enumerate(self.layers):
            x = layer(x)
            if i < len(self.layers) - 1:
                x = self._activation(x)
        return x


class LayerNorm(Module):
    gamma: Parameter
    beta: Parameter

    def __init__(self, dim: int, eps: float = 1e-6):
        self.gamma = Parameter(np.ones(dim))
        self.beta = Parameter(np.zeros(dim))
        self.eps = eps

    def __call__(self, x: Tensor) -> Tensor:
        return layer_norm(x, self.gamma, self.beta, self.eps)


class BNState(Module):
    """Affine parameters and running statistics of a batch normalisation.

    Running statistics start at mean 0 and variance 1, so that evaluation
    before any training step is well defined.
    """

    gamma: Parameter
    beta: Parameter
    running_mean: Buffer
    running_var: Buffer

    def __init__(self, channels: int, momentum: float = 0.1, eps: float = 1e-5):
        self.gamma = Parameter(np.ones(channels))
        self.beta = Parameter(np.zeros(channels))
        self.running_mean = Buffer(np.zeros(channels))
        self.running_var = Buffer(np.ones(channels))
        self.momentum = momentum
        self.eps = eps

    def __call__(self, x: Tensor, training: bool) -> Tensor:
        return batch_norm(x, self, training)
