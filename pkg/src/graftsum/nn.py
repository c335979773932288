"""Minimal layer/module machinery over the autodiff tensors."""

from __future__ import annotations

from typing import Iterator, Optional

import numpy as np

from . import tensor as T
from .tensor import Tensor


def fan_in_uniform(rng: np.random.Generator, shape: tuple) -> np.ndarray:
    """Scaled-uniform init: U(-sqrt(1/fan_in), +sqrt(1/fan_in))."""
    fan_in = shape[0] if len(shape) > 1 else shape[0]
    bound = float(np.sqrt(1.0 / fan_in))
    return rng.uniform(-bound, bound, size=shape)


class Module:
    """Base class tracking parameters, submodules, and train/eval mode."""

    def __init__(self):
        self.training = True

    def _children(self) -> Iterator[tuple[str, "Module"]]:
        for name, value in vars(self).items():
            if isinstance(value, Module):
                yield name, value
            elif isinstance(value, ModuleList):
                for i, sub in enumerate(value):
                    yield f"{name}.{i}", sub

    def named_parameters(self, prefix: str = "") -> Iterator[tuple[str, Tensor]]:
        """Yield (dot-path, tensor) pairs in deterministic attribute order."""
        for name, value in vars(self).items():
            if isinstance(value, Tensor) and value.requires_grad:
                yield prefix + name, value
        for name, child in self._children():
            yield from child.named_parameters(prefix + name + ".")

    def parameters(self) -> list[Tensor]:
        return [p for _, p in self.named_parameters()]

    def train(self) -> "Module":
        self.training = True
        for _, child in self._children():
            child.train()
        return self

    def eval(self) -> "Module":
        self.training = False
        for _, child in self._children():
            child.eval()
        return self

    def zero_grad(self) -> None:
        for p in self.parameters():
            p.grad = None

    def num_parameters(self) -> int:
        return sum(p.size for p in self.parameters())

    def state_arrays(self) -> dict[str, np.ndarray]:
        return {name: p.data for name, p in self.named_parameters()}

    def load_state_arrays(self, arrays: dict[str, np.ndarray], strict: bool = True) -> None:
        """Assign parameter values by exact name; strict mode rejects any mismatch."""
        own = dict(self.named_parameters())
        if strict:
            missing = sorted(set(own) - set(arrays))
            extra = sorted(set(arrays) - set(own))
            if missing or extra:
                raise KeyError(
                    f"parameter name mismatch: missing={missing[:5]} extra={extra[:5]}"
                )
        for name, arr in arrays.items():
            if name not in own:
                continue
            p = own[name]
            if tuple(arr.shape) != p.shape:
                raise ValueError(
                    f"parameter {name!r}: stored shape {tuple(arr.shape)} != model shape {p.shape}"
                )
            # asarray, not ascontiguousarray: 0-d params must stay 0-d
            p.data = np.asarray(arr, dtype=T.default_dtype(), order="C")
            p.grad = None


class ModuleList(list):
    """A plain list of modules that participates in parameter traversal."""


class Linear(Module):
    def __init__(self, in_dim: int, out_dim: int, rng: np.random.Generator, bias: bool = True):
        super().__init__()
        self.weight = Tensor(fan_in_uniform(rng, (in_dim, out_dim)), requires_grad=True)
        self.bias = Tensor(np.zeros(out_dim), requires_grad=True) if bias else None

    def __call__(self, x: Tensor) -> Tensor:
        out = T.matmul(x, self.weight)
        if self.bias is not None:
            out = T.add(out, self.bias)
        return out


class Embedding(Module):
    def __init__(self, vocab_size: int, dim: int, rng: np.random.Generator):
        super().__init__()
        scale = 1.0 / np.sqrt(dim)
        self.weight = Tensor(rng.normal(0.0, scale, size=(vocab_size, dim)), requires_grad=True)

    def __call__(self, ids: np.ndarray) -> Tensor:
        return T.embedding_lookup(self.weight, ids)


class LayerNorm(Module):
    def __init__(self, dim: int, eps: float = 1e-5):
        super().__init__()
        self.gain = Tensor(np.ones(dim), requires_grad=True)
        self.bias = Tensor(np.zeros(dim), requires_grad=True)
        self.eps = eps

    def __call__(self, x: Tensor) -> Tensor:
        return T.layer_norm(x, self.gain, self.bias, eps=self.eps)


class Dropout(Module):
    """Inverted dropout driven by an externally seeded generator."""

    def __init__(self, rate: float):
        super().__init__()
        self.rate = rate
        self.rng: Optional[np.random.Generator] = None

    def __call__(self, x: Tensor) -> Tensor:
        if not self.training or self.rate <= 0.0:
            return x
        if self.rng is None:
            raise RuntimeError("dropout used in training mode without a seeded rng")
        return T.dropout(x, self.rate, self.rng, training=True)


def seed_dropout(module: Module, rng: np.random.Generator) -> None:
    """Point every Dropout in the tree at one shared per-run generator."""
    if isinstance(module, Dropout):
        module.rng = rng
    for _, child in module._children():
        seed_dropout(child, rng)
