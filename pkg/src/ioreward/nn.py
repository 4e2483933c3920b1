"""Tiny layer/parameter registry on top of the tensor engine."""

from __future__ import annotations

from typing import Dict, Iterator, List, Optional, Tuple

import numpy as np

from . import tensor as T
from .tensor import Tensor


def trunc_normal(rng: np.random.Generator, shape, std: float = 0.02,
                 dtype=np.float32) -> np.ndarray:
    """Normal(0, std) truncated to two standard deviations."""
    x = rng.normal(0.0, std, size=shape)
    return np.clip(x, -2.0 * std, 2.0 * std).astype(dtype)


def xavier_std(fan_in: int, fan_out: int) -> float:
    """Fan-based weight scale; keeps sub-layer outputs at O(1) so attention
    and value paths contribute immediately when training from scratch."""
    return float(np.sqrt(2.0 / (fan_in + fan_out)))


class Module:
    """Base class: attributes that are Tensors are parameters, attributes
    that are Modules (or lists of Modules) are submodules. Iteration order
    is attribute insertion order, so parameter names are deterministic for
    a given construction path."""

    def named_parameters(self, prefix: str = "") -> Dict[str, Tensor]:
        out: Dict[str, Tensor] = {}
        for name, val in vars(self).items():
            self._collect(f"{prefix}{name}", val, out)
        return out

    @staticmethod
    def _collect(key: str, val, out: Dict[str, Tensor]):
        if isinstance(val, Tensor):
            if val.requires_grad:
                out[key] = val
        elif isinstance(val, Module):
            out.update(val.named_parameters(prefix=key + "."))
        elif isinstance(val, (list, tuple)):
            for i, item in enumerate(val):
                Module._collect(f"{key}.{i}", item, out)

    def parameters(self) -> List[Tensor]:
        return list(self.named_parameters().values())

    def param_count(self) -> int:
        # Deduplicate aliased tensors (weight sharing) by identity.
        seen = {}
        for t in self.named_parameters().values():
            seen[id(t)] = t
        return sum(t.size for t in seen.values())

    def param_ids(self) -> set:
        return {id(t) for t in self.named_parameters().values()}

    def zero_grad(self):
        for t in self.named_parameters().values():
            t.grad = None

    def modules(self) -> Iterator["Module"]:
        yield self
        yield from self._submodules(list(vars(self).values()))

    @staticmethod
    def _submodules(vals) -> Iterator["Module"]:
        for val in vals:
            if isinstance(val, Module):
                yield from val.modules()
            elif isinstance(val, (list, tuple)):
                yield from Module._submodules(val)

    def set_training(self, flag: bool):
        for m in self.modules():
            m.training = flag  # type: ignore[attr-defined]

    def astype(self, dtype):
        """Cast all parameters in place (f32 <-> f64 for verification runs)."""
        for t in self.named_parameters().values():
            t.data = t.data.astype(dtype)
            t.grad = None
        return self


class Linear(Module):
    """Affine layer; weight is [in_features, out_features]."""

    def __init__(self, in_features: int, out_features: int,
                 rng: np.random.Generator, bias: bool = True,
                 dtype=np.float32):
        std = xavier_std(in_features, out_features)
        self.w = Tensor(trunc_normal(rng, (in_features, out_features),
                                     std=std, dtype=dtype),
                        requires_grad=True)
        self.b = (Tensor(np.zeros(out_features, dtype=dtype),
                         requires_grad=True) if bias else None)

    def __call__(self, x: Tensor) -> Tensor:
        return T.linear(x, self.w, self.b)


class LayerNorm(Module):
    def __init__(self, dim: int, eps: float = 1e-5, dtype=np.float32):
        self.gamma = Tensor(np.ones(dim, dtype=dtype), requires_grad=True)
        self.beta = Tensor(np.zeros(dim, dtype=dtype), requires_grad=True)
        self.eps = eps

    def __call__(self, x: Tensor) -> Tensor:
        return T.layernorm(x, self.gamma, self.beta, eps=self.eps)


class Mlp(Module):
    """Two-layer GELU MLP applied over the last axis."""

    def __init__(self, dim: int, hidden: int, rng: np.random.Generator,
                 out_dim: Optional[int] = None, dtype=np.float32):
        self.fc1 = Linear(dim, hidden, rng, dtype=dtype)
        self.fc2 = Linear(hidden, out_dim or dim, rng, dtype=dtype)

    def __call__(self, x: Tensor) -> Tensor:
        return self.fc2(T.gelu(self.fc1(x)))
