"""Layers built on the op set: linear, embedding, (bi)GRU, dropout."""
from __future__ import annotations

from typing import Dict, Iterator, List, Optional, Tuple

import numpy as np

from . import ops
from .tensor import Tensor, default_dtype, parameter


class Module:
    """Container of named parameters and sub-modules.

    Attribute order defines parameter order, so two modules built the same way
    list parameters identically (checkpoints and optimizers rely on that).
    """

    training = True

    def named_parameters(self, prefix: str = "") -> Iterator[Tuple[str, Tensor]]:
        for key, value in vars(self).items():
            name = f"{prefix}{key}"
            if isinstance(value, Tensor) and value.requires_grad:
                yield name, value
            elif isinstance(value, Module):
                yield from value.named_parameters(name + ".")
            elif isinstance(value, (list, tuple)):
                for i, item in enumerate(value):
                    if isinstance(item, Module):
                        yield from item.named_parameters(f"{name}.{i}.")

    def parameters(self) -> List[Tensor]:
        params = []
        for name, p in self.named_parameters():
            p.name = name
            params.append(p)
        return params

    def modules(self) -> Iterator["Module"]:
        yield self
        for value in vars(self).values():
            if isinstance(value, Module):
                yield from value.modules()
            elif isinstance(value, (list, tuple)):
                for item in value:
                    if isinstance(item, Module):
                        yield from item.modules()

    def train(self, mode: bool = True) -> "Module":
        for m in self.modules():
            m.training = mode
        return self

    def eval(self) -> "Module":
        return self.train(False)

    def zero_grad(self) -> None:
        for p in self.parameters():
            p.grad = None

    def state_dict(self) -> Dict[str, np.ndarray]:
        return {name: p.data for name, p in self.named_parameters()}

    def load_state_dict(self, state: Dict[str, np.ndarray]) -> None:
        own = dict(self.named_parameters())
        missing = sorted(set(own) - set(state))
        unexpected = sorted(set(state) - set(own))
        if missing or unexpected:
            raise KeyError(f"state mismatch: missing={missing} unexpected={unexpected}")
        for name, p in own.items():
            arr = np.asarray(state[name])
            if arr.shape != p.shape:
                raise ValueError(f"shape mismatch for {name}: checkpoint {arr.shape} vs model {p.shape}")
            p.data = arr.astype(p.dtype, copy=True)

    def copy_from(self, other: "Module") -> None:
        """Overwrite parameter values in place with those of ``other``."""
        for (_, p), (_, q) in zip(self.named_parameters(), other.named_parameters()):
            np.copyto(p.data, q.data)

    def astype(self, dtype) -> "Module":
        for _, p in self.named_parameters():
            p.data = p.data.astype(dtype)
            p.grad = None
        return self

    def num_parameters(self) -> int:
        return int(sum(p.data.size for _, p in self.named_parameters()))


def _uniform(rng: np.random.Generator, shape, bound: float) -> np.ndarray:
    return rng.uniform(-bound, bound, size=shape).astype(default_dtype())


class Linear(Module):
    def __init__(self, d_in: int, d_out: int, rng: np.random.Generator, bias: bool = True):
        bound = np.sqrt(6.0 / (d_in + d_out))
        self.weight = parameter(_uniform(rng, (d_in, d_out), bound))
        self.bias = parameter(np.zeros(d_out, dtype=default_dtype())) if bias else None

    def __call__(self, x: Tensor) -> Tensor:
        y = ops.matmul(x, self.weight)
        return ops.add(y, self.bias) if self.bias is not None else y


class Embedding(Module):
    def __init__(self, num: int, dim: int, rng: np.random.Generator, init: Optional[np.ndarray] = None):
        if init is not None:
            if init.shape != (num, dim):
                raise ValueError(f"embedding init shape {init.shape} != {(num, dim)}")
            data = np.array(init, dtype=default_dtype())
        else:
            data = rng.normal(0.0, 0.1, size=(num, dim)).astype(default_dtype())
        self.weight = parameter(data)

    def __call__(self, ids) -> Tensor:
        return ops.embedding(self.weight, ids)


class Dropout(Module):
    def __init__(self, p: float):
        self.p = p

    def __call__(self, x: Tensor, rng: Optional[np.random.Generator]) -> Tensor:
        return ops.dropout(x, self.p, rng, self.training)


class GRUCell(Module):
    """Standard GRU cell (reset/update/new gates)."""

    def __init__(self, d_in: int, hidden: int, rng: np.random.Generator):
        bound = 1.0 / np.sqrt(hidden)
        self.hidden = hidden
        self.w_x = parameter(_uniform(rng, (d_in, 3 * hidden), bound))
        self.w_h = parameter(_uniform(rng, (hidden, 3 * hidden), bound))
        self.b_x = parameter(_uniform(rng, (3 * hidden,), bound))
        self.b_h = parameter(_uniform(rng, (3 * hidden,), bound))

    def project(self, x: Tensor) -> Tensor:
        return ops.add(ops.matmul(x, self.w_x), self.b_x)

    def __call__(self, x: Tensor, h: Tensor, mask=None) -> Tensor:
        return ops.gru_cell(self.project(x), h, self.w_h, self.b_h, mask)

    def scan(self, x: Tensor, h0: Tensor, mask=None, reverse: bool = False) -> Tensor:
        """Run over (B, S, d_in); returns (B, S, hidden)."""
        return ops.gru_sequence(self.project(x), h0, self.w_h, self.b_h, mask, reverse)


class BiGRU(Module):
    """Bidirectional single-layer GRU; output is [forward; backward] per position."""

    def __init__(self, d_in: int, hidden: int, rng: np.random.Generator):
        self.fwd = GRUCell(d_in, hidden, rng)
        self.bwd = GRUCell(d_in, hidden, rng)
        self.hidden = hidden

    @property
    def out_dim(self) -> int:
        return 2 * self.hidden

    def __call__(self, x: Tensor, mask) -> Tensor:
        B = x.shape[0]
        h0 = Tensor(np.zeros((B, self.hidden), dtype=x.dtype))
        f = self.fwd.scan(x, h0, mask)
        b = self.bwd.scan(x, h0, mask, reverse=True)
        return ops.concat([f, b], axis=-1)


def clip_grad_norm(params, max_norm: float) -> float:
    """Scale gradients in place so their global L2 norm is at most ``max_norm``."""
    total = float(np.sqrt(sum(float((p.grad.astype(np.float64) ** 2).sum())
                              for p in params if p.grad is not None)))
    if total > max_norm > 0:
        scale = max_norm / (total + 1e-12)
        for p in params:
            if p.grad is not None:
                p.grad *= scale
    return total
