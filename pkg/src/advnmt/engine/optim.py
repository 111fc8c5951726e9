"""Adam and Adafactor over lists of named parameter tensors."""
from __future__ import annotations

import threading
from dataclasses import dataclass, field
from typing import Dict, List, Optional, Sequence

import numpy as np

from .tensor import Tensor


@dataclass
class Schedule:
    """Learning-rate schedule.

    ``warmup == 0`` gives a constant rate. Otherwise the rate ramps linearly to
    ``base`` over ``warmup`` steps and then decays as ``base * sqrt(warmup / step)``.
    """

    base: float = 1e-3
    warmup: int = 0

    def __call__(self, step: int) -> float:
        if self.warmup <= 0:
            return self.base
        return self.base * min(step / self.warmup, np.sqrt(self.warmup / step))


@dataclass
class OptimizerState:
    kind: str
    schedule: Schedule
    step: int = 0
    slots: Dict[str, Dict[str, np.ndarray]] = field(default_factory=dict)

    def memory(self, name: str, slot: Optional[str] = None) -> int:
        """Number of stored accumulator entries for parameter ``name``."""
        s = self.slots.get(name, {})
        if slot is not None:
            return int(s[slot].size) if slot in s else 0
        return int(sum(v.size for v in s.values()))


class Optimizer:
    kind = "base"

    def __init__(self, params: Sequence[Tensor], schedule: Schedule):
        self.params: List[Tensor] = list(params)
        for i, p in enumerate(self.params):
            if p.name is None:
                p.name = f"param{i}"
        self.state = OptimizerState(self.kind, schedule)
        self._locks = {id(p): threading.Lock() for p in self.params}
        self._step_lock = threading.Lock()

    @property
    def lr(self) -> float:
        return self.state.schedule(max(self.state.step, 1))

    def zero_grad(self) -> None:
        for p in self.params:
            p.grad = None

    def _check(self) -> None:
        for p in self.params:
            if p.grad is None:
                raise ValueError(f"{self.kind}: parameter {p.name!r} has no gradient")

    def step(self, grads: Optional[Sequence[np.ndarray]] = None) -> None:
        """Apply one update. ``grads`` (aligned with params) overrides ``p.grad``;
        this is how worker gradients are applied to shared parameters.

        Each parameter tensor is updated atomically under its own lock.
        """
        if grads is None:
            self._check()
            grads = [p.grad for p in self.params]
        elif len(grads) != len(self.params):
            raise ValueError(f"{self.kind}: got {len(grads)} gradients for {len(self.params)} parameters")
        with self._step_lock:
            self.state.step += 1
            t = self.state.step
        lr = self.state.schedule(t)
        for p, g in zip(self.params, grads):
            if g is None:
                raise ValueError(f"{self.kind}: parameter {p.name!r} has no gradient")
            with self._locks[id(p)]:
                self._update(p, np.asarray(g, dtype=p.dtype), lr, t)
                if p.grad is not None:
                    p.grad[...] = 0

    def _update(self, p: Tensor, g: np.ndarray, lr: float, t: int) -> None:
        raise NotImplementedError


class Adam(Optimizer):
    kind = "adam"

    def __init__(self, params, lr: float = 1e-3, betas=(0.9, 0.999), eps: float = 1e-8,
                 schedule: Optional[Schedule] = None):
        super().__init__(params, schedule or Schedule(lr))
        self.b1, self.b2 = betas
        self.eps = eps

    def _update(self, p, g, lr, t):
        s = self.state.slots.setdefault(p.name, {})
        if "m" not in s:
            s["m"] = np.zeros_like(p.data)
            s["v"] = np.zeros_like(p.data)
        m, v = s["m"], s["v"]
        m *= self.b1
        m += (1 - self.b1) * g
        v *= self.b2
        v += (1 - self.b2) * g * g
        mhat = m / (1 - self.b1 ** t)
        vhat = v / (1 - self.b2 ** t)
        p.data -= (lr * mhat / (np.sqrt(vhat) + self.eps)).astype(p.dtype)


class Adafactor(Optimizer):
    """Adafactor with factored second moments for rank-2 parameters.

    No first moment by default (``beta1=None``), decaying second-moment rate
    ``1 - t**decay``, and update clipping at ``clip``. ``factored=False`` keeps
    full second moments (used as the comparison variant in tests).
    """

    kind = "adafactor"

    def __init__(self, params, lr: float = 1e-3, warmup: int = 100, beta1: Optional[float] = None,
                 eps: float = 1e-30, clip: float = 1.0, decay: float = -0.8,
                 factored: bool = True, schedule: Optional[Schedule] = None):
        super().__init__(params, schedule or Schedule(lr, warmup))
        self.beta1 = beta1
        self.eps = eps
        self.clip = clip
        self.decay = decay
        self.factored = factored

    def _update(self, p, g, lr, t):
        s = self.state.slots.setdefault(p.name, {})
        rho = 1.0 - t ** self.decay
        g = g.astype(np.float64)
        g2 = g * g + self.eps
        if self.factored and p.ndim == 2:
            if "row" not in s:
                s["row"] = np.zeros(p.shape[0])
                s["col"] = np.zeros(p.shape[1])
            row, col = s["row"], s["col"]
            row *= rho
            row += (1 - rho) * g2.mean(axis=1)
            col *= rho
            col += (1 - rho) * g2.mean(axis=0)
            vhat = np.outer(row, col) / row.mean()
        else:
            if "v" not in s:
                s["v"] = np.zeros(p.shape)
            v = s["v"]
            v *= rho
            v += (1 - rho) * g2
            vhat = v
        u = g / np.sqrt(vhat)
        rms = float(np.sqrt(np.mean(u * u))) if u.size else 0.0
        u = u / max(1.0, rms / self.clip)
        if self.beta1 is not None:
            if "m" not in s:
                s["m"] = np.zeros(p.shape)
            m = s["m"]
            m *= self.beta1
            m += (1 - self.beta1) * u
            u = m
        p.data -= (lr * u).astype(p.dtype)
