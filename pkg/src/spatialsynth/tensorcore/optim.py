"""Adaptive-moment (Adam) optimizer."""

from __future__ import annotations

import numpy as np

from .graph import Tensor


class NonFiniteGradient(FloatingPointError):
    pass


class Adam:
    """Adam with bias correction and optional global-norm clipping.

    The optimizer is the only writer of parameter data; updates happen in
    place on ``Tensor.data``.
    """

    def __init__(self, params: dict[str, Tensor], lr: float = 1e-3, betas=(0.9, 0.999),
                 eps: float = 1e-8, clip_norm: float | None = None):
        self.params = dict(params)
        self.lr = lr
        self.beta1, self.beta2 = betas
        self.eps = eps
        self.clip_norm = clip_norm
        self.step_count = 0
        self.m = {k: np.zeros_like(t.data, dtype=np.float64) for k, t in self.params.items()}
        self.v = {k: np.zeros_like(t.data, dtype=np.float64) for k, t in self.params.items()}

    def step(self, grads: dict[str, np.ndarray] | None = None) -> None:
        """Apply one update.  ``grads`` defaults to each tensor's ``.grad``."""
        if grads is None:
            grads = {k: t.grad for k, t in self.params.items() if t.grad is not None}
        for k, g in grads.items():
            if k not in self.params:
                raise KeyError(f"gradient for unknown parameter {k!r}")
            if g.shape != self.params[k].shape:
                raise ValueError(f"gradient shape {g.shape} != parameter {k!r} shape {self.params[k].shape}")
            if not np.all(np.isfinite(g)):
                raise NonFiniteGradient(f"non-finite gradient for parameter {k!r}")
        factor = 1.0
        if self.clip_norm is not None:
            total = float(np.sqrt(sum(float(np.sum(np.square(g, dtype=np.float64))) for g in grads.values())))
            if total > self.clip_norm:
                factor = self.clip_norm / total
        self.step_count += 1
        t = self.step_count
        b1, b2 = self.beta1, self.beta2
        corr1 = 1.0 - b1 ** t
        corr2 = 1.0 - b2 ** t
        for k, g in grads.items():
            g = g.astype(np.float64) * factor
            m = self.m[k]
            v = self.v[k]
            m *= b1
            m += (1.0 - b1) * g
            v *= b2
            v += (1.0 - b2) * g * g
            update = self.lr * (m / corr1) / (np.sqrt(v / corr2) + self.eps)
            p = self.params[k]
            p.data = (p.data - update).astype(p.dtype)

    def zero_grad(self) -> None:
        for t in self.params.values():
            t.grad = None

    def state_dict(self) -> dict[str, np.ndarray]:
        out = {"__step__": np.array([self.step_count], dtype=np.float64)}
        for k in self.params:
            out[f"m.{k}"] = self.m[k]
            out[f"v.{k}"] = self.v[k]
        return out

    def load_state_dict(self, state: dict[str, np.ndarray]) -> None:
        self.step_count = int(state["__step__"][0])
        for k in self.params:
            self.m[k] = np.array(state[f"m.{k}"], dtype=np.float64)
            self.v[k] = np.array(state[f"v.{k}"], dtype=np.float64)
