"""Adam optimizer and the max-norm kernel constraint."""

from __future__ import annotations

from collections.abc import Iterable

import numpy as np

from .graph import Parameter


class NonFiniteGradientError(FloatingPointError):
    """Raised when a gradient contains NaN or inf; the step is not applied."""


class Adam:
    """Bias-corrected Adam.

    Moments are keyed by parameter name, so the optimizer can be rebuilt from a
    checkpoint as long as names are stable.
    """

    def __init__(self, params: Iterable[Parameter], lr=1e-3, beta1=0.9, beta2=0.999, eps=1e-8):
        self.params = list(params)
        self.lr = lr
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self.step_count = 0
        self.m = {p.name: np.zeros_like(p.value) for p in self.params}
        self.v = {p.name: np.zeros_like(p.value) for p in self.params}

    def step(self) -> None:
        bad = [p.name for p in self.params if not np.all(np.isfinite(p.grad))]
        if bad:
            raise NonFiniteGradientError(f"non-finite gradient in {bad}; step {self.step_count + 1} aborted")
        self.step_count += 1
        t = self.step_count
        c1 = 1.0 - self.beta1 ** t
        c2 = 1.0 - self.beta2 ** t
        for p in self.params:
            m = self.m[p.name]
            v = self.v[p.name]
            m *= self.beta1
            m += (1.0 - self.beta1) * p.grad
            v *= self.beta2
            v += (1.0 - self.beta2) * p.grad ** 2
            p.value -= self.lr * (m / c1) / (np.sqrt(v / c2) + self.eps)

    def zero_grad(self) -> None:
        for p in self.params:
            p.zero_grad()


def maxnorm_project(kernel: np.ndarray, c: float = 0.4) -> np.ndarray:
    """Rescale each output filter (axis 0) whose L2 norm exceeds ``c`` onto the
    ball of radius ``c``; other filters are returned unchanged."""
    if c <= 0:
        raise ValueError("max-norm radius must be positive")
    axes = tuple(range(1, kernel.ndim))
    norms = np.sqrt((kernel ** 2).sum(axis=axes, keepdims=True))
    scale = np.where(norms > c, c / np.where(norms > 0, norms, 1.0), 1.0)
    return kernel * scale
