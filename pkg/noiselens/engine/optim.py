"""Adaptive-moment (Adam) optimizer."""
from dataclasses import dataclass, field

import numpy as np

from noiselens.core.exceptions import MissingGradientError
from noiselens.engine.tensor import DTYPE

DEFAULT_LR = 2e-4
DEFAULT_BETA1 = 0.5
DEFAULT_BETA2 = 0.999
DEFAULT_EPS = 1e-8


@dataclass
class AdamState:
    """First/second moment estimates and the step count."""

    step: int = 0
    first_moments: list = field(default_factory=list)
    second_moments: list = field(default_factory=list)


def adam_step(params, state, lr=DEFAULT_LR, beta1=DEFAULT_BETA1, beta2=DEFAULT_BETA2,
              eps=DEFAULT_EPS):
    """Apply one bias-corrected Adam update in place.

    Args:
        params: List of parameter tensors with populated ``grad``.
        state: AdamState advanced by this call.
        lr: Learning rate.
        beta1: Decay of the first-moment estimate.
        beta2: Decay of the second-moment estimate.
        eps: Denominator guard.

    Raises:
        MissingGradientError: If any parameter has no gradient.
    """
    missing = [p.name or f"#{i}" for i, p in enumerate(params) if p.grad is None]
    if missing:
        raise MissingGradientError(f"No gradient for parameters: {', '.join(missing)}")

    if not state.first_moments:
        state.first_moments = [np.zeros_like(p.data) for p in params]
        state.second_moments = [np.zeros_like(p.data) for p in params]

    state.step += 1
    correction1 = 1.0 - beta1 ** state.step
    correction2 = 1.0 - beta2 ** state.step
    for param, m, v in zip(params, state.first_moments, state.second_moments):
        grad = param.grad.astype(DTYPE, copy=False)
        m *= DTYPE(beta1)
        m += DTYPE(1.0 - beta1) * grad
        v *= DTYPE(beta2)
        v += DTYPE(1.0 - beta2) * grad * grad
        m_hat = m / DTYPE(correction1)
        v_hat = v / DTYPE(correction2)
        param.data -= DTYPE(lr) * m_hat / (np.sqrt(v_hat) + DTYPE(eps))


class Adam:
    """Adam bound to a fixed parameter list."""

    def __init__(self, params, lr=DEFAULT_LR, beta1=DEFAULT_BETA1, beta2=DEFAULT_BETA2,
                 eps=DEFAULT_EPS):
        self.params = list(params)
        self.lr = lr
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self.state = AdamState()

    def zero_grad(self):
        for param in self.params:
            param.zero_grad()

    def step(self):
        adam_step(self.params, self.state, self.lr, self.beta1, self.beta2, self.eps)
