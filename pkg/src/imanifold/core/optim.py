"""Adam with bias correction."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .autograd import Tensor


@dataclass
class AdamState:
    m: list[np.ndarray]
    v: list[np.ndarray]
    step: int = 0

    @classmethod
    def zeros_like(cls, params) -> "AdamState":
        return cls([np.zeros_like(_data(p)) for p in params], [np.zeros_like(_data(p)) for p in params])


def _data(p):
    return p.data if isinstance(p, Tensor) else np.asarray(p, dtype=np.float64)


def adam_step(params, grads, state: AdamState, lr: float, beta1: float = 0.9, beta2: float = 0.999,
              eps: float = 1e-8):
    """One bias-corrected Adam update.

    ``params`` may be arrays or tensors; arrays are returned as new arrays,
    tensors are updated in place. ``state`` is advanced in place and also
    returned.
    """
    if not lr > 0:
        raise ValueError("learning rate must be positive")
    if len(state.m) != len(params):
        raise ValueError("optimizer state does not match parameters")
    state.step += 1
    t = state.step
    c1 = 1.0 - beta1**t
    c2 = 1.0 - beta2**t
    out = []
    for i, (p, g) in enumerate(zip(params, grads)):
        g = np.zeros_like(_data(p)) if g is None else np.asarray(g, dtype=np.float64)
        state.m[i] = beta1 * state.m[i] + (1.0 - beta1) * g
        state.v[i] = beta2 * state.v[i] + (1.0 - beta2) * g * g
        update = lr * (state.m[i] / c1) / (np.sqrt(state.v[i] / c2) + eps)
        if isinstance(p, Tensor):
            p.data = p.data - update
            out.append(p)
        else:
            out.append(_data(p) - update)
    return out, state


@dataclass
class Adam:
    """Stateful wrapper over :func:`adam_step` for a fixed parameter list."""

    params: list[Tensor]
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    state: AdamState = field(init=False)

    def __post_init__(self):
        if not self.lr > 0:
            raise ValueError("learning rate must be positive")
        self.state = AdamState.zeros_like(self.params)

    def zero_grad(self) -> None:
        for p in self.params:
            p.grad = None

    def step(self, lr: float | None = None) -> None:
        adam_step(self.params, [p.grad for p in self.params], self.state,
                  self.lr if lr is None else lr, self.beta1, self.beta2, self.eps)
