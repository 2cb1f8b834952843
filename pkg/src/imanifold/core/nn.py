"""Multilayer perceptrons on top of :mod:`imanifold.core.autograd`."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .autograd import Tensor, _sigmoid, parameter
from .rng import Rng

ACTIVATIONS = ("tanh", "relu", "sigmoid", "identity")

# LeCun-uniform: W ~ U(-a, a) with a = INIT_GAIN * sqrt(3 / fan_in), i.e. Var(W) = gain^2 / fan_in.
INIT_GAIN = 1.0


@dataclass(frozen=True)
class MlpSpec:
    """Layer widths, one activation tag per affine layer, and an init seed."""

    widths: tuple[int, ...]
    activations: tuple[str, ...]
    seed: int = 0
    zero_last: bool = False

    def __post_init__(self):
        object.__setattr__(self, "widths", tuple(int(w) for w in self.widths))
        object.__setattr__(self, "activations", tuple(self.activations))
        if len(self.widths) < 2:
            raise ValueError("an MLP needs at least two widths")
        if any(w <= 0 for w in self.widths):
            raise ValueError("widths must be positive")
        if len(self.activations) != len(self.widths) - 1:
            raise ValueError("need exactly one activation per affine layer")
        bad = [a for a in self.activations if a not in ACTIVATIONS]
        if bad:
            raise ValueError(f"unknown activation(s): {bad}")

    @classmethod
    def build(cls, widths, hidden: str = "tanh", out: str = "identity", seed: int = 0,
              zero_last: bool = False) -> "MlpSpec":
        n_layers = len(widths) - 1
        return cls(tuple(widths), (hidden,) * (n_layers - 1) + (out,), seed, zero_last)

    def to_dict(self) -> dict:
        return {"widths": list(self.widths), "activations": list(self.activations),
                "seed": self.seed, "zero_last": self.zero_last}

    @classmethod
    def from_dict(cls, d: dict) -> "MlpSpec":
        return cls(tuple(d["widths"]), tuple(d["activations"]), int(d["seed"]), bool(d.get("zero_last", False)))


def _act_np(name: str, a: np.ndarray) -> np.ndarray:
    if name == "tanh":
        return np.tanh(a)
    if name == "relu":
        return np.maximum(a, 0.0)
    if name == "sigmoid":
        return _sigmoid(a)
    return a


def _act_deriv_np(name: str, pre: np.ndarray, post: np.ndarray) -> np.ndarray:
    if name == "tanh":
        return 1.0 - post * post
    if name == "relu":
        return (pre > 0).astype(np.float64)
    if name == "sigmoid":
        return post * (1.0 - post)
    return np.ones_like(pre)


def _act_tensor(name: str, t: Tensor) -> Tensor:
    if name == "tanh":
        return t.tanh()
    if name == "relu":
        return t.relu()
    if name == "sigmoid":
        return t.sigmoid()
    return t


@dataclass
class Mlp:
    """Dense network ``x -> act_L(W_L ... act_1(W_1 x + b_1) ... + b_L)``.

    Parameters are stored as ``[W_1, b_1, W_2, b_2, ...]``, weights laid out
    ``(fan_in, fan_out)`` so a batch is multiplied on the right.
    """

    spec: MlpSpec
    params: list[Tensor] = field(default_factory=list)

    def __post_init__(self):
        if not self.params:
            self.params = _init_params(self.spec)

    @property
    def in_dim(self) -> int:
        return self.spec.widths[0]

    @property
    def out_dim(self) -> int:
        return self.spec.widths[-1]

    def parameters(self) -> list[Tensor]:
        return self.params

    def zero_grad(self) -> None:
        for p in self.params:
            p.grad = None

    def __call__(self, x) -> Tensor:
        h = x if isinstance(x, Tensor) else Tensor(x)
        for i, act in enumerate(self.spec.activations):
            w, b = self.params[2 * i], self.params[2 * i + 1]
            h = _act_tensor(act, h @ w + b)
        return h

    def apply(self, x: np.ndarray) -> np.ndarray:
        """Forward pass on raw arrays, no graph recorded."""
        h = np.asarray(x, dtype=np.float64)
        for i, act in enumerate(self.spec.activations):
            h = _act_np(act, h @ self.params[2 * i].data + self.params[2 * i + 1].data)
        return h

    def jacobian(self, x: np.ndarray) -> np.ndarray:
        """Per-row input Jacobian, shape ``(batch, out_dim, in_dim)``."""
        x = np.atleast_2d(np.asarray(x, dtype=np.float64))
        h = x
        jac = None
        for i, act in enumerate(self.spec.activations):
            w = self.params[2 * i].data
            pre = h @ w + self.params[2 * i + 1].data
            post = _act_np(act, pre)
            # J <- diag(act') W^T J, starting from J = I
            step = w.T[None] if jac is None else np.matmul(w.T, jac)
            jac = _act_deriv_np(act, pre, post)[:, :, None] * step
            h = post
        return jac

    def copy(self) -> "Mlp":
        return Mlp(self.spec, [parameter(p.data.copy()) for p in self.params])

    def flat_params(self) -> list[np.ndarray]:
        return [p.data.copy() for p in self.params]

    def load_flat(self, arrays) -> None:
        arrays = list(arrays)
        if len(arrays) != len(self.params):
            raise ValueError("parameter count mismatch")
        for p, a in zip(self.params, arrays):
            a = np.asarray(a, dtype=np.float64)
            if a.size != p.size:
                raise ValueError("parameter shape mismatch")
            p.data = a.reshape(p.shape).copy()


def _init_params(spec: MlpSpec) -> list[Tensor]:
    rng = Rng(spec.seed, stream=0)
    params = []
    n_layers = len(spec.widths) - 1
    for i, (fan_in, fan_out) in enumerate(zip(spec.widths[:-1], spec.widths[1:])):
        if spec.zero_last and i == n_layers - 1:
            w = np.zeros((fan_in, fan_out))
        else:
            bound = INIT_GAIN * np.sqrt(3.0 / fan_in)
            w = rng.uniform(-bound, bound, size=(fan_in, fan_out))
        params.append(parameter(w))
        params.append(parameter(np.zeros(fan_out)))
    return params
