from __future__ import annotations

from dataclasses import dataclass, field, replace

import numpy as np

from .model import ParamSet, ShapeError


@dataclass
class OptimizerState:
    """SGD or Adam hyperparameters plus Adam's moment vectors.

    ``m`` and ``v`` start empty and are sized on the first Adam step.
    """

    kind: str = "adam"
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    t: int = 0
    m: np.ndarray | None = field(default=None, repr=False)
    v: np.ndarray | None = field(default=None, repr=False)

    def __post_init__(self):
        if self.kind not in ("sgd", "adam"):
            raise ValueError(f"unknown optimizer {self.kind!r}")
        if self.lr <= 0:
            raise ValueError("learning rate must be positive")
        if self.eps <= 0:
            raise ValueError("eps must be positive")
        if self.t < 0:
            raise ValueError("step counter must be >= 0")

    @classmethod
    def sgd(cls, lr: float) -> "OptimizerState":
        return cls(kind="sgd", lr=lr)

    @classmethod
    def adam(cls, lr: float = 1e-3, beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8) -> "OptimizerState":
        return cls(kind="adam", lr=lr, beta1=beta1, beta2=beta2, eps=eps)

    def fresh(self) -> "OptimizerState":
        """Same hyperparameters, zeroed moments and step counter."""
        return replace(self, t=0, m=None, v=None)


def _check(params: ParamSet, grads: ParamSet) -> None:
    if grads.values.shape != params.values.shape:
        raise ShapeError(f"gradient length {grads.values.size} != parameter length {params.values.size}")


def apply_sgd(params: ParamSet, grads: ParamSet, state: OptimizerState) -> ParamSet:
    _check(params, grads)
    return ParamSet(params.values - state.lr * grads.values, params.spec_id)


def apply_adam(params: ParamSet, grads: ParamSet, state: OptimizerState) -> tuple[ParamSet, OptimizerState]:
    _check(params, grads)
    g = grads.values
    m = np.zeros_like(g) if state.m is None else state.m
    v = np.zeros_like(g) if state.v is None else state.v
    if m.shape != g.shape or v.shape != g.shape:
        raise ShapeError("Adam moment vectors do not match the gradient")
    t = state.t + 1
    m = state.beta1 * m + (1.0 - state.beta1) * g
    v = state.beta2 * v + (1.0 - state.beta2) * (g * g)
    m_hat = m / (1.0 - state.beta1 ** t)
    v_hat = v / (1.0 - state.beta2 ** t)
    new = params.values - state.lr * m_hat / (np.sqrt(v_hat) + state.eps)
    return ParamSet(new, params.spec_id), replace(state, t=t, m=m, v=v)


def apply_update(params: ParamSet, grads: ParamSet, state: OptimizerState) -> tuple[ParamSet, OptimizerState]:
    if state.kind == "sgd":
        return apply_sgd(params, grads, state), state
    return apply_adam(params, grads, state)
