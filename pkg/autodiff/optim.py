from dataclasses import dataclass, field
from typing import List, Optional, Sequence

import numpy as np

from autodiff.tensor import Tensor
from errors import NumericalError, ShapeError


@dataclass
class AdamState:
    lr: float = 1e-4
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    step_count: int = 0
    first_moment: List[np.ndarray] = field(default_factory=list)
    second_moment: List[np.ndarray] = field(default_factory=list)

    @classmethod
    def fresh(cls, params: Sequence[Tensor], lr: float = 1e-4, beta1: float = 0.9,
              beta2: float = 0.999, eps: float = 1e-8) -> "AdamState":
        return cls(lr=lr, beta1=beta1, beta2=beta2, eps=eps,
                   first_moment=[np.zeros_like(p.data) for p in params],
                   second_moment=[np.zeros_like(p.data) for p in params])


def _check(params: Sequence[Tensor], grads: Sequence[Optional[np.ndarray]]) -> None:
    if len(params) != len(grads):
        raise ShapeError(f"{len(params)} params but {len(grads)} grads")
    for p, g in zip(params, grads):
        if g is None:
            continue
        if g.shape != p.shape:
            raise ShapeError(f"grad shape {g.shape} does not match param shape {p.shape}")
        if not np.all(np.isfinite(g)):
            raise NumericalError("non-finite gradient passed to optimizer")


def adam_step(params: Sequence[Tensor], grads: Sequence[Optional[np.ndarray]], state: AdamState) -> AdamState:
    """
    One bias-corrected Adam update, in place on `params`.

    A missing gradient (None) is treated as zero. The state's moments must match the
    parameter shapes.
    """
    _check(params, grads)
    if len(state.first_moment) != len(params):
        raise ShapeError("optimizer state was built for a different parameter list")
    state.step_count += 1
    bc1 = 1.0 - state.beta1 ** state.step_count
    bc2 = 1.0 - state.beta2 ** state.step_count
    step_size = state.lr / bc1
    for i, (p, g) in enumerate(zip(params, grads)):
        m, v = state.first_moment[i], state.second_moment[i]
        if m.shape != p.shape:
            raise ShapeError(f"moment shape {m.shape} does not match param shape {p.shape}")
        if g is None:
            g = np.zeros_like(p.data)
        m *= state.beta1
        m += (1.0 - state.beta1) * g
        v *= state.beta2
        v += (1.0 - state.beta2) * (g * g)
        denom = np.sqrt(v / bc2) + state.eps
        p.data -= (step_size * m / denom).astype(p.data.dtype)
    return state


def sgd_step(params: Sequence[Tensor], grads: Sequence[Optional[np.ndarray]], lr: float) -> None:
    _check(params, grads)
    for p, g in zip(params, grads):
        if g is not None:
            p.data -= (lr * g).astype(p.data.dtype)


class Adam:
    """Stateful wrapper: owns the parameter list and reads `.grad` off it."""

    def __init__(self, params: Sequence[Tensor], lr: float = 1e-4, beta1: float = 0.9,
                 beta2: float = 0.999, eps: float = 1e-8):
        self.params = list(params)
        self.state = AdamState.fresh(self.params, lr=lr, beta1=beta1, beta2=beta2, eps=eps)

    def zero_grad(self) -> None:
        for p in self.params:
            p.zero_grad()

    def step(self) -> None:
        adam_step(self.params, [p.grad for p in self.params], self.state)
