from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from ..errors import ShapeError
from .tensor import Tensor


@dataclass
class AdamState:
    lr: float = 1e-3
    weight_decay: float = 0.0
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    step: int = 0
    m: list = field(default_factory=list)
    v: list = field(default_factory=list)


def adam_step(params: list[np.ndarray], grads: list[np.ndarray], state: AdamState) -> list[np.ndarray]:
    """One Adam update; weight decay enters as an extra gradient term ``wd * w``.

    Moment buffers are created lazily on the first call. Returns new arrays,
    the inputs are not modified.
    """
    if len(params) != len(grads):
        raise ShapeError(f"{len(params)} params but {len(grads)} grads")
    if not state.m:
        state.m = [np.zeros_like(p) for p in params]
        state.v = [np.zeros_like(p) for p in params]
    state.step += 1
    b1, b2 = state.beta1, state.beta2
    c1 = 1.0 - b1 ** state.step
    c2 = 1.0 - b2 ** state.step
    out = []
    for i, (p, g) in enumerate(zip(params, grads)):
        if p.shape != g.shape or state.m[i].shape != p.shape:
            raise ShapeError(f"param {i}: shape {p.shape} vs grad {g.shape}")
        dt = p.dtype
        if state.weight_decay:
            g = g + dt.type(state.weight_decay) * p
        state.m[i] = (b1 * state.m[i] + (1 - b1) * g).astype(dt, copy=False)
        state.v[i] = (b2 * state.v[i] + (1 - b2) * g * g).astype(dt, copy=False)
        m_hat = state.m[i] / dt.type(c1)
        v_hat = state.v[i] / dt.type(c2)
        out.append((p - dt.type(state.lr) * m_hat / (np.sqrt(v_hat) + dt.type(state.eps))).astype(dt, copy=False))
    return out


class Adam:
    """Stateful wrapper updating ``Tensor.data`` in place of the parameter list."""

    def __init__(self, params: list[Tensor], lr: float = 1e-3, weight_decay: float = 0.0,
                 betas=(0.9, 0.999), eps: float = 1e-8):
        self.params = list(params)
        self.state = AdamState(lr=lr, weight_decay=weight_decay, beta1=betas[0], beta2=betas[1], eps=eps)

    def step(self) -> None:
        grads = [p.grad if p.grad is not None else np.zeros_like(p.data) for p in self.params]
        new = adam_step([p.data for p in self.params], grads, self.state)
        for p, d in zip(self.params, new):
            p.data = d

    def zero_grad(self) -> None:
        for p in self.params:
            p.grad = None
