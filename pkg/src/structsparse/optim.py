"""Adam with mask-aware updates."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .autodiff import Parameter, Tensor
from .exceptions import DimensionError


@dataclass
class AdamState:
    lr: float = 1e-3
    betas: tuple = (0.9, 0.999)
    eps: float = 1e-8
    weight_decay: float = 0.0
    step: int = 0
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)


class Adam:
    """Bias-corrected Adam over :class:`Parameter` values (and soft masks).

    Entries whose hard mask is 0 are neither updated nor have their moment
    estimates advanced, so a pruned weight stays exactly zero. Weight decay is
    the classic L2 form added to the gradient.
    """

    def __init__(self, params: Sequence[Parameter], lr=1e-3, betas=(0.9, 0.999), eps=1e-8,
                 weight_decay=0.0):
        self.params = list(params)
        self.state = AdamState(lr=lr, betas=tuple(betas), eps=eps, weight_decay=weight_decay)

    def _targets(self):
        for p in self.params:
            yield p.value, p.mask
            if p.soft_mask is not None:
                yield p.soft_mask, None

    def zero_grad(self) -> None:
        for p in self.params:
            p.zero_grad()

    def step(self) -> None:
        st = self.state
        st.step += 1
        b1, b2 = st.betas
        c1 = 1.0 - b1 ** st.step
        c2 = 1.0 - b2 ** st.step
        for t, mask in self._targets():
            if t.grad is None:
                continue
            _adam_update(t, t.grad, mask, st, c1, c2)


def _adam_update(t: Tensor, g: np.ndarray, mask, st: AdamState, c1: float, c2: float) -> None:
    if g.shape != t.shape:
        raise DimensionError(f"gradient shape {g.shape} != parameter shape {t.shape}")
    b1, b2 = st.betas
    if st.weight_decay:
        g = g + st.weight_decay * t.data
    key = t.id
    m = st.m.get(key)
    v = st.v.get(key)
    if m is None:
        m = np.zeros_like(t.data)
        v = np.zeros_like(t.data)
    m_new = b1 * m + (1.0 - b1) * g
    v_new = b2 * v + (1.0 - b2) * g * g
    upd = st.lr * (m_new / c1) / (np.sqrt(v_new / c2) + st.eps)
    if mask is not None:
        live = mask != 0
        m_new = np.where(live, m_new, m)
        v_new = np.where(live, v_new, v)
        upd = np.where(live, upd, 0.0)
    st.m[key] = m_new
    st.v[key] = v_new
    t.data = t.data - upd


def adam_step(params: Sequence[Parameter], state: AdamState) -> AdamState:
    """Functional form: apply one update to ``params`` using their ``.grad``."""
    state.step += 1
    b1, b2 = state.betas
    c1 = 1.0 - b1 ** state.step
    c2 = 1.0 - b2 ** state.step
    for p in params:
        if p.grad is not None:
            _adam_update(p.value, p.grad, p.mask, state, c1, c2)
    return state
