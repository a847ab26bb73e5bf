"""Linear warm-up schedules for label smoothing, PSwish temperature and soft skips."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from ..exceptions import ContractError
from .config import ScheduleConfig


def _progress(t: int, horizon: int) -> float:
    if horizon <= 0:
        return 1.0
    return min(max(t / horizon, 0.0), 1.0)


def alpha_at(t: int, alpha0: float, t_alpha: int) -> float:
    """Label-smoothing weight, decaying linearly from ``alpha0`` to 0 at ``t_alpha``."""
    return alpha0 * (1.0 - _progress(t, t_alpha))


def beta_at(t: int, beta0: float, beta_max: float, t_beta: int) -> float:
    """PSwish temperature, rising linearly from ``beta0`` and held at ``beta_max``."""
    p = _progress(t, t_beta)
    return beta0 * (1.0 - p) + beta_max * p


def gamma_at(t: int, gamma0: float, t_gamma: int) -> float:
    """Soft-skip weight, decaying linearly from ``gamma0`` to 0 at ``t_gamma``."""
    return gamma0 * (1.0 - _progress(t, t_gamma))


@dataclass(frozen=True)
class ScheduleState:
    epoch: int
    alpha: float
    beta: float
    gamma: float

    @classmethod
    def at(cls, config: ScheduleConfig, epoch: int) -> "ScheduleState":
        return cls(
            epoch,
            alpha_at(epoch, config.alpha0, config.t_alpha),
            beta_at(epoch, config.beta0, config.beta_max, config.t_beta),
            gamma_at(epoch, config.gamma0, config.t_gamma),
        )


def label_smooth(y: np.ndarray, alpha: float, k: int) -> np.ndarray:
    """Mix one-hot targets with the uniform distribution: ``(1 - a) * onehot + a / K``."""
    if not 0.0 <= alpha <= 1.0:
        raise ContractError(f"alpha must lie in [0, 1], got {alpha}")
    y = np.asarray(y, dtype=np.int64)
    out = np.full((len(y), k), alpha / k)
    out[np.arange(len(y)), y] += 1.0 - alpha
    return out
