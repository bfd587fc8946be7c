"""Linear-beta noise schedule with deterministic DDIM stepping and inversion."""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
import torch


class ConfigurationError(ValueError):
    pass


class StepRangeError(ValueError):
    pass


@dataclass(frozen=True)
class NoiseSchedule:
    """Training-time beta table, cumulative alpha-bar table and the DDIM subsequence.

    ``alpha_bar[0] == 1`` so index ``t`` addresses step ``t`` directly.
    """

    T_train: int
    beta_start: float
    beta_end: float
    ddim_steps: tuple[int, ...]
    beta: np.ndarray = field(repr=False, compare=False)
    alpha_bar: np.ndarray = field(repr=False, compare=False)

    def params(self) -> dict:
        return {
            "T_train": self.T_train,
            "beta_start": self.beta_start,
            "beta_end": self.beta_end,
            "ddim_count": len(self.ddim_steps),
        }

    def ab(self, t: int) -> float:
        if not 0 <= t <= self.T_train:
            raise StepRangeError(f"step {t} outside [0, {self.T_train}]")
        return float(self.alpha_bar[t])

    def step_pairs(self) -> list[tuple[int, int]]:
        """(t, t_prev) pairs in denoising order, ending with (first_step, 0)."""
        bounds = (0,) + self.ddim_steps
        return [(bounds[i], bounds[i - 1]) for i in range(len(bounds) - 1, 0, -1)]


def make_schedule(
    T_train: int = 1000,
    ddim_count: int = 50,
    beta_start: float = 1e-4,
    beta_end: float = 2e-2,
) -> NoiseSchedule:
    if T_train < 1 or not 1 <= ddim_count <= T_train:
        raise ConfigurationError(f"need 1 <= ddim_count ({ddim_count}) <= T_train ({T_train})")
    if not 0 < beta_start <= beta_end < 1:
        raise ConfigurationError(f"bad beta range {beta_start}..{beta_end}")
    beta = np.linspace(beta_start, beta_end, T_train, dtype=np.float64)
    alpha_bar = np.concatenate([[1.0], np.cumprod(1.0 - beta)])
    steps = tuple((i * T_train) // ddim_count for i in range(1, ddim_count + 1))
    return NoiseSchedule(T_train, beta_start, beta_end, steps, beta, alpha_bar)


def _check_t(t: int, s: NoiseSchedule) -> None:
    if not 1 <= t <= s.T_train:
        raise StepRangeError(f"step {t} outside [1, {s.T_train}]")


def _check_member(t: int, s: NoiseSchedule) -> None:
    if t != 0 and t not in s.ddim_steps:
        raise StepRangeError(f"step {t} is not in the DDIM subsequence")


def add_noise(z0: torch.Tensor, t: int, noise: torch.Tensor, s: NoiseSchedule) -> torch.Tensor:
    _check_t(t, s)
    if z0.shape != noise.shape:
        raise ValueError(f"shape mismatch {tuple(z0.shape)} vs {tuple(noise.shape)}")
    ab = s.ab(t)
    return ab**0.5 * z0 + (1.0 - ab) ** 0.5 * noise


def add_noise_batch(z0: torch.Tensor, ts: torch.Tensor, noise: torch.Tensor, s: NoiseSchedule) -> torch.Tensor:
    """Vectorised ``add_noise`` with one step per leading-axis item."""
    ab = torch.as_tensor(s.alpha_bar, dtype=z0.dtype)[ts].reshape(-1, *([1] * (z0.dim() - 1)))
    return ab.sqrt() * z0 + (1.0 - ab).sqrt() * noise


def predict_x0(zt: torch.Tensor, eps: torch.Tensor, t: int, s: NoiseSchedule) -> torch.Tensor:
    ab = s.ab(t)
    return (zt - (1.0 - ab) ** 0.5 * eps) / ab**0.5


def ddim_step(zt: torch.Tensor, eps: torch.Tensor, t: int, t_prev: int, s: NoiseSchedule) -> torch.Tensor:
    """Deterministic DDIM update from ``t`` down to ``t_prev``."""
    if not t > t_prev >= 0:
        raise StepRangeError(f"ddim_step needs t > t_prev >= 0, got {t}, {t_prev}")
    _check_member(t, s)
    _check_member(t_prev, s)
    ab_prev = s.ab(t_prev)
    return ab_prev**0.5 * predict_x0(zt, eps, t, s) + (1.0 - ab_prev) ** 0.5 * eps


def ddim_invert_step(zprev: torch.Tensor, eps: torch.Tensor, t_prev: int, t: int, s: NoiseSchedule) -> torch.Tensor:
    """Solve ``ddim_step(zt, eps, t, t_prev) == zprev`` for ``zt``."""
    if not t > t_prev >= 0:
        raise StepRangeError(f"ddim_invert_step needs t > t_prev >= 0, got {t_prev}, {t}")
    _check_member(t, s)
    _check_member(t_prev, s)
    ab, ab_prev = s.ab(t), s.ab(t_prev)
    x0 = (zprev - (1.0 - ab_prev) ** 0.5 * eps) / ab_prev**0.5
    return ab**0.5 * x0 + (1.0 - ab) ** 0.5 * eps
