"""Noise schedules and deterministic DDIM update rules.

Timesteps are 1-based over the training range ``[1, T]``; ``t = 0`` denotes the
clean latent and has ``alpha_bar == 1``.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from enum import Enum

import numpy as np
import torch

__all__ = [
    "ScheduleKind",
    "NoiseSchedule",
    "Latent",
    "StepPlan",
    "make_schedule",
    "add_noise",
    "ddim_step",
    "ddim_invert_step",
    "make_step_plan",
    "add_noise_batch",
    "sample_timesteps",
]


class ScheduleKind(str, Enum):
    LINEAR = "linear"
    SCALED_LINEAR = "scaled_linear"


@dataclass(frozen=True)
class NoiseSchedule:
    kind: ScheduleKind
    num_train_steps: int
    beta_start: float
    beta_end: float
    betas: np.ndarray = field(repr=False)
    alphas: np.ndarray = field(repr=False)
    alpha_bars: np.ndarray = field(repr=False)

    def alpha_bar(self, t: int) -> float:
        """Cumulative signal coefficient at timestep ``t`` (1.0 at ``t = 0``)."""
        if t == 0:
            return 1.0
        if not 1 <= t <= self.num_train_steps:
            raise ValueError(f"timestep {t} outside [0, {self.num_train_steps}]")
        return float(self.alpha_bars[t - 1])

    def to_config(self) -> dict:
        return {
            "kind": self.kind.value,
            "num_train_steps": self.num_train_steps,
            "beta_start": self.beta_start,
            "beta_end": self.beta_end,
        }

    @classmethod
    def from_config(cls, cfg: dict) -> "NoiseSchedule":
        return make_schedule(cfg["kind"], cfg["num_train_steps"], cfg["beta_start"], cfg["beta_end"])


@dataclass
class Latent:
    data: torch.Tensor
    timestep: int = 0

    @property
    def shape(self) -> torch.Size:
        return self.data.shape


@dataclass(frozen=True)
class StepPlan:
    """Sampling timesteps in descending order plus the number of skipped leading steps."""

    indices: tuple[int, ...]
    start_offset: int

    def __len__(self) -> int:
        return len(self.indices)

    def pairs(self) -> list[tuple[int, int]]:
        """``(t, t_prev)`` pairs for sampling, ending at the clean level 0."""
        nxt = list(self.indices[1:]) + [0]
        return list(zip(self.indices, nxt))


def make_schedule(kind: str | ScheduleKind, T: int, beta_start: float, beta_end: float) -> NoiseSchedule:
    kind = ScheduleKind(kind)
    if int(T) != T or T < 1:
        raise ValueError(f"T must be a positive integer, got {T}")
    if not (0.0 < beta_start <= beta_end < 1.0):
        raise ValueError(f"need 0 < beta_start <= beta_end < 1, got {beta_start}, {beta_end}")
    T = int(T)
    if kind is ScheduleKind.LINEAR:
        betas = np.linspace(beta_start, beta_end, T, dtype=np.float64)
    else:
        betas = np.linspace(math.sqrt(beta_start), math.sqrt(beta_end), T, dtype=np.float64) ** 2
    alphas = 1.0 - betas
    alpha_bars = np.cumprod(alphas)
    for arr in (betas, alphas, alpha_bars):
        arr.setflags(write=False)
    return NoiseSchedule(kind, T, float(beta_start), float(beta_end), betas, alphas, alpha_bars)


def _check_shape(a: torch.Tensor, b: torch.Tensor) -> None:
    if a.shape != b.shape:
        raise ValueError(f"shape mismatch: {tuple(a.shape)} vs {tuple(b.shape)}")


def add_noise(z0: Latent, eps: torch.Tensor, t: int, sched: NoiseSchedule) -> Latent:
    _check_shape(z0.data, eps)
    if not 1 <= t <= sched.num_train_steps:
        raise ValueError(f"timestep {t} outside [1, {sched.num_train_steps}]")
    ab = sched.alpha_bar(t)
    return Latent(math.sqrt(ab) * z0.data + math.sqrt(1.0 - ab) * eps, t)


def _check_pair(t: int, t_prev: int, sched: NoiseSchedule) -> None:
    if not t > t_prev >= 0:
        raise ValueError(f"need t > t_prev >= 0, got t={t}, t_prev={t_prev}")
    if t > sched.num_train_steps:
        raise ValueError(f"timestep {t} outside [1, {sched.num_train_steps}]")


def ddim_step(z_t: Latent, eps_pred: torch.Tensor, t: int, t_prev: int, sched: NoiseSchedule) -> Latent:
    """One deterministic (eta = 0) DDIM update from ``t`` down to ``t_prev``."""
    _check_pair(t, t_prev, sched)
    _check_shape(z_t.data, eps_pred)
    ab_t, ab_prev = sched.alpha_bar(t), sched.alpha_bar(t_prev)
    x0 = (z_t.data - math.sqrt(1.0 - ab_t) * eps_pred) / math.sqrt(ab_t)
    return Latent(math.sqrt(ab_prev) * x0 + math.sqrt(1.0 - ab_prev) * eps_pred, t_prev)


def ddim_invert_step(z_prev: Latent, eps_pred: torch.Tensor, t: int, t_prev: int, sched: NoiseSchedule) -> Latent:
    """Reverse of :func:`ddim_step`: move a latent from ``t_prev`` up to ``t``."""
    _check_pair(t, t_prev, sched)
    _check_shape(z_prev.data, eps_pred)
    ab_t, ab_prev = sched.alpha_bar(t), sched.alpha_bar(t_prev)
    x0 = (z_prev.data - math.sqrt(1.0 - ab_prev) * eps_pred) / math.sqrt(ab_prev)
    return Latent(math.sqrt(ab_t) * x0 + math.sqrt(1.0 - ab_t) * eps_pred, t)


def make_step_plan(N: int, T: int, strength: float) -> StepPlan:
    """Uniformly spaced plan of ``N`` levels over ``[1, T]`` truncated by denoising strength.

    The full plan is ``T*(i+1)//N`` for ``i < N``; sampling traverses the last
    ``ceil(strength * N)`` entries of its descending order, i.e. starts at the
    noise level reached by that fraction of the trajectory.
    """
    if not 1 <= N <= T:
        raise ValueError(f"need 1 <= N <= T, got N={N}, T={T}")
    if not 0.0 < strength <= 1.0:
        raise ValueError(f"strength must be in (0, 1], got {strength}")
    n_run = math.ceil(round(strength * N, 9))
    if n_run < 1:
        raise ValueError("strength too small: empty step plan")
    full = [T * (i + 1) // N for i in range(N)]
    desc = full[::-1]
    offset = N - n_run
    return StepPlan(tuple(desc[offset:]), offset)


def add_noise_batch(z0: torch.Tensor, eps: torch.Tensor, t: torch.Tensor, sched: NoiseSchedule) -> torch.Tensor:
    """Vectorised forward noising for a batch ``(B, ...)`` with per-sample timesteps ``t`` in [1, T]."""
    _check_shape(z0, eps)
    if t.min() < 1 or t.max() > sched.num_train_steps:
        raise ValueError("timesteps outside [1, T]")
    ab = torch.tensor(sched.alpha_bars, dtype=torch.float64)[t - 1]
    shape = (-1,) + (1,) * (z0.ndim - 1)
    return ab.sqrt().to(z0.dtype).view(shape) * z0 + (1.0 - ab).sqrt().to(z0.dtype).view(shape) * eps


def sample_timesteps(n: int, T: int, generator: torch.Generator | None = None) -> torch.Tensor:
    """Uniform integer timesteps in [1, T]."""
    return torch.randint(1, T + 1, (n,), generator=generator)
