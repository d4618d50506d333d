"""Noise schedule, forward noising, clean-image prediction, DDIM stepping.

The schedule is the classic linear-beta table (defaults beta in
[1e-4, 0.02] over 1000 training timesteps) with a descending ``step_map``
selecting which training timesteps the deterministic (eta = 0) DDIM sampler
visits at inference.  Past the last mapped step the cumulative alpha is
defined as 1, so the final step lands exactly on the predicted clean image.
"""

from __future__ import annotations

from dataclasses import dataclass, replace

import numpy as np

from higfa.tensor import Tensor, mul, sub

__all__ = [
    "NoiseSchedule",
    "DiffusionState",
    "ScheduleError",
    "build_schedule",
    "q_sample",
    "predict_x0",
    "ddim_step",
    "DEFAULT_T_TRAIN",
    "DEFAULT_BETA_START",
    "DEFAULT_BETA_END",
    "DEFAULT_INFERENCE_STEPS",
]

DEFAULT_T_TRAIN = 1000
DEFAULT_BETA_START = 1e-4
DEFAULT_BETA_END = 0.02
DEFAULT_INFERENCE_STEPS = 30


class ScheduleError(ValueError):
    """Invalid schedule parameters or stepping."""


@dataclass(frozen=True)
class NoiseSchedule:
    """Per-timestep beta/alpha tables plus the inference step mapping."""

    t_train: int
    betas: np.ndarray
    alphas: np.ndarray
    alpha_bars: np.ndarray
    inference_steps: int
    step_map: np.ndarray  # strictly decreasing training-timestep indices

    def alpha_bar_after(self, step_index: int) -> float:
        """Cumulative alpha at the step following ``step_index`` (1 past the end)."""
        if step_index + 1 < self.inference_steps:
            return float(self.alpha_bars[self.step_map[step_index + 1]])
        return 1.0


@dataclass
class DiffusionState:
    """One sample's position along the reverse trajectory."""

    x_t: Tensor
    t: int
    step_index: int
    rng: np.random.Generator

    def finished(self, schedule: NoiseSchedule) -> bool:
        return self.step_index >= schedule.inference_steps


def build_schedule(
    t_train: int = DEFAULT_T_TRAIN,
    beta_start: float = DEFAULT_BETA_START,
    beta_end: float = DEFAULT_BETA_END,
    inference_steps: int = DEFAULT_INFERENCE_STEPS,
) -> NoiseSchedule:
    """Linear beta schedule with an evenly spaced descending step map."""
    if not (0.0 < beta_start <= beta_end < 1.0):
        raise ScheduleError(
            f"need 0 < beta_start <= beta_end < 1, got ({beta_start}, {beta_end})"
        )
    if not (1 <= inference_steps <= t_train):
        raise ScheduleError(
            f"inference_steps must be in [1, {t_train}], got {inference_steps}"
        )
    betas = np.linspace(beta_start, beta_end, t_train)
    alphas = 1.0 - betas
    alpha_bars = np.cumprod(alphas)
    if inference_steps == 1:
        step_map = np.array([t_train - 1], dtype=np.int64)
    else:
        step_map = np.round(np.linspace(t_train - 1, 0, inference_steps)).astype(np.int64)
    if np.any(np.diff(step_map) >= 0):
        raise ScheduleError("step_map is not strictly decreasing")
    return NoiseSchedule(
        t_train=t_train,
        betas=betas,
        alphas=alphas,
        alpha_bars=alpha_bars,
        inference_steps=inference_steps,
        step_map=step_map,
    )


def _check_t(schedule: NoiseSchedule, t: int) -> None:
    if not (0 <= t < schedule.t_train):
        raise ScheduleError(f"timestep {t} outside [0, {schedule.t_train})")


def q_sample(x0, t: int, eps, schedule: NoiseSchedule):
    """Noise a clean sample: sqrt(abar_t) x0 + sqrt(1 - abar_t) eps."""
    _check_t(schedule, t)
    x0d = x0.data if isinstance(x0, Tensor) else np.asarray(x0)
    ed = eps.data if isinstance(eps, Tensor) else np.asarray(eps)
    if x0d.shape != ed.shape:
        raise ValueError(f"q_sample: x0 shape {x0d.shape} != eps shape {ed.shape}")
    ab = float(schedule.alpha_bars[t])
    return mul(x0, np.sqrt(ab)) + mul(eps, np.sqrt(1.0 - ab))


def predict_x0(x_t, t: int, eps_hat, schedule: NoiseSchedule):
    """Invert q_sample given a noise estimate: (x_t - sqrt(1-abar) eps)/sqrt(abar)."""
    _check_t(schedule, t)
    xd = x_t.data if isinstance(x_t, Tensor) else np.asarray(x_t)
    ed = eps_hat.data if isinstance(eps_hat, Tensor) else np.asarray(eps_hat)
    if xd.shape != ed.shape:
        raise ValueError(f"predict_x0: x_t shape {xd.shape} != eps shape {ed.shape}")
    ab = float(schedule.alpha_bars[t])
    if ab == 0.0:
        raise ScheduleError(f"predict_x0 is singular at abar=0 (t={t})")
    return mul(sub(x_t, mul(eps_hat, np.sqrt(1.0 - ab))), 1.0 / np.sqrt(ab))


def ddim_step(state: DiffusionState, eps_hat, schedule: NoiseSchedule) -> DiffusionState:
    """One deterministic reverse step; the step past the last entry yields x0-hat."""
    if state.finished(schedule):
        raise ScheduleError(
            f"cannot step past the final index ({state.step_index} of {schedule.inference_steps})"
        )
    t = int(schedule.step_map[state.step_index])
    if state.t != t:
        raise ScheduleError(f"state.t={state.t} does not match step_map[{state.step_index}]={t}")
    x0_hat = predict_x0(state.x_t, t, eps_hat, schedule)
    ab_prev = schedule.alpha_bar_after(state.step_index)
    if ab_prev == 1.0:
        x_prev = x0_hat
    else:
        x_prev = mul(x0_hat, np.sqrt(ab_prev)) + mul(eps_hat, np.sqrt(1.0 - ab_prev))
    next_index = state.step_index + 1
    next_t = int(schedule.step_map[next_index]) if next_index < schedule.inference_steps else -1
    if not isinstance(x_prev, Tensor):
        x_prev = Tensor(x_prev)
    return replace(state, x_t=x_prev, t=next_t, step_index=next_index)
