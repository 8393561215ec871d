"""Forward diffusion schedule and deterministic DDIM sampling.

The forward process noises a clean image x_0 in closed form,

    x_t = sqrt(abar_t) * x_0 + sqrt(1 - abar_t) * eps,    eps ~ N(0, I),

where abar_t = prod_{s<=t} (1 - beta_s) is the cumulative signal fraction of
a variance schedule beta_1..beta_T.  Sampling runs the reverse process with a
zero-variance posterior: given the denoiser's clean-image prediction x0_hat
at step t, the next state is

    x_{t-1} = sqrt(abar_{t-1}) * x0_hat
            + sqrt(1 - abar_{t-1}) * (x_t - sqrt(abar_t) * x0_hat) / sqrt(1 - abar_t),

which is deterministic given the initial noise, so a fixed seed fixes the
output.  The final step (t -> 0) returns x0_hat itself.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
import torch

__all__ = [
    "NoiseSchedule",
    "make_linear_schedule",
    "TimestepSubsequence",
    "timestep_subsequence",
    "forward_noise",
    "ddim_step",
    "ddim_sample",
]


@dataclass(frozen=True)
class NoiseSchedule:
    """Variance schedule beta_1..beta_T with cumulative products.

    ``betas[i]`` and ``alpha_bars[i]`` hold the values for timestep t = i + 1;
    both arrays are float64 of length T.  ``alpha_bars`` is strictly
    decreasing in (0, 1).
    """

    betas: np.ndarray
    alpha_bars: np.ndarray

    def __post_init__(self) -> None:
        betas = np.asarray(self.betas, dtype=np.float64)
        abars = np.asarray(self.alpha_bars, dtype=np.float64)
        if betas.ndim != 1 or betas.size == 0:
            raise ValueError("betas must be a non-empty 1-D array")
        if abars.shape != betas.shape:
            raise ValueError("alpha_bars must match betas in shape")
        if np.any(betas <= 0.0) or np.any(betas >= 1.0):
            raise ValueError("betas must lie strictly inside (0, 1)")
        if np.any(abars <= 0.0) or np.any(abars >= 1.0):
            raise ValueError("alpha_bars must lie strictly inside (0, 1)")
        if np.any(np.diff(abars) >= 0.0):
            raise ValueError("alpha_bars must be strictly decreasing")
        object.__setattr__(self, "betas", betas)
        object.__setattr__(self, "alpha_bars", abars)

    @property
    def num_timesteps(self) -> int:
        return int(self.betas.shape[0])

    def alpha_bar(self, t: int) -> float:
        """Cumulative signal fraction at integer timestep t in [0, T].

        t = 0 denotes the clean image and returns exactly 1.0.
        """
        if not isinstance(t, (int, np.integer)):
            raise TypeError(f"timestep must be an integer, got {type(t).__name__}")
        if t == 0:
            return 1.0
        if not 1 <= t <= self.num_timesteps:
            raise IndexError(
                f"timestep {t} outside valid range [0, {self.num_timesteps}]"
            )
        return float(self.alpha_bars[t - 1])


def make_linear_schedule(
    num_timesteps: int,
    beta_start: float = 1e-4,
    beta_end: float = 0.02,
) -> NoiseSchedule:
    """Linearly spaced betas from beta_start to beta_end over T timesteps."""
    if num_timesteps < 1:
        raise ValueError(f"num_timesteps must be >= 1, got {num_timesteps}")
    if not 0.0 < beta_start < 1.0 or not 0.0 < beta_end < 1.0:
        raise ValueError("beta endpoints must lie strictly inside (0, 1)")
    if beta_end < beta_start:
        raise ValueError("beta_end must be >= beta_start")
    betas = np.linspace(beta_start, beta_end, num_timesteps, dtype=np.float64)
    alpha_bars = np.cumprod(1.0 - betas)
    return NoiseSchedule(betas=betas, alpha_bars=alpha_bars)


@dataclass(frozen=True)
class TimestepSubsequence:
    """Strictly decreasing timesteps T = steps[0] > ... > steps[-1] = 1.

    The single-step sampler is the one degenerate exception: its sequence
    is just [T] (the sampler then jumps T -> 0 in one move), so a
    one-element sequence may end above 1.
    """

    steps: np.ndarray

    def __post_init__(self) -> None:
        steps = np.asarray(self.steps, dtype=np.int64)
        if steps.ndim != 1 or steps.size == 0:
            raise ValueError("steps must be a non-empty 1-D integer array")
        if steps[0] < 1:
            raise ValueError("timesteps must be positive")
        if steps.size > 1 and steps[-1] != 1:
            raise ValueError("subsequence must end at timestep 1")
        if np.any(np.diff(steps) >= 0):
            raise ValueError("subsequence must be strictly decreasing")
        object.__setattr__(self, "steps", steps)

    def __len__(self) -> int:
        return int(self.steps.shape[0])

    def __iter__(self):
        return iter(self.steps.tolist())


def timestep_subsequence(num_timesteps: int, num_steps: int) -> TimestepSubsequence:
    """Evenly spaced integer subsequence from T down to 1 with num_steps entries.

    num_steps = 1 degenerates to the single step [T] (the sampler then jumps
    T -> 0 directly); num_steps = T enumerates every timestep.
    """
    if num_timesteps < 1:
        raise ValueError(f"num_timesteps must be >= 1, got {num_timesteps}")
    if not 1 <= num_steps <= num_timesteps:
        raise ValueError(
            f"num_steps must lie in [1, {num_timesteps}], got {num_steps}"
        )
    if num_steps == 1:
        return TimestepSubsequence(steps=np.array([num_timesteps], dtype=np.int64))
    raw = np.linspace(num_timesteps, 1, num_steps)
    steps = np.rint(raw).astype(np.int64)
    # rounding can collide neighbours; repair to keep the sequence strictly
    # decreasing while preserving the endpoints
    steps[0] = num_timesteps
    steps[-1] = 1
    for i in range(len(steps) - 2, 0, -1):
        if steps[i] <= steps[i + 1]:
            steps[i] = steps[i + 1] + 1
    for i in range(1, len(steps)):
        if steps[i] >= steps[i - 1]:
            raise ValueError(
                f"cannot fit {num_steps} strictly decreasing steps into "
                f"[1, {num_timesteps}]"
            )
    return TimestepSubsequence(steps=steps)


def _alpha_bar_like(
    schedule: NoiseSchedule, t: torch.Tensor, ref: torch.Tensor
) -> torch.Tensor:
    """Per-sample abar_t broadcast to the trailing dims of ref."""
    t_np = t.detach().cpu().numpy().astype(np.int64)
    if np.any(t_np < 1) or np.any(t_np > schedule.num_timesteps):
        raise IndexError(
            f"timesteps must lie in [1, {schedule.num_timesteps}], "
            f"got range [{t_np.min()}, {t_np.max()}]"
        )
    abar = schedule.alpha_bars[t_np - 1]
    shape = (t.shape[0],) + (1,) * (ref.ndim - 1)
    return torch.as_tensor(abar, dtype=ref.dtype, device=ref.device).reshape(shape)


def forward_noise(
    x0: torch.Tensor,
    t: int | torch.Tensor,
    eps: torch.Tensor,
    schedule: NoiseSchedule,
) -> torch.Tensor:
    """Closed-form noising of x0 to timestep t with the given noise draw.

    t may be a single integer or a per-sample integer tensor whose length
    matches the batch dimension of x0.
    """
    if eps.shape != x0.shape:
        raise ValueError(
            f"noise shape {tuple(eps.shape)} must match image shape {tuple(x0.shape)}"
        )
    if isinstance(t, torch.Tensor):
        abar = _alpha_bar_like(schedule, t, x0)
        return torch.sqrt(abar) * x0 + torch.sqrt(1.0 - abar) * eps
    t = int(t)
    if not 1 <= t <= schedule.num_timesteps:
        raise IndexError(
            f"timestep {t} outside valid range [1, {schedule.num_timesteps}]"
        )
    abar = schedule.alpha_bar(t)
    return math.sqrt(abar) * x0 + math.sqrt(1.0 - abar) * eps


def ddim_step(
    x_t: torch.Tensor,
    x0_hat: torch.Tensor,
    t_from: int,
    t_to: int,
    schedule: NoiseSchedule,
) -> torch.Tensor:
    """One deterministic reverse step t_from -> t_to (0 <= t_to < t_from).

    Re-derives the noise direction from (x_t, x0_hat) and re-noises x0_hat to
    level t_to with zero posterior variance.  t_to = 0 returns x0_hat as is.
    """
    if x0_hat.shape != x_t.shape:
        raise ValueError(
            f"prediction shape {tuple(x0_hat.shape)} must match state shape "
            f"{tuple(x_t.shape)}"
        )
    if not 0 <= t_to < t_from:
        raise ValueError(
            f"need 0 <= t_to < t_from, got t_from={t_from}, t_to={t_to}"
        )
    abar_from = schedule.alpha_bar(t_from)
    if abar_from >= 1.0:
        raise ValueError("abar at source timestep must be < 1 to recover noise")
    if t_to == 0:
        return x0_hat
    abar_to = schedule.alpha_bar(t_to)
    eps_dir = (x_t - math.sqrt(abar_from) * x0_hat) / math.sqrt(1.0 - abar_from)
    return math.sqrt(abar_to) * x0_hat + math.sqrt(1.0 - abar_to) * eps_dir


def ddim_sample(
    denoiser,
    z: torch.Tensor | None,
    schedule: NoiseSchedule,
    steps: TimestepSubsequence,
    init_noise: torch.Tensor | int,
    *,
    shape: tuple[int, ...] | None = None,
) -> torch.Tensor:
    """Run the deterministic sampler along a timestep subsequence.

    denoiser(x_t, t, z) must return an x0 prediction of the same shape as
    x_t.  init_noise is either the initial x_T tensor or an integer seed, in
    which case ``shape`` must give the tensor shape to draw.
    """
    if isinstance(init_noise, torch.Tensor):
        x = init_noise
    else:
        if shape is None:
            raise ValueError("shape is required when init_noise is a seed")
        gen = torch.Generator().manual_seed(int(init_noise))
        x = torch.randn(shape, generator=gen)
    step_list = list(steps)
    if step_list[0] != schedule.num_timesteps:
        raise ValueError(
            f"subsequence must start at T={schedule.num_timesteps}, "
            f"got {step_list[0]}"
        )
    for i, t in enumerate(step_list):
        x0_hat = denoiser(x, t, z)
        if x0_hat.shape != x.shape:
            raise ValueError(
                f"denoiser returned shape {tuple(x0_hat.shape)}, "
                f"expected {tuple(x.shape)}"
            )
        t_next = step_list[i + 1] if i + 1 < len(step_list) else 0
        x = ddim_step(x, x0_hat, t, t_next, schedule)
    return x
