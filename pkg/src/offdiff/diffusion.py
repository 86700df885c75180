"""Forward noising, posteriors, and denoising steps for solution diffusion.

Two parallel processes share one beta schedule:

* discrete: each edge's binary decision is a one-hot pair corrupted by the
  doubly stochastic kernel Q_t = [[1-b_t, b_t], [b_t, 1-b_t]]; the t-step
  kernel is the matrix product Qbar_t = Q_1 ... Q_t, which for this
  symmetric family has diagonal (1 + prod_k (1 - 2 b_k)) / 2.
* continuous: standard Gaussian diffusion on the rescaled allocation
  values, y_t = sqrt(abar_t) y_0 + sqrt(1 - abar_t) eps with
  abar_t = prod_k (1 - b_k).

Everything here is neural-network-free: callers supply either the model's
predicted y_0 distribution (discrete) or predicted noise (continuous).
All sampling goes through an explicit numpy Generator, so chains are pure
functions of their RNG stream.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import ScheduleError

__all__ = [
    "DiffusionSchedule",
    "make_schedule",
    "discrete_noise_to_t",
    "discrete_posterior",
    "discrete_jump_posterior",
    "discrete_denoise_step",
    "continuous_noise_to_t",
    "continuous_denoise_step",
    "rescale_to_diffusion",
    "rescale_from_diffusion",
    "ddim_step_pairs",
]

TERMINAL_ALPHA_BAR = 1e-4


@dataclass(frozen=True)
class DiffusionSchedule:
    """Beta sequence plus cached cumulative products.

    ``beta[t-1]`` is the corruption ratio of step t (t = 1..T).
    ``alpha_bar[t]`` = prod_{k<=t} (1 - beta_k) with alpha_bar[0] = 1.
    ``mix[t]``       = prod_{k<=t} (1 - 2 beta_k) with mix[0] = 1; the
    diagonal of Qbar_t is (1 + mix[t]) / 2.
    """

    beta: np.ndarray
    alpha_bar: np.ndarray
    mix: np.ndarray

    def __post_init__(self):
        self.beta.setflags(write=False)
        self.alpha_bar.setflags(write=False)
        self.mix.setflags(write=False)

    @property
    def T(self) -> int:
        return int(self.beta.shape[0])

    def _check_t(self, t, low=1):
        if not (low <= t <= self.T):
            raise ValueError(f"step {t} outside [{low}, {self.T}]")

    def Q(self, t: int) -> np.ndarray:
        """Single-step transition matrix of step t."""
        self._check_t(t)
        b = self.beta[t - 1]
        return np.array([[1 - b, b], [b, 1 - b]])

    def Qbar(self, t: int) -> np.ndarray:
        """Cumulative transition matrix from step 0 to t (identity at t=0)."""
        self._check_t(t, low=0)
        stay = 0.5 * (1.0 + self.mix[t])
        return np.array([[stay, 1 - stay], [1 - stay, stay]])

    def Qspan(self, s: int, t: int) -> np.ndarray:
        """Transition matrix covering steps s+1..t (so Qbar_s @ Qspan = Qbar_t)."""
        if not (0 <= s <= t <= self.T):
            raise ValueError(f"invalid span {s}..{t}")
        stay = 0.5 * (1.0 + self.mix[t] / self.mix[s])
        return np.array([[stay, 1 - stay], [1 - stay, stay]])


def make_schedule(T: int, kind: str = "linear", beta_min: float = 1e-4,
                  beta_max: float = 0.1) -> DiffusionSchedule:
    """Construct a beta schedule and verify the chain ends in pure noise.

    Requires 0 < beta_min <= beta_max < 0.5 (above 0.5 the discrete kernel
    would oscillate) and alpha_bar_T <= 1e-4 so the terminal state is
    indistinguishable from the prior; violating the latter raises
    ScheduleError suggesting a larger beta_max.
    """
    if T < 1:
        raise ScheduleError("T must be >= 1")
    if kind != "linear":
        raise ScheduleError(f"unknown schedule kind {kind!r}")
    if not (0.0 < beta_min <= beta_max < 0.5):
        raise ScheduleError(
            f"need 0 < beta_min <= beta_max < 0.5, got [{beta_min}, {beta_max}]"
        )
    beta = np.linspace(beta_min, beta_max, T)
    alpha_bar = np.concatenate([[1.0], np.cumprod(1.0 - beta)])
    mix = np.concatenate([[1.0], np.cumprod(1.0 - 2.0 * beta)])
    if alpha_bar[-1] > TERMINAL_ALPHA_BAR:
        raise ScheduleError(
            f"alpha_bar_T = {alpha_bar[-1]:.3e} exceeds {TERMINAL_ALPHA_BAR:.0e}; "
            f"increase beta_max (or T) so the terminal state is fully noised"
        )
    return DiffusionSchedule(beta=beta, alpha_bar=alpha_bar, mix=mix)


def _as_onehot(y) -> np.ndarray:
    y = np.asarray(y)
    if y.ndim != 2 or y.shape[1] != 2:
        raise ValueError(f"discrete states are (L, 2) one-hot arrays, got {y.shape}")
    return y.astype(np.float64)


def discrete_noise_to_t(y0, t: int, schedule: DiffusionSchedule, rng) -> np.ndarray:
    """Sample y_t ~ Cat(y0 @ Qbar_t) per edge; returns a one-hot array."""
    schedule._check_t(t)
    probs = _as_onehot(y0) @ schedule.Qbar(t)
    draws = rng.random(probs.shape[0])
    state1 = (draws < probs[:, 1]).astype(np.float64)
    return np.stack([1.0 - state1, state1], axis=1)


def _validate_distribution(y0_hat) -> np.ndarray:
    y0_hat = np.asarray(y0_hat, dtype=np.float64)
    if y0_hat.ndim != 2 or y0_hat.shape[1] != 2:
        raise ValueError(f"y0 distribution must be (L, 2), got {y0_hat.shape}")
    if np.any(y0_hat < -1e-12) or np.any(np.abs(y0_hat.sum(axis=1) - 1.0) > 1e-6):
        raise ValueError("y0 distribution rows must be probabilities summing to 1")
    return np.clip(y0_hat, 0.0, 1.0)


def discrete_jump_posterior(y_t, y0_hat, t: int, s: int,
                            schedule: DiffusionSchedule) -> np.ndarray:
    """Per-edge distribution of y_s given y_t, marginalized over y0 ~ y0_hat.

    For a concrete y0 = c the posterior is

        q(y_s = j | y_t = k, c) = Qspan(s,t)[j,k] * Qbar_s[c,j] / Qbar_t[c,k]

    and the model's uncertainty over c is averaged in. Rows are normalized
    to sum to exactly 1. ``s = t - 1`` is the ancestral posterior; smaller
    ``s`` implements the step-skipping jump used at inference.
    """
    if not (0 <= s < t):
        raise ValueError(f"need 0 <= s < t, got s={s}, t={t}")
    schedule._check_t(t)
    y_t = _as_onehot(y_t)
    y0_hat = _validate_distribution(y0_hat)
    k = np.argmax(y_t, axis=1)

    Qspan = schedule.Qspan(s, t)
    Qbar_s = schedule.Qbar(s)
    Qbar_t = schedule.Qbar(t)

    # weights w[:, c] = y0_hat[:, c] / Qbar_t[c, k]
    w = y0_hat / Qbar_t[:, k].T
    post = (w @ Qbar_s) * Qspan[:, k].T
    return post / post.sum(axis=1, keepdims=True)


def discrete_posterior(y_t, y0_hat, t: int, schedule: DiffusionSchedule) -> np.ndarray:
    """One-step posterior for y_{t-1}; see discrete_jump_posterior."""
    return discrete_jump_posterior(y_t, y0_hat, t, t - 1, schedule)


def discrete_denoise_step(y_t, y0_hat, t: int, schedule: DiffusionSchedule, rng,
                          mode: str = "ancestral", s: int = None) -> np.ndarray:
    """Sample the next discrete state from the (possibly jumped) posterior.

    ``mode="ancestral"`` targets s = t-1; ``mode="ddim"`` jumps to the
    caller-provided target step ``s`` in one draw.
    """
    if mode == "ancestral":
        target = t - 1
    elif mode == "ddim":
        if s is None:
            raise ValueError("ddim mode needs a target step s")
        target = s
    else:
        raise ValueError(f"unknown mode {mode!r}")
    post = discrete_jump_posterior(y_t, y0_hat, t, target, schedule)
    draws = rng.random(post.shape[0])
    state1 = (draws < post[:, 1]).astype(np.float64)
    return np.stack([1.0 - state1, state1], axis=1)


def continuous_noise_to_t(y0, t: int, schedule: DiffusionSchedule, rng):
    """Sample (y_t, eps): y_t = sqrt(abar_t) y0 + sqrt(1-abar_t) eps."""
    schedule._check_t(t)
    y0 = np.asarray(y0, dtype=np.float64)
    eps = rng.standard_normal(y0.shape)
    ab = schedule.alpha_bar[t]
    return np.sqrt(ab) * y0 + np.sqrt(1.0 - ab) * eps, eps


def reconstruct_y0(y_t, eps_hat, t: int, schedule: DiffusionSchedule):
    """Invert the marginal: y0_hat = (y_t - sqrt(1-abar_t) eps_hat) / sqrt(abar_t)."""
    ab = schedule.alpha_bar[t]
    return (np.asarray(y_t) - np.sqrt(1.0 - ab) * np.asarray(eps_hat)) / np.sqrt(ab)


def continuous_denoise_step(y_t, eps_hat, t: int, schedule: DiffusionSchedule, rng,
                            mode: str = "ancestral", s: int = None,
                            clip_y0: bool = True):
    """One reverse step of the Gaussian chain.

    Both modes first reconstruct y0 from the predicted noise; by default
    the reconstruction is clamped to the diffusion range [-1, 1] (near
    t = T the inversion multiplies prediction error by 1/sqrt(abar_t), and
    unclamped trajectories diverge). In-range reconstructions pass through
    untouched, so oracle-predictor identities are unaffected.

    Ancestral sampling draws from the exact posterior
    q(y_{t-1} | y_t, y0_hat), which has zero variance at t = 1. DDIM moves
    deterministically to the target step ``s`` using the noise direction
    implied by the (clamped) reconstruction:
    y_s = sqrt(abar_s) y0_hat + sqrt(1-abar_s) eps_tilde.
    """
    schedule._check_t(t)
    y_t = np.asarray(y_t, dtype=np.float64)
    eps_hat = np.asarray(eps_hat, dtype=np.float64)
    y0_hat = reconstruct_y0(y_t, eps_hat, t, schedule)
    ab_t = schedule.alpha_bar[t]
    if clip_y0:
        y0_hat = np.clip(y0_hat, -1.0, 1.0)
        eps_hat = (y_t - np.sqrt(ab_t) * y0_hat) / np.sqrt(1.0 - ab_t)

    if mode == "ancestral":
        ab_prev = schedule.alpha_bar[t - 1]
        beta_t = schedule.beta[t - 1]
        alpha_t = 1.0 - beta_t
        mean = (np.sqrt(ab_prev) * beta_t * y0_hat
                + np.sqrt(alpha_t) * (1.0 - ab_prev) * y_t) / (1.0 - ab_t)
        var = beta_t * (1.0 - ab_prev) / (1.0 - ab_t)
        if var > 0:
            return mean + np.sqrt(var) * rng.standard_normal(y_t.shape)
        return mean
    if mode == "ddim":
        if s is None:
            raise ValueError("ddim mode needs a target step s")
        if not (0 <= s < t):
            raise ValueError(f"need 0 <= s < t, got s={s}, t={t}")
        ab_s = schedule.alpha_bar[s]
        return np.sqrt(ab_s) * y0_hat + np.sqrt(1.0 - ab_s) * eps_hat
    raise ValueError(f"unknown mode {mode!r}")


def rescale_to_diffusion(a):
    """Map allocations [0, 1] to the zero-centered diffusion range [-1, 1]."""
    return 2.0 * np.asarray(a, dtype=np.float64) - 1.0


def rescale_from_diffusion(y):
    """Map diffusion-space values back to [0, 1], clamping overshoot."""
    return np.clip((np.asarray(y, dtype=np.float64) + 1.0) / 2.0, 0.0, 1.0)


def ddim_step_pairs(T: int, steps: int):
    """Uniform-stride (t, s) pairs covering T..0 in ``steps`` model calls.

    Example: T=200, steps=5 -> [(200,160), (160,120), (120,80), (80,40), (40,0)].
    """
    if steps < 1:
        raise ValueError("steps must be >= 1")
    steps = min(steps, T)
    grid = np.unique(np.round(np.linspace(0, T, steps + 1)).astype(int))
    pairs = [(int(grid[i + 1]), int(grid[i])) for i in range(len(grid) - 1)]
    return list(reversed(pairs))
