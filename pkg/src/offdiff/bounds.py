"""Convergence calculators: concentration bound, hit probabilities, and
sample-count requirements for best-of-n solution sampling.

The model's output distribution is summarized by three gap parameters: the
variance sigma^2 of the generated parameterization around the ideal one,
the per-dimension deviation epsilon, and (continuous case) the sampling
std gamma with tolerance window delta. From these:

* ``chebyshev_bound``: P(|theta' - theta*| >= eps) <= sigma^2 / eps^2.
* ``hit_probability_discrete``: a single draw matches an N-dimensional
  binary target with probability p = (1-eps)^N; n independent draws hit at
  least once with probability 1 - (1-p)^n.
* ``hit_probability_continuous``: per dimension the draw lands within
  +-delta of the target with P_i = Phi((delta-eps)/gamma) -
  Phi((-delta-eps)/gamma); the n-draw expression is the same with
  p = prod P_i.
* ``sample_lower_bound``: the printed closed-form bound
  ln(a / (p_eps - sigma^2/eps^2) + 1) / ln(1 - p), evaluated verbatim
  (note its denominator is negative, so the raw value is typically
  negative), alongside ``min_samples`` - the exact integer n making the
  hit probability reach a target threshold.

All probability arithmetic runs in log space via log1p/expm1.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass
from pathlib import Path

from .errors import PreconditionError

__all__ = [
    "TheoryParams",
    "chebyshev_bound",
    "hit_probability_discrete",
    "hit_probability_continuous",
    "single_draw_probability",
    "min_samples",
    "sample_lower_bound",
    "fig_table",
    "normal_cdf",
]


@dataclass(frozen=True)
class TheoryParams:
    """Parameter bundle for the hit-probability analysis."""

    N: int = 1
    epsilon: float = 0.1
    sigma2: float = 1e-4
    gamma: float = 0.04
    delta: float = 0.1
    a: float = 0.01
    threshold: float = 0.95

    def __post_init__(self):
        if self.N < 1:
            raise PreconditionError("N must be >= 1")
        if not (0 < self.epsilon):
            raise PreconditionError("epsilon must be positive")
        if self.gamma <= 0 or self.delta <= 0 or self.a <= 0:
            raise PreconditionError("gamma, delta, a must be positive")
        if not (0 < self.threshold < 1):
            raise PreconditionError("threshold must be in (0, 1)")


def normal_cdf(x: float) -> float:
    """Standard normal CDF via the C library erf (abs error < 1e-15)."""
    return 0.5 * (1.0 + math.erf(x / math.sqrt(2.0)))


def chebyshev_bound(sigma2: float, epsilon: float) -> float:
    """Upper bound on P(|theta' - theta*| >= epsilon), clamped to [0, 1]."""
    if epsilon <= 0:
        raise PreconditionError(f"epsilon must be positive, got {epsilon}")
    if sigma2 < 0:
        raise PreconditionError(f"variance must be nonnegative, got {sigma2}")
    return min(sigma2 / epsilon**2, 1.0)


def single_draw_probability(N: int, epsilon: float, space: str = "discrete",
                            gamma: float = None, delta: float = None) -> float:
    """Probability that one sample hits the target in all N dimensions."""
    if N < 1:
        raise PreconditionError("N must be >= 1")
    if space == "discrete":
        if not (0 < epsilon < 1):
            raise PreconditionError("discrete case needs epsilon in (0, 1)")
        return math.exp(N * math.log1p(-epsilon))
    if space == "continuous":
        if gamma is None or delta is None or gamma <= 0 or delta <= 0:
            raise PreconditionError("continuous case needs positive gamma and delta")
        p_dim = normal_cdf((delta - epsilon) / gamma) - normal_cdf((-delta - epsilon) / gamma)
        if p_dim <= 0:
            return 0.0
        return math.exp(N * math.log(p_dim))
    raise PreconditionError(f"space must be 'discrete' or 'continuous', got {space!r}")


def _at_least_once(p: float, n: int) -> float:
    """1 - (1 - p)^n, computed stably."""
    if p <= 0:
        return 0.0
    if p >= 1:
        return 1.0
    return -math.expm1(n * math.log1p(-p))


def hit_probability_discrete(N: int, epsilon: float, n: int) -> float:
    """Chance that n draws hit the N-dim binary target at least once."""
    if n < 1:
        raise PreconditionError("n must be >= 1")
    return _at_least_once(single_draw_probability(N, epsilon, "discrete"), n)


def hit_probability_continuous(N: int, epsilon: float, gamma: float, delta: float,
                               n: int) -> float:
    """Chance that n draws land within +-delta in every dimension at least once."""
    if n < 1:
        raise PreconditionError("n must be >= 1")
    p = single_draw_probability(N, epsilon, "continuous", gamma=gamma, delta=delta)
    return _at_least_once(p, n)


def min_samples(p: float, threshold: float = 0.95) -> int:
    """Exact integer inverse: smallest n with 1 - (1-p)^n >= threshold."""
    if not (0 < threshold < 1):
        raise PreconditionError("threshold must be in (0, 1)")
    if p <= 0:
        raise PreconditionError("single-draw probability is 0; threshold unreachable")
    if p >= 1:
        return 1
    n = max(1, math.ceil(math.log1p(-threshold) / math.log1p(-p)))
    while _at_least_once(p, n) < threshold:      # guard against float boundary error
        n += 1
    while n > 1 and _at_least_once(p, n - 1) >= threshold:
        n -= 1
    return n


@dataclass(frozen=True)
class LowerBoundResult:
    raw_value: float        # the closed form exactly as printed (often negative)
    min_samples: int        # direct integer inverse at the threshold
    single_draw_p: float


def sample_lower_bound(params: TheoryParams, p_eps: float,
                       space: str = "discrete") -> LowerBoundResult:
    """Evaluate the printed sample-count bound plus the robust integer answer.

    Preconditions: p_eps must exceed sigma^2/eps^2 (otherwise the log
    argument is invalid) and the single-draw probability must be positive.
    The raw formula divides by ln(1 - p) < 0 without a sign flip, so its
    value is reported as-is; ``min_samples`` is the recommended quantity.
    """
    ratio = params.sigma2 / params.epsilon**2
    if p_eps <= ratio:
        raise PreconditionError(
            f"p_eps={p_eps} must exceed sigma^2/eps^2={ratio}; the bound's "
            f"log argument is undefined otherwise"
        )
    p = single_draw_probability(params.N, params.epsilon, space,
                                gamma=params.gamma, delta=params.delta)
    if p <= 0:
        raise PreconditionError("single-draw probability is 0; no finite bound")
    if p >= 1:
        raise PreconditionError("single-draw probability is 1; bound degenerate")
    raw = math.log(params.a / (p_eps - ratio) + 1.0) / math.log1p(-p)
    return LowerBoundResult(raw_value=raw,
                            min_samples=min_samples(p, params.threshold),
                            single_draw_p=p)


def fig_table(Ns=(1, 10, 20), epsilon: float = 0.1, gamma: float = 0.04,
              delta: float = 0.1, threshold: float = 0.95, n_max: int = 30,
              out_csv=None) -> list:
    """Hit-probability curves over n with threshold crossings.

    Returns rows (space, N, n, expectation, crossing_n) for both solution
    spaces and each N; ``crossing_n`` is the first n reaching the
    threshold (constant along a curve). Optionally writes them as CSV.
    """
    rows = []
    for space in ("discrete", "continuous"):
        for N in Ns:
            p = single_draw_probability(N, epsilon, space, gamma=gamma, delta=delta)
            crossing = min_samples(p, threshold) if p > 0 else None
            for n in range(1, n_max + 1):
                rows.append((space, N, n, _at_least_once(p, n), crossing))
    if out_csv is not None:
        out_csv = Path(out_csv)
        out_csv.parent.mkdir(parents=True, exist_ok=True)
        with open(out_csv, "w", newline="", encoding="utf-8") as fh:
            w = csv.writer(fh)
            w.writerow(["space", "N", "n", "expectation", "crossing_n"])
            for space, N, n, e, c in rows:
                w.writerow([space, N, n, repr(e), "" if c is None else c])
    return rows
