"""Noise schedule and DDIM skip-step machinery.

Step indices are 1-based: ``s = 1..S``. Index 0 denotes clean data, with
``alpha_hat(0) = 1`` and ``gamma(0) = 0`` so the last DDIM step (1 -> 0) uses
the same coefficient formulas as every other step.
"""

from dataclasses import dataclass

import numpy as np

from .errors import ParameterError, ShapeError


@dataclass(frozen=True)
class NoiseSchedule:
    betas: np.ndarray  # beta_1..beta_S, stored 0-based

    def __post_init__(self):
        betas = np.asarray(self.betas, dtype=np.float64)
        betas.setflags(write=False)
        object.__setattr__(self, "betas", betas)
        ah = np.concatenate([[1.0], np.cumprod(1.0 - betas)])
        ah.setflags(write=False)
        object.__setattr__(self, "_ah", ah)
        g = np.sqrt(1.0 - ah)
        g.setflags(write=False)
        object.__setattr__(self, "_gamma", g)

    @property
    def S(self) -> int:
        return len(self.betas)

    @property
    def beta0(self) -> float:
        return float(self.betas[0])

    @property
    def betaS(self) -> float:
        return float(self.betas[-1])

    @property
    def alphas(self) -> np.ndarray:
        return 1.0 - self.betas

    @property
    def alpha_hats(self) -> np.ndarray:
        """alpha_hat_1..alpha_hat_S (0-based storage)."""
        return self._ah[1:]

    @property
    def gammas(self) -> np.ndarray:
        return self._gamma[1:]

    def alpha_hat(self, s: int) -> float:
        self._check_step(s, allow_zero=True)
        return float(self._ah[s])

    def gamma(self, s: int) -> float:
        self._check_step(s, allow_zero=True)
        return float(self._gamma[s])

    def beta(self, s: int) -> float:
        self._check_step(s)
        return float(self.betas[s - 1])

    def posterior_variance(self, s: int) -> float:
        """Ancestral DDPM reverse variance (1 - ah_{s-1}) / (1 - ah_s) * beta_s.

        Not used by the deterministic sampler; kept for reference.
        """
        self._check_step(s)
        return (1.0 - self._ah[s - 1]) / (1.0 - self._ah[s]) * self.betas[s - 1]

    def _check_step(self, s, allow_zero=False):
        lo = 0 if allow_zero else 1
        if not (lo <= s <= self.S):
            raise ParameterError(f"step {s} outside [{lo}, {self.S}]")


def build_quadratic_schedule(S: int, beta0: float, betaS: float) -> NoiseSchedule:
    """Betas interpolated linearly in sqrt(beta) between the two endpoints."""
    if S < 2:
        raise ParameterError(f"need S >= 2, got {S}")
    if not (0.0 < beta0 < betaS < 1.0):
        raise ParameterError(f"need 0 < beta0 < betaS < 1, got beta0={beta0}, betaS={betaS}")
    frac = np.arange(S) / (S - 1)
    betas = (np.sqrt(beta0) + frac * (np.sqrt(betaS) - np.sqrt(beta0))) ** 2
    # pin endpoints against rounding in the square/sqrt round trip
    betas[0], betas[-1] = beta0, betaS
    return NoiseSchedule(betas)


def ddim_coefficients(sched: NoiseSchedule, s: int, zeta: int):
    """Return (a_s, b_s) of the deterministic update x_{s-zeta} = a x_s + b eps."""
    if zeta == 0:
        return 1.0, 0.0
    if zeta < 0 or s - zeta < 0:
        raise ParameterError(f"invalid DDIM jump {s} -> {s - zeta}")
    a = np.sqrt(sched.alpha_hat(s - zeta) / sched.alpha_hat(s))
    b = sched.gamma(s - zeta) - a * sched.gamma(s)
    return float(a), float(b)


@dataclass(frozen=True)
class StepPlan:
    steps: tuple  # descending, ends at 1
    skip: int
    var_delay: int

    def transitions(self):
        """Yield (s, zeta) for every update; the final one maps s=1 to 0."""
        for s, nxt in zip(self.steps[:-1], self.steps[1:]):
            yield s, s - nxt
        yield self.steps[-1], 1


def build_step_plan(S: int, skip: int, var_delay: int) -> StepPlan:
    if skip < 1:
        raise ParameterError(f"skip must be >= 1, got {skip}")
    if skip >= S and S > 1:
        raise ParameterError(f"skip {skip} must be smaller than S={S}")
    if not (1 <= var_delay <= S):
        raise ParameterError(f"var_delay {var_delay} outside [1, {S}]")
    steps = list(range(S, 0, -skip))
    if steps[-1] != 1:
        steps.append(1)
    return StepPlan(tuple(steps), skip, var_delay)


def forward_sample(sched: NoiseSchedule, x0, s: int, eps):
    """x_s = sqrt(alpha_hat_s) x0 + gamma_s eps."""
    x0 = np.asarray(x0, dtype=np.float64)
    eps = np.asarray(eps, dtype=np.float64)
    if x0.shape != eps.shape:
        raise ShapeError(f"x0 shape {x0.shape} != eps shape {eps.shape}")
    if not (1 <= s <= sched.S):
        raise ParameterError(f"step {s} outside [1, {sched.S}]")
    return np.sqrt(sched.alpha_hat(s)) * x0 + sched.gamma(s) * eps
