"""Exact optimal denoiser for per-state Gaussian data X_0 ~ N(m, C).

With x_s = sqrt(ah) x_0 + g eps, the noise posterior given x_s is Gaussian:

    A     = ah C + g^2 I
    mean  = g A^-1 (x_s - sqrt(ah) m)
    cov   = I - g^2 A^-1
    d mean / d x_s = g A^-1

States are independent, so every quantity is a 2x2 closed form.
"""

from dataclasses import dataclass

import numpy as np

from .denoiser import DenoiserOutput, DenoiserQuery
from .errors import ParameterError
from .gaussian2d import params_from_cov
from .scene import Scene
from .schedule import NoiseSchedule


@dataclass
class GaussianDataModel:
    mean: np.ndarray  # (2,) or (T, N, 2)
    cov: np.ndarray  # (2, 2) SPD

    def __post_init__(self):
        self.mean = np.asarray(self.mean, dtype=np.float64)
        self.cov = np.asarray(self.cov, dtype=np.float64)
        if self.cov.shape != (2, 2) or not np.allclose(self.cov, self.cov.T):
            raise ParameterError("cov must be a symmetric 2x2 matrix")
        if np.linalg.eigvalsh(self.cov)[0] <= 0:
            raise ParameterError("cov must be positive definite")

    def sample(self, shape, rng):
        """Draw X_0 with array shape ``shape + (2,)``."""
        L = np.linalg.cholesky(self.cov)
        z = rng.standard_normal(tuple(shape) + (2,))
        return np.broadcast_to(self.mean, tuple(shape) + (2,)) + z @ L.T

    def scenes(self, n, T, N, seed=0):
        rng = np.random.default_rng([int(seed), 0x6761])
        return [Scene(self.sample((T, N), rng), np.ones((T, N), np.int8), f"gauss-{seed}-{i:05d}")
                for i in range(n)]


def _A_inv(data: GaussianDataModel, sched: NoiseSchedule, s: int):
    ah, g = sched.alpha_hat(s), sched.gamma(s)
    return np.linalg.inv(ah * data.cov + g * g * np.eye(2))


def optimal_eps(data: GaussianDataModel, sched: NoiseSchedule, x_s, s: int):
    """Return (mu, Sigma, J) of the exact noise posterior at step ``s``."""
    ah, g = sched.alpha_hat(s), sched.gamma(s)
    Ainv = _A_inv(data, sched, s)
    x_s = np.asarray(x_s, dtype=np.float64)
    mu = g * (x_s - np.sqrt(ah) * data.mean) @ Ainv.T
    Sigma = np.eye(2) - g * g * Ainv
    J = g * Ainv
    return mu, 0.5 * (Sigma + Sigma.T), J


def marginal_of_Xs(data: GaussianDataModel, sched: NoiseSchedule, s: int):
    """(mean, cov) of the forward marginal q(X_s) = N(sqrt(ah) m, ah C + g^2 I)."""
    ah, g = sched.alpha_hat(s), sched.gamma(s)
    return np.sqrt(ah) * data.mean, ah * data.cov + g * g * np.eye(2)


class AnalyticDenoiser:
    """Denoiser interface over :func:`optimal_eps`; the condition is ignored."""

    def __init__(self, data: GaussianDataModel, sched: NoiseSchedule):
        self.data = data
        self.sched = sched

    def evaluate(self, q: DenoiserQuery) -> DenoiserOutput:
        mu, Sigma, J = optimal_eps(self.data, self.sched, q.x_s, q.s)
        sx, sy, rho = params_from_cov(Sigma)
        cov = np.broadcast_to(np.array([sx, sy, rho]), mu.shape[:-1] + (3,)).copy()
        out = DenoiserOutput(mu, cov)
        if q.jacobian_mode == "diagonal":
            out.jac_diag = np.broadcast_to(np.diag(J), mu.shape).copy()
        elif q.jacobian_mode == "full":
            out.jac_full = np.broadcast_to(J, mu.shape + (2,)).copy()
        return out
