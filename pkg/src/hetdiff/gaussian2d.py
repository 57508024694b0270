"""Bi-variate Gaussian algebra.

Functions are vectorized over leading axes: means/targets are ``(..., 2)`` and
covariances ``(..., 2, 2)``. :class:`Gauss2` is a thin value type for the
single-state case and for serialization.
"""

from dataclasses import dataclass, field
import math

import numpy as np

from .errors import NumericDomainError, UndefinedInputError

RHO_LIMIT = 1.0 - 1e-6
CHI2_2DOF_95 = 5.991465
LOG_2PI = math.log(2.0 * math.pi)
_DET_FLOOR = 1e-300


def chi2_2dof_quantile(level: float) -> float:
    """Quantile of the 2-dof chi-square distribution (closed form -2 log(1 - p))."""
    if not 0.0 < level < 1.0:
        raise ValueError(f"level must be in (0, 1), got {level}")
    if level == 0.95:
        return CHI2_2DOF_95
    return -2.0 * math.log1p(-level)


def cov_from_params(sx, sy, rho):
    sx, sy = np.asarray(sx, dtype=np.float64), np.asarray(sy, dtype=np.float64)
    rho = np.clip(np.asarray(rho, dtype=np.float64), -RHO_LIMIT, RHO_LIMIT)
    off = rho * sx * sy
    return np.stack([np.stack([sx * sx, off], -1), np.stack([off, sy * sy], -1)], -2)


def params_from_cov(cov):
    """Inverse of :func:`cov_from_params`; zero-variance axes give sx=0 / rho=0."""
    cov = np.asarray(cov, dtype=np.float64)
    sx = np.sqrt(np.maximum(cov[..., 0, 0], 0.0))
    sy = np.sqrt(np.maximum(cov[..., 1, 1], 0.0))
    denom = sx * sy
    with np.errstate(invalid="ignore", divide="ignore"):
        rho = np.where(denom > 0, cov[..., 0, 1] / np.where(denom > 0, denom, 1.0), 0.0)
    return sx, sy, np.clip(rho, -RHO_LIMIT, RHO_LIMIT)


def _det_inv(cov):
    cov = np.asarray(cov, dtype=np.float64)
    a, b, c, d = cov[..., 0, 0], cov[..., 0, 1], cov[..., 1, 0], cov[..., 1, 1]
    det = a * d - b * c
    bad = ~(det > _DET_FLOOR) | ~np.isfinite(det)
    if np.any(bad):
        idx = tuple(int(i) for i in np.argwhere(np.atleast_1d(bad))[0]) if np.ndim(bad) else ()
        raise NumericDomainError("degenerate covariance (non-positive determinant)", index=idx)
    inv = np.stack([np.stack([d, -b], -1), np.stack([-c, a], -1)], -2) / det[..., None, None]
    return det, inv


def mahalanobis_sq(mean, cov, target):
    w = np.asarray(target, dtype=np.float64) - np.asarray(mean, dtype=np.float64)
    _, inv = _det_inv(cov)
    return np.einsum("...i,...ij,...j->...", w, inv, w)


def nll(mean, cov, target):
    """Per-state NLL, normalized per coordinate: 0.5 [log(2 pi |S|^0.5) + 0.5 w' S^-1 w]."""
    w = np.asarray(target, dtype=np.float64) - np.asarray(mean, dtype=np.float64)
    det, inv = _det_inv(cov)
    m = np.einsum("...i,...ij,...j->...", w, inv, w)
    return 0.5 * (LOG_2PI + 0.5 * np.log(det) + 0.5 * m)


def inside_confidence(mean, cov, target, level=0.95):
    return mahalanobis_sq(mean, cov, target) <= chi2_2dof_quantile(level)


def eigenvalues(cov):
    """Return (lam1, lam2) with lam1 >= lam2, closed-form for symmetric 2x2."""
    cov = np.asarray(cov, dtype=np.float64)
    a, b, d = cov[..., 0, 0], 0.5 * (cov[..., 0, 1] + cov[..., 1, 0]), cov[..., 1, 1]
    half_tr = 0.5 * (a + d)
    r = np.hypot(0.5 * (a - d), b)
    return half_tr + r, half_tr - r


def semi_axis_mean(cov):
    """(sqrt(lam1) + sqrt(lam2)) / 2 per state."""
    l1, l2 = eigenvalues(cov)
    return 0.5 * (np.sqrt(np.maximum(l1, 0.0)) + np.sqrt(np.maximum(l2, 0.0)))


def avg_ucty(covs, mask):
    """Mean semi-axis length over unobserved states (mask == 0).

    covs: ``(T, N, 2, 2)``; mask: ``(T, N)``. Leading mode axes on ``covs`` are
    allowed and give one value per mode.
    """
    mask = np.asarray(mask)
    hidden = mask == 0
    if not hidden.any():
        raise UndefinedInputError("avg_ucty needs at least one unobserved state")
    sa = semi_axis_mean(covs)
    return (sa * hidden).sum(axis=(-2, -1)) / hidden.sum()


@dataclass
class Gauss2:
    mean: np.ndarray
    sx: float
    sy: float
    rho: float = 0.0

    def __post_init__(self):
        self.mean = np.asarray(self.mean, dtype=np.float64).reshape(2)
        if not (self.sx > 0 and self.sy > 0):
            raise NumericDomainError(f"standard deviations must be positive, got {self.sx}, {self.sy}")
        self.rho = float(np.clip(self.rho, -RHO_LIMIT, RHO_LIMIT))

    @classmethod
    def from_cov(cls, mean, cov):
        sx, sy, rho = params_from_cov(cov)
        return cls(mean, float(sx), float(sy), float(rho))

    @property
    def cov(self):
        return cov_from_params(self.sx, self.sy, self.rho)

    def nll(self, target):
        return float(nll(self.mean, self.cov, target))

    def mahalanobis_sq(self, target):
        return float(mahalanobis_sq(self.mean, self.cov, target))

    def inside(self, target, level=0.95):
        return bool(inside_confidence(self.mean, self.cov, target, level))

    def eigenvalues(self):
        l1, l2 = eigenvalues(self.cov)
        return float(l1), float(l2)

    def to_dict(self):
        return {"mean": [float(self.mean[0]), float(self.mean[1])],
                "sx": float(self.sx), "sy": float(self.sy), "rho": float(self.rho)}

    @classmethod
    def from_dict(cls, d):
        return cls(d["mean"], d["sx"], d["sy"], d.get("rho", 0.0))


@dataclass
class UncertainScene:
    """Per-state Gaussian field: means ``(T, N, 2)``, covariances ``(T, N, 2, 2)``.

    Covariances may be exactly zero (the start of reverse sampling).
    """

    means: np.ndarray
    covs: np.ndarray = field(default=None)

    def __post_init__(self):
        self.means = np.asarray(self.means, dtype=np.float64)
        if self.covs is None:
            self.covs = np.zeros(self.means.shape + (2,))
        self.covs = np.asarray(self.covs, dtype=np.float64)

    def gauss_params(self):
        return params_from_cov(self.covs)

    def state(self, t, n) -> Gauss2:
        return Gauss2.from_cov(self.means[t, n], self.covs[t, n])
