"""Reverse Gaussian Sampling: deterministic DDIM mean updates with per-state
covariance propagation through a first-order Taylor expansion of the noise
predictor.

Per transition s -> s - zeta with coefficients (a, b):

    X'  = a X + b eps_mu(X)
    V'  = (a I + b J) V (a I + b J)^T + b^2 eps_Sigma(X)

``u2diff`` takes J = 0 and holds V at zero while s > var_delay; ``u2diffine``
uses the diagonal of the per-state Jacobian; ``full_jacobian`` uses the full
2x2 block with clamped singular values. The last step (1 -> 0) only updates
the mean and copies the covariance.
"""

from dataclasses import dataclass, field
import json
import statistics
import time
from typing import Optional

import numpy as np

from .denoiser import DenoiserQuery, evaluate
from .errors import ContractViolation, NumericDomainError, ParameterError, SamplingError
from .gaussian2d import params_from_cov, cov_from_params
from .scene import CondScene
from .schedule import NoiseSchedule, StepPlan, ddim_coefficients

VARIANTS = ("u2diff", "u2diffine", "full_jacobian")
_JAC_MODE = {"u2diff": "none", "u2diffine": "diagonal", "full_jacobian": "full"}
_PSD_TOL = 1e-12


@dataclass
class SamplerConfig:
    variant: str = "u2diffine"
    plan: StepPlan = None
    K: int = 20
    seed: int = 0
    sv_clamp: float = 100.0
    condition_replace: bool = True
    # how the network Jacobian is obtained, see DenoiserQuery
    jacobian_method: str = "two_pass"

    def __post_init__(self):
        if self.variant not in VARIANTS:
            raise ParameterError(f"variant must be one of {VARIANTS}, got {self.variant!r}")
        if self.K < 1:
            raise ParameterError("K must be >= 1")
        if self.sv_clamp <= 0:
            raise ParameterError("sv_clamp must be positive")
        if self.plan is None:
            raise ParameterError("a StepPlan is required")

    @property
    def var_delay(self) -> int:
        """Effective variance start step; only u2diff delays propagation."""
        return self.plan.var_delay if self.variant == "u2diff" else self.plan.steps[0]


@dataclass
class ModeSet:
    scene_id: str
    means: np.ndarray  # (K, T, N, 2)
    covs: np.ndarray  # (K, T, N, 2, 2)
    variant: str
    seed: int
    e: Optional[np.ndarray] = None  # (K,) ranker error probabilities
    trace: list = field(default_factory=list)

    @property
    def K(self):
        return self.means.shape[0]

    def subset(self, idx):
        idx = np.asarray(idx)
        return ModeSet(self.scene_id, self.means[idx], self.covs[idx], self.variant, self.seed,
                       None if self.e is None else self.e[idx], self.trace)

    def to_records(self):
        sx, sy, rho = params_from_cov(self.covs)
        out = []
        for k in range(self.K):
            covs = [[{"sx": float(sx[k, t, n]), "sy": float(sy[k, t, n]), "rho": float(rho[k, t, n])}
                     for n in range(self.means.shape[2])] for t in range(self.means.shape[1])]
            rec = {"scene_id": self.scene_id, "mode": k, "means": self.means[k].tolist(),
                   "covs": covs, "variant": self.variant, "seed": self.seed}
            if self.e is not None:
                rec["e"] = float(self.e[k])
            out.append(rec)
        return out


def modesets_from_records(records):
    """Group JSONL mode records back into ModeSets (order of first appearance)."""
    groups = {}
    for rec in records:
        groups.setdefault(rec["scene_id"], []).append(rec)
    sets = []
    for sid, recs in groups.items():
        recs = sorted(recs, key=lambda r: r["mode"])
        means = np.array([r["means"] for r in recs], dtype=np.float64)
        p = np.array([[[[c["sx"], c["sy"], c["rho"]] for c in row] for row in r["covs"]] for r in recs])
        covs = cov_from_params(p[..., 0], p[..., 1], p[..., 2])
        e = np.array([r["e"] for r in recs]) if all("e" in r for r in recs) else None
        sets.append(ModeSet(sid, means, covs, recs[0]["variant"], recs[0]["seed"], e))
    return sets


def save_modesets(sets, path):
    with open(path, "w") as fh:
        for ms in sets:
            for rec in ms.to_records():
                fh.write(json.dumps(rec, separators=(",", ":")) + "\n")


def load_modesets(path):
    with open(path) as fh:
        return modesets_from_records([json.loads(line) for line in fh if line.strip()])


# ---------------------------------------------------------------- update rules


def mean_step(x, eps_mu, a, b):
    return a * np.asarray(x) + b * np.asarray(eps_mu)


def _min_eig(V):
    a, d = V[..., 0, 0], V[..., 1, 1]
    bc = 0.5 * (V[..., 0, 1] + V[..., 1, 0])
    return 0.5 * (a + d) - np.hypot(0.5 * (a - d), bc)


def check_psd(V, what="covariance"):
    V = np.asarray(V)
    scale = 1.0 + np.abs(V[..., 0, 0]) + np.abs(V[..., 1, 1])
    bad = (_min_eig(V) < -_PSD_TOL * scale) | ~np.isfinite(V).all(axis=(-2, -1))
    if bad.any():
        idx = tuple(int(i) for i in np.argwhere(bad)[0])
        raise ContractViolation(f"{what} is not positive semi-definite at index {idx}")


def var_step(V, eps_cov, J, a, b, check=True):
    """Congruence update of per-state 2x2 covariances; J=None means zero."""
    V = np.asarray(V, dtype=np.float64)
    if check:
        check_psd(V, "input covariance")
    M = a * np.eye(2) if J is None else a * np.eye(2) + b * np.asarray(J)
    out = M @ V @ np.swapaxes(M, -1, -2) + (b * b) * np.asarray(eps_cov)
    return 0.5 * (out + np.swapaxes(out, -1, -2))


def clamp_jacobian(J, sv_clamp):
    """Clamp singular values to at most ``sv_clamp`` and symmetrize."""
    U, S, Vt = np.linalg.svd(J)
    Jc = U @ (np.minimum(S, sv_clamp)[..., None] * Vt)
    return 0.5 * (Jc + np.swapaxes(Jc, -1, -2))


def initial_noise(cond: CondScene, K: int, seed: int):
    """X_S for K modes, each from its own substream of ``seed``."""
    shape = cond.observed.shape
    return np.stack([np.random.default_rng([int(seed), 0x73616D70, k]).standard_normal(shape)
                     for k in range(K)])


# ---------------------------------------------------------------- sampler


def _bad_index(arr, what, s, V=False):
    finite = np.isfinite(arr).all(axis=(-2, -1) if V else -1)
    if not finite.all():
        k, t, n = (int(i) for i in np.argwhere(~finite)[0])
        raise SamplingError(f"non-finite {what}", mode=k, step=s, state=(t, n))


def reverse_sample(model, cond: CondScene, sched: NoiseSchedule, cfg: SamplerConfig, x_S=None):
    """Run the reverse chain on a (K, T, N, 2) batch. Returns (means, covs, trace)."""
    x = initial_noise(cond, cfg.K, cfg.seed) if x_S is None else np.asarray(x_S, dtype=np.float64)
    V = np.zeros(x.shape + (2,))
    jac_mode = _JAC_MODE[cfg.variant]
    delay = cfg.var_delay
    trace = [{"s": cfg.plan.steps[0], "zeta": 0, "var": "init", "var_trace_max": 0.0}]
    for s, zeta in cfg.plan.transitions():
        a, b = ddim_coefficients(sched, s, zeta)
        final = s - zeta == 0
        propagate = not final and s <= delay
        q = DenoiserQuery(x, s, cond, jac_mode if propagate else "none", cfg.jacobian_method)
        try:
            out = evaluate(model, q)
        except NumericDomainError as exc:
            raise SamplingError(f"denoiser failure: {exc}", step=s) from exc
        x = mean_step(x, out.eps_mu, a, b)
        _bad_index(x, "mean", s)
        if final:
            kind = "copy"
        elif propagate:
            J = out.jacobian()
            if cfg.variant == "full_jacobian":
                J = clamp_jacobian(J, cfg.sv_clamp)
            try:
                V = var_step(V, out.cov_matrix(), J, a, b)
            except ContractViolation as exc:
                raise SamplingError(str(exc), step=s) from exc
            _bad_index(V, "covariance", s, V=True)
            kind = "propagate"
        else:
            V = np.zeros_like(V)
            kind = "zero"
        trace.append({"s": s, "zeta": zeta, "a": a, "b": b, "var": kind,
                      "var_trace_max": float((V[..., 0, 0] + V[..., 1, 1]).max())})
    return x, V, trace


def sample(model, cond: CondScene, sched: NoiseSchedule, cfg: SamplerConfig, x_S=None) -> ModeSet:
    means, covs, trace = reverse_sample(model, cond, sched, cfg, x_S)
    if cfg.condition_replace:
        obs = np.asarray(cond.mask, dtype=bool)
        means[:, obs] = cond.observed[obs]
    return ModeSet(cond.scene_id, means, covs, cfg.variant, cfg.seed, trace=trace)


# ---------------------------------------------------------------- Monte-Carlo oracle


@dataclass
class OracleResult:
    cov: np.ndarray  # (T, N, 2, 2) unbiased empirical covariance of X_0
    se: np.ndarray  # (T, N, 2, 2) standard error of each entry
    mean: np.ndarray  # (T, N, 2)
    n_runs: int
    degenerate: bool = False


def stochastic_reverse(model, cond: CondScene, sched: NoiseSchedule, plan: StepPlan, x_S, rng,
                       var_delay: int = None, stochastic: bool = True):
    """Reverse chain where the noise is drawn as eps ~ N(eps_mu(X), eps_Sigma(X)).

    Noise is injected only for s <= var_delay and never at the final step, the
    same places where the propagated covariance grows. ``x_S`` is a
    ``(B, T, N, 2)`` batch of starting points.
    """
    var_delay = plan.steps[0] if var_delay is None else var_delay
    x = np.array(x_S, dtype=np.float64)
    for s, zeta in plan.transitions():
        a, b = ddim_coefficients(sched, s, zeta)
        out = evaluate(model, DenoiserQuery(x, s, cond))
        eps = out.eps_mu
        if stochastic and s - zeta > 0 and s <= var_delay:
            sx, sy, rho = np.moveaxis(out.eps_cov, -1, 0)
            z = rng.standard_normal(x.shape)
            eps = eps + np.stack([sx * z[..., 0],
                                  sy * (rho * z[..., 0] + np.sqrt(1 - rho * rho) * z[..., 1])], -1)
        x = mean_step(x, eps, a, b)
    return x


def mc_covariance_oracle(model, cond: CondScene, sched: NoiseSchedule, plan: StepPlan, n_runs: int,
                         seed: int = 0, x_S=None, resample_xs: bool = False,
                         stochastic: bool = True, var_delay: int = None, chunk: int = 2000):
    """Empirical covariance of X_0 over reverse trajectories.

    With ``resample_xs`` every run starts from its own X_S ~ N(0, I);
    otherwise all runs share ``x_S`` (drawn from ``seed`` if omitted), which
    is the quantity the propagated covariance approximates.
    """
    if n_runs < 1:
        raise ParameterError("n_runs must be >= 1")
    rng = np.random.default_rng([int(seed), 0x6D63])
    shape = cond.observed.shape
    if x_S is None:
        x_S = rng.standard_normal(shape)
    finals = []
    for start in range(0, n_runs, chunk):
        m = min(chunk, n_runs - start)
        x = rng.standard_normal((m,) + shape) if resample_xs else np.broadcast_to(x_S, (m,) + shape)
        finals.append(stochastic_reverse(model, cond, sched, plan, x, rng, var_delay, stochastic))
    X = np.concatenate(finals)
    mean = X.mean(axis=0)
    if n_runs == 1:
        z = np.zeros(shape + (2,))
        return OracleResult(z, z.copy(), mean, 1, degenerate=True)
    dev = X - mean
    prod = dev[..., :, None] * dev[..., None, :]
    cov = prod.sum(axis=0) / (n_runs - 1)
    se = prod.std(axis=0, ddof=1) / np.sqrt(n_runs)
    return OracleResult(cov, se, mean, n_runs)


# ---------------------------------------------------------------- timing


def timing_probe(model, cond: CondScene, sched: NoiseSchedule, plan: StepPlan,
                 variants=("u2diff", "u2diffine"), K: int = 20, reps: int = 20, seed: int = 0,
                 jacobian_method: str = "two_pass"):
    """Median wall-clock milliseconds per mode for each variant (``reps`` >= 20)."""
    if reps < 20:
        raise ParameterError("timing needs at least 20 repetitions")
    result = {}
    for v in variants:
        cfg = SamplerConfig(v, plan, K, seed, jacobian_method=jacobian_method)
        sample(model, cond, sched, cfg)  # warm-up
        times = []
        for _ in range(reps):
            t0 = time.perf_counter()
            sample(model, cond, sched, cfg)
            times.append(1000.0 * (time.perf_counter() - t0) / K)
        result[v] = statistics.median(times)
    return result
