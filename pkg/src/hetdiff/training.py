"""Losses and the optimization loop for the noise-predicting denoiser."""

from dataclasses import dataclass
import csv
import math
import time

import numpy as np
import torch

from .errors import NumericDomainError, ParameterError, UndefinedInputError
from .gaussian2d import LOG_2PI, RHO_LIMIT
from .net import DTYPE
from .scene import MaskSpec, make_mask
from .schedule import NoiseSchedule

TARGET_POLICIES = ("all_states", "unobserved_only")
LOG_FIELDS = ("epoch", "lr", "L_simple", "L_NLL", "L_total", "wall_ms")


@dataclass
class TrainConfig:
    lam: float = 0.01
    epochs: int = 20
    batch_size: int = 16
    lr0: float = 1e-3
    lr_halving_period: int = 20
    seed: int = 0
    target_policy: str = "all_states"
    # Adam with torch defaults (beta1 0.9, beta2 0.999, eps 1e-8)
    optimizer: str = "adam"
    checkpoint_every: int = 0

    def __post_init__(self):
        if self.lam < 0:
            raise ParameterError("lambda must be >= 0")
        if self.lr0 < 0:
            raise ParameterError("lr0 must be >= 0")
        if self.epochs < 1 or self.batch_size < 1 or self.lr_halving_period < 1:
            raise ParameterError("epochs, batch_size and lr_halving_period must be >= 1")
        if self.target_policy not in TARGET_POLICIES:
            raise ParameterError(f"target_policy must be one of {TARGET_POLICIES}")
        if self.optimizer not in ("adam", "sgd"):
            raise ParameterError("optimizer must be 'adam' or 'sgd'")


def lr_schedule(cfg: TrainConfig, epoch: int) -> float:
    """Step decay: halve every ``lr_halving_period`` epochs (0-based epoch)."""
    return cfg.lr0 * 0.5 ** (epoch // cfg.lr_halving_period)


def _t(x):
    return x if torch.is_tensor(x) else torch.as_tensor(np.asarray(x), dtype=DTYPE)


def _weights(weight_mask, shape):
    w = _t(weight_mask).to(DTYPE).expand(shape)
    total = w.sum()
    if total <= 0:
        raise UndefinedInputError("loss weight mask selects no state")
    return w, total


def loss_simple(eps_true, eps_mu, weight_mask):
    """Weighted mean over states of the squared 2-vector residual norm."""
    eps_true, eps_mu = _t(eps_true), _t(eps_mu)
    if eps_true.shape != eps_mu.shape:
        raise ParameterError(f"shape mismatch {tuple(eps_true.shape)} vs {tuple(eps_mu.shape)}")
    w, total = _weights(weight_mask, eps_mu.shape[:-1])
    return (((eps_true - eps_mu) ** 2).sum(-1) * w).sum() / total


def gauss_nll_torch(mean, cov_params, target):
    """Per-state bi-variate NLL (per-coordinate normalization) from (sx, sy, rho)."""
    sx, sy = cov_params[..., 0], cov_params[..., 1]
    rho = cov_params[..., 2].clamp(-RHO_LIMIT, RHO_LIMIT)
    one_m = 1.0 - rho * rho
    det = (sx * sy) ** 2 * one_m
    if not bool((det > 1e-300).all()):
        bad = torch.nonzero(~(det > 1e-300))[0].tolist()
        raise NumericDomainError("degenerate covariance in NLL", index=tuple(bad))
    wx = (target[..., 0] - mean[..., 0]) / sx
    wy = (target[..., 1] - mean[..., 1]) / sy
    maha = (wx * wx - 2 * rho * wx * wy + wy * wy) / one_m
    return 0.5 * (LOG_2PI + 0.5 * torch.log(det) + 0.5 * maha)


def loss_nll(eps_true, eps_mu, eps_cov, weight_mask):
    """Weighted mean per-state NLL of ``eps_true``; the mean is detached so only
    the covariance path receives gradient."""
    eps_true, eps_mu, eps_cov = _t(eps_true), _t(eps_mu), _t(eps_cov)
    w, total = _weights(weight_mask, eps_mu.shape[:-1])
    per_state = gauss_nll_torch(eps_mu.detach(), eps_cov, eps_true)
    return (per_state * w).sum() / total


# ---------------------------------------------------------------- batches


@dataclass
class Batch:
    x0: torch.Tensor  # (B, T, N, 2)
    observed: torch.Tensor
    mask: torch.Tensor  # (B, T, N)
    roles: torch.Tensor  # (B, N)


def make_batch(scenes, masks=None) -> Batch:
    coords = np.stack([s.coords for s in scenes])
    mask = np.stack([s.mask for s in scenes] if masks is None else masks)
    roles = np.stack([s.role_ids() for s in scenes])
    return Batch(torch.as_tensor(coords, dtype=DTYPE),
                 torch.as_tensor(coords * mask[..., None], dtype=DTYPE),
                 torch.as_tensor(mask, dtype=DTYPE), torch.as_tensor(roles))


def compute_losses(module, batch: Batch, sched: NoiseSchedule, cfg: TrainConfig, rng):
    """Sample (s, eps) per example, run the model and assemble the loss terms."""
    B = batch.x0.shape[0]
    s = rng.integers(1, sched.S + 1, size=B)
    eps = torch.as_tensor(rng.standard_normal(tuple(batch.x0.shape)), dtype=DTYPE)
    ah = torch.as_tensor(sched.alpha_hats[s - 1], dtype=DTYPE)[:, None, None, None]
    x_s = ah.sqrt() * batch.x0 + (1 - ah).sqrt() * eps
    mu, cov = module(x_s, torch.as_tensor(s), batch.observed, batch.mask, batch.roles)
    weight = torch.ones_like(batch.mask) if cfg.target_policy == "all_states" else 1 - batch.mask
    l_simple = loss_simple(eps, mu, weight)
    l_nll = loss_nll(eps, mu, cov, weight)
    return l_simple, l_nll, l_simple + cfg.lam * l_nll


def make_optimizer(module, cfg: TrainConfig):
    if cfg.optimizer == "adam":
        return torch.optim.Adam(module.parameters(), lr=cfg.lr0)
    return torch.optim.SGD(module.parameters(), lr=cfg.lr0)


def train_step(module, optimizer, batch: Batch, sched, cfg: TrainConfig, rng, lr=None):
    """One gradient step on L_total. Returns the loss record (floats)."""
    if lr is not None:
        for group in optimizer.param_groups:
            group["lr"] = lr
    module.train()
    optimizer.zero_grad()
    l_simple, l_nll, l_total = compute_losses(module, batch, sched, cfg, rng)
    if not torch.isfinite(l_total):
        raise NumericDomainError(f"non-finite loss (L_simple={float(l_simple)}, L_NLL={float(l_nll)})")
    if optimizer.param_groups[0]["lr"] > 0:
        l_total.backward()
        optimizer.step()
    return {"L_simple": l_simple.item(), "L_NLL": l_nll.item(), "L_total": l_total.item()}


def train(module, scenes, sched: NoiseSchedule, cfg: TrainConfig, mask_spec: MaskSpec = None,
          log_path=None, on_epoch=None):
    """Run the optimization loop; returns the per-epoch log rows.

    With ``mask_spec`` every example gets a fresh mask each epoch, otherwise
    the scenes' own masks are used. ``on_epoch(epoch, module)`` is called after
    each epoch (used for periodic checkpoints).
    """
    if not scenes:
        raise ParameterError("no training scenes")
    torch.manual_seed(cfg.seed)
    rng = np.random.default_rng([cfg.seed, 0x747261696E])
    optimizer = make_optimizer(module, cfg)
    rows = []
    writer = None
    fh = open(log_path, "w", newline="") if log_path else None
    try:
        if fh:
            writer = csv.DictWriter(fh, fieldnames=LOG_FIELDS)
            writer.writeheader()
        for epoch in range(cfg.epochs):
            t0 = time.perf_counter()
            lr = lr_schedule(cfg, epoch)
            order = rng.permutation(len(scenes))
            acc = {"L_simple": 0.0, "L_NLL": 0.0, "L_total": 0.0}
            n_batches = math.ceil(len(scenes) / cfg.batch_size)
            for b in range(n_batches):
                idx = order[b * cfg.batch_size:(b + 1) * cfg.batch_size]
                chunk = [scenes[i] for i in idx]
                masks = None
                if mask_spec is not None:
                    masks = [make_mask(mask_spec, sc.T, sc.N, seed=int(rng.integers(2**62)))
                             for sc in chunk]
                rec = train_step(module, optimizer, make_batch(chunk, masks), sched, cfg, rng, lr)
                for k in acc:
                    acc[k] += rec[k] / n_batches
            row = {"epoch": epoch + 1, "lr": lr, **acc,
                   "wall_ms": round(1000 * (time.perf_counter() - t0), 3)}
            rows.append(row)
            if writer:
                writer.writerow(row)
                fh.flush()
            if on_epoch is not None:
                on_epoch(epoch + 1, module)
    finally:
        if fh:
            fh.close()
    module.eval()
    return rows
