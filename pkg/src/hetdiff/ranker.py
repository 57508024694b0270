"""Mode ranking: a permutation-equivariant scorer over the K sampled modes of
one scene, trained to maximize a differentiable Spearman correlation between
its error probabilities and the per-mode SADE.
"""

from dataclasses import dataclass, asdict
import warnings

import numpy as np
import torch
from torch import nn
import torch.nn.functional as F

from . import gaussian2d as g2
from .denoiser import load_checkpoint, save_checkpoint
from .errors import ParameterError, ShapeError, UsageError
from .metrics import sade, spearman
from .net import DTYPE, SetAttention, SocialTemporalBlock, load_module_tensors, module_tensors
from .sampler import SamplerConfig, sample
from .scene import split_condition

N_FEATURES = 5


@dataclass
class RankConfig:
    d_model: int = 32
    tau: float = 0.1
    zero_head: bool = False

    def __post_init__(self):
        if self.d_model <= 0 or self.tau <= 0:
            raise ParameterError("d_model and tau must be positive")


def build_rank_input(means, covs, mask):
    """Stack per-mode features into (K, T, N, 5): x, y, sqrt(l1), sqrt(l2), mask."""
    means, covs = np.asarray(means, dtype=np.float64), np.asarray(covs, dtype=np.float64)
    if means.ndim != 4 or covs.shape != means.shape + (2,):
        raise ShapeError(f"expected (K, T, N, 2) means and matching covariances, got {means.shape}")
    l1, l2 = g2.eigenvalues(covs)
    m = np.broadcast_to(np.asarray(mask, dtype=np.float64), means.shape[:-1])
    return np.concatenate([means, np.sqrt(np.maximum(l1, 0))[..., None],
                           np.sqrt(np.maximum(l2, 0))[..., None], m[..., None]], -1)


class RankNN(nn.Module):
    """Score K modes; no positional encoding along K, so permuting modes
    permutes the output. Each feature is also fed relative to its mean over
    the modes so the per-mode embedding can see the consensus."""

    def __init__(self, cfg: RankConfig = None):
        super().__init__()
        cfg = cfg or RankConfig()
        self.cfg = cfg
        d = cfg.d_model
        self.embed = nn.Linear(2 * N_FEATURES, d)
        self.block = SocialTemporalBlock(d)
        self.norm_k = nn.LayerNorm(d)
        self.scene_attn = SetAttention(d)
        self.norm_f = nn.LayerNorm(d)
        self.ffn = nn.Sequential(nn.Linear(d, 2 * d), nn.ReLU(), nn.Linear(2 * d, d))
        self.hidden = nn.Linear(d, d)
        self.head = nn.Linear(d, 1)
        self.to(DTYPE)
        if cfg.zero_head:
            nn.init.zeros_(self.head.weight)
            nn.init.zeros_(self.head.bias)

    def logits(self, x):  # x: (..., K, T, N, 5)
        rel = x - x.mean(dim=-4, keepdim=True)
        h = F.relu(self.embed(torch.cat([x, rel], -1)))
        h = self.block(h).mean(dim=(-3, -2))  # (..., K, d)
        h = h + self.scene_attn(self.norm_k(h))
        h = h + self.ffn(self.norm_f(h))
        return self.head(F.relu(self.hidden(h))).squeeze(-1)

    def forward(self, x):
        """Error probabilities e (..., K), summing to one over the modes."""
        return torch.softmax(self.logits(x), dim=-1)


def soft_rank(v, tau):
    """Pairwise-sigmoid ranks 1 + sum_{j != k} sigmoid((v_k - v_j) / (tau * std(v)))."""
    scale = tau * v.std(dim=-1, unbiased=False, keepdim=True)
    diff = (v.unsqueeze(-1) - v.unsqueeze(-2)) / scale.unsqueeze(-1)
    sig = torch.sigmoid(diff)
    return 1.0 + sig.sum(-1) - 0.5  # drop the j == k term, sigmoid(0) = 0.5


def soft_spearman(e, target, tau=0.1):
    """Pearson correlation of soft ranks; differentiable in both arguments.

    Batched over leading axes. Zero-variance rows give 0 with a warning.
    """
    e = e if torch.is_tensor(e) else torch.as_tensor(np.asarray(e), dtype=DTYPE)
    target = target if torch.is_tensor(target) else torch.as_tensor(np.asarray(target), dtype=DTYPE)
    if e.shape != target.shape or e.shape[-1] < 2:
        raise ShapeError("soft_spearman needs equal shapes with at least 2 entries")
    if tau <= 0:
        raise ParameterError("tau must be positive")
    flat = (e.std(dim=-1, unbiased=False) == 0) | (target.std(dim=-1, unbiased=False) == 0)
    if bool(flat.any()):
        warnings.warn("soft_spearman with a constant input has no rank signal; returning 0",
                      RuntimeWarning)
    safe_e = torch.where(flat.unsqueeze(-1), torch.arange(e.shape[-1], dtype=DTYPE), e)
    safe_t = torch.where(flat.unsqueeze(-1), torch.arange(e.shape[-1], dtype=DTYPE), target)
    ra, rb = soft_rank(safe_e, tau), soft_rank(safe_t, tau)
    ra = ra - ra.mean(-1, keepdim=True)
    rb = rb - rb.mean(-1, keepdim=True)
    rho = (ra * rb).sum(-1) / torch.sqrt((ra * ra).sum(-1) * (rb * rb).sum(-1))
    return torch.where(flat, torch.zeros_like(rho), rho)


def rank_by_avg_ucty(modes, mask):
    """Per-mode AvgUcty; lower means the mode is predicted to be better."""
    return np.asarray(g2.avg_ucty(modes.covs, mask), dtype=np.float64)


def score_modes(ranker: RankNN, modes, mask):
    x = torch.as_tensor(build_rank_input(modes.means, modes.covs, mask), dtype=DTYPE)
    with torch.no_grad():
        return ranker(x).numpy().copy()


# ---------------------------------------------------------------- training


@dataclass
class RankTrainConfig:
    epochs: int = 20
    lr: float = 1e-3
    batch_size: int = 8
    seed: int = 0
    online: bool = False  # regenerate modes every epoch instead of reusing one pool

    def __post_init__(self):
        if self.epochs < 1 or self.batch_size < 1 or self.lr <= 0:
            raise ParameterError("epochs, batch_size and lr must be positive")


def generate_pool(denoiser, scenes, sched, sampler_cfg: SamplerConfig, seed=0, on_error=None):
    """Sample K modes per scene; returns ``[(features (K,T,N,5), sade (K,))]``.

    Scenes whose sampling fails are skipped and reported through ``on_error``.
    """
    pool = []
    for i, sc in enumerate(scenes):
        cfg = SamplerConfig(sampler_cfg.variant, sampler_cfg.plan, sampler_cfg.K,
                            int(seed) * 1_000_003 + i, sampler_cfg.sv_clamp,
                            sampler_cfg.condition_replace, sampler_cfg.jacobian_method)
        try:
            ms = sample(denoiser, split_condition(sc), sched, cfg)
        except ArithmeticError as exc:
            if on_error is not None:
                on_error(sc.scene_id, exc)
            continue
        pool.append((build_rank_input(ms.means, ms.covs, sc.mask), sade(ms.means, sc.coords, sc.mask)))
    return pool


def _stack(items):
    x = torch.as_tensor(np.stack([f for f, _ in items]), dtype=DTYPE)
    y = torch.as_tensor(np.stack([t for _, t in items]), dtype=DTYPE)
    return x, y


def evaluate_ranker(ranker, pool):
    """Mean hard Spearman between predicted e and the true per-mode SADE."""
    if not pool:
        return float("nan")
    x, _ = _stack(pool)
    with torch.no_grad():
        e = ranker(x).numpy()
    return float(np.mean([spearman(e[i], pool[i][1]) for i in range(len(pool))]))


def train_ranker(ranker: RankNN, cfg: RankTrainConfig, pool=None, regenerate=None, val_pool=None,
                 log=None):
    """Maximize soft Spearman(e, SADE).

    Either pass a fixed ``pool`` or a ``regenerate(epoch) -> pool`` callable
    (used when ``cfg.online``). Returns per-epoch records with the held-out
    hard Spearman when ``val_pool`` is given.
    """
    if pool is None and regenerate is None:
        raise UsageError("train_ranker needs a pool or a regenerate callable")
    torch.manual_seed(cfg.seed)
    rng = np.random.default_rng([cfg.seed, 0x72616E6B])
    opt = torch.optim.Adam(ranker.parameters(), lr=cfg.lr)
    history = []
    for epoch in range(cfg.epochs):
        if regenerate is not None and (pool is None or cfg.online):
            pool = regenerate(epoch)
        ranker.train()
        order = rng.permutation(len(pool))
        total, n = 0.0, 0
        for start in range(0, len(pool), cfg.batch_size):
            x, y = _stack([pool[i] for i in order[start:start + cfg.batch_size]])
            opt.zero_grad()
            loss = -soft_spearman(ranker(x), y, ranker.cfg.tau).mean()
            loss.backward()
            opt.step()
            total += loss.item() * x.shape[0]
            n += x.shape[0]
        ranker.eval()
        rec = {"epoch": epoch + 1, "loss": total / max(n, 1)}
        if val_pool:
            rec["val_spearman"] = evaluate_ranker(ranker, val_pool)
        history.append(rec)
        if log is not None:
            log(rec)
    return history


def save_ranker(path, ranker: RankNN, extra=None):
    cfg = {"kind": "ranker", "rank": asdict(ranker.cfg)}
    cfg.update(extra or {})
    save_checkpoint(path, module_tensors(ranker), cfg)


def load_ranker(path):
    tensors, cfg = load_checkpoint(path)
    if cfg.get("kind") != "ranker":
        raise UsageError(f"{path} is not a ranker checkpoint")
    return load_module_tensors(RankNN(RankConfig(**cfg["rank"])), tensors), cfg
