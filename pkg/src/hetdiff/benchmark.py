"""Experiment builders shared by the CLI and the acceptance suite."""

from dataclasses import dataclass, field

import numpy as np
from scipy.stats import wilcoxon
import torch

from . import gaussian2d as g2
from .config import RunConfig
from .metrics import nll_metric
from .net import DenoiserNet, LinearDenoiser, NetConfig
from .sampler import SamplerConfig, sample, stochastic_reverse
from .scene import (CondScene, apply_masks, generate_synthetic_scenes, load_scenes, make_mask,
                    split_condition)
from .schedule import NoiseSchedule, build_step_plan
from .training import TrainConfig, train


def paired_one_sided_p(a, b):
    """p-value of the Wilcoxon signed-rank test that a tends to be smaller than b."""
    d = np.asarray(a) - np.asarray(b)
    if np.all(d == 0):
        return 1.0
    return float(wilcoxon(d, alternative="less").pvalue)


# ---------------------------------------------------------------- analytic benchmark


@dataclass
class AnalyticBenchmark:
    gt: np.ndarray  # (n, T, N, 2)
    mask: np.ndarray  # (T, N)
    results: dict = field(default_factory=dict)  # variant -> {"nll", "acc", "means", "covs"}


def analytic_benchmark(model, sched: NoiseSchedule, skip=10, var_delay=30, n_scenes=200, T=4, N=3,
                       seed=0, variants=("u2diff", "u2diffine"), level=0.95):
    """Score samplers against the reverse process they approximate.

    Scene i starts from its own X_S. Its ground truth is one draw of the
    stochastic reverse chain (eps ~ N(eps_mu, eps_Sigma) at every non-final
    step) from that X_S, so the exact law of the ground truth given X_S is
    what a sampler's (mean, covariance) should describe. The first timestep
    is marked observed; metrics use the remaining states.
    """
    rng = np.random.default_rng([int(seed), 0x616E61])
    mask = np.ones((T, N), np.int8)
    mask[1:] = 0
    cond = CondScene(np.zeros((T, N, 2)), mask, None, "analytic")
    x_S = rng.standard_normal((n_scenes, T, N, 2))
    full_plan = build_step_plan(sched.S, skip, sched.S)
    gt = stochastic_reverse(model, cond, sched, full_plan, x_S, rng)
    bench = AnalyticBenchmark(gt, mask)
    hidden = mask == 0
    for v in variants:
        plan = build_step_plan(sched.S, skip, var_delay if v == "u2diff" else sched.S)
        ms = sample(model, cond, sched, SamplerConfig(v, plan, n_scenes, seed, condition_replace=False),
                    x_S=x_S)
        nll = g2.nll(ms.means[:, hidden], ms.covs[:, hidden], gt[:, hidden]).mean(-1)
        inside = g2.inside_confidence(ms.means[:, hidden], ms.covs[:, hidden], gt[:, hidden], level)
        bench.results[v] = {"nll": nll, "acc": 100.0 * inside.mean(-1), "means": ms.means,
                            "covs": ms.covs}
    return bench


# ---------------------------------------------------------------- synthetic pipeline


def make_denoiser_module(cfg: RunConfig):
    torch.manual_seed(cfg.substream_seed("init") % 2**63)
    n = cfg.net
    if n.kind == "linear":
        return LinearDenoiser(cfg.schedule.S, n.bivariate)
    return DenoiserNet(NetConfig(d_model=n.d_model, n_blocks=n.n_blocks, d_step=n.d_step,
                                 gain_init=n.gain_init, bivariate=n.bivariate,
                                 temporal_mixing=n.temporal_mixing, social_mixing=n.social_mixing))


def train_config(cfg: RunConfig) -> TrainConfig:
    t = cfg.train
    return TrainConfig(t.lam, t.epochs, t.batch_size, t.lr0, t.lr_halving_period,
                       cfg.substream_seed("train") % 2**32, t.target_policy, t.optimizer,
                       t.checkpoint_every)


def generate_datasets(cfg: RunConfig):
    """(train, test) masked scenes from the data substream, or from a scenes file."""
    d = cfg.data
    spec = cfg.mask_spec()
    if d.scenes_path:
        scenes = load_scenes(d.scenes_path)
        scenes = [s if not s.mask.all() else s.with_mask(make_mask(spec, s.T, s.N, seed=i))
                  for i, s in enumerate(scenes)]
        return scenes[:d.n_train], scenes[d.n_train:d.n_train + d.n_test]
    seed = cfg.substream_seed("data") % 2**32
    scenes = generate_synthetic_scenes(d.n_train + d.n_test, d.T, d.N, cfg.dynamics, seed)
    scenes = apply_masks(scenes, spec, seed)
    return scenes[:d.n_train], scenes[d.n_train:]


def train_denoiser(cfg: RunConfig, scenes, log_path=None, on_epoch=None):
    module = make_denoiser_module(cfg)
    rows = train(module, scenes, cfg.sched(), train_config(cfg), cfg.mask_spec(), log_path, on_epoch)
    return module, rows


def sampler_config(cfg: RunConfig, variant=None, K=None, seed=None) -> SamplerConfig:
    s = cfg.sampler
    variant = variant or s.variant
    return SamplerConfig(variant, cfg.plan(variant), K or s.K,
                         cfg.substream_seed("sample") % 2**32 if seed is None else seed,
                         s.sv_clamp, s.condition_replace, s.jacobian_method)


def sample_scenes(model, scenes, cfg: RunConfig, variant=None, K=None):
    """One ModeSet per scene; scene i uses its own substream of the sample seed."""
    sched = cfg.sched()
    base = sampler_config(cfg, variant, K)
    out = []
    for i, sc in enumerate(scenes):
        scfg = SamplerConfig(base.variant, base.plan, base.K, base.seed * 1_000_003 % 2**32 + i,
                             base.sv_clamp, base.condition_replace, base.jacobian_method)
        out.append(sample(model, split_condition(sc), sched, scfg))
    return out


def nll_per_scene(modesets, scenes):
    return np.array([nll_metric(ms.means, ms.covs, sc.coords, sc.mask)[0]
                     for ms, sc in zip(modesets, scenes)])
