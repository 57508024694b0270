"""Shared builders for the test suite."""

import numpy as np
import torch

from hetdiff.denoiser import DenoiserQuery
from hetdiff.net import DenoiserNet, NetConfig
from hetdiff.scene import CondScene


def tiny_net(seed=0, d_model=8, zero_heads=False, **kw):
    torch.manual_seed(seed)
    return DenoiserNet(NetConfig(d_model=d_model, n_blocks=2, d_step=8, zero_heads=zero_heads, **kw))


def random_cond(rng, T, N, p_obs=0.5):
    mask = (rng.random((T, N)) < p_obs).astype(np.int8)
    mask[0, 0], mask[-1, -1] = 1, 0
    observed = rng.uniform(-1, 1, (T, N, 2)) * mask[..., None]
    roles = rng.integers(0, 2, N)
    return CondScene(observed, mask, roles, "r")


def random_query(rng, T, N, jacobian_mode="none", S=50, **kw):
    cond = random_cond(rng, T, N)
    return DenoiserQuery(rng.standard_normal((T, N, 2)), int(rng.integers(1, S + 1)), cond,
                         jacobian_mode, **kw)


def rel_err(a, b, floor=1e-6):
    """Elementwise |a - b| / max(|a|, |b|, floor), maximised."""
    a, b = np.asarray(a, dtype=np.float64), np.asarray(b, dtype=np.float64)
    return float((np.abs(a - b) / np.maximum(np.maximum(np.abs(a), np.abs(b)), floor)).max())


# ------------------------------------------------------------ brute-force metric oracles


def loop_sade(pred, gt, mask):
    T, N = mask.shape
    total, count = 0.0, 0
    for t in range(T):
        for n in range(N):
            if mask[t, n] == 0:
                dx, dy = pred[t, n, 0] - gt[t, n, 0], pred[t, n, 1] - gt[t, n, 1]
                total += (dx * dx + dy * dy) ** 0.5
                count += 1
    return total / count


def loop_min_sade(modes, gt, mask):
    best = float("inf")
    for k in range(len(modes)):
        best = min(best, loop_sade(modes[k], gt, mask))
    return best


def loop_min_ade(modes, gt, mask):
    """Per agent: min over modes of its mean error over its unobserved steps;
    agents weighted by their number of unobserved steps."""
    T, N = mask.shape
    num, den = 0.0, 0
    for n in range(N):
        steps = [t for t in range(T) if mask[t, n] == 0]
        if not steps:
            continue
        best = float("inf")
        for k in range(len(modes)):
            err = 0.0
            for t in steps:
                dx, dy = modes[k][t, n, 0] - gt[t, n, 0], modes[k][t, n, 1] - gt[t, n, 1]
                err += (dx * dx + dy * dy) ** 0.5
            best = min(best, err / len(steps))
        num += best * len(steps)
        den += len(steps)
    return num / den


def loop_ranks(v):
    # average ranks, 1-based
    v = list(v)
    out = []
    for x in v:
        less = sum(1 for y in v if y < x)
        equal = sum(1 for y in v if y == x)
        out.append(less + (equal + 1) / 2)
    return out


def loop_spearman(xs, ys):
    rx, ry = loop_ranks(xs), loop_ranks(ys)
    K = len(rx)
    mx, my = sum(rx) / K, sum(ry) / K
    sxy = sum((a - mx) * (b - my) for a, b in zip(rx, ry))
    sxx = sum((a - mx) ** 2 for a in rx)
    syy = sum((b - my) ** 2 for b in ry)
    return sxy / (sxx * syy) ** 0.5


def random_metric_instance(rng, K=None, T=None, N=None, ties=False):
    K = K or int(rng.integers(2, 21))
    T = T or int(rng.integers(2, 9))
    N = N or int(rng.integers(1, 5))
    gt = rng.uniform(-1, 1, (T, N, 2))
    modes = gt + rng.normal(0, rng.uniform(0.05, 0.5), (K, T, N, 2))
    mask = (rng.random((T, N)) < 0.5).astype(np.int8)
    mask[rng.integers(T), rng.integers(N)] = 0
    scores = rng.standard_normal(K)
    if ties:
        scores = np.round(scores, 0)
    return modes, gt, mask, scores
