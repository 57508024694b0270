"""Report figures (matplotlib, Agg backend, written straight to files)."""

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
from matplotlib.patches import Ellipse  # noqa: E402
import numpy as np  # noqa: E402

from .gaussian2d import chi2_2dof_quantile  # noqa: E402

_META = {"Software": None}


def _save(fig, path):
    fig.savefig(path, dpi=100, metadata=_META)
    plt.close(fig)


def confidence_ellipse(mean, cov, level=0.95, **kw):
    vals, vecs = np.linalg.eigh(cov)
    vals = np.maximum(vals, 0.0)
    r = np.sqrt(chi2_2dof_quantile(level))
    angle = np.degrees(np.arctan2(vecs[1, 1], vecs[0, 1]))
    return Ellipse(mean, 2 * r * np.sqrt(vals[1]), 2 * r * np.sqrt(vals[0]), angle=angle, **kw)


def plot_scene(path, scene, modeset, best_k=None, max_modes=5, level=0.95):
    """Ground truth, a few sampled modes and the level ellipses of one mode."""
    fig, ax = plt.subplots(figsize=(5, 5))
    hidden = scene.mask == 0
    if best_k is None:
        d = np.linalg.norm(modeset.means - scene.coords, axis=-1)
        best_k = int(np.argmin((d * hidden).sum(axis=(1, 2))))
    colors = plt.cm.tab10(np.arange(scene.N) % 10)
    for k in range(min(max_modes, modeset.K)):
        for n in range(scene.N):
            ax.plot(modeset.means[k, :, n, 0], modeset.means[k, :, n, 1], color=colors[n],
                    alpha=0.25, lw=0.8)
    for n in range(scene.N):
        ax.plot(scene.coords[:, n, 0], scene.coords[:, n, 1], color=colors[n], lw=1.5)
        obs = scene.mask[:, n] == 1
        ax.scatter(scene.coords[obs, n, 0], scene.coords[obs, n, 1], color=colors[n], s=8)
        for t in np.flatnonzero(hidden[:, n]):
            ax.add_patch(confidence_ellipse(modeset.means[best_k, t, n], modeset.covs[best_k, t, n],
                                            level, fill=False, color=colors[n], lw=0.5, alpha=0.6))
    ax.set_xlim(-1.05, 1.05)
    ax.set_ylim(-1.05, 1.05)
    ax.set_aspect("equal")
    ax.set_title(f"{scene.scene_id} ({modeset.variant}, mode {best_k})", fontsize=9)
    _save(fig, path)


def plot_topk(path, topk):
    """minSADE over the Top-k modes per ranking method ({name: {k: value}})."""
    fig, ax = plt.subplots(figsize=(5, 3.5))
    for name, curve in topk.items():
        ks = sorted(curve, key=int)
        ax.plot([int(k) for k in ks], [curve[k] for k in ks], marker="o", label=name)
    ax.set_xlabel("k")
    ax.set_ylabel("minSADE over Top-k")
    ax.legend(fontsize=8)
    _save(fig, path)


def plot_training(path, rows):
    fig, ax = plt.subplots(figsize=(5, 3.5))
    ep = [r["epoch"] for r in rows]
    for key in ("L_simple", "L_NLL", "L_total"):
        ax.plot(ep, [r[key] for r in rows], label=key)
    ax.set_xlabel("epoch")
    ax.legend(fontsize=8)
    _save(fig, path)


def plot_timing(path, timing):
    fig, ax = plt.subplots(figsize=(4, 3))
    names = list(timing)
    ax.bar(names, [timing[n] for n in names])
    ax.set_ylabel("ms per mode")
    _save(fig, path)
