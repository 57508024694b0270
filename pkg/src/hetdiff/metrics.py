"""Displacement, likelihood, calibration and ranking metrics over sampled modes.

All displacement metrics only look at unobserved states (mask == 0).
"""

import csv
from importlib import resources
import json
from math import comb
import warnings

import jsonschema
import numpy as np
from scipy.stats import rankdata

from . import gaussian2d as g2
from .errors import ShapeError, UndefinedInputError

DEFAULT_KS = (1, 3, 5, 10, 20)


def _hidden(mask):
    hidden = np.asarray(mask) == 0
    if not hidden.any():
        raise UndefinedInputError("metric needs at least one unobserved state")
    return hidden


def _dist(means, gt):
    means, gt = np.asarray(means, dtype=np.float64), np.asarray(gt, dtype=np.float64)
    if means.shape[-3:] != gt.shape:
        raise ShapeError(f"prediction shape {means.shape} incompatible with ground truth {gt.shape}")
    return np.linalg.norm(means - gt, axis=-1)


def sade(pred_means, gt, mask):
    """Mean Euclidean error over unobserved states; leading mode axes allowed."""
    hidden = _hidden(mask)
    return (_dist(pred_means, gt) * hidden).sum(axis=(-2, -1)) / hidden.sum()


def final_hidden_steps(mask):
    """Per agent: index of its last unobserved timestep, or -1 when fully observed."""
    hidden = _hidden(mask)
    T = hidden.shape[0]
    last = T - 1 - np.argmax(hidden[::-1], axis=0)
    return np.where(hidden.any(axis=0), last, -1)


def sfde(pred_means, gt, mask):
    last = final_hidden_steps(mask)
    agents = np.flatnonzero(last >= 0)
    d = _dist(pred_means, gt)
    return d[..., last[agents], agents].mean(axis=-1)


def min_scene_metrics(means, gt, mask, K=None):
    """(minSADE_K, minSFDE_K) over the first K modes."""
    means = np.asarray(means)[:K]
    return float(sade(means, gt, mask).min()), float(sfde(means, gt, mask).min())


def min_agent_metrics(means, gt, mask, K=None):
    """(minADE_K, minFDE_K): best mode chosen per agent, then averaged.

    minADE weights each agent by its number of unobserved states, so it is the
    scene average of per-agent minima and never exceeds minSADE.
    """
    means = np.asarray(means)[:K]
    hidden = _hidden(mask)
    d = _dist(means, gt) * hidden  # (K, T, N)
    counts = hidden.sum(axis=0)
    agents = np.flatnonzero(counts > 0)
    ade = d.sum(axis=1)[:, agents] / counts[agents]  # (K, n_agents)
    min_ade = float((ade.min(axis=0) * counts[agents]).sum() / counts[agents].sum())
    last = final_hidden_steps(mask)
    fde = _dist(means, gt)[:, last[agents], agents]
    return min_ade, float(fde.min(axis=0).mean())


def acc_rate_per_mode(means, covs, gt, mask, level=0.95):
    hidden = _hidden(mask)
    inside = g2.inside_confidence(means[:, hidden], covs[:, hidden], np.asarray(gt)[hidden], level)
    return 100.0 * inside.mean(axis=-1)


def acc_rate(means, covs, gt, mask, level=0.95):
    """Percent of unobserved ground-truth states inside the level ellipse.

    Returns ``(mean over modes, min over modes, max over modes)``.
    """
    per_mode = acc_rate_per_mode(np.asarray(means), np.asarray(covs), gt, mask, level)
    return float(per_mode.mean()), float(per_mode.min()), float(per_mode.max())


def nll_per_mode(means, covs, gt, mask):
    hidden = _hidden(mask)
    return g2.nll(np.asarray(means)[:, hidden], np.asarray(covs)[:, hidden],
                  np.asarray(gt)[hidden]).mean(axis=-1)


def nll_metric(means, covs, gt, mask):
    """(mean over modes, min over modes) of the per-mode mean state NLL."""
    per_mode = nll_per_mode(means, covs, gt, mask)
    return float(per_mode.mean()), float(per_mode.min())


def spearman(xs, ys):
    """Pearson correlation of average ranks; 0 when either side is constant."""
    rx, ry = rankdata(xs), rankdata(ys)
    if len(rx) != len(ry):
        raise ShapeError("spearman needs equal-length inputs")
    rx, ry = rx - rx.mean(), ry - ry.mean()
    den = np.sqrt((rx * rx).sum() * (ry * ry).sum())
    if den == 0:
        warnings.warn("spearman of a constant sequence is undefined; returning 0", RuntimeWarning)
        return 0.0
    return float((rx * ry).sum() / den)


def topk_protocol(means, scores, gt, mask, ks=DEFAULT_KS):
    """minSADE over the k modes with the lowest scores (lower = predicted better).

    Ties are broken by mode index. Values of k above the mode count are skipped.
    """
    per_mode = sade(means, gt, mask)
    order = np.argsort(np.asarray(scores), kind="stable")
    return {int(k): float(per_mode[order[:k]].min()) for k in ks if 1 <= k <= len(per_mode)}


def topk_random_expectation(means, gt, mask, ks=DEFAULT_KS):
    """Exact expected minSADE over a uniformly random k-subset of modes."""
    vals = np.sort(sade(means, gt, mask))
    K = len(vals)
    out = {}
    for k in ks:
        if 1 <= k <= K:
            w = np.array([comb(K - 1 - i, k - 1) for i in range(K)], dtype=np.float64) / comb(K, k)
            out[int(k)] = float((w * vals).sum())
    return out


# ---------------------------------------------------------------- reports

AGG_FIELDS = ("minADE", "minFDE", "minSADE", "minSFDE", "NLL_mean", "NLL_min",
              "AccRate_mean", "AccRate_min", "AccRate_max", "AvgUcty")


def scene_metrics(modeset, scene, level=0.95, ks=DEFAULT_KS, ranker_scores=None):
    gt, mask = scene.coords, scene.mask
    means, covs = modeset.means, modeset.covs
    per_mode_sade = sade(means, gt, mask)
    ucty = g2.avg_ucty(covs, mask)
    row = {"scene_id": scene.scene_id, "K": int(modeset.K)}
    row["minADE"], row["minFDE"] = min_agent_metrics(means, gt, mask)
    row["minSADE"], row["minSFDE"] = min_scene_metrics(means, gt, mask)
    row["NLL_mean"], row["NLL_min"] = nll_metric(means, covs, gt, mask)
    row["AccRate_mean"], row["AccRate_min"], row["AccRate_max"] = acc_rate(means, covs, gt, mask, level)
    row["AvgUcty"] = float(np.mean(ucty))
    row["AvgUcty_per_mode"] = [float(u) for u in ucty]
    row["SADE_per_mode"] = [float(v) for v in per_mode_sade]
    rankings = {"avg_ucty": ucty}
    if ranker_scores is not None:
        rankings["ranker"] = np.asarray(ranker_scores)
    if modeset.K >= 2:
        with warnings.catch_warnings():
            warnings.simplefilter("ignore", RuntimeWarning)
            row["spearman"] = {k: spearman(v, per_mode_sade) for k, v in rankings.items()}
    else:
        row["spearman"] = {}
    topk = {k: topk_protocol(means, v, gt, mask, ks) for k, v in rankings.items()}
    topk["random"] = topk_random_expectation(means, gt, mask, ks)
    topk["oracle"] = topk_protocol(means, per_mode_sade, gt, mask, ks)
    row["topk"] = {name: {str(k): v for k, v in d.items()} for name, d in topk.items()}
    return row


def build_report(modesets, scenes, level=0.95, ks=DEFAULT_KS, ranker_scores=None):
    """Aggregate report; ``ranker_scores`` optionally maps scene_id -> K scores."""
    by_id = {s.scene_id: s for s in scenes}
    rows = []
    for ms in modesets:
        if ms.scene_id not in by_id:
            raise UndefinedInputError(f"no ground truth for scene {ms.scene_id!r}")
        scores = None if ranker_scores is None else ranker_scores.get(ms.scene_id)
        rows.append(scene_metrics(ms, by_id[ms.scene_id], level, ks, scores))
    if not rows:
        raise UndefinedInputError("no mode sets to evaluate")
    agg = {f: float(np.mean([r[f] for r in rows])) for f in AGG_FIELDS}
    names = sorted({n for r in rows for n in r["spearman"]})
    agg["spearman"] = {n: float(np.mean([r["spearman"][n] for r in rows if n in r["spearman"]]))
                       for n in names}
    agg["topk_minSADE"] = {
        name: {k: float(np.mean([r["topk"][name][k] for r in rows if k in r["topk"][name]]))
               for k in rows[0]["topk"][name]}
        for name in rows[0]["topk"]}
    return {"schema_version": 1, "variant": modesets[0].variant, "K": int(modesets[0].K),
            "n_scenes": len(rows), "level": level, "aggregate": agg, "scenes": rows}


CSV_FIELDS = ("scene_id", "K") + AGG_FIELDS


def report_schema():
    return json.loads(resources.files("hetdiff").joinpath("schema/report.schema.json").read_text())


def validate_report(report):
    """Raise ``jsonschema.ValidationError`` when the report breaks the published schema."""
    jsonschema.validate(report, report_schema())


def write_report(report, json_path, csv_path):
    validate_report(report)
    with open(json_path, "w") as fh:
        json.dump(report, fh, indent=2)
        fh.write("\n")
    with open(csv_path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        cols = list(CSV_FIELDS) + [f"spearman_{n}" for n in report["aggregate"]["spearman"]]
        w.writerow(cols)
        for r in report["scenes"]:
            w.writerow([r[c] for c in CSV_FIELDS]
                       + [r["spearman"].get(n, "") for n in report["aggregate"]["spearman"]])
        agg = report["aggregate"]
        w.writerow(["ALL", report["K"]] + [agg[c] for c in AGG_FIELDS]
                   + list(agg["spearman"].values()))
