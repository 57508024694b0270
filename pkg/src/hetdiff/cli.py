"""Command-line harness.

    hetdiff <gen-data|train|sample|eval|rank|bench|print-config> --config <path> [--out <dir>] [--seed <u64>]

Exit codes: 0 ok, 2 config error, 3 numeric failure, 4 I/O error.
"""

import argparse
import csv
import json
import logging
import os
import sys

import numpy as np
import torch

from . import benchmark as bm
from .config import RunConfig, load_config, render_config
from .errors import ConfigError, ParameterError, ParseError
from .metrics import build_report, sade, spearman, write_report
from .net import TorchDenoiser, load_denoiser, save_denoiser
from .plotting import plot_scene, plot_timing, plot_topk, plot_training
from .ranker import (RankConfig, RankNN, RankTrainConfig, build_rank_input, generate_pool,
                     load_ranker, rank_by_avg_ucty, save_ranker, score_modes, train_ranker)
from .sampler import load_modesets, save_modesets, timing_probe
from .scene import load_scenes, save_scenes, split_condition

log = logging.getLogger("hetdiff")

EXIT_OK, EXIT_CONFIG, EXIT_NUMERIC, EXIT_IO = 0, 2, 3, 4
COMMANDS = ("gen-data", "train", "sample", "eval", "rank", "bench", "print-config")


def _path(cfg, name):
    return os.path.join(cfg.run.out_dir, name)


def _emit(pairs):
    """One delimited summary line on stdout."""
    print("\t".join(f"{k}={v}" for k, v in pairs.items()))


def _datasets(cfg):
    train_p, test_p = _path(cfg, "scenes_train.jsonl"), _path(cfg, "scenes_test.jsonl")
    if os.path.exists(train_p) and os.path.exists(test_p):
        return load_scenes(train_p), load_scenes(test_p)
    return bm.generate_datasets(cfg)


def _denoiser(cfg):
    module, _ = load_denoiser(_path(cfg, "denoiser.ckpt"))
    return TorchDenoiser(module)


def cmd_gen_data(cfg: RunConfig):
    train, test = bm.generate_datasets(cfg)
    save_scenes(train, _path(cfg, "scenes_train.jsonl"))
    save_scenes(test, _path(cfg, "scenes_test.jsonl"))
    _emit({"command": "gen-data", "n_train": len(train), "n_test": len(test)})


def cmd_train(cfg: RunConfig):
    train, _ = _datasets(cfg)
    ckpt = _path(cfg, "denoiser.ckpt")
    every = cfg.train.checkpoint_every

    def on_epoch(epoch, module):
        if every and epoch % every == 0:
            save_denoiser(_path(cfg, f"denoiser_epoch{epoch:03d}.ckpt"), module)

    # train_log.csv carries wall-clock times and is the only non-reproducible artifact
    module, rows = bm.train_denoiser(cfg, train, _path(cfg, "train_log.csv"), on_epoch)
    save_denoiser(ckpt, module, {"run": cfg.to_dict(with_paths=False)})
    plot_training(_path(cfg, "fig_training.png"), rows)
    _emit({"command": "train", "epochs": len(rows), "L_total_first": f"{rows[0]['L_total']:.6g}",
           "L_total_last": f"{rows[-1]['L_total']:.6g}"})


def cmd_sample(cfg: RunConfig):
    _, test = _datasets(cfg)
    sets = bm.sample_scenes(_denoiser(cfg), test, cfg)
    save_modesets(sets, _path(cfg, "modes.jsonl"))
    _emit({"command": "sample", "variant": cfg.sampler.variant, "scenes": len(sets), "K": cfg.sampler.K})


def cmd_eval(cfg: RunConfig):
    _, test = _datasets(cfg)
    sets = load_modesets(_path(cfg, "modes.jsonl"))
    scores = {ms.scene_id: ms.e for ms in sets if ms.e is not None} or None
    report = build_report(sets, test, cfg.eval.level, cfg.eval.ks, scores)
    write_report(report, _path(cfg, "report.json"), _path(cfg, "report.csv"))
    if cfg.eval.figures:
        by_id = {s.scene_id: s for s in test}
        for ms in sets[:cfg.eval.max_figure_scenes]:
            plot_scene(_path(cfg, f"fig_scene_{ms.scene_id}.png"), by_id[ms.scene_id], ms,
                       level=cfg.eval.level)
        plot_topk(_path(cfg, "fig_topk.png"), report["aggregate"]["topk_minSADE"])
    agg = report["aggregate"]
    _emit({"command": "eval", "scenes": report["n_scenes"],
           **{k: f"{agg[k]:.6g}" for k in ("minADE", "minSADE", "NLL_mean", "AccRate_mean")}})


def cmd_rank(cfg: RunConfig):
    train, test = _datasets(cfg)
    den = _denoiser(cfg)
    modes_p = _path(cfg, "modes.jsonl")
    sets = load_modesets(modes_p) if os.path.exists(modes_p) else bm.sample_scenes(den, test, cfg)
    by_id = {s.scene_id: s for s in test}
    ckpt = _path(cfg, "ranker.ckpt")
    if os.path.exists(ckpt):
        ranker, _ = load_ranker(ckpt)
    else:
        r = cfg.rank
        torch.manual_seed(cfg.substream_seed("ranker-init") % 2**63)
        ranker = RankNN(RankConfig(d_model=r.d_model, tau=r.tau))
        scfg = bm.sampler_config(cfg)
        rank_seed = cfg.substream_seed("ranker") % 2**32
        subset = train[:r.n_train]

        def regenerate(epoch):
            return generate_pool(den, subset, cfg.sched(), scfg, seed=rank_seed + epoch,
                                 on_error=lambda sid, exc: log.warning("skipping %s: %s", sid, exc))

        val = [(build_rank_input(ms.means, ms.covs, by_id[ms.scene_id].mask),
                _sade(ms, by_id[ms.scene_id])) for ms in sets]
        history = train_ranker(ranker, RankTrainConfig(r.epochs, r.lr, r.batch_size, rank_seed, r.online),
                               regenerate=regenerate, val_pool=val)
        with open(_path(cfg, "rank_log.csv"), "w", newline="") as fh:
            w = csv.DictWriter(fh, fieldnames=list(history[0]), lineterminator="\n")
            w.writeheader()
            w.writerows(history)
        save_ranker(ckpt, ranker)
    rho_rank, rho_ucty = [], []
    for ms in sets:
        sc = by_id[ms.scene_id]
        ms.e = score_modes(ranker, ms, sc.mask)
        target = _sade(ms, sc)
        rho_rank.append(spearman(ms.e, target))
        rho_ucty.append(spearman(rank_by_avg_ucty(ms, sc.mask), target))
    save_modesets(sets, modes_p)
    summary = {"scenes": len(sets), "spearman_ranker": float(np.mean(rho_rank)),
               "spearman_avg_ucty": float(np.mean(rho_ucty))}
    with open(_path(cfg, "rank_summary.json"), "w") as fh:
        json.dump(summary, fh, indent=2)
        fh.write("\n")
    _emit({"command": "rank", **{k: (f"{v:.6g}" if isinstance(v, float) else v)
                                 for k, v in summary.items()}})


def _sade(ms, scene):
    return sade(ms.means, scene.coords, scene.mask)


def cmd_bench(cfg: RunConfig):
    _, test = _datasets(cfg)
    den = _denoiser(cfg)
    cond = split_condition(test[0])
    timing = timing_probe(den, cond, cfg.sched(), cfg.plan("u2diff"), variants=cfg.bench.variants,
                          K=cfg.bench.K, reps=cfg.bench.reps,
                          jacobian_method=cfg.sampler.jacobian_method)
    base = timing.get("u2diff")
    ratios = {v: (t / base if base else float("nan")) for v, t in timing.items()}
    with open(_path(cfg, "bench.json"), "w") as fh:
        json.dump({"ms_per_mode": timing, "ratio_to_u2diff": ratios, "K": cfg.bench.K,
                   "reps": cfg.bench.reps, "jacobian_method": cfg.sampler.jacobian_method}, fh, indent=2)
        fh.write("\n")
    with open(_path(cfg, "bench.csv"), "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["variant", "ms_per_mode", "ratio_to_u2diff"])
        for v in timing:
            w.writerow([v, f"{timing[v]:.4f}", f"{ratios[v]:.4f}"])
    plot_timing(_path(cfg, "fig_timing.png"), timing)
    _emit({"command": "bench", **{f"{v}_ms": f"{t:.3f}" for v, t in timing.items()},
           **{f"{v}_ratio": f"{r:.3f}" for v, r in ratios.items()}})


HANDLERS = {"gen-data": cmd_gen_data, "train": cmd_train, "sample": cmd_sample, "eval": cmd_eval,
            "rank": cmd_rank, "bench": cmd_bench}


def build_parser():
    p = argparse.ArgumentParser(prog="hetdiff", description=__doc__.splitlines()[0])
    p.add_argument("command", choices=COMMANDS)
    p.add_argument("--config", help="INI run configuration (defaults when omitted)")
    p.add_argument("--out", help="output directory (overrides [run] out_dir)")
    p.add_argument("--seed", type=int, help="root seed (overrides [run] seed)")
    p.add_argument("-v", "--verbose", action="store_true")
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    overrides = {}
    if args.out:
        overrides[("run", "out_dir")] = args.out
    if args.seed is not None:
        overrides[("run", "seed")] = args.seed
    try:
        cfg = load_config(args.config, overrides)
        if args.command == "print-config":
            print(render_config(cfg), end="")
            return EXIT_OK
        os.makedirs(cfg.run.out_dir, exist_ok=True)
        HANDLERS[args.command](cfg)
    except ConfigError as exc:
        for problem in exc.problems:
            print(f"config error: {problem}", file=sys.stderr)
        return EXIT_CONFIG
    except ParameterError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except ArithmeticError as exc:
        print(f"numeric failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except (OSError, ParseError) as exc:
        print(f"I/O error: {exc}", file=sys.stderr)
        return EXIT_IO
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
