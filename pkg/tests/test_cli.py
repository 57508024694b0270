import json
import shutil
import subprocess
import sys

import numpy as np
import pytest
import torch

from hetdiff.cli import main
from hetdiff.metrics import validate_report
from hetdiff.net import load_denoiser, save_denoiser
from hetdiff.sampler import load_modesets, save_modesets
from hetdiff.scene import load_scenes

TINY = """\
[run]
seed = 11
[data]
n_train = 24
n_test = 4
T = 10
N = 3
t_obs = 4
[net]
d_model = 8
d_step = 8
[train]
epochs = 2
[sampler]
K = 4
[eval]
ks = 1, 2, 4
max_figure_scenes = 1
[rank]
epochs = 2
n_train = 6
d_model = 8
[bench]
K = 2
"""


@pytest.fixture(scope="module")
def pipeline(tmp_path_factory):
    root = tmp_path_factory.mktemp("cli")
    ini = root / "tiny.ini"
    ini.write_text(TINY)
    out = root / "out"
    for cmd in ("gen-data", "train", "sample", "eval"):
        assert main([cmd, "--config", str(ini), "--out", str(out)]) == 0
    return ini, out


def test_pipeline_outputs(pipeline, capsys):
    _, out = pipeline
    for name in ("scenes_train.jsonl", "scenes_test.jsonl", "denoiser.ckpt", "train_log.csv",
                 "fig_training.png", "modes.jsonl", "report.json", "report.csv", "fig_topk.png"):
        assert (out / name).exists(), name
    report = json.loads((out / "report.json").read_text())
    validate_report(report)
    assert report["n_scenes"] == 4 and report["K"] == 4


def test_summary_line(pipeline, capsys):
    ini, out = pipeline
    assert main(["eval", "--config", str(ini), "--out", str(out)]) == 0
    line = capsys.readouterr().out.strip().splitlines()[-1]
    fields = dict(kv.split("=", 1) for kv in line.split("\t"))
    assert fields["command"] == "eval" and fields["scenes"] == "4"


def test_sample_is_byte_identical(pipeline, tmp_path):
    ini, out = pipeline
    before = (out / "modes.jsonl").read_bytes()
    assert main(["sample", "--config", str(ini), "--out", str(out)]) == 0
    assert (out / "modes.jsonl").read_bytes() == before


def test_eval_perfect_predictions(pipeline, tmp_path):
    ini, out = pipeline
    work = tmp_path / "w"
    shutil.copytree(out, work)
    sets = load_modesets(work / "modes.jsonl")
    by_id = {s.scene_id: s for s in load_scenes(work / "scenes_test.jsonl")}
    for ms in sets:
        ms.means = np.broadcast_to(by_id[ms.scene_id].coords, ms.means.shape).copy()
    save_modesets(sets, work / "modes.jsonl")
    assert main(["eval", "--config", str(ini), "--out", str(work)]) == 0
    agg = json.loads((work / "report.json").read_text())["aggregate"]
    for key in ("minADE", "minFDE", "minSADE", "minSFDE"):
        assert agg[key] == 0.0


def test_rank_and_bench(pipeline, tmp_path):
    ini, out = pipeline
    work = tmp_path / "w"
    shutil.copytree(out, work)
    assert main(["rank", "--config", str(ini), "--out", str(work)]) == 0
    assert all(ms.e is not None and abs(ms.e.sum() - 1) < 1e-9 for ms in load_modesets(work / "modes.jsonl"))
    summary = json.loads((work / "rank_summary.json").read_text())
    assert set(summary) == {"scenes", "spearman_ranker", "spearman_avg_ucty"}
    assert (work / "ranker.ckpt").exists() and (work / "rank_log.csv").exists()
    assert main(["eval", "--config", str(ini), "--out", str(work)]) == 0
    report = json.loads((work / "report.json").read_text())
    assert "ranker" in report["aggregate"]["spearman"]
    assert main(["bench", "--config", str(ini), "--out", str(work)]) == 0
    bench = json.loads((work / "bench.json").read_text())
    assert set(bench["ms_per_mode"]) == {"u2diff", "u2diffine"} and bench["reps"] == 20


def test_exit_code_config(tmp_path, capsys):
    ini = tmp_path / "bad.ini"
    ini.write_text("[schedule]\nS = 1\n[sampler]\nK = 0\n")
    assert main(["gen-data", "--config", str(ini), "--out", str(tmp_path / "o")]) == 2
    err = capsys.readouterr().err
    assert err.count("config error:") >= 2


def test_exit_code_io(pipeline, tmp_path):
    ini, out = pipeline
    assert main(["gen-data", "--config", str(tmp_path / "missing.ini")]) == 4
    work = tmp_path / "w"
    shutil.copytree(out, work)
    (work / "scenes_test.jsonl").write_text("{not json\n")
    assert main(["eval", "--config", str(ini), "--out", str(work)]) == 4
    (work / "modes.jsonl").unlink()
    shutil.copy(out / "scenes_test.jsonl", work / "scenes_test.jsonl")
    assert main(["eval", "--config", str(ini), "--out", str(work)]) == 4


def test_exit_code_numeric(pipeline, tmp_path):
    ini, out = pipeline
    work = tmp_path / "w"
    shutil.copytree(out, work)
    module, cfg = load_denoiser(work / "denoiser.ckpt")
    with torch.no_grad():
        module.embed.weight[0, 0] = float("nan")
    extra = {k: v for k, v in cfg.items() if k not in ("kind", "net")}
    save_denoiser(work / "denoiser.ckpt", module, extra)
    assert main(["sample", "--config", str(ini), "--out", str(work)]) == 3


def test_print_config_and_entry_point(tmp_path):
    res = subprocess.run([sys.executable, "-m", "hetdiff.cli", "print-config"], capture_output=True,
                         text=True, check=True)
    assert "[schedule]" in res.stdout and "betaS = 0.5" in res.stdout
    ini = tmp_path / "printed.ini"
    ini.write_text(res.stdout)
    assert main(["print-config", "--config", str(ini)]) == 0
    bad = subprocess.run([sys.executable, "-m", "hetdiff.cli", "frobnicate"], capture_output=True)
    assert bad.returncode == 2
