import pytest

from hetdiff.config import RunConfig, load_config, parse_config, render_config, substream_seed
from hetdiff.errors import ConfigError


def test_defaults_roundtrip():
    text = render_config()
    cfg = parse_config(text)
    assert render_config(cfg) == text
    assert cfg.schedule.S == 50 and cfg.schedule.beta0 == 1e-4 and cfg.schedule.betaS == 0.5
    assert cfg.train.lam == 0.01 and cfg.train.lr0 == 1e-3 and cfg.train.lr_halving_period == 20
    assert cfg.eval.ks == (1, 3, 5, 10, 20)
    assert cfg.plan("u2diff").steps == (50, 40, 30, 20, 10, 1)
    assert cfg.plan("u2diff").var_delay == 30 and cfg.plan("u2diffine").var_delay == 50


def test_parse_values_and_overrides(tmp_path):
    text = "[sampler]\nvariant = u2diff\ncondition_replace = no\n[eval]\nks = 1, 2\n[run]\nseed = 7\n"
    cfg = parse_config(text, {("run", "seed"): 9})
    assert cfg.sampler.variant == "u2diff" and cfg.sampler.condition_replace is False
    assert cfg.eval.ks == (1, 2) and cfg.run.seed == 9
    mask = tmp_path / "m.json"
    mask.write_text("[[1], [0]]")
    p = tmp_path / "run.ini"
    p.write_text("[data]\nmask_kind = file\nmask_path = m.json\nT = 2\nN = 1\n")
    assert load_config(p).data.mask_path == str(mask)


def test_all_problems_reported():
    text = ("[schedule]\nS = 1\nvar_delay = 99\n[sampler]\nK = 0\n[bogus]\nx = 1\n"
            "[train]\nlam = -1\nwhat = 3\n[net]\nbivariate = maybe\n")
    with pytest.raises(ConfigError) as exc:
        parse_config(text)
    probs = " | ".join(exc.value.problems)
    for needle in ("[bogus]", "'what'", "bivariate", "S must be", "var_delay", "K must", "lam"):
        assert needle in probs, needle
    assert len(exc.value.problems) >= 7


def test_missing_files_rejected(tmp_path):
    with pytest.raises(ConfigError, match="scenes_path"):
        parse_config(f"[data]\nscenes_path = {tmp_path / 'nope.jsonl'}\n")
    with pytest.raises(ConfigError, match="mask_path"):
        parse_config("[data]\nmask_kind = file\nmask_path = /nonexistent/m.json\n")


def test_syntax_error():
    with pytest.raises(ConfigError, match="syntax"):
        parse_config("no section header\n")


def test_substreams():
    names = ("data", "train", "sample", "ranker", "init")
    seeds = [substream_seed(5, n) for n in names]
    assert len(set(seeds)) == len(seeds)
    assert seeds == [substream_seed(5, n) for n in names]
    assert substream_seed(6, "data") != seeds[0]
    assert RunConfig().substream_seed("data") == substream_seed(0, "data")
    assert all(0 <= s < 2**63 for s in seeds)


def test_to_dict_without_paths():
    d = RunConfig().to_dict(with_paths=False)
    assert "out_dir" not in d["run"] and "seed" in d["run"]
