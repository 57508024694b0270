"""Run configuration: one INI file with a section per component.

Every key has a default; ``render_config`` prints the resolved file. Loading
collects every violated constraint before raising :class:`ConfigError`.
"""

import configparser
from dataclasses import dataclass, field, fields, asdict
import os
import zlib

import numpy as np

from .errors import ConfigError
from .scene import MASK_KINDS, DynamicsParams, MaskSpec
from .schedule import build_quadratic_schedule, build_step_plan


@dataclass
class RunSection:
    seed: int = 0
    out_dir: str = "out"


@dataclass
class ScheduleSection:
    S: int = 50
    beta0: float = 1e-4
    betaS: float = 0.5
    skip: int = 10
    var_delay: int = 30


@dataclass
class DataSection:
    scenes_path: str = ""  # load instead of generating when set
    n_train: int = 500
    n_test: int = 200
    T: int = 20
    N: int = 5
    mask_kind: str = "forecast"
    t_obs: int = 8
    n_gaps: int = 2
    gap_len: int = 5
    n_hidden: int = 1
    mask_path: str = ""


@dataclass
class NetSection:
    kind: str = "net"  # net | linear
    d_model: int = 64
    n_blocks: int = 2
    d_step: int = 32
    gain_init: float = 1.0
    bivariate: bool = True
    temporal_mixing: bool = True
    social_mixing: bool = True


@dataclass
class TrainSection:
    lam: float = 0.01
    epochs: int = 20
    batch_size: int = 16
    lr0: float = 1e-3
    lr_halving_period: int = 20
    target_policy: str = "all_states"
    optimizer: str = "adam"
    checkpoint_every: int = 0


@dataclass
class SamplerSection:
    variant: str = "u2diffine"
    K: int = 20
    sv_clamp: float = 100.0
    condition_replace: bool = True
    jacobian_method: str = "two_pass"


@dataclass
class EvalSection:
    level: float = 0.95
    ks: tuple = (1, 3, 5, 10, 20)
    figures: bool = True
    max_figure_scenes: int = 4


@dataclass
class RankSection:
    d_model: int = 32
    tau: float = 0.1
    epochs: int = 20
    lr: float = 1e-3
    batch_size: int = 8
    n_train: int = 200
    online: bool = False


@dataclass
class BenchSection:
    variants: tuple = ("u2diff", "u2diffine")
    K: int = 20
    reps: int = 20


SECTIONS = {
    "run": RunSection, "schedule": ScheduleSection, "data": DataSection,
    "dynamics": DynamicsParams, "net": NetSection, "train": TrainSection,
    "sampler": SamplerSection, "eval": EvalSection, "rank": RankSection, "bench": BenchSection,
}


@dataclass
class RunConfig:
    run: RunSection = field(default_factory=RunSection)
    schedule: ScheduleSection = field(default_factory=ScheduleSection)
    data: DataSection = field(default_factory=DataSection)
    dynamics: DynamicsParams = field(default_factory=DynamicsParams)
    net: NetSection = field(default_factory=NetSection)
    train: TrainSection = field(default_factory=TrainSection)
    sampler: SamplerSection = field(default_factory=SamplerSection)
    eval: EvalSection = field(default_factory=EvalSection)
    rank: RankSection = field(default_factory=RankSection)
    bench: BenchSection = field(default_factory=BenchSection)

    def substream_seed(self, name: str) -> int:
        return substream_seed(self.run.seed, name)

    def sched(self):
        s = self.schedule
        return build_quadratic_schedule(s.S, s.beta0, s.betaS)

    def plan(self, variant=None):
        s = self.schedule
        variant = variant or self.sampler.variant
        delay = s.var_delay if variant == "u2diff" else s.S
        return build_step_plan(s.S, s.skip, delay)

    def mask_spec(self):
        d = self.data
        return MaskSpec(d.mask_kind, d.t_obs, d.n_gaps, d.gap_len, d.n_hidden, d.mask_path)

    def to_dict(self, with_paths=True):
        out = {name: asdict(getattr(self, name)) for name in SECTIONS}
        if not with_paths:
            del out["run"]["out_dir"]
        return out


def substream_seed(root: int, name: str) -> int:
    """Independent 63-bit seed for the named consumer of the root seed."""
    rng = np.random.default_rng([int(root), zlib.crc32(name.encode())])
    return int(rng.integers(0, 2**63 - 1))


def _format(v):
    if isinstance(v, bool):
        return "true" if v else "false"
    if isinstance(v, tuple):
        return ", ".join(str(x) for x in v)
    return str(v)


def render_config(cfg: RunConfig = None) -> str:
    cfg = cfg or RunConfig()
    lines = []
    for name in SECTIONS:
        lines.append(f"[{name}]")
        for f in fields(getattr(cfg, name)):
            lines.append(f"{f.name} = {_format(getattr(getattr(cfg, name), f.name))}")
        lines.append("")
    return "\n".join(lines)


def _parse(raw: str, default):
    if isinstance(default, bool):
        low = raw.strip().lower()
        if low in ("1", "true", "yes", "on"):
            return True
        if low in ("0", "false", "no", "off"):
            return False
        raise ValueError(f"not a boolean: {raw!r}")
    if isinstance(default, int):
        return int(raw)
    if isinstance(default, float):
        return float(raw)
    if isinstance(default, tuple):
        items = [x.strip() for x in raw.split(",") if x.strip()]
        kind = type(default[0]) if default else str
        return tuple(kind(x) for x in items)
    return raw.strip()


def parse_config(text: str, overrides: dict = None, base_dir: str = ".") -> RunConfig:
    parser = configparser.ConfigParser(interpolation=None)
    parser.optionxform = str  # keys are case-sensitive (S, betaS)
    problems = []
    try:
        parser.read_string(text)
    except configparser.Error as exc:
        raise ConfigError([f"syntax: {exc}"]) from exc
    cfg = RunConfig()
    for section in parser.sections():
        if section not in SECTIONS:
            problems.append(f"unknown section [{section}]")
            continue
        obj = getattr(cfg, section)
        known = {f.name for f in fields(obj)}
        for key, raw in parser.items(section):
            if key not in known:
                problems.append(f"[{section}] unknown key {key!r}")
                continue
            try:
                setattr(obj, key, _parse(raw, getattr(obj, key)))
            except ValueError as exc:
                problems.append(f"[{section}] {key}: {exc}")
    for (section, key), value in (overrides or {}).items():
        setattr(getattr(cfg, section), key, value)
    for attr in ("scenes_path", "mask_path"):
        p = getattr(cfg.data, attr)
        if p and not os.path.isabs(p):
            setattr(cfg.data, attr, os.path.normpath(os.path.join(base_dir, p)))
    problems += validate(cfg)
    if problems:
        raise ConfigError(problems)
    return cfg


def load_config(path=None, overrides=None) -> RunConfig:
    if path is None:
        return parse_config("", overrides)
    with open(path) as fh:
        text = fh.read()
    return parse_config(text, overrides, os.path.dirname(os.path.abspath(path)))


def validate(cfg: RunConfig):
    p = []
    s, d = cfg.schedule, cfg.data
    if s.S < 2:
        p.append("[schedule] S must be >= 2")
    if not 0 < s.beta0 < s.betaS < 1:
        p.append("[schedule] need 0 < beta0 < betaS < 1")
    if not 1 <= s.skip < max(s.S, 2):
        p.append("[schedule] skip must satisfy 1 <= skip < S")
    if not 1 <= s.var_delay <= s.S:
        p.append("[schedule] var_delay must satisfy 1 <= var_delay <= S")
    if d.T < 2 or d.N < 1:
        p.append("[data] need T >= 2 and N >= 1")
    if d.n_train < 1 or d.n_test < 1:
        p.append("[data] n_train and n_test must be >= 1")
    if d.mask_kind not in MASK_KINDS:
        p.append(f"[data] mask_kind must be one of {MASK_KINDS}")
    elif d.mask_kind == "forecast" and not 1 <= d.t_obs < d.T:
        p.append("[data] forecast needs 1 <= t_obs < T")
    elif d.mask_kind == "agent_dropout" and not 1 <= d.n_hidden < d.N:
        p.append("[data] agent_dropout needs 1 <= n_hidden < N")
    elif d.mask_kind == "gaps" and not 1 <= d.gap_len <= d.T - 2:
        p.append("[data] gaps needs 1 <= gap_len <= T-2")
    elif d.mask_kind == "file" and not os.path.exists(d.mask_path):
        p.append(f"[data] mask_path {d.mask_path!r} does not exist")
    if d.scenes_path and not os.path.exists(d.scenes_path):
        p.append(f"[data] scenes_path {d.scenes_path!r} does not exist")
    n = cfg.net
    if n.kind not in ("net", "linear"):
        p.append("[net] kind must be 'net' or 'linear'")
    if min(n.d_model, n.n_blocks, n.d_step) <= 0:
        p.append("[net] widths must be positive")
    t = cfg.train
    if t.lam < 0:
        p.append("[train] lam must be >= 0")
    if t.lr0 < 0:
        p.append("[train] lr0 must be >= 0")
    if min(t.epochs, t.batch_size, t.lr_halving_period) < 1:
        p.append("[train] epochs, batch_size, lr_halving_period must be >= 1")
    if t.target_policy not in ("all_states", "unobserved_only"):
        p.append("[train] target_policy must be all_states or unobserved_only")
    if t.optimizer not in ("adam", "sgd"):
        p.append("[train] optimizer must be adam or sgd")
    sm = cfg.sampler
    if sm.variant not in ("u2diff", "u2diffine", "full_jacobian"):
        p.append("[sampler] variant must be u2diff, u2diffine or full_jacobian")
    if sm.K < 1:
        p.append("[sampler] K must be >= 1")
    if sm.sv_clamp <= 0:
        p.append("[sampler] sv_clamp must be positive")
    if sm.jacobian_method not in ("exact", "two_pass"):
        p.append("[sampler] jacobian_method must be exact or two_pass")
    if not 0 < cfg.eval.level < 1:
        p.append("[eval] level must be in (0, 1)")
    if not cfg.eval.ks or min(cfg.eval.ks) < 1:
        p.append("[eval] ks must be positive integers")
    r = cfg.rank
    if r.d_model <= 0 or r.tau <= 0 or r.lr <= 0 or min(r.epochs, r.batch_size, r.n_train) < 1:
        p.append("[rank] d_model, tau, lr, epochs, batch_size, n_train must be positive")
    b = cfg.bench
    if b.reps < 20:
        p.append("[bench] reps must be >= 20")
    if b.K < 1:
        p.append("[bench] K must be >= 1")
    if any(v not in ("u2diff", "u2diffine", "full_jacobian") for v in b.variants):
        p.append("[bench] unknown variant in variants")
    if cfg.run.seed < 0 or cfg.run.seed >= 2**64:
        p.append("[run] seed must be an unsigned 64-bit integer")
    return p
