"""Scenes, observation masks, synthetic multi-agent data and JSONL persistence."""

from dataclasses import dataclass
import hashlib
import json
from typing import Optional

import numpy as np

from .errors import ParameterError, ParseError, ShapeError

ROLES = ("player", "ball")
SIG_DIGITS = 9


@dataclass
class Scene:
    coords: np.ndarray  # (T, N, 2)
    mask: np.ndarray  # (T, N), 1 = observed
    scene_id: str = ""
    agent_roles: Optional[list] = None

    def __post_init__(self):
        self.coords = np.asarray(self.coords, dtype=np.float64)
        self.mask = np.asarray(self.mask, dtype=np.int8)
        if self.coords.ndim != 3 or self.coords.shape[-1] != 2:
            raise ShapeError(f"coords must be (T, N, 2), got {self.coords.shape}")
        if self.mask.shape != self.coords.shape[:2]:
            raise ShapeError(f"mask shape {self.mask.shape} != {self.coords.shape[:2]}")
        if not np.isin(self.mask, (0, 1)).all():
            raise ParameterError("mask entries must be 0 or 1")
        if not np.isfinite(self.coords).all():
            raise ParameterError("coords must be finite")
        if self.T < 2 or self.N < 1:
            raise ShapeError(f"need T >= 2 and N >= 1, got T={self.T}, N={self.N}")

    @property
    def T(self):
        return self.coords.shape[0]

    @property
    def N(self):
        return self.coords.shape[1]

    def role_ids(self):
        roles = self.agent_roles or ["player"] * self.N
        return np.array([ROLES.index(r) if r in ROLES else 0 for r in roles], dtype=np.int64)

    def with_mask(self, mask):
        return Scene(self.coords, mask, self.scene_id, self.agent_roles)


@dataclass
class CondScene:
    observed: np.ndarray  # (T, N, 2), zero at unobserved states
    mask: np.ndarray  # (T, N)
    roles: Optional[np.ndarray] = None  # (N,) role ids
    scene_id: str = ""

    @property
    def T(self):
        return self.mask.shape[0]

    @property
    def N(self):
        return self.mask.shape[1]


def split_condition(scene: Scene, mask=None) -> CondScene:
    mask = scene.mask if mask is None else np.asarray(mask, dtype=np.int8)
    if mask.shape != scene.coords.shape[:2]:
        raise ShapeError(f"mask shape {mask.shape} != {scene.coords.shape[:2]}")
    observed = scene.coords * mask[..., None]
    return CondScene(observed, mask, scene.role_ids(), scene.scene_id)


# ---------------------------------------------------------------- masks

MASK_KINDS = ("forecast", "gaps", "agent_dropout", "file")


@dataclass
class MaskSpec:
    kind: str = "forecast"
    t_obs: int = 10  # forecast: observed prefix length
    n_gaps: int = 2  # gaps: number of hidden intervals
    gap_len: int = 5  # gaps: length of each interval
    n_hidden: int = 1  # agent_dropout: number of fully hidden agents
    path: str = ""  # file: JSON list-of-lists mask

    def __post_init__(self):
        if self.kind not in MASK_KINDS:
            raise ParameterError(f"unknown mask kind {self.kind!r}; expected one of {MASK_KINDS}")


def make_mask(spec: MaskSpec, T: int, N: int, seed: int = 0) -> np.ndarray:
    """Binary (T, N) mask; depends only on (spec, T, N, seed)."""
    rng = np.random.default_rng([int(seed), 0x6D61736B])
    mask = np.ones((T, N), dtype=np.int8)
    if spec.kind == "forecast":
        if not 1 <= spec.t_obs < T:
            raise ParameterError(f"forecast needs 1 <= t_obs < T, got t_obs={spec.t_obs}, T={T}")
        mask[spec.t_obs:] = 0
    elif spec.kind == "gaps":
        if spec.n_gaps < 1 or spec.gap_len < 1 or spec.gap_len > T - 2:
            raise ParameterError(f"gaps need n_gaps >= 1 and 1 <= gap_len <= T-2, got {spec}")
        for _ in range(spec.n_gaps):
            n = rng.integers(N)
            start = rng.integers(1, T - spec.gap_len)
            mask[start:start + spec.gap_len, n] = 0
    elif spec.kind == "agent_dropout":
        if not 1 <= spec.n_hidden < N:
            raise ParameterError(f"agent_dropout needs 1 <= n_hidden < N, got {spec.n_hidden} (N={N})")
        hidden = rng.choice(N, size=spec.n_hidden, replace=False)
        mask[:, hidden] = 0
    else:
        with open(spec.path) as fh:
            mask = np.asarray(json.load(fh), dtype=np.int8)
        if mask.shape != (T, N):
            raise ParameterError(f"mask file {spec.path} has shape {mask.shape}, expected {(T, N)}")
        if not np.isin(mask, (0, 1)).all():
            raise ParameterError(f"mask file {spec.path} has non-binary entries")
    if mask.all() or not mask.any():
        raise ParameterError(f"mask spec {spec} leaves no observed or no unobserved state")
    return mask


# ---------------------------------------------------------------- synthetic data


@dataclass
class DynamicsParams:
    """Interacting-agents process, coordinates in [-1, 1].

    Players follow a damped spring toward a shared attractor that drifts with
    an Ornstein-Uhlenbeck velocity, plus pairwise soft repulsion and Gaussian
    acceleration noise. The optional ball follows a stiffer spring toward a
    carrier player that switches at random.
    """

    dt: float = 0.1
    spring: float = 1.5
    damping: float = 1.2
    noise: float = 1.0
    spread: float = 0.35  # initial player spread around the attractor
    init_speed: float = 0.3
    attractor_spread: float = 0.3
    attractor_speed: float = 1.0
    attractor_persistence: float = 0.9
    repulsion: float = 0.5
    repulsion_radius: float = 0.25
    ball: bool = True
    ball_spring: float = 25.0
    ball_damping: float = 8.0
    switch_prob: float = 0.08


def _repulsion(p, strength, radius):
    diff = p[:, None, :] - p[None, :, :]
    dist = np.linalg.norm(diff, axis=-1)
    np.fill_diagonal(dist, np.inf)
    mag = strength * np.clip(radius - dist, 0.0, None) / (radius * np.maximum(dist, 1e-3))
    return (mag[..., None] * diff / np.maximum(dist, 1e-3)[..., None]).sum(axis=1)


def step_players(p, v, attractor, params: DynamicsParams, xi):
    """One semi-implicit Euler step of the player dynamics; xi is unit acceleration noise."""
    acc = -params.spring * (p - attractor) - params.damping * v + params.noise * xi
    if params.repulsion > 0 and len(p) > 1:
        acc = acc + _repulsion(p, params.repulsion, params.repulsion_radius)
    v = v + params.dt * acc
    p = p + params.dt * v
    return p, v


def _clip(p, v):
    out = np.abs(p) > 1.0
    p = np.clip(p, -1.0, 1.0)
    v = np.where(out, 0.0, v)
    return p, v


def _one_scene(T, N, params, rng):
    n_players = N - 1 if (params.ball and N > 1) else N
    att = params.attractor_spread * rng.standard_normal(2)
    att_v = np.zeros(2)
    p = att + params.spread * rng.standard_normal((n_players, 2))
    v = params.init_speed * rng.standard_normal((n_players, 2))
    p, v = _clip(p, v)
    out = np.zeros((T, N, 2))
    if n_players < N:
        carrier = rng.integers(n_players)
        bp, bv = p[carrier].copy(), np.zeros(2)
    for t in range(T):
        out[t, :n_players] = p
        if n_players < N:
            out[t, n_players] = bp
        xi = rng.standard_normal((n_players, 2))
        p, v = step_players(p, v, att, params, xi)
        p, v = _clip(p, v)
        att_v = params.attractor_persistence * att_v + params.attractor_speed * np.sqrt(
            1 - params.attractor_persistence ** 2) * rng.standard_normal(2)
        att = np.clip(att + params.dt * att_v, -0.8, 0.8)
        if n_players < N:
            if rng.random() < params.switch_prob:
                carrier = rng.integers(n_players)
            bacc = -params.ball_spring * (bp - p[carrier]) - params.ball_damping * bv
            bv = bv + params.dt * bacc
            bp = np.clip(bp + params.dt * bv, -1.0, 1.0)
    roles = ["player"] * n_players + ["ball"] * (N - n_players)
    return out, roles


def generate_synthetic_scenes(n_scenes, T, N, params: DynamicsParams = None, seed=0):
    """Scenes with all-ones masks; apply a MaskSpec afterwards.

    Scene ``i`` uses its own RNG stream derived from ``(seed, i)``.
    """
    params = params or DynamicsParams()
    if n_scenes < 0 or T < 2 or N < 1:
        raise ParameterError(f"invalid sizes n_scenes={n_scenes}, T={T}, N={N}")
    scenes = []
    for i in range(n_scenes):
        rng = np.random.default_rng([int(seed), i])
        coords, roles = _one_scene(T, N, params, rng)
        scenes.append(Scene(coords, np.ones((T, N), np.int8), f"syn-{seed}-{i:05d}", roles))
    return scenes


def apply_masks(scenes, spec: MaskSpec, seed=0):
    """Attach a fresh mask to every scene (mask i seeded by ``(seed, i)``)."""
    return [s.with_mask(make_mask(spec, s.T, s.N, seed=int(seed) * 1_000_003 + i))
            for i, s in enumerate(scenes)]


# ---------------------------------------------------------------- persistence


def _round(a):
    return [[[float(f"{x:.{SIG_DIGITS}g}") for x in xy] for xy in row] for row in a]


def scene_to_record(scene: Scene) -> dict:
    rec = {"scene_id": scene.scene_id, "T": scene.T, "N": scene.N,
           "coords": _round(scene.coords), "mask": scene.mask.astype(int).tolist()}
    if scene.agent_roles is not None:
        rec["agent_roles"] = list(scene.agent_roles)
    return rec


def scene_from_record(rec: dict) -> Scene:
    coords = np.asarray(rec["coords"], dtype=np.float64)
    T, N = int(rec["T"]), int(rec["N"])
    if coords.shape != (T, N, 2):
        raise ValueError(f"coords shape {coords.shape} does not match T={T}, N={N}")
    return Scene(coords, np.asarray(rec["mask"]), rec.get("scene_id", ""), rec.get("agent_roles"))


def save_scenes(scenes, path):
    with open(path, "w") as fh:
        for s in scenes:
            fh.write(json.dumps(scene_to_record(s), separators=(",", ":")) + "\n")


def load_scenes(path):
    scenes = []
    with open(path) as fh:
        for lineno, line in enumerate(fh, 1):
            if not line.strip():
                continue
            try:
                scenes.append(scene_from_record(json.loads(line)))
            except (ValueError, KeyError, TypeError) as exc:
                raise ParseError(str(exc), line=lineno) from exc
    return scenes


def file_sha256(path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 16), b""):
            h.update(chunk)
    return h.hexdigest()
