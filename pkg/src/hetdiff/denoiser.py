"""Denoiser contract shared by the analytic oracle and the trainable network.

A denoiser is any object with ``evaluate(query) -> DenoiserOutput``. Noisy
inputs carry an optional leading batch axis (``(B, T, N, 2)``); the condition
is shared across the batch.
"""

from dataclasses import dataclass
import hashlib
import json
import struct
from typing import Optional

import numpy as np

from .errors import NumericDomainError, ParameterError, ParseError, ShapeError
from .gaussian2d import cov_from_params
from .scene import CondScene

JACOBIAN_MODES = ("none", "diagonal", "full")
JACOBIAN_METHODS = ("exact", "two_pass")


@dataclass
class DenoiserQuery:
    x_s: np.ndarray
    s: int
    cond: CondScene
    jacobian_mode: str = "none"
    # "exact": true per-state partials. "two_pass": one reverse pass per output
    # coordinate; equals "exact" for state-local denoisers, otherwise it also
    # collects cross-state sensitivities (column sums of the scene Jacobian).
    jacobian_method: str = "exact"

    def __post_init__(self):
        self.x_s = np.asarray(self.x_s, dtype=np.float64)
        if self.jacobian_mode not in JACOBIAN_MODES:
            raise ParameterError(f"jacobian_mode must be one of {JACOBIAN_MODES}")
        if self.jacobian_method not in JACOBIAN_METHODS:
            raise ParameterError(f"jacobian_method must be one of {JACOBIAN_METHODS}")
        if self.x_s.shape[-3:] != self.cond.observed.shape:
            raise ShapeError(f"x_s shape {self.x_s.shape} incompatible with condition "
                             f"{self.cond.observed.shape}")
        if self.s < 1:
            raise ParameterError(f"step must be >= 1, got {self.s}")

    def with_x(self, x_s, jacobian_mode=None):
        return DenoiserQuery(x_s, self.s, self.cond, jacobian_mode or self.jacobian_mode,
                             self.jacobian_method)


@dataclass
class DenoiserOutput:
    eps_mu: np.ndarray  # (..., T, N, 2)
    eps_cov: np.ndarray  # (..., T, N, 3): sx, sy, rho
    jac_diag: Optional[np.ndarray] = None  # (..., T, N, 2)
    jac_full: Optional[np.ndarray] = None  # (..., T, N, 2, 2), [out, in]

    def cov_matrix(self):
        return cov_from_params(self.eps_cov[..., 0], self.eps_cov[..., 1], self.eps_cov[..., 2])

    def jacobian(self):
        """Per-state 2x2 Jacobian blocks, or None when none was requested."""
        if self.jac_full is not None:
            return self.jac_full
        if self.jac_diag is not None:
            J = np.zeros(self.jac_diag.shape + (2,))
            J[..., 0, 0] = self.jac_diag[..., 0]
            J[..., 1, 1] = self.jac_diag[..., 1]
            return J
        return None


def evaluate(model, q: DenoiserQuery) -> DenoiserOutput:
    out = model.evaluate(q)
    for name in ("eps_mu", "eps_cov", "jac_diag", "jac_full"):
        val = getattr(out, name)
        if val is not None and not np.isfinite(val).all():
            raise NumericDomainError(f"non-finite values in denoiser output '{name}'")
    if q.jacobian_mode == "none" and (out.jac_diag is not None or out.jac_full is not None):
        out = DenoiserOutput(out.eps_mu, out.eps_cov)
    return out


def jacobian_finite_diff(model, q: DenoiserQuery, h: float = 1e-4, full: bool = False):
    """Central-difference per-state Jacobian of eps_mu.

    Each (t, n, d) input coordinate is perturbed on its own, so the result is
    the true per-state partial. Returns ``(..., T, N, 2)`` diagonals, or
    ``(..., T, N, 2, 2)`` blocks when ``full``.
    """
    if h <= 0:
        raise ParameterError("h must be positive")
    x = q.x_s
    T, N = x.shape[-3], x.shape[-2]
    blocks = np.zeros(x.shape + (2,))
    base = q.with_x(x, "none")
    for t in range(T):
        for n in range(N):
            for d in range(2):
                step = np.zeros_like(x)
                step[..., t, n, d] = h
                plus = model.evaluate(base.with_x(x + step)).eps_mu[..., t, n, :]
                minus = model.evaluate(base.with_x(x - step)).eps_mu[..., t, n, :]
                blocks[..., t, n, :, d] = (plus - minus) / (2 * h)
    if full:
        return blocks
    return np.stack([blocks[..., 0, 0], blocks[..., 1, 1]], -1)


# ---------------------------------------------------------------- checkpoints

_MAGIC = b"HETDIFF1"


def config_hash(config: dict) -> str:
    return hashlib.sha256(json.dumps(config, sort_keys=True).encode()).hexdigest()


def save_checkpoint(path, tensors: dict, config: dict):
    """Flat named-tensor container: magic, u64 header length, JSON header, '<f8' data."""
    entries, blobs, offset = [], [], 0
    for name in sorted(tensors):
        arr = np.asarray(tensors[name], dtype="<f8", order="C")
        entries.append({"name": name, "shape": list(arr.shape), "offset": offset})
        blobs.append(arr.tobytes())
        offset += arr.size
    header = json.dumps({"format": 1, "config": config, "config_hash": config_hash(config),
                         "tensors": entries}, sort_keys=True).encode()
    with open(path, "wb") as fh:
        fh.write(_MAGIC)
        fh.write(struct.pack("<Q", len(header)))
        fh.write(header)
        for b in blobs:
            fh.write(b)


def load_checkpoint(path):
    """Return ``(tensors, config)``."""
    with open(path, "rb") as fh:
        raw = fh.read()
    if raw[:8] != _MAGIC:
        raise ParseError(f"{path}: not a checkpoint file")
    (hlen,) = struct.unpack("<Q", raw[8:16])
    header = json.loads(raw[16:16 + hlen])
    data = np.frombuffer(raw[16 + hlen:], dtype="<f8")
    tensors = {}
    for e in header["tensors"]:
        count = int(np.prod(e["shape"])) if e["shape"] else 1
        tensors[e["name"]] = data[e["offset"]:e["offset"] + count].reshape(tuple(e["shape"])).copy()
    if header.get("config_hash") != config_hash(header["config"]):
        raise ParseError(f"{path}: config hash mismatch")
    return tensors, header["config"]
