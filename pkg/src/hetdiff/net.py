"""Trainable social-temporal denoiser (float64 torch).

Layout per residual block: step conditioning, a bidirectional diagonal linear
recurrence over time for each agent, single-head self-attention over agents
at each timestep, a position-wise feedforward, and a skip projection. The
skips are summed and mapped to the noise mean (2), two standard deviations
(sigmoid) and a correlation (tanh, forced to zero in uni-variate mode). The
mean also gets a step-dependent per-channel gain times x_s.

Neither mixing layer uses positional encodings, so the network is
equivariant to agent permutations and, with mirrored temporal weights, to
time reversal.
"""

from dataclasses import dataclass, asdict
import math

import numpy as np
import torch
from torch import nn
import torch.nn.functional as F

from .denoiser import DenoiserOutput, DenoiserQuery, load_checkpoint, save_checkpoint
from .errors import NumericDomainError, UsageError
from .scene import ROLES

DTYPE = torch.float64
# element budget for one chunk of the exact-Jacobian replication
_JAC_CHUNK_ELEMS = 4_000_000


@dataclass
class NetConfig:
    d_model: int = 64
    n_blocks: int = 2
    d_step: int = 32
    attn_heads: int = 1
    n_roles: int = len(ROLES)
    bivariate: bool = True
    temporal_mixing: bool = True
    social_mixing: bool = True
    zero_heads: bool = True
    gain_init: float = 0.0  # initial bias of the x_s gain (only used with zero_heads)

    def __post_init__(self):
        if min(self.d_model, self.n_blocks, self.d_step) <= 0:
            raise ValueError("network widths must be positive")
        if self.attn_heads != 1:
            raise ValueError("only single-head attention is implemented")


def step_embedding(s, dim):
    """Sinusoidal features of the (1-based) diffusion step, shape (B, dim)."""
    s = torch.as_tensor(s, dtype=DTYPE).reshape(-1, 1)
    half = dim // 2
    freqs = torch.exp(-math.log(10_000.0) * torch.arange(half, dtype=DTYPE) / max(half - 1, 1))
    ang = s * freqs
    emb = torch.cat([torch.sin(ang), torch.cos(ang)], -1)
    return F.pad(emb, (0, dim - 2 * half))


class BiTemporal(nn.Module):
    """h_t = a * h_{t-1} + W x_t run forward and backward in time, summed.

    Evaluated in closed form with a (T, T) decay kernel per channel.
    """

    def __init__(self, d):
        super().__init__()
        self.w_fwd = nn.Linear(d, d)
        self.w_bwd = nn.Linear(d, d)
        init = torch.linspace(-1.0, 3.0, d, dtype=DTYPE)
        self.decay_fwd = nn.Parameter(init.clone())
        self.decay_bwd = nn.Parameter(init.clone())

    @staticmethod
    def _kernel(logit, T):
        log_a = F.logsigmoid(logit)
        t = torch.arange(T, dtype=DTYPE)
        lag = t[:, None] - t[None, :]
        causal = lag >= 0
        return torch.exp(lag.clamp(min=0)[None] * log_a[:, None, None]) * causal  # (C, T, T)

    def forward(self, x):  # (..., T, N, C)
        T = x.shape[-3]
        fwd = torch.einsum("ctk,...knc->...tnc", self._kernel(self.decay_fwd, T), self.w_fwd(x))
        bwd = torch.einsum("ckt,...knc->...tnc", self._kernel(self.decay_bwd, T), self.w_bwd(x))
        return fwd + bwd


class SetAttention(nn.Module):
    """Single-head dot-product self-attention over axis -2 (no positional encoding)."""

    def __init__(self, d):
        super().__init__()
        self.q = nn.Linear(d, d)
        self.k = nn.Linear(d, d)
        self.v = nn.Linear(d, d)
        self.o = nn.Linear(d, d)
        self.scale = 1.0 / math.sqrt(d)

    def forward(self, x):
        w = torch.softmax(self.q(x) @ self.k(x).transpose(-1, -2) * self.scale, dim=-1)
        return self.o(w @ self.v(x))


class SocialTemporalBlock(nn.Module):
    def __init__(self, d, temporal=True, social=True):
        super().__init__()
        self.temporal = BiTemporal(d) if temporal else None
        self.social = SetAttention(d) if social else None
        self.norm_t = nn.LayerNorm(d)
        self.norm_s = nn.LayerNorm(d)
        self.norm_f = nn.LayerNorm(d)
        self.ffn = nn.Sequential(nn.Linear(d, 2 * d), nn.ReLU(), nn.Linear(2 * d, d))

    def forward(self, h):  # (..., T, N, d)
        if self.temporal is not None:
            h = h + self.temporal(self.norm_t(h))
        if self.social is not None:
            h = h + self.social(self.norm_s(h))
        return h + self.ffn(self.norm_f(h))


class _ResidualBlock(nn.Module):
    def __init__(self, cfg: NetConfig):
        super().__init__()
        self.step_proj = nn.Linear(cfg.d_step, cfg.d_model)
        self.mix = SocialTemporalBlock(cfg.d_model, cfg.temporal_mixing, cfg.social_mixing)
        self.skip = nn.Linear(cfg.d_model, cfg.d_model)

    def forward(self, h, step_emb):
        h = self.mix(h + self.step_proj(step_emb)[:, None, None, :])
        return h, self.skip(h)


def _finite(name, t):
    if not torch.isfinite(t).all():
        raise NumericDomainError(f"non-finite activation in layer '{name}'")
    return t


class DenoiserNet(nn.Module):
    def __init__(self, cfg: NetConfig = None):
        super().__init__()
        cfg = cfg or NetConfig()
        self.cfg = cfg
        d = cfg.d_model
        self.embed = nn.Linear(2 + 2 + 1 + cfg.n_roles, d)
        self.step_mlp = nn.Linear(cfg.d_step, cfg.d_step)
        self.blocks = nn.ModuleList([_ResidualBlock(cfg) for _ in range(cfg.n_blocks)])
        self.out_hidden = nn.Linear(d, d)
        self.head_mu = nn.Linear(d, 2)
        self.head_std = nn.Linear(d, 2)
        self.head_rho = nn.Linear(d, 1)
        # per-step gain on x_s added to the mean; the optimal noise estimate is
        # close to linear in x_s at large s, which the deep path fits poorly
        self.head_gain = nn.Linear(cfg.d_step, 2)
        self.to(DTYPE)
        if cfg.zero_heads:
            for head in (self.head_mu, self.head_std, self.head_rho, self.head_gain):
                nn.init.zeros_(head.weight)
                nn.init.zeros_(head.bias)
            nn.init.constant_(self.head_gain.bias, cfg.gain_init)
        self.check_finite = True

    def features(self, x_s, observed, mask, roles):
        B, T, N, _ = x_s.shape
        observed = observed.expand(B, T, N, 2)
        mask = mask.to(DTYPE).expand(B, T, N).unsqueeze(-1)
        role = F.one_hot(roles, self.cfg.n_roles).to(DTYPE)
        if role.dim() == 3:  # per-example roles (B, N, R)
            role = role[:, None]
        role = role.expand(B, T, N, self.cfg.n_roles)
        return torch.cat([x_s, observed, mask, role], -1)

    def forward(self, x_s, s, observed, mask, roles):
        """x_s (B, T, N, 2); s int or (B,); observed (T|B.., N, 2); mask (.., T, N); roles (N,).

        Returns ``(mu, cov_params)`` with cov_params (B, T, N, 3) = (sx, sy, rho).
        """
        chk = _finite if self.check_finite else (lambda name, t: t)
        B = x_s.shape[0]
        s = torch.as_tensor(s).reshape(-1).expand(B)
        h = chk("embed", F.relu(self.embed(self.features(x_s, observed, mask, roles))))
        step_emb = F.silu(self.step_mlp(step_embedding(s, self.cfg.d_step)))
        skip = 0.0
        for i, block in enumerate(self.blocks):
            h, sk = block(h, step_emb)
            chk(f"blocks.{i}", h)
            skip = skip + sk
        z = chk("out_hidden", F.relu(self.out_hidden(skip / math.sqrt(len(self.blocks)))))
        mu = self.head_mu(z) + self.head_gain(step_emb)[:, None, None, :] * x_s
        std = torch.sigmoid(self.head_std(z))
        rho = torch.tanh(self.head_rho(z)) if self.cfg.bivariate else torch.zeros_like(std[..., :1])
        return chk("heads", mu), torch.cat([std, rho], -1)


class LinearDenoiser(nn.Module):
    """eps_mu = W_s x_s + c_s with one 2x2 matrix and offset per step.

    Covariance parameters are per-step constants. State-local and linear, so
    the Jacobian is exactly W_s.
    """

    def __init__(self, S: int, bivariate: bool = True):
        super().__init__()
        self.S = S
        self.bivariate = bivariate
        self.weight = nn.Parameter(torch.zeros(S, 2, 2, dtype=DTYPE))
        self.bias = nn.Parameter(torch.zeros(S, 2, dtype=DTYPE))
        self.cov_logits = nn.Parameter(torch.zeros(S, 3, dtype=DTYPE))
        self.check_finite = False

    def forward(self, x_s, s, observed=None, mask=None, roles=None):
        B = x_s.shape[0]
        idx = torch.as_tensor(s).reshape(-1).expand(B) - 1
        W = self.weight[idx][:, None, None]  # (B, 1, 1, 2, 2)
        mu = (W @ x_s.unsqueeze(-1)).squeeze(-1) + self.bias[idx][:, None, None]
        cl = self.cov_logits[idx][:, None, None].expand(x_s.shape[:-1] + (3,))
        std = torch.sigmoid(cl[..., :2])
        rho = torch.tanh(cl[..., 2:]) if self.bivariate else torch.zeros_like(cl[..., 2:])
        return mu, torch.cat([std, rho], -1)


# ---------------------------------------------------------------- numpy-facing wrapper


def cond_tensors(cond):
    observed = torch.as_tensor(np.asarray(cond.observed), dtype=DTYPE)
    mask = torch.as_tensor(np.asarray(cond.mask), dtype=DTYPE)
    roles = cond.roles if cond.roles is not None else np.zeros(cond.N, dtype=np.int64)
    return observed, mask, torch.as_tensor(np.asarray(roles), dtype=torch.long)


class TorchDenoiser:
    """Adapts a torch module to the :class:`DenoiserQuery` contract."""

    def __init__(self, module: nn.Module):
        self.module = module.eval()

    def _run(self, x, q):
        observed, mask, roles = cond_tensors(q.cond)
        return self.module(x, q.s, observed, mask, roles)

    def evaluate(self, q: DenoiserQuery) -> DenoiserOutput:
        x_np = q.x_s
        squeeze = x_np.ndim == 3
        x = torch.as_tensor(x_np[None] if squeeze else x_np, dtype=DTYPE)
        jac_diag = jac_full = None
        if q.jacobian_mode == "none":
            with torch.no_grad():
                mu, cov = self._run(x, q)
        else:
            if q.jacobian_method == "two_pass":
                mu, cov, blocks = self._two_pass(x, q)
            else:
                mu, cov, blocks = self._exact_blocks(x, q, diagonal=q.jacobian_mode == "diagonal")
            if q.jacobian_mode == "diagonal":
                jac_diag = torch.stack([blocks[..., 0, 0], blocks[..., 1, 1]], -1)
            else:
                jac_full = blocks
        out = [mu, cov, jac_diag, jac_full]
        out = [None if t is None else (t[0] if squeeze else t).detach().numpy().copy() for t in out]
        return DenoiserOutput(*out)

    def _two_pass(self, x, q):
        x = x.clone().requires_grad_(True)
        mu, cov = self._run(x, q)
        rows = [torch.autograd.grad(mu[..., d].sum(), x, retain_graph=d == 0)[0] for d in range(2)]
        return mu, cov, torch.stack(rows, -2)  # [..., out, in]

    def _exact_blocks(self, x, q, diagonal):
        """True per-state 2x2 partials via one reverse pass per output coordinate.

        The batch is replicated once per output coordinate (chunked); the
        cotangent of replica p selects output p, so its input gradient is row
        p of the scene Jacobian, from which the same-state entries are kept.
        """
        B, T, N, _ = x.shape
        P = T * N * 2
        with torch.no_grad():
            mu, cov = self._run(x, q)
        blocks = torch.zeros(B, T, N, 2, 2, dtype=DTYPE)
        d_model = getattr(getattr(self.module, "cfg", None), "d_model", 8)
        chunk = max(1, _JAC_CHUNK_ELEMS // max(1, B * T * N * d_model * 8))
        eye = torch.eye(P, dtype=DTYPE).reshape(P, T, N, 2)
        for start in range(0, P, chunk):
            sel = eye[start:start + chunk]  # (c, T, N, 2)
            c = sel.shape[0]
            xr = x.detach().unsqueeze(0).expand(c, B, T, N, 2).reshape(c * B, T, N, 2)
            xr = xr.clone().requires_grad_(True)
            y, _ = self._run(xr, q)
            g = torch.autograd.grad((y.reshape(c, B, T, N, 2) * sel[:, None]).sum(), xr)[0]
            g = g.reshape(c, B, T, N, 2)
            for j in range(c):
                p = start + j
                t, rem = divmod(p, N * 2)
                n, d = divmod(rem, 2)
                if diagonal:
                    blocks[:, t, n, d, d] = g[j, :, t, n, d]
                else:
                    blocks[:, t, n, d, :] = g[j, :, t, n, :]
        return mu, cov, blocks


def backward(module, q: DenoiserQuery, upstream_mu, upstream_cov=None):
    """Vector-Jacobian product of the forward pass.

    Returns ``(param_grads, input_grad)``: a name -> array dict and the
    gradient with respect to ``q.x_s``.
    """
    squeeze = q.x_s.ndim == 3
    x = torch.as_tensor(q.x_s[None] if squeeze else q.x_s, dtype=DTYPE).requires_grad_(True)
    observed, mask, roles = cond_tensors(q.cond)
    mu, cov = module(x, q.s, observed, mask, roles)
    up_mu = torch.as_tensor(np.asarray(upstream_mu), dtype=DTYPE).reshape(mu.shape)
    total = (mu * up_mu).sum()
    if upstream_cov is not None:
        total = total + (cov * torch.as_tensor(np.asarray(upstream_cov), dtype=DTYPE).reshape(cov.shape)).sum()
    names, params = zip(*[(n, p) for n, p in module.named_parameters()])
    grads = torch.autograd.grad(total, (x,) + params, allow_unused=True)
    gx = grads[0][0] if squeeze else grads[0]
    pg = {n: (np.zeros(tuple(p.shape)) if g is None else g.detach().numpy().copy())
          for n, p, g in zip(names, params, grads[1:])}
    return pg, gx.detach().numpy().copy()


# ---------------------------------------------------------------- checkpoints


def module_tensors(module: nn.Module) -> dict:
    return {k: v.detach().cpu().numpy() for k, v in module.state_dict().items()}


def load_module_tensors(module: nn.Module, tensors: dict):
    state = {k: torch.as_tensor(v, dtype=DTYPE) for k, v in tensors.items()}
    module.load_state_dict(state)
    return module


def save_denoiser(path, module, extra_config=None):
    if isinstance(module, DenoiserNet):
        cfg = {"kind": "net", "net": asdict(module.cfg)}
    elif isinstance(module, LinearDenoiser):
        cfg = {"kind": "linear", "S": module.S, "bivariate": module.bivariate}
    else:
        raise UsageError(f"cannot checkpoint module of type {type(module).__name__}")
    cfg.update(extra_config or {})
    save_checkpoint(path, module_tensors(module), cfg)


def load_denoiser(path):
    tensors, cfg = load_checkpoint(path)
    if cfg["kind"] == "net":
        module = DenoiserNet(NetConfig(**cfg["net"]))
    elif cfg["kind"] == "linear":
        module = LinearDenoiser(cfg["S"], cfg["bivariate"])
    else:
        raise UsageError(f"checkpoint kind {cfg['kind']!r} is not a denoiser")
    return load_module_tensors(module, tensors), cfg
