"""Complex-valued transformer primitives.

Everything runs in ``torch.complex128``/``torch.float64``; gradients come from
autograd (Wirtinger convention: for a real loss, ``param.grad`` is
``dL/dRe + i dL/dIm``), and :func:`grad_check` validates them numerically.

Blocks follow the pre-norm layout

    Y = X + Attn(RMSNorm(X))
    Z = Y + MLP(RMSNorm(Y))

with attention weights computed from ``Re(q . conj(k))`` so that every output
is a convex combination of values.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
import torch
from torch import nn

CDTYPE = torch.complex128
RDTYPE = torch.float64
RMS_EPS = 1e-6


# -- configuration -------------------------------------------------------------


@dataclass(frozen=True)
class BlockConfig:
    d_model: int
    n_heads: int
    d_head: int
    jmax: int = 4
    mlp_ratio: float = 8.0 / 3.0
    rms_bias: bool = True
    head_scale: bool = False
    mlp_bias: bool = False
    modulus_gating: bool = True

    def __post_init__(self):
        if self.d_head % 3:
            raise ValueError(f"d_head={self.d_head} must be divisible by three")
        if self.d_model != self.n_heads * self.d_head:
            raise ValueError("d_model must equal n_heads * d_head")

    @property
    def hidden(self) -> int:
        """MLP width: ``mlp_ratio * d_model`` rounded to a multiple of ``d_head``."""
        return max(1, round(self.mlp_ratio * self.d_model / self.d_head)) * self.d_head


# -- quadratic conditioning ------------------------------------------------------


def quad_basis(phi):
    """Quadratic Lagrange basis with nodes at phi = 0, 1/2, 1."""
    b0 = 2.0 * (0.5 - phi) * (1.0 - phi)
    b1 = 4.0 * phi * (1.0 - phi)
    b2 = 2.0 * phi * (phi - 0.5)
    return b0, b1, b2


def quad_interp(theta0, theta1, theta2, phi):
    b0, b1, b2 = quad_basis(phi)
    return b0 * theta0 + b1 * theta1 + b2 * theta2


@dataclass
class QuadParams:
    theta0: torch.Tensor
    theta1: torch.Tensor
    theta2: torch.Tensor

    def __post_init__(self):
        if not (self.theta0.shape == self.theta1.shape == self.theta2.shape):
            raise ValueError("control tensors must share a shape")

    def __call__(self, phi):
        return quad_interp(self.theta0, self.theta1, self.theta2, phi)


# -- functional primitives ----------------------------------------------------------


def complex_rmsnorm(x, w=None, b=None, eps: float = RMS_EPS):
    """Scale each token to unit mean squared modulus, then apply ``x * w + b``."""
    scale = torch.rsqrt(torch.mean(x.real**2 + x.imag**2, dim=-1, keepdim=True) + eps)
    out = x * scale
    if w is not None:
        out = out * w
    if b is not None:
        out = out + b
    return out


def split_heads(x, n_heads: int):
    *lead, s, d = x.shape
    return x.reshape(*lead, s, n_heads, d // n_heads).transpose(-3, -2)


def merge_heads(x):
    *lead, h, s, dh = x.shape
    return x.transpose(-3, -2).reshape(*lead, s, h * dh)


def attention(q, k, v, n_heads: int, head_scale=None, return_weights: bool = False):
    """Multi-head attention with real scores ``Re(q . conj(k)) / sqrt(2 d_head)``.

    ``q``, ``k``, ``v`` have shape ``(..., S, d_model)``; ``head_scale`` (real,
    ``(n_heads,)``) multiplies each head's output when given.
    """
    qh, kh, vh = (split_heads(t, n_heads) for t in (q, k, v))
    d_head = qh.shape[-1]
    scores = torch.einsum("...sc,...tc->...st", qh, kh.conj()).real / math.sqrt(2.0 * d_head)
    weights = torch.softmax(scores, dim=-1)
    out = torch.einsum("...st,...tc->...sc", weights.to(vh.dtype), vh)
    if head_scale is not None:
        out = out * head_scale.to(RDTYPE)[..., :, None, None]
    out = merge_heads(out)
    return (out, weights) if return_weights else out


def rope_base_freqs(d_head: int, jmax: int) -> torch.Tensor:
    """Angular frequency per head channel.

    Channels split into three equal groups (x, y, z).  Within a group the
    frequencies decay geometrically from ``2 pi / (2 jmax + 1)``, so the largest
    angle at ``|w| = jmax`` stays below ``pi``.
    """
    per_axis = d_head // 3
    bpd = 2 * jmax + 1
    ratio = (1.0 / bpd) ** (3.0 / d_head)
    group = (2.0 * math.pi / bpd) * ratio ** torch.arange(per_axis, dtype=RDTYPE)
    return group.repeat(3)


def rope_axes(d_head: int) -> torch.Tensor:
    return torch.arange(3).repeat_interleave(d_head // 3)


def rope3d(x, waves, base_freqs, offsets=None, n_heads: int | None = None):
    """Rotate each head channel by ``exp(i theta)``.

    ``x``: ``(..., S, d_model)``; ``waves``: integer ``(S, 3)`` (zeros for tokens
    without a wave vector); ``offsets``: real ``(n_heads, d_head)`` or None.
    """
    d_head = base_freqs.shape[0]
    n_heads = n_heads or x.shape[-1] // d_head
    waves = torch.as_tensor(np.asarray(waves), dtype=RDTYPE)
    theta = base_freqs[None, :] * waves[:, rope_axes(d_head)]  # (S, d_head)
    theta = theta[None, :, :].expand(n_heads, -1, -1)  # (H, S, d_head)
    if offsets is not None:
        theta = theta + offsets[:, None, :]
    xh = split_heads(x, n_heads)
    return merge_heads(xh * torch.polar(torch.ones_like(theta), theta))


def silu_componentwise(g):
    return torch.complex(nn.functional.silu(g.real), nn.functional.silu(g.imag))


def gated_mlp(x, params: dict, modulus_gating: bool, return_gated: bool = False):
    """Complex gated MLP.

    Baseline: ``out = W_o [(Re U * silu(Re G)) + i (Im U * silu(Im G))]``.
    Modulus gating: ``G = silu(W_g [Re x, Im x])`` is real, so each gated entry
    is a real multiple of the corresponding entry of ``U``.
    ``params`` holds ``w_u``, ``w_g``, ``w_o`` and optionally ``bias``.
    """
    u = x @ params["w_u"]
    if modulus_gating:
        gate = nn.functional.silu(torch.cat([x.real, x.imag], dim=-1) @ params["w_g"])
        gated = u * gate
    else:
        g = x @ params["w_g"]
        gated = torch.complex(u.real * nn.functional.silu(g.real), u.imag * nn.functional.silu(g.imag))
    if params.get("bias") is not None:
        gated = gated + params["bias"]
    out = gated @ params["w_o"]
    return (out, gated) if return_gated else out


# -- parameter helpers ----------------------------------------------------------------


def complex_init(shape, fan_in: int, generator=None, scale: float = 1.0):
    std = scale / math.sqrt(2.0 * fan_in)
    re = torch.randn(shape, generator=generator, dtype=RDTYPE) * std
    im = torch.randn(shape, generator=generator, dtype=RDTYPE) * std
    return torch.complex(re, im)


def real_init(shape, fan_in: int, generator=None, scale: float = 1.0):
    return torch.randn(shape, generator=generator, dtype=RDTYPE) * (scale / math.sqrt(fan_in))


class ComplexLinear(nn.Module):
    def __init__(self, d_in: int, d_out: int, bias: bool = False, generator=None, zero: bool = False):
        super().__init__()
        w = torch.zeros(d_in, d_out, dtype=CDTYPE) if zero else complex_init((d_in, d_out), d_in, generator)
        self.weight = nn.Parameter(w)
        self.bias = nn.Parameter(torch.zeros(d_out, dtype=CDTYPE)) if bias else None

    def forward(self, x):
        out = x @ self.weight
        return out if self.bias is None else out + self.bias


class ConditionedParameter(nn.Module):
    """A tensor that is either fixed or quadratic in the diffusion coordinate."""

    def __init__(self, value: torch.Tensor, conditioned: bool):
        super().__init__()
        self.conditioned = conditioned
        if conditioned:
            self.controls = nn.Parameter(value.detach().clone().unsqueeze(0).repeat(3, *([1] * value.dim())))
        else:
            self.controls = nn.Parameter(value.detach().clone())

    def forward(self, phi=None):
        if not self.conditioned:
            return self.controls
        if phi is None:
            raise ValueError("conditioned parameter requires phi")
        return quad_interp(self.controls[0], self.controls[1], self.controls[2], phi)


class ComplexBlock(nn.Module):
    """Pre-norm complex transformer block.

    With ``conditioned=True`` the RMSNorm biases, post-gating MLP bias, RoPE
    offsets and head scales become quadratic functions of ``phi``.
    """

    def __init__(self, cfg: BlockConfig, generator=None, conditioned: bool = False, zero_out: bool = False):
        super().__init__()
        self.cfg = cfg
        d, h, dh, hid = cfg.d_model, cfg.n_heads, cfg.d_head, cfg.hidden

        def cond(value):
            return ConditionedParameter(value, conditioned)

        self.norm1_w = nn.Parameter(torch.ones(d, dtype=CDTYPE))
        self.norm2_w = nn.Parameter(torch.ones(d, dtype=CDTYPE))
        self.norm1_b = cond(torch.zeros(d, dtype=CDTYPE)) if cfg.rms_bias else None
        self.norm2_b = cond(torch.zeros(d, dtype=CDTYPE)) if cfg.rms_bias else None
        self.wq = ComplexLinear(d, d, generator=generator)
        self.wk = ComplexLinear(d, d, generator=generator)
        self.wv = ComplexLinear(d, d, generator=generator)
        self.wo = ComplexLinear(d, d, generator=generator, zero=zero_out)
        self.q_offset = cond(torch.zeros(h, dh, dtype=RDTYPE))
        self.k_offset = cond(torch.zeros(h, dh, dtype=RDTYPE))
        self.head_scale = cond(torch.ones(h, dtype=RDTYPE)) if cfg.head_scale else None
        self.w_u = nn.Parameter(complex_init((d, hid), d, generator))
        if cfg.modulus_gating:
            self.w_g = nn.Parameter(real_init((2 * d, hid), 2 * d, generator))
        else:
            self.w_g = nn.Parameter(complex_init((d, hid), d, generator))
        self.mlp_b = cond(torch.zeros(hid, dtype=CDTYPE)) if cfg.mlp_bias else None
        w_o = torch.zeros(hid, d, dtype=CDTYPE) if zero_out else complex_init((hid, d), hid, generator)
        self.w_o = nn.Parameter(w_o)
        self.register_buffer("base_freqs", rope_base_freqs(dh, cfg.jmax), persistent=False)

    @staticmethod
    def _get(p, phi):
        return None if p is None else p(phi)

    def attention_sublayer(self, x, waves, phi=None):
        cfg = self.cfg
        q = rope3d(self.wq(x), waves, self.base_freqs, self.q_offset(phi), cfg.n_heads)
        k = rope3d(self.wk(x), waves, self.base_freqs, self.k_offset(phi), cfg.n_heads)
        v = self.wv(x)
        out = attention(q, k, v, cfg.n_heads, self._get(self.head_scale, phi))
        return self.wo(out)

    def mlp_params(self, phi=None) -> dict:
        return {"w_u": self.w_u, "w_g": self.w_g, "w_o": self.w_o, "bias": self._get(self.mlp_b, phi)}

    def forward(self, x, waves, phi=None):
        y = x + self.attention_sublayer(complex_rmsnorm(x, self.norm1_w, self._get(self.norm1_b, phi)), waves, phi)
        hidden = complex_rmsnorm(y, self.norm2_w, self._get(self.norm2_b, phi))
        return y + gated_mlp(hidden, self.mlp_params(phi), self.cfg.modulus_gating)


def transformer_block(x, block: ComplexBlock, waves, phi=None):
    return block(x, waves, phi)


# -- gradient checking ------------------------------------------------------------------


def _real_views(params):
    views = []
    for p in params:
        views.append(torch.view_as_real(p.data) if p.is_complex() else p.data)
    return views


def grad_check(loss_fn, params, step: float = 1e-6, n_samples: int = 200, seed: int = 0) -> float:
    """Max relative error between autograd and central finite differences.

    ``loss_fn()`` must return a real scalar tensor built from ``params``.
    Error per entry is ``|a - n| / max(1e-8, |a| + |n|)``.
    """
    params = [p for p in params if p.requires_grad]
    for p in params:
        p.grad = None
    loss_fn().backward()
    grads = []
    for p in params:
        g = p.grad if p.grad is not None else torch.zeros_like(p)
        grads.append((torch.view_as_real(g) if g.is_complex() else g).reshape(-1).detach().clone())
    views = [v.reshape(-1) for v in _real_views(params)]
    sizes = np.array([v.numel() for v in views])
    total = int(sizes.sum())
    rng = np.random.default_rng(seed)
    picks = np.arange(total) if total <= n_samples else np.sort(rng.choice(total, n_samples, replace=False))
    offsets = np.concatenate([[0], np.cumsum(sizes)])
    worst = 0.0
    with torch.no_grad():
        for flat in picks:
            which = int(np.searchsorted(offsets, flat, side="right") - 1)
            idx = int(flat - offsets[which])
            view = views[which]
            orig = view[idx].item()
            view[idx] = orig + step
            up = float(loss_fn())
            view[idx] = orig - step
            down = float(loss_fn())
            view[idx] = orig
            numeric = (up - down) / (2.0 * step)
            analytic = float(grads[which][idx])
            err = abs(analytic - numeric) / max(1e-8, abs(analytic) + abs(numeric))
            worst = max(worst, err)
    for p in params:
        p.grad = None
    return worst
