"""Learnable slice encoder.

Pipeline per slice: spatial lead gating -> multi-scale convolutional
tokenizer -> a stack of bidirectional selective state-space blocks ->
cross-modal attention over the static morphology/rhythm tokens ->
mean-pool classifier head.

The state-space recurrence h_t = Abar_t * h_{t-1} + Bbar_t * x_t is run
as an explicit sequential scan (TorchScript-compiled loop), so runtime
is linear in sequence length and outputs match a naive recurrence
bit-for-bit up to float associativity.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, asdict
from pathlib import Path
from typing import Optional

import numpy as np
import torch
import torch.nn.functional as F
from torch import nn

from .errors import ConfigError, DataError, NumericError

CHECKPOINT_VERSION = 1


@dataclass
class BackboneConfig:
    """Model shape parameters.

    Desk-scale defaults keep gradient and shape checks in CI territory;
    `paper_scale` switches to the full-size stack (16 blocks, width 384).
    """

    n_classes: int
    n_leads: int = 12
    window: int = 2500
    token_stride: int = 5
    d_model: int = 96
    n_blocks: int = 4
    state_dim: int = 16
    expand: int = 2
    n_heads: int = 8
    morph_tokens: int = 8
    hrv_dim: int = 36
    lead_attn_dim: int = 32
    share_directions: bool = False
    identity_backbone: bool = False
    ablate_hrv: bool = False
    ablate_morph: bool = False

    def __post_init__(self):
        if self.d_model % 3 != 0:
            raise ConfigError(f"d_model={self.d_model} must be divisible by 3 branches")
        if self.d_model % self.n_heads != 0:
            raise ConfigError(f"d_model={self.d_model} must be divisible by n_heads={self.n_heads}")
        if self.window % self.token_stride != 0:
            raise ConfigError(
                f"window={self.window} must be divisible by token_stride={self.token_stride}"
            )

    @property
    def d_inner(self) -> int:
        return self.expand * self.d_model

    @property
    def morph_dim(self) -> int:
        return self.morph_tokens * self.d_model

    @property
    def n_tokens(self) -> int:
        return self.window // self.token_stride

    @classmethod
    def paper_scale(cls, n_classes: int, **overrides) -> "BackboneConfig":
        kwargs = dict(d_model=384, n_blocks=16, state_dim=16)
        kwargs.update(overrides)
        return cls(n_classes=n_classes, **kwargs)


# ---------------------------------------------------------------------------
# Zero-order-hold discretization and the linear scan
# ---------------------------------------------------------------------------


def zoh_discretize(a: torch.Tensor, b: torch.Tensor, delta: torch.Tensor):
    """Discretize h' = a h + b x over a step `delta`.

    Abar = exp(delta * a); Bbar = phi(delta * a) * delta * b where
    phi(z) = (exp(z) - 1) / z. For |z| < 1e-4 the series
    1 + z/2 + z^2/6 replaces the quotient, removing the z = 0
    singularity (and its 0/0 gradient) without a measurable jump at the
    branch point.
    """
    z = delta * a
    abar = torch.exp(z)
    small = z.abs() < 1e-4
    z_safe = torch.where(small, torch.ones_like(z), z)
    phi = torch.where(small, 1.0 + z / 2.0 + z * z / 6.0, torch.expm1(z_safe) / z_safe)
    return abar, phi * delta * b


class _LinearRecurrence(torch.autograd.Function):
    """Sequential scan with a hand-written adjoint.

    Forward runs the recurrence into a preallocated buffer (no per-step
    autograd graph); backward runs the reverse-time adjoint recurrence
    gbar_t = g_t + abar_{t+1} * gbar_{t+1}, from which
    dL/dbu_t = gbar_t and dL/dabar_t = gbar_t * h_{t-1}.
    """

    @staticmethod
    def forward(ctx, abar, bu):
        h = torch.empty_like(bu)
        state = torch.zeros_like(bu[0])
        for t in range(bu.shape[0]):
            state = torch.addcmul(bu[t], abar[t], state)
            h[t] = state
        ctx.save_for_backward(abar, h)
        return h

    @staticmethod
    def backward(ctx, grad_out):
        abar, h = ctx.saved_tensors
        n_steps = h.shape[0]
        grad_abar = torch.empty_like(abar)
        grad_bu = torch.empty_like(abar)
        gbar = grad_out[n_steps - 1].clone()
        for t in range(n_steps - 1, -1, -1):
            if t < n_steps - 1:
                gbar = torch.addcmul(grad_out[t], abar[t + 1], gbar)
            grad_bu[t] = gbar
            if t > 0:
                grad_abar[t] = gbar * h[t - 1]
        grad_abar[0].zero_()
        return grad_abar, grad_bu


def linear_recurrence(abar: torch.Tensor, bu: torch.Tensor) -> torch.Tensor:
    """h_t = abar_t * h_{t-1} + bu_t elementwise, h_0 = 0; time on dim 0."""
    return _LinearRecurrence.apply(abar, bu)


class SelectiveSsm(nn.Module):
    """One direction of the selective state-space map on inner activations.

    The timescale, input and output projections all depend on the
    current token: delta = softplus(W_dt u + b_dt) per channel, and B, C
    are linear maps of u. A is a fixed-shape learnable diagonal,
    initialized to -(1..state_dim) for every channel so Abar starts
    inside (0, 1].
    """

    def __init__(self, d_inner: int, state_dim: int):
        super().__init__()
        self.d_inner = d_inner
        self.state_dim = state_dim
        a_init = -torch.arange(1.0, state_dim + 1.0).repeat(d_inner, 1)
        self.a_log_neg = nn.Parameter(torch.log(-a_init))  # A = -exp(a_log_neg) stays negative
        self.dt_proj = nn.Linear(d_inner, d_inner)
        self.b_proj = nn.Linear(d_inner, state_dim, bias=False)
        self.c_proj = nn.Linear(d_inner, state_dim, bias=False)
        dt_init = torch.exp(
            torch.rand(d_inner) * (math.log(0.1) - math.log(0.001)) + math.log(0.001)
        )
        with torch.no_grad():
            self.dt_proj.bias.copy_(dt_init + torch.log(-torch.expm1(-dt_init)))

    @property
    def a(self) -> torch.Tensor:
        return -torch.exp(self.a_log_neg)

    def forward(self, u: torch.Tensor) -> torch.Tensor:
        # u: (B, T, C) -> (B, T, C)
        delta = F.softplus(self.dt_proj(u))                      # (B, T, C)
        b_in = self.b_proj(u)                                    # (B, T, S)
        c_out = self.c_proj(u)                                   # (B, T, S)
        abar, bbar = zoh_discretize(
            self.a, b_in.unsqueeze(2), delta.unsqueeze(-1)
        )                                                        # (B, T, C, S)
        bu = bbar * u.unsqueeze(-1)
        h = linear_recurrence(abar.permute(1, 0, 2, 3), bu.permute(1, 0, 2, 3))
        if not torch.isfinite(h).all():
            raise NumericError("state overflow in selective scan", code="state-overflow")
        y = (h * c_out.permute(1, 0, 2).unsqueeze(2)).sum(-1)    # (T, B, C)
        return y.permute(1, 0, 2)


def ssm_scan(u: torch.Tensor, params: SelectiveSsm, direction: str = "forward") -> torch.Tensor:
    """Selective scan over a (B, T, C) sequence in either direction.

    The backward direction is flip -> scan -> flip, so both directions
    share one recurrence implementation.
    """
    if direction == "forward":
        return params(u)
    if direction == "backward":
        return torch.flip(params(torch.flip(u, dims=[1])), dims=[1])
    raise ConfigError(f"unknown scan direction {direction!r}")


class RmsNorm(nn.Module):
    def __init__(self, dim: int, eps: float = 1e-6):
        super().__init__()
        self.weight = nn.Parameter(torch.ones(dim))
        self.eps = eps

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return x * torch.rsqrt(x.pow(2).mean(-1, keepdim=True) + self.eps) * self.weight


class BiSsmBlock(nn.Module):
    """Pre-norm residual block running the scan in both directions.

    The backward pass is flip -> scan -> flip; the two streams are fused
    by a learned sigmoid gate g so the output is g*fwd + (1-g)*bwd.
    `force_gate` pins g for ablations and tests.
    """

    def __init__(self, d_model: int, state_dim: int, expand: int = 2,
                 share_directions: bool = False):
        super().__init__()
        d_inner = expand * d_model
        self.norm = RmsNorm(d_model)
        self.in_proj = nn.Linear(d_model, d_inner)
        self.fwd = SelectiveSsm(d_inner, state_dim)
        self.bwd = self.fwd if share_directions else SelectiveSsm(d_inner, state_dim)
        self.gate_proj = nn.Linear(2 * d_inner, d_inner)
        self.out_proj = nn.Linear(d_inner, d_model)
        self.force_gate: Optional[float] = None

    def direction_outputs(self, u: torch.Tensor):
        return ssm_scan(u, self.fwd, "forward"), ssm_scan(u, self.bwd, "backward")

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        u = self.in_proj(self.norm(x))
        h_fwd, h_bwd = self.direction_outputs(u)
        if self.force_gate is None:
            g = torch.sigmoid(self.gate_proj(torch.cat([h_fwd, h_bwd], dim=-1)))
        else:
            g = torch.full_like(h_fwd, self.force_gate)
        fused = g * h_fwd + (1.0 - g) * h_bwd
        return x + self.out_proj(fused)


class LeadAttention(nn.Module):
    """Scalar gate per lead from self-attention over lead summaries.

    Each lead is summarized by (mean, std, max, min) over time, embedded,
    combined with a learnable lead-identity encoding, and attended over
    so leads can modulate each other. Output channel l is exactly
    alpha_l * input channel l.
    """

    def __init__(self, n_leads: int = 12, d_attn: int = 32):
        super().__init__()
        self.n_leads = n_leads
        self.embed = nn.Linear(4, d_attn)
        self.lead_encoding = nn.Parameter(torch.randn(n_leads, d_attn) * 0.02)
        self.q_proj = nn.Linear(d_attn, d_attn)
        self.k_proj = nn.Linear(d_attn, d_attn)
        self.v_proj = nn.Linear(d_attn, d_attn)
        self.gate = nn.Linear(d_attn, 1)
        with torch.no_grad():
            self.gate.bias.fill_(2.0)  # start near alpha ~ 0.88 to keep signal flowing

    def forward(self, x: torch.Tensor, force_alpha: Optional[torch.Tensor] = None):
        # x: (B, n_leads, L)
        if force_alpha is not None:
            alpha = force_alpha.to(x.dtype).expand(x.shape[0], self.n_leads)
            return x * alpha.unsqueeze(-1), alpha
        stats = torch.stack(
            [x.mean(-1), x.std(-1, unbiased=False), x.amax(-1), x.amin(-1)], dim=-1
        )
        tokens = self.embed(stats) + self.lead_encoding
        q, k, v = self.q_proj(tokens), self.k_proj(tokens), self.v_proj(tokens)
        attn = torch.softmax(q @ k.transpose(-1, -2) / math.sqrt(q.shape[-1]), dim=-1)
        ctx = attn @ v
        alpha = torch.sigmoid(self.gate(ctx)).squeeze(-1)        # (B, n_leads)
        return x * alpha.unsqueeze(-1), alpha


class MultiScaleTokenizer(nn.Module):
    """Three parallel conv branches (kernels 3, 7, 15), concatenated and
    linearly projected to the model width; one token per `stride` samples."""

    KERNEL_SIZES = (3, 7, 15)

    def __init__(self, n_leads: int, d_model: int, stride: int):
        super().__init__()
        width = d_model // len(self.KERNEL_SIZES)
        self.stride = stride
        self.branches = nn.ModuleList(
            [nn.Conv1d(n_leads, width, k, stride=stride, padding=k // 2)
             for k in self.KERNEL_SIZES]
        )
        self.proj = nn.Linear(d_model, d_model)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        if x.shape[-1] % self.stride != 0:
            raise DataError(
                f"signal length {x.shape[-1]} not divisible by token stride {self.stride}",
                code="bad-token-stride",
            )
        feats = torch.cat([branch(x) for branch in self.branches], dim=1)  # (B, D, T)
        return self.proj(feats.transpose(1, 2))                             # (B, T, D)


class CrossModalFusion(nn.Module):
    """Multi-head cross-attention: contextual tokens query the static
    morphology tokens (8) plus the projected rhythm token (1)."""

    def __init__(self, d_model: int, n_heads: int, morph_tokens: int, hrv_dim: int):
        super().__init__()
        self.n_heads = n_heads
        self.d_head = d_model // n_heads
        self.morph_tokens = morph_tokens
        self.norm = RmsNorm(d_model)
        self.hrv_proj = nn.Linear(hrv_dim, d_model)
        self.q_proj = nn.Linear(d_model, d_model)
        self.k_proj = nn.Linear(d_model, d_model)
        self.v_proj = nn.Linear(d_model, d_model)
        self.out_proj = nn.Linear(d_model, d_model)

    def static_tokens(self, morph: torch.Tensor, hrv: torch.Tensor,
                      ablate_morph: bool = False, ablate_hrv: bool = False) -> torch.Tensor:
        b = morph.shape[0]
        morph_tok = morph.reshape(b, self.morph_tokens, -1)
        hrv_tok = self.hrv_proj(hrv).unsqueeze(1)
        if ablate_morph:
            morph_tok = torch.zeros_like(morph_tok)
        if ablate_hrv:
            hrv_tok = torch.zeros_like(hrv_tok)
        return torch.cat([morph_tok, hrv_tok], dim=1)            # (B, morph_tokens + 1, D)

    def forward(self, h_ctx: torch.Tensor, static: torch.Tensor):
        b, t, d = h_ctx.shape
        s = static.shape[1]

        def split(x):
            return x.reshape(b, -1, self.n_heads, self.d_head).transpose(1, 2)

        q = split(self.q_proj(self.norm(h_ctx)))                 # (B, H, T, dh)
        k = split(self.k_proj(static))                            # (B, H, S, dh)
        v = split(self.v_proj(static))
        logits = q @ k.transpose(-1, -2) / math.sqrt(self.d_head)
        attn = torch.softmax(logits, dim=-1)                      # rows sum to 1
        out = (attn @ v).transpose(1, 2).reshape(b, t, d)
        return h_ctx + self.out_proj(out), attn


class EcgBackbone(nn.Module):
    """Full slice encoder; forward returns per-class probabilities."""

    def __init__(self, config: BackboneConfig):
        super().__init__()
        self.config = config
        self.lead_gate = LeadAttention(config.n_leads, config.lead_attn_dim)
        self.tokenizer = MultiScaleTokenizer(config.n_leads, config.d_model, config.token_stride)
        self.blocks = nn.ModuleList(
            [BiSsmBlock(config.d_model, config.state_dim, config.expand,
                        config.share_directions)
             for _ in range(config.n_blocks)]
        )
        self.fusion = CrossModalFusion(config.d_model, config.n_heads,
                                       config.morph_tokens, config.hrv_dim)
        self.head = nn.Linear(config.d_model, config.n_classes)

    def contextualize(self, tokens: torch.Tensor) -> torch.Tensor:
        if self.config.identity_backbone:
            return tokens
        for block in self.blocks:
            tokens = block(tokens)
        return tokens

    def forward(self, x: torch.Tensor, morph: torch.Tensor, hrv: torch.Tensor,
                lead_mask: Optional[torch.Tensor] = None,
                force_alpha: Optional[torch.Tensor] = None,
                return_details: bool = False):
        if lead_mask is not None:
            x = x * lead_mask.to(x.dtype).reshape(1, -1, 1)
        x, alpha = self.lead_gate(x, force_alpha)
        tokens = self.tokenizer(x)
        h_ctx = self.contextualize(tokens)
        static = self.fusion.static_tokens(
            morph, hrv, self.config.ablate_morph, self.config.ablate_hrv
        )
        fused, attn = self.fusion(h_ctx, static)
        probs = torch.sigmoid(self.head(fused.mean(dim=1)))
        if return_details:
            return probs, {"alpha": alpha, "attention": attn, "tokens": tokens, "h_ctx": h_ctx}
        return probs


def model_backward(model: nn.Module, loss: torch.Tensor, inputs=None) -> dict:
    """Backpropagate `loss`; returns {parameter path: gradient tensor}.

    Raises NumericError naming the first parameter whose gradient is
    non-finite. Pass `inputs` to also collect input-tensor gradients.
    """
    model.zero_grad(set_to_none=True)
    loss.backward()
    grads = {}
    for name, param in model.named_parameters():
        if param.grad is None:
            continue
        if not torch.isfinite(param.grad).all():
            raise NumericError(f"non-finite gradient in {name}", code="bad-gradient")
        grads[name] = param.grad.detach().clone()
    if inputs is not None:
        for key, tensor in inputs.items():
            if tensor.grad is not None:
                grads[f"input::{key}"] = tensor.grad.detach().clone()
    return grads


def saliency(model: EcgBackbone, x: torch.Tensor, morph: torch.Tensor,
             hrv: torch.Tensor, **forward_kwargs) -> torch.Tensor:
    """|d(sum of class probabilities)/d(input)|, shaped like the input."""
    x = x.detach().clone().requires_grad_(True)
    probs = model(x, morph, hrv, **forward_kwargs)
    model.zero_grad(set_to_none=True)
    probs.sum().backward()
    return x.grad.detach().abs()


# ---------------------------------------------------------------------------
# Checkpoints: versioned header + named float32 parameter blocks
# ---------------------------------------------------------------------------


def save_checkpoint(path, model: EcgBackbone, extra: Optional[dict] = None) -> None:
    meta = {
        "format_version": CHECKPOINT_VERSION,
        "config": asdict(model.config),
        "extra": extra or {},
    }
    arrays = {
        f"param::{name}": p.detach().cpu().numpy().astype(np.float32)
        for name, p in model.named_parameters()
    }
    np.savez(path, __meta__=json.dumps(meta, sort_keys=True), **arrays)


def load_checkpoint(path, dtype=torch.float32) -> EcgBackbone:
    path = Path(path)
    if not path.exists():
        raise DataError(f"no such checkpoint: {path}", code="missing-file")
    with np.load(path, allow_pickle=False) as z:
        meta = json.loads(str(z["__meta__"]))
        if meta.get("format_version") != CHECKPOINT_VERSION:
            raise DataError("unsupported checkpoint version", code="bad-checkpoint")
        config = BackboneConfig(**meta["config"])
        model = EcgBackbone(config).to(dtype)
        state = dict(model.named_parameters())
        for key in z.files:
            if not key.startswith("param::"):
                continue
            name = key[len("param::"):]
            if name not in state:
                raise DataError(f"unknown parameter block {name}", code="bad-checkpoint")
            value = z[key]
            if tuple(state[name].shape) != value.shape:
                raise DataError(
                    f"shape mismatch for {name}: checkpoint {value.shape}, "
                    f"model {tuple(state[name].shape)}",
                    code="bad-checkpoint",
                )
            with torch.no_grad():
                state[name].copy_(torch.from_numpy(value).to(dtype))
    return model
