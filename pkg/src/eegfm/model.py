"""Hierarchical two-stage-attention encoder and reconstruction decoder.

Each encoder layer alternates pre-norm self-attention over time (per channel,
weights shared across channels) and over channels (per time step), each stage
ending in a routed feed-forward block.  Deeper layers see coarser temporal
resolution via learned segment merging.  The decoder runs full-resolution
two-stage blocks, each followed by per-channel cross-attention along time
into a designated encoder layer, and a linear head maps every point back to
a scalar.

Masked positions enter the encoder as a value-free mask-token embedding and
are additionally excluded as temporal-attention keys, so nothing downstream
of the encoder can depend on the signal values at masked points.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, asdict

import numpy as np
import torch
from torch import nn

from . import geometry
from .geometry import ElectrodeLayout
from .masking import Action, CorruptionPlan, LayerMasks
from .numerics import NumericalError, RngStream
from .pmoe import FeedForward, PMoELayer

DEFAULT_EXPERT_SCHEDULE = [0, 0, 2, 4, 4, 6]
PE_MODES = ("3d", "index", "learnable1d", "learnable2d")


@dataclass
class ModelConfig:
    d_model: int = 48
    n_heads: int = 8
    n_layers: int = 6
    merge_factors: list[int] = field(default_factory=lambda: [1, 4, 1, 2, 1, 2])
    expert_counts: list[int] = field(default_factory=lambda: list(DEFAULT_EXPERT_SCHEDULE))
    shared_ffn_width: int = 48
    expert_ffn_width: int = 32
    top_k_fraction: float = 0.5
    noise_std: float = 0.001
    dropout: float = 0.1
    decoder_layers: int = 6
    activation: str = "swiglu"
    pe_mode: str = "3d"
    max_time: int = 256  # only bounds the learnable2d temporal table

    def __post_init__(self):
        if self.pe_mode not in PE_MODES:
            raise ValueError(f"pe_mode must be one of {PE_MODES}, got {self.pe_mode!r}")
        if self.pe_mode == "3d" and self.d_model % 6 != 0:
            raise ValueError("d_model must be divisible by 6 for the 3-axis spatial encoding")
        if self.d_model % 2 != 0:
            raise ValueError("d_model must be even")
        if self.d_model % self.n_heads != 0:
            raise ValueError("d_model must be divisible by n_heads")
        if len(self.merge_factors) != self.n_layers:
            raise ValueError("merge_factors must list one factor per encoder layer")
        if len(self.expert_counts) != self.n_layers:
            raise ValueError("expert_counts must list one count per encoder layer")
        if self.merge_factors[0] != 1:
            raise ValueError("the first merge factor must be 1")
        if any(m < 1 for m in self.merge_factors):
            raise ValueError("merge factors must be positive")
        if any(e < 0 for e in self.expert_counts):
            raise ValueError("expert counts must be non-negative")
        if self.decoder_layers < 1:
            raise ValueError("decoder_layers must be >= 1")
        if self.activation not in ("relu", "gelu", "swiglu"):
            raise ValueError(f"unknown activation {self.activation!r}")

    def temporal_lengths(self, T: int) -> list[int]:
        """Per-layer sequence lengths: T_l = ceil(T_{l-1} / m_l)."""
        lengths = []
        cur = T
        for m in self.merge_factors:
            cur = -(-cur // m)
            lengths.append(cur)
        return lengths

    def to_dict(self) -> dict:
        return asdict(self)


def _dropout(x: torch.Tensor, p: float, rng: RngStream | None, training: bool) -> torch.Tensor:
    """Inverted dropout with an explicit stream (torch's RNG stays untouched)."""
    if not training or p <= 0.0 or rng is None:
        return x
    keep = (rng.torch_uniform(x.shape, dtype=x.dtype) >= p).to(x.dtype)
    return x * keep / (1.0 - p)


def _attend(q, k, v, key_mask: torch.Tensor | None = None) -> torch.Tensor:
    """Scaled dot-product attention with key exclusion.

    ``key_mask`` (B, L) marks keys no query may attend to; a sequence whose
    keys are all excluded falls back to self-only attention instead of
    producing NaNs.
    """
    attn_mask = None
    if key_mask is not None:
        allowed = ~key_mask[:, None, None, :]
        all_blocked = key_mask.all(dim=-1)
        if all_blocked.any():
            L = k.shape[-2]
            allowed = allowed.expand(-1, 1, q.shape[-2], L).clone()
            allowed[all_blocked] = torch.eye(L, dtype=torch.bool)
        attn_mask = allowed
    return torch.nn.functional.scaled_dot_product_attention(q, k, v, attn_mask=attn_mask)


class SelfAttention(nn.Module):
    """Multi-head self-attention (weights shared across the folded batch)."""

    def __init__(self, d_model: int, n_heads: int):
        super().__init__()
        self.n_heads = n_heads
        self.d_head = d_model // n_heads
        self.qkv = nn.Linear(d_model, 3 * d_model)
        self.out = nn.Linear(d_model, d_model)

    def forward(self, x: torch.Tensor, key_mask: torch.Tensor | None = None) -> torch.Tensor:
        B, L, _ = x.shape
        q, k, v = self.qkv(x).chunk(3, dim=-1)
        q = q.view(B, L, self.n_heads, self.d_head).transpose(1, 2)
        k = k.view(B, L, self.n_heads, self.d_head).transpose(1, 2)
        v = v.view(B, L, self.n_heads, self.d_head).transpose(1, 2)
        out = _attend(q, k, v, key_mask).transpose(1, 2).reshape(B, L, -1)
        return self.out(out)


class CrossAttention(nn.Module):
    """Multi-head attention of a query sequence into a memory sequence."""

    def __init__(self, d_model: int, n_heads: int):
        super().__init__()
        self.n_heads = n_heads
        self.d_head = d_model // n_heads
        self.q_proj = nn.Linear(d_model, d_model)
        self.kv_proj = nn.Linear(d_model, 2 * d_model)
        self.out = nn.Linear(d_model, d_model)

    def forward(self, query: torch.Tensor, memory: torch.Tensor) -> torch.Tensor:
        B, L, _ = query.shape
        S = memory.shape[1]
        q = self.q_proj(query).view(B, L, self.n_heads, self.d_head).transpose(1, 2)
        k, v = self.kv_proj(memory).chunk(2, dim=-1)
        k = k.view(B, S, self.n_heads, self.d_head).transpose(1, 2)
        v = v.view(B, S, self.n_heads, self.d_head).transpose(1, 2)
        out = _attend(q, k, v).transpose(1, 2).reshape(B, L, -1)
        return self.out(out)


class TSALayer(nn.Module):
    """One two-stage block: temporal stage then spatial stage, pre-norm.

    Layer-1 positional terms are added to the stage inputs (``pe_t`` before
    the temporal stage, ``pe_s`` before the spatial one) so they take part in
    the residual path.
    """

    def __init__(self, config: ModelConfig, n_experts: int):
        super().__init__()
        d = config.d_model
        self.dropout_p = config.dropout
        self.ln_t1 = nn.LayerNorm(d)
        self.ln_t2 = nn.LayerNorm(d)
        self.ln_s1 = nn.LayerNorm(d)
        self.ln_s2 = nn.LayerNorm(d)
        self.attn_time = SelfAttention(d, config.n_heads)
        self.attn_space = SelfAttention(d, config.n_heads)
        kwargs = dict(
            d_model=d,
            n_experts=n_experts,
            expert_width=config.expert_ffn_width,
            shared_width=config.shared_ffn_width,
            activation=config.activation,
            noise_std=config.noise_std,
            top_k_fraction=config.top_k_fraction,
        )
        self.ffn_time = PMoELayer(**kwargs)
        self.ffn_space = PMoELayer(**kwargs)

    def _stage(self, u, attn, ln_pre, ln_post, ffn, key_mask, rng, training, gates):
        pre = ln_pre(u)
        resid = u + _dropout(attn(pre, key_mask), self.dropout_p, rng, training)
        moe_in = ln_post(resid)
        y, gate = ffn(moe_in, rng=rng, training=training)
        if gates is not None and gate is not None:
            gates.append(gate)
        return _dropout(y, self.dropout_p, rng, training) + resid

    def forward(
        self,
        z: torch.Tensor,
        key_mask: torch.Tensor | None = None,
        pe_t: torch.Tensor | None = None,
        pe_s: torch.Tensor | None = None,
        rng: RngStream | None = None,
        training: bool = False,
        gates: list | None = None,
    ) -> torch.Tensor:
        B, T, D, d = z.shape
        u = z if pe_t is None else z + pe_t[None, :, None, :]
        folded = u.permute(0, 2, 1, 3).reshape(B * D, T, d)
        km = None
        if key_mask is not None:
            km = key_mask.permute(0, 2, 1).reshape(B * D, T)
        t_out = self._stage(folded, self.attn_time, self.ln_t1, self.ln_t2,
                            self.ffn_time, km, rng, training, gates)
        t_out = t_out.reshape(B, D, T, d).permute(0, 2, 1, 3)

        v = t_out if pe_s is None else t_out + pe_s[None, None, :, :]
        folded = v.reshape(B * T, D, d)
        s_out = self._stage(folded, self.attn_space, self.ln_s1, self.ln_s2,
                            self.ffn_space, None, rng, training, gates)
        out = s_out.reshape(B, T, D, d)
        if not torch.isfinite(out).all():
            raise NumericalError("non-finite activations in two-stage layer")
        return out


def merge_segments(z: torch.Tensor, m: int, proj: nn.Linear | None) -> torch.Tensor:
    """Concatenate m consecutive time vectors per channel and project back to
    d_model; a trailing partial group repeats its last vector."""
    if m == 1 and proj is None:
        return z
    B, T, D, d = z.shape
    if m > 1 and T % m != 0:
        pad = m - T % m
        z = torch.cat([z, z[:, -1:].expand(B, pad, D, d)], dim=1)
        T = z.shape[1]
    grouped = z.reshape(B, T // m, m, D, d).permute(0, 1, 3, 2, 4).reshape(B, T // m, D, m * d)
    return proj(grouped)


class DecoderBlock(nn.Module):
    """Full-resolution two-stage block, then per-channel cross-attention
    along time into one encoder layer's output, then a plain FFN."""

    def __init__(self, config: ModelConfig):
        super().__init__()
        d = config.d_model
        self.dropout_p = config.dropout
        self.tsa = TSALayer(config, n_experts=0)
        self.ln_q = nn.LayerNorm(d)
        self.cross = CrossAttention(d, config.n_heads)
        self.ln_f = nn.LayerNorm(d)
        self.ffn = FeedForward(d, config.shared_ffn_width, config.activation)

    def forward(self, z, memory, rng=None, training=False):
        z = self.tsa(z, rng=rng, training=training)
        B, T, D, d = z.shape
        S = memory.shape[1]
        q = z.permute(0, 2, 1, 3).reshape(B * D, T, d)
        mem = memory.permute(0, 2, 1, 3).reshape(B * D, S, d)
        attended = self.cross(self.ln_q(q), mem)
        q = q + _dropout(attended, self.dropout_p, rng, training)
        q = q + _dropout(self.ffn(self.ln_f(q)), self.dropout_p, rng, training)
        return q.reshape(B, D, T, d).permute(0, 2, 1, 3)


class EEGModel(nn.Module):
    """Encoder/decoder pair bound to an electrode layout."""

    def __init__(self, config: ModelConfig, layout: ElectrodeLayout, dtype: torch.dtype = torch.float64):
        super().__init__()
        self.config = config
        self.layout = layout
        d = config.d_model
        D = len(layout)
        self.value_proj = nn.Parameter(torch.zeros(d))
        self.mask_token = nn.Parameter(torch.zeros(d))

        if config.pe_mode == "3d":
            table = geometry.pe_spatial(layout, d).values
            self.register_buffer("pe_chan", torch.as_tensor(table))
        elif config.pe_mode == "index":
            table = geometry._sinusoid_block(np.arange(D, dtype=np.float64), d)
            self.register_buffer("pe_chan", torch.as_tensor(table))
        else:
            self.pe_chan = nn.Parameter(torch.zeros(D, d))
        if config.pe_mode == "learnable2d":
            self.pe_time_table = nn.Parameter(torch.zeros(config.max_time, d))

        self.encoder_layers = nn.ModuleList(
            TSALayer(config, n_experts=config.expert_counts[l]) for l in range(config.n_layers)
        )
        self.merges = nn.ModuleList(
            [nn.Identity()]
            + [
                nn.Linear(config.merge_factors[l] * d, d, bias=False)
                for l in range(1, config.n_layers)
            ]
        )
        self.decoder_blocks = nn.ModuleList(
            DecoderBlock(config) for _ in range(config.decoder_layers)
        )
        self.ln_out = nn.LayerNorm(d)
        self.head = nn.Linear(d, 1)
        self.to(dtype)

    @property
    def dtype(self) -> torch.dtype:
        return self.value_proj.dtype

    def temporal_pe(self, T: int) -> torch.Tensor:
        if self.config.pe_mode == "learnable2d":
            if T > self.config.max_time:
                raise ValueError(f"T={T} exceeds the learnable temporal table ({self.config.max_time})")
            return self.pe_time_table[:T]
        return torch.as_tensor(geometry.pe_temporal(T, self.config.d_model).values, dtype=self.dtype)

    def value_embedding(self, x: torch.Tensor) -> torch.Tensor:
        """E*x per point: (B, T, D) -> (B, T, D, d_model)."""
        return x[..., None] * self.value_proj

    def embed_points(self, x: torch.Tensor) -> torch.Tensor:
        """Full point embedding E*x + temporal PE + spatial PE."""
        if x.ndim != 3:
            raise ValueError(f"expected (batch, T, D), got shape {tuple(x.shape)}")
        if x.shape[2] != len(self.layout):
            raise ValueError(
                f"channel count {x.shape[2]} does not match layout ({len(self.layout)})"
            )
        T = x.shape[1]
        s = self.value_embedding(x)
        s = s + self.temporal_pe(T)[None, :, None, :]
        s = s + self.pe_chan[None, None, :, :]
        return s

    @staticmethod
    def _mask_tensors(layer_masks: LayerMasks | list | None, B: int) -> list[torch.Tensor] | None:
        """Normalize per-layer masks to batched bool tensors (B, T_l, D)."""
        if layer_masks is None:
            return None
        masks = layer_masks.masks if isinstance(layer_masks, LayerMasks) else layer_masks
        out = []
        for m in masks:
            t = torch.as_tensor(np.asarray(m), dtype=torch.bool)
            if t.ndim == 2:
                t = t[None].expand(B, *t.shape)
            out.append(t)
        return out

    def encode(
        self,
        x: torch.Tensor,
        layer_masks: LayerMasks | list | None = None,
        rng: RngStream | None = None,
        training: bool = False,
        gates: list | None = None,
    ) -> list[torch.Tensor]:
        """Run the hierarchical encoder, returning every layer's output.

        With ``layer_masks``, layer-1 masked positions carry the mask token
        instead of E*x, and each layer's temporal attention excludes the keys
        masked at its resolution.
        """
        if x.shape[2] != len(self.layout):
            raise ValueError(
                f"channel count {x.shape[2]} does not match layout ({len(self.layout)})"
            )
        B, T, D = x.shape
        masks = self._mask_tensors(layer_masks, B)
        value_emb = self.value_embedding(x)
        if masks is not None:
            value_emb = torch.where(masks[0][..., None], self.mask_token, value_emb)
        pe_t = self.temporal_pe(T)
        pe_s = self.pe_chan
        outputs = []
        z = value_emb
        for l, layer in enumerate(self.encoder_layers):
            if l > 0:
                z = merge_segments(z, self.config.merge_factors[l], self.merges[l])
            km = masks[l] if masks is not None else None
            z = layer(
                z,
                key_mask=km,
                pe_t=pe_t if l == 0 else None,
                pe_s=pe_s if l == 0 else None,
                rng=rng,
                training=training,
                gates=gates,
            )
            outputs.append(z)
        return outputs

    def _corruption_terms(self, x_b: torch.Tensor, plan: CorruptionPlan) -> torch.Tensor:
        """Additive embedding corrections for one sample's corruption plan."""
        T, D = x_b.shape
        token_pts = torch.as_tensor(plan.action == int(Action.MASK_TOKEN))
        extra = token_pts[..., None].to(x_b.dtype) * self.mask_token
        keep_pts = torch.as_tensor(plan.action == int(Action.KEEP))
        extra = extra + keep_pts[..., None].to(x_b.dtype) * self.value_embedding(x_b[None])[0]
        replace = plan.action == int(Action.RANDOM_REPLACE)
        if replace.any():
            ts, ds = np.nonzero(replace)
            donor_vals = x_b[plan.donor_t[ts, ds], plan.donor_d[ts, ds]]
            donor_emb = donor_vals[:, None] * self.value_proj
            scatter = torch.zeros(T, D, self.config.d_model, dtype=x_b.dtype).index_put(
                (torch.as_tensor(ts), torch.as_tensor(ds)), donor_emb
            )
            extra = extra + scatter
        return extra

    def decoder_input(
        self,
        x: torch.Tensor,
        mask: torch.Tensor,
        plan: CorruptionPlan | list[CorruptionPlan] | None = None,
    ) -> torch.Tensor:
        """Decoder embedding: E*((1-M)*x) + PEs, with per-point corruption.

        Without a plan every masked point receives the mask token; with one,
        MASK_TOKEN adds the mask embedding, RANDOM_REPLACE substitutes the
        donor point's value embedding and KEEP restores the point's own E*x.
        A list supplies one plan per batch element.
        """
        B, T, D = x.shape
        mask_t = torch.as_tensor(np.asarray(mask), dtype=torch.bool)
        if mask_t.ndim == 2:
            mask_t = mask_t[None].expand(B, T, D)
        visible = x * (~mask_t).to(x.dtype)
        s = self.value_embedding(visible)
        if plan is None:
            s = s + mask_t[..., None].to(x.dtype) * self.mask_token
        else:
            plans = list(plan) if isinstance(plan, (list, tuple)) else [plan] * B
            if len(plans) != B:
                raise ValueError(f"need one corruption plan per sample, got {len(plans)} for batch {B}")
            s = s + torch.stack([self._corruption_terms(x[b], plans[b]) for b in range(B)])
        s = s + self.temporal_pe(T)[None, :, None, :]
        s = s + self.pe_chan[None, None, :, :]
        return s

    def decode_reconstruct(
        self,
        enc_outputs: list[torch.Tensor],
        x: torch.Tensor,
        mask: torch.Tensor,
        plan: CorruptionPlan | None = None,
        rng: RngStream | None = None,
        training: bool = False,
    ) -> torch.Tensor:
        """Reconstruct the full grid from encoder memories and visible values."""
        z = self.decoder_input(x, mask, plan)
        L = len(enc_outputs)
        for i, block in enumerate(self.decoder_blocks):
            memory = enc_outputs[min(i + 1, L) - 1]
            z = block(z, memory, rng=rng, training=training)
        xhat = self.head(self.ln_out(z)).squeeze(-1)
        if not torch.isfinite(xhat).all():
            raise NumericalError("non-finite decoder output")
        return xhat

    def reconstruct(
        self,
        x: torch.Tensor,
        layer_masks: LayerMasks | list,
        plan: CorruptionPlan | list[CorruptionPlan] | None = None,
        rng: RngStream | None = None,
        training: bool = False,
        gates: list | None = None,
    ) -> torch.Tensor:
        masks = self._mask_tensors(layer_masks, x.shape[0])
        enc = self.encode(x, masks, rng=rng, training=training, gates=gates)
        return self.decode_reconstruct(enc, x, masks[0], plan, rng=rng, training=training)

    def features(self, x: torch.Tensor) -> list[torch.Tensor]:
        """Per-layer encoder outputs with no masking (fine-tuning path)."""
        return self.encode(x, layer_masks=None, training=False)


def init_parameters(model: nn.Module, rng: RngStream) -> None:
    """Deterministic Kaiming-normal initialization from an explicit stream.

    Parameters are visited in sorted name order; matrices get Kaiming fan-in
    scaling, biases start at zero, norm gains at one, and free vectors
    (value projection, mask token, learnable encodings) at N(0, 0.02).
    """
    with torch.no_grad():
        for name, param in sorted(model.named_parameters(), key=lambda kv: kv[0]):
            if param.ndim >= 2 and not name.startswith("pe_"):
                fan_in = param.shape[-1] if param.ndim == 2 else int(np.prod(param.shape[1:]))
                std = math.sqrt(2.0 / fan_in)
                draw = rng.normal(size=tuple(param.shape), scale=std)
            elif name.endswith("bias"):
                draw = np.zeros(tuple(param.shape))
            elif name.endswith("weight") and param.ndim == 1:
                draw = np.ones(tuple(param.shape))
            else:
                draw = rng.normal(size=tuple(param.shape), scale=0.02)
            param.copy_(torch.as_tensor(draw, dtype=param.dtype))


def state_arrays(model: nn.Module) -> dict[str, np.ndarray]:
    """Named parameter/buffer arrays for checkpointing."""
    return {name: t.detach().cpu().numpy() for name, t in model.state_dict().items()}


def load_state_arrays(model: nn.Module, arrays: dict[str, np.ndarray]) -> None:
    state = {name: torch.as_tensor(a) for name, a in arrays.items()}
    model.load_state_dict(state)
