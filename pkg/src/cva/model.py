"""Grounding network: context-enhanced encoder, multimodal encoder, span/saliency decoder."""
from __future__ import annotations

from dataclasses import asdict, dataclass, field
from typing import List, Sequence, Tuple

import numpy as np
import torch
import torch.nn.functional as F
from torch import nn

from .data import FeatureSequence, MomentSpan, TextQueryRecord
from .numerics import (
    MLP, ConfigError, Conv1d, LayerNorm, MultiHeadAttention, sinusoidal_encoding,
)


@dataclass
class CteConfig:
    windows: List[int] = field(default_factory=lambda: [5, 15, 75])
    n_queries: int = 100
    omega_raw_init: float = 0.0

    @property
    def n_blocks(self) -> int:
        return len(self.windows)

    def validate(self):
        if not self.windows or any(w < 1 for w in self.windows):
            raise ConfigError(f"CTE window sizes must be >= 1, got {self.windows}")
        if self.n_queries < 1:
            raise ConfigError("CTE needs at least one learnable query")


@dataclass
class ModelConfig:
    d_v: int = 16
    d_t: int = 16
    dim: int = 64
    heads: int = 4
    cte: CteConfig = field(default_factory=CteConfig)
    use_cte: bool = True
    dec_layers: int = 2
    dec_queries: int = 10
    contrast_dim: int = 64
    conv_width: int = 3

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        d = dict(d)
        if isinstance(d.get("cte"), dict):
            d["cte"] = CteConfig(**d["cte"])
        return cls(**d)

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass
class ModelOutput:
    spans: torch.Tensor  # [B, M_dec, 2] (center, width) in (0, 1)
    logits: torch.Tensor  # [B, M_dec] confidence logits
    saliency: torch.Tensor  # [B, L]
    f_m: torch.Tensor  # [B, L, D]

    @property
    def scores(self) -> torch.Tensor:
        return torch.sigmoid(self.logits)

    def ranked(self, b: int = 0) -> List[Tuple[float, float, float]]:
        """(start, end, score) in normalized time, best first."""
        c, w = self.spans[b, :, 0].tolist(), self.spans[b, :, 1].tolist()
        s = self.scores[b].tolist()
        preds = [(ci - wi / 2, ci + wi / 2, si) for ci, wi, si in zip(c, w, s)]
        return sorted(preds, key=lambda p: -p[2])


def window_mask(length: int, window: int) -> torch.Tensor:
    """Block-diagonal mask of consecutive windows; the last window may be shorter."""
    if window < 1:
        raise ConfigError(f"window size must be >= 1, got {window}")
    wid = torch.arange(length) // window
    return wid[:, None] == wid[None, :]


def windowed_self_attention(x: torch.Tensor, window: int, attn: MultiHeadAttention) -> torch.Tensor:
    mask = None if window >= x.shape[-2] else window_mask(x.shape[-2], window)
    return attn(x, x, x, mask=mask)


class CteBlock(nn.Module):
    def __init__(self, dim: int, heads: int):
        super().__init__()
        self.video_attn = MultiHeadAttention(dim, heads)
        self.query_attn = MultiHeadAttention(dim, heads)
        self.video_from_query = MultiHeadAttention(dim, heads)
        self.query_from_video = MultiHeadAttention(dim, heads)
        self.video_mlp = MLP([dim, dim, dim])
        self.query_mlp = MLP([dim, dim, dim])
        self.video_norm = LayerNorm(dim)
        self.query_norm = LayerNorm(dim)

    def forward(self, f_prev, q_prev, window: int):
        f1 = windowed_self_attention(f_prev, window, self.video_attn)
        q1 = self.query_attn(q_prev, q_prev, q_prev)
        f_hat = self.video_from_query(f1, q1, q1)
        q_hat = self.query_from_video(q1, f1, f1)
        # residual is added after the norm, i.e. Norm(MLP(x)) + prev
        f_next = self.video_norm(self.video_mlp(f_hat)) + f_prev
        q_next = self.query_norm(self.query_mlp(q_hat)) + q_prev
        return f_next, q_next


class ContextEnhancedEncoder(nn.Module):
    def __init__(self, dim: int, heads: int, cfg: CteConfig):
        super().__init__()
        cfg.validate()
        self.cfg = cfg
        self.queries = nn.Parameter(torch.randn(cfg.n_queries, dim) * 0.1)
        self.blocks = nn.ModuleList(CteBlock(dim, heads) for _ in cfg.windows)
        self.agg_mlp = MLP([cfg.n_blocks * dim, dim, dim])
        self.agg_norm = LayerNorm(dim)
        self.omega_raw = nn.Parameter(torch.tensor(float(cfg.omega_raw_init)))

    @property
    def omega(self) -> torch.Tensor:
        return torch.sigmoid(self.omega_raw)

    def run_blocks(self, f_v):
        f = f_v
        q = self.queries.expand(*f_v.shape[:-2], *self.queries.shape)
        outs = []
        for block, w in zip(self.blocks, self.cfg.windows):
            f, q = block(f, q, w)
            outs.append(f)
        return torch.cat(outs, dim=-1)

    def forward(self, f_v):
        agg = self.agg_norm(self.agg_mlp(self.run_blocks(f_v)))
        w = self.omega
        return w * f_v + (1 - w) * agg


class AttentionLayer(nn.Module):
    """Post-norm attention sublayer followed by a post-norm FFN sublayer."""

    def __init__(self, dim: int, heads: int):
        super().__init__()
        self.attn = MultiHeadAttention(dim, heads)
        self.norm1 = LayerNorm(dim)
        self.ffn = MLP([dim, 2 * dim, dim])
        self.norm2 = LayerNorm(dim)

    def forward(self, x, memory=None, key_pos=None):
        mem = x if memory is None else memory
        keys = mem if key_pos is None else mem + key_pos
        x = self.norm1(x + self.attn(x, keys, mem))
        return self.norm2(x + self.ffn(x))


class MultimodalEncoder(nn.Module):
    """cross-attention to text -> self-attention -> 1D conv -> self-attention."""

    def __init__(self, dim: int, heads: int, conv_width: int = 3):
        super().__init__()
        self.cross = AttentionLayer(dim, heads)
        self.self1 = AttentionLayer(dim, heads)
        self.conv = Conv1d(dim, dim, conv_width)
        self.conv_norm = LayerNorm(dim)
        self.self2 = AttentionLayer(dim, heads)

    def forward(self, f_cte, f_t):
        x = self.cross(f_cte, memory=f_t)
        x = self.self1(x)
        x = self.conv_norm(x + F.relu(self.conv(x)))
        return self.self2(x)


class DecoderLayer(nn.Module):
    def __init__(self, dim: int, heads: int):
        super().__init__()
        self.self_attn = MultiHeadAttention(dim, heads)
        self.norm1 = LayerNorm(dim)
        self.cross = AttentionLayer(dim, heads)

    def forward(self, tgt, memory, memory_pos):
        tgt = self.norm1(tgt + self.self_attn(tgt, tgt, tgt))
        return self.cross(tgt, memory=memory, key_pos=memory_pos)


class SpanDecoder(nn.Module):
    def __init__(self, dim: int, heads: int, n_layers: int, n_queries: int):
        super().__init__()
        self.queries = nn.Parameter(torch.randn(n_queries, dim) * 0.1)
        self.layers = nn.ModuleList(DecoderLayer(dim, heads) for _ in range(n_layers))
        self.span_head = MLP([dim, dim, dim, 2])
        self.conf_head = nn.Linear(dim, 1)
        self.saliency_head = nn.Linear(dim, 1)

    def forward(self, f_m, memory_pos):
        tgt = self.queries.expand(*f_m.shape[:-2], *self.queries.shape)
        for layer in self.layers:
            tgt = layer(tgt, f_m, memory_pos)
        spans = torch.sigmoid(self.span_head(tgt))
        logits = self.conf_head(tgt).squeeze(-1)
        saliency = self.saliency_head(f_m).squeeze(-1)
        return ModelOutput(spans, logits, saliency, f_m)


class GroundingModel(nn.Module):
    def __init__(self, cfg: ModelConfig):
        super().__init__()
        if cfg.dim % cfg.heads:
            raise ConfigError(f"model dim {cfg.dim} not divisible by {cfg.heads} heads")
        self.cfg = cfg
        self.video_proj = nn.Linear(cfg.d_v, cfg.dim)
        self.video_norm = LayerNorm(cfg.dim)
        self.text_proj = nn.Linear(cfg.d_t, cfg.dim)
        self.text_norm = LayerNorm(cfg.dim)
        self.cte = ContextEnhancedEncoder(cfg.dim, cfg.heads, cfg.cte)
        self.encoder = MultimodalEncoder(cfg.dim, cfg.heads, cfg.conv_width)
        self.decoder = SpanDecoder(cfg.dim, cfg.heads, cfg.dec_layers, cfg.dec_queries)
        self.contrastive_head = MLP([cfg.dim, cfg.dim, cfg.contrast_dim])

    def positional(self, length: int) -> torch.Tensor:
        p = next(self.parameters())
        return sinusoidal_encoding(length, self.cfg.dim, dtype=p.dtype)

    def forward(self, video: torch.Tensor, text: torch.Tensor) -> ModelOutput:
        """``video`` is ``[B, L, d_v]`` and ``text`` is ``[B, N_t, d_t]``."""
        if video.shape[-1] != self.cfg.d_v or text.shape[-1] != self.cfg.d_t:
            raise ConfigError(
                f"feature dims {video.shape[-1]}/{text.shape[-1]} do not match model d_v={self.cfg.d_v}, d_t={self.cfg.d_t}"
            )
        pe = self.positional(video.shape[-2])
        f_v = self.video_norm(self.video_proj(video)) + pe
        f_t = self.text_norm(self.text_proj(text))
        f_cte = self.cte(f_v) if self.cfg.use_cte else f_v
        f_m = self.encoder(f_cte, f_t)
        return self.decoder(f_m, pe)

    def forward_record(self, video: FeatureSequence, query: TextQueryRecord) -> ModelOutput:
        dtype = next(self.parameters()).dtype
        v = torch.as_tensor(video.features, dtype=dtype)[None]
        t = torch.as_tensor(query.token_features, dtype=dtype)[None]
        return self(v, t)


def build_model(cfg: ModelConfig, seed: int = 0) -> GroundingModel:
    gen_state = torch.random.get_rng_state()
    torch.manual_seed(seed)
    try:
        model = GroundingModel(cfg)
    finally:
        torch.random.set_rng_state(gen_state)
    return model


def apply_target_mask(video: FeatureSequence, gt_spans: Sequence[MomentSpan], mode: str,
                      rng: np.random.Generator) -> FeatureSequence:
    """Replace GT clips by zeros or by Gaussian noise matching the video's per-dim statistics."""
    if mode not in ("zero", "random"):
        raise ValueError(f"unknown mask mode {mode!r}")
    out = video.features.copy()
    idx = sorted({i for s in gt_spans for i in s.indices()})
    if mode == "zero":
        out[idx] = 0.0
    else:
        mu = video.features.mean(axis=0)
        sd = video.features.std(axis=0)
        out[idx] = (mu + sd * rng.standard_normal((len(idx), out.shape[1]))).astype(out.dtype)
    return FeatureSequence(video.video_id, out, video.clip_seconds)
