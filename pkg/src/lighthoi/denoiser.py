"""Clean-sample predictor over the (frame, modality) token grid.

Each frame contributes three tokens (body, hand, object). Tokens get a
learned modality embedding and a noise-level embedding, self-attend with
rotary encoding over the frame index, and cross-attend to condition tokens:
one or more label tokens (or the learned null token) plus the object
geometry token.
"""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass, replace
from typing import Callable

import numpy as np
import torch
import torch.nn.functional as F
from torch import nn

from .core import GridLayout
from .schedule import RangeError


@dataclass(frozen=True)
class DenoiserConfig:
    layers: int = 4
    model_dim: int = 128
    ffn_dim: int = 256
    heads: int = 4
    condition_dropout_prob: float = 0.1

    def __post_init__(self):
        if min(self.layers, self.model_dim, self.ffn_dim, self.heads) <= 0:
            raise ValueError("denoiser dimensions must be positive")
        if not 0.0 <= self.condition_dropout_prob < 1.0:
            raise ValueError("condition_dropout_prob must be in [0, 1)")
        if self.model_dim % self.heads or (self.model_dim // self.heads) % 2:
            raise ValueError("model_dim / heads must be an even integer")

    def to_dict(self) -> dict:
        return asdict(self)


PRESETS = {
    "micro": DenoiserConfig(layers=2, model_dim=64, ffn_dim=128, heads=4),
    "desk": DenoiserConfig(),
    "paper": DenoiserConfig(layers=8, model_dim=512, ffn_dim=1024, heads=8),
}


@dataclass
class ConditionBundle:
    """Batched conditioning.

    ``labels`` holds integer task ids (B,) for the built-in label encoder, or
    pre-encoded tokens (B, L, D) from an external text encoder. ``geometry``
    is the (B, G) object feature. ``is_null`` selects the learned null token
    in place of the label tokens; the geometry token is always kept.
    """

    labels: torch.Tensor
    geometry: torch.Tensor
    is_null: torch.Tensor

    @classmethod
    def make(cls, labels, geometry, is_null=None) -> "ConditionBundle":
        labels = torch.as_tensor(labels)
        geometry = torch.as_tensor(np.asarray(geometry), dtype=torch.float32) if not isinstance(geometry, torch.Tensor) else geometry
        if is_null is None:
            is_null = torch.zeros(labels.shape[0], dtype=torch.bool)
        return cls(labels, geometry, torch.as_tensor(is_null, dtype=torch.bool))

    @property
    def batch(self) -> int:
        return int(self.is_null.shape[0])

    def as_null(self) -> "ConditionBundle":
        return replace(self, is_null=torch.ones_like(self.is_null))

    def index(self, idx) -> "ConditionBundle":
        return ConditionBundle(self.labels[idx], self.geometry[idx], self.is_null[idx])


def drop_condition(cond: ConditionBundle, rng: np.random.Generator, p: float) -> ConditionBundle:
    """Independently null each sample's label with probability ``p``."""
    drop = torch.as_tensor(rng.random(cond.batch) < p)
    return replace(cond, is_null=cond.is_null | drop)


def sinusoidal(values: torch.Tensor, dim: int, max_period: float = 10000.0) -> torch.Tensor:
    half = dim // 2
    freqs = torch.exp(-math.log(max_period) * torch.arange(half, dtype=torch.float64) / half)
    args = values.to(torch.float64)[..., None] * freqs
    return torch.cat([torch.cos(args), torch.sin(args)], dim=-1)


def _rope(x: torch.Tensor, pos: torch.Tensor) -> torch.Tensor:
    # x (B, H, N, Dh); rotate channel pairs by pos * theta_i
    dh = x.shape[-1]
    theta = 1.0 / (10000 ** (torch.arange(0, dh, 2, dtype=torch.float64) / dh))
    ang = pos.to(torch.float64)[:, None] * theta[None, :]
    cos = torch.cos(ang).to(x.dtype)
    sin = torch.sin(ang).to(x.dtype)
    x1, x2 = x[..., 0::2], x[..., 1::2]
    out = torch.stack([x1 * cos - x2 * sin, x1 * sin + x2 * cos], dim=-1)
    return out.flatten(-2)


class DecoderLayer(nn.Module):
    def __init__(self, dim: int, heads: int, ffn: int):
        super().__init__()
        self.heads = heads
        self.norm1 = nn.LayerNorm(dim)
        self.qkv = nn.Linear(dim, 3 * dim)
        self.proj = nn.Linear(dim, dim)
        self.norm2 = nn.LayerNorm(dim)
        self.q_cross = nn.Linear(dim, dim)
        self.kv_cross = nn.Linear(dim, 2 * dim)
        self.proj_cross = nn.Linear(dim, dim)
        self.norm3 = nn.LayerNorm(dim)
        self.ffn = nn.Sequential(nn.Linear(dim, ffn), nn.GELU(), nn.Linear(ffn, dim))

    def _split(self, x):
        B, N, D = x.shape
        return x.view(B, N, self.heads, D // self.heads).transpose(1, 2)

    def forward(self, x, pos, memory):
        B, N, D = x.shape
        q, k, v = self.qkv(self.norm1(x)).chunk(3, dim=-1)
        q, k, v = self._split(q), self._split(k), self._split(v)
        q, k = _rope(q, pos), _rope(k, pos)
        a = F.scaled_dot_product_attention(q, k, v)
        x = x + self.proj(a.transpose(1, 2).reshape(B, N, D))

        q = self._split(self.q_cross(self.norm2(x)))
        k, v = self.kv_cross(memory).chunk(2, dim=-1)
        a = F.scaled_dot_product_attention(q, self._split(k), self._split(v))
        x = x + self.proj_cross(a.transpose(1, 2).reshape(B, N, D))
        return x + self.ffn(self.norm3(x))


class Denoiser(nn.Module):
    def __init__(
        self,
        cfg: DenoiserConfig,
        layout: GridLayout,
        n_labels: int,
        geometry_dim: int,
        K: int,
        label_encoder: Callable[[torch.Tensor], torch.Tensor] | None = None,
    ):
        super().__init__()
        self.cfg = cfg
        self.layout = layout
        self.K = K
        D = cfg.model_dim
        self.widths = layout.widths
        self.in_proj = nn.ModuleList(nn.Linear(w, D) for w in self.widths)
        self.out_proj = nn.ModuleList(nn.Linear(D, w) for w in self.widths)
        self.modal_emb = nn.Parameter(torch.randn(3, D) * 0.5)
        self.level_mlp = nn.Sequential(nn.Linear(D, D), nn.SiLU(), nn.Linear(D, D))
        self.label_emb = nn.Embedding(max(n_labels, 1), D)
        self.null_token = nn.Parameter(torch.randn(D) * 0.02)
        self.geom_mlp = nn.Sequential(nn.Linear(geometry_dim, D), nn.SiLU(), nn.Linear(D, D))
        self.layers = nn.ModuleList(DecoderLayer(D, cfg.heads, cfg.ffn_dim) for _ in range(cfg.layers))
        self.norm = nn.LayerNorm(D)
        # pluggable text encoder hook; must map labels -> (B, L, D)
        self.label_encoder = label_encoder

    # -- embeddings --------------------------------------------------------

    def embed_levels(self, lam: torch.Tensor, T: int) -> torch.Tensor:
        """(B, 3) integer levels -> (B, T, 3, D) additive embedding."""
        lam = torch.as_tensor(lam)
        if lam.dim() == 1:
            lam = lam[None]
        if torch.any(lam < 0) or torch.any(lam > self.K):
            raise RangeError(f"noise levels outside [0, {self.K}]")
        dtype = self.modal_emb.dtype
        e = self.level_mlp(sinusoidal(lam, self.cfg.model_dim).to(dtype))
        return e[:, None, :, :].expand(-1, T, -1, -1)

    def condition_tokens(self, cond: ConditionBundle) -> torch.Tensor:
        dtype = self.modal_emb.dtype
        if self.label_encoder is not None:
            tokens = self.label_encoder(cond.labels).to(dtype)
        elif cond.labels.dim() == 3:
            tokens = cond.labels.to(dtype)
        else:
            tokens = self.label_emb(cond.labels.long())[:, None, :]
        null = self.null_token.to(dtype).expand_as(tokens)
        tokens = torch.where(cond.is_null[:, None, None], null, tokens)
        geom = self.geom_mlp(cond.geometry.to(dtype))[:, None, :]
        return torch.cat([tokens, geom], dim=1)

    # -- forward -----------------------------------------------------------

    def forward(self, x: torch.Tensor, lam, cond: ConditionBundle) -> torch.Tensor:
        """Predict the clean grid from a noisy (B, T, C) grid at levels ``lam``."""
        squeeze = x.dim() == 2
        if squeeze:
            x = x[None]
        B, T, C = x.shape
        if C != self.layout.n_channels:
            from .core import ShapeError

            raise ShapeError(f"grid has {C} channels, model expects {self.layout.n_channels}")
        lam = torch.as_tensor(lam)
        if lam.dim() == 1:
            lam = lam[None].expand(B, 3)
        parts = torch.split(x, list(self.widths), dim=-1)
        tok = torch.stack([p(c) for p, c in zip(self.in_proj, parts)], dim=2)  # (B, T, 3, D)
        tok = tok + self.modal_emb + self.embed_levels(lam, T)
        h = tok.reshape(B, T * 3, -1)
        pos = torch.arange(T).repeat_interleave(3)
        memory = self.condition_tokens(cond)
        for layer in self.layers:
            h = layer(h, pos, memory)
        h = self.norm(h).view(B, T, 3, -1)
        out = torch.cat([proj(h[:, :, m]) for m, proj in enumerate(self.out_proj)], dim=-1)
        return out[0] if squeeze else out
