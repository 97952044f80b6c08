"""Vision-transformer encoder: RMSNorm, QK-normalized grouped-query attention,
SwiGLU feed-forward, windowed local stage with [CLS]-guided pooling, and sparse
(visible-token-only) forward passes.

All token tensors carry a leading batch dimension.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, replace

import torch
import torch.nn as nn
import torch.nn.functional as F

from .config import BackboneConfig, GroupedAttention, WindowedAttention
from .errors import ConfigError, UsageError


@dataclass
class TokenGrid:
    """Token embeddings laid out on a 2D grid, plus an optional [CLS] slot.

    ``tokens`` is ``(B, n, D)``. A dense grid has ``n == grid_h * grid_w``;
    a sparse grid sets ``index_map`` (``(B, n)`` long) to the row-major grid
    position each row came from.
    """

    tokens: torch.Tensor
    grid_h: int
    grid_w: int
    cls: torch.Tensor | None = None
    index_map: torch.Tensor | None = None

    def __post_init__(self):
        n = self.tokens.shape[1]
        if self.index_map is None:
            if n != self.grid_h * self.grid_w:
                raise UsageError(f"dense grid has {n} rows, expected {self.grid_h * self.grid_w}")
        else:
            if self.index_map.shape != self.tokens.shape[:2]:
                raise UsageError("index_map must be (B, n)")

    @property
    def is_sparse(self) -> bool:
        return self.index_map is not None

    @property
    def num_tokens(self) -> int:
        return self.tokens.shape[1]

    def check_index_map(self) -> None:
        if self.index_map is None:
            return
        full = self.grid_h * self.grid_w
        if self.index_map.numel() and (self.index_map.min() < 0 or self.index_map.max() >= full):
            raise UsageError("index_map out of range")
        for row in self.index_map:
            if row.unique().numel() != row.numel():
                raise UsageError("index_map entries must be unique")

    def with_tokens(self, tokens: torch.Tensor, cls: torch.Tensor | None = None) -> "TokenGrid":
        return replace(self, tokens=tokens, cls=self.cls if cls is None else cls)


def rms_norm(x: torch.Tensor, gain: torch.Tensor, eps: float = 1e-6) -> torch.Tensor:
    return gain * x * torch.rsqrt(x.pow(2).mean(dim=-1, keepdim=True) + eps)


class RMSNorm(nn.Module):
    def __init__(self, dim: int, eps: float = 1e-6):
        super().__init__()
        self.eps = eps
        self.weight = nn.Parameter(torch.ones(dim))

    def forward(self, x):
        return rms_norm(x, self.weight, self.eps)


class PatchEmbed(nn.Module):
    """Linear projection of non-overlapping ``p x p`` patches."""

    def __init__(self, cfg: BackboneConfig):
        super().__init__()
        self.patch_size = cfg.patch_size
        self.proj = nn.Conv2d(cfg.in_chans, cfg.hidden_size, cfg.patch_size, stride=cfg.patch_size)

    def forward(self, images: torch.Tensor) -> TokenGrid:
        p = self.patch_size
        if images.ndim != 4 or images.shape[1] != self.proj.in_channels:
            raise ConfigError(f"expected (B, {self.proj.in_channels}, H, W) images, got {tuple(images.shape)}")
        H, W = images.shape[-2:]
        if H % p or W % p:
            raise ConfigError(f"image {H}x{W} not divisible by patch size {p}")
        x = self.proj(images)
        gh, gw = x.shape[-2:]
        return TokenGrid(x.flatten(2).transpose(1, 2), gh, gw)


def patch_embed(images: torch.Tensor, embed: PatchEmbed, cfg: BackboneConfig) -> TokenGrid:
    if images.shape[-2:] != (cfg.image_height, cfg.image_width):
        raise ConfigError(f"image size {tuple(images.shape[-2:])} does not match config "
                          f"{(cfg.image_height, cfg.image_width)}")
    return embed(images)


def add_positional(grid: TokenGrid, pos_table: torch.Tensor) -> TokenGrid:
    full = grid.grid_h * grid.grid_w
    if pos_table.shape[0] != full:
        raise ConfigError(f"positional table has {pos_table.shape[0]} rows, grid needs {full}")
    if grid.index_map is None:
        return grid.with_tokens(grid.tokens + pos_table.unsqueeze(0))
    return grid.with_tokens(grid.tokens + pos_table[grid.index_map])


def grouped_attention(q: torch.Tensor, k: torch.Tensor, v: torch.Tensor) -> torch.Tensor:
    """Softmax attention where each key/value head serves ``h // g`` query heads.

    ``q`` is ``(B, h, T, d)``, ``k`` and ``v`` are ``(B, g, T, d)``. Returns the
    concatenated heads, ``(B, T, h * d)``.
    """
    h, g = q.shape[1], k.shape[1]
    if h % g:
        raise ConfigError(f"{h} query heads cannot be split over {g} groups")
    if g != h:
        k = k.repeat_interleave(h // g, dim=1)
        v = v.repeat_interleave(h // g, dim=1)
    scale = 1.0 / math.sqrt(q.shape[-1])
    attn = torch.softmax((q @ k.transpose(-2, -1)) * scale, dim=-1)
    out = attn @ v
    B, _, T, d = out.shape
    return out.transpose(1, 2).reshape(B, T, h * d)


class Attention(nn.Module):
    def __init__(self, dim: int, num_heads: int, kv_groups: int | None = None, eps: float = 1e-6):
        super().__init__()
        kv_groups = num_heads if kv_groups is None else kv_groups
        if num_heads % kv_groups:
            raise ConfigError("num_heads must be divisible by kv_groups")
        self.num_heads = num_heads
        self.kv_groups = kv_groups
        self.head_dim = dim // num_heads
        self.q_proj = nn.Linear(dim, dim)
        self.k_proj = nn.Linear(dim, kv_groups * self.head_dim)
        self.v_proj = nn.Linear(dim, kv_groups * self.head_dim)
        self.out_proj = nn.Linear(dim, dim)
        self.q_norm = RMSNorm(self.head_dim, eps)
        self.k_norm = RMSNorm(self.head_dim, eps)

    def project_qkv(self, x):
        B, T, _ = x.shape
        d = self.head_dim
        q = self.q_proj(x).view(B, T, self.num_heads, d).transpose(1, 2)
        k = self.k_proj(x).view(B, T, self.kv_groups, d).transpose(1, 2)
        v = self.v_proj(x).view(B, T, self.kv_groups, d).transpose(1, 2)
        return self.q_norm(q), self.k_norm(k), v

    def attention_weights(self, x):
        q, k, _ = self.project_qkv(x)
        k = k.repeat_interleave(self.num_heads // self.kv_groups, dim=1)
        return torch.softmax(q @ k.transpose(-2, -1) / math.sqrt(self.head_dim), dim=-1)

    def forward(self, x):
        q, k, v = self.project_qkv(x)
        return self.out_proj(grouped_attention(q, k, v))


def swiglu(x, w_gate, w_up, w_down):
    """``w_down(silu(w_gate x) * w_up x)`` with weights in ``nn.Linear`` layout."""
    return F.linear(F.silu(F.linear(x, w_gate)) * F.linear(x, w_up), w_down)


class SwiGLUFFN(nn.Module):
    def __init__(self, dim: int, hidden: int):
        super().__init__()
        self.w_gate = nn.Linear(dim, hidden, bias=False)
        self.w_up = nn.Linear(dim, hidden, bias=False)
        self.w_down = nn.Linear(hidden, dim, bias=False)

    def forward(self, x):
        return swiglu(x, self.w_gate.weight, self.w_up.weight, self.w_down.weight)


class Block(nn.Module):
    """Pre-norm transformer block."""

    def __init__(self, dim: int, num_heads: int, ffn_hidden: int, kv_groups: int | None = None,
                 eps: float = 1e-6, window_side: int | None = None):
        super().__init__()
        self.window_side = window_side
        self.norm1 = RMSNorm(dim, eps)
        self.attn = Attention(dim, num_heads, kv_groups, eps)
        self.norm2 = RMSNorm(dim, eps)
        self.ffn = SwiGLUFFN(dim, ffn_hidden)

    def forward(self, x):
        x = x + self.attn(self.norm1(x))
        return x + self.ffn(self.norm2(x))


def partition_windows(tokens: torch.Tensor, grid_h: int, grid_w: int, side: int) -> torch.Tensor:
    """``(B, gh*gw, D)`` -> ``(B * nW, side*side, D)``, windows and their tokens row-major."""
    if grid_h % side or grid_w % side:
        raise ConfigError(f"grid {grid_h}x{grid_w} not divisible by window side {side}")
    B, _, D = tokens.shape
    x = tokens.view(B, grid_h // side, side, grid_w // side, side, D)
    return x.permute(0, 1, 3, 2, 4, 5).reshape(-1, side * side, D)


def unpartition_windows(windows: torch.Tensor, batch: int, grid_h: int, grid_w: int, side: int) -> torch.Tensor:
    D = windows.shape[-1]
    x = windows.view(batch, grid_h // side, grid_w // side, side, side, D)
    return x.permute(0, 1, 3, 2, 4, 5).reshape(batch, grid_h * grid_w, D)


def window_partition(grid: TokenGrid, window_side: int) -> list[TokenGrid]:
    if grid.is_sparse:
        raise UsageError("window partition needs a dense grid")
    B = grid.tokens.shape[0]
    wins = partition_windows(grid.tokens, grid.grid_h, grid.grid_w, window_side)
    n_win = wins.shape[0] // B
    wins = wins.view(B, n_win, window_side * window_side, -1)
    return [TokenGrid(wins[:, i], window_side, window_side) for i in range(n_win)]


def window_unpartition(windows: list[TokenGrid], grid_h: int, grid_w: int) -> TokenGrid:
    side = windows[0].grid_h
    stacked = torch.stack([w.tokens for w in windows], dim=1)
    B = stacked.shape[0]
    tokens = unpartition_windows(stacked.flatten(0, 1), B, grid_h, grid_w, side)
    return TokenGrid(tokens, grid_h, grid_w)


def cls_guided_pool(window: torch.Tensor, cls: torch.Tensor) -> torch.Tensor:
    """Similarity-weighted average of a window's tokens.

    ``window`` is ``(..., w, D)``, ``cls`` is ``(..., D)``; the weights are a
    softmax over ``token . cls / sqrt(D)``.
    """
    D = window.shape[-1]
    logits = (window @ cls.unsqueeze(-1)).squeeze(-1) / math.sqrt(D)
    alpha = torch.softmax(logits, dim=-1)
    return (alpha.unsqueeze(-1) * window).sum(dim=-2)


@dataclass
class BackboneOutput:
    cls: torch.Tensor | None
    patch_features: TokenGrid


class Backbone(nn.Module):
    """Encoder following a :class:`BackboneConfig`.

    ``encode(images, mask)`` is the usual entry point. For the flat layout the
    mask drops tokens before the first block; for the windowed layout the
    local stage always runs dense and the mask selects pooled tokens.
    """

    def __init__(self, cfg: BackboneConfig):
        super().__init__()
        cfg.validate()
        self.cfg = cfg
        D = cfg.hidden_size
        self.patch_embed = PatchEmbed(cfg)
        self.pos_embed = nn.Parameter(torch.zeros(cfg.num_tokens, D))
        if cfg.use_cls:
            self.cls_token = nn.Parameter(torch.zeros(D))
            self.cls_pos = nn.Parameter(torch.zeros(D))
        blocks = []
        for kind in cfg.layout.layers:
            groups = kind.groups if isinstance(kind, GroupedAttention) else None
            side = kind.window_side if isinstance(kind, WindowedAttention) else None
            blocks.append(Block(D, cfg.num_heads, cfg.ffn_hidden, groups, cfg.eps, side))
        self.blocks = nn.ModuleList(blocks)
        self.norm = RMSNorm(D, cfg.eps)
        self.reset_parameters()

    def reset_parameters(self):
        nn.init.trunc_normal_(self.pos_embed, std=0.02)
        if self.cfg.use_cls:
            nn.init.trunc_normal_(self.cls_token, std=0.02)
            nn.init.trunc_normal_(self.cls_pos, std=0.02)
        for m in self.modules():
            if isinstance(m, nn.Linear):
                nn.init.trunc_normal_(m.weight, std=0.02)
                if m.bias is not None:
                    nn.init.zeros_(m.bias)
        w = self.patch_embed.proj.weight
        nn.init.xavier_uniform_(w.view(w.shape[0], -1))

    # -- positional table for grids smaller than the configured one (local crops)
    def pos_table_for(self, grid_h: int, grid_w: int) -> torch.Tensor:
        cfg = self.cfg
        if (grid_h, grid_w) == (cfg.grid_h, cfg.grid_w):
            return self.pos_embed
        if grid_h > cfg.grid_h or grid_w > cfg.grid_w:
            raise ConfigError(f"grid {grid_h}x{grid_w} exceeds positional table {cfg.grid_h}x{cfg.grid_w}")
        table = self.pos_embed.view(cfg.grid_h, cfg.grid_w, -1)[:grid_h, :grid_w]
        return table.reshape(grid_h * grid_w, -1)

    def embed(self, images: torch.Tensor) -> TokenGrid:
        grid = self.patch_embed(images)
        grid = add_positional(grid, self.pos_table_for(grid.grid_h, grid.grid_w))
        if self.cfg.use_cls:
            cls = (self.cls_token + self.cls_pos).expand(grid.tokens.shape[0], -1)
            grid = grid.with_tokens(grid.tokens, cls)
        return grid

    def _run_global(self, blocks, grid: TokenGrid) -> TokenGrid:
        x = grid.tokens
        has_cls = grid.cls is not None
        if has_cls:
            x = torch.cat([grid.cls.unsqueeze(1), x], dim=1)
        for blk in blocks:
            x = blk(x)
        if has_cls:
            return grid.with_tokens(x[:, 1:], x[:, 0])
        return grid.with_tokens(x)

    def _run_local(self, blocks, grid: TokenGrid) -> TokenGrid:
        side = self.cfg.layout.window_side
        B = grid.tokens.shape[0]
        x = partition_windows(grid.tokens, grid.grid_h, grid.grid_w, side)
        for blk in blocks:
            x = blk(x)
        return grid.with_tokens(unpartition_windows(x, B, grid.grid_h, grid.grid_w, side))

    def pool(self, grid: TokenGrid) -> TokenGrid:
        side = self.cfg.layout.window_side
        B = grid.tokens.shape[0]
        wins = partition_windows(grid.tokens, grid.grid_h, grid.grid_w, side)
        n_win = wins.shape[0] // B
        cls = grid.cls.unsqueeze(1).expand(B, n_win, -1).reshape(B * n_win, -1)
        pooled = cls_guided_pool(wins, cls).view(B, n_win, -1)
        return TokenGrid(pooled, grid.grid_h // side, grid.grid_w // side, cls=grid.cls)

    def local_stage(self, grid: TokenGrid) -> TokenGrid:
        """Windowed blocks followed by pooling; identity for the flat layout."""
        k = self.cfg.layout.local_layers
        if k == 0:
            return grid
        if grid.is_sparse:
            raise UsageError("the windowed local stage needs a dense grid; mask after pooling")
        grid = self._run_local(self.blocks[:k], grid)
        return self.pool(grid)

    def global_stage(self, grid: TokenGrid) -> TokenGrid:
        k = self.cfg.layout.local_layers
        grid = self._run_global(self.blocks[k:], grid)
        tokens = self.norm(grid.tokens)
        cls = self.norm(grid.cls) if grid.cls is not None else None
        return replace(grid, tokens=tokens, cls=cls)

    def forward_grid(self, grid: TokenGrid) -> BackboneOutput:
        """Run all blocks on an embedded grid (dense, or sparse for the flat layout)."""
        grid = self.local_stage(grid)
        out = self.global_stage(grid)
        return BackboneOutput(out.cls, out)

    def encode(self, images: torch.Tensor, mask=None) -> BackboneOutput:
        from .masking import gather_visible

        grid = self.embed(images)
        if mask is not None and not self.cfg.layout.is_windowed:
            grid = gather_visible(grid, mask)
        grid = self.local_stage(grid)
        if mask is not None and self.cfg.layout.is_windowed:
            grid = gather_visible(grid, mask)
        out = self.global_stage(grid)
        return BackboneOutput(out.cls, out)

    def forward(self, images: torch.Tensor, mask=None) -> BackboneOutput:
        return self.encode(images, mask)

    def feature_map(self, images: torch.Tensor) -> torch.Tensor:
        """Dense patch features as a ``(B, D, gh, gw)`` map."""
        out = self.encode(images).patch_features
        B, _, D = out.tokens.shape
        return out.tokens.transpose(1, 2).reshape(B, D, out.grid_h, out.grid_w)


def forward(grid: TokenGrid, cfg: BackboneConfig, weights: Backbone) -> BackboneOutput:
    """Functional entry point: run ``weights`` (a :class:`Backbone`) on an embedded grid."""
    if weights.cfg is not cfg and weights.cfg != cfg:
        raise ConfigError("weights were built for a different config")
    return weights.forward_grid(grid)
