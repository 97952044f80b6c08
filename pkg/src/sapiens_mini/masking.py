"""Mixed blockwise/patchwise mask sampling and visible/masked token bookkeeping."""
from __future__ import annotations

import math
import re
from dataclasses import dataclass
from typing import Sequence

import numpy as np
import torch

from .backbone import TokenGrid
from .errors import ConfigError, DegenerateInputError, UsageError


@dataclass
class MaskSpec:
    ratio: float = 0.75
    blockwise_prob: float = 0.4
    block_side_range: tuple = (2, 8)

    def __post_init__(self):
        if not 0 <= self.ratio < 1:
            raise ConfigError("mask ratio must lie in [0, 1)")
        if not 0 <= self.blockwise_prob <= 1:
            raise ConfigError("blockwise_prob must lie in [0, 1]")
        lo, hi = self.block_side_range
        if lo < 1 or hi < lo:
            raise ConfigError("block_side_range must satisfy 1 <= min <= max")


@dataclass
class Mask:
    """``bits[p] == True`` marks token ``p`` (row-major) as masked."""

    bits: np.ndarray
    grid_h: int
    grid_w: int

    def __post_init__(self):
        self.bits = np.asarray(self.bits, dtype=bool).reshape(-1)
        if self.bits.size != self.grid_h * self.grid_w:
            raise UsageError("mask size does not match its grid")

    @property
    def num_masked(self) -> int:
        return int(self.bits.sum())

    @property
    def masked_indices(self) -> np.ndarray:
        return np.flatnonzero(self.bits)

    @property
    def visible_indices(self) -> np.ndarray:
        return np.flatnonzero(~self.bits)

    def as_grid(self) -> np.ndarray:
        return self.bits.reshape(self.grid_h, self.grid_w)

    def to_rle(self) -> str:
        """``"HxW:first_bit:run,run,..."`` run-length text form."""
        bits = self.bits.astype(np.int8)
        if bits.size == 0:
            return f"{self.grid_h}x{self.grid_w}:0:"
        change = np.flatnonzero(np.diff(bits)) + 1
        bounds = np.concatenate([[0], change, [bits.size]])
        runs = np.diff(bounds)
        return f"{self.grid_h}x{self.grid_w}:{int(bits[0])}:" + ",".join(str(int(r)) for r in runs)

    @classmethod
    def from_rle(cls, text: str) -> "Mask":
        m = re.fullmatch(r"(\d+)x(\d+):([01]):([\d,]*)", text.strip())
        if m is None:
            raise ValueError(f"bad mask RLE {text!r}")
        h, w, first = int(m.group(1)), int(m.group(2)), int(m.group(3))
        runs = [int(r) for r in m.group(4).split(",") if r]
        bits = np.zeros(sum(runs), dtype=bool)
        pos, val = 0, bool(first)
        for r in runs:
            bits[pos:pos + r] = val
            pos += r
            val = not val
        return cls(bits, h, w)


def mask_count(grid_h: int, grid_w: int, ratio: float) -> int:
    # small epsilon guards products like 0.75 * 3072 landing a hair below an integer
    return int(math.floor(ratio * grid_h * grid_w + 1e-9))


def sample_mask(grid_h: int, grid_w: int, spec: MaskSpec, rng: np.random.Generator) -> Mask:
    n = grid_h * grid_w
    target = mask_count(grid_h, grid_w, spec.ratio)
    if spec.ratio > 0 and target < 1:
        raise DegenerateInputError(f"ratio {spec.ratio} masks no token of a {grid_h}x{grid_w} grid")
    bits = np.zeros((grid_h, grid_w), dtype=bool)
    if target == 0:
        return Mask(bits.reshape(-1), grid_h, grid_w)
    if rng.random() < spec.blockwise_prob:
        lo, hi = spec.block_side_range
        while bits.sum() < target:
            bh = min(int(rng.integers(lo, hi + 1)), grid_h)
            bw = min(int(rng.integers(lo, hi + 1)), grid_w)
            top = int(rng.integers(0, grid_h - bh + 1))
            left = int(rng.integers(0, grid_w - bw + 1))
            bits[top:top + bh, left:left + bw] = True
        flat = bits.reshape(-1)
        excess = int(flat.sum()) - target
        if excess:
            drop = rng.choice(np.flatnonzero(flat), size=excess, replace=False)
            flat[drop] = False
        return Mask(flat, grid_h, grid_w)
    flat = bits.reshape(-1)
    flat[rng.choice(n, size=target, replace=False)] = True
    return Mask(flat, grid_h, grid_w)


def _as_masks(mask, batch: int) -> list[Mask]:
    if isinstance(mask, Mask):
        return [mask] * batch
    masks = list(mask)
    if len(masks) != batch:
        raise UsageError(f"got {len(masks)} masks for a batch of {batch}")
    return masks


def visible_index_tensor(masks: Sequence[Mask], device=None) -> torch.Tensor:
    counts = {m.bits.size - m.num_masked for m in masks}
    if len(counts) != 1:
        raise UsageError("all masks in a batch must keep the same number of visible tokens")
    return torch.as_tensor(np.stack([m.visible_indices for m in masks]), dtype=torch.long, device=device)


def gather_visible(grid: TokenGrid, mask) -> TokenGrid:
    """Keep the rows at clear-bit positions, in ascending index order."""
    if grid.is_sparse:
        raise UsageError("gather_visible expects a dense grid")
    B = grid.tokens.shape[0]
    masks = _as_masks(mask, B)
    for m in masks:
        if (m.grid_h, m.grid_w) != (grid.grid_h, grid.grid_w):
            raise UsageError(f"mask grid {m.grid_h}x{m.grid_w} does not match tokens {grid.grid_h}x{grid.grid_w}")
    idx = visible_index_tensor(masks, grid.tokens.device)
    D = grid.tokens.shape[-1]
    tokens = torch.gather(grid.tokens, 1, idx.unsqueeze(-1).expand(-1, -1, D))
    return TokenGrid(tokens, grid.grid_h, grid.grid_w, cls=grid.cls, index_map=idx)


def scatter_with_mask_tokens(z_vis: TokenGrid, mask, mask_token: torch.Tensor,
                             pos_table: torch.Tensor) -> TokenGrid:
    """Dense grid: encoder rows at visible positions, ``mask_token + pos`` elsewhere."""
    B, n_vis, D = z_vis.tokens.shape
    masks = _as_masks(mask, B)
    gh, gw = masks[0].grid_h, masks[0].grid_w
    N = gh * gw
    for m in masks:
        if m.bits.size - m.num_masked != n_vis:
            raise UsageError(f"{n_vis} visible rows but mask keeps {m.bits.size - m.num_masked}")
    if pos_table.shape[0] != N:
        raise ConfigError("positional table does not match the mask grid")
    filler = (mask_token.unsqueeze(0) + pos_table).to(z_vis.tokens.dtype)
    out = filler.unsqueeze(0).expand(B, N, D).clone()
    if n_vis:
        idx = visible_index_tensor(masks, z_vis.tokens.device)
        out = out.scatter(1, idx.unsqueeze(-1).expand(-1, -1, D), z_vis.tokens)
    return TokenGrid(out, gh, gw, cls=z_vis.cls)


def mask_bits_tensor(masks: Sequence[Mask], device=None) -> torch.Tensor:
    return torch.as_tensor(np.stack([m.bits for m in masks]), device=device)
