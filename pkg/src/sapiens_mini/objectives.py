"""Joint pretraining objective: masked reconstruction with normalized pixel
targets, teacher-to-student cross-entropy over multi-view [CLS] logits, the
KoLeo spreading regularizer, and the EMA teacher with logit centering.
"""
from __future__ import annotations

import copy
import math
from dataclasses import dataclass

import torch
import torch.nn as nn
import torch.nn.functional as F

from .backbone import Backbone, Block, RMSNorm, TokenGrid
from .config import BackboneConfig, HeadConfig, LossConfig, TeacherConfig, default_ffn_hidden
from .errors import DegenerateInputError, UsageError
from .masking import mask_bits_tensor, scatter_with_mask_tokens


# ---------------------------------------------------------------------------
# pixel targets


def patchify(images: torch.Tensor, p: int) -> torch.Tensor:
    """``(B, C, H, W)`` -> ``(B, N, p*p*C)``; patches row-major, pixels (row, col, channel)."""
    B, C, H, W = images.shape
    x = images.reshape(B, C, H // p, p, W // p, p)
    return x.permute(0, 2, 4, 3, 5, 1).reshape(B, (H // p) * (W // p), p * p * C)


def unpatchify(patches: torch.Tensor, p: int, grid_h: int, grid_w: int, channels: int = 3) -> torch.Tensor:
    B = patches.shape[0]
    x = patches.reshape(B, grid_h, grid_w, p, p, channels)
    return x.permute(0, 5, 1, 3, 2, 4).reshape(B, channels, grid_h * p, grid_w * p)


def normalize_targets(patch_pixels: torch.Tensor, eps: float = 1e-6) -> torch.Tensor:
    # shift by the first pixel so constant patches center to exact zeros
    shifted = patch_pixels - patch_pixels[..., :1]
    centered = shifted - shifted.mean(dim=-1, keepdim=True)
    var = centered.pow(2).mean(dim=-1, keepdim=True)
    return centered / torch.sqrt(var + eps)


def mae_loss(preds: torch.Tensor, targets: torch.Tensor, masked: torch.Tensor) -> torch.Tensor:
    """Mean over rows (one row per view and image) of the masked-token MSE.

    ``preds``/``targets`` are ``(R, N, P)``; ``masked`` is ``(R, N)`` bool.
    """
    masked = masked.to(preds.dtype)
    counts = masked.sum(dim=1)
    if preds.shape[0] == 0 or bool((counts == 0).any()):
        raise DegenerateInputError("every view needs at least one masked token")
    per_token = (preds - targets).pow(2).mean(dim=-1)
    per_row = (per_token * masked).sum(dim=1) / counts
    return per_row.mean()


class MAEDecoder(nn.Module):
    """Fills masked positions with ``mask_token + pos`` and regresses patch pixels."""

    def __init__(self, enc_cfg: BackboneConfig, head: HeadConfig):
        super().__init__()
        D = enc_cfg.hidden_size
        hidden = head.decoder_hidden
        p = enc_cfg.output_patch_size
        self.patch_dim = p * p * enc_cfg.in_chans
        self.mask_token = nn.Parameter(torch.zeros(D))
        self.embed = nn.Linear(D, hidden)
        self.blocks = nn.ModuleList(
            Block(hidden, head.decoder_heads, default_ffn_hidden(hidden), eps=enc_cfg.eps)
            for _ in range(head.decoder_depth)
        )
        self.norm = RMSNorm(hidden, enc_cfg.eps)
        self.pred = nn.Linear(hidden, self.patch_dim)
        nn.init.trunc_normal_(self.mask_token, std=0.02)
        for m in self.modules():
            if isinstance(m, nn.Linear):
                nn.init.trunc_normal_(m.weight, std=0.02)
                if m.bias is not None:
                    nn.init.zeros_(m.bias)

    def forward(self, z_vis: TokenGrid, masks, pos_table: torch.Tensor) -> torch.Tensor:
        z = scatter_with_mask_tokens(z_vis, masks, self.mask_token, pos_table)
        x = self.embed(z.tokens)
        if z.cls is not None:
            x = torch.cat([self.embed(z.cls).unsqueeze(1), x], dim=1)
        for blk in self.blocks:
            x = blk(x)
        x = self.pred(self.norm(x))
        return x[:, 1:] if z.cls is not None else x


# ---------------------------------------------------------------------------
# contrastive head and losses


class ContrastiveHead(nn.Module):
    """3-layer MLP, l2-normalized bottleneck, weight-normalized prototype layer."""

    def __init__(self, in_dim: int, hidden: int = 2048, bottleneck: int = 256, num_prototypes: int = 4096):
        super().__init__()
        if num_prototypes < 2:
            raise ValueError("need at least two prototypes")
        self.mlp = nn.Sequential(
            nn.Linear(in_dim, hidden), nn.GELU(),
            nn.Linear(hidden, hidden), nn.GELU(),
            nn.Linear(hidden, bottleneck),
        )
        self.prototypes = nn.Parameter(torch.empty(num_prototypes, bottleneck))
        # fan-in scaling keeps the bottleneck input-dependent at small widths
        for m in self.mlp:
            if isinstance(m, nn.Linear):
                nn.init.trunc_normal_(m.weight, std=1.0 / math.sqrt(m.in_features))
                nn.init.zeros_(m.bias)
        nn.init.trunc_normal_(self.prototypes, std=0.02)

    @property
    def num_prototypes(self) -> int:
        return self.prototypes.shape[0]

    def forward(self, cls: torch.Tensor) -> torch.Tensor:
        z = F.normalize(self.mlp(cls), dim=-1)
        return z @ F.normalize(self.prototypes, dim=-1).t()


def build_pair_set(num_global: int, num_local: int) -> list[tuple[int, int]]:
    """(teacher view, student view) pairs; views ``0..g-1`` are global, the rest local."""
    if num_global < 2:
        raise UsageError("need at least two global views")
    total = num_global + num_local
    return [(j, i) for j in range(num_global) for i in range(total) if i != j]


def sharpen(logits: torch.Tensor, temp: float, center: torch.Tensor | None = None) -> torch.Tensor:
    """Teacher path when ``center`` is given, student path otherwise."""
    if temp <= 0:
        raise ValueError("temperature must be positive")
    if center is not None:
        logits = logits - center
    return torch.softmax(logits / temp, dim=-1)


def cross_entropy(q: torch.Tensor, log_p: torch.Tensor) -> torch.Tensor:
    return -(q * log_p).sum(dim=-1)


def cl_loss(student_logits, teacher_logits, pairs, student_temp: float, teacher_temp: float,
            center: torch.Tensor | None) -> torch.Tensor:
    """Average of ``H(q_j, p_i)`` over ``pairs`` (and over the batch).

    ``student_logits[i]`` is ``(B, K)`` for view ``i``; ``teacher_logits[j]`` for
    global view ``j``. Teacher probabilities never carry gradient.
    """
    if not pairs:
        raise DegenerateInputError("empty pair set")
    with torch.no_grad():
        q = [sharpen(t.detach(), teacher_temp, center) for t in teacher_logits]
    log_p = [F.log_softmax(s / student_temp, dim=-1) for s in student_logits]
    terms = [cross_entropy(q[j], log_p[i]).mean() for j, i in pairs]
    return torch.stack(terms).mean()


def koleo(embeddings: torch.Tensor, eps: float = 1e-8) -> torch.Tensor:
    """``-mean_i log(d_i + eps)`` with ``d_i`` the distance to the nearest other normalized embedding."""
    n = embeddings.shape[0]
    if n < 2:
        raise DegenerateInputError("KoLeo needs a batch of at least two embeddings")
    x = F.normalize(embeddings, dim=-1, eps=1e-12)
    with torch.no_grad():
        sim = x @ x.t()
        sim.fill_diagonal_(-math.inf)
        nn_idx = sim.argmax(dim=1)
    d = torch.linalg.vector_norm(x - x[nn_idx], dim=-1)
    return -torch.log(d + eps).mean()


def total_loss(mae, cl, koleo_value, weights: LossConfig):
    return weights.mae * mae + weights.cls * cl + weights.koleo * koleo_value


def teacher_temperature(iteration: int, cfg: TeacherConfig) -> float:
    if cfg.temp_warmup_iters <= 0 or iteration >= cfg.temp_warmup_iters:
        return cfg.teacher_temp_end
    frac = iteration / cfg.temp_warmup_iters
    return cfg.teacher_temp_start + frac * (cfg.teacher_temp_end - cfg.teacher_temp_start)


def entropy(probs: torch.Tensor) -> torch.Tensor:
    return -(probs * torch.log(probs.clamp_min(1e-30))).sum(dim=-1)


# ---------------------------------------------------------------------------
# teacher


class TeacherState(nn.Module):
    """EMA copy of the student encoder and contrastive head, plus the logit center.

    Parameters are frozen (``requires_grad=False``) and only change through
    :func:`ema_update`.
    """

    def __init__(self, encoder: Backbone, head: ContrastiveHead, ema_momentum: float = 0.992,
                 center_momentum: float = 0.9):
        super().__init__()
        self.encoder = copy.deepcopy(encoder)
        self.head = copy.deepcopy(head)
        for p in self.parameters():
            p.requires_grad_(False)
        self.register_buffer("center", torch.zeros(head.num_prototypes, dtype=head.prototypes.dtype))
        self.ema_momentum = ema_momentum
        self.center_momentum = center_momentum

    @torch.no_grad()
    def logits(self, images: torch.Tensor) -> torch.Tensor:
        return self.head(self.encoder.encode(images).cls)


@torch.no_grad()
def ema_update(teacher: TeacherState, student_modules, m: float) -> TeacherState:
    """``theta_t <- m * theta_t + (1 - m) * theta_s`` for every tensor; the center is untouched."""
    encoder, head = student_modules
    pairs = list(zip(teacher.encoder.parameters(), encoder.parameters()))
    pairs += list(zip(teacher.head.parameters(), head.parameters()))
    for t, s in pairs:
        if t.shape != s.shape:
            raise UsageError(f"teacher/student shape mismatch {tuple(t.shape)} vs {tuple(s.shape)}")
    for t, s in pairs:
        t.mul_(m).add_(s.detach(), alpha=1.0 - m)
    return teacher


@torch.no_grad()
def center_update(center: torch.Tensor, teacher_logits: torch.Tensor, momentum: float) -> torch.Tensor:
    """``momentum * center + (1 - momentum) * batch_mean(teacher_logits)``, in place."""
    if teacher_logits.numel() == 0 or teacher_logits.shape[0] == 0:
        raise DegenerateInputError("empty teacher batch")
    batch_mean = teacher_logits.reshape(-1, teacher_logits.shape[-1]).mean(dim=0)
    center.mul_(momentum).add_(batch_mean, alpha=1.0 - momentum)
    return center


@dataclass
class PretrainLossOutput:
    total: torch.Tensor
    mae: torch.Tensor
    cl: torch.Tensor
    koleo: torch.Tensor
    teacher_logits: torch.Tensor
    teacher_entropy: float
    teacher_marginal_entropy: float


class PretrainObjective(nn.Module):
    """Student encoder + MAE decoder + contrastive head, evaluated on a batch of views."""

    def __init__(self, enc_cfg: BackboneConfig, head_cfg: HeadConfig):
        super().__init__()
        self.encoder = Backbone(enc_cfg)
        self.decoder = MAEDecoder(enc_cfg, head_cfg)
        self.head = ContrastiveHead(enc_cfg.hidden_size, head_cfg.proj_hidden, head_cfg.bottleneck,
                                    head_cfg.proto_count)

    def decoder_pos_table(self) -> torch.Tensor:
        enc = self.encoder
        side = enc.cfg.layout.window_side
        if side is None:
            return enc.pos_embed
        from .backbone import partition_windows

        cfg = enc.cfg
        wins = partition_windows(enc.pos_embed.unsqueeze(0), cfg.grid_h, cfg.grid_w, side)
        return wins.mean(dim=1)

    def forward(self, global_views: torch.Tensor, local_views: torch.Tensor | None, masks,
                teacher: TeacherState, student_temp: float, teacher_temp: float,
                weights: LossConfig) -> PretrainLossOutput:
        """``global_views`` is ``(G, B, C, H, W)``; ``masks[g][b]`` is the mask for global view g of image b."""
        G, B = global_views.shape[:2]
        flat_globals = global_views.flatten(0, 1)
        flat_masks = [m for per_view in masks for m in per_view]
        out = self.encoder.encode(flat_globals, flat_masks)
        preds = self.decoder(out.patch_features, flat_masks, self.decoder_pos_table())
        p = self.encoder.cfg.output_patch_size
        targets = normalize_targets(patchify(flat_globals, p))
        masked = mask_bits_tensor(flat_masks, preds.device)
        loss_mae = mae_loss(preds, targets, masked)

        student_logits = list(self.head(out.cls).view(G, B, -1))
        if local_views is not None and local_views.shape[0] > 0:
            L = local_views.shape[0]
            local_cls = self.encoder.encode(local_views.flatten(0, 1)).cls
            student_logits += list(self.head(local_cls).view(L, B, -1))
        with torch.no_grad():
            t_logits = teacher.logits(flat_globals).view(G, B, -1)
        pairs = build_pair_set(G, len(student_logits) - G)
        loss_cl = cl_loss(student_logits, list(t_logits), pairs, student_temp, teacher_temp, teacher.center)
        cls_views = out.cls.view(G, B, -1)
        loss_koleo = torch.stack([koleo(cls_views[g]) for g in range(G)]).mean() if B > 1 \
            else out.cls.new_zeros(())
        total = total_loss(loss_mae, loss_cl, loss_koleo, weights)
        with torch.no_grad():
            q = sharpen(t_logits, teacher_temp, teacher.center)
            ent = entropy(q).mean().item()
            marg = entropy(q.reshape(-1, q.shape[-1]).mean(dim=0)).item()
        return PretrainLossOutput(total, loss_mae, loss_cl, loss_koleo, t_logits, ent, marg)
