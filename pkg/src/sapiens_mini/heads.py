"""Dense task heads (pose heatmaps, part segmentation, pointmap, normals, albedo)
and their losses.

Dense losses take batched ``(B, C, H, W)`` maps and a foreground mask ``fg``
of shape ``(B, H, W)``; single-sample ``(C, H, W)`` inputs are accepted too.
Each loss is averaged over foreground pixels within an image, then over images.
"""
from __future__ import annotations

import math
import warnings
from dataclasses import dataclass

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from .errors import ConfigError, DegenerateInputError, UsageError

NUM_SEG_CLASSES = 30  # 29 body parts + background
TASK_CHANNELS = {"seg": NUM_SEG_CLASSES, "pointmap": 3, "normal": 3, "albedo": 3}
TASKS = ("pose", "seg", "pointmap", "normal", "albedo")


# ---------------------------------------------------------------------------
# sub-pixel rearrangement


def pixel_shuffle(x: torch.Tensor, r: int) -> torch.Tensor:
    """``out[c, r*i + a, r*j + b] = x[c*r*r + a*r + b, i, j]`` over trailing ``(C, h, w)`` dims."""
    *lead, C, h, w = x.shape
    if C % (r * r):
        raise ConfigError(f"{C} channels not divisible by r^2 = {r * r}")
    c = C // (r * r)
    y = x.reshape(*lead, c, r, r, h, w)
    n = len(lead)
    y = y.permute(*range(n), n, n + 3, n + 1, n + 4, n + 2)
    return y.reshape(*lead, c, h * r, w * r)


def space_to_depth(x: torch.Tensor, r: int) -> torch.Tensor:
    *lead, c, H, W = x.shape
    if H % r or W % r:
        raise ConfigError(f"spatial dims {H}x{W} not divisible by {r}")
    n = len(lead)
    y = x.reshape(*lead, c, H // r, r, W // r, r)
    y = y.permute(*range(n), n, n + 2, n + 4, n + 1, n + 3)
    return y.reshape(*lead, c * r * r, H // r, W // r)


class PixelShuffle2x(nn.Module):
    def forward(self, x):
        return pixel_shuffle(x, 2)


class PixelShuffleDecoder(nn.Module):
    """``stages`` x (3x3 conv -> pixel shuffle x2 -> GELU), then a 1x1 projection."""

    def __init__(self, in_channels: int, out_channels: int, stages: int, channels=None):
        super().__init__()
        if channels is None:
            channels = [max(in_channels // 2 ** (i + 1), 16) for i in range(stages)]
        if len(channels) != stages:
            raise ConfigError("need one channel width per decoder stage")
        layers = []
        c_in = in_channels
        for c in channels:
            layers += [nn.Conv2d(c_in, 4 * c, 3, padding=1), PixelShuffle2x(), nn.GELU()]
            c_in = c
        self.stages = nn.Sequential(*layers)
        self.proj = nn.Conv2d(c_in, out_channels, 1)

    def forward(self, x):
        return self.proj(self.stages(x))


def _num_stages(upsample: int) -> int:
    stages = int(round(math.log2(upsample))) if upsample >= 1 else -1
    if stages < 0 or 2 ** stages != upsample:
        raise ConfigError(f"upsampling factor {upsample} must be a power of two")
    return stages


class ScaleHead(nn.Module):
    """Positive scalar from mean-pooled features, ``s = exp(w . mean(f) + b)``."""

    def __init__(self, in_channels: int):
        super().__init__()
        self.linear = nn.Linear(in_channels, 1)
        nn.init.zeros_(self.linear.weight)
        nn.init.zeros_(self.linear.bias)

    def forward(self, fmap):
        return torch.exp(self.linear(fmap.mean(dim=(-2, -1)))).squeeze(-1)


class DenseHead(nn.Module):
    """Pixel-shuffle head for seg / pointmap / normal / albedo.

    Output activations: raw logits for seg, unit vectors for normals, sigmoid
    for albedo, and ``(P_tilde, s)`` for pointmaps.
    """

    def __init__(self, task: str, in_channels: int, upsample: int, channels=None):
        super().__init__()
        if task not in TASK_CHANNELS:
            raise ConfigError(f"no dense head for task {task!r}")
        self.task = task
        self.decoder = PixelShuffleDecoder(in_channels, TASK_CHANNELS[task], _num_stages(upsample), channels)
        self.scale = ScaleHead(in_channels) if task == "pointmap" else None

    def forward(self, fmap):
        out = self.decoder(fmap)
        if self.task == "normal":
            return F.normalize(out, dim=1, eps=1e-12)
        if self.task == "albedo":
            return torch.sigmoid(out)
        if self.task == "pointmap":
            return out, self.scale(fmap)
        return out


@dataclass
class HeatmapHeadConfig:
    in_channels: int
    out_channels: int
    deconv_channels: tuple = (768, 768)
    conv_channels: tuple = (768, 768, 512)
    sigma: float = 6.0
    stride: int = 4

    def __post_init__(self):
        if self.out_channels < 1:
            raise ConfigError("need at least one keypoint channel")


class HeatmapHead(nn.Module):
    """Deconvolution stages (kernel 4, stride 2), 1x1 convs, 1x1 projection to keypoint heatmaps."""

    def __init__(self, cfg: HeatmapHeadConfig):
        super().__init__()
        self.cfg = cfg
        layers = []
        c = cfg.in_channels
        for d in cfg.deconv_channels:
            layers += [nn.ConvTranspose2d(c, d, 4, stride=2, padding=1), nn.GELU()]
            c = d
        for d in cfg.conv_channels:
            layers += [nn.Conv2d(c, d, 1), nn.GELU()]
            c = d
        layers.append(nn.Conv2d(c, cfg.out_channels, 1))
        self.layers = nn.Sequential(*layers)

    def forward(self, fmap):
        return self.layers(fmap)


# ---------------------------------------------------------------------------
# pose


def generate_heatmaps(keypoints, out_h: int, out_w: int, sigma: float, stride: int):
    """Gaussian heatmaps in stride space with ``sigma' = sigma / stride``.

    ``keypoints`` is ``(K, 3)``: x, y in input pixels and a visibility flag.
    Returns ``(heatmaps (K, out_h, out_w), weights (K,))``; invisible or
    out-of-frame keypoints get an all-zero channel and weight 0.
    """
    kps = np.asarray(keypoints, dtype=np.float64).reshape(-1, 3)
    s = sigma / stride
    ys, xs = np.mgrid[0:out_h, 0:out_w].astype(np.float64)
    maps = np.zeros((len(kps), out_h, out_w))
    weights = np.zeros(len(kps))
    for k, (x, y, v) in enumerate(kps):
        cx, cy = x / stride, y / stride
        if v <= 0 or not (-0.5 <= cx <= out_w - 0.5 and -0.5 <= cy <= out_h - 0.5):
            continue
        maps[k] = np.exp(-((xs - cx) ** 2 + (ys - cy) ** 2) / (2 * s * s))
        weights[k] = 1.0
    return maps, weights


def pose_loss(pred: torch.Tensor, gt: torch.Tensor, visibility: torch.Tensor,
              ohem_fraction: float = 0.5) -> torch.Tensor:
    """Per-keypoint heatmap MSE, hardest ``ceil(fraction * visible)`` channels per sample."""
    if pred.shape != gt.shape:
        raise UsageError("prediction and target heatmaps differ in shape")
    if pred.ndim == 3:
        pred, gt, visibility = pred[None], gt[None], visibility[None]
    per_kp = (pred - gt).pow(2).mean(dim=(-2, -1))  # (B, K)
    vis = visibility > 0
    losses = []
    for b in range(per_kp.shape[0]):
        row = per_kp[b][vis[b]]
        n_vis = row.numel()
        if n_vis == 0:
            continue
        keep = max(1, math.ceil(ohem_fraction * n_vis - 1e-9))
        losses.append(torch.topk(row, keep).values.mean())
    if not losses:
        warnings.warn("pose_loss: no visible keypoints, returning zero", RuntimeWarning)
        return pred.sum() * 0.0
    return torch.stack(losses).mean()


# ---------------------------------------------------------------------------
# geometric losses


def finite_diff_grad(m: torch.Tensor) -> torch.Tensor:
    """Forward differences ``[Gx, Gy]`` stacked on the channel axis: ``(..., C, H, W) -> (..., 2C, H, W)``.

    The last column of ``Gx`` and last row of ``Gy`` are zero.
    """
    H, W = m.shape[-2:]
    if H < 2 or W < 2:
        raise DegenerateInputError("finite differences need at least 2x2 maps")
    gx = F.pad(m[..., :, 1:] - m[..., :, :-1], (0, 1, 0, 0))
    gy = F.pad(m[..., 1:, :] - m[..., :-1, :], (0, 0, 0, 1))
    return torch.cat([gx, gy], dim=-3)


def _gradient_valid(fg: torch.Tensor):
    """Where both pixels of a forward difference lie in the foreground."""
    vx = torch.zeros_like(fg)
    vy = torch.zeros_like(fg)
    vx[..., :, :-1] = fg[..., :, :-1] & fg[..., :, 1:]
    vy[..., :-1, :] = fg[..., :-1, :] & fg[..., 1:, :]
    return vx, vy


def _batched(*maps, fg):
    if fg.ndim == 2:
        maps = tuple(m.unsqueeze(0) if m is not None and m.ndim == 3 else m for m in maps)
        fg = fg.unsqueeze(0)
    return maps, fg.bool()


def _fg_mean(per_pixel: torch.Tensor, fg: torch.Tensor) -> torch.Tensor:
    """Per-image mean over ``fg``, then the mean over images with any foreground."""
    counts = fg.sum(dim=(-2, -1))
    keep = counts > 0
    if not bool(keep.any()):
        raise DegenerateInputError("empty foreground mask")
    sums = torch.where(fg, per_pixel, torch.zeros_like(per_pixel)).sum(dim=(-2, -1))
    return (sums[keep] / counts[keep]).mean()


def _grad_term(diff: torch.Tensor, fg: torch.Tensor) -> torch.Tensor:
    """Per-pixel l2 norm of the finite-difference gradient of ``diff``, limited to in-mask pairs."""
    C = diff.shape[-3]
    g = finite_diff_grad(torch.where(fg.unsqueeze(-3), diff, torch.zeros_like(diff)))
    vx, vy = _gradient_valid(fg)
    gx = torch.where(vx.unsqueeze(-3), g[..., :C, :, :], torch.zeros_like(g[..., :C, :, :]))
    gy = torch.where(vy.unsqueeze(-3), g[..., C:, :, :], torch.zeros_like(g[..., C:, :, :]))
    return torch.linalg.vector_norm(torch.cat([gx, gy], dim=-3), dim=-3)


def _masked_diff(pred, gt, fg):
    mask = fg.unsqueeze(-3)
    return torch.where(mask, pred - gt, torch.zeros_like(pred))


def pointmap_loss(p_tilde: torch.Tensor, s: torch.Tensor, p_gt: torch.Tensor, fg: torch.Tensor) -> torch.Tensor:
    """``mean_fg ||s P~ - P|| + ||grad(s P~) - grad P||`` with unsquared per-pixel norms."""
    (p_tilde, p_gt), fg = _batched(p_tilde, p_gt, fg=fg)
    s = torch.as_tensor(s, dtype=p_tilde.dtype).reshape(-1, 1, 1, 1)
    diff = _masked_diff(s * p_tilde, p_gt, fg)
    per_pixel = torch.linalg.vector_norm(diff, dim=-3) + _grad_term(diff, fg)
    return _fg_mean(per_pixel, fg)


def normal_loss(n_hat: torch.Tensor, n_gt: torch.Tensor, fg: torch.Tensor) -> torch.Tensor:
    """``mean_fg (1 - n_hat . n) + ||n_hat - n|| + ||grad n_hat - grad n||``."""
    (n_hat, n_gt), fg = _batched(n_hat, n_gt, fg=fg)
    diff = _masked_diff(n_hat, n_gt, fg)
    cos = torch.where(fg, (n_hat * n_gt).sum(dim=-3), torch.ones_like(fg, dtype=n_hat.dtype))
    per_pixel = (1.0 - cos) + torch.linalg.vector_norm(diff, dim=-3) + _grad_term(diff, fg)
    return _fg_mean(per_pixel, fg)


def albedo_loss(a_hat: torch.Tensor, a_gt: torch.Tensor, fg: torch.Tensor) -> torch.Tensor:
    """Per-pixel l2 + gradient term over ``fg``, plus the l2 gap between foreground mean colors."""
    (a_hat, a_gt), fg = _batched(a_hat, a_gt, fg=fg)
    diff = _masked_diff(a_hat, a_gt, fg)
    per_pixel = torch.linalg.vector_norm(diff, dim=-3) + _grad_term(diff, fg)
    counts = fg.sum(dim=(-2, -1))
    keep = counts > 0
    if not bool(keep.any()):
        raise DegenerateInputError("empty foreground mask")
    mean_gap = diff.sum(dim=(-2, -1))[keep] / counts[keep].unsqueeze(-1)
    return _fg_mean(per_pixel, fg) + torch.linalg.vector_norm(mean_gap, dim=-1).mean()


def seg_class_weights(label_maps, num_classes: int = NUM_SEG_CLASSES, lo: float = 0.5, hi: float = 5.0):
    """Inverse-log-frequency weights ``1 / ln(1.02 + freq)``, clamped to ``[lo, hi]``."""
    labels = np.concatenate([np.asarray(m).reshape(-1) for m in label_maps])
    freq = np.bincount(labels, minlength=num_classes)[:num_classes] / max(labels.size, 1)
    return torch.as_tensor(np.clip(1.0 / np.log(1.02 + freq), lo, hi))


def seg_loss(logits: torch.Tensor, gt: torch.Tensor, class_weights=None, smooth: float = 1.0) -> torch.Tensor:
    """Weighted pixel cross-entropy plus macro soft-Dice loss (1:1)."""
    if logits.ndim == 3:
        logits, gt = logits[None], gt[None]
    C = logits.shape[1]
    gt = gt.long()
    if gt.numel() and (gt.min() < 0 or gt.max() >= C):
        raise UsageError(f"segmentation labels must lie in [0, {C - 1}]")
    w = None if class_weights is None else torch.as_tensor(class_weights, dtype=logits.dtype)
    ce = F.cross_entropy(logits, gt, weight=w)
    probs = torch.softmax(logits, dim=1)
    onehot = F.one_hot(gt, C).permute(0, 3, 1, 2).to(probs.dtype)
    inter = (probs * onehot).sum(dim=(0, 2, 3))
    denom = probs.sum(dim=(0, 2, 3)) + onehot.sum(dim=(0, 2, 3))
    dice = (2 * inter + smooth) / (denom + smooth)
    return ce + (1.0 - dice.mean())
