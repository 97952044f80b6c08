"""Evaluation metrics, [CLS] k-NN retrieval, PCA feature maps and the
frozen-backbone dense probe.

Metric functions accept numpy arrays or tensors. Dense maps are channel-first
``(C, H, W)`` or batched ``(B, C, H, W)``; foreground masks drop the channel axis.
"""
from __future__ import annotations

import hashlib
import json
import math
from dataclasses import dataclass, field

import numpy as np
import torch
from scipy.ndimage import correlate1d
from sklearn.decomposition import PCA

from .errors import DegenerateInputError, UsageError

PSNR_CAP = 100.0


def _np(x) -> np.ndarray:
    if isinstance(x, torch.Tensor):
        return x.detach().cpu().numpy()
    return np.asarray(x)


@dataclass
class MetricReport:
    task: str
    metrics: dict
    sample_count: int
    config_fingerprint: str = ""
    extra: dict = field(default_factory=dict)

    def __post_init__(self):
        self.metrics = {k: float(v) for k, v in self.metrics.items()}
        if self.sample_count <= 0:
            raise ValueError("a report needs at least one sample")
        bad = [k for k, v in self.metrics.items() if not math.isfinite(v)]
        if bad:
            raise ValueError(f"non-finite metrics: {bad}")

    def to_json(self) -> str:
        return json.dumps({"task": self.task, "metrics": self.metrics, "sample_count": self.sample_count,
                           "config_fingerprint": self.config_fingerprint, "extra": self.extra},
                          sort_keys=True, indent=2)

    @classmethod
    def from_json(cls, text: str) -> "MetricReport":
        d = json.loads(text)
        return cls(d["task"], d["metrics"], d["sample_count"], d.get("config_fingerprint", ""), d.get("extra", {}))


# ---------------------------------------------------------------------------
# segmentation


def confusion_matrix(pred, gt, num_classes: int) -> np.ndarray:
    pred, gt = _np(pred).reshape(-1).astype(np.int64), _np(gt).reshape(-1).astype(np.int64)
    if pred.shape != gt.shape:
        raise UsageError("prediction and label maps differ in size")
    if gt.size == 0:
        raise DegenerateInputError("no labeled pixels")
    if min(pred.min(), gt.min()) < 0 or max(pred.max(), gt.max()) >= num_classes:
        raise UsageError("labels out of range")
    return np.bincount(gt * num_classes + pred, minlength=num_classes ** 2).reshape(num_classes, num_classes)


def miou_macc(pred_maps, gt_maps, num_classes: int) -> tuple[float, float]:
    """Mean IoU and mean per-class recall (both in %) over classes present in the ground truth."""
    if isinstance(pred_maps, (list, tuple)):
        cm = sum(confusion_matrix(p, g, num_classes) for p, g in zip(pred_maps, gt_maps))
    else:
        cm = confusion_matrix(pred_maps, gt_maps, num_classes)
    return miou_macc_from_confusion(cm)


def miou_macc_from_confusion(cm: np.ndarray) -> tuple[float, float]:
    tp = np.diag(cm).astype(np.float64)
    gt_count = cm.sum(axis=1)
    pred_count = cm.sum(axis=0)
    present = gt_count > 0
    if not present.any():
        raise DegenerateInputError("no labeled pixels")
    iou = tp[present] / (gt_count[present] + pred_count[present] - tp[present])
    acc = tp[present] / gt_count[present]
    return 100.0 * iou.mean(), 100.0 * acc.mean()


# ---------------------------------------------------------------------------
# normals and pointmaps


def _fg_pixels(x, fg) -> np.ndarray:
    """``(..., C, H, W)`` map -> ``(n, C)`` foreground pixel rows."""
    x, fg = _np(x).astype(np.float64), _np(fg).astype(bool)
    if x.ndim == 3:
        x, fg = x[None], fg[None]
    if not fg.any():
        raise DegenerateInputError("empty foreground mask")
    return np.moveaxis(x, 1, -1)[fg]


def normal_metrics(pred, gt, fg, thresholds=(5.0, 11.25, 22.5, 30.0)) -> dict:
    a, b = _fg_pixels(pred, fg), _fg_pixels(gt, fg)
    cos = np.clip((a * b).sum(axis=-1), -1.0, 1.0)
    ang = np.degrees(np.arccos(cos))
    out = {"mean": float(ang.mean()), "median": float(np.median(ang))}
    for t in thresholds:
        out[f"within_{t:g}"] = 100.0 * float((ang <= t).mean())
    return out


def pointmap_metrics(pred, gt, fg) -> dict:
    """Metrics after the least-squares scale ``alpha = <pred, gt> / <pred, pred>``."""
    a, b = _fg_pixels(pred, fg), _fg_pixels(gt, fg)
    denom = float((a * a).sum())
    if denom == 0.0:
        raise DegenerateInputError("zero prediction: scale alignment undefined")
    alpha = float((a * b).sum()) / denom
    err = alpha * a - b
    out = {
        "alpha": alpha,
        "l2": float(np.linalg.norm(err, axis=-1).mean()),
        "rmse": float(np.sqrt((err ** 2).mean())),
    }
    for i, axis in enumerate("xyz"):
        out[f"mae_{axis}"] = float(np.abs(err[:, i]).mean())
    return out


# ---------------------------------------------------------------------------
# albedo


def gaussian_window(size: int = 11, sigma: float = 1.5) -> np.ndarray:
    x = np.arange(size) - (size - 1) / 2
    w = np.exp(-x ** 2 / (2 * sigma ** 2))
    return w / w.sum()


def ssim_map(x: np.ndarray, y: np.ndarray, size: int = 11, sigma: float = 1.5,
             c1: float = 0.01 ** 2, c2: float = 0.03 ** 2) -> np.ndarray:
    """Gaussian-window SSIM at every fully-contained window center of 2D images ``x``, ``y``."""
    if min(x.shape) < size:
        raise DegenerateInputError(f"SSIM needs images of at least {size}x{size}")
    w = gaussian_window(size, sigma)

    def filt(img):
        out = correlate1d(img, w, axis=0, mode="constant")
        return correlate1d(out, w, axis=1, mode="constant")

    mx, my = filt(x), filt(y)
    sxx = filt(x * x) - mx * mx
    syy = filt(y * y) - my * my
    sxy = filt(x * y) - mx * my
    full = ((2 * mx * my + c1) * (2 * sxy + c2)) / ((mx * mx + my * my + c1) * (sxx + syy + c2))
    r = size // 2
    return full[r:x.shape[0] - r, r:x.shape[1] - r]


def ssim(pred, gt, fg=None) -> float:
    """Mean SSIM over channels and over window centers that lie in ``fg`` (all centers if none do)."""
    pred, gt = _np(pred).astype(np.float64), _np(gt).astype(np.float64)
    if pred.ndim == 2:
        pred, gt = pred[None], gt[None]
    maps = np.stack([ssim_map(pred[c], gt[c]) for c in range(pred.shape[0])])
    if fg is None:
        return float(maps.mean())
    r = 5
    fgc = _np(fg).astype(bool)[r:pred.shape[1] - r, r:pred.shape[2] - r]
    if not fgc.any():
        return float(maps.mean())
    return float(maps[:, fgc].mean())


def albedo_metrics(pred, gt, fg) -> dict:
    from .heads import _gradient_valid, finite_diff_grad

    p, g = _np(pred).astype(np.float64), _np(gt).astype(np.float64)
    m = _np(fg).astype(bool)
    if p.ndim == 3:
        p, g, m = p[None], g[None], m[None]
    a, b = _fg_pixels(p, m), _fg_pixels(g, m)
    mse = float(((a - b) ** 2).mean())
    psnr = PSNR_CAP if mse == 0 else min(PSNR_CAP, 10 * math.log10(1.0 / mse))
    grads = finite_diff_grad(torch.from_numpy(p - g)).numpy()
    vx, vy = _gradient_valid(torch.from_numpy(m))
    C = p.shape[1]
    gx = np.abs(grads[:, :C])[np.broadcast_to(vx.numpy()[:, None], grads[:, :C].shape)]
    gy = np.abs(grads[:, C:])[np.broadcast_to(vy.numpy()[:, None], grads[:, C:].shape)]
    both = np.concatenate([gx, gy])
    return {
        "mae": float(np.abs(a - b).mean()),
        "rmse": math.sqrt(mse),
        "psnr": psnr,
        "ssim": float(np.mean([ssim(p[i], g[i], m[i]) for i in range(p.shape[0])])),
        "grad_l1": float(both.mean()) if both.size else 0.0,
    }


# ---------------------------------------------------------------------------
# keypoints


def decode_heatmaps(heatmaps, stride: int = 1) -> np.ndarray:
    """Argmax with a quarter-pixel shift toward the larger neighbour; returns ``(K, 3)`` of x, y, peak."""
    hm = _np(heatmaps).astype(np.float64)
    K, H, W = hm.shape
    out = np.zeros((K, 3))
    for k in range(K):
        idx = int(np.argmax(hm[k]))
        y, x = divmod(idx, W)
        fx, fy = float(x), float(y)
        if 0 < x < W - 1:
            fx += 0.25 * np.sign(hm[k, y, x + 1] - hm[k, y, x - 1])
        if 0 < y < H - 1:
            fy += 0.25 * np.sign(hm[k, y + 1, x] - hm[k, y - 1, x])
        out[k] = (fx * stride, fy * stride, hm[k, y, x])
    return out


def pck(pred_keypoints, gt_keypoints, bbox, alpha: float = 0.05) -> float:
    """Fraction of visible keypoints within ``alpha * diag(bbox)``; ``bbox`` is ``(x0, y0, x1, y1)``."""
    pred = _np(pred_keypoints).astype(np.float64).reshape(-1, _np(pred_keypoints).shape[-1])
    gt = _np(gt_keypoints).astype(np.float64).reshape(-1, 3)
    vis = gt[:, 2] > 0
    if not vis.any():
        raise DegenerateInputError("no visible keypoints")
    x0, y0, x1, y1 = bbox
    diag = math.hypot(x1 - x0, y1 - y0)
    dist = np.linalg.norm(pred[vis, :2] - gt[vis, :2], axis=-1)
    return float((dist <= alpha * diag).mean())


# ---------------------------------------------------------------------------
# retrieval and visualization


def knn_retrieve(query, gallery, k: int) -> np.ndarray:
    """Top-``k`` gallery indices by cosine similarity, ties broken by lower index."""
    g = _np(gallery).astype(np.float64)
    if g.ndim != 2 or g.shape[0] == 0:
        raise DegenerateInputError("empty gallery")
    if not 1 <= k <= g.shape[0]:
        raise UsageError(f"k={k} outside [1, {g.shape[0]}]")
    q = _np(query).astype(np.float64).reshape(-1)
    sims = (g @ q) / (np.linalg.norm(g, axis=1) * np.linalg.norm(q) + 1e-300)
    order = np.lexsort((np.arange(len(sims)), -sims))
    return order[:k]


def fit_feature_pca(features, foreground, n_components: int = 3) -> PCA:
    feats = _np(features).astype(np.float64)
    fg = _np(foreground).astype(bool).reshape(-1)
    if fg.sum() < n_components:
        raise DegenerateInputError(f"need at least {n_components} foreground tokens")
    return PCA(n_components=n_components, svd_solver="full").fit(feats[fg])


def pca_features(patch_features, foreground) -> np.ndarray:
    """RGB ``(grid_h, grid_w, 3)`` image of the top-3 PCA components of foreground tokens.

    ``patch_features`` is a single-image :class:`TokenGrid` (or ``(gh, gw, D)`` array);
    ``foreground`` is a :class:`Mask` whose set bits mark foreground tokens, or a bool array.
    """
    from .backbone import TokenGrid
    from .masking import Mask

    if isinstance(patch_features, TokenGrid):
        gh, gw = patch_features.grid_h, patch_features.grid_w
        feats = _np(patch_features.tokens).reshape(gh * gw, -1)
    else:
        arr = _np(patch_features)
        gh, gw = arr.shape[:2]
        feats = arr.reshape(gh * gw, -1)
    fg = foreground.bits if isinstance(foreground, Mask) else _np(foreground).astype(bool).reshape(-1)
    pca = fit_feature_pca(feats, fg)
    comps = pca.transform(feats[fg])
    lo, hi = comps.min(axis=0), comps.max(axis=0)
    span = np.where(hi > lo, hi - lo, 1.0)
    rgb = np.zeros((gh * gw, 3))
    rgb[fg] = (comps - lo) / span
    return rgb.reshape(gh, gw, 3)


# ---------------------------------------------------------------------------
# hashing


def state_hash(module: torch.nn.Module) -> str:
    """SHA-256 of a module's serialized parameters and buffers (name-sorted, raw bytes)."""
    h = hashlib.sha256()
    for name, t in sorted(module.state_dict().items()):
        h.update(name.encode())
        h.update(str(tuple(t.shape)).encode())
        h.update(str(t.dtype).encode())
        h.update(t.detach().cpu().contiguous().numpy().tobytes())
    return h.hexdigest()


# ---------------------------------------------------------------------------
# frozen-backbone dense probe


class ProbeDecoder(torch.nn.Module):
    """3x3 conv, GELU, 1x1 conv, then bilinear upsampling to the target size."""

    def __init__(self, in_channels: int, out_channels: int, hidden: int, out_size):
        super().__init__()
        self.conv1 = torch.nn.Conv2d(in_channels, hidden, 3, padding=1)
        self.conv2 = torch.nn.Conv2d(hidden, out_channels, 1)
        self.out_size = tuple(out_size)

    def forward(self, fmap):
        x = self.conv2(torch.nn.functional.gelu(self.conv1(fmap)))
        return torch.nn.functional.interpolate(x, size=self.out_size, mode="bilinear", align_corners=False)


class _ProbeHead(torch.nn.Module):
    def __init__(self, task: str, in_channels: int, hidden: int, out_size, out_channels: int):
        super().__init__()
        from .heads import ScaleHead

        self.task = task
        self.decoder = ProbeDecoder(in_channels, out_channels, hidden, out_size)
        self.scale = ScaleHead(in_channels) if task == "pointmap" else None

    def forward(self, fmap):
        out = self.decoder(fmap)
        if self.task == "normal":
            return torch.nn.functional.normalize(out, dim=1, eps=1e-12)
        if self.task == "albedo":
            return torch.sigmoid(out)
        if self.task == "pointmap":
            return out, self.scale(fmap)
        return out


def dense_probe(backbone, task: str, probe_cfg, train_samples, test_samples, seed: int = 0,
                mean=(0.485, 0.456, 0.406), std=(0.229, 0.224, 0.225), fingerprint: str = "") -> MetricReport:
    """Train a small decoder on frozen ``backbone`` features; report metrics on ``test_samples``.

    The decoder initialization and the data order depend only on ``seed``, so
    different backbones are probed under identical conditions. The backbone's
    serialized weights are hashed before and after; any change is an error.
    """
    from .errors import FrozenWeightDriftError
    from .heads import NUM_SEG_CLASSES
    from .optim import AdamW
    from .synth import KEYPOINT_NAMES
    from .tasks import adapter_for
    from .training import images_tensor

    if not train_samples or not test_samples:
        raise DegenerateInputError("probe needs non-empty train and test splits")
    cfg = backbone.cfg
    adapter = adapter_for(task, cfg)
    adapter.prepare(train_samples)
    before = state_hash(backbone)
    was_training = backbone.training
    backbone.eval()
    for p in backbone.parameters():
        p.requires_grad_(False)

    if task == "pose":
        out_size, channels = adapter.heatmap_shape, len(KEYPOINT_NAMES)
    else:
        out_size = train_samples[0].image.shape[-2:]
        channels = {"seg": NUM_SEG_CLASSES}.get(task, 3)
    with torch.random.fork_rng(devices=[]):
        torch.manual_seed(seed)
        head = _ProbeHead(task, cfg.hidden_size, probe_cfg.hidden, out_size, channels)
    init_hash = state_hash(head)
    backbone_ids = {id(p) for p in backbone.parameters()}
    params = list(head.parameters())
    if any(id(p) in backbone_ids for p in params):
        raise FrozenWeightDriftError("probe optimizer would see backbone parameters")
    opt = AdamW([{"params": params, "weight_decay": 0.0}], lr=probe_cfg.lr, betas=(0.9, 0.999), weight_decay=0.0)

    with torch.no_grad():
        train_feats = backbone.feature_map(images_tensor([s.image for s in train_samples], mean, std))
        test_feats = backbone.feature_map(images_tensor([s.image for s in test_samples], mean, std))

    rng = np.random.default_rng(seed)
    order = []
    B = min(probe_cfg.batch_size, len(train_samples))
    for _ in range(probe_cfg.iters):
        idx = rng.choice(len(train_samples), size=B, replace=False)
        order.append(idx.tolist())
        chosen = [train_samples[i] for i in idx]
        loss = adapter.loss(head(train_feats[idx]), adapter.targets(chosen))
        opt.zero_grad(set_to_none=True)
        loss.backward()
        opt.step()

    head.eval()
    with torch.no_grad():
        preds = adapter.predictions(head(test_feats), test_samples)
    metrics = adapter.metrics(preds, test_samples)

    after = state_hash(backbone)
    for p in backbone.parameters():
        p.requires_grad_(True)
    backbone.train(was_training)
    if after != before:
        raise FrozenWeightDriftError(f"backbone weights changed during probing ({before[:12]} -> {after[:12]})")
    transcript = {"seed": seed, "decoder_init_hash": init_hash, "data_order": order}
    return MetricReport(task, metrics, len(test_samples), fingerprint,
                        {"backbone_sha256": before, "iters": probe_cfg.iters, "rng_transcript": transcript})
