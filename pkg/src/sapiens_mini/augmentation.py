"""Multi-crop view generation with per-view provenance.

Global views get geometric augmentation only (crop, resize, flip) so they can
serve as masked-reconstruction targets; photometric distortions are reserved
for local views.
"""
from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch
import torch.nn.functional as F
import torchvision.transforms.functional as TF

from .config import ViewConfig as ViewSpec

__all__ = ["ViewSpec", "View", "ViewSet", "make_views", "sample_crop_box", "resize",
           "normalize", "denormalize", "write_provenance"]


@dataclass
class View:
    image: torch.Tensor
    kind: str
    box: tuple
    record: dict = field(default_factory=dict)


@dataclass
class ViewSet:
    views: list

    @property
    def global_views(self) -> list:
        return [v for v in self.views if v.kind == "global"]

    @property
    def local_views(self) -> list:
        return [v for v in self.views if v.kind == "local"]

    def provenance(self) -> list[dict]:
        return [dict(v.record) for v in self.views]


def normalize(image: torch.Tensor, mean, std) -> torch.Tensor:
    m = torch.as_tensor(mean, dtype=image.dtype).view(-1, 1, 1)
    s = torch.as_tensor(std, dtype=image.dtype).view(-1, 1, 1)
    return (image - m) / s


def denormalize(image: torch.Tensor, mean, std) -> torch.Tensor:
    m = torch.as_tensor(mean, dtype=image.dtype).view(-1, 1, 1)
    s = torch.as_tensor(std, dtype=image.dtype).view(-1, 1, 1)
    return image * s + m


def resize(image: torch.Tensor, size) -> torch.Tensor:
    if tuple(image.shape[-2:]) == tuple(size):
        return image.clone()
    return F.interpolate(image.unsqueeze(0), size=tuple(size), mode="bilinear",
                         align_corners=False, antialias=True).squeeze(0)


def _fit_dims(H: int, W: int, area: float, aspect: float, lo: float, hi: float):
    """Integer crop ``(h, w)`` of roughly ``area * H * W`` pixels, or None if infeasible."""
    total = H * W
    h = int(round(math.sqrt(area * total * aspect)))
    if not 1 <= h <= H:
        return None
    w_lo = max(1, math.ceil(lo * total / h - 1e-9))
    w_hi = min(W, math.floor(hi * total / h + 1e-9))
    if w_lo > w_hi:
        return None
    w = min(max(int(round(area * total / h)), w_lo), w_hi)
    return h, w


def sample_crop_box(H: int, W: int, scale, aspect: float, rng: np.random.Generator):
    """Random ``(top, left, h, w)`` whose area ratio lies inside ``scale``."""
    lo, hi = scale
    for _ in range(10):
        area = rng.uniform(lo, hi)
        dims = _fit_dims(H, W, area, aspect, lo, hi)
        if dims is not None:
            break
    else:
        # target aspect does not fit; keep the image's own aspect
        dims = None
        for _ in range(10):
            area = rng.uniform(lo, hi)
            dims = _fit_dims(H, W, area, H / W, lo, hi)
            if dims is not None:
                break
        if dims is None:
            dims = (H, W)
    h, w = dims
    top = int(rng.integers(0, H - h + 1))
    left = int(rng.integers(0, W - w + 1))
    return top, left, h, w


def _photometric(img: torch.Tensor, spec: ViewSpec, rng: np.random.Generator):
    record = {}
    if rng.random() < spec.color_jitter_prob:
        b, c = rng.uniform(0.6, 1.4), rng.uniform(0.6, 1.4)
        s, hue = rng.uniform(0.8, 1.2), rng.uniform(-0.1, 0.1)
        img = TF.adjust_brightness(img, b)
        img = TF.adjust_contrast(img, c)
        img = TF.adjust_saturation(img, s)
        img = TF.adjust_hue(img, hue)
        record["color_jitter"] = {"brightness": b, "contrast": c, "saturation": s, "hue": hue}
    if rng.random() < spec.grayscale_prob:
        img = TF.rgb_to_grayscale(img, num_output_channels=3)
        record["grayscale"] = True
    if rng.random() < spec.blur_prob:
        sigma = rng.uniform(0.1, 2.0)
        k = 2 * int(math.ceil(2 * sigma)) + 1
        k = min(k, 2 * ((min(img.shape[-2:]) - 1) // 2) + 1)
        img = TF.gaussian_blur(img, [k, k], [sigma, sigma])
        record["blur"] = {"sigma": sigma, "kernel": k}
    if rng.random() < spec.solarize_prob:
        img = TF.solarize(img, 0.5)
        record["solarize"] = {"threshold": 0.5}
    return img.clamp(0.0, 1.0), record


def _make_view(image, kind, spec: ViewSpec, rng):
    size = tuple(spec.global_size if kind == "global" else spec.local_size)
    scale = spec.global_scale if kind == "global" else spec.local_scale
    H, W = image.shape[-2:]
    record = {"kind": kind, "fallback": None}
    if H < size[0] or W < size[1]:
        factor = max(size[0] / H, size[1] / W)
        new = (int(math.ceil(H * factor)), int(math.ceil(W * factor)))
        image = resize(image, new)
        H, W = new
        record["fallback"] = {"resize_then_crop": list(new)}
    top, left, h, w = sample_crop_box(H, W, scale, size[0] / size[1], rng)
    crop = resize(image[:, top:top + h, left:left + w], size)
    flipped = bool(rng.random() < spec.flip_prob)
    if flipped:
        crop = crop.flip(-1)
    record.update(box=[top, left, h, w], area_ratio=h * w / (H * W), flipped=flipped, photometric={})
    if kind == "local":
        crop, record["photometric"] = _photometric(crop, spec, rng)
    return View(normalize(crop, spec.mean, spec.std), kind, (top, left, h, w), record)


def make_views(image: torch.Tensor, spec: ViewSpec, rng: np.random.Generator) -> ViewSet:
    """``num_global`` global then ``num_local`` local views of a ``(3, H, W)`` image in [0, 1]."""
    spec.validate()
    views = [_make_view(image, "global", spec, rng) for _ in range(spec.num_global)]
    views += [_make_view(image, "local", spec, rng) for _ in range(spec.num_local)]
    for i, v in enumerate(views):
        v.record["index"] = i
    return ViewSet(views)


def write_provenance(path, sample_id, viewset: ViewSet, iteration: int | None = None) -> None:
    """Append one JSON line describing every view of ``sample_id``."""
    rec = {"sample": sample_id, "views": viewset.provenance()}
    if iteration is not None:
        rec["iter"] = iteration
    with open(Path(path), "a") as fh:
        fh.write(json.dumps(rec, sort_keys=True) + "\n")
