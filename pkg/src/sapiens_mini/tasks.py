"""Per-task glue between samples, heads, losses and metrics.

Every adapter turns a list of :class:`TaskSample` into batched targets,
computes its loss from a head output, converts head outputs back to
sample-space predictions, and scores predictions against ground truth.
Pointmaps are supervised in the focal-free space ``P / f``.
"""
from __future__ import annotations

import numpy as np
import torch
import torch.nn as nn

from . import evaluation as ev
from .config import BackboneConfig, FinetuneConfig
from .errors import ConfigError, DegenerateInputError
from .heads import (NUM_SEG_CLASSES, TASKS, DenseHead, HeatmapHead, HeatmapHeadConfig, albedo_loss,
                    generate_heatmaps, normal_loss, pointmap_loss, pose_loss, seg_class_weights, seg_loss)
from .synth import KEYPOINT_NAMES, TaskSample


def _stack(arrays, dtype=torch.float32) -> torch.Tensor:
    return torch.as_tensor(np.stack(arrays), dtype=dtype)


def _require(samples, attr):
    if any(getattr(s, attr) is None for s in samples):
        raise DegenerateInputError(f"samples lack {attr!r} ground truth")


class TaskAdapter:
    task = ""

    def __init__(self, model_cfg: BackboneConfig, ft: FinetuneConfig | None = None):
        self.model_cfg = model_cfg
        self.ft = ft or FinetuneConfig(task=self.task)

    def build_head(self) -> nn.Module:
        return DenseHead(self.task, self.model_cfg.hidden_size, self.model_cfg.output_patch_size)

    def prepare(self, samples) -> None:
        """Hook for statistics that depend on the training split."""

    def targets(self, samples, dtype=torch.float32) -> dict:
        raise NotImplementedError

    def loss(self, output, targets: dict) -> torch.Tensor:
        raise NotImplementedError

    def predictions(self, output, samples) -> list:
        raise NotImplementedError

    def metrics(self, preds: list, samples) -> dict:
        raise NotImplementedError

    def headline(self) -> tuple[str, bool]:
        """Name of the metric to report first and whether higher is better."""
        raise NotImplementedError


class NormalAdapter(TaskAdapter):
    task = "normal"

    def targets(self, samples, dtype=torch.float32):
        _require(samples, "normal")
        return {"normal": _stack([s.normal for s in samples], dtype), "fg": torch.as_tensor(np.stack([s.fg for s in samples]))}

    def loss(self, output, t):
        return normal_loss(output, t["normal"], t["fg"])

    def predictions(self, output, samples):
        return [o for o in output.detach().double().cpu().numpy()]

    def metrics(self, preds, samples):
        return ev.normal_metrics(np.stack(preds), np.stack([s.normal for s in samples]),
                                 np.stack([s.fg for s in samples]))

    def headline(self):
        return "mean", False


class AlbedoAdapter(TaskAdapter):
    task = "albedo"

    def targets(self, samples, dtype=torch.float32):
        _require(samples, "albedo")
        return {"albedo": _stack([s.albedo for s in samples], dtype), "fg": torch.as_tensor(np.stack([s.fg for s in samples]))}

    def loss(self, output, t):
        return albedo_loss(output, t["albedo"], t["fg"])

    def predictions(self, output, samples):
        return [o for o in output.detach().double().cpu().numpy()]

    def metrics(self, preds, samples):
        return ev.albedo_metrics(np.stack(preds), np.stack([s.albedo for s in samples]),
                                 np.stack([s.fg for s in samples]))

    def headline(self):
        return "mae", False


class PointmapAdapter(TaskAdapter):
    task = "pointmap"

    def targets(self, samples, dtype=torch.float32):
        _require(samples, "pointmap")
        _require(samples, "focal")
        return {"pointmap": _stack([s.pointmap / s.focal for s in samples], dtype),
                "fg": torch.as_tensor(np.stack([s.fg for s in samples]))}

    def loss(self, output, t):
        p_tilde, s = output
        return pointmap_loss(p_tilde, s, t["pointmap"], t["fg"])

    def predictions(self, output, samples):
        p_tilde, s = output
        full = (p_tilde * s.reshape(-1, 1, 1, 1)).detach().double().cpu().numpy()
        return [full[i] * samples[i].focal for i in range(len(samples))]

    def metrics(self, preds, samples):
        return ev.pointmap_metrics(np.stack([p / s.focal for p, s in zip(preds, samples)]),
                                   np.stack([s.pointmap / s.focal for s in samples]),
                                   np.stack([s.fg for s in samples]))

    def headline(self):
        return "l2", False


class SegAdapter(TaskAdapter):
    task = "seg"

    def __init__(self, model_cfg, ft=None):
        super().__init__(model_cfg, ft)
        self.class_weights = None

    def prepare(self, samples):
        _require(samples, "seg")
        self.class_weights = seg_class_weights([s.seg for s in samples], NUM_SEG_CLASSES)

    def targets(self, samples, dtype=torch.float32):
        _require(samples, "seg")
        return {"seg": torch.as_tensor(np.stack([s.seg for s in samples]), dtype=torch.long)}

    def loss(self, output, t):
        w = None if self.class_weights is None else self.class_weights.to(output.dtype)
        return seg_loss(output, t["seg"], w)

    def predictions(self, output, samples):
        return [o for o in output.detach().argmax(dim=1).cpu().numpy()]

    def metrics(self, preds, samples):
        miou, macc = ev.miou_macc(list(preds), [s.seg for s in samples], NUM_SEG_CLASSES)
        return {"miou": miou, "macc": macc}

    def headline(self):
        return "miou", True


class PoseAdapter(TaskAdapter):
    task = "pose"

    @property
    def heatmap_shape(self):
        gh, gw = self.model_cfg.pooled_grid
        return gh * 4, gw * 4

    @property
    def stride(self) -> float:
        return self.model_cfg.output_patch_size / 4.0

    def build_head(self):
        w = self.ft.head_channels
        kw = {} if not w else {"deconv_channels": (w, w), "conv_channels": (w, w, w)}
        return HeatmapHead(HeatmapHeadConfig(self.model_cfg.hidden_size, len(KEYPOINT_NAMES),
                                             sigma=self.ft.heatmap_sigma, stride=4, **kw))

    def targets(self, samples, dtype=torch.float32):
        _require(samples, "keypoints")
        H, W = self.heatmap_shape
        maps, weights = zip(*(generate_heatmaps(s.keypoints, H, W, self.ft.heatmap_sigma, self.stride)
                              for s in samples))
        return {"heatmaps": _stack(maps, dtype), "visibility": _stack(weights, dtype)}

    def loss(self, output, t):
        return pose_loss(output, t["heatmaps"], t["visibility"], self.ft.ohem_fraction)

    def predictions(self, output, samples):
        hms = output.detach().double().cpu().numpy()
        out = []
        for hm in hms:
            kp = ev.decode_heatmaps(hm, 1)
            kp[:, :2] *= self.stride
            kp[:, 2] = 2.0
            out.append(kp)
        return out

    def metrics(self, preds, samples):
        scores = []
        for p, s in zip(preds, samples):
            if s.keypoints is not None and (np.asarray(s.keypoints)[:, 2] > 0).any():
                scores.append(ev.pck(p, s.keypoints, s.bbox))
        if not scores:
            raise DegenerateInputError("no visible keypoints in the evaluation split")
        return {"pck": 100.0 * float(np.mean(scores))}

    def headline(self):
        return "pck", True


_ADAPTERS = {a.task: a for a in (PoseAdapter, SegAdapter, PointmapAdapter, NormalAdapter, AlbedoAdapter)}


def adapter_for(task: str, model_cfg: BackboneConfig, ft: FinetuneConfig | None = None) -> TaskAdapter:
    if task not in _ADAPTERS:
        raise ConfigError(f"unknown task {task!r}; expected one of {TASKS}")
    return _ADAPTERS[task](model_cfg, ft)


def evaluate_predictions(task: str, preds: list, samples: list[TaskSample]) -> dict:
    """Score sample-space predictions (as stored in a dataset directory) against ground truth."""
    cfg = BackboneConfig()
    adapter = adapter_for(task, cfg)
    return adapter.metrics(preds, samples)


def prediction_of(sample: TaskSample, task: str):
    """The field of ``sample`` that holds a prediction for ``task``."""
    return {"pose": sample.keypoints, "seg": sample.seg, "pointmap": sample.pointmap,
            "normal": sample.normal, "albedo": sample.albedo}[task]
