"""scikit-learn style wrappers around the pretraining and fine-tuning loops."""
from __future__ import annotations

import numpy as np
import torch
from sklearn.base import BaseEstimator, TransformerMixin
from sklearn.utils.validation import check_is_fitted

from .augmentation import resize
from .config import RunConfig, load_run_config
from .errors import ConfigError
from .synth import TaskSample
from .training import FineTuner, Pretrainer, images_tensor


def check_images(X) -> np.ndarray:
    """Validate an image batch and return it as ``(N, 3, H, W)`` float64 in [0, 1].

    Accepts channel-first or channel-last arrays; ``uint8`` input is rescaled.
    """
    if isinstance(X, torch.Tensor):
        X = X.detach().cpu().numpy()
    if isinstance(X, (list, tuple)) and X and isinstance(X[0], TaskSample):
        X = [s.image for s in X]
    arr = np.asarray(X)
    if arr.ndim == 3:
        arr = arr[None]
    if arr.ndim != 4:
        raise ValueError(f"expected a batch of images with 4 dims, got shape {arr.shape}")
    if arr.shape[1] != 3 and arr.shape[-1] == 3:
        arr = np.moveaxis(arr, -1, 1)
    if arr.shape[1] != 3:
        raise ValueError(f"expected 3 color channels, got shape {arr.shape}")
    if arr.shape[0] == 0:
        raise ValueError("empty image batch")
    if arr.dtype == np.uint8:
        arr = arr / 255.0
    arr = arr.astype(np.float64)
    if not np.isfinite(arr).all():
        raise ValueError("images contain non-finite values")
    if arr.min() < 0 or arr.max() > 1:
        raise ValueError("image values must lie in [0, 1]")
    return arr


def check_samples(samples) -> list[TaskSample]:
    samples = list(samples)
    if not samples or not all(isinstance(s, TaskSample) for s in samples):
        raise ValueError("expected a non-empty sequence of TaskSample")
    return samples


def _resolve(config, overrides, random_state) -> RunConfig:
    cfg = config if isinstance(config, RunConfig) else load_run_config(config)
    if overrides:
        cfg = cfg.with_overrides(list(overrides))
    if random_state is not None:
        cfg = cfg.with_overrides([f"seed={int(random_state)}"])
    return cfg


class SapiensPretrainer(TransformerMixin, BaseEstimator):
    """Pretrains an encoder on unlabeled images; ``transform`` yields [CLS] embeddings."""

    def __init__(self, config="tiny", max_iter=None, overrides=(), random_state=None):
        self.config = config
        self.max_iter = max_iter
        self.overrides = overrides
        self.random_state = random_state

    def fit(self, X, y=None):
        images = check_images(X)
        cfg = _resolve(self.config, self.overrides, self.random_state)
        self.trainer_ = Pretrainer(cfg, list(images))
        iters = cfg.schedule.total_iters if self.max_iter is None else int(self.max_iter)
        self.history_ = self.trainer_.run(iters)
        self.config_ = cfg
        self.n_features_out_ = cfg.model.hidden_size
        return self

    @property
    def encoder_(self):
        return self.trainer_.encoder

    @torch.no_grad()
    def transform(self, X) -> np.ndarray:
        check_is_fitted(self, "trainer_")
        images = check_images(X)
        m = self.config_.model
        batch = torch.stack([resize(torch.as_tensor(im, dtype=torch.float32), (m.image_height, m.image_width))
                             for im in images])
        enc = self.encoder_
        enc.eval()
        out = enc.encode(images_tensor(batch.numpy(), self.config_.views.mean, self.config_.views.std)).cls
        enc.train()
        return out.double().numpy()


class DenseTaskEstimator(BaseEstimator):
    """Backbone + task head trained on :class:`TaskSample` data.

    ``fit`` and ``score`` take samples with ground truth; ``predict`` takes
    images (or samples) and returns per-sample predictions in sample space.
    ``score`` is the task's headline metric, negated when lower is better.
    """

    def __init__(self, task="normal", config="tiny", max_iter=None, overrides=(), backbone=None,
                 random_state=None):
        self.task = task
        self.config = config
        self.max_iter = max_iter
        self.overrides = overrides
        self.backbone = backbone
        self.random_state = random_state

    def fit(self, X, y=None):
        samples = check_samples(X if y is None else y)
        cfg = _resolve(self.config, self.overrides, self.random_state)
        if self.max_iter is not None:
            cfg = cfg.with_overrides([f"finetune.iters={int(self.max_iter)}"])
        self.tuner_ = FineTuner(cfg, self.task, samples, self.backbone)
        self.history_ = self.tuner_.run(cfg.finetune.iters)
        return self

    def predict(self, X) -> list:
        check_is_fitted(self, "tuner_")
        if isinstance(X, (list, tuple)) and X and isinstance(X[0], TaskSample):
            samples = list(X)
        else:
            samples = [TaskSample(image=im, focal=None) for im in check_images(X)]
        if self.task == "pointmap" and any(s.focal is None for s in samples):
            raise ConfigError("pointmap predictions need the camera focal length of each sample")
        return self.tuner_.predict(samples)

    def evaluate(self, samples) -> dict:
        check_is_fitted(self, "tuner_")
        return self.tuner_.evaluate(check_samples(samples))

    def score(self, X, y=None) -> float:
        metrics = self.evaluate(X if y is None else y)
        name, higher = self.tuner_.adapter.headline()
        return metrics[name] if higher else -metrics[name]
