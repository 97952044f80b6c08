"""Pretraining and fine-tuning loops with checkpoint/resume."""
from __future__ import annotations

import json
from pathlib import Path

import numpy as np
import torch
import torch.nn as nn

from .augmentation import make_views
from .backbone import Backbone
from .checkpoint import capture_rng, load_checkpoint, restore_rng, save_checkpoint
from .config import RunConfig, ScheduleConfig
from .errors import ConfigError
from .masking import MaskSpec, sample_mask
from .objectives import PretrainObjective, TeacherState, center_update, ema_update, teacher_temperature
from .optim import AdamW, clip_grads_, lr_schedule, param_groups
from .synth import TaskSample, generate_dataset
from .tasks import adapter_for

STEP_ORDER = ("forward", "loss", "backward", "clip", "optimizer_step", "ema_update", "center_update")


def images_tensor(images, mean, std, dtype=torch.float32) -> torch.Tensor:
    """Stack ``(3, H, W)`` images in [0, 1] and normalize them."""
    batch = torch.as_tensor(np.stack([np.asarray(im) for im in images]), dtype=dtype)
    m = torch.as_tensor(mean, dtype=dtype).view(1, -1, 1, 1)
    s = torch.as_tensor(std, dtype=dtype).view(1, -1, 1, 1)
    return (batch - m) / s


def _optimizer_tensors(opt: AdamW, named: dict) -> tuple[dict, dict]:
    tensors, steps = {}, {}
    for name, p in named.items():
        st = opt.state.get(p)
        if st:
            tensors[f"optim/{name}/exp_avg"] = st["exp_avg"]
            tensors[f"optim/{name}/exp_avg_sq"] = st["exp_avg_sq"]
            steps[name] = st["step"]
    return tensors, steps


def _load_optimizer(opt: AdamW, named: dict, tensors: dict, steps: dict) -> None:
    for name, step in steps.items():
        p = named[name]
        opt.state[p] = {"step": step,
                        "exp_avg": tensors[f"optim/{name}/exp_avg"].clone(),
                        "exp_avg_sq": tensors[f"optim/{name}/exp_avg_sq"].clone()}


def _load_module(module: nn.Module, prefix: str, tensors: dict) -> None:
    state = {k[len(prefix):]: v for k, v in tensors.items() if k.startswith(prefix)}
    module.load_state_dict(state, strict=True)


class _Loop:
    """Shared bookkeeping: seeds, optimizer, iteration counter, logging and checkpoints."""

    kind = ""

    def __init__(self, cfg: RunConfig):
        cfg.validate()
        self.cfg = cfg
        torch.manual_seed(cfg.seed)
        self.rng = np.random.default_rng(cfg.seed)
        self.iteration = 0
        self.history: list[dict] = []

    def _modules(self) -> dict:
        raise NotImplementedError

    def _trainable(self) -> nn.Module:
        raise NotImplementedError

    def _build_optimizer(self, lr: float):
        o = self.cfg.optimizer
        return AdamW(param_groups(self._trainable().named_parameters(), o.weight_decay),
                     lr=lr, betas=o.betas, eps=o.eps, weight_decay=o.weight_decay)

    def step(self) -> dict:
        raise NotImplementedError

    def run(self, iters: int, log_path=None, ckpt_dir=None, ckpt_every: int = 0, callback=None) -> list[dict]:
        log = open(log_path, "a") if log_path else None
        try:
            for _ in range(iters):
                rec = self.step()
                if log and (rec["iter"] % max(self.cfg.log_every, 1) == 0 or rec["iter"] == 1):
                    log.write(json.dumps(rec, sort_keys=True) + "\n")
                    log.flush()
                if ckpt_dir and ckpt_every and self.iteration % ckpt_every == 0:
                    self.save(Path(ckpt_dir) / f"ckpt_{self.iteration:06d}.bin")
                if callback is not None:
                    callback(rec)
        finally:
            if log:
                log.close()
        return self.history

    # -- checkpoints
    def state_tensors(self) -> tuple[dict, dict]:
        tensors = {}
        for prefix, module in self._modules().items():
            for k, v in module.state_dict().items():
                tensors[f"{prefix}/{k}"] = v
        named = dict(self._trainable().named_parameters())
        opt_t, steps = _optimizer_tensors(self.optimizer, named)
        tensors.update(opt_t)
        rng_meta, rng_t = capture_rng(self.rng)
        tensors.update(rng_t)
        meta = {"kind": self.kind, "iter": self.iteration, "config_hash": self.cfg.fingerprint(),
                "rng": rng_meta, "optimizer_steps": steps, "teacher": "teacher" in self._modules()}
        return tensors, meta

    def save(self, path) -> Path:
        tensors, meta = self.state_tensors()
        return save_checkpoint(path, tensors, meta)

    def load(self, path, strict_config: bool = True) -> dict:
        tensors, meta = load_checkpoint(path, self.cfg.fingerprint() if strict_config else None)
        if meta.get("kind") != self.kind:
            raise ConfigError(f"checkpoint holds a {meta.get('kind')!r} run, not {self.kind!r}")
        for prefix, module in self._modules().items():
            _load_module(module, prefix + "/", tensors)
        _load_optimizer(self.optimizer, dict(self._trainable().named_parameters()), tensors,
                        meta["optimizer_steps"])
        restore_rng(meta["rng"], tensors, self.rng)
        self.iteration = int(meta["iter"])
        return meta


class Pretrainer(_Loop):
    """Joint masked-reconstruction + self-distillation loop.

    Every iteration runs, in order: forward, loss, backward, clip, optimizer
    step, EMA update, center update. ``transcript`` records that order.
    """

    kind = "pretrain"

    def __init__(self, cfg: RunConfig, images=None):
        super().__init__(cfg)
        if images is None:
            data = generate_dataset(cfg.data.synthetic_count, cfg.seed + 1, cfg.data.image_size)
            images = [s.image for s in data]
        if not len(images):
            raise ConfigError("no training images")
        self.images = [torch.as_tensor(np.asarray(im), dtype=torch.float32) for im in images]
        self.objective = PretrainObjective(cfg.model, cfg.head)
        t = cfg.teacher
        self.teacher = TeacherState(self.objective.encoder, self.objective.head, t.ema_momentum, t.center_momentum)
        self.optimizer = self._build_optimizer(cfg.optimizer.lr)
        self.mask_spec = MaskSpec(cfg.mask.ratio, cfg.mask.blockwise_prob, tuple(cfg.mask.block_side_range))
        self.transcript: list[str] = []

    def _modules(self):
        return {"student": self.objective, "teacher": self.teacher}

    def _trainable(self):
        return self.objective

    def _mark(self, event: str) -> None:
        self.transcript.append(event)

    def mask_grid(self) -> tuple[int, int]:
        m = self.cfg.model
        h, w = self.cfg.views.global_size
        gh, gw = h // m.patch_size, w // m.patch_size
        side = m.layout.window_side
        return (gh // side, gw // side) if side else (gh, gw)

    def sample_batch(self):
        cfg = self.cfg
        n = len(self.images)
        B = min(cfg.data.batch_size, n)
        idx = self.rng.permutation(n)[:B]
        views = [make_views(self.images[i], cfg.views, self.rng) for i in idx]
        G, L = cfg.views.num_global, cfg.views.num_local
        globals_ = torch.stack([torch.stack([vs.views[g].image for vs in views]) for g in range(G)])
        locals_ = torch.stack([torch.stack([vs.views[G + l].image for vs in views]) for l in range(L)]) if L else None
        gh, gw = self.mask_grid()
        masks = [[sample_mask(gh, gw, self.mask_spec, self.rng) for _ in range(B)] for _ in range(G)]
        return globals_, locals_, masks

    def step(self) -> dict:
        cfg = self.cfg
        it = self.iteration
        lr = lr_schedule(it, cfg.schedule, cfg.optimizer.lr)
        self.optimizer.set_lr(lr)
        t_temp = teacher_temperature(it, cfg.teacher)
        globals_, locals_, masks = self.sample_batch()
        self.objective.train()
        self._mark("forward")
        out = self.objective(globals_, locals_, masks, self.teacher, cfg.teacher.student_temp, t_temp, cfg.loss)
        self._mark("loss")
        loss = out.total
        self.optimizer.zero_grad(set_to_none=True)
        self._mark("backward")
        loss.backward()
        self._mark("clip")
        gnorm = clip_grads_(self.objective.parameters(), cfg.grad_clip)
        self._mark("optimizer_step")
        self.optimizer.step()
        self._mark("ema_update")
        ema_update(self.teacher, (self.objective.encoder, self.objective.head), self.teacher.ema_momentum)
        self._mark("center_update")
        center_update(self.teacher.center, out.teacher_logits.flatten(0, 1), self.teacher.center_momentum)
        self.iteration += 1
        rec = {"iter": self.iteration, "total": loss.item(), "mae": out.mae.item(), "cl": out.cl.item(),
               "koleo": out.koleo.item(), "teacher_temp": t_temp, "lr": lr, "grad_norm": gnorm,
               "teacher_entropy": out.teacher_entropy, "teacher_marginal_entropy": out.teacher_marginal_entropy}
        self.history.append(rec)
        return rec

    @property
    def encoder(self) -> Backbone:
        return self.objective.encoder


class DenseModel(nn.Module):
    """Backbone followed by a task head on its dense feature map."""

    def __init__(self, backbone: Backbone, head: nn.Module):
        super().__init__()
        self.backbone = backbone
        self.head = head

    def forward(self, images):
        return self.head(self.backbone.feature_map(images))


class FineTuner(_Loop):
    """Supervised training of backbone + one task head on :class:`TaskSample` data."""

    kind = "finetune"

    def __init__(self, cfg: RunConfig, task: str | None = None, samples: list[TaskSample] | None = None,
                 backbone: Backbone | None = None):
        super().__init__(cfg)
        ft = cfg.finetune
        self.task = task or ft.task
        m = cfg.model
        if samples is None:
            samples = generate_dataset(ft.synthetic_count, cfg.seed + 2, (m.image_height, m.image_width))
        if not samples:
            raise ConfigError("no training samples")
        if tuple(samples[0].image.shape[-2:]) != (m.image_height, m.image_width):
            raise ConfigError(f"samples are {samples[0].image.shape[-2:]} but the model expects "
                              f"{m.image_height}x{m.image_width}")
        self.samples = samples
        self.adapter = adapter_for(self.task, m, ft)
        self.adapter.prepare(samples)
        bb = Backbone(m)
        if backbone is not None:
            bb.load_state_dict(backbone.state_dict())
        self.model = DenseModel(bb, self.adapter.build_head())
        self.schedule = ScheduleConfig(warmup_iters=min(ft.warmup_iters, ft.iters), total_iters=max(ft.iters, 1),
                                       min_lr=cfg.schedule.min_lr)
        self.optimizer = self._build_optimizer(ft.lr)
        self._order: list[int] = []

    def _modules(self):
        return {"model": self.model}

    def _trainable(self):
        return self.model

    def _next_indices(self, B: int) -> list[int]:
        out = []
        while len(out) < B:
            if not self._order:
                self._order = self.rng.permutation(len(self.samples)).tolist()
            out.append(self._order.pop(0))
        return out

    def state_tensors(self):
        tensors, meta = super().state_tensors()
        meta["order"] = list(self._order)
        meta["task"] = self.task
        return tensors, meta

    def load(self, path, strict_config: bool = True):
        meta = super().load(path, strict_config)
        self._order = list(meta.get("order", []))
        return meta

    def batch(self, samples):
        v = self.cfg.views
        return images_tensor([s.image for s in samples], v.mean, v.std), self.adapter.targets(samples)

    def step(self) -> dict:
        ft = self.cfg.finetune
        it = self.iteration
        lr = lr_schedule(it, self.schedule, ft.lr)
        self.optimizer.set_lr(lr)
        chosen = [self.samples[i] for i in self._next_indices(min(ft.batch_size, len(self.samples)))]
        images, targets = self.batch(chosen)
        self.model.train()
        loss = self.adapter.loss(self.model(images), targets)
        self.optimizer.zero_grad(set_to_none=True)
        loss.backward()
        gnorm = clip_grads_(self.model.parameters(), self.cfg.grad_clip)
        self.optimizer.step()
        self.iteration += 1
        rec = {"iter": self.iteration, "task": self.task, "loss": loss.item(), "lr": lr, "grad_norm": gnorm}
        self.history.append(rec)
        return rec

    @torch.no_grad()
    def predict(self, samples, batch_size: int = 32) -> list:
        self.model.eval()
        v = self.cfg.views
        preds = []
        for i in range(0, len(samples), batch_size):
            chunk = samples[i:i + batch_size]
            out = self.model(images_tensor([s.image for s in chunk], v.mean, v.std))
            preds += self.adapter.predictions(out, chunk)
        return preds

    def evaluate(self, samples=None) -> dict:
        samples = self.samples if samples is None else samples
        return self.adapter.metrics(self.predict(samples), samples)


def load_backbone(path, cfg: RunConfig) -> Backbone:
    """Student encoder weights from a pretrain checkpoint, or the backbone of a fine-tune checkpoint."""
    tensors, meta = load_checkpoint(path)
    prefix = {"pretrain": "student/encoder.", "finetune": "model/backbone."}.get(meta.get("kind"))
    if prefix is None:
        raise ConfigError(f"{path}: unknown checkpoint kind {meta.get('kind')!r}")
    bb = Backbone(cfg.model)
    try:
        _load_module(bb, prefix, tensors)
    except RuntimeError as exc:
        raise ConfigError(f"{path}: backbone weights do not match the model config") from exc
    return bb

