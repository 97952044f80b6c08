"""AdamW with zero-decay groups, warmup + cosine schedule, global-norm clipping."""
from __future__ import annotations

import math
from dataclasses import dataclass, field

import torch

from .config import ScheduleConfig
from .errors import NaNGradientError

NO_DECAY_KEYWORDS = ("pos_embed", "cls_token", "cls_pos", "mask_token")


def lr_schedule(iteration: int, schedule: ScheduleConfig, base_lr: float) -> float:
    """Linear warmup from 0 to ``base_lr``, then cosine decay to ``min_lr`` at ``total_iters``."""
    w, T, lo = schedule.warmup_iters, schedule.total_iters, schedule.min_lr
    it = min(max(iteration, 0), T)
    if it < w:
        return base_lr * it / w
    if T == w:
        return lo
    progress = (it - w) / (T - w)
    return lo + (base_lr - lo) * 0.5 * (1.0 + math.cos(math.pi * progress))


def global_norm(tensors) -> float:
    total = 0.0
    for t in tensors:
        if t is not None:
            total += float(t.detach().double().pow(2).sum())
    return math.sqrt(total)


def clip_global_norm(grads, max_norm: float = 5.0):
    """Return ``(scaled, norm)``; tensors are scaled by ``max_norm / norm`` only when the norm exceeds it."""
    norm = global_norm(grads)
    if norm <= max_norm:
        return [g for g in grads], norm
    factor = max_norm / norm
    return [None if g is None else g * factor for g in grads], norm


def clip_grads_(parameters, max_norm: float = 5.0) -> float:
    """In-place version over ``.grad`` fields; returns the pre-clip norm."""
    params = [p for p in parameters if p.grad is not None]
    norm = global_norm(p.grad for p in params)
    if norm > max_norm:
        factor = max_norm / norm
        for p in params:
            p.grad.mul_(factor)
    return norm


@dataclass
class AdamWHyper:
    lr: float = 1e-4
    betas: tuple = (0.9, 0.95)
    eps: float = 1e-8
    weight_decay: float = 0.05


@dataclass
class AdamWState:
    step: int = 0
    exp_avg: list = field(default_factory=list)
    exp_avg_sq: list = field(default_factory=list)


def _check_finite(grads, names=None):
    bad = [names[i] if names else str(i) for i, g in enumerate(grads)
           if g is not None and not bool(torch.isfinite(g).all())]
    if bad:
        raise NaNGradientError(f"non-finite gradient in {len(bad)} tensor(s): {', '.join(bad[:8])}")


def _update_(p, g, m, v, step, lr, betas, eps, wd):
    b1, b2 = betas
    if wd:
        p.mul_(1.0 - lr * wd)
    m.mul_(b1).add_(g, alpha=1 - b1)
    v.mul_(b2).addcmul_(g, g, value=1 - b2)
    m_hat = m / (1 - b1 ** step)
    v_hat = v / (1 - b2 ** step)
    p.sub_(lr * m_hat / (v_hat.sqrt() + eps))


def adamw_step(params, grads, state: AdamWState | None, hyper: AdamWHyper, decay_mask=None,
               names=None):
    """Functional AdamW: returns ``(new_params, new_state)`` without touching the inputs.

    ``decay_mask[i]`` False exempts tensor ``i`` from weight decay.
    """
    _check_finite(grads, names)
    if state is None or not state.exp_avg:
        state = AdamWState(0, [torch.zeros_like(p) for p in params], [torch.zeros_like(p) for p in params])
    step = state.step + 1
    new_p, new_m, new_v = [], [], []
    for i, (p, g) in enumerate(zip(params, grads)):
        p, m, v = p.detach().clone(), state.exp_avg[i].clone(), state.exp_avg_sq[i].clone()
        wd = hyper.weight_decay if decay_mask is None or decay_mask[i] else 0.0
        _update_(p, g.detach(), m, v, step, hyper.lr, hyper.betas, hyper.eps, wd)
        new_p.append(p)
        new_m.append(m)
        new_v.append(v)
    return new_p, AdamWState(step, new_m, new_v)


class AdamW(torch.optim.Optimizer):
    """In-place optimizer built on the same update rule as :func:`adamw_step`."""

    def __init__(self, param_groups, lr=1e-4, betas=(0.9, 0.95), eps=1e-8, weight_decay=0.05):
        super().__init__(param_groups, dict(lr=lr, betas=tuple(betas), eps=eps, weight_decay=weight_decay))

    @torch.no_grad()
    def step(self, closure=None):
        names = [getattr(p, "_param_name", str(i)) for g in self.param_groups for i, p in enumerate(g["params"])]
        _check_finite([p.grad for g in self.param_groups for p in g["params"]], names)
        for group in self.param_groups:
            for p in group["params"]:
                if p.grad is None:
                    continue
                st = self.state[p]
                if not st:
                    st["step"] = 0
                    st["exp_avg"] = torch.zeros_like(p)
                    st["exp_avg_sq"] = torch.zeros_like(p)
                st["step"] += 1
                _update_(p, p.grad, st["exp_avg"], st["exp_avg_sq"], st["step"], group["lr"],
                         group["betas"], group["eps"], group["weight_decay"])

    def set_lr(self, lr: float) -> None:
        for group in self.param_groups:
            group["lr"] = lr


def is_no_decay(name: str, param: torch.Tensor) -> bool:
    """Norm gains, biases, positional tables and special tokens are exempt from decay."""
    return param.ndim <= 1 or any(k in name for k in NO_DECAY_KEYWORDS)


def param_groups(named_params, weight_decay: float):
    decay, no_decay = [], []
    for name, p in named_params:
        if not p.requires_grad:
            continue
        p._param_name = name
        (no_decay if is_no_decay(name, p) else decay).append(p)
    return [{"params": decay, "weight_decay": weight_decay},
            {"params": no_decay, "weight_decay": 0.0}]
