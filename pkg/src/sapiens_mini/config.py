"""Model and run configuration.

Configs are plain dataclasses that round-trip through TOML text. The attention
layout has a compact string form, e.g. ``"w8:6,gqa4:28,full:6"`` for six
windowed layers of side 8, 28 grouped-query layers with 4 key/value groups and
six full multi-head layers.
"""
from __future__ import annotations

import copy
import dataclasses
import hashlib
import json
import math
import re
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Union

import tomli
import tomli_w

from .errors import ConfigError


@dataclass(frozen=True)
class FullAttention:
    pass


@dataclass(frozen=True)
class GroupedAttention:
    groups: int


@dataclass(frozen=True)
class WindowedAttention:
    window_side: int


LayerKind = Union[FullAttention, GroupedAttention, WindowedAttention]

_TOKEN_RE = re.compile(r"^(full|mha|gqa(\d+)|w(\d+)):(\d+)$")


@dataclass(frozen=True)
class AttentionLayout:
    layers: tuple

    @property
    def depth(self) -> int:
        return len(self.layers)

    @property
    def local_layers(self) -> int:
        k = 0
        for kind in self.layers:
            if not isinstance(kind, WindowedAttention):
                break
            k += 1
        return k

    @property
    def global_layers(self) -> int:
        return self.depth - self.local_layers

    @property
    def window_side(self) -> int | None:
        if self.local_layers == 0:
            return None
        return self.layers[0].window_side

    @property
    def pool_stride_tokens(self) -> int:
        side = self.window_side
        return 1 if side is None else side * side

    @property
    def is_windowed(self) -> bool:
        return self.local_layers > 0

    @classmethod
    def parse(cls, text: str) -> "AttentionLayout":
        text = text.strip()
        if not text:
            return cls(())
        layers: list = []
        for token in text.replace(" ", "").split(","):
            m = _TOKEN_RE.match(token)
            if m is None:
                raise ConfigError(f"bad layout token {token!r}")
            count = int(m.group(4))
            if m.group(2) is not None:
                kind: LayerKind = GroupedAttention(int(m.group(2)))
            elif m.group(3) is not None:
                kind = WindowedAttention(int(m.group(3)))
            else:
                kind = FullAttention()
            layers.extend([kind] * count)
        layout = cls(tuple(layers))
        layout.validate()
        return layout

    def to_string(self) -> str:
        parts = []
        i = 0
        while i < len(self.layers):
            kind = self.layers[i]
            j = i
            while j < len(self.layers) and self.layers[j] == kind:
                j += 1
            if isinstance(kind, GroupedAttention):
                name = f"gqa{kind.groups}"
            elif isinstance(kind, WindowedAttention):
                name = f"w{kind.window_side}"
            else:
                name = "full"
            parts.append(f"{name}:{j - i}")
            i = j
        return ",".join(parts)

    def validate(self) -> None:
        k = self.local_layers
        sides = set()
        for idx, kind in enumerate(self.layers):
            if isinstance(kind, WindowedAttention):
                if idx >= k:
                    raise ConfigError("windowed layers must form a leading block")
                if kind.window_side < 1:
                    raise ConfigError("window side must be positive")
                sides.add(kind.window_side)
            if isinstance(kind, GroupedAttention):
                if kind.groups < 1:
                    raise ConfigError("GQA group count must be positive")
                # early and late blocks stay standard multi-head attention
                if idx == 0 or idx == self.depth - 1:
                    raise ConfigError("grouped-query layers are only allowed at mid depth")
        if len(sides) > 1:
            raise ConfigError("all windowed layers must share one window side")
        if k > 0 and k == self.depth:
            raise ConfigError("windowed layout needs at least one global layer")


def default_layout(depth: int, num_heads: int, kv_groups_mid: int,
                   local_layers: int = 0, window_side: int | None = None) -> AttentionLayout:
    """Windowed leading block, GQA over the central half of the depth, full attention elsewhere."""
    lo, hi = depth // 4, (3 * depth) // 4
    layers: list = []
    for i in range(depth):
        if i < local_layers:
            layers.append(WindowedAttention(window_side))
        elif lo <= i < hi and 0 < i < depth - 1:
            layers.append(GroupedAttention(kv_groups_mid))
        else:
            layers.append(FullAttention())
    return AttentionLayout(tuple(layers))


def default_ffn_hidden(hidden_size: int) -> int:
    # 2/3 of 4*D, rounded to the nearest multiple of 64
    raw = 4 * hidden_size * 2 / 3
    return max(64, int(round(raw / 64)) * 64)


@dataclass
class BackboneConfig:
    hidden_size: int = 64
    depth: int = 4
    num_heads: int = 4
    kv_groups_mid: int = 2
    patch_size: int = 4
    image_height: int = 32
    image_width: int = 32
    layout: AttentionLayout | None = None
    ffn_hidden: int | None = None
    use_cls: bool = True
    in_chans: int = 3
    eps: float = 1e-6

    def __post_init__(self):
        if isinstance(self.layout, str):
            self.layout = AttentionLayout.parse(self.layout)
        if self.layout is None:
            self.layout = default_layout(self.depth, self.num_heads, self.kv_groups_mid)
        if self.ffn_hidden is None:
            self.ffn_hidden = default_ffn_hidden(self.hidden_size)
        self.validate()

    @property
    def grid_h(self) -> int:
        return self.image_height // self.patch_size

    @property
    def grid_w(self) -> int:
        return self.image_width // self.patch_size

    @property
    def num_tokens(self) -> int:
        return self.grid_h * self.grid_w

    @property
    def head_dim(self) -> int:
        return self.hidden_size // self.num_heads

    @property
    def pooled_grid(self) -> tuple[int, int]:
        side = self.layout.window_side or 1
        return self.grid_h // side, self.grid_w // side

    @property
    def output_patch_size(self) -> int:
        """Pixel side covered by one output token (after any windowed pooling)."""
        return self.patch_size * (self.layout.window_side or 1)

    def validate(self) -> None:
        for name in ("hidden_size", "num_heads", "kv_groups_mid", "patch_size",
                     "image_height", "image_width", "ffn_hidden", "in_chans"):
            if getattr(self, name) < 1:
                raise ConfigError(f"{name} must be positive")
        if self.depth < 0:
            raise ConfigError("depth must be non-negative")
        if self.hidden_size % self.num_heads:
            raise ConfigError("hidden_size must be divisible by num_heads")
        if self.num_heads % self.kv_groups_mid:
            raise ConfigError("num_heads must be divisible by kv_groups_mid")
        if self.image_height % self.patch_size or self.image_width % self.patch_size:
            raise ConfigError("image dims must be divisible by patch_size")
        if self.layout.depth != self.depth:
            raise ConfigError(f"layout has {self.layout.depth} layers but depth is {self.depth}")
        self.layout.validate()
        for kind in self.layout.layers:
            if isinstance(kind, GroupedAttention) and self.num_heads % kind.groups:
                raise ConfigError(f"num_heads {self.num_heads} not divisible by {kind.groups} groups")
        side = self.layout.window_side
        if side is not None:
            if self.grid_h % side or self.grid_w % side:
                raise ConfigError("token grid dims must be divisible by the window side")
            if not self.use_cls:
                raise ConfigError("windowed layout needs [CLS] for guided pooling")

    def to_dict(self) -> dict:
        d = dataclasses.asdict(self)
        d["layout"] = self.layout.to_string()
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "BackboneConfig":
        known = {f.name for f in dataclasses.fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ConfigError(f"unknown model keys: {sorted(unknown)}")
        return cls(**{**d, **_check_types("model", cls, d)})


def count_parameters(cfg: BackboneConfig) -> int:
    """Closed-form parameter count of the backbone described by ``cfg``."""
    D, F, p, C = cfg.hidden_size, cfg.ffn_hidden, cfg.patch_size, cfg.in_chans
    d = cfg.head_dim
    total = C * p * p * D + D          # patch projection + bias
    total += cfg.num_tokens * D        # positional table
    if cfg.use_cls:
        total += 2 * D                 # cls token + its positional embedding
    for kind in cfg.layout.layers:
        g = kind.groups if isinstance(kind, GroupedAttention) else cfg.num_heads
        kv = g * d
        attn = (D * D + D) + 2 * (D * kv + kv) + (D * D + D) + 2 * d
        ffn = 3 * D * F
        total += attn + ffn + 2 * D    # two block norms
    total += D                         # final norm
    return total


# ---------------------------------------------------------------------------
# run configuration


@dataclass
class OptimizerConfig:
    lr: float = 1e-4
    betas: tuple = (0.9, 0.95)
    weight_decay: float = 0.05
    eps: float = 1e-8


@dataclass
class ScheduleConfig:
    warmup_iters: int = 1000
    total_iters: int = 500_000
    min_lr: float = 1e-7


@dataclass
class LossConfig:
    mae: float = 1.0
    cls: float = 0.4
    koleo: float = 0.04


@dataclass
class ViewConfig:
    num_global: int = 2
    num_local: int = 4
    global_scale: tuple = (0.5, 1.0)
    local_scale: tuple = (0.2, 0.7)
    global_size: tuple = (64, 48)
    local_size: tuple = (32, 32)
    flip_prob: float = 0.5
    color_jitter_prob: float = 0.8
    grayscale_prob: float = 0.2
    blur_prob: float = 0.5
    solarize_prob: float = 0.2
    mean: tuple = (0.485, 0.456, 0.406)
    std: tuple = (0.229, 0.224, 0.225)

    def validate(self) -> None:
        if self.num_global < 2:
            raise ConfigError("need at least two global views")
        if self.num_local < 0:
            raise ConfigError("num_local must be non-negative")
        for lo, hi in (self.global_scale, self.local_scale):
            if not 0 < lo <= hi <= 1:
                raise ConfigError("crop scale intervals must lie within (0, 1]")
        for p in (self.flip_prob, self.color_jitter_prob, self.grayscale_prob,
                  self.blur_prob, self.solarize_prob):
            if not 0 <= p <= 1:
                raise ConfigError("augmentation probabilities must lie in [0, 1]")


@dataclass
class MaskConfig:
    ratio: float = 0.75
    blockwise_prob: float = 0.4
    block_side_range: tuple = (2, 8)


@dataclass
class TeacherConfig:
    ema_momentum: float = 0.992
    center_momentum: float = 0.9
    student_temp: float = 0.1
    teacher_temp_start: float = 0.065
    teacher_temp_end: float = 0.07
    temp_warmup_iters: int = 1000


@dataclass
class HeadConfig:
    decoder_depth: int = 8
    decoder_hidden: int = 512
    decoder_heads: int = 16
    proto_count: int = 4096
    proj_hidden: int = 2048
    bottleneck: int = 256


@dataclass
class DataConfig:
    path: str = ""
    synthetic_count: int = 32
    image_size: tuple = (64, 48)
    batch_size: int = 32


@dataclass
class Phase2Config:
    iters: int = 0


@dataclass
class FinetuneConfig:
    task: str = "normal"
    iters: int = 3000
    lr: float = 1e-3
    warmup_iters: int = 100
    batch_size: int = 16
    synthetic_count: int = 64
    ohem_fraction: float = 0.5
    heatmap_sigma: float = 6.0
    head_channels: int = 0  # 0: full-size heatmap head widths, else a uniform width


@dataclass
class ProbeConfig:
    iters: int = 100
    lr: float = 1e-3
    batch_size: int = 8
    hidden: int = 64
    train_count: int = 32
    test_count: int = 16


@dataclass
class RunConfig:
    model: BackboneConfig = field(default_factory=BackboneConfig)
    optimizer: OptimizerConfig = field(default_factory=OptimizerConfig)
    schedule: ScheduleConfig = field(default_factory=ScheduleConfig)
    loss: LossConfig = field(default_factory=LossConfig)
    views: ViewConfig = field(default_factory=ViewConfig)
    mask: MaskConfig = field(default_factory=MaskConfig)
    teacher: TeacherConfig = field(default_factory=TeacherConfig)
    head: HeadConfig = field(default_factory=HeadConfig)
    data: DataConfig = field(default_factory=DataConfig)
    phase2: Phase2Config = field(default_factory=Phase2Config)
    finetune: FinetuneConfig = field(default_factory=FinetuneConfig)
    probe: ProbeConfig = field(default_factory=ProbeConfig)
    grad_clip: float = 5.0
    seed: int = 0
    log_every: int = 1
    ckpt_every: int = 0

    def validate(self) -> None:
        self.model.validate()
        s = self.schedule
        if s.warmup_iters > s.total_iters:
            raise ConfigError("warmup_iters must not exceed total_iters")
        if not self.optimizer.lr > s.min_lr:
            raise ConfigError("lr must exceed min_lr")
        self.views.validate()
        for w in (self.loss.mae, self.loss.cls, self.loss.koleo):
            if w < 0:
                raise ConfigError("loss weights must be non-negative")
        if not 0 <= self.mask.ratio < 1:
            raise ConfigError("mask ratio must be in [0, 1)")
        if self.head.proto_count < 2:
            raise ConfigError("prototype count must be at least 2")
        if self.finetune.task not in ("pose", "seg", "pointmap", "normal", "albedo"):
            raise ConfigError(f"unknown task {self.finetune.task!r}")

    def to_dict(self) -> dict:
        out: dict[str, Any] = {}
        for f in dataclasses.fields(self):
            value = getattr(self, f.name)
            if isinstance(value, BackboneConfig):
                out[f.name] = value.to_dict()
            elif dataclasses.is_dataclass(value):
                out[f.name] = {k: _plain(v) for k, v in dataclasses.asdict(value).items()}
            else:
                out[f.name] = value
        return out

    @classmethod
    def from_dict(cls, d: dict) -> "RunConfig":
        d = copy.deepcopy(d)
        known = {f.name: f for f in dataclasses.fields(cls)}
        unknown = set(d) - set(known)
        if unknown:
            raise ConfigError(f"unknown config keys: {sorted(unknown)}")
        kwargs: dict[str, Any] = {}
        for name, value in d.items():
            if name == "model":
                kwargs[name] = BackboneConfig.from_dict(value)
            elif isinstance(value, dict):
                section_cls = _SECTIONS[name]
                fields = {f.name: f for f in dataclasses.fields(section_cls)}
                bad = set(value) - set(fields)
                if bad:
                    raise ConfigError(f"unknown keys in [{name}]: {sorted(bad)}")
                kwargs[name] = section_cls(**_check_types(name, section_cls, value))
            else:
                kwargs[name] = value
        cfg = cls(**kwargs)
        cfg.validate()
        return cfg

    def to_toml(self) -> str:
        return tomli_w.dumps(self.to_dict())

    @classmethod
    def from_toml(cls, text: str) -> "RunConfig":
        try:
            data = tomli.loads(text)
        except tomli.TOMLDecodeError as exc:
            raise ConfigError(f"cannot parse config: {exc}") from exc
        return cls.from_dict(data)

    def fingerprint(self) -> str:
        blob = json.dumps(self.to_dict(), sort_keys=True).encode()
        return hashlib.sha256(blob).hexdigest()[:16]

    def with_overrides(self, assignments: list[str]) -> "RunConfig":
        d = self.to_dict()
        for item in assignments:
            if "=" not in item:
                raise ConfigError(f"override must look like key=value, got {item!r}")
            key, raw = item.split("=", 1)
            path = key.strip().split(".")
            node = d
            for part in path[:-1]:
                if part not in node or not isinstance(node[part], dict):
                    raise ConfigError(f"unknown config key {key!r}")
                node = node[part]
            if path[-1] not in node:
                raise ConfigError(f"unknown config key {key!r}")
            node[path[-1]] = _parse_value(raw.strip())
        return RunConfig.from_dict(d)


_SECTIONS = {
    "optimizer": OptimizerConfig, "schedule": ScheduleConfig, "loss": LossConfig,
    "views": ViewConfig, "mask": MaskConfig, "teacher": TeacherConfig,
    "head": HeadConfig, "data": DataConfig, "phase2": Phase2Config,
    "finetune": FinetuneConfig, "probe": ProbeConfig,
}


def _check_types(section: str, cls, values: dict) -> dict:
    """Reject values whose type disagrees with the field default; ints are accepted for floats."""
    out = {}
    for f in dataclasses.fields(cls):
        if f.name not in values:
            continue
        v = values[f.name]
        default = f.default
        if isinstance(v, list):
            v = tuple(v)
        ok = True
        if isinstance(default, bool):
            ok = isinstance(v, bool)
        elif isinstance(default, int):
            ok = isinstance(v, int) and not isinstance(v, bool)
        elif isinstance(default, float):
            ok = isinstance(v, (int, float)) and not isinstance(v, bool)
            v = float(v) if ok else v
        elif isinstance(default, str):
            ok = isinstance(v, str)
        elif isinstance(default, tuple):
            ok = isinstance(v, tuple) and all(isinstance(x, (int, float)) and not isinstance(x, bool) for x in v)
        if not ok:
            raise ConfigError(f"[{section}] {f.name} = {v!r} has the wrong type "
                              f"(expected {type(default).__name__})")
        out[f.name] = v
    return out


def _plain(v):
    if isinstance(v, tuple):
        return list(v)
    return v


def _parse_value(raw: str):
    try:
        return tomli.loads(f"v = {raw}")["v"]
    except tomli.TOMLDecodeError:
        return raw


def preset(name: str) -> RunConfig:
    """Named desk-scale presets: ``tiny``, ``small`` (windowed), ``full-1b`` (never trained)."""
    if name == "tiny":
        model = BackboneConfig(hidden_size=64, depth=4, num_heads=4, kv_groups_mid=2,
                               patch_size=4, image_height=32, image_width=32)
        cfg = RunConfig(
            model=model,
            optimizer=OptimizerConfig(lr=1e-3),
            schedule=ScheduleConfig(warmup_iters=100, total_iters=2000),
            views=ViewConfig(global_size=(32, 32), local_size=(16, 16)),
            mask=MaskConfig(block_side_range=(2, 4)),
            teacher=TeacherConfig(temp_warmup_iters=100),
            head=HeadConfig(decoder_depth=2, decoder_hidden=64, decoder_heads=4,
                            proto_count=4096, proj_hidden=256, bottleneck=64),
            data=DataConfig(synthetic_count=32, image_size=(48, 48), batch_size=16),
            finetune=FinetuneConfig(heatmap_sigma=1.5, head_channels=64),
        )
    elif name == "small":
        model = BackboneConfig(hidden_size=128, depth=8, num_heads=4, kv_groups_mid=2,
                               patch_size=4, image_height=64, image_width=64,
                               layout=AttentionLayout.parse("w2:4,gqa2:3,full:1"))
        cfg = RunConfig(
            model=model,
            optimizer=OptimizerConfig(lr=5e-4),
            schedule=ScheduleConfig(warmup_iters=200, total_iters=5000),
            views=ViewConfig(global_size=(64, 64), local_size=(32, 32)),
            mask=MaskConfig(block_side_range=(1, 3)),
            teacher=TeacherConfig(temp_warmup_iters=200),
            head=HeadConfig(decoder_depth=2, decoder_hidden=128, decoder_heads=4,
                            proj_hidden=512, bottleneck=128),
            data=DataConfig(synthetic_count=64, image_size=(80, 80), batch_size=16),
            finetune=FinetuneConfig(heatmap_sigma=2.0, head_channels=128),
        )
    elif name == "full-1b":
        model = BackboneConfig(hidden_size=1536, depth=40, num_heads=24, kv_groups_mid=8,
                               patch_size=16, image_height=1024, image_width=768)
        cfg = RunConfig(model=model)
    else:
        raise ConfigError(f"unknown preset {name!r}")
    cfg.validate()
    return cfg


def load_run_config(source: str | Path) -> RunConfig:
    """Load a config from a TOML file path or a preset name."""
    path = Path(source)
    if path.is_file():
        return RunConfig.from_toml(path.read_text())
    try:
        return preset(str(source))
    except ConfigError:
        raise ConfigError(f"config {str(source)!r} is neither a file nor a preset") from None
