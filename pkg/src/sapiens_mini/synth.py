"""Procedural stick-figure scenes with analytic ground truth for every task.

A scene is a set of oriented ellipsoids seen by a pinhole camera at the origin
looking down +Z (image y grows downward). Each pixel casts one ray through its
center; the nearest hit provides the pointmap, analytic normal, albedo, part
label and foreground bit. The image is Lambertian, ``albedo * max(0, N . L)``.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import ConfigError, DegenerateInputError

PART_NAMES = (
    "background", "head", "torso", "upper_arm_l", "upper_arm_r", "forearm_l", "forearm_r",
    "hand_l", "hand_r", "thigh_l", "thigh_r", "shin_l", "shin_r", "foot_l", "foot_r",
)
KEYPOINT_NAMES = (
    "head", "neck", "shoulder_l", "shoulder_r", "elbow_l", "elbow_r", "wrist_l", "wrist_r",
    "pelvis", "hip_l", "hip_r", "knee_l", "knee_r", "ankle_l", "ankle_r",
)


@dataclass
class Primitive:
    center: np.ndarray
    radii: np.ndarray
    color: np.ndarray
    part: int
    rotation: np.ndarray = field(default_factory=lambda: np.eye(3))
    landmarks: np.ndarray = field(default_factory=lambda: np.zeros((0, 3)))

    def __post_init__(self):
        self.center = np.asarray(self.center, dtype=np.float64)
        self.radii = np.asarray(self.radii, dtype=np.float64)
        self.color = np.asarray(self.color, dtype=np.float64)
        self.rotation = np.asarray(self.rotation, dtype=np.float64)
        self.landmarks = np.asarray(self.landmarks, dtype=np.float64).reshape(-1, 3)


@dataclass
class SyntheticSceneSpec:
    """Camera, light and (optionally) an explicit primitive list.

    ``focal`` is in pixels. With ``primitives=None`` a random stick figure is
    drawn from the generator passed to :func:`synth_generate`.
    """

    image_size: tuple = (32, 32)
    focal: float | None = None
    light_dir: tuple = (0.3, -0.4, -1.0)
    primitives: list | None = None
    keypoints: np.ndarray | None = None
    depth_range: tuple = (4.0, 5.0)

    def __post_init__(self):
        if self.focal is None:
            self.focal = 2.0 * self.image_size[0]
        if self.focal <= 0:
            raise ConfigError("focal length must be positive")

    def validate(self) -> None:
        if self.primitives is not None:
            for p in self.primitives:
                if p.center[2] - np.max(p.radii) <= 0:
                    raise ConfigError("every primitive must lie in front of the camera")


@dataclass
class TaskSample:
    image: np.ndarray
    fg: np.ndarray | None = None
    keypoints: np.ndarray | None = None
    seg: np.ndarray | None = None
    pointmap: np.ndarray | None = None
    normal: np.ndarray | None = None
    albedo: np.ndarray | None = None
    focal: float | None = None
    bbox: tuple | None = None


def camera_rays(H: int, W: int, focal: float) -> np.ndarray:
    """Unnormalized ray directions ``(H, W, 3)``; pixel ``(i, j)`` looks through ``(j - cx, i - cy, f)``."""
    cy, cx = (H - 1) / 2.0, (W - 1) / 2.0
    i, j = np.mgrid[0:H, 0:W].astype(np.float64)
    return np.stack([(j - cx) / focal, (i - cy) / focal, np.ones_like(i)], axis=-1)


def intersect_ellipsoid(dirs: np.ndarray, prim: Primitive) -> np.ndarray:
    """Smallest positive ray parameter ``t`` per ray (``inf`` on miss); rays start at the origin."""
    R, r = prim.rotation, prim.radii
    o = (R.T @ (-prim.center)) / r
    d = (dirs @ R) / r
    a = (d * d).sum(-1)
    b = 2.0 * (d @ o)
    c = o @ o - 1.0
    disc = b * b - 4 * a * c
    t = np.full(dirs.shape[:-1], np.inf)
    hit = disc >= 0
    sq = np.sqrt(np.where(hit, disc, 0.0))
    t0 = (-b - sq) / (2 * a)
    t1 = (-b + sq) / (2 * a)
    near = np.where(t0 > 0, t0, t1)
    ok = hit & (near > 0)
    t[ok] = near[ok]
    return t


def ellipsoid_normal(points: np.ndarray, prim: Primitive) -> np.ndarray:
    R, r = prim.rotation, prim.radii
    local = (points - prim.center) @ R / (r * r)
    n = local @ R.T
    return n / np.linalg.norm(n, axis=-1, keepdims=True)


def project(points: np.ndarray, H: int, W: int, focal: float) -> np.ndarray:
    cy, cx = (H - 1) / 2.0, (W - 1) / 2.0
    pts = np.asarray(points, dtype=np.float64).reshape(-1, 3)
    return np.stack([focal * pts[:, 0] / pts[:, 2] + cx, focal * pts[:, 1] / pts[:, 2] + cy], axis=-1)


def _segment_rotation(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Rotation whose local y axis points from ``a`` to ``b``."""
    y = (b - a) / np.linalg.norm(b - a)
    z = np.array([0.0, 0.0, 1.0])
    x = np.cross(y, z)
    if np.linalg.norm(x) < 1e-9:
        x = np.array([1.0, 0.0, 0.0])
    x /= np.linalg.norm(x)
    z = np.cross(x, y)
    return np.stack([x, y, z], axis=1)


def _limb(a, b, thickness, color, part):
    a, b = np.asarray(a, float), np.asarray(b, float)
    half = np.linalg.norm(b - a) / 2
    return Primitive((a + b) / 2, (thickness, half * 1.1, thickness), color, part,
                     _segment_rotation(a, b), np.stack([a, b]))


def random_stick_figure(rng: np.random.Generator, depth_range=(4.0, 5.0)):
    """Primitives and 3D joint positions of a randomly posed figure about 1.8 units tall."""
    z = rng.uniform(*depth_range)
    root = np.array([rng.uniform(-0.15, 0.15), rng.uniform(-0.1, 0.1), z])
    skin = np.clip(np.array([0.85, 0.65, 0.5]) + rng.uniform(-0.15, 0.15, 3), 0.05, 1.0)
    shirt = rng.uniform(0.1, 0.95, 3)
    pants = rng.uniform(0.1, 0.95, 3)
    lean = rng.uniform(-0.15, 0.15)

    def pt(x, y, dz=0.0):
        return root + np.array([x, y, dz])

    pelvis = pt(0.0, 0.1)
    neck = pt(lean * 0.5, -0.5, rng.uniform(-0.05, 0.05))
    head = neck + np.array([0.0, -0.18, 0.0])
    joints = {"head": head, "neck": neck, "pelvis": pelvis}
    prims = [
        Primitive(head, (0.13, 0.15, 0.13), skin, 1, landmarks=head[None]),
        _limb(neck, pelvis, 0.2, shirt, 2),
    ]
    for side, sgn in (("l", -1.0), ("r", 1.0)):
        li = 0 if side == "l" else 1
        sh = neck + np.array([sgn * 0.2, 0.05, 0.0])
        a1 = rng.uniform(0.2, 1.3)
        el = sh + 0.3 * np.array([sgn * np.sin(a1), np.cos(a1), rng.uniform(-0.3, 0.3)])
        a2 = a1 + rng.uniform(-0.8, 0.8)
        wr = el + 0.27 * np.array([sgn * np.sin(a2), np.cos(a2), rng.uniform(-0.3, 0.3)])
        hip = pelvis + np.array([sgn * 0.1, 0.05, 0.0])
        b1 = rng.uniform(-0.05, 0.45)
        kn = hip + 0.42 * np.array([sgn * np.sin(b1), np.cos(b1), rng.uniform(-0.2, 0.2)])
        b2 = b1 + rng.uniform(-0.4, 0.3)
        an = kn + 0.4 * np.array([sgn * np.sin(b2), np.cos(b2), rng.uniform(-0.2, 0.2)])
        prims += [
            _limb(sh, el, 0.06, shirt, 3 + li),
            _limb(el, wr, 0.05, skin, 5 + li),
            Primitive(wr + (wr - el) * 0.2, (0.05, 0.05, 0.05), skin, 7 + li, landmarks=wr[None]),
            _limb(hip, kn, 0.08, pants, 9 + li),
            _limb(kn, an, 0.065, pants, 11 + li),
            Primitive(an + np.array([0.0, 0.03, -0.06]), (0.05, 0.04, 0.1), pants * 0.5, 13 + li,
                      landmarks=an[None]),
        ]
        joints.update({f"shoulder_{side}": sh, f"elbow_{side}": el, f"wrist_{side}": wr,
                       f"hip_{side}": hip, f"knee_{side}": kn, f"ankle_{side}": an})
    return prims, np.stack([joints[k] for k in KEYPOINT_NAMES])


def render(primitives, image_size, focal: float, light_dir) -> TaskSample:
    if not primitives:
        raise DegenerateInputError("empty scene")
    H, W = image_size
    dirs = camera_rays(H, W, focal)
    ts = np.stack([intersect_ellipsoid(dirs, p) for p in primitives])
    owner = np.argmin(ts, axis=0)
    t = np.take_along_axis(ts, owner[None], axis=0)[0]
    fg = np.isfinite(t)
    points = dirs * np.where(fg, t, 0.0)[..., None]
    normal = np.zeros((H, W, 3))
    albedo = np.zeros((H, W, 3))
    seg = np.zeros((H, W), dtype=np.int64)
    for k, prim in enumerate(primitives):
        sel = fg & (owner == k)
        if sel.any():
            normal[sel] = ellipsoid_normal(points[sel], prim)
            albedo[sel] = prim.color
            seg[sel] = prim.part
    light = np.asarray(light_dir, dtype=np.float64)
    light = light / np.linalg.norm(light)
    shade = np.clip(normal @ light, 0.0, None)
    image = albedo * shade[..., None]
    chw = lambda a: np.ascontiguousarray(np.moveaxis(a, -1, 0))
    bbox = None
    if fg.any():
        ys, xs = np.nonzero(fg)
        bbox = (float(xs.min()), float(ys.min()), float(xs.max() + 1), float(ys.max() + 1))
    return TaskSample(image=chw(image), fg=fg, seg=seg, pointmap=chw(points), normal=chw(normal),
                      albedo=chw(albedo), focal=float(focal), bbox=bbox)


def synth_generate(spec: SyntheticSceneSpec, rng: np.random.Generator) -> TaskSample:
    """Render ``spec`` (or a random stick figure when it has no primitives) with full ground truth."""
    spec.validate()
    primitives, joints = spec.primitives, spec.keypoints
    if primitives is None:
        primitives, joints = random_stick_figure(rng, spec.depth_range)
    if not primitives:
        raise DegenerateInputError("empty scene")
    sample = render(primitives, spec.image_size, spec.focal, spec.light_dir)
    if joints is None:
        joints = np.concatenate([p.landmarks for p in primitives]) if primitives else np.zeros((0, 3))
    H, W = spec.image_size
    if len(joints):
        uv = project(joints, H, W, spec.focal)
        inside = (uv[:, 0] >= 0) & (uv[:, 0] <= W - 1) & (uv[:, 1] >= 0) & (uv[:, 1] <= H - 1)
        sample.keypoints = np.concatenate([uv, np.where(inside, 2.0, 0.0)[:, None]], axis=1)
    else:
        sample.keypoints = np.zeros((0, 3))
    if sample.bbox is None:
        sample.bbox = (0.0, 0.0, float(W), float(H))
    return sample


def generate_dataset(count: int, seed: int, image_size=(32, 32), focal: float | None = None) -> list[TaskSample]:
    rng = np.random.default_rng(seed)
    spec = SyntheticSceneSpec(image_size=tuple(image_size), focal=focal)
    return [synth_generate(spec, rng) for _ in range(count)]
