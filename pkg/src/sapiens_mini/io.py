"""Dataset directories and raster formats.

A dataset directory holds::

    manifest.json         count, image size, task list, keypoint names
    images/NNNNNN.png     RGB 8-bit
    seg/NNNNNN.png        single-channel class-index image
    mask/NNNNNN.png       1-bit foreground mask
    pointmap|normal|albedo/NNNNNN.f32
    keypoints.jsonl       {"id", "bbox", "keypoints": [[x, y, v], ...]}
    cameras.jsonl         {"id", "focal", "cx", "cy", "width", "height"}

``.f32`` files carry a 16-byte header (magic ``SMF3``, then H, W, C as
little-endian uint32) followed by float32 little-endian HWC data.
"""
from __future__ import annotations

import json
import struct
from pathlib import Path

import numpy as np
from PIL import Image

from .errors import ConfigError
from .synth import KEYPOINT_NAMES, TaskSample

RASTER_MAGIC = b"SMF3"
MAP_TASKS = ("pointmap", "normal", "albedo")


def write_raster(path, chw: np.ndarray) -> None:
    arr = np.asarray(chw, dtype=np.float64)
    if arr.ndim == 2:
        arr = arr[None]
    C, H, W = arr.shape
    payload = np.ascontiguousarray(np.moveaxis(arr, 0, -1)).astype("<f4").tobytes()
    Path(path).write_bytes(RASTER_MAGIC + struct.pack("<III", H, W, C) + payload)


def read_raster(path) -> np.ndarray:
    data = Path(path).read_bytes()
    if data[:4] != RASTER_MAGIC:
        raise ConfigError(f"{path}: not a float raster")
    H, W, C = struct.unpack("<III", data[4:16])
    arr = np.frombuffer(data[16:], dtype="<f4")
    if arr.size != H * W * C:
        raise ConfigError(f"{path}: truncated raster")
    return np.moveaxis(arr.reshape(H, W, C), -1, 0).astype(np.float64)


def write_png(path, array: np.ndarray, mode: str) -> None:
    Image.fromarray(array, mode=mode if mode != "1" else "L").convert(mode).save(path, format="PNG")


def image_to_uint8(chw: np.ndarray) -> np.ndarray:
    return np.clip(np.round(np.moveaxis(np.asarray(chw), 0, -1) * 255.0), 0, 255).astype(np.uint8)


def read_image(path) -> np.ndarray:
    """``(3, H, W)`` float64 in [0, 1]."""
    with Image.open(path) as im:
        arr = np.asarray(im.convert("RGB"), dtype=np.float64) / 255.0
    return np.moveaxis(arr, -1, 0)


def _name(i: int) -> str:
    return f"{i:06d}"


def write_dataset(root, samples: list[TaskSample], meta: dict | None = None) -> Path:
    root = Path(root)
    for sub in ("images", "seg", "mask", *MAP_TASKS):
        (root / sub).mkdir(parents=True, exist_ok=True)
    kp_lines, cam_lines = [], []
    for i, s in enumerate(samples):
        n = _name(i)
        write_png(root / "images" / f"{n}.png", image_to_uint8(s.image), "RGB")
        H, W = s.image.shape[-2:]
        if s.seg is not None:
            write_png(root / "seg" / f"{n}.png", np.asarray(s.seg, dtype=np.uint8), "L")
        if s.fg is not None:
            write_png(root / "mask" / f"{n}.png", np.asarray(s.fg, dtype=np.uint8) * 255, "1")
        for task in MAP_TASKS:
            value = getattr(s, task)
            if value is not None:
                write_raster(root / task / f"{n}.f32", value)
        kps = [] if s.keypoints is None else np.asarray(s.keypoints).tolist()
        bbox = list(s.bbox) if s.bbox is not None else [0.0, 0.0, float(W), float(H)]
        kp_lines.append(json.dumps({"id": n, "bbox": bbox, "keypoints": kps}, sort_keys=True))
        if s.focal is not None:
            cam_lines.append(json.dumps({"id": n, "focal": s.focal, "cx": (W - 1) / 2, "cy": (H - 1) / 2,
                                         "width": W, "height": H}, sort_keys=True))
    (root / "keypoints.jsonl").write_text("".join(line + "\n" for line in kp_lines))
    (root / "cameras.jsonl").write_text("".join(line + "\n" for line in cam_lines))
    manifest = {"count": len(samples), "keypoint_names": list(KEYPOINT_NAMES),
                "tasks": ["pose", "seg", *MAP_TASKS]}
    if samples:
        manifest["image_size"] = list(samples[0].image.shape[-2:])
    manifest.update(meta or {})
    (root / "manifest.json").write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")
    return root


def _jsonl(path) -> dict:
    if not path.exists():
        return {}
    out = {}
    for line in path.read_text().splitlines():
        if line.strip():
            rec = json.loads(line)
            out[rec["id"]] = rec
    return out


def read_dataset(root) -> list[TaskSample]:
    root = Path(root)
    if not (root / "manifest.json").is_file():
        raise ConfigError(f"{root} is not a dataset directory (manifest.json missing)")
    manifest = json.loads((root / "manifest.json").read_text())
    kps, cams = _jsonl(root / "keypoints.jsonl"), _jsonl(root / "cameras.jsonl")
    samples = []
    for i in range(manifest["count"]):
        n = _name(i)
        s = TaskSample(image=read_image(root / "images" / f"{n}.png"))
        if (root / "seg" / f"{n}.png").exists():
            with Image.open(root / "seg" / f"{n}.png") as im:
                s.seg = np.asarray(im, dtype=np.int64)
        if (root / "mask" / f"{n}.png").exists():
            with Image.open(root / "mask" / f"{n}.png") as im:
                s.fg = np.asarray(im.convert("L")) > 0
        for task in MAP_TASKS:
            p = root / task / f"{n}.f32"
            if p.exists():
                setattr(s, task, read_raster(p))
        if n in kps:
            s.keypoints = np.asarray(kps[n]["keypoints"], dtype=np.float64).reshape(-1, 3)
            s.bbox = tuple(kps[n]["bbox"])
        if n in cams:
            s.focal = float(cams[n]["focal"])
        samples.append(s)
    return samples


def read_images(root) -> list[np.ndarray]:
    """All images of a dataset directory, or every PNG/JPEG in a plain folder."""
    root = Path(root)
    folder = root / "images" if (root / "images").is_dir() else root
    files = sorted(p for p in folder.iterdir() if p.suffix.lower() in (".png", ".jpg", ".jpeg"))
    if not files:
        raise ConfigError(f"no images found under {root}")
    return [read_image(p) for p in files]
