"""On-disk formats: images, float maps and the synthetic dataset layout.

A dataset directory holds ``manifest.json`` and one sub-directory per
sample with ``intensity.png`` (8 bit), ``depth.bin`` (float map, 0 marks a
missing measurement), ``idmap.png`` (16 bit) and ``groundtruth.json``.
"""
from __future__ import annotations

import json
import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from PIL import Image

from .synth import Scene

FLOAT_MAP_MAGIC = b"PDFMAP01"
MANIFEST = "manifest.json"


def write_float_map(path, a) -> None:
    """Magic, height and width as little-endian uint32, then float32 data."""
    a = np.asarray(a, dtype="<f4")
    if a.ndim != 2:
        raise ValueError("float maps are 2-D")
    with open(path, "wb") as fh:
        fh.write(FLOAT_MAP_MAGIC)
        fh.write(struct.pack("<II", *a.shape))
        fh.write(np.ascontiguousarray(a).tobytes())


def read_float_map(path) -> np.ndarray:
    data = Path(path).read_bytes()
    if data[:8] != FLOAT_MAP_MAGIC or len(data) < 16:
        raise ValueError(f"{path}: not a float map")
    h, w = struct.unpack_from("<II", data, 8)
    if len(data) != 16 + 4 * h * w:
        raise ValueError(f"{path}: size does not match header {h}x{w}")
    return np.frombuffer(data, dtype="<f4", offset=16).reshape(h, w).astype(np.float32)


def write_png8(path, a) -> None:
    """Values in [0, 1] stored as 8-bit grey."""
    a = np.clip(np.asarray(a, dtype=np.float64), 0.0, 1.0)
    Image.fromarray(np.round(a * 255).astype(np.uint8)).save(path)


def read_png8(path) -> np.ndarray:
    with Image.open(path) as im:
        if im.mode != "L":
            raise ValueError(f"{path}: expected an 8-bit grey image, got mode {im.mode}")
        return np.asarray(im, dtype=np.float32) / 255.0


def write_png16(path, ids) -> None:
    ids = np.asarray(ids)
    if ids.ndim != 2 or ids.min(initial=0) < 0 or ids.max(initial=0) > 65535:
        raise ValueError("id-maps are 2-D with values in [0, 65535]")
    Image.fromarray(ids.astype(np.uint16)).save(path)


def read_png16(path) -> np.ndarray:
    try:
        im = Image.open(path)
        im.load()
    except (OSError, SyntaxError) as exc:
        raise ValueError(f"{path}: unreadable image ({exc})") from exc
    with im:
        if im.mode not in ("I;16", "I;16B", "I;16L", "I"):
            raise ValueError(f"{path}: expected a 16-bit image, got mode {im.mode}")
        a = np.asarray(im).astype(np.int64)
    if a.ndim != 2 or a.min(initial=0) < 0 or a.max(initial=0) > 65535:
        raise ValueError(f"{path}: not a 16-bit id-map")
    return a.astype(np.int32)


def dump_json(path, obj) -> None:
    Path(path).write_text(json.dumps(obj, indent=2, sort_keys=True) + "\n")


def load_json(path):
    return json.loads(Path(path).read_text())


@dataclass
class StoredSample:
    sample_id: str
    scene: Scene
    intensity: np.ndarray
    depth: np.ndarray
    idmap: np.ndarray
    meta: dict

    @property
    def validity(self) -> np.ndarray:
        return (self.depth > 0).astype(np.uint8)

    @property
    def product_id(self) -> str:
        return self.meta.get("product_id", self.scene.stack_kind)


def write_sample(root, sample_id: str, scene: Scene, intensity, depth, idmap, meta: dict) -> Path:
    d = Path(root) / sample_id
    d.mkdir(parents=True, exist_ok=True)
    write_png8(d / "intensity.png", intensity)
    write_float_map(d / "depth.bin", depth)
    write_png16(d / "idmap.png", idmap)
    dump_json(d / "groundtruth.json", {"sample_id": sample_id, **meta, "scene": scene.to_dict()})
    return d


def read_sample(path) -> StoredSample:
    d = Path(path)
    gt = load_json(d / "groundtruth.json")
    scene = Scene.from_dict(gt.pop("scene"))
    sample_id = gt.pop("sample_id")
    return StoredSample(sample_id, scene, read_png8(d / "intensity.png"), read_float_map(d / "depth.bin"),
                        read_png16(d / "idmap.png"), gt)


def read_manifest(root) -> dict:
    path = Path(root) / MANIFEST
    if not path.is_file():
        raise FileNotFoundError(f"{root}: no {MANIFEST}")
    return load_json(path)


def iter_dataset(root):
    """Samples in manifest order."""
    for entry in read_manifest(root)["samples"]:
        yield read_sample(Path(root) / entry["dir"])
