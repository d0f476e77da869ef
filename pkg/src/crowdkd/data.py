"""Scene datasets: on-disk loading, synthetic desk-scale scenes, augmentation.

On-disk layout::

    root/manifest.json      {"train": ["scenes/a.json", ...], "test": [...]}
    root/scenes/<id>.json   {"image": "images/<id>.png", "points": [[x, y], ...]}
    root/images/<id>.png

Image paths inside scene documents are relative to ``root``.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional

import numpy as np

from .density import Scene

SPLITS = ("train", "test")


class DatasetError(Exception):
    """Raised when a dataset on disk is missing files or malformed."""


@dataclass
class Dataset:
    scenes: list = field(default_factory=list)
    split: str = "train"
    root: Optional[Path] = None

    def __post_init__(self):
        if self.split not in SPLITS:
            raise ValueError(f"unknown split {self.split!r}")
        ids = [s.id for s in self.scenes]
        if len(set(ids)) != len(ids):
            raise ValueError("scene ids must be unique")

    def __len__(self):
        return len(self.scenes)

    def __getitem__(self, i):
        return self.scenes[i]

    def __iter__(self):
        return iter(self.scenes)


def load_dataset(root, split: str = "train") -> Dataset:
    root = Path(root)
    if split not in SPLITS:
        raise ValueError(f"unknown split {split!r}")
    manifest_path = root / "manifest.json"
    if not manifest_path.is_file():
        raise DatasetError(f"missing manifest: {manifest_path}")
    try:
        manifest = json.loads(manifest_path.read_text())
    except json.JSONDecodeError as e:
        raise DatasetError(f"malformed manifest {manifest_path}: {e}") from e
    entries = manifest.get(split, []) if isinstance(manifest, dict) else None
    if not isinstance(entries, list):
        raise DatasetError(f"manifest {manifest_path} must map split names to lists")

    scenes = []
    for rel in entries:
        scene_path = root / rel
        scene_id = Path(rel).stem
        if not scene_path.is_file():
            raise DatasetError(f"missing scene file: {scene_path}")
        try:
            doc = json.loads(scene_path.read_text())
            image_rel = doc["image"]
            points = np.asarray(doc.get("points", []), dtype=np.float64).reshape(-1, 2)
        except (json.JSONDecodeError, KeyError, TypeError, ValueError) as e:
            raise DatasetError(f"malformed scene {scene_id!r} ({scene_path}): {e}") from e
        image_path = root / image_rel
        if not image_path.is_file():
            raise DatasetError(f"missing image for scene {scene_id!r}: {image_path}")
        scene = Scene(scene_id, points, image_path=image_path)
        scene.check_bounds()
        scenes.append(scene)
    return Dataset(scenes, split, root)


def save_dataset(root, splits: dict, force: bool = False) -> Path:
    """Write ``{split: Dataset}`` to ``root`` in the on-disk layout (PNG images)."""
    from PIL import Image

    root = Path(root)
    manifest_path = root / "manifest.json"
    if manifest_path.exists() and not force:
        raise FileExistsError(f"{manifest_path} exists; pass force=True to overwrite")
    (root / "scenes").mkdir(parents=True, exist_ok=True)
    (root / "images").mkdir(parents=True, exist_ok=True)
    manifest = {}
    for split, dataset in splits.items():
        entries = []
        for scene in dataset:
            img = np.clip(np.rint(scene.image * 255.0), 0, 255).astype(np.uint8)
            Image.fromarray(img).save(root / "images" / f"{scene.id}.png")
            doc = {"image": f"images/{scene.id}.png", "points": scene.points.tolist()}
            (root / "scenes" / f"{scene.id}.json").write_text(json.dumps(doc))
            entries.append(f"scenes/{scene.id}.json")
        manifest[split] = entries
    manifest_path.write_text(json.dumps(manifest, indent=1))
    return root


def _smooth_noise(rng, shape, cell):
    h, w = shape
    gh, gw = h // cell + 2, w // cell + 2
    coarse = rng.random((gh, gw, 3))
    ys = np.arange(h) / cell
    xs = np.arange(w) / cell
    y0, x0 = ys.astype(int), xs.astype(int)
    fy, fx = (ys - y0)[:, None, None], (xs - x0)[None, :, None]
    a = coarse[y0][:, x0]
    b = coarse[y0][:, x0 + 1]
    c = coarse[y0 + 1][:, x0]
    d = coarse[y0 + 1][:, x0 + 1]
    return (a * (1 - fx) + b * fx) * (1 - fy) + (c * (1 - fx) + d * fx) * fy


def synth_scenes(n: int, shape=(64, 64), count_range=(5, 30), seed: int = 0, split: str = "train",
                 prefix: str = "synth") -> Dataset:
    """Deterministic synthetic scenes: textured background plus bright blob "heads".

    Each scene draws its head count uniformly from ``count_range``; blob
    centres are the annotation points.
    """
    lo, hi = count_range
    h, w = shape
    if n < 1:
        raise ValueError("n must be >= 1")
    if lo < 0 or lo > hi:
        raise ValueError(f"invalid count range {count_range}")
    if h < 32 or w < 32:
        raise ValueError("scenes must be at least 32x32")

    rng = np.random.default_rng(seed)
    yy, xx = np.mgrid[0:h, 0:w] + 0.5
    scenes = []
    for i in range(n):
        k = int(rng.integers(lo, hi + 1))
        bg = 0.15 + 0.25 * _smooth_noise(rng, shape, cell=8)
        bg += 0.03 * rng.standard_normal((h, w, 3))
        # blobs stay a few pixels inside the border
        pts = np.column_stack([rng.uniform(2, w - 2, k), rng.uniform(2, h - 2, k)])
        img = bg
        for x, y in pts:
            r = rng.uniform(1.2, 2.0)
            tint = np.array([0.9, 0.75, 0.6]) * rng.uniform(0.8, 1.0)
            blob = np.exp(-((xx - x) ** 2 + (yy - y) ** 2) / (2 * r * r))
            img = img + blob[..., None] * (tint - img) * 0.9
        img = np.clip(img, 0.0, 1.0).astype(np.float32)
        scenes.append(Scene(f"{prefix}{seed}_{i:04d}", pts, pixels=img))
    return Dataset(scenes, split)


def augment(scene: Scene, crop=None, flip_prob: float = 0.5, rng=None) -> Scene:
    """Random crop to ``crop`` (h, w) and horizontal flip with probability ``flip_prob``.

    Points outside the crop window are dropped; flipped points map x -> w - x.
    """
    rng = np.random.default_rng() if rng is None else rng
    h, w = scene.shape
    ch, cw = (h, w) if crop is None else crop
    if ch > h or cw > w or ch < 1 or cw < 1:
        raise ValueError(f"crop {crop} does not fit image {h}x{w}")
    top = int(rng.integers(0, h - ch + 1))
    left = int(rng.integers(0, w - cw + 1))
    img = scene.image[top:top + ch, left:left + cw]
    pts = scene.points - np.array([left, top], dtype=np.float64)
    keep = (pts[:, 0] >= 0) & (pts[:, 0] < cw) & (pts[:, 1] >= 0) & (pts[:, 1] < ch)
    pts = pts[keep]
    if rng.random() < flip_prob:
        img = img[:, ::-1]
        pts = pts.copy()
        pts[:, 0] = cw - pts[:, 0]
    return Scene(scene.id, pts, pixels=np.ascontiguousarray(img))
