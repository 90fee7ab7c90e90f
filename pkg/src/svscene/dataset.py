"""Scene datasets on disk: cameras.json manifest, PNG images, teacher bundles.

A dataset directory holds a ``cameras.json`` manifest whose ``views`` entries
carry {file, fx, fy, cx, cy, R (row-major 9), t (3), w, h} plus optional
``teacher_prefix`` and ``masks`` fields, and optional top-level ``scene``
(octree placement), ``codes_file`` and ``codec_file`` entries.
"""

from __future__ import annotations

import json
import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional

import numpy as np
from PIL import Image

from .distill import TeacherBundle
from .errors import (
    BadRotation,
    MissingManifest,
    MixedResolutions,
    TeacherMismatch,
)
from .grid import GridConfig
from .raster import Camera
from .tensorio import read_tensor

logger = logging.getLogger(__name__)

MANIFEST = "cameras.json"


def load_image(path) -> np.ndarray:
    """8-bit PNG to a linear [0,1] float array (H, W, 3); no gamma handling."""
    img = np.asarray(Image.open(path).convert("RGB"), dtype=np.float64)
    return img / 255.0


def save_image(path, array):
    """Float [0,1] array to 8-bit PNG (values clipped, rounded)."""
    a = np.asarray(array, dtype=np.float64)
    if a.ndim == 2:
        a = np.repeat(a[..., None], 3, axis=-1)
    data = np.clip(np.round(a * 255.0), 0, 255).astype(np.uint8)
    Image.fromarray(data).save(path)


def load_mask(path) -> np.ndarray:
    """PNG to a boolean mask (H, W): any channel above half intensity."""
    img = np.asarray(Image.open(path).convert("L"), dtype=np.float64)
    return img > 127.5


@dataclass
class ViewRecord:
    image_path: Path
    camera: Camera
    teacher_prefix: Optional[Path] = None
    mask_paths: list = field(default_factory=list)


@dataclass
class SceneDataset:
    root: Path
    views: list
    scene: GridConfig
    codes_path: Optional[Path] = None
    codec_path: Optional[Path] = None

    def __len__(self):
        return len(self.views)

    def image(self, i) -> np.ndarray:
        return load_image(self.views[i].image_path)

    def images_and_cameras(self):
        return [(self.image(i), v.camera) for i, v in enumerate(self.views)]

    def teacher(self, i) -> TeacherBundle:
        v = self.views[i]
        if v.teacher_prefix is None:
            raise TeacherMismatch(f"view {i} has no teacher bundle")
        p = v.teacher_prefix
        ma = Path(str(p) + ".ma.lsvt")
        dd = Path(str(p) + ".dd.lsvt")
        mg = Path(str(p) + ".mg.lsvt")
        for f in (ma, dd, mg):
            if not f.exists():
                raise TeacherMismatch(f"missing teacher file {f}")
        return TeacherBundle(m_a=read_tensor(ma), d_d=read_tensor(dd), m_g=read_tensor(mg))

    def teachers(self):
        return [self.teacher(i) for i in range(len(self.views))]

    def has_teachers(self) -> bool:
        return all(v.teacher_prefix is not None for v in self.views)

    def masks(self, i) -> list:
        return [load_mask(p) for p in self.views[i].mask_paths]


def _camera_from_record(rec: dict) -> Camera:
    r = np.asarray(rec["R"], dtype=np.float64).reshape(3, 3)
    drift = float(np.max(np.abs(r @ r.T - np.eye(3))))
    if drift > 1e-3:
        raise BadRotation(f"rotation drift {drift:.2e} exceeds 1e-3")
    if drift > 1e-9:
        u, _, vt = np.linalg.svd(r)
        r = u @ vt
        logger.warning("re-orthonormalized a drifting rotation (drift %.2e)", drift)
    return Camera(
        fx=float(rec["fx"]), fy=float(rec["fy"]), cx=float(rec["cx"]), cy=float(rec["cy"]),
        R=r, t=np.asarray(rec["t"], dtype=np.float64), width=int(rec["w"]), height=int(rec["h"]),
    )


def load_dataset(root) -> SceneDataset:
    """Load and validate a dataset directory."""
    root = Path(root)
    manifest = root / MANIFEST
    if not manifest.exists():
        raise MissingManifest(f"no {MANIFEST} in {root}")
    spec = json.loads(manifest.read_text())
    views = []
    resolution = None
    for i, rec in enumerate(spec.get("views", [])):
        img_path = root / rec["file"]
        if not img_path.exists():
            raise MissingManifest(f"missing image {img_path}")
        cam = _camera_from_record(rec)
        if resolution is None:
            resolution = (cam.height, cam.width)
        elif resolution != (cam.height, cam.width):
            raise MixedResolutions("all views must share one resolution")
        with Image.open(img_path) as im:
            if (im.height, im.width) != (cam.height, cam.width):
                raise MixedResolutions(
                    f"{img_path} is {im.width}x{im.height}, manifest says {cam.width}x{cam.height}"
                )
        teacher_prefix = None
        if rec.get("teacher_prefix"):
            teacher_prefix = root / rec["teacher_prefix"]
            for suffix in (".ma.lsvt", ".dd.lsvt", ".mg.lsvt"):
                if not Path(str(teacher_prefix) + suffix).exists():
                    logger.warning("teacher file %s%s missing (train will fail)", teacher_prefix, suffix)
        mask_paths = [root / m for m in rec.get("masks", [])]
        views.append(
            ViewRecord(image_path=img_path, camera=cam, teacher_prefix=teacher_prefix, mask_paths=mask_paths)
        )
    scene_spec = spec.get("scene", {})
    scene = GridConfig(
        np.asarray(scene_spec.get("w_c", [0.0, 0.0, 0.0])),
        float(scene_spec.get("w_s", 2.0)),
        int(scene_spec.get("l_max", 12)),
    )
    codes = root / spec["codes_file"] if spec.get("codes_file") else None
    codec = root / spec["codec_file"] if spec.get("codec_file") else None
    return SceneDataset(root=root, views=views, scene=scene, codes_path=codes, codec_path=codec)


def save_manifest(root, view_records, scene: GridConfig, codes_file=None, codec_file=None):
    """Write cameras.json for a list of per-view dicts."""
    root = Path(root)
    spec = {"views": view_records, "scene": {"w_c": list(scene.w_c), "w_s": scene.w_s, "l_max": scene.L_max}}
    if codes_file:
        spec["codes_file"] = codes_file
    if codec_file:
        spec["codec_file"] = codec_file
    (root / MANIFEST).write_text(json.dumps(spec, indent=1, sort_keys=True))
