"""Synthetic scene generator: a desk-scale verification harness.

Places colored axis-aligned boxes (optionally spheres) with distinct random
orthonormal 512-d semantic codes inside the octree, bakes them into a dense
ground-truth grid, renders ground-truth images/depth/label masses with the
brute-force oracle, trains a fresh codec on the codes and emits a complete
dataset directory: images, cameras.json, teacher bundles (m_a/d_d/m_g),
per-object masks, the code bank and the codec checkpoint.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy.ndimage import gaussian_filter

from .codec import FEATURE_DIM, train_autoencoder
from .dataset import save_image, save_manifest
from .fields import _C0, inv_softplus
from .grid import GridConfig, SparseVoxelGrid
from .raster import Camera, brute_force_render
from .tensorio import Checkpoint, write_tensor

logger = logging.getLogger(__name__)

GT_LEVEL = 5
GT_RAW_DENSITY = 25.0
EMPTY_RAW_DENSITY = -30.0
_PALETTE = np.array(
    [
        [0.85, 0.15, 0.10],
        [0.10, 0.70, 0.20],
        [0.15, 0.25, 0.90],
        [0.90, 0.80, 0.10],
        [0.80, 0.15, 0.80],
        [0.10, 0.80, 0.80],
    ]
)


@dataclass
class SyntheticObject:
    kind: str            # "box" or "sphere"
    lo: np.ndarray       # box min corner (world)
    hi: np.ndarray       # box max corner
    color: np.ndarray
    code: np.ndarray     # 512-d unit semantic code

    def contains(self, pts):
        pts = np.asarray(pts)
        if self.kind == "sphere":
            c = 0.5 * (self.lo + self.hi)
            r = 0.5 * float(np.min(self.hi - self.lo))
            return np.linalg.norm(pts - c, axis=-1) <= r
        return np.all((pts >= self.lo) & (pts <= self.hi), axis=-1)


@dataclass
class SyntheticScene:
    grid_cfg: GridConfig
    objects: list
    cameras: list
    images: list         # (H, W, 3) ground-truth renders
    depths: list         # (H, W, 1) z-depth
    masses: list         # (H, W, n_objects) per-object alpha mass
    codes: np.ndarray    # (n_objects, 512)


def _orthonormal_codes(n, rng):
    g = rng.normal(size=(FEATURE_DIM, n))
    q, _ = np.linalg.qr(g)
    return q.T[:n]


def _ring_camera(angle, elev, radius, res, target):
    pos = target + radius * np.array(
        [np.sin(angle) * np.cos(elev), np.sin(elev), -np.cos(angle) * np.cos(elev)]
    )
    fwd = target - pos
    fwd = fwd / np.linalg.norm(fwd)
    ref = np.array([0.0, 1.0, 0.0])
    right = np.cross(fwd, ref)
    right /= np.linalg.norm(right)
    down = np.cross(fwd, right)
    down /= np.linalg.norm(down)
    r = np.stack([right, down, fwd])
    return Camera(
        fx=res * 1.1, fy=res * 1.1, cx=res / 2.0, cy=res / 2.0,
        R=r, t=-r @ pos, width=res, height=res,
    )


def _place_objects(n_objects, rng, grid_cfg, spheres=False):
    """Non-overlapping objects snapped to the ground-truth voxel lattice.

    Objects stay in the central region so the enclosing wall shell and the
    interior camera ring remain clear of them.
    """
    vs = grid_cfg.w_s / (1 << GT_LEVEL)
    origin = grid_cfg.origin
    cells = 1 << GT_LEVEL
    objects = []
    tries = 0
    while len(objects) < n_objects and tries < 1000:
        tries += 1
        size = rng.integers(5, 9, size=3)  # in gt cells
        lo_cell = rng.integers(cells // 4, cells - cells // 4 - size, size=3)
        lo = origin + lo_cell * vs
        hi = lo + size * vs
        if any(np.all(lo < o.hi + vs) and np.all(hi > o.lo - vs) for o in objects):
            continue
        kind = "sphere" if spheres and rng.random() < 0.5 else "box"
        objects.append(
            SyntheticObject(
                kind=kind, lo=lo, hi=hi,
                color=_PALETTE[len(objects) % len(_PALETTE)],
                code=np.zeros(FEATURE_DIM),
            )
        )
    if len(objects) < n_objects:
        raise RuntimeError("could not place the requested objects without overlap")
    codes = _orthonormal_codes(n_objects, rng)
    for o, c in zip(objects, codes):
        o.code = c
    return objects, codes


WALL_COLOR = 0.9


def build_gt_grid(objects, grid_cfg: GridConfig, n_objects: int) -> SparseVoxelGrid:
    """Bake the objects into a dense grid whose features are one-hot object ids.

    A bright floor slab and a backdrop slab opposite the camera arc give most
    background rays visible content, so free-space density between the
    cameras and the scene is penalized from every view instead of hiding in
    front of a black background.
    """
    cells = 1 << GT_LEVEL
    vs = grid_cfg.w_s / cells
    idx = np.stack(np.meshgrid(*([np.arange(cells)] * 3), indexing="ij"), axis=-1).reshape(-1, 3)
    corners_unit = np.array([[(c >> 2) & 1, (c >> 1) & 1, c & 1] for c in range(8)], dtype=np.float64)
    corner_pts = grid_cfg.origin + (idx[:, None, :] + corners_unit[None, :, :]) * vs
    inside = np.zeros((idx.shape[0], 8), dtype=np.int64)  # 0 none, else object id + 1
    for oi, obj in enumerate(objects):
        hit = obj.contains(corner_pts.reshape(-1, 3)).reshape(-1, 8)
        inside[hit & (inside == 0)] = oi + 1
    is_wall = (idx[:, 1] <= 1) | (idx[:, 2] >= cells - 2)  # floor plus backdrop
    occupied = np.flatnonzero((inside > 0).any(axis=1) | is_wall)
    n = occupied.size
    grid = SparseVoxelGrid(grid_cfg, n_d=1, k=n_objects)
    ins = inside[occupied]
    wall = is_wall[occupied]
    v_geo = np.where((ins > 0) | wall[:, None], GT_RAW_DENSITY, EMPTY_RAW_DENSITY).astype(np.float64)
    obj_of_voxel = np.max(ins, axis=1) - 1
    v_sh = np.zeros((n, 4, 3))
    colors = np.stack([o.color for o in objects])
    v_sh[:, 0, :] = np.where(
        (obj_of_voxel >= 0)[:, None], colors[np.maximum(obj_of_voxel, 0)], WALL_COLOR
    ) / _C0
    v_f = np.where((obj_of_voxel >= 0)[:, None], np.eye(n_objects)[np.maximum(obj_of_voxel, 0)], 0.0)
    v_conf = np.zeros(n)
    grid.insert(np.full(n, GT_LEVEL), idx[occupied], v_geo, v_sh, v_f, v_conf, validate=False)
    return grid


def make_synthetic_scene(
    seed: int,
    n_views: int,
    n_objects: int,
    res: int = 48,
    gt_steps: int = 3000,
    spheres: bool = False,
    grid_cfg: GridConfig = None,
) -> SyntheticScene:
    """Generate geometry, cameras and oracle-rendered ground truth in memory."""
    if n_views < 2:
        raise ValueError("need at least 2 views")
    rng = np.random.default_rng(seed)
    if grid_cfg is None:
        grid_cfg = GridConfig(np.zeros(3), 2.0, L_max=10)
    objects, codes = _place_objects(n_objects, rng, grid_cfg, spheres=spheres)
    gt = build_gt_grid(objects, grid_cfg, n_objects)

    # smooth capture arc facing the backdrop: held-out frames sit between
    # nearby training frames, mirroring an every-nth-frame video protocol
    span = 2.1
    cameras, images, depths, masses = [], [], [], []
    for v in range(n_views):
        frac = v / max(1, n_views - 1)
        angle = -span / 2.0 + span * frac + rng.normal(0, 0.01)
        elev = 0.42 + 0.12 * np.sin(2.0 * np.pi * frac) + rng.normal(0, 0.01)
        cam = _ring_camera(angle, elev, radius=1.3 * grid_cfg.w_s, res=res, target=grid_cfg.w_c)
        bundle = brute_force_render(gt, cam, n_steps=gt_steps, with_normals=False)
        cameras.append(cam)
        images.append(np.clip(bundle.rgb, 0.0, 1.0))
        depths.append(bundle.depth)
        masses.append(bundle.feat)  # one-hot features composite to per-object mass
    return SyntheticScene(
        grid_cfg=grid_cfg, objects=objects, cameras=cameras,
        images=images, depths=depths, masses=masses, codes=codes,
    )


def write_synthetic_dataset(
    scene: SyntheticScene,
    out_dir,
    k: int = 32,
    seed: int = 0,
    affine_depth: bool = False,
    codec_epochs: int = 200,
    mg_blur: float = 1.5,
):
    """Materialize a scene as a dataset directory with teacher bundles."""
    out = Path(out_dir)
    for sub in ("images", "teacher", "masks"):
        (out / sub).mkdir(parents=True, exist_ok=True)
    rng = np.random.default_rng(np.random.SeedSequence([seed, 0xD5]))
    n_obj = scene.codes.shape[0]

    # codec trained on scaled object codes (boundary pixels blend the codes
    # with sub-unit mass) plus the zero background, with slight jitter
    n_bank = 2048
    reps = rng.integers(0, n_obj + 1, size=n_bank)
    bank = np.concatenate([scene.codes, np.zeros((1, FEATURE_DIM))])[reps]
    scale = np.where(rng.random(n_bank) < 0.5, 1.0, rng.uniform(0.1, 1.0, n_bank))
    bank = bank * scale[:, None] + rng.normal(0, 0.003, size=(n_bank, FEATURE_DIM))
    codec, report = train_autoencoder(bank, k=k, epochs=codec_epochs, batch_size=256, lr=3e-3, seed=seed)
    recon = codec.decode(codec.encode(scene.codes))
    code_cos = np.sum(recon * scene.codes, axis=1) / np.maximum(np.linalg.norm(recon, axis=1), 1e-12)
    logger.info("synthetic codec: bank cosine %.4f, code cosine %.4f", report.mean_cosine, code_cos.min())
    Checkpoint(codec=codec, meta={"k": k, "seed": seed, "role": "codec"}).save(out / "codec.ckpt")
    write_tensor(out / "codes.lsvt", scene.codes[:, None, :])

    records = []
    for v, cam in enumerate(scene.cameras):
        name = f"view_{v:02d}"
        save_image(out / "images" / f"{name}.png", scene.images[v])
        mass = scene.masses[v]
        m_a_raw = mass @ scene.codes
        m_a = codec.encode(m_a_raw)
        write_tensor(out / "teacher" / f"{name}.ma.lsvt", m_a)
        depth = scene.depths[v]
        if affine_depth:
            a = float(rng.uniform(0.5, 2.0))
            b = float(rng.uniform(-0.5, 0.5))
            depth = a * depth + b
        write_tensor(out / "teacher" / f"{name}.dd.lsvt", depth)
        onehot = np.concatenate([mass, np.clip(1.0 - mass.sum(-1, keepdims=True), 0.0, 1.0)], axis=-1)
        m_g = gaussian_filter(onehot, sigma=(mg_blur, mg_blur, 0.0))
        write_tensor(out / "teacher" / f"{name}.mg.lsvt", m_g)
        mask_files = []
        for oi in range(n_obj):
            mf = f"masks/{name}_obj{oi}.png"
            save_image(out / mf, (mass[..., oi] > 0.5).astype(np.float64))
            mask_files.append(mf)
        records.append(
            {
                "file": f"images/{name}.png",
                "fx": cam.fx, "fy": cam.fy, "cx": cam.cx, "cy": cam.cy,
                "R": [float(x) for x in cam.R.reshape(-1)],
                "t": [float(x) for x in cam.t],
                "w": cam.width, "h": cam.height,
                "teacher_prefix": f"teacher/{name}",
                "masks": mask_files,
            }
        )
    save_manifest(out, records, scene.grid_cfg, codes_file="codes.lsvt", codec_file="codec.ckpt")
    return out
