"""Geometry outputs: marching-cubes mesh extraction from the activated density
field and depth-to-normal conversion.

Corner values are pooled (averaged) across all same-level voxels sharing a
lattice point before contouring, so vertices on faces shared by same-level
neighbors coincide exactly; seams between different octree levels are left
unstitched and flagged in the mesh metadata.
"""

from __future__ import annotations

import logging
import struct
from dataclasses import dataclass, field

import numpy as np

from ._mc_tables import EDGE_TABLE, TRI_TABLE
from .errors import EmptyGrid
from .fields import softplus
from .grid import SparseVoxelGrid
from .raster import Camera

logger = logging.getLogger(__name__)

DEGENERATE_AREA = 1e-12

# lattice (x, y, z) offsets of the 8 table corners
_MC_CORNERS = np.array(
    [
        [0, 0, 0], [1, 0, 0], [1, 1, 0], [0, 1, 0],
        [0, 0, 1], [1, 0, 1], [1, 1, 1], [0, 1, 1],
    ],
    dtype=np.int64,
)
_EDGE_CORNERS = (
    (0, 1), (1, 2), (2, 3), (3, 0),
    (4, 5), (5, 6), (6, 7), (7, 4),
    (0, 4), (1, 5), (2, 6), (3, 7),
)
# payload corners are stored x-major (ix*4 + iy*2 + iz); map table corners there
_MC_TO_FLAT = np.array([x * 4 + y * 2 + z for x, y, z in _MC_CORNERS], dtype=np.int64)


@dataclass
class TriangleMesh:
    vertices: np.ndarray          # (V, 3) world coordinates
    faces: np.ndarray             # (F, 3) vertex indices
    normals: np.ndarray = None    # optional (V, 3)
    metadata: dict = field(default_factory=dict)

    def __post_init__(self):
        self.vertices = np.asarray(self.vertices, dtype=np.float64).reshape(-1, 3)
        self.faces = np.asarray(self.faces, dtype=np.int64).reshape(-1, 3)
        if self.faces.size and (self.faces.min() < 0 or self.faces.max() >= len(self.vertices)):
            raise ValueError("face indices out of range")

    @property
    def face_normals(self):
        v = self.vertices
        f = self.faces
        n = np.cross(v[f[:, 1]] - v[f[:, 0]], v[f[:, 2]] - v[f[:, 0]])
        lens = np.linalg.norm(n, axis=1, keepdims=True)
        return n / np.maximum(lens, 1e-300)

    def area(self) -> float:
        v = self.vertices
        f = self.faces
        n = np.cross(v[f[:, 1]] - v[f[:, 0]], v[f[:, 2]] - v[f[:, 0]])
        return float(0.5 * np.linalg.norm(n, axis=1).sum())


def _corner_key(level, coords):
    """Pack (level, lattice xyz) into one integer key; coords fit 17 bits."""
    c = np.asarray(coords, dtype=np.uint64)
    return (
        (np.uint64(level) << np.uint64(51))
        | (c[..., 0] << np.uint64(34))
        | (c[..., 1] << np.uint64(17))
        | c[..., 2]
    )


def extract_mesh(grid: SparseVoxelGrid, iso: float) -> TriangleMesh:
    """Marching cubes over per-voxel corner lattices of activated density."""
    if grid.n == 0:
        raise EmptyGrid("cannot extract a mesh from an empty grid")

    levels_present = sorted(int(l) for l in np.unique(grid.levels))
    verts: list = []
    vert_ids: dict = {}
    faces: list = []

    # pooled activated corner values per (level, lattice point)
    act = softplus(grid.v_geo)
    pooled: dict = {}
    counts: dict = {}
    corner_keys = np.zeros((grid.n, 8), dtype=np.uint64)
    for c in range(8):
        lat = grid.ijk + _MC_CORNERS[c]
        keys = _corner_key(grid.levels.astype(np.uint64), lat)
        corner_keys[:, c] = keys
        flat = _MC_TO_FLAT[c]
        for row in range(grid.n):
            kk = int(keys[row])
            pooled[kk] = pooled.get(kk, 0.0) + act[row, flat]
            counts[kk] = counts.get(kk, 0) + 1

    origin = grid.config.origin
    for row in range(grid.n):
        lv = int(grid.levels[row])
        vs = grid.config.w_s * 2.0 ** (-lv)
        base = grid.ijk[row]
        vals = np.array([pooled[int(corner_keys[row, c])] / counts[int(corner_keys[row, c])] for c in range(8)])
        cube = 0
        for c in range(8):
            if vals[c] < iso:
                cube |= 1 << c
        edges = EDGE_TABLE[cube]
        if edges == 0:
            continue
        edge_vert = {}
        for e in range(12):
            if not edges & (1 << e):
                continue
            a, b = _EDGE_CORNERS[e]
            ka, kb = int(corner_keys[row, a]), int(corner_keys[row, b])
            ekey = (ka, kb) if ka < kb else (kb, ka)
            vid = vert_ids.get(ekey)
            if vid is None:
                va, vb = vals[a], vals[b]
                denom = vb - va
                t = 0.5 if abs(denom) < 1e-300 else (iso - va) / denom
                t = min(1.0, max(0.0, t))
                pa = origin + (base + _MC_CORNERS[a]) * vs
                pb = origin + (base + _MC_CORNERS[b]) * vs
                vid = len(verts)
                verts.append(pa + t * (pb - pa))
                vert_ids[ekey] = vid
            edge_vert[e] = vid
        tri = TRI_TABLE[cube]
        for i in range(0, len(tri), 3):
            faces.append((edge_vert[tri[i]], edge_vert[tri[i + 1]], edge_vert[tri[i + 2]]))

    if not verts:
        return TriangleMesh(
            vertices=np.zeros((0, 3)), faces=np.zeros((0, 3), np.int64),
            metadata={"levels": levels_present, "unstitched_cross_level_seams": len(levels_present) > 1},
        )
    v = np.asarray(verts)
    f = np.asarray(faces, dtype=np.int64)
    n = np.cross(v[f[:, 1]] - v[f[:, 0]], v[f[:, 2]] - v[f[:, 0]])
    keep = 0.5 * np.linalg.norm(n, axis=1) > DEGENERATE_AREA
    mesh = TriangleMesh(
        vertices=v, faces=f[keep],
        metadata={"levels": levels_present, "unstitched_cross_level_seams": len(levels_present) > 1},
    )
    return mesh


def depth_to_normal(depth, cam: Camera) -> np.ndarray:
    """Camera-space normals from a z-depth map by finite-difference tangents.

    Depth is camera z-depth; each pixel unprojects to z * ((x+0.5-cx)/fx,
    (y+0.5-cy)/fy, 1).  Interior pixels use central differences, borders fall
    back to one-sided differences; invalid depth (<= 0) yields a zero normal.
    Normals face the camera (negative z for a frontoparallel surface).
    """
    d = np.asarray(depth, dtype=np.float64)
    if d.ndim == 3:
        d = d[..., 0]
    h, w = d.shape
    xs = (np.arange(w) + 0.5 - cam.cx) / cam.fx
    ys = (np.arange(h) + 0.5 - cam.cy) / cam.fy
    u, v = np.meshgrid(xs, ys)
    pts = np.stack([d * u, d * v, d], axis=-1)
    valid = d > 0.0

    def _tangent(axis):
        t = np.zeros_like(pts)
        ok = np.zeros((h, w), dtype=bool)
        p_next = np.roll(pts, -1, axis=axis)
        p_prev = np.roll(pts, 1, axis=axis)
        v_next = np.roll(valid, -1, axis=axis)
        v_prev = np.roll(valid, 1, axis=axis)
        if axis == 0:
            v_next[-1, :] = False
            v_prev[0, :] = False
        else:
            v_next[:, -1] = False
            v_prev[:, 0] = False
        central = v_next & v_prev
        fwd = v_next & ~v_prev
        bwd = v_prev & ~v_next
        t[central] = (p_next[central] - p_prev[central]) * 0.5
        t[fwd] = p_next[fwd] - pts[fwd]
        t[bwd] = pts[bwd] - p_prev[bwd]
        ok = central | fwd | bwd
        return t, ok

    ty, oky = _tangent(0)
    tx, okx = _tangent(1)
    n = -np.cross(tx, ty)
    lens = np.linalg.norm(n, axis=-1)
    good = valid & okx & oky & (lens > 1e-300)
    out = np.zeros((h, w, 3))
    out[good] = n[good] / lens[good][:, None]
    return out


# ------------------------------------------------------------------ exporters

def write_stl(path, mesh: TriangleMesh):
    """Binary STL export."""
    fn = mesh.face_normals
    v = mesh.vertices
    with open(path, "wb") as f:
        f.write(b"svscene mesh".ljust(80, b"\0"))
        f.write(struct.pack("<I", len(mesh.faces)))
        for i, face in enumerate(mesh.faces):
            f.write(struct.pack("<3f", *fn[i]))
            for vi in face:
                f.write(struct.pack("<3f", *v[vi]))
            f.write(struct.pack("<H", 0))


def write_obj(path, mesh: TriangleMesh):
    """ASCII OBJ export (1-based indices)."""
    with open(path, "w") as f:
        f.write("# svscene mesh\n")
        for v in mesh.vertices:
            f.write(f"v {v[0]:.9g} {v[1]:.9g} {v[2]:.9g}\n")
        for face in mesh.faces:
            f.write(f"f {face[0] + 1} {face[1] + 1} {face[2] + 1}\n")
