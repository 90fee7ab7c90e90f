"""Sparse voxel octree: addressing, voxel geometry, subdivision, pruning, ray traversal.

The grid is leaf-only: stored addresses never contain an ancestor of another
stored address.  Payloads live in columnar numpy arrays indexed by row so the
rasterizer can work vectorized; a packed (level, Morton) key maps addresses to
rows and provides the canonical ordering used for checkpoints and tie-breaks.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np

from .errors import AddressAbsent, MaxLevelReached
from .fields import softplus, trilinear_weights

logger = logging.getLogger(__name__)

_U = np.uint64


def _part1by2(v):
    """Spread the low 16 bits of each value to every third bit."""
    x = np.asarray(v, dtype=np.uint64) & _U(0xFFFF)
    x = (x | (x << _U(32))) & _U(0x1F00000000FFFF)
    x = (x | (x << _U(16))) & _U(0x1F0000FF0000FF)
    x = (x | (x << _U(8))) & _U(0x100F00F00F00F00F)
    x = (x | (x << _U(4))) & _U(0x10C30C30C30C30C3)
    x = (x | (x << _U(2))) & _U(0x1249249249249249)
    return x


def _compact1by2(v):
    x = np.asarray(v, dtype=np.uint64) & _U(0x1249249249249249)
    x = (x | (x >> _U(2))) & _U(0x10C30C30C30C30C3)
    x = (x | (x >> _U(4))) & _U(0x100F00F00F00F00F)
    x = (x | (x >> _U(8))) & _U(0x1F0000FF0000FF)
    x = (x | (x >> _U(16))) & _U(0x1F00000000FFFF)
    x = (x | (x >> _U(32))) & _U(0x1FFFFF)
    return x


def morton_encode(ijk):
    """Interleave integer index triples into 48-bit Morton codes (x in bit 0)."""
    ijk = np.asarray(ijk, dtype=np.uint64)
    return _part1by2(ijk[..., 0]) | (_part1by2(ijk[..., 1]) << _U(1)) | (_part1by2(ijk[..., 2]) << _U(2))


def morton_decode(code):
    code = np.asarray(code, dtype=np.uint64)
    return np.stack(
        [_compact1by2(code), _compact1by2(code >> _U(1)), _compact1by2(code >> _U(2))],
        axis=-1,
    ).astype(np.int64)


def pack_key(level, ijk):
    """Canonical voxel key: level in the top bits, Morton code below."""
    level = np.asarray(level, dtype=np.uint64)
    return (level << _U(48)) | morton_encode(ijk)


def unpack_key(key):
    key = np.asarray(key, dtype=np.uint64)
    level = (key >> _U(48)).astype(np.int64)
    return level, morton_decode(key & _U((1 << 48) - 1))


@dataclass
class GridConfig:
    """World-space placement of the octree: center, edge length, level bound."""

    w_c: np.ndarray
    w_s: float
    L_max: int = 16

    def __post_init__(self):
        self.w_c = np.asarray(self.w_c, dtype=np.float64).reshape(3)
        self.w_s = float(self.w_s)
        if not self.w_s > 0:
            raise ValueError("octree edge length must be positive")
        if not 1 <= int(self.L_max) <= 16:
            raise ValueError("L_max must be in [1, 16]")
        self.L_max = int(self.L_max)

    @property
    def origin(self):
        """Minimum corner of the octree box."""
        return self.w_c - 0.5 * self.w_s


@dataclass(frozen=True)
class OctreeAddress:
    """Level plus integer index triple identifying one voxel."""

    l: int
    v_i: tuple

    def __post_init__(self):
        object.__setattr__(self, "l", int(self.l))
        object.__setattr__(self, "v_i", tuple(int(c) for c in self.v_i))
        if self.l < 1:
            raise ValueError("level must be >= 1")
        lim = 1 << self.l
        if any(not 0 <= c < lim for c in self.v_i):
            raise ValueError(f"index {self.v_i} out of range for level {self.l}")

    @property
    def key(self):
        return int(pack_key(self.l, np.asarray(self.v_i)))


def voxel_geometry(addr: OctreeAddress, cfg: GridConfig):
    """Voxel minimum corner and edge length.

    v_s = w_s * 2^-l and v_c = w_c - 0.5*w_s + v_s*v_i; the voxel occupies the
    axis-aligned box [v_c, v_c + v_s]^3.
    """
    v_s = cfg.w_s * 2.0 ** (-addr.l)
    v_c = cfg.w_c - 0.5 * cfg.w_s + v_s * np.asarray(addr.v_i, dtype=np.float64)
    return v_c, v_s


def voxel_geometry_arrays(levels, ijk, cfg: GridConfig):
    """Vectorized voxel_geometry over (N,) levels and (N, 3) indices."""
    v_s = cfg.w_s * np.power(2.0, -np.asarray(levels, dtype=np.float64))
    v_c = cfg.origin[None, :] + v_s[:, None] * np.asarray(ijk, dtype=np.float64)
    return v_c, v_s


@dataclass
class VoxelPayload:
    """Learnable per-voxel fields: density corners, SH color, feature, confidence."""

    v_geo: np.ndarray  # (2, 2, 2) raw pre-activation corner densities
    v_sh: np.ndarray   # ((N_d+1)^2, 3) spherical-harmonic coefficients
    v_f: np.ndarray    # (k,) latent feature
    v_conf: float      # raw pre-sigmoid confidence

    def validate(self, n_d, k):
        if self.v_geo.shape != (2, 2, 2):
            raise ValueError("v_geo must be 2x2x2")
        if self.v_sh.shape != ((n_d + 1) ** 2, 3):
            raise ValueError(f"v_sh must be ({(n_d + 1) ** 2}, 3)")
        if self.v_f.shape != (k,):
            raise ValueError(f"v_f must be ({k},)")
        for a in (self.v_geo, self.v_sh, self.v_f, np.asarray(self.v_conf)):
            if not np.all(np.isfinite(a)):
                raise ValueError("payload entries must be finite")


@dataclass(frozen=True)
class VoxelHit:
    """One ray/voxel intersection interval; produced sorted and disjoint."""

    address: OctreeAddress
    t_entry: float
    t_exit: float
    row: int = -1


@dataclass
class MutationRecord:
    """Row bookkeeping for one grid mutation.

    For every new row, ``source_rows`` holds the old row it derives from
    (itself for survivors, the parent for children) and ``child_octant`` the
    child octant code, or -1 for plain copies.  Auxiliary per-voxel buffers
    (optimizer moments, accumulated statistics) are remapped with
    ``apply_to_buffer``.
    """

    source_rows: np.ndarray
    child_octant: np.ndarray
    n_old: int

    def apply_to_buffer(self, buf, trilinear_geo=False):
        out = np.ascontiguousarray(buf[self.source_rows])
        if trilinear_geo:
            sel = np.flatnonzero(self.child_octant >= 0)
            if sel.size:
                mats = _CHILD_GEO_MATS[self.child_octant[sel]]
                out[sel] = np.einsum("okc,oc->ok", mats, buf[self.source_rows[sel]])
        return out


def _child_geo_matrices():
    """(8, 8, 8) trilinear weights of each parent corner at each child corner."""
    mats = np.zeros((8, 8, 8))
    for o in range(8):
        off = np.array([o & 1, (o >> 1) & 1, (o >> 2) & 1], dtype=np.float64)
        for c in range(8):
            corner = np.array([(c >> 2) & 1, (c >> 1) & 1, c & 1], dtype=np.float64)
            u = (off + corner) / 2.0
            mats[o, c] = trilinear_weights(u)
    return mats


_CHILD_GEO_MATS = _child_geo_matrices()

# Child corner flat order matches fields.trilinear_weights: ix*4 + iy*2 + iz.
_CORNER_BITS = np.array([[(c >> 2) & 1, (c >> 1) & 1, c & 1] for c in range(8)], dtype=np.int64)


class SparseVoxelGrid:
    """Leaf-only octree of voxels with columnar payload storage."""

    def __init__(self, config: GridConfig, n_d: int = 1, k: int = 32):
        if n_d < 0 or n_d > 3:
            raise ValueError("SH degree must be in [0, 3]")
        if k < 1:
            raise ValueError("feature dimension must be >= 1")
        self.config = config
        self.n_d = int(n_d)
        self.k = int(k)
        s = self.sh_terms
        self.levels = np.zeros(0, dtype=np.int64)
        self.ijk = np.zeros((0, 3), dtype=np.int64)
        self.v_geo = np.zeros((0, 8), dtype=np.float64)
        self.v_sh = np.zeros((0, s, 3), dtype=np.float64)
        self.v_f = np.zeros((0, self.k), dtype=np.float64)
        self.v_conf = np.zeros(0, dtype=np.float64)
        self._keys = np.zeros(0, dtype=np.uint64)
        self._rows: dict = {}
        self._cache_epoch = 0
        self._caches: dict = {}

    # ------------------------------------------------------------------ basics

    @property
    def n(self) -> int:
        return self.levels.shape[0]

    @property
    def sh_terms(self) -> int:
        return (self.n_d + 1) ** 2

    def keys(self):
        return self._keys

    def addresses(self):
        return [OctreeAddress(int(l), tuple(v)) for l, v in zip(self.levels, self.ijk)]

    def row_of(self, addr: OctreeAddress) -> int:
        row = self._rows.get(addr.key)
        if row is None:
            raise AddressAbsent(f"voxel {addr} not stored")
        return row

    def payload(self, addr: OctreeAddress) -> VoxelPayload:
        r = self.row_of(addr)
        return VoxelPayload(
            v_geo=self.v_geo[r].reshape(2, 2, 2),
            v_sh=self.v_sh[r],
            v_f=self.v_f[r],
            v_conf=float(self.v_conf[r]),
        )

    def geometry_arrays(self):
        """(v_min (N,3), v_s (N,)) for all voxels, cached per mutation epoch."""
        c = self._caches.get("geom")
        if c is None or c[0] != self._cache_epoch:
            vmin, vs = voxel_geometry_arrays(self.levels, self.ijk, self.config)
            c = (self._cache_epoch, vmin, vs)
            self._caches["geom"] = c
        return c[1], c[2]

    def _touch(self):
        self._cache_epoch += 1

    # ------------------------------------------------------------------ editing

    def _assert_leaf_only_against_existing(self, levels, ijk):
        keys = pack_key(levels, ijk)
        codes = keys & _U((1 << 48) - 1)
        for lv, code in zip(np.asarray(levels), codes):
            # ancestors of the incoming voxel must be absent
            for la in range(1, int(lv)):
                anc = (int(code) >> (3 * (int(lv) - la))) | (la << 48)
                if anc in self._rows:
                    raise ValueError("insert would violate the leaf-only invariant")
            # descendants of the incoming voxel must be absent
            for ld, (lk, lr) in self._level_key_tables().items():
                if ld <= int(lv):
                    continue
                lo = int(code) << (3 * (ld - int(lv)))
                hi = (int(code) + 1) << (3 * (ld - int(lv)))
                a = np.searchsorted(lk & _U((1 << 48) - 1), lo, side="left")
                b = np.searchsorted(lk & _U((1 << 48) - 1), hi, side="left")
                if b > a:
                    raise ValueError("insert would violate the leaf-only invariant")

    def insert(self, levels, ijk, v_geo, v_sh, v_f, v_conf, validate=True):
        """Append a batch of voxels and re-canonicalize. Returns a MutationRecord."""
        levels = np.asarray(levels, dtype=np.int64).reshape(-1)
        ijk = np.asarray(ijk, dtype=np.int64).reshape(-1, 3)
        if np.any(levels < 1) or np.any(levels > self.config.L_max):
            raise ValueError("levels out of range")
        if np.any(ijk < 0) or np.any(ijk >= (1 << levels)[:, None]):
            raise ValueError("indices out of range")
        if validate and self.n:
            self._assert_leaf_only_against_existing(levels, ijk)
        new_keys = pack_key(levels, ijk)
        if len(np.unique(new_keys)) != len(new_keys) or any(int(kk) in self._rows for kk in new_keys):
            raise ValueError("duplicate addresses in insert")
        n_old = self.n
        self.levels = np.concatenate([self.levels, levels])
        self.ijk = np.concatenate([self.ijk, ijk])
        self.v_geo = np.concatenate([self.v_geo, np.asarray(v_geo, dtype=np.float64).reshape(-1, 8)])
        self.v_sh = np.concatenate([self.v_sh, np.asarray(v_sh, dtype=np.float64).reshape(-1, self.sh_terms, 3)])
        self.v_f = np.concatenate([self.v_f, np.asarray(v_f, dtype=np.float64).reshape(-1, self.k)])
        self.v_conf = np.concatenate([self.v_conf, np.asarray(v_conf, dtype=np.float64).reshape(-1)])
        self._keys = np.concatenate([self._keys, new_keys])
        rec = MutationRecord(
            source_rows=np.arange(self.n, dtype=np.int64),
            child_octant=np.full(self.n, -1, dtype=np.int64),
            n_old=n_old,
        )
        return self._canonicalize(rec)

    def _canonicalize(self, rec: MutationRecord) -> MutationRecord:
        order = np.argsort(self._keys, kind="stable")
        for name in ("levels", "ijk", "v_geo", "v_sh", "v_f", "v_conf", "_keys"):
            setattr(self, name, np.ascontiguousarray(getattr(self, name)[order]))
        self._rows = {int(kk): i for i, kk in enumerate(self._keys)}
        self._touch()
        return MutationRecord(rec.source_rows[order], rec.child_octant[order], rec.n_old)

    def subdivide_rows(self, rows) -> MutationRecord:
        """Replace the given rows by their 8 children (payload-preserving)."""
        rows = np.unique(np.asarray(rows, dtype=np.int64))
        if rows.size and np.any(self.levels[rows] >= self.config.L_max):
            raise MaxLevelReached("cannot subdivide voxels at L_max")
        keep = np.ones(self.n, dtype=bool)
        keep[rows] = False
        keep_rows = np.flatnonzero(keep)
        p_lv = self.levels[rows]
        p_ijk = self.ijk[rows]
        octs = np.arange(8, dtype=np.int64)
        c_lv = np.repeat(p_lv, 8) + 1
        c_ijk = (p_ijk[:, None, :] * 2 + _CORNER_OCTANTS[None, :, :]).reshape(-1, 3)
        c_geo = np.einsum("okc,pc->pok", _CHILD_GEO_MATS, self.v_geo[rows]).reshape(-1, 8)
        c_sh = np.repeat(self.v_sh[rows], 8, axis=0)
        c_f = np.repeat(self.v_f[rows], 8, axis=0)
        c_conf = np.repeat(self.v_conf[rows], 8)
        n_old = self.n
        self.levels = np.concatenate([self.levels[keep_rows], c_lv])
        self.ijk = np.concatenate([self.ijk[keep_rows], c_ijk])
        self.v_geo = np.concatenate([self.v_geo[keep_rows], c_geo])
        self.v_sh = np.concatenate([self.v_sh[keep_rows], c_sh])
        self.v_f = np.concatenate([self.v_f[keep_rows], c_f])
        self.v_conf = np.concatenate([self.v_conf[keep_rows], c_conf])
        self._keys = np.concatenate([self._keys[keep_rows], pack_key(c_lv, c_ijk)])
        rec = MutationRecord(
            source_rows=np.concatenate([keep_rows, np.repeat(rows, 8)]),
            child_octant=np.concatenate(
                [np.full(keep_rows.size, -1, dtype=np.int64), np.tile(octs, rows.size)]
            ),
            n_old=n_old,
        )
        return self._canonicalize(rec)

    def subdivide(self, addr: OctreeAddress):
        """Split one voxel; returns the 8 child addresses."""
        row = self.row_of(addr)
        if addr.l >= self.config.L_max:
            raise MaxLevelReached(f"voxel {addr} already at L_max")
        self.subdivide_rows([row])
        base = np.asarray(addr.v_i, dtype=np.int64) * 2
        return [
            OctreeAddress(addr.l + 1, tuple(base + _CORNER_OCTANTS[o]))
            for o in range(8)
        ]

    def prune_rows(self, tau_d: float):
        """Drop voxels whose peak activated corner density is below tau_d."""
        if tau_d < 0:
            raise ValueError("tau_d must be >= 0")
        if self.n == 0:
            return 0, MutationRecord(np.zeros(0, np.int64), np.zeros(0, np.int64), 0)
        peak = softplus(self.v_geo).max(axis=1)
        keep_rows = np.flatnonzero(peak >= tau_d)
        removed = self.n - keep_rows.size
        if removed:
            n_old = self.n
            for name in ("levels", "ijk", "v_geo", "v_sh", "v_f", "v_conf", "_keys"):
                setattr(self, name, np.ascontiguousarray(getattr(self, name)[keep_rows]))
            self._rows = {int(kk): i for i, kk in enumerate(self._keys)}
            self._touch()
            rec = MutationRecord(keep_rows, np.full(keep_rows.size, -1, np.int64), n_old)
        else:
            rec = MutationRecord(
                np.arange(self.n, dtype=np.int64), np.full(self.n, -1, np.int64), self.n
            )
        return removed, rec

    def prune(self, tau_d: float) -> int:
        removed, _ = self.prune_rows(tau_d)
        return removed

    # ------------------------------------------------------------------ queries

    def _level_key_tables(self):
        """Per-level sorted key arrays with row lookup, cached."""
        c = self._caches.get("levels")
        if c is None or c[0] != self._cache_epoch:
            tables = {}
            for lv in np.unique(self.levels):
                sel = np.flatnonzero(self.levels == lv)
                lk = self._keys[sel]
                order = np.argsort(lk)
                tables[int(lv)] = (lk[order], sel[order])
            c = (self._cache_epoch, tables)
            self._caches["levels"] = c
        return c[1]

    def point_rows(self, points):
        """Row of the leaf containing each point, or -1 (vectorized)."""
        points = np.asarray(points, dtype=np.float64).reshape(-1, 3)
        rows = np.full(points.shape[0], -1, dtype=np.int64)
        origin = self.config.origin
        for lv, (lk, lr) in self._level_key_tables().items():
            pending = rows < 0
            if not pending.any():
                break
            vs = self.config.w_s * 2.0 ** (-lv)
            idx = np.floor((points[pending] - origin) / vs).astype(np.int64)
            ok = np.all((idx >= 0) & (idx < (1 << lv)), axis=1)
            keys = pack_key(np.full(idx.shape[0], lv), idx)
            pos = np.searchsorted(lk, keys)
            pos = np.clip(pos, 0, lk.size - 1) if lk.size else pos
            found = ok & (lk.size > 0) & (lk[pos] == keys)
            tgt = np.flatnonzero(pending)[found]
            rows[tgt] = lr[pos[found]]
        return rows

    def _internal_nodes(self):
        """Set of packed keys of every strict ancestor of a stored leaf."""
        c = self._caches.get("internal")
        if c is None or c[0] != self._cache_epoch:
            nodes = set()
            for kk in self._keys:
                lv = int(kk >> 48)
                code = int(kk) & ((1 << 48) - 1)
                for la in range(lv - 1, 0, -1):
                    akey = (la << 48) | (code >> (3 * (lv - la)))
                    if akey in nodes:
                        break
                    nodes.add(akey)
            c = (self._cache_epoch, nodes)
            self._caches["internal"] = c
        return c[1]

    def traverse(self, origin, direction):
        """Ordered ray/voxel intersections (front to back, clipped at t=0)."""
        origin = np.asarray(origin, dtype=np.float64).reshape(3)
        direction = np.asarray(direction, dtype=np.float64).reshape(3)
        if abs(np.linalg.norm(direction) - 1.0) > 1e-9:
            raise ValueError("ray direction must be unit length")
        if self.n == 0:
            return []
        smask = int(direction[0] < 0) | (int(direction[1] < 0) << 1) | (int(direction[2] < 0) << 2)
        order = [m ^ smask for m in range(8)]
        internal = self._internal_nodes()
        rows = self._rows
        w_s = self.config.w_s
        base = self.config.origin
        hits = []

        def slab(bmin, vs):
            t0, t1 = -np.inf, np.inf
            for ax in range(3):
                d = direction[ax]
                if d == 0.0:
                    if not bmin[ax] <= origin[ax] <= bmin[ax] + vs:
                        return None
                    continue
                a = (bmin[ax] - origin[ax]) / d
                b = (bmin[ax] + vs - origin[ax]) / d
                if a > b:
                    a, b = b, a
                t0 = max(t0, a)
                t1 = min(t1, b)
            t0 = max(t0, 0.0)
            if t1 <= t0:
                return None
            return t0, t1

        stack = [(0, 0, 0, 0)]  # (level, i, j, k); level 0 is the conceptual root
        while stack:
            lv, i, j, k = stack.pop()
            vs = w_s * 2.0 ** (-lv)
            bmin = base + vs * np.array([i, j, k], dtype=np.float64)
            iv = slab(bmin, vs)
            if iv is None:
                continue
            key = (lv << 48) | int(morton_encode(np.array([i, j, k]))) if lv else 0
            if lv >= 1 and key in rows:
                r = rows[key]
                hits.append(
                    VoxelHit(OctreeAddress(lv, (i, j, k)), iv[0], iv[1], row=r)
                )
                continue
            if lv == 0 or key in internal:
                if lv >= self.config.L_max:
                    continue
                for m in reversed(order):
                    ci = i * 2 + (m & 1)
                    cj = j * 2 + ((m >> 1) & 1)
                    ck = k * 2 + ((m >> 2) & 1)
                    stack.append((lv + 1, ci, cj, ck))
        hits.sort(key=lambda h: (h.t_entry, h.address.key))
        return hits


_CORNER_OCTANTS = np.array([[o & 1, (o >> 1) & 1, (o >> 2) & 1] for o in range(8)], dtype=np.int64)
