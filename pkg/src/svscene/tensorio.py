"""Binary containers: the LSVT tensor file and the LSVR sectioned checkpoint.

Both formats are little-endian with magic bytes; checkpoint sections carry a
CRC32 so cross-language consumers can verify payloads.  Serialization is
canonical (fixed section order, voxels sorted by key, JSON with sorted keys)
so save -> load -> save is byte-identical.
"""

from __future__ import annotations

import io
import json
import logging
import struct
import zlib
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional

import numpy as np

from .codec import Autoencoder
from .errors import BadCheckpoint, BadTensorFile, CheckpointIncomplete
from .grid import GridConfig, SparseVoxelGrid
from .modulate import ModulationNet

logger = logging.getLogger(__name__)

TENSOR_MAGIC = b"LSVT"
CHECKPOINT_MAGIC = b"LSVR"
FORMAT_VERSION = 1
_DTYPE_F32 = 0


def write_tensor(path, array):
    """Write an (H, W, C) float array as a little-endian float32 tensor file."""
    a = np.asarray(array, dtype=np.float64)
    if a.ndim == 2:
        a = a[..., None]
    if a.ndim != 3:
        raise BadTensorFile(f"tensor files hold rank-3 data, got shape {a.shape}")
    h, w, c = a.shape
    payload = np.ascontiguousarray(a, dtype="<f4").tobytes()
    with open(path, "wb") as f:
        f.write(TENSOR_MAGIC)
        f.write(struct.pack("<IIIII", FORMAT_VERSION, h, w, c, _DTYPE_F32))
        f.write(payload)


def read_tensor(path):
    """Read an LSVT tensor file into an (H, W, C) float64 array."""
    with open(path, "rb") as f:
        data = f.read()
    if len(data) < 24 or data[:4] != TENSOR_MAGIC:
        raise BadTensorFile(f"{path}: not a tensor file")
    version, h, w, c, dtype = struct.unpack("<IIIII", data[4:24])
    if version != FORMAT_VERSION:
        raise BadTensorFile(f"{path}: unsupported version {version}")
    if dtype != _DTYPE_F32:
        raise BadTensorFile(f"{path}: unsupported dtype code {dtype}")
    expect = h * w * c * 4
    payload = data[24:]
    if len(payload) != expect:
        raise BadTensorFile(f"{path}: payload is {len(payload)} bytes, expected {expect}")
    return np.frombuffer(payload, dtype="<f4").reshape(h, w, c).astype(np.float64)


# ------------------------------------------------------------- array blobs

_DT_CODES = {np.dtype("<f8"): 1, np.dtype("<i8"): 2, np.dtype("<f4"): 0, np.dtype("<u8"): 3}
_DT_BY_CODE = {v: k for k, v in _DT_CODES.items()}


def _pack_arrays(arrays: dict) -> bytes:
    buf = io.BytesIO()
    buf.write(struct.pack("<I", len(arrays)))
    for name in arrays:
        a = arrays[name]
        a = np.ascontiguousarray(a)
        dt = a.dtype.newbyteorder("<")
        a = a.astype(dt, copy=False)
        code = _DT_CODES[np.dtype(dt)]
        nb = name.encode()
        buf.write(struct.pack("<B", len(nb)))
        buf.write(nb)
        buf.write(struct.pack("<BB", code, a.ndim))
        buf.write(struct.pack(f"<{a.ndim}I", *a.shape))
        buf.write(a.tobytes())
    return buf.getvalue()


def _unpack_arrays(payload: bytes) -> dict:
    buf = io.BytesIO(payload)
    (count,) = struct.unpack("<I", buf.read(4))
    out = {}
    for _ in range(count):
        (nlen,) = struct.unpack("<B", buf.read(1))
        name = buf.read(nlen).decode()
        code, ndim = struct.unpack("<BB", buf.read(2))
        shape = struct.unpack(f"<{ndim}I", buf.read(4 * ndim))
        dt = _DT_BY_CODE[code]
        n = int(np.prod(shape)) if shape else 1
        out[name] = np.frombuffer(buf.read(n * dt.itemsize), dtype=dt).reshape(shape).copy()
    return out


# ------------------------------------------------------------- checkpoint

_SECTION_ORDER = ("GRID", "MODNET", "CODEC", "OPTIM", "META")


@dataclass
class Checkpoint:
    """Sectioned training state: grid, modulation net, codec, optimizer, meta."""

    grid: Optional[SparseVoxelGrid] = None
    net: Optional[ModulationNet] = None
    codec: Optional[Autoencoder] = None
    optim: Optional[dict] = None
    meta: dict = field(default_factory=dict)

    def save(self, path):
        sections = {}
        if self.grid is not None:
            sections["GRID"] = _pack_arrays(_grid_arrays(self.grid))
        if self.net is not None:
            arrays = dict(self.net.params())
            sections["MODNET"] = _pack_arrays(arrays)
        if self.codec is not None:
            arrays = dict(self.codec.params())
            arrays["widths"] = np.array(
                [w.shape[0] for w in self.codec.enc_w], dtype=np.int64
            )
            sections["CODEC"] = _pack_arrays(arrays)
        if self.optim is not None:
            sections["OPTIM"] = _pack_arrays(self.optim)
        meta = dict(self.meta)
        sections["META"] = json.dumps(meta, sort_keys=True, separators=(",", ":")).encode()
        with open(path, "wb") as f:
            f.write(CHECKPOINT_MAGIC)
            f.write(struct.pack("<I", FORMAT_VERSION))
            for name in _SECTION_ORDER:
                if name not in sections:
                    continue
                payload = sections[name]
                nb = name.encode()
                f.write(struct.pack("<B", len(nb)))
                f.write(nb)
                f.write(struct.pack("<Q", len(payload)))
                f.write(payload)
                f.write(struct.pack("<I", zlib.crc32(payload) & 0xFFFFFFFF))

    @classmethod
    def load(cls, path):
        with open(path, "rb") as f:
            data = f.read()
        if len(data) < 8 or data[:4] != CHECKPOINT_MAGIC:
            raise BadCheckpoint(f"{path}: not a checkpoint file")
        (version,) = struct.unpack("<I", data[4:8])
        if version != FORMAT_VERSION:
            raise BadCheckpoint(f"{path}: unsupported version {version}")
        pos = 8
        ck = cls()
        while pos < len(data):
            (nlen,) = struct.unpack_from("<B", data, pos)
            pos += 1
            name = data[pos:pos + nlen].decode()
            pos += nlen
            (plen,) = struct.unpack_from("<Q", data, pos)
            pos += 8
            payload = data[pos:pos + plen]
            pos += plen
            (crc,) = struct.unpack_from("<I", data, pos)
            pos += 4
            if zlib.crc32(payload) & 0xFFFFFFFF != crc:
                raise BadCheckpoint(f"{path}: CRC mismatch in section {name}")
            if name == "GRID":
                ck.grid = _grid_from_arrays(_unpack_arrays(payload))
            elif name == "MODNET":
                ck.net = _net_from_arrays(_unpack_arrays(payload))
            elif name == "CODEC":
                ck.codec = _codec_from_arrays(_unpack_arrays(payload))
            elif name == "OPTIM":
                ck.optim = _unpack_arrays(payload)
            elif name == "META":
                ck.meta = json.loads(payload.decode())
            else:
                logger.warning("skipping unknown checkpoint section %r", name)
        return ck

    def require(self, *names):
        for name in names:
            if getattr(self, name) is None:
                raise CheckpointIncomplete(f"checkpoint is missing its {name}")
        return self


def _grid_arrays(grid: SparseVoxelGrid) -> dict:
    return {
        "w_c": grid.config.w_c,
        "w_s": np.array([grid.config.w_s]),
        "l_max": np.array([grid.config.L_max], dtype=np.int64),
        "n_d": np.array([grid.n_d], dtype=np.int64),
        "k": np.array([grid.k], dtype=np.int64),
        "levels": grid.levels,
        "ijk": grid.ijk,
        "v_geo": grid.v_geo,
        "v_sh": grid.v_sh,
        "v_f": grid.v_f,
        "v_conf": grid.v_conf,
    }


def _grid_from_arrays(a: dict) -> SparseVoxelGrid:
    cfg = GridConfig(a["w_c"], float(a["w_s"][0]), int(a["l_max"][0]))
    grid = SparseVoxelGrid(cfg, n_d=int(a["n_d"][0]), k=int(a["k"][0]))
    if a["levels"].size:
        grid.insert(a["levels"], a["ijk"], a["v_geo"], a["v_sh"], a["v_f"], a["v_conf"], validate=False)
    return grid


def _net_from_arrays(a: dict) -> ModulationNet:
    return ModulationNet(
        f_e1=a["f_e1"], f_e2=a["f_e2"],
        conv_w=[a["conv_w0"], a["conv_w1"], a["conv_w2"]],
        conv_b=[a["conv_b0"], a["conv_b1"], a["conv_b2"]],
    )


def _codec_from_arrays(a: dict) -> Autoencoder:
    return Autoencoder(
        enc_w=[a[f"enc_w{i}"] for i in range(6)],
        enc_b=[a[f"enc_b{i}"] for i in range(6)],
        dec_w=[a[f"dec_w{i}"] for i in range(6)],
        dec_b=[a[f"dec_b{i}"] for i in range(6)],
    )
