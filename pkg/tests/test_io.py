"""Binary formats, dataset loading, image metrics."""

import json

import numpy as np
import pytest
from hypothesis import given, strategies as st

from svscene.codec import Autoencoder
from svscene.dataset import load_dataset, load_image, save_image, save_manifest
from svscene.errors import (
    BadCheckpoint,
    BadRotation,
    BadTensorFile,
    CheckpointIncomplete,
    MissingManifest,
    MixedResolutions,
)
from svscene.grid import GridConfig
from svscene.metrics import psnr, ssim
from svscene.modulate import ModulationNet
from svscene.tensorio import Checkpoint, read_tensor, write_tensor

from conftest import random_grid


class TestTensorFile:
    def test_roundtrip_bit_exact(self, tmp_path):
        rng = np.random.default_rng(0)
        a = rng.normal(size=(7, 5, 3)).astype(np.float32).astype(np.float64)
        p = tmp_path / "t.lsvt"
        write_tensor(p, a)
        b = read_tensor(p)
        assert np.array_equal(a, b)

    @given(st.integers(0, 2 ** 31), st.integers(1, 9), st.integers(1, 9), st.integers(1, 5))
    def test_roundtrip_property(self, seed, h, w, c):
        import tempfile

        rng = np.random.default_rng(seed)
        a = rng.normal(size=(h, w, c)).astype(np.float32).astype(np.float64)
        with tempfile.TemporaryDirectory() as td:
            p = f"{td}/x.lsvt"
            write_tensor(p, a)
            assert np.array_equal(read_tensor(p), a)

    def test_magic_and_length_validation(self, tmp_path):
        p = tmp_path / "bad.lsvt"
        p.write_bytes(b"NOPE" + b"\0" * 40)
        with pytest.raises(BadTensorFile):
            read_tensor(p)
        write_tensor(p, np.zeros((2, 2, 1)))
        data = p.read_bytes()
        p.write_bytes(data[:-4])  # truncate payload
        with pytest.raises(BadTensorFile):
            read_tensor(p)


class TestCheckpoint:
    def _full_checkpoint(self):
        rng = np.random.default_rng(1)
        grid = random_grid(seed=1, n=12, level=2, k=4)
        net = ModulationNet.create(4, 6, rng=rng)
        codec = Autoencoder.create(k=4, rng=rng)
        return Checkpoint(
            grid=grid, net=net, codec=codec,
            meta={"k": 4, "n_d": 1, "seed": 1, "iteration": 0},
        )

    def test_roundtrip_byte_identical(self, tmp_path):
        ck = self._full_checkpoint()
        p1 = tmp_path / "a.lsvr"
        p2 = tmp_path / "b.lsvr"
        ck.save(p1)
        Checkpoint.load(p1).save(p2)
        assert p1.read_bytes() == p2.read_bytes()

    def test_grid_contents_roundtrip(self, tmp_path):
        ck = self._full_checkpoint()
        p = tmp_path / "a.lsvr"
        ck.save(p)
        back = Checkpoint.load(p)
        assert np.array_equal(back.grid.v_geo, ck.grid.v_geo)
        assert np.array_equal(back.grid.v_sh, ck.grid.v_sh)
        assert np.array_equal(back.grid.levels, ck.grid.levels)
        assert back.grid.config.w_s == ck.grid.config.w_s
        assert np.array_equal(back.net.conv_w[1], ck.net.conv_w[1])
        assert np.array_equal(back.codec.dec_w[3], ck.codec.dec_w[3])
        assert back.meta["iteration"] == 0

    def test_crc_detects_corruption(self, tmp_path):
        ck = self._full_checkpoint()
        p = tmp_path / "a.lsvr"
        ck.save(p)
        data = bytearray(p.read_bytes())
        data[100] ^= 0xFF
        p.write_bytes(bytes(data))
        with pytest.raises(BadCheckpoint):
            Checkpoint.load(p)

    def test_require_missing_section(self, tmp_path):
        p = tmp_path / "a.lsvr"
        Checkpoint(grid=random_grid(seed=0, n=4), meta={}).save(p)
        ck = Checkpoint.load(p)
        with pytest.raises(CheckpointIncomplete):
            ck.require("codec")


class TestMetrics:
    def test_psnr_identical_capped(self):
        img = np.random.default_rng(0).random((8, 8, 3))
        assert psnr(img, img) == 99.0

    def test_psnr_constant_offset(self):
        gt = np.zeros((8, 8))
        assert psnr(gt + 0.1, gt) == pytest.approx(20.0, abs=1e-12)

    def test_psnr_matches_loop_reference(self):
        rng = np.random.default_rng(1)
        a = rng.random((6, 7, 3))
        b = rng.random((6, 7, 3))
        mse = np.mean([(x - y) ** 2 for x, y in zip(a.reshape(-1), b.reshape(-1))])
        assert psnr(a, b) == pytest.approx(10 * np.log10(1.0 / mse), abs=1e-6)

    def test_ssim_identical(self):
        img = np.random.default_rng(2).random((16, 16, 3))
        assert ssim(img, img) == pytest.approx(1.0, abs=1e-12)

    def test_ssim_matches_skimage(self):
        from skimage.metrics import structural_similarity

        rng = np.random.default_rng(3)
        a = rng.random((20, 18, 3))
        b = rng.random((20, 18, 3))
        ref = structural_similarity(
            a, b, data_range=1.0, channel_axis=2, gaussian_weights=True,
            sigma=1.5, use_sample_covariance=False,
        )
        assert ssim(a, b) == pytest.approx(ref, abs=1e-12)


class TestDataset:
    def _write_dataset(self, root, n=2, res=8, rotation_drift=0.0):
        (root / "images").mkdir(parents=True)
        rng = np.random.default_rng(0)
        records = []
        for i in range(n):
            img = rng.random((res, res, 3))
            save_image(root / "images" / f"v{i}.png", img)
            r = np.eye(3) + rotation_drift * rng.normal(size=(3, 3))
            records.append(
                {
                    "file": f"images/v{i}.png",
                    "fx": 10.0, "fy": 10.0, "cx": res / 2, "cy": res / 2,
                    "R": [float(x) for x in r.reshape(-1)],
                    "t": [0.0, 0.0, 3.0], "w": res, "h": res,
                }
            )
        save_manifest(root, records, GridConfig(np.zeros(3), 2.0, 8))
        return records

    def test_minimal_load(self, tmp_path):
        self._write_dataset(tmp_path, n=1)
        ds = load_dataset(tmp_path)
        assert len(ds) == 1
        assert ds.image(0).shape == (8, 8, 3)

    def test_missing_manifest(self, tmp_path):
        with pytest.raises(MissingManifest):
            load_dataset(tmp_path)

    def test_bad_rotation_rejected(self, tmp_path):
        self._write_dataset(tmp_path, n=1, rotation_drift=0.1)
        with pytest.raises(BadRotation):
            load_dataset(tmp_path)

    def test_small_drift_reorthonormalized(self, tmp_path):
        self._write_dataset(tmp_path, n=1, rotation_drift=1e-5)
        ds = load_dataset(tmp_path)
        r = ds.views[0].camera.R
        assert np.max(np.abs(r @ r.T - np.eye(3))) < 1e-12

    def test_mixed_resolutions_rejected(self, tmp_path):
        records = self._write_dataset(tmp_path, n=2)
        spec = json.loads((tmp_path / "cameras.json").read_text())
        spec["views"][1]["w"] = 16
        spec["views"][1]["h"] = 16
        (tmp_path / "cameras.json").write_text(json.dumps(spec))
        with pytest.raises(MixedResolutions):
            load_dataset(tmp_path)

    def test_image_roundtrip(self, tmp_path):
        img = np.round(np.random.default_rng(4).random((9, 9, 3)) * 255) / 255
        save_image(tmp_path / "x.png", img)
        back = load_image(tmp_path / "x.png")
        assert np.max(np.abs(back - img)) < 1e-12
