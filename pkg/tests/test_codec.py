"""Feature autoencoder: forward passes, training, round-trip properties."""

import numpy as np
import pytest

from svscene.codec import FEATURE_DIM, Autoencoder, train_autoencoder
from svscene.errors import DatasetEmpty, ShapeMismatch


def _zero_codec(k=8):
    ae = Autoencoder.create(k=k, rng=np.random.default_rng(0))
    for w, b in zip(ae.enc_w + ae.dec_w, ae.enc_b + ae.dec_b):
        w[:] = 0.0
        b[:] = 0.0
    return ae


class TestForward:
    def test_zero_weights_zero_latent(self):
        ae = _zero_codec()
        assert np.array_equal(ae.encode(np.ones(FEATURE_DIM)), np.zeros(8))
        assert np.array_equal(ae.decode(np.ones(8)), np.zeros(FEATURE_DIM))

    def test_relu_chain_transparent_on_nonnegative(self):
        # intermediate layers truncated identities, random final layer:
        # the encoder reduces to W x on nonnegative inputs
        rng = np.random.default_rng(1)
        ae = Autoencoder.create(k=8, rng=rng)
        dims = [FEATURE_DIM, 256, 128, 64, 48, 40, 8]
        for i in range(5):
            ae.enc_w[i][:] = np.eye(dims[i + 1], dims[i])
            ae.enc_b[i][:] = 0.0
        w_final = rng.normal(size=(8, 40))
        ae.enc_w[5][:] = w_final
        ae.enc_b[5][:] = 0.0
        x = np.abs(rng.normal(size=FEATURE_DIM))
        expect = w_final @ x[:40]
        assert np.max(np.abs(ae.encode(x) - expect)) < 1e-12

    def test_matches_loop_reference(self):
        rng = np.random.default_rng(2)
        ae = Autoencoder.create(k=8, rng=rng)
        x = rng.normal(size=(5, FEATURE_DIM))
        out = ae.encode(x)
        for i in range(5):
            a = x[i]
            for li, (w, b) in enumerate(zip(ae.enc_w, ae.enc_b)):
                a = w @ a + b
                if li < 5:
                    a = np.maximum(0.0, a)
            assert np.max(np.abs(out[i] - a)) < 1e-8

    def test_decode_shape_roundtrip(self):
        rng = np.random.default_rng(3)
        ae = Autoencoder.create(k=16, rng=rng)
        x = rng.normal(size=(4, 7, FEATURE_DIM))
        z = ae.encode(x)
        assert z.shape == (4, 7, 16)
        y = ae.decode(z)
        assert y.shape == (4, 7, FEATURE_DIM)

    def test_shape_mismatch(self):
        ae = _zero_codec()
        with pytest.raises(ShapeMismatch):
            ae.encode(np.zeros(100))
        with pytest.raises(ShapeMismatch):
            ae.decode(np.zeros(9))

    def test_lipschitz_bound(self):
        rng = np.random.default_rng(4)
        ae = Autoencoder.create(k=8, rng=rng)
        bound = 1.0
        for w in ae.enc_w:
            bound *= np.linalg.norm(w, 2)
        for _ in range(20):
            x, y = rng.normal(size=(2, FEATURE_DIM))
            lhs = np.linalg.norm(ae.encode(x) - ae.encode(y))
            assert lhs <= bound * np.linalg.norm(x - y) + 1e-9


class TestTraining:
    def test_single_point_memorization(self):
        rng = np.random.default_rng(5)
        x = rng.normal(size=FEATURE_DIM)
        x /= np.linalg.norm(x)
        bank = np.tile(x, (64, 1))
        ae, report = train_autoencoder(bank, k=8, epochs=200, batch_size=64, lr=3e-3, seed=0)
        assert report.mean_cosine >= 0.9999

    def test_loss_trend(self):
        rng = np.random.default_rng(6)
        bank = rng.normal(size=(128, FEATURE_DIM))
        bank /= np.linalg.norm(bank, axis=1, keepdims=True)
        ae, report = train_autoencoder(bank, k=8, epochs=30, batch_size=64, seed=0)
        assert report.epoch_losses[-1] <= report.epoch_losses[0]

    def test_needs_two_samples(self):
        with pytest.raises(DatasetEmpty):
            train_autoencoder(np.zeros((1, FEATURE_DIM)), k=8, epochs=1)

    def test_cluster_benchmark_small(self):
        # reduced-scale version of the cluster benchmark (full size in acceptance)
        rng = np.random.default_rng(7)
        g = rng.normal(size=(FEATURE_DIM, 4))
        centers = np.linalg.qr(g)[0].T
        reps = rng.integers(0, 4, size=512)
        x = centers[reps] + rng.normal(0, 0.003, size=(512, FEATURE_DIM))
        x /= np.linalg.norm(x, axis=1, keepdims=True)
        ae, report = train_autoencoder(x, k=16, epochs=120, batch_size=128, lr=3e-3, seed=0)
        assert report.mean_cosine >= 0.98
