import numpy as np
import pytest

from vmcr.errors import ShapeError
from vmcr.perturb import (SpatialTransform, apply_spatial,
                          apply_spatial_to_prediction, gen_mask, mix_images,
                          mix_predictions)

from _oracles import count_components


class TestGenMask:
    def test_binary(self):
        for seed in range(20):
            m = gen_mask(32, 48, sigma=4.0, seed=seed)
            assert m.bits.shape == (32, 48)
            assert np.isin(m.bits, (0, 1)).all()

    def test_deterministic(self):
        a = gen_mask(64, 64, sigma=8.0, seed=123)
        b = gen_mask(64, 64, sigma=8.0, seed=123)
        assert np.array_equal(a.bits, b.bits)

    def test_sigma_zero_ones_fraction(self):
        # i.i.d. thresholding at the mean: P(X >= mean) ~ 0.5 by symmetry
        fracs = [gen_mask(64, 64, sigma=0.0, seed=s).bits.mean()
                 for s in range(1000)]
        assert 0.49 <= np.mean(fracs) <= 0.51

    def test_ones_fraction_all_sigmas(self):
        for sigma in (0.0, 1.0, 4.0, 8.0):
            fracs = [gen_mask(64, 64, sigma=sigma, seed=s).bits.mean()
                     for s in range(300)]
            assert abs(np.mean(fracs) - 0.5) < 0.02

    def test_larger_sigma_larger_components(self):
        def mean_component_size(sigma):
            sizes = []
            for s in range(100):
                _, sz = count_components(gen_mask(64, 64, sigma, seed=s).bits)
                sizes.extend(sz)
            return np.mean(sizes)

        assert mean_component_size(8.0) > mean_component_size(1.0)


class TestMixing:
    def setup_method(self):
        rng = np.random.default_rng(0)
        self.x1 = rng.random((3, 16, 16)).astype(np.float32)
        self.x2 = rng.random((3, 16, 16)).astype(np.float32)
        self.m = gen_mask(16, 16, sigma=2.0, seed=5)

    def test_all_ones_returns_x1(self):
        ones = np.ones((16, 16), dtype=np.uint8)
        assert np.array_equal(mix_images(self.x1, self.x2, ones), self.x1)

    def test_all_zeros_returns_x2(self):
        zeros = np.zeros((16, 16), dtype=np.uint8)
        assert np.array_equal(mix_images(self.x1, self.x2, zeros), self.x2)

    def test_self_mix_identity(self):
        assert np.array_equal(mix_images(self.x1, self.x1, self.m), self.x1)

    def test_seam_property(self):
        out = mix_images(self.x1, self.x2, self.m)
        sel = self.m.bits.astype(bool)
        assert np.array_equal(out[:, sel], self.x1[:, sel])
        assert np.array_equal(out[:, ~sel], self.x2[:, ~sel])

    def test_shape_mismatch(self):
        with pytest.raises(ShapeError):
            mix_images(self.x1, self.x2[:, :8], self.m)
        with pytest.raises(ShapeError):
            mix_images(self.x1, self.x2, np.ones((8, 8), np.uint8))

    def test_prediction_complementarity(self):
        rng = np.random.default_rng(1)
        p1 = rng.random((1, 2, 16, 16))
        p2 = rng.random((1, 2, 16, 16))
        a = mix_predictions(p1, p2, self.m)
        b = mix_predictions(p2, p1, self.m)
        assert np.array_equal(a + b, p1 + p2)

    def test_prediction_range_preserved(self):
        rng = np.random.default_rng(2)
        p1 = rng.random((2, 16, 16))
        p2 = rng.random((2, 16, 16))
        out = mix_predictions(p1, p2, self.m)
        assert out.min() >= 0.0 and out.max() <= 1.0

    def test_batch_broadcast(self):
        x1 = np.stack([self.x1, self.x2])
        x2 = np.stack([self.x2, self.x1])
        out = mix_images(x1, x2, self.m)
        assert np.array_equal(out[0], mix_images(self.x1, self.x2, self.m))


class TestSpatial:
    def setup_method(self):
        self.x = np.random.default_rng(3).random((3, 16, 16))

    def test_flip_h_involution(self):
        t = SpatialTransform("flip-h")
        assert np.array_equal(apply_spatial(apply_spatial(self.x, t), t), self.x)

    def test_rot90_four_times_identity(self):
        t = SpatialTransform("rot90", k=1)
        out = self.x
        for _ in range(4):
            out = apply_spatial(out, t)
        assert np.array_equal(out, self.x)

    def test_inverse_round_trip(self):
        for t in (SpatialTransform("flip-h"), SpatialTransform("flip-v"),
                  SpatialTransform("rot90", k=3)):
            out = apply_spatial(apply_spatial(self.x, t), t.inverse())
            assert np.array_equal(out, self.x)

    def test_scale_unit_is_identity(self):
        t = SpatialTransform("scale", scale=1.0)
        out = apply_spatial(self.x, t)
        assert np.allclose(out, self.x, atol=1e-6)

    def test_scale_has_no_exact_inverse(self):
        t = SpatialTransform("scale", scale=1.2)
        assert not t.invertible
        with pytest.raises(ValueError):
            t.inverse()

    def test_prediction_transform_keeps_binary(self):
        labels = (np.random.default_rng(4).random((2, 16, 16)) < 0.2)
        labels = labels.astype(np.float32)
        t = SpatialTransform("scale", scale=0.85)
        out = apply_spatial_to_prediction(labels, t)
        assert np.isin(out, (0.0, 1.0)).all()
