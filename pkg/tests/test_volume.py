import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from voxseed import volume
from voxseed.errors import ShapeError


def vol(arr, spacing=(1.0, 1.0, 1.0)):
    return volume.Volume3D(np.asarray(arr, dtype=np.float32), spacing)


class TestGaussianNoise:
    def test_zero_sigma_identity(self):
        v = vol(np.arange(8).reshape(2, 2, 2))
        out = volume.add_gaussian_noise(v, 0.0, np.random.default_rng(0))
        assert np.array_equal(out.data, v.data)
        assert out.data is not v.data

    def test_same_seed_bitwise_identical(self):
        v = vol(np.zeros((4, 4, 4)))
        a = volume.add_gaussian_noise(v, 0.02, np.random.default_rng(7))
        b = volume.add_gaussian_noise(v, 0.02, np.random.default_rng(7))
        assert a.data.tobytes() == b.data.tobytes()

    def test_input_untouched(self):
        v = vol(np.zeros((4, 4, 4)))
        volume.add_gaussian_noise(v, 0.5, np.random.default_rng(0))
        assert np.all(v.data == 0)

    def test_sample_moments(self):
        v = vol(np.zeros((100, 100, 100)))
        out = volume.add_gaussian_noise(v, 1.0, np.random.default_rng(3))
        assert abs(out.data.mean()) < 0.01
        assert abs(out.data.std() - 1.0) < 0.01

    @pytest.mark.parametrize("sigma", [-1.0, float("nan"), float("inf")])
    def test_bad_sigma(self, sigma):
        with pytest.raises(ValueError):
            volume.add_gaussian_noise(vol(np.zeros((2, 2, 2))), sigma, np.random.default_rng(0))


class TestSoftmax:
    def test_symmetry(self):
        logits = volume.FeatureMap(np.zeros((2, 2, 2, 2), dtype=np.float32))
        p = volume.softmax_over_classes(logits)
        assert np.allclose(p.data, 0.5)

    def test_shift_invariance(self):
        rng = np.random.default_rng(0)
        t = rng.standard_normal((1, 3, 3, 3)).astype(np.float32)
        base = np.concatenate([np.zeros_like(t), t])
        shifted = base + rng.standard_normal((3, 3, 3)).astype(np.float32)
        pa = volume.softmax_over_classes(volume.FeatureMap(base))
        pb = volume.softmax_over_classes(volume.FeatureMap(shifted))
        assert np.allclose(pa.data, pb.data, atol=1e-6)

    def test_quarter_three_quarters(self):
        logits = np.zeros((2, 1, 1, 1), dtype=np.float32)
        logits[1] = math.log(3.0)
        p = volume.softmax_over_classes(volume.FeatureMap(logits))
        assert np.allclose(p.data[:, 0, 0, 0], [0.25, 0.75], atol=1e-6)

    def test_wrong_class_count(self):
        with pytest.raises(ShapeError):
            volume.softmax_over_classes(volume.FeatureMap(np.zeros((3, 2, 2, 2), dtype=np.float32)))

    @given(st.integers(0, 2**32 - 1), st.floats(0.1, 50.0))
    @settings(max_examples=30, deadline=None)
    def test_output_is_valid_probmap(self, seed, scale):
        rng = np.random.default_rng(seed)
        z = (rng.standard_normal((2, 3, 2, 4)) * scale).astype(np.float32)
        p = volume.softmax_over_classes(volume.FeatureMap(z))
        p.validate()


class TestMaskedMean:
    def test_empty_mask(self):
        m = volume.Mask3D(np.zeros((2, 2, 2), dtype=np.uint8))
        assert volume.masked_mean(np.ones((2, 2, 2), dtype=np.float32), m) == 0.0

    def test_constant(self):
        m = volume.Mask3D(np.ones((2, 2, 2), dtype=np.uint8))
        assert volume.masked_mean(np.full((2, 2, 2), 3.5, dtype=np.float32), m) == pytest.approx(3.5)

    def test_hand_count(self):
        values = np.array([1.0, 2.0, 3.0, 4.0], dtype=np.float32).reshape(1, 1, 4)
        mask = volume.Mask3D(np.array([1, 0, 1, 0], dtype=np.uint8).reshape(1, 1, 4))
        assert volume.masked_mean(values, mask) == pytest.approx(2.0)

    def test_dim_mismatch(self):
        with pytest.raises(ShapeError):
            volume.masked_mean(np.zeros((2, 2, 2), dtype=np.float32),
                               volume.Mask3D(np.zeros((2, 2, 3), dtype=np.uint8)))

    @given(st.integers(0, 2**32 - 1))
    @settings(max_examples=25, deadline=None)
    def test_all_ones_equals_plain_mean(self, seed):
        rng = np.random.default_rng(seed)
        values = rng.standard_normal((3, 4, 2)).astype(np.float32)
        m = volume.Mask3D(np.ones((3, 4, 2), dtype=np.uint8))
        assert volume.masked_mean(values, m) == pytest.approx(float(values.mean()), abs=1e-6)


class TestVV1:
    def test_volume_roundtrip(self, tmp_path):
        rng = np.random.default_rng(0)
        v = volume.Volume3D(rng.standard_normal((4, 5, 6)).astype(np.float32), (1.0, 0.5, 2.0))
        path = tmp_path / "v.vv1"
        volume.save_volume(path, v)
        back = volume.load_volume(path)
        assert np.array_equal(back.data, v.data)
        assert back.spacing == pytest.approx(v.spacing)

    def test_mask_roundtrip(self, tmp_path):
        m = volume.Mask3D((np.arange(24).reshape(2, 3, 4) % 2).astype(np.uint8))
        path = tmp_path / "m.vv1"
        volume.save_mask(path, m)
        back = volume.load_mask(path)
        assert np.array_equal(back.data, m.data)

    def test_rank4_roundtrip(self, tmp_path):
        arr = np.random.default_rng(1).standard_normal((3, 2, 2, 4)).astype(np.float32)
        path = tmp_path / "f.vv1"
        volume.write_vv1(path, arr, (1, 1, 1))
        back, spacing = volume.read_vv1(path)
        assert np.array_equal(back, arr)
        assert back.shape == (3, 2, 2, 4)

    def test_bad_magic(self, tmp_path):
        path = tmp_path / "bad.vv1"
        path.write_bytes(b"NOPE" + b"\x00" * 32)
        with pytest.raises(ValueError, match="magic"):
            volume.read_vv1(path)

    def test_truncated(self, tmp_path):
        path = tmp_path / "v.vv1"
        volume.write_vv1(path, np.zeros((4, 4, 4), dtype=np.float32))
        blob = path.read_bytes()
        path.write_bytes(blob[:-7])
        with pytest.raises(ValueError, match="truncated"):
            volume.read_vv1(path)

    def test_header_layout(self, tmp_path):
        path = tmp_path / "v.vv1"
        volume.write_vv1(path, np.zeros((2, 3, 4), dtype=np.float32), (1.0, 1.0, 1.0))
        blob = path.read_bytes()
        assert blob[:4] == b"VVOL"
        assert blob[4:8] == (1).to_bytes(4, "little")
        assert blob[8] == 0 and blob[9] == 3
        dims = np.frombuffer(blob[10:22], dtype="<u4")
        assert tuple(dims) == (2, 3, 4)
