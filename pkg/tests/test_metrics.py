import numpy as np
import pytest

from voxseed import metrics
from voxseed.errors import EmptyMaskError, ShapeError


def brute_distance_to_set(shape, seeds, spacing):
    """All-pairs nearest Euclidean distance, written independently of the
    separable transform: explicit min over seed voxels."""
    grid = np.stack(np.meshgrid(*[np.arange(n) for n in shape], indexing="ij"), axis=-1)
    pos = grid.reshape(-1, 3).astype(np.float64) * np.asarray(spacing, dtype=np.float64)
    seed_pos = np.asarray(seeds, dtype=np.float64) * np.asarray(spacing, dtype=np.float64)
    d2 = ((pos[:, None, :] - seed_pos[None, :, :]) ** 2).sum(axis=2)
    return np.sqrt(d2.min(axis=1)).reshape(shape)


def brute_hd95(pred, gt, spacing):
    ps = metrics.extract_surface(pred)
    gs = metrics.extract_surface(gt)
    sp = np.asarray(spacing, dtype=np.float64)
    d = np.sqrt((((ps[:, None, :] - gs[None, :, :]) * sp) ** 2).sum(axis=2))
    da = np.sort(d.min(axis=1))
    db = np.sort(d.min(axis=0))
    pa = da[int(np.ceil(0.95 * da.size)) - 1]
    pb = db[int(np.ceil(0.95 * db.size)) - 1]
    return max(pa, pb)


def cube_mask(shape, lo, hi):
    m = np.zeros(shape, dtype=np.uint8)
    m[lo[0]:hi[0], lo[1]:hi[1], lo[2]:hi[2]] = 1
    return m


class TestIoU:
    def test_identical(self):
        m = cube_mask((5, 5, 5), (1, 1, 1), (4, 4, 4))
        assert metrics.iou(m, m) == 1.0

    def test_disjoint(self):
        a = cube_mask((6, 6, 6), (0, 0, 0), (2, 2, 2))
        b = cube_mask((6, 6, 6), (4, 4, 4), (6, 6, 6))
        assert metrics.iou(a, b) == 0.0

    def test_one_third(self):
        a = np.zeros((3, 1, 1), dtype=np.uint8)
        b = np.zeros((3, 1, 1), dtype=np.uint8)
        a[0] = a[1] = 1
        b[1] = b[2] = 1
        assert metrics.iou(a, b) == pytest.approx(1 / 3)

    def test_both_empty(self):
        z = np.zeros((4, 4, 4), dtype=np.uint8)
        assert metrics.iou(z, z) == 1.0

    def test_symmetric_and_bounded(self):
        rng = np.random.default_rng(0)
        for _ in range(20):
            a = (rng.random((5, 5, 5)) < 0.4).astype(np.uint8)
            b = (rng.random((5, 5, 5)) < 0.4).astype(np.uint8)
            v = metrics.iou(a, b)
            assert v == metrics.iou(b, a)
            assert 0.0 <= v <= 1.0

    def test_shape_mismatch(self):
        with pytest.raises(ShapeError):
            metrics.iou(np.zeros((2, 2, 2), dtype=np.uint8), np.zeros((2, 2, 3), dtype=np.uint8))


class TestSurface:
    def test_single_voxel(self):
        m = np.zeros((5, 5, 5), dtype=np.uint8)
        m[2, 3, 1] = 1
        assert metrics.extract_surface(m).tolist() == [[2, 3, 1]]

    def test_solid_cube_shell(self):
        m = cube_mask((8, 8, 8), (2, 2, 2), (5, 5, 5))
        surf = metrics.extract_surface(m)
        assert len(surf) == 26
        assert [3, 3, 3] not in surf.tolist()

    def test_full_volume_border(self):
        m = np.ones((4, 4, 4), dtype=np.uint8)
        surf = metrics.extract_surface(m)
        assert len(surf) == 64 - 8

    def test_lexicographic_order(self):
        m = cube_mask((6, 6, 6), (1, 1, 1), (4, 4, 4))
        surf = metrics.extract_surface(m)
        assert np.lexsort((surf[:, 2], surf[:, 1], surf[:, 0])).tolist() == list(range(len(surf)))

    def test_empty_mask(self):
        with pytest.raises(EmptyMaskError):
            metrics.extract_surface(np.zeros((3, 3, 3), dtype=np.uint8))


class TestDistanceTransform:
    def test_inside_mask_zero(self):
        m = cube_mask((6, 6, 6), (2, 2, 2), (4, 4, 4))
        d = metrics.distance_transform(m)
        assert np.all(d[m.astype(bool)] == 0)

    def test_pythagoras(self):
        m = np.zeros((8, 8, 8), dtype=np.uint8)
        m[0, 0, 0] = 1
        d = metrics.distance_transform(m)
        assert d[3, 4, 0] == pytest.approx(5.0)

    def test_anisotropic(self):
        m = np.zeros((4, 4, 4), dtype=np.uint8)
        m[0, 0, 0] = 1
        d = metrics.distance_transform(m, spacing=(2.0, 1.0, 1.0))
        assert d[1, 0, 0] == pytest.approx(2.0)

    def test_brute_force_oracle(self):
        rng = np.random.default_rng(42)
        for _ in range(30):
            shape = tuple(rng.integers(2, 9, size=3))
            m = (rng.random(shape) < 0.25).astype(np.uint8)
            if not m.any():
                m[tuple(rng.integers(0, s) for s in shape)] = 1
            spacing = tuple(rng.uniform(0.3, 3.0, size=3))
            d = metrics.distance_transform(m, spacing)
            ref = brute_distance_to_set(shape, np.argwhere(m), spacing).astype(np.float32)
            np.testing.assert_array_max_ulp(d, ref, maxulp=1)


class TestHD95:
    def test_identical_zero(self):
        m = cube_mask((8, 8, 8), (2, 2, 2), (6, 6, 6))
        assert metrics.hd95(m, m) == 0.0

    def test_translated_cube_1mm(self):
        a = cube_mask((10, 10, 10), (2, 2, 2), (6, 6, 6))
        b = cube_mask((10, 10, 10), (3, 2, 2), (7, 6, 6))
        assert metrics.hd95(a, b, (1.0, 1.0, 1.0)) == pytest.approx(1.0)

    def test_translated_cube_2mm_spacing(self):
        a = cube_mask((10, 10, 10), (2, 2, 2), (6, 6, 6))
        b = cube_mask((10, 10, 10), (3, 2, 2), (7, 6, 6))
        assert metrics.hd95(a, b, (2.0, 1.0, 1.0)) == pytest.approx(2.0)

    def test_symmetry_and_scaling(self):
        rng = np.random.default_rng(7)
        for _ in range(10):
            a = (rng.random((6, 6, 6)) < 0.3).astype(np.uint8)
            b = (rng.random((6, 6, 6)) < 0.3).astype(np.uint8)
            if not a.any() or not b.any():
                continue
            h1 = metrics.hd95(a, b)
            assert h1 == metrics.hd95(b, a)
            assert metrics.hd95(a, b, (2.0, 2.0, 2.0)) == pytest.approx(2 * h1, rel=1e-6)

    def test_brute_force_oracle(self):
        rng = np.random.default_rng(11)
        done = 0
        while done < 25:
            shape = tuple(rng.integers(3, 9, size=3))
            a = (rng.random(shape) < 0.3).astype(np.uint8)
            b = (rng.random(shape) < 0.3).astype(np.uint8)
            if not a.any() or not b.any():
                continue
            spacing = tuple(rng.uniform(0.5, 2.0, size=3))
            assert metrics.hd95(a, b, spacing) == pytest.approx(brute_hd95(a, b, spacing), rel=1e-5)
            done += 1

    def test_empty_raises(self):
        m = cube_mask((5, 5, 5), (1, 1, 1), (3, 3, 3))
        with pytest.raises(EmptyMaskError):
            metrics.hd95(np.zeros((5, 5, 5), dtype=np.uint8), m)
        with pytest.raises(EmptyMaskError):
            metrics.hd95(m, np.zeros((5, 5, 5), dtype=np.uint8))


def test_volume_diagonal():
    assert metrics.volume_diagonal_mm((32, 32, 32)) == pytest.approx(np.sqrt(3 * 31**2))
    assert metrics.volume_diagonal_mm((10, 10, 10), (2.0, 1.0, 1.0)) == pytest.approx(
        np.sqrt((9 * 2.0) ** 2 + 81 + 81))
