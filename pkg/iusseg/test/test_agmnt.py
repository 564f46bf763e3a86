import numpy as np
import pytest
from hypothesis import given, strategies as st
from scipy.spatial.transform import Rotation

from iusseg.volume.vol import Volume3D
from iusseg.augment.agmnt import SimilarityTransform, PatchSpec, InvalidTransform, InvalidPatchSpec, \
    draw_similarity, apply_transform, augment_pair, sample_patch


def bar(dims=(9, 9, 9)):
    data = np.zeros(dims, dtype=np.uint8)
    data[1:8, 4, 4] = 1
    return Volume3D(data, (1.0, 1.0, 1.0))


class TestTransform:
    def test_validation(self):
        with pytest.raises(InvalidTransform):
            SimilarityTransform(0.0)
        with pytest.raises(InvalidTransform):
            SimilarityTransform(1.0, np.diag([1.0, 2.0, 1.0]))
        with pytest.raises(InvalidTransform):
            SimilarityTransform(1.0).map_points(np.zeros(3))

    @given(st.floats(0.5, 2.0), st.lists(st.floats(-180, 180), min_size=3, max_size=3),
           st.lists(st.floats(-10, 10), min_size=3, max_size=3))
    def test_inverse(self, scale, angles, translation):
        r = Rotation.from_euler('xyz', angles, degrees=True).as_matrix()
        t = SimilarityTransform(scale, r, tuple(translation), (1.0, 2.0, 3.0))
        p = np.array([[0.0, 0.0, 0.0], [4.0, -2.0, 7.5]])
        np.testing.assert_allclose(t.invert().map_points(t.map_points(p)), p, atol=1e-9)

    def test_bind_uses_volume_center(self):
        t = SimilarityTransform(2.0).bind(bar())
        assert t.center_mm == (4.0, 4.0, 4.0)
        np.testing.assert_allclose(t.map_points([5.0, 4.0, 4.0]), [6.0, 4.0, 4.0])

    def test_draws(self):
        a = draw_similarity(3, 17, 10.0, 10.0)
        b = draw_similarity(3, 17, 10.0, 10.0)
        assert a.scale == b.scale and np.array_equal(a.rotation, b.rotation)
        assert a.scale != draw_similarity(3, 18, 10.0, 10.0).scale
        for i in range(50):
            t = draw_similarity(0, i, 10.0, 10.0)
            assert 0.9 <= t.scale <= 1.1
            angles = Rotation.from_matrix(t.rotation).as_euler('xyz', degrees=True)
            assert np.all(np.abs(angles) <= 10.0 + 1e-6)
        assert np.array_equal(draw_similarity(0, 0, 5.0, 0.0).rotation, np.eye(3))
        with pytest.raises(InvalidTransform):
            draw_similarity(0, 0, 100.0, 10.0)

    def test_draw_bounds(self):
        draws = [draw_similarity(0, i, 10.0, 10.0) for i in range(10000)]
        scales = np.array([t.scale for t in draws])
        angles = Rotation.from_matrix(np.stack([t.rotation for t in draws])).as_euler('xyz', degrees=True)
        assert np.all((scales >= 0.9) & (scales <= 1.1))
        assert np.all(np.abs(angles) <= 10.0 + 1e-6)
        assert scales.min() < 0.91 and scales.max() > 1.09
        assert np.all(angles.min(axis=0) < -9.0) and np.all(angles.max(axis=0) > 9.0)


class TestApply:
    def test_identity(self):
        vol = bar()
        assert apply_transform(vol, SimilarityTransform()).equals(vol)

    def test_quarter_turn_of_labels(self):
        r = Rotation.from_euler('z', 90, degrees=True).as_matrix()
        out = apply_transform(bar(), SimilarityTransform(1.0, r))
        assert out.is_label
        expected = np.zeros((9, 9, 9), dtype=np.uint8)
        expected[4, 1:8, 4] = 1
        assert np.array_equal(out.data, expected)

    def test_pair_shares_the_transform(self):
        label = bar()
        image = Volume3D(label.data.astype(np.float32), label.spacing)
        img, lab = augment_pair(image, label, seed=1, index=2, max_scale_pct=10.0, max_rot_deg=20.0)
        assert img.same_grid(label) and lab.same_grid(label)
        assert lab.is_label and set(np.unique(lab.data)) <= {0, 1}
        assert img.data.dtype == np.float32
        assert np.all(img.data[lab.data == 1] > 0.0)


class TestPatches:
    def test_spec_validation(self):
        with pytest.raises(InvalidPatchSpec):
            PatchSpec((8, 8))
        with pytest.raises(InvalidPatchSpec):
            PatchSpec(sampling='center')
        with pytest.raises(InvalidPatchSpec):
            PatchSpec(foreground_fraction=1.5)
        spec = PatchSpec((8, 8, 8), 0.1, 'uniform', 0.0)
        assert PatchSpec.from_dict(spec.to_dict()) == spec

    def test_uniform_corners_stay_inside(self):
        label = bar((20, 12, 9))
        image = Volume3D(np.ones((20, 12, 9), dtype=np.float32), label.spacing)
        spec = PatchSpec((8, 8, 8), sampling='uniform')
        for i in range(30):
            p = sample_patch(image, label, spec, 5, i)
            assert p.image.shape == (8, 8, 8) and p.label.shape == (8, 8, 8)
            assert all(0 <= c <= n - 8 for c, n in zip(p.corner, (20, 12, 9)))
            assert np.all(p.image == 1.0)

    def test_foreground_biased_patches_hit_foreground(self):
        data = np.zeros((30, 30, 30), dtype=np.uint8)
        data[25, 3, 14] = 1
        label = Volume3D(data, (1.0, 1.0, 1.0))
        image = label.with_data(np.zeros((30, 30, 30), dtype=np.float32))
        spec = PatchSpec((6, 6, 6), foreground_fraction=1.0)
        for i in range(20):
            p = sample_patch(image, label, spec, 0, i)
            assert p.label.sum() == 1 and not p.fell_back

    def test_foreground_corners_are_uniform(self):
        data = np.zeros((12, 1, 1), dtype=np.uint8)
        data[2:5, 0, 0] = 1
        data[10, 0, 0] = 1
        label = Volume3D(data, (1.0, 1.0, 1.0))
        image = label.with_data(np.zeros((12, 1, 1), dtype=np.float32))
        spec = PatchSpec((4, 1, 1), foreground_fraction=1.0)
        n = 7000
        counts = np.bincount([sample_patch(image, label, spec, 3, i).corner[0] for i in range(n)], minlength=9)
        valid = [0, 1, 2, 3, 4, 7, 8]
        assert np.count_nonzero(counts) == len(valid) and np.all(counts[valid] > 0)
        expected = n / len(valid)
        assert np.all(np.abs(counts[valid] - expected) < 0.15 * expected)

    def test_empty_label_falls_back(self):
        label = Volume3D(np.zeros((10, 10, 10), dtype=np.uint8), (1.0, 1.0, 1.0))
        image = label.with_data(np.zeros((10, 10, 10), dtype=np.float32))
        p = sample_patch(image, label, PatchSpec((4, 4, 4), foreground_fraction=1.0), 0, 0)
        assert p.fell_back

    def test_small_volumes_are_padded(self):
        label = Volume3D(np.ones((3, 5, 2), dtype=np.uint8), (1.0, 1.0, 1.0))
        image = label.with_data(np.full((3, 5, 2), 0.5, dtype=np.float32))
        p = sample_patch(image, label, PatchSpec((4, 4, 4), pad_value=-1.0, sampling='uniform'), 0, 0)
        assert p.corner == (0, p.corner[1], 0)
        assert p.image[3, 0, 0] == -1.0 and p.label[3, 0, 0] == 0
        assert p.image[0, 0, 0] == 0.5 and p.label[0, 0, 0] == 1

    def test_deterministic_and_checked(self):
        label = bar()
        image = Volume3D(np.random.default_rng(0).random((9, 9, 9), dtype=np.float32), label.spacing)
        spec = PatchSpec((4, 4, 4))
        a, b = sample_patch(image, label, spec, 7, 3), sample_patch(image, label, spec, 7, 3)
        assert a.corner == b.corner and np.array_equal(a.image, b.image)
        with pytest.raises(InvalidPatchSpec):
            sample_patch(image, Volume3D(np.zeros((9, 9, 8), dtype=np.uint8), label.spacing), spec, 0, 0)
