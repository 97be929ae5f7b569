import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from lahreg.geom import (
    CorrespondenceSet,
    RigidTransform,
    apply_transform,
    axis_angle_matrix,
    compose,
    invert,
    kabsch,
    random_rotation,
)


def random_transform(seed, scale=3.0):
    rng = np.random.default_rng(seed)
    return RigidTransform(random_rotation(seed), rng.uniform(-scale, scale, 3))


def assert_transform_close(a, b, atol):
    np.testing.assert_allclose(a.rotation, b.rotation, atol=atol, rtol=0)
    np.testing.assert_allclose(a.translation, b.translation, atol=atol, rtol=0)


class TestApplyTransform:
    def test_identity(self):
        P = np.random.default_rng(0).normal(size=(17, 3))
        np.testing.assert_array_equal(apply_transform(RigidTransform.identity(), P), P)

    def test_quarter_turn_about_z(self):
        T = RigidTransform(axis_angle_matrix([0, 0, 1], np.pi / 2), np.zeros(3))
        np.testing.assert_allclose(apply_transform(T, [[1.0, 0.0, 0.0]]), [[0.0, 1.0, 0.0]], atol=1e-15)

    def test_matches_per_point_arithmetic(self):
        T = random_transform(5)
        P = np.random.default_rng(1).normal(size=(100, 3))
        expected = np.empty_like(P)
        for i, p in enumerate(P):
            for r in range(3):
                expected[i, r] = sum(T.rotation[r, c] * p[c] for c in range(3)) + T.translation[r]
        np.testing.assert_allclose(apply_transform(T, P), expected, atol=1e-12, rtol=0)

    def test_preserves_pairwise_distances(self):
        T = random_transform(9)
        P = np.random.default_rng(2).normal(size=(40, 3))
        TP = apply_transform(T, P)
        d0 = np.linalg.norm(P[:, None] - P[None], axis=2)
        d1 = np.linalg.norm(TP[:, None] - TP[None], axis=2)
        np.testing.assert_allclose(d0, d1, atol=1e-10, rtol=0)

    def test_empty_cloud(self):
        assert apply_transform(RigidTransform.identity(), np.zeros((0, 3))).shape == (0, 3)

    def test_rejects_nan(self):
        with pytest.raises(ValueError):
            apply_transform(RigidTransform.identity(), [[np.nan, 0, 0]])


class TestComposeInvert:
    def test_compose_identity(self):
        T = random_transform(3)
        assert_transform_close(compose(T, RigidTransform.identity()), T, 0)

    def test_compose_with_inverse(self):
        T = random_transform(4)
        assert_transform_close(compose(T, invert(T)), RigidTransform.identity(), 1e-10)

    def test_compose_is_sequential_application(self):
        T1, T2 = random_transform(10), random_transform(11)
        P = np.random.default_rng(3).normal(size=(50, 3))
        np.testing.assert_allclose(
            apply_transform(compose(T1, T2), P),
            apply_transform(T1, apply_transform(T2, P)),
            atol=1e-10,
        )

    def test_invert_identity(self):
        assert_transform_close(invert(RigidTransform.identity()), RigidTransform.identity(), 0)

    def test_invert_translation(self):
        T = invert(RigidTransform(np.eye(3), [1.0, 2.0, 3.0]))
        np.testing.assert_array_equal(T.rotation, np.eye(3))
        np.testing.assert_array_equal(T.translation, [-1.0, -2.0, -3.0])

    def test_double_inversion(self):
        T = random_transform(12)
        assert_transform_close(invert(invert(T)), T, 1e-12)

    def test_matrix_round_trip(self):
        T = random_transform(13)
        assert_transform_close(RigidTransform.from_matrix(T.as_matrix()), T, 0)


class TestKabsch:
    def test_already_aligned(self):
        P = np.random.default_rng(0).normal(size=(10, 3))
        assert_transform_close(kabsch(P, P), RigidTransform.identity(), 1e-10)

    def test_recovers_known_transform(self):
        T_gt = RigidTransform(axis_angle_matrix([0, 0, 1], np.deg2rad(30)), [1.0, 2.0, 3.0])
        src = np.random.default_rng(1).normal(size=(20, 3))
        T = kabsch(src, apply_transform(T_gt, src))
        assert np.linalg.norm(T.rotation - T_gt.rotation) <= 1e-9
        assert np.linalg.norm(T.translation - T_gt.translation) <= 1e-9
        assert T.is_proper(1e-9)

    def test_single_pair(self):
        T = kabsch([[1.0, 1.0, 1.0]], [[2.0, 0.0, 5.0]])
        np.testing.assert_array_equal(T.rotation, np.eye(3))
        np.testing.assert_allclose(T.translation, [1.0, -1.0, 4.0])

    def test_reflection_is_corrected(self):
        rng = np.random.default_rng(7)
        src = rng.normal(size=(12, 3))
        mirrored = src * np.array([1.0, 1.0, -1.0])
        T = kabsch(src, mirrored)
        assert T.is_proper(1e-9)

    def test_collinear_points_give_proper_rotation(self):
        src = np.outer(np.linspace(0, 1, 5), [1.0, 2.0, 3.0])
        T = kabsch(src, src + 1.0)
        assert T.is_proper(1e-9)
        np.testing.assert_allclose(apply_transform(T, src), src + 1.0, atol=1e-9)

    def test_weights_select_subset(self):
        rng = np.random.default_rng(8)
        src = rng.normal(size=(10, 3))
        T_gt = random_transform(14)
        dst = apply_transform(T_gt, src)
        dst[5:] += rng.normal(size=(5, 3))
        w = np.r_[np.ones(5), np.zeros(5)]
        assert_transform_close(kabsch(src, dst, w), T_gt, 1e-9)

    def test_length_mismatch(self):
        with pytest.raises(ValueError):
            kabsch(np.zeros((3, 3)), np.zeros((4, 3)))

    def test_zero_weights(self):
        with pytest.raises(ValueError):
            kabsch(np.eye(3), np.eye(3), np.zeros(3))

    @settings(max_examples=50, deadline=None)
    @given(st.integers(0, 2**32 - 1), st.integers(0, 2**32 - 1), st.integers(0, 2**32 - 1))
    def test_equivariance_under_common_motion(self, s_pts, s_t, s_g):
        rng = np.random.default_rng(s_pts)
        src = rng.normal(size=(15, 3))
        dst = apply_transform(random_transform(s_t), src) + 0.05 * rng.normal(size=(15, 3))
        g = random_transform(s_g)
        lhs = kabsch(apply_transform(g, src), apply_transform(g, dst))
        rhs = compose(g, compose(kabsch(src, dst), invert(g)))
        assert_transform_close(lhs, rhs, 1e-9)

    @settings(max_examples=50, deadline=None)
    @given(st.integers(0, 2**32 - 1), st.integers(3, 40))
    def test_noiseless_recovery(self, seed, n):
        src = np.random.default_rng(seed).normal(size=(n, 3))
        T_gt = random_transform(seed + 1)
        T = kabsch(src, apply_transform(T_gt, src))
        assert np.linalg.norm(T.rotation - T_gt.rotation) <= 1e-9
        assert np.linalg.norm(T.translation - T_gt.translation) <= 1e-9


class TestRandomRotation:
    def test_deterministic(self):
        np.testing.assert_array_equal(random_rotation(42), random_rotation(42))

    @pytest.mark.parametrize("seed", range(20))
    def test_special_orthogonal(self, seed):
        R = random_rotation(seed)
        np.testing.assert_allclose(R.T @ R, np.eye(3), atol=1e-12)
        assert abs(np.linalg.det(R) - 1.0) <= 1e-12

    def test_uniform_column_means(self):
        Rs = np.stack([random_rotation(s) for s in range(10_000)])
        assert np.all(np.abs(Rs.mean(axis=0)) < 0.05)


class TestCorrespondenceSet:
    def test_bounds(self):
        c = CorrespondenceSet([0, 1], [2, 3])
        c.check_bounds(2, 4)
        with pytest.raises(ValueError):
            c.check_bounds(2, 3)

    def test_length_mismatch(self):
        with pytest.raises(ValueError):
            CorrespondenceSet([0, 1], [0])
