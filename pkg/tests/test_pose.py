import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from escape_pose.errors import AlignmentDegenerateError, InvalidPoseError, SchemaError
from escape_pose.pose import (
    H36M17,
    KeypointSchema,
    flatten,
    mpjpe,
    pa_mpjpe,
    procrustes_align,
    procrustes_align_batch,
    root_align,
    similarity_fit,
    subset_mpjpe,
    unflatten,
)

from conftest import random_pose, random_rotation

finite_poses = arrays(np.float64, (17, 3), elements=st.floats(-2000, 2000, allow_nan=False))


def test_schema_defaults():
    assert H36M17.distal_indices == (3, 6, 13, 16)
    assert H36M17.proximal_indices == (1, 4, 11, 14)
    assert H36M17.joint_names[13] == "l_wrist"
    assert H36M17.flat_dim == 51


@pytest.mark.parametrize(
    "kwargs",
    [
        dict(proximal_indices=(1, 4, 11, 3)),  # overlaps distal
        dict(proximal_indices=(1, 4, 11)),
        dict(distal_indices=(3, 6, 13, 17)),
        dict(root_index=3),
    ],
)
def test_schema_rejects_bad_layouts(kwargs):
    with pytest.raises(SchemaError):
        KeypointSchema(**kwargs)


class TestRootAlign:
    def test_root_at_origin_is_unchanged(self, rng):
        pose = random_pose(rng)
        np.testing.assert_array_equal(root_align(pose), pose)

    def test_uniform_translation(self):
        np.testing.assert_array_equal(root_align(np.full((17, 3), 5.0)), np.zeros((17, 3)))

    def test_subtraction(self):
        pose = np.zeros((17, 3))
        pose[0] = (10, 0, 0)
        pose[5] = (13, 0, 0)
        assert tuple(root_align(pose)[5]) == (3.0, 0.0, 0.0)

    def test_non_finite(self):
        pose = np.zeros((17, 3))
        pose[2, 1] = np.nan
        with pytest.raises(InvalidPoseError):
            root_align(pose)

    @given(finite_poses)
    def test_idempotent(self, pose):
        once = root_align(pose)
        np.testing.assert_array_equal(root_align(once), once)
        assert np.all(once[0] == 0)


class TestMpjpe:
    def test_identity(self, rng):
        pose = random_pose(rng)
        assert mpjpe(pose, pose) == 0.0

    def test_uniform_offset(self, rng):
        pose = random_pose(rng)
        assert mpjpe(pose + (3.0, 0.0, 0.0), pose) == pytest.approx(3.0, abs=1e-9)

    def test_single_joint(self):
        gt = np.zeros((17, 3))
        pred = gt.copy()
        pred[9] = (0, 17, 0)
        assert mpjpe(pred, gt) == pytest.approx(1.0, abs=1e-12)

    def test_shape_mismatch(self):
        with pytest.raises(SchemaError):
            mpjpe(np.zeros((17, 3)), np.zeros((16, 3)))

    def test_batched(self, rng):
        a = rng.normal(size=(5, 17, 3))
        b = rng.normal(size=(5, 17, 3))
        np.testing.assert_allclose(mpjpe(a, b), [mpjpe(x, y) for x, y in zip(a, b)])

    @given(finite_poses, finite_poses, arrays(np.float64, 3, elements=st.floats(-1e3, 1e3)))
    def test_symmetry_and_translation(self, a, b, t):
        assert mpjpe(a, b) == mpjpe(b, a)
        assert mpjpe(a + t, b + t) == pytest.approx(mpjpe(a, b), abs=1e-9)


class TestSubsetMpjpe:
    def test_distal_exact(self, rng):
        gt = random_pose(rng)
        pred = gt.copy()
        pred[list(H36M17.proximal_indices)] += 40.0
        assert subset_mpjpe(pred, gt, H36M17.distal_indices) == 0.0

    def test_all_off_by_ten(self, rng):
        gt = random_pose(rng)
        pred = gt.copy()
        pred[list(H36M17.distal_indices), 2] += 10.0
        assert subset_mpjpe(pred, gt, H36M17.distal_indices) == pytest.approx(10.0)

    def test_arithmetic_mean(self):
        gt = np.zeros((17, 3))
        pred = gt.copy()
        for joint, err in zip(H36M17.distal_indices, (4, 8, 12, 16)):
            pred[joint, 0] = err
        assert subset_mpjpe(pred, gt, H36M17.distal_indices) == pytest.approx(10.0)

    def test_empty(self):
        with pytest.raises(SchemaError):
            subset_mpjpe(np.zeros((17, 3)), np.zeros((17, 3)), [])


class TestProcrustes:
    def test_rotation_recovered(self, rng):
        src = random_pose(rng)
        dst = src @ random_rotation(rng).T
        assert np.abs(procrustes_align(src, dst) - dst).max() < 1e-9

    def test_scale_translation_recovered(self, rng):
        src = random_pose(rng)
        dst = 2.0 * src + (40.0, -10.0, 7.0)
        assert np.abs(procrustes_align(src, dst) - dst).max() < 1e-9

    def test_mirror_not_reachable(self, rng):
        src = random_pose(rng)
        dst = src * (-1.0, 1.0, 1.0)
        best = ((procrustes_align(src, dst) - dst) ** 2).sum()
        assert best > 1.0
        # brute force over rotations x scales in the same squared-error objective
        rots = np.stack([random_rotation(rng) for _ in range(4000)])
        src_c = src - src.mean(0)
        dst_c = dst - dst.mean(0)
        rotated = np.einsum("rij,nj->rni", rots, src_c)
        grid = []
        for s in np.linspace(0.5, 1.5, 21):
            grid.append(((s * rotated - dst_c) ** 2).sum(axis=(-2, -1)).min())
        grid_best = min(grid)
        assert grid_best > 0.0
        assert grid_best >= best - 1e-9

    def test_proper_rotation_and_positive_scale(self, rng):
        for _ in range(50):
            fit = similarity_fit(random_pose(rng), random_pose(rng))
            assert np.linalg.det(fit.rotation) == pytest.approx(1.0, abs=1e-9)
            assert fit.scale > 0

    def test_degenerate_source(self):
        src = np.zeros((17, 3))
        src[:, 0] = np.arange(17.0)  # collinear
        with pytest.raises(AlignmentDegenerateError) as info:
            procrustes_align(src, np.random.default_rng(0).normal(size=(17, 3)))
        assert info.value.aligned is not None

    def test_coincident_joints(self):
        with pytest.raises(AlignmentDegenerateError):
            procrustes_align(np.ones((17, 3)), np.random.default_rng(0).normal(size=(17, 3)))

    def test_batch_matches_single(self, rng):
        src = rng.normal(size=(6, 17, 3)) * 200
        dst = rng.normal(size=(6, 17, 3)) * 200
        batch = procrustes_align_batch(src, dst)
        for i in range(6):
            np.testing.assert_allclose(batch[i], procrustes_align(src[i], dst[i]), atol=1e-9)

    def test_batch_flags_degenerate(self, rng):
        src = rng.normal(size=(3, 17, 3))
        src[1] = 0.0
        _, bad = procrustes_align_batch(src, rng.normal(size=(3, 17, 3)), return_mask=True)
        assert bad.tolist() == [False, True, False]


class TestPaMpjpe:
    def test_identity(self, rng):
        pose = random_pose(rng)
        assert pa_mpjpe(pose, pose) == pytest.approx(0.0, abs=1e-9)

    def test_rotation(self, rng):
        gt = random_pose(rng)
        assert pa_mpjpe(gt @ random_rotation(rng).T, gt) == pytest.approx(0.0, abs=1e-9)

    @settings(max_examples=200)
    @given(st.integers(0, 2**32 - 1), st.floats(0.1, 500.0))
    def test_bounded_by_mpjpe(self, seed, noise):
        rng = np.random.default_rng(seed)
        gt = random_pose(rng)
        pred = gt @ random_rotation(rng).T + rng.normal(0, noise, size=(17, 3))
        assert pa_mpjpe(pred, gt) <= mpjpe(pred, gt) + 1e-9

    @given(finite_poses, finite_poses)
    def test_squared_error_never_increases(self, pred, gt):
        # the similarity fit minimises the summed squared error, so this holds for every pair
        try:
            aligned = procrustes_align(pred, gt)
        except AlignmentDegenerateError:
            return
        assert ((aligned - gt) ** 2).sum() <= ((pred - gt) ** 2).sum() * (1 + 1e-9) + 1e-9

    def test_mean_norm_can_exceed_on_pathological_pair(self):
        # least squares is not least mean-norm: a near-degenerate pair where alignment hurts MPJPE
        pred = np.zeros((17, 3))
        pred[0] = (0, 1, 0)
        pred[1] = (1, 0, 0)
        gt = np.zeros((17, 3))
        gt[0] = (0, 1, 0)
        assert pa_mpjpe(pred, gt) > mpjpe(pred, gt)


def test_flatten_roundtrip(rng):
    pose = random_pose(rng)
    flat = flatten(pose)
    assert flat.shape == (51,)
    assert tuple(flat[3:6]) == tuple(pose[1])
    np.testing.assert_array_equal(unflatten(flat), pose)
