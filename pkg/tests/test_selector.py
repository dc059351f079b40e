import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from escape_pose.errors import InvalidPoseError
from escape_pose.pose import mpjpe
from escape_pose.selector import Direction, classify, energy_score, logsumexp, random_selector
from escape_pose.synthgen import make_dataset

poses = arrays(np.float64, (17, 3), elements=st.floats(-1500, 1500, allow_nan=False))


class TestEnergyScore:
    def test_zero_pose(self):
        assert energy_score(np.zeros((17, 3))) == pytest.approx(math.log(51), abs=1e-12)

    def test_max_dominance(self):
        pose = np.zeros((17, 3))
        pose[4, 1] = 1000.0
        assert energy_score(pose) == pytest.approx(1000.0, abs=1e-9)

    def test_constant_shift(self):
        assert energy_score(np.full((17, 3), 800.0)) == pytest.approx(800 + math.log(51), abs=1e-9)

    def test_no_overflow_at_large_coordinates(self):
        pose = np.full((17, 3), -1e6)
        pose[0, 0] = 1e6
        assert energy_score(pose) == pytest.approx(1e6)

    def test_non_finite(self):
        pose = np.zeros((17, 3))
        pose[1, 1] = np.inf
        with pytest.raises(InvalidPoseError):
            energy_score(pose)

    def test_batched(self, rng):
        batch = rng.normal(size=(4, 17, 3)) * 300
        np.testing.assert_array_equal(energy_score(batch), [energy_score(p) for p in batch])

    @given(poses, st.floats(-500, 500))
    def test_shift_identity(self, pose, c):
        assert energy_score(pose + c) == pytest.approx(energy_score(pose) + c, abs=1e-9)

    @given(poses, st.integers(0, 50), st.floats(1e-3, 100))
    def test_monotone(self, pose, k, bump):
        flat = pose.ravel().copy()
        before = energy_score(flat.reshape(17, 3))
        flat[k] += bump
        assert energy_score(flat.reshape(17, 3)) >= before
        if flat[k] > flat.max() - 30:
            assert energy_score(flat.reshape(17, 3)) > before

    @given(arrays(np.float64, 51, elements=st.floats(-300, 300)))
    def test_stable_matches_naive(self, values):
        naive = math.log(sum(math.exp(v) for v in values))
        assert logsumexp(values) == pytest.approx(naive, abs=1e-9)


class TestClassify:
    def test_below_threshold_is_ood(self):
        d = classify(700.0, 800.0, Direction.OOD_BELOW)
        assert d.is_ood and d.threshold_used == 800.0
        assert d.free_energy == -700.0

    def test_tie_is_in_distribution(self):
        assert not classify(800.0, 800.0, "below").is_ood
        assert not classify(800.0, 800.0, "above").is_ood

    def test_above_threshold_is_id(self):
        assert not classify(900.0, 800.0, Direction.OOD_BELOW).is_ood

    def test_direction_above(self):
        assert classify(900.0, 800.0, Direction.OOD_ABOVE).is_ood

    def test_pure(self):
        assert classify(12.5, 3.0, "above") == classify(12.5, 3.0, "above")


class TestRandomSelector:
    def _take(self, rate, n, seed=0):
        stream = random_selector(rate, seed)
        return [next(stream) for _ in range(n)]

    def test_rate_zero(self):
        assert not any(self._take(0.0, 1000))

    def test_rate_one(self):
        assert all(self._take(1.0, 1000))

    def test_binomial_interval(self):
        # 3 sigma of Binomial(10000, 0.2) is 120
        assert 1880 <= sum(self._take(0.2, 10_000)) <= 2120

    def test_seeded(self):
        assert self._take(0.3, 500, seed=4) == self._take(0.3, 500, seed=4)

    def test_bad_rate(self):
        with pytest.raises(ValueError):
            next(random_selector(1.5, 0))


def test_selected_samples_have_higher_error():
    records = make_dataset(2000, "test", seed=21)
    pred = np.stack([r.predicted for r in records])
    gt = np.stack([r.ground_truth for r in records])
    err = mpjpe(pred, gt)
    ood = energy_score(pred) < 800.0
    assert 0 < ood.mean() < 1
    assert err[ood].mean() > err.mean()
