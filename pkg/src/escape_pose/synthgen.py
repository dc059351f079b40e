"""Synthetic backbone simulator.

Ground-truth poses come from forward kinematics of a 17-joint H36M skeleton
with sampled joint angles. Predictions are corrupted copies: Gaussian noise
that is small on proximal joints and large on distal joints, scaled by a
per-sample difficulty factor with mean 1, plus, for an
out-of-distribution sub-population, rigid whole-limb rotations and a global
torso misrotation.

Coordinates are millimetres in a camera-like frame: y points down, so the
ankles of a standing subject sit near ``y = +880``.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional

import numpy as np
from scipy import stats

from .pose import H36M17, KeypointSchema, SampleRecord, Split

# (parent, child) pairs of the H36M-17 kinematic tree
BONES = (
    (0, 1), (1, 2), (2, 3),
    (0, 4), (4, 5), (5, 6),
    (0, 7), (7, 8), (8, 9), (9, 10),
    (8, 11), (11, 12), (12, 13),
    (8, 14), (14, 15), (15, 16),
)

# whole limbs as (proximal, intermediate, distal) joint indices
LIMBS = ((1, 2, 3), (4, 5, 6), (11, 12, 13), (14, 15, 16))

INTERMEDIATE = (2, 5, 12, 15)


def _rx(a):
    c, s = np.cos(a), np.sin(a)
    return np.array([[1.0, 0.0, 0.0], [0.0, c, -s], [0.0, s, c]])


def _ry(a):
    c, s = np.cos(a), np.sin(a)
    return np.array([[c, 0.0, s], [0.0, 1.0, 0.0], [-s, 0.0, c]])


def _rz(a):
    c, s = np.cos(a), np.sin(a)
    return np.array([[c, -s, 0.0], [s, c, 0.0], [0.0, 0.0, 1.0]])


def axis_angle(axis, angle) -> np.ndarray:
    """Rotation matrix for ``angle`` radians about ``axis`` (Rodrigues)."""
    axis = np.asarray(axis, dtype=np.float64)
    axis = axis / np.linalg.norm(axis)
    k = np.array([[0.0, -axis[2], axis[1]], [axis[2], 0.0, -axis[0]], [-axis[1], axis[0], 0.0]])
    return np.eye(3) + np.sin(angle) * k + (1.0 - np.cos(angle)) * k @ k


@dataclass(frozen=True)
class SkeletonModel:
    """Bone lengths (mm) and joint-angle limits (degrees) as ``(low, high, mean, spread)``."""

    hip_half_width: float = 110.0
    femur: float = 450.0
    tibia: float = 430.0
    spine: float = 230.0
    thorax: float = 250.0
    neck_nose: float = 115.0
    nose_head: float = 115.0
    shoulder_half_width: float = 160.0
    humerus: float = 300.0
    forearm: float = 260.0
    angles: dict = field(default_factory=lambda: {
        "hip_flexion": (-30.0, 120.0, 10.0, 25.0),
        "hip_abduction": (-15.0, 45.0, 5.0, 10.0),
        "knee_flexion": (0.0, 140.0, 15.0, 30.0),
        "trunk_flexion": (-15.0, 50.0, 5.0, 12.0),
        "trunk_bend": (-20.0, 20.0, 0.0, 7.0),
        "trunk_twist": (-35.0, 35.0, 0.0, 12.0),
        "head_flexion": (-30.0, 40.0, 0.0, 12.0),
        "shoulder_flexion": (-50.0, 170.0, 20.0, 40.0),
        "shoulder_abduction": (-10.0, 150.0, 20.0, 30.0),
        "elbow_flexion": (0.0, 145.0, 40.0, 35.0),
        "body_tilt": (-15.0, 15.0, 0.0, 4.0),
    })
    # heading about the vertical axis is uniform in [-yaw_range, +yaw_range] degrees
    yaw_range: float = 90.0

    def bone_lengths(self) -> dict:
        return {
            (0, 1): self.hip_half_width, (1, 2): self.femur, (2, 3): self.tibia,
            (0, 4): self.hip_half_width, (4, 5): self.femur, (5, 6): self.tibia,
            (0, 7): self.spine, (7, 8): self.thorax, (8, 9): self.neck_nose, (9, 10): self.nose_head,
            (8, 11): self.shoulder_half_width, (11, 12): self.humerus, (12, 13): self.forearm,
            (8, 14): self.shoulder_half_width, (14, 15): self.humerus, (15, 16): self.forearm,
        }

    def sample_angle(self, rng: np.random.Generator, name: str) -> float:
        low, high, mean, spread = self.angles[name]
        return float(np.deg2rad(np.clip(rng.normal(mean, spread), low, high)))


@dataclass(frozen=True)
class CorruptionModel:
    sigma_proximal: float = 8.0
    sigma_distal: float = 35.0
    ood_fraction: float = 0.2
    ood_limb_rotation_sigma: float = 25.0
    torso_misalignment_sigma: float = 3.0
    seed: int = 0
    # intermediate joints (knees, elbows) get this fraction of the way from proximal to distal sigma
    intermediate_mix: float = 0.3
    # coefficient of variation of the per-sample difficulty scale (Gamma, mean 1); 0 disables it
    difficulty_spread: float = 0.5

    def __post_init__(self):
        for name in ("sigma_proximal", "sigma_distal", "ood_limb_rotation_sigma", "torso_misalignment_sigma"):
            if getattr(self, name) < 0:
                raise ValueError(f"{name} must be non-negative")
        if not 0.0 <= self.ood_fraction <= 1.0:
            raise ValueError("ood_fraction must lie in [0, 1]")
        if self.difficulty_spread < 0:
            raise ValueError("difficulty_spread must be non-negative")

    def draw_difficulty(self, rng: np.random.Generator) -> float:
        """Per-sample noise multiplier with mean 1, shared by every joint of the sample."""
        u = rng.random()
        if self.difficulty_spread == 0:
            return 1.0
        shape = 1.0 / self.difficulty_spread**2
        return float(stats.gamma.ppf(u, shape, scale=1.0 / shape))

    @property
    def sigma_intermediate(self) -> float:
        return self.sigma_proximal + self.intermediate_mix * (self.sigma_distal - self.sigma_proximal)

    def joint_sigmas(self, schema: KeypointSchema = H36M17) -> np.ndarray:
        sig = np.full(schema.joint_count, self.sigma_proximal)
        sig[list(INTERMEDIATE)] = self.sigma_intermediate
        sig[list(schema.distal_indices)] = self.sigma_distal
        sig[schema.root_index] = 0.0
        return sig


def pose_from_angles(skel: SkeletonModel, rng: np.random.Generator) -> np.ndarray:
    """Forward kinematics for one randomly articulated pose, root at the origin."""
    a = lambda name: skel.sample_angle(rng, name)  # noqa: E731
    down = np.array([0.0, 1.0, 0.0])
    up = -down
    pose = np.zeros((17, 3))
    for side, (hip, knee, ankle) in ((-1.0, LIMBS[0]), (1.0, LIMBS[1])):
        pose[hip] = (side * skel.hip_half_width, 0.0, 0.0)
        r_thigh = _rx(a("hip_flexion")) @ _rz(-side * a("hip_abduction"))
        pose[knee] = pose[hip] + skel.femur * (r_thigh @ down)
        shank = r_thigh @ _rx(-a("knee_flexion")) @ down
        pose[ankle] = pose[knee] + skel.tibia * shank
    r_trunk = _ry(a("trunk_twist")) @ _rz(a("trunk_bend")) @ _rx(-a("trunk_flexion"))
    pose[7] = skel.spine * (r_trunk @ up)
    pose[8] = pose[7] + skel.thorax * (r_trunk @ up)
    r_head = r_trunk @ _rx(-a("head_flexion"))
    nose_dir = np.array([0.0, -0.6, 0.8])
    head_dir = np.array([0.0, -0.8, -0.6])
    pose[9] = pose[8] + skel.neck_nose * (r_head @ nose_dir)
    pose[10] = pose[9] + skel.nose_head * (r_head @ head_dir)
    for side, (shoulder, elbow, wrist) in ((1.0, LIMBS[2]), (-1.0, LIMBS[3])):
        pose[shoulder] = pose[8] + skel.shoulder_half_width * (r_trunk @ np.array([side, 0.0, 0.0]))
        r_arm = r_trunk @ _rx(a("shoulder_flexion")) @ _rz(-side * a("shoulder_abduction"))
        pose[elbow] = pose[shoulder] + skel.humerus * (r_arm @ down)
        forearm = r_arm @ _rx(a("elbow_flexion")) @ down
        pose[wrist] = pose[elbow] + skel.forearm * forearm
    yaw = np.deg2rad(skel.yaw_range) * rng.uniform(-1.0, 1.0)
    r_global = _ry(yaw) @ _rx(a("body_tilt")) @ _rz(a("body_tilt"))
    return pose @ r_global.T


def sample_rng(seed: int, stream: int, index: int) -> np.random.Generator:
    """Counter-based generator: sample ``index`` of ``stream`` is reproducible in isolation."""
    return np.random.default_rng([seed, stream, index])


def generate_gt(n: int, skeleton: SkeletonModel = SkeletonModel(), seed: int = 0, stream: int = 0) -> np.ndarray:
    if n <= 0:
        raise ValueError("n must be positive")
    return np.stack([pose_from_angles(skeleton, sample_rng(seed, stream, i)) for i in range(n)])


def corrupt(gt, model: CorruptionModel = CorruptionModel(), force_regime: Optional[str] = None,
            rng: Optional[np.random.Generator] = None, sample_id: str = "",
            split: Split = Split.TEST, schema: KeypointSchema = H36M17) -> SampleRecord:
    """Simulate a backbone prediction for ground-truth pose ``gt``.

    ``force_regime`` may be ``"id"`` or ``"ood"``; otherwise the regime is
    drawn with probability ``model.ood_fraction`` of being OOD.
    """
    gt = np.asarray(gt, dtype=np.float64)
    if rng is None:
        rng = np.random.default_rng(model.seed)
    # draw every variate unconditionally so the regime does not shift later samples
    is_ood_draw = rng.random() < model.ood_fraction
    difficulty = model.draw_difficulty(rng)
    noise = rng.standard_normal(gt.shape) * model.joint_sigmas(schema)[:, None] * difficulty
    n_limbs = 1 + int(rng.random() < 0.5)
    limb_order = rng.permutation(len(LIMBS))
    axes = rng.standard_normal((2, 3))
    angles = np.deg2rad(rng.normal(0.0, model.ood_limb_rotation_sigma, size=2))
    torso_axis = rng.standard_normal(3)
    torso_angle = np.deg2rad(rng.normal(0.0, model.torso_misalignment_sigma))

    regime = force_regime if force_regime is not None else ("ood" if is_ood_draw else "id")
    if regime not in ("id", "ood"):
        raise ValueError(f"unknown regime {regime!r}")
    pred = gt.copy()
    if regime == "ood":
        for k in range(n_limbs):
            prox, mid, dist = LIMBS[limb_order[k]]
            rot = axis_angle(axes[k], angles[k])
            pred[[mid, dist]] = (pred[[mid, dist]] - pred[prox]) @ rot.T + pred[prox]
        pred = pred @ axis_angle(torso_axis, torso_angle).T
    pred = pred + noise
    return SampleRecord(sample_id, pred, gt.copy(), split, meta={"regime": regime})


def make_dataset(n: int, split: Split | str = Split.TRAIN, seed: int = 0,
                 skeleton: SkeletonModel = SkeletonModel(),
                 corruption: CorruptionModel = CorruptionModel()) -> list[SampleRecord]:
    """``n`` corrupted samples; train and test splits use disjoint random streams."""
    if n <= 0:
        raise ValueError("n must be positive")
    split = Split(split)
    stream = 0 if split is Split.TRAIN else 1
    records = []
    for i in range(n):
        rng = sample_rng(seed, stream, i)
        gt = pose_from_angles(skeleton, rng)
        records.append(corrupt(gt, corruption, rng=rng, sample_id=f"{split.value}-{i:06d}", split=split))
    return records
