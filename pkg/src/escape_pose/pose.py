"""Pose representation, keypoint schema, alignment and error metrics.

A pose is a ``(17, 3)`` float64 array of millimetre coordinates. Batched
helpers accept ``(B, 17, 3)``. Flattening is joint-major (x, y, z per joint),
giving a 51-vector.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from enum import Enum
from typing import Optional, Sequence

import numpy as np

from .errors import AlignmentDegenerateError, InvalidPoseError, SchemaError

H36M_JOINT_NAMES = (
    "pelvis",
    "r_hip",
    "r_knee",
    "r_ankle",
    "l_hip",
    "l_knee",
    "l_ankle",
    "torso",
    "neck",
    "nose",
    "head",
    "l_shoulder",
    "l_elbow",
    "l_wrist",
    "r_shoulder",
    "r_elbow",
    "r_wrist",
)


@dataclass(frozen=True)
class KeypointSchema:
    joint_count: int = 17
    root_index: int = 0
    proximal_indices: tuple = (1, 4, 11, 14)
    distal_indices: tuple = (3, 6, 13, 16)
    joint_names: tuple = H36M_JOINT_NAMES
    name: str = "h36m17"

    def __post_init__(self):
        prox = tuple(int(i) for i in self.proximal_indices)
        dist = tuple(int(i) for i in self.distal_indices)
        object.__setattr__(self, "proximal_indices", prox)
        object.__setattr__(self, "distal_indices", dist)
        object.__setattr__(self, "joint_names", tuple(self.joint_names))
        if len(prox) != 4 or len(dist) != 4:
            raise SchemaError("proximal and distal sets must each hold 4 joints")
        if len(set(prox)) != 4 or len(set(dist)) != 4:
            raise SchemaError("duplicate joint index in proximal/distal set")
        if set(prox) & set(dist):
            raise SchemaError("proximal and distal sets overlap")
        for i in prox + dist + (self.root_index,):
            if not 0 <= i < self.joint_count:
                raise SchemaError(f"joint index {i} outside [0, {self.joint_count})")
        if self.root_index in prox or self.root_index in dist:
            raise SchemaError("root joint cannot be proximal or distal")
        if len(self.joint_names) != self.joint_count:
            raise SchemaError("joint_names length does not match joint_count")

    @property
    def flat_dim(self) -> int:
        return self.joint_count * 3


H36M17 = KeypointSchema()

SCHEMAS = {"h36m17": H36M17}


def get_schema(name: str) -> KeypointSchema:
    try:
        return SCHEMAS[name]
    except KeyError:
        raise SchemaError(f"unknown schema {name!r}; known: {sorted(SCHEMAS)}") from None


class Split(str, Enum):
    TRAIN = "train"
    TEST = "test"


@dataclass(eq=False)
class SampleRecord:
    """One backbone prediction, with ground truth when available."""

    id: str
    predicted: np.ndarray
    ground_truth: Optional[np.ndarray] = None
    split: Split = Split.TEST
    meta: dict = field(default_factory=dict, compare=False)

    def __post_init__(self):
        self.split = Split(self.split)
        self.predicted = np.asarray(self.predicted, dtype=np.float64)
        if self.ground_truth is not None:
            self.ground_truth = np.asarray(self.ground_truth, dtype=np.float64)

    def __eq__(self, other):
        # bitwise comparison so a serialization round trip is checked exactly
        if not isinstance(other, SampleRecord):
            return NotImplemented
        if (self.id, self.split) != (other.id, other.split):
            return False
        if (self.ground_truth is None) != (other.ground_truth is None):
            return False
        same_gt = self.ground_truth is None or _same_bits(self.ground_truth, other.ground_truth)
        return same_gt and _same_bits(self.predicted, other.predicted)

    __hash__ = None

    def without_ground_truth(self) -> "SampleRecord":
        return SampleRecord(self.id, self.predicted.copy(), None, self.split)


def _same_bits(a: np.ndarray, b: np.ndarray) -> bool:
    return a.shape == b.shape and a.tobytes() == b.tobytes()


def check_pose(pose, schema: KeypointSchema = H36M17) -> np.ndarray:
    pose = np.asarray(pose, dtype=np.float64)
    if pose.shape[-2:] != (schema.joint_count, 3):
        raise SchemaError(f"expected (..., {schema.joint_count}, 3) pose, got {pose.shape}")
    if not np.all(np.isfinite(pose)):
        raise InvalidPoseError("pose contains non-finite coordinates")
    return pose


def flatten(pose: np.ndarray) -> np.ndarray:
    pose = np.asarray(pose)
    return pose.reshape(pose.shape[:-2] + (pose.shape[-2] * 3,))


def unflatten(vec: np.ndarray, joint_count: int = 17) -> np.ndarray:
    vec = np.asarray(vec)
    return vec.reshape(vec.shape[:-1] + (joint_count, 3))


def root_align(pose, schema: KeypointSchema = H36M17) -> np.ndarray:
    pose = check_pose(pose, schema)
    root = pose[..., schema.root_index : schema.root_index + 1, :]
    return pose - root


def _joint_errors(pred, gt) -> np.ndarray:
    pred = np.asarray(pred, dtype=np.float64)
    gt = np.asarray(gt, dtype=np.float64)
    if pred.shape != gt.shape or pred.shape[-1] != 3:
        raise SchemaError(f"pose shapes differ: {pred.shape} vs {gt.shape}")
    return np.linalg.norm(pred - gt, axis=-1)


def mpjpe(pred, gt):
    """Mean per-joint Euclidean distance (mm); batched inputs give one value per pose."""
    return _joint_errors(pred, gt).mean(axis=-1)


def subset_mpjpe(pred, gt, indices: Sequence[int]):
    indices = list(indices)
    if not indices:
        raise SchemaError("subset_mpjpe needs at least one joint index")
    return _joint_errors(pred, gt)[..., indices].mean(axis=-1)


@dataclass(frozen=True)
class SimilarityTransform:
    rotation: np.ndarray
    scale: float
    translation: np.ndarray

    def apply(self, pose: np.ndarray) -> np.ndarray:
        return self.scale * pose @ self.rotation.T + self.translation


def _umeyama(src: np.ndarray, dst: np.ndarray):
    """Batched similarity fit of ``src`` onto ``dst``; shapes (B, n, 3)."""
    n = src.shape[-2]
    mu_src = src.mean(axis=-2, keepdims=True)
    mu_dst = dst.mean(axis=-2, keepdims=True)
    src_c = src - mu_src
    dst_c = dst - mu_dst
    cov = np.einsum("bni,bnj->bij", dst_c, src_c) / n
    u, d, vt = np.linalg.svd(cov)
    sign = np.sign(np.linalg.det(u) * np.linalg.det(vt))
    sign[sign == 0] = 1.0
    s = np.ones_like(d)
    s[:, -1] = sign
    rot = np.einsum("bij,bj,bjk->bik", u, s, vt)
    var_src = (src_c**2).sum(axis=(-2, -1)) / n
    with np.errstate(divide="ignore", invalid="ignore"):
        scale = (d * s).sum(axis=-1) / var_src
    trans = mu_dst[:, 0, :] - scale[:, None] * np.einsum("bij,bj->bi", rot, mu_src[:, 0, :])
    aligned = scale[:, None, None] * np.einsum("bnj,bij->bni", src, rot) + trans[:, None, :]
    src_sv = np.linalg.svd(src_c, compute_uv=False)
    dst_spread = (dst_c**2).sum(axis=(-2, -1))
    return aligned, rot, scale, trans, src_sv, dst_spread


def _degenerate_mask(src_sv, dst_spread, rel_tol=1e-9):
    top = src_sv[:, 0]
    return (top <= 0) | (src_sv[:, 1] <= rel_tol * top) | (dst_spread <= 0)


def procrustes_align_batch(src, dst, return_mask: bool = False):
    """Align every pose in ``src`` to ``dst`` with a proper similarity transform.

    Degenerate pairs are returned unaligned (translated onto the ``dst``
    centroid) and flagged in the optional boolean mask instead of raising.
    """
    src = np.asarray(src, dtype=np.float64)
    dst = np.asarray(dst, dtype=np.float64)
    if src.shape != dst.shape or src.ndim != 3 or src.shape[-1] != 3:
        raise SchemaError(f"expected matching (B, j, 3) arrays, got {src.shape} and {dst.shape}")
    aligned, _, _, _, src_sv, dst_spread = _umeyama(src, dst)
    bad = _degenerate_mask(src_sv, dst_spread)
    if bad.any():
        aligned[bad] = src[bad] - src[bad].mean(axis=-2, keepdims=True) + dst[bad].mean(axis=-2, keepdims=True)
    if return_mask:
        return aligned, bad
    return aligned


def similarity_fit(src, dst) -> SimilarityTransform:
    src = np.asarray(src, dtype=np.float64)
    dst = np.asarray(dst, dtype=np.float64)
    if src.shape != dst.shape or src.ndim != 2 or src.shape[-1] != 3:
        raise SchemaError(f"expected matching (j, 3) arrays, got {src.shape} and {dst.shape}")
    if not (np.all(np.isfinite(src)) and np.all(np.isfinite(dst))):
        raise InvalidPoseError("procrustes inputs must be finite")
    aligned, rot, scale, trans, src_sv, dst_spread = _umeyama(src[None], dst[None])
    if _degenerate_mask(src_sv, dst_spread)[0]:
        raise AlignmentDegenerateError(
            "source or target spread is rank-deficient",
            aligned=aligned[0],
            rotation=rot[0],
            scale=float(scale[0]),
            translation=trans[0],
        )
    return SimilarityTransform(rot[0], float(scale[0]), trans[0])


def procrustes_align(src, dst) -> np.ndarray:
    """Return ``src`` mapped onto ``dst`` by the least-squares similarity transform."""
    return similarity_fit(src, dst).apply(np.asarray(src, dtype=np.float64))


def pa_mpjpe(pred, gt):
    pred = np.asarray(pred, dtype=np.float64)
    gt = np.asarray(gt, dtype=np.float64)
    if pred.ndim == 2:
        return float(mpjpe(procrustes_align(pred, gt), gt))
    aligned = procrustes_align_batch(pred, gt)
    return mpjpe(aligned, gt)
