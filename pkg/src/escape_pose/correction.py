"""Distal correction network (CNet) and proximal reverse network (RCNet).

Corrections are subtracted from the pose, so a network output estimates the
error ``prediction - ground_truth`` of its target joints. Applying it moves
the prediction onto the ground truth.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass
from typing import Callable, Optional, Sequence

import numpy as np

from .errors import SchemaError, SupervisionUnavailableError, TrainingDivergedError
from .pose import H36M17, KeypointSchema, SampleRecord, check_pose, flatten, procrustes_align_batch
from .tinynet import AdamState, Network, NetworkConfig, adam_step

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class TrainConfig:
    epochs: int = 30
    batch_size: int = 4096
    learning_rate: float = 1e-4
    lambda1: float = 1.0
    lambda2: float = 0.5
    seed: int = 0
    hidden_dim: int = 512
    residual_blocks: int = 1
    dropout_rate: float = 0.3
    # "constant" or "cosine" (per-epoch decay from learning_rate towards zero)
    lr_schedule: str = "constant"

    def __post_init__(self):
        if self.lambda1 < 0 or self.lambda2 < 0:
            raise ValueError("loss weights must be non-negative")
        if self.batch_size < 2:
            raise ValueError("batch_size must be at least 2")
        if self.epochs < 1:
            raise ValueError("epochs must be at least 1")
        if self.lr_schedule not in ("constant", "cosine"):
            raise ValueError(f"unknown lr_schedule {self.lr_schedule!r}")

    def epoch_learning_rate(self, epoch: int) -> float:
        if self.lr_schedule == "cosine":
            return self.learning_rate * 0.5 * (1.0 + math.cos(math.pi * epoch / self.epochs))
        return self.learning_rate

    def network_config(self, schema: KeypointSchema, role: str) -> NetworkConfig:
        # distinct init streams for the two networks under one seed
        offset = {"cnet": 0, "rcnet": 1}[role]
        return NetworkConfig(
            input_dim=schema.flat_dim,
            hidden_dim=self.hidden_dim,
            residual_blocks=self.residual_blocks,
            output_dim=12,
            dropout_rate=self.dropout_rate,
            seed=self.seed * 2 + offset,
        )


# "full": the full-scale schedule (large batches, small steps), which needs
# far more data and epochs than a desk run to converge.
# "desk": smaller batches and larger steps so 20k samples converge in minutes.
RECIPES = {
    "full": TrainConfig(),
    "desk": TrainConfig(epochs=30, batch_size=256, learning_rate=1e-3, dropout_rate=0.1, lr_schedule="cosine"),
}


# pose updates


def apply_correction(pose, deltas, indices: Sequence[int]) -> np.ndarray:
    """Return a copy of ``pose`` with ``deltas`` subtracted at ``indices``.

    Works on a single ``(j, 3)`` pose or a ``(B, j, 3)`` batch; ``deltas``
    may be given flat (``len(indices) * 3``) or as ``(len(indices), 3)``.
    """
    pose = np.asarray(pose, dtype=np.float64)
    indices = list(indices)
    deltas = np.asarray(deltas, dtype=np.float64)
    lead = pose.shape[:-2]
    if deltas.size != int(np.prod(lead, dtype=int)) * len(indices) * 3:
        raise SchemaError(f"{deltas.shape} deltas do not match {len(indices)} target joints")
    out = pose.copy()
    out[..., indices, :] -= deltas.reshape(lead + (len(indices), 3))
    return out


def error_targets(pose_pred, pose_gt, indices: Sequence[int]) -> np.ndarray:
    """Flattened ``pred - gt`` at ``indices``: what a network should output."""
    if pose_gt is None:
        raise SupervisionUnavailableError("ground truth is required for supervised targets")
    pose_pred = np.asarray(pose_pred, dtype=np.float64)
    pose_gt = np.asarray(pose_gt, dtype=np.float64)
    diff = pose_pred[..., list(indices), :] - pose_gt[..., list(indices), :]
    return diff.reshape(diff.shape[:-2] + (-1,))


def norm_loss(pred, target):
    """Batch mean of per-sample Euclidean residual norms, and its gradient w.r.t. ``pred``."""
    pred = np.atleast_2d(np.asarray(pred, dtype=np.float64))
    target = np.atleast_2d(np.asarray(target, dtype=np.float64))
    if pred.shape != target.shape:
        raise SchemaError(f"prediction {pred.shape} and target {target.shape} differ")
    resid = pred - target
    norms = np.linalg.norm(resid, axis=1)
    safe = np.where(norms > 0, norms, 1.0)
    grad = np.where(norms[:, None] > 0, resid / safe[:, None], 0.0) / pred.shape[0]
    return float(norms.mean()), grad


def distal_loss(predicted_deltas, pose_pred, pose_gt, schema: KeypointSchema = H36M17):
    """L1 term: distance between estimated and true distal errors."""
    target = error_targets(pose_pred, pose_gt, schema.distal_indices)
    pred = np.asarray(predicted_deltas, dtype=np.float64).reshape(target.shape)
    loss, grad = norm_loss(pred, target)
    return loss, grad.reshape(np.shape(predicted_deltas))


def align_inputs(pose_pred, pose_gt):
    """Procrustes-align predictions to ground truth, falling back to the raw pose when degenerate."""
    pose_pred = np.asarray(pose_pred, dtype=np.float64)
    pose_gt = np.asarray(pose_gt, dtype=np.float64)
    single = pose_pred.ndim == 2
    if single:
        pose_pred, pose_gt = pose_pred[None], pose_gt[None]
    aligned, bad = procrustes_align_batch(pose_pred, pose_gt, return_mask=True)
    if bad.any():
        aligned[bad] = pose_pred[bad]
    return (aligned[0] if single else aligned), bad


def aligned_distal_loss(net: Network, pose_pred, pose_gt, schema: KeypointSchema = H36M17,
                        rng=None, aligned=None):
    """L2 term: the net sees the Procrustes-aligned prediction.

    Returns ``(loss, grads, fallbacks)`` where ``fallbacks`` counts samples
    whose alignment was degenerate and used the unaligned pose instead.
    """
    if pose_gt is None:
        raise SupervisionUnavailableError("ground truth is required for the aligned loss")
    pose_gt = np.asarray(pose_gt, dtype=np.float64)
    if aligned is None:
        aligned, bad = align_inputs(np.asarray(pose_pred).reshape(pose_gt.shape), pose_gt)
        fallbacks = int(bad.sum())
    else:
        fallbacks = 0
    batch_aligned = aligned.reshape((-1,) + aligned.shape[-2:])
    batch_gt = pose_gt.reshape(batch_aligned.shape)
    out, cache = net.forward(flatten(batch_aligned), rng)
    loss, dout = norm_loss(out, error_targets(batch_aligned, batch_gt, schema.distal_indices))
    grads, _ = net.backward(cache, dout)
    return loss, grads, fallbacks


def cnet_loss(net: Network, pose_pred, pose_gt, cfg: TrainConfig, schema: KeypointSchema = H36M17,
              rng=None, aligned=None):
    """Weighted CNet objective ``lambda1 * L1 + lambda2 * L2`` with parameter gradients."""
    pose_pred = np.asarray(pose_pred, dtype=np.float64)
    out, cache = net.forward(flatten(pose_pred), rng)
    l1, dout = norm_loss(out, error_targets(pose_pred, pose_gt, schema.distal_indices))
    grads, _ = net.backward(cache, cfg.lambda1 * dout)
    l2 = 0.0
    if cfg.lambda2 > 0:
        l2, grads2, _ = aligned_distal_loss(net, pose_pred, pose_gt, schema, rng, aligned)
        for name in grads:
            grads[name] = grads[name] + cfg.lambda2 * grads2[name]
    return cfg.lambda1 * l1 + cfg.lambda2 * l2, grads


def rcnet_loss(net: Network, pose_corrected, pose_gt, schema: KeypointSchema = H36M17, rng=None):
    """Proximal error loss of the reverse network on CNet-corrected poses."""
    pose_corrected = np.asarray(pose_corrected, dtype=np.float64)
    out, cache = net.forward(flatten(pose_corrected), rng)
    loss, dout = norm_loss(out, error_targets(pose_corrected, pose_gt, schema.proximal_indices))
    grads, _ = net.backward(cache, dout)
    return loss, grads


# inference helpers


def predict_deltas(net: Network, poses, chunk: int = 8192) -> np.ndarray:
    """Eval-mode network outputs for one pose or a batch; the mode flag is left alone."""
    poses = np.asarray(poses, dtype=np.float64)
    single = poses.ndim == 2
    flat = flatten(poses[None] if single else poses)
    out = np.concatenate([net.forward(flat[i : i + chunk], training=False)[0] for i in range(0, len(flat), chunk)])
    return out[0] if single else out


def correct_distal(cnet: Network, poses, schema: KeypointSchema = H36M17) -> np.ndarray:
    return apply_correction(poses, predict_deltas(cnet, poses), schema.distal_indices)


def correct_proximal(rcnet: Network, poses, schema: KeypointSchema = H36M17) -> np.ndarray:
    return apply_correction(poses, predict_deltas(rcnet, poses), schema.proximal_indices)


# training


def _stack(records: Sequence[SampleRecord]):
    if not records:
        raise ValueError("training set is empty")
    missing = [r.id for r in records if r.ground_truth is None]
    if missing:
        raise SupervisionUnavailableError(f"{len(missing)} records lack ground truth, e.g. {missing[0]!r}")
    pred = check_pose(np.stack([r.predicted for r in records]))
    gt = check_pose(np.stack([r.ground_truth for r in records]))
    return pred, gt


def _batches(order: np.ndarray, batch_size: int):
    bounds = list(range(0, len(order), batch_size)) + [len(order)]
    if len(bounds) > 2 and bounds[-1] - bounds[-2] < 2:
        # a trailing singleton has no batch statistics; fold it into the previous batch
        del bounds[-2]
    for lo, hi in zip(bounds[:-1], bounds[1:]):
        if hi - lo >= 2:
            yield order[lo:hi]


def fit(net: Network, n: int, batch_loss: Callable, cfg: TrainConfig,
        on_epoch: Optional[Callable[[int, float], None]] = None) -> list[float]:
    """Generic seeded Adam loop. ``batch_loss(idx, rng)`` returns ``(loss, grads)``."""
    rng = np.random.default_rng(cfg.seed)
    state = AdamState(learning_rate=cfg.learning_rate)
    net.train()
    history = []
    for epoch in range(cfg.epochs):
        state.learning_rate = cfg.epoch_learning_rate(epoch)
        order = rng.permutation(n)
        total = 0.0
        seen = 0
        last_good = net.copy()
        for idx in _batches(order, cfg.batch_size):
            loss, grads = batch_loss(idx, rng)
            if not np.isfinite(loss) or not all(np.all(np.isfinite(g)) for g in grads.values()):
                # last_good is the network as it stood at the start of this epoch
                last_good.eval()
                raise TrainingDivergedError(f"non-finite loss in epoch {epoch}", last_good=last_good, epoch=epoch)
            adam_step(net, grads, state)
            total += loss * len(idx)
            seen += len(idx)
        mean = total / max(seen, 1)
        history.append(mean)
        log.info("epoch %d mean loss %.4f", epoch, mean)
        if on_epoch is not None:
            on_epoch(epoch, mean)
    net.eval()
    return history


def train_cnet(records: Sequence[SampleRecord], cfg: TrainConfig = TrainConfig(),
               schema: KeypointSchema = H36M17, on_epoch=None):
    """Supervised CNet training. Returns ``(network, per-epoch mean losses)``."""
    pred, gt = _stack(records)
    aligned, bad = align_inputs(pred, gt)
    if bad.any():
        log.warning("%d samples had degenerate Procrustes alignment; using unaligned poses", int(bad.sum()))
    net = Network(cfg.network_config(schema, "cnet"))

    def batch_loss(idx, rng):
        return cnet_loss(net, pred[idx], gt[idx], cfg, schema, rng, aligned=aligned[idx])

    history = fit(net, len(pred), batch_loss, cfg, on_epoch)
    return net, history


def train_rcnet(records: Sequence[SampleRecord], trained_cnet: Network, cfg: TrainConfig = TrainConfig(),
                schema: KeypointSchema = H36M17, on_epoch=None):
    """Train the reverse network on CNet-corrected training poses.

    ``trained_cnet`` is only read; its parameters and mode are unchanged.
    """
    pred, gt = _stack(records)
    corrected = correct_distal(trained_cnet, pred, schema)
    net = Network(cfg.network_config(schema, "rcnet"))

    def batch_loss(idx, rng):
        return rcnet_loss(net, corrected[idx], gt[idx], schema, rng)

    history = fit(net, len(pred), batch_loss, cfg, on_epoch)
    return net, history
