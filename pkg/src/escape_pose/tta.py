"""Self-consistency test-time adaptation and the selective correction pipeline."""

from __future__ import annotations

import logging
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from enum import Enum
from typing import Iterable, Optional, Sequence

import numpy as np

from .correction import apply_correction
from .errors import EscapeError, UpdateRejectedError
from .pose import H36M17, KeypointSchema, SampleRecord, check_pose, flatten
from .selector import DEFAULT_THRESHOLD, Direction, EnergyDecision, classify, energy_score, random_selector
from .tinynet import AdamState, Network, adam_step

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class TtaConfig:
    steps: int = 2
    learning_rate: float = 5e-4
    episodic: bool = True
    batch_size: int = 1
    workers: int = 1

    def __post_init__(self):
        if self.steps < 0:
            raise ValueError("steps must be >= 0")
        if self.learning_rate <= 0:
            raise ValueError("learning_rate must be positive")
        if self.batch_size != 1:
            raise ValueError("only per-sample adaptation (batch_size=1) is supported")
        if self.workers < 1:
            raise ValueError("workers must be >= 1")


class SelectorKind(str, Enum):
    ENERGY = "energy"
    RANDOM = "random"
    ALL = "all"
    NONE = "none"


@dataclass(frozen=True)
class SelectorConfig:
    kind: SelectorKind = SelectorKind.ENERGY
    threshold: float = DEFAULT_THRESHOLD
    direction: Direction = Direction.OOD_BELOW
    random_rate: float = 0.0
    seed: int = 0

    def __post_init__(self):
        object.__setattr__(self, "kind", SelectorKind(self.kind))
        object.__setattr__(self, "direction", Direction(self.direction))


class Route(str, Enum):
    FAST = "fast"
    ADAPTED = "adapted"


@dataclass
class PipelineResult:
    id: str
    decision: EnergyDecision
    pose_corrected: np.ndarray
    path: Route
    tta_loss_trace: list = field(default_factory=list)
    elapsed: float = 0.0
    fell_back: bool = False


def consistency_loss(cnet: Network, rcnet: Network, pose, schema: KeypointSchema = H36M17):
    """Distance between the proximal joints of the twice-corrected pose and the input.

    Both networks run with frozen normalization statistics and no dropout.
    Returns ``(loss, grads)`` with gradients for CNet parameters only.
    """
    pose = np.asarray(pose, dtype=np.float64)
    prox = list(schema.proximal_indices)
    deltas, c_cache = cnet.forward(flatten(pose)[None], training=False)
    corrected = apply_correction(pose, deltas[0], schema.distal_indices)
    prox_deltas, r_cache = rcnet.forward(flatten(corrected)[None], training=False)
    twice = apply_correction(corrected, prox_deltas[0], prox)
    diff = (twice[prox] - pose[prox]).ravel()
    loss = float(np.linalg.norm(diff))
    if loss == 0.0:
        return 0.0, {name: np.zeros_like(p) for name, p in cnet.params.items()}
    dl_ddiff = diff / loss
    # the twice-corrected proximal joints are the corrected ones minus the RCNet output
    _, d_corrected = rcnet.backward(r_cache, -dl_ddiff[None])
    d_corrected = d_corrected.reshape(pose.shape)
    # corrected distal joints are the input minus the CNet output
    d_deltas = -d_corrected[list(schema.distal_indices)].reshape(1, -1)
    grads, _ = cnet.backward(c_cache, d_deltas)
    return loss, grads


@dataclass
class Adaptation:
    cnet: Network
    trace: list
    fell_back: bool = False


def adapt_sample(cnet_pretrained: Network, rcnet: Network, pose, cfg: TtaConfig = TtaConfig(),
                 schema: KeypointSchema = H36M17) -> Adaptation:
    """Fine-tune CNet on one pose with the self-consistency loss.

    In episodic mode a private copy of ``cnet_pretrained`` is adapted; in
    continual mode ``cnet_pretrained`` itself is updated. Optimizer state is
    fresh for every call.
    """
    cnet = cnet_pretrained.copy() if cfg.episodic else cnet_pretrained
    state = AdamState(learning_rate=cfg.learning_rate)
    trace = []
    backup = cnet.copy() if not cfg.episodic else None
    for _ in range(cfg.steps):
        loss, grads = consistency_loss(cnet, rcnet, pose, schema)
        trace.append(loss)
        try:
            if not np.isfinite(loss):
                raise UpdateRejectedError("non-finite consistency loss")
            adam_step(cnet, grads, state)
        except UpdateRejectedError as exc:
            log.warning("adaptation aborted: %s", exc)
            if backup is not None:
                cnet.params = backup.params
                cnet.bump_version()
                return Adaptation(cnet, trace, fell_back=True)
            return Adaptation(cnet_pretrained, trace, fell_back=True)
    return Adaptation(cnet, trace)


def fast_correction(cnet: Network, pose, schema: KeypointSchema = H36M17) -> np.ndarray:
    deltas, _ = cnet.forward(flatten(pose)[None], training=False)
    return apply_correction(pose, deltas[0], schema.distal_indices)


def _decisions(poses: Sequence[np.ndarray], selector: SelectorConfig) -> list[EnergyDecision]:
    stream = random_selector(selector.random_rate, selector.seed) if selector.kind is SelectorKind.RANDOM else None
    out = []
    for pose in poses:
        decision = classify(energy_score(pose), selector.threshold, selector.direction)
        if selector.kind is SelectorKind.RANDOM:
            decision = EnergyDecision(decision.score, next(stream), decision.threshold_used, decision.direction)
        elif selector.kind is SelectorKind.ALL:
            decision = EnergyDecision(decision.score, True, decision.threshold_used, decision.direction)
        elif selector.kind is SelectorKind.NONE:
            decision = EnergyDecision(decision.score, False, decision.threshold_used, decision.direction)
        out.append(decision)
    return out


def process_sample(cnet: Network, rcnet: Network, sample_id: str, pose: np.ndarray,
                   selector: SelectorConfig, tta: TtaConfig, schema: KeypointSchema = H36M17,
                   decision: Optional[EnergyDecision] = None) -> PipelineResult:
    """Route one pose; ``decision`` may be precomputed (random selection needs stream order)."""
    start = time.perf_counter()
    if decision is None:
        decision = _decisions([pose], selector)[0]
    if decision.is_ood:
        adaptation = adapt_sample(cnet, rcnet, pose, tta, schema)
        corrected = fast_correction(adaptation.cnet, pose, schema)
        result = PipelineResult(sample_id, decision, corrected, Route.ADAPTED, adaptation.trace,
                                fell_back=adaptation.fell_back)
    else:
        corrected = fast_correction(cnet, pose, schema)
        result = PipelineResult(sample_id, decision, corrected, Route.FAST)
    result.elapsed = time.perf_counter() - start
    return result


def run_pipeline(cnet: Network, rcnet: Network, records: Iterable[SampleRecord],
                 selector: SelectorConfig = SelectorConfig(), tta: TtaConfig = TtaConfig(),
                 schema: KeypointSchema = H36M17) -> list[PipelineResult]:
    """Score, route and correct every record in input order.

    Ground truth is never read. Malformed records are logged and skipped.
    With episodic adaptation and ``tta.workers > 1`` samples are processed
    by a thread pool, each adaptation owning its CNet copy.
    """
    ids, poses = [], []
    for record in records:
        try:
            pose = check_pose(record.predicted, schema)
        except EscapeError as exc:
            log.warning("skipping sample %r: %s", getattr(record, "id", "?"), exc)
            continue
        ids.append(record.id)
        poses.append(pose)
    if selector.kind is SelectorKind.RANDOM:
        decisions = _decisions(poses, selector)
    else:
        decisions = [None] * len(poses)

    def work(i):
        return process_sample(cnet, rcnet, ids[i], poses[i], selector, tta, schema, decisions[i])

    if tta.workers > 1 and tta.episodic:
        with ThreadPoolExecutor(max_workers=tta.workers) as pool:
            return list(pool.map(work, range(len(poses))))
    return [work(i) for i in range(len(poses))]
