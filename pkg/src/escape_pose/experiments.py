"""Experiment drivers: evaluation arms, loss/error correlation and latency benchmarks."""

from __future__ import annotations

import math
import time
from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np

from .correction import correct_distal
from .errors import InsufficientDataError, SupervisionUnavailableError
from .pose import H36M17, KeypointSchema, SampleRecord, check_pose, mpjpe, pa_mpjpe, subset_mpjpe
from .reports import RunReport, SampleRow
from .selector import DEFAULT_THRESHOLD, Direction, classify, energy_score
from .tinynet import Network
from .tta import (
    PipelineResult,
    Route,
    SelectorConfig,
    SelectorKind,
    TtaConfig,
    consistency_loss,
    run_pipeline,
)

MODES = ("baseline", "cnet_only", "tta_all", "escape", "random_select")

MIN_CORRELATION_SAMPLES = 30


@dataclass(frozen=True)
class ArmConfig:
    mode: str = "escape"
    threshold: float = DEFAULT_THRESHOLD
    direction: Direction = Direction.OOD_BELOW
    # None means: match the energy selector's rate on the evaluated data
    random_rate: Optional[float] = None
    seed: int = 0
    tta: TtaConfig = field(default_factory=TtaConfig)

    def __post_init__(self):
        if self.mode not in MODES:
            raise ValueError(f"unknown mode {self.mode!r}; expected one of {MODES}")
        object.__setattr__(self, "direction", Direction(self.direction))


def energy_selection_rate(records: Sequence[SampleRecord], threshold: float, direction) -> float:
    scores = energy_score(np.stack([r.predicted for r in records]))
    return float(np.mean([classify(s, threshold, direction).is_ood for s in scores]))


def selector_for(cfg: ArmConfig, records: Sequence[SampleRecord]) -> SelectorConfig:
    kind = {
        "cnet_only": SelectorKind.NONE,
        "tta_all": SelectorKind.ALL,
        "escape": SelectorKind.ENERGY,
        "random_select": SelectorKind.RANDOM,
    }[cfg.mode]
    rate = cfg.random_rate
    if kind is SelectorKind.RANDOM and rate is None:
        rate = energy_selection_rate(records, cfg.threshold, cfg.direction)
    return SelectorConfig(kind, cfg.threshold, cfg.direction, rate or 0.0, cfg.seed)


def _baseline(records: Sequence[SampleRecord], cfg: ArmConfig, schema) -> list[PipelineResult]:
    out = []
    for rec in records:
        start = time.perf_counter()
        pose = check_pose(rec.predicted, schema)
        decision = classify(energy_score(pose), cfg.threshold, cfg.direction)
        result = PipelineResult(rec.id, decision, pose.copy(), Route.FAST)
        result.elapsed = time.perf_counter() - start
        out.append(result)
    return out


def run_arm(cfg: ArmConfig, cnet: Optional[Network], rcnet: Optional[Network],
            records: Sequence[SampleRecord], schema: KeypointSchema = H36M17) -> list[PipelineResult]:
    if cfg.mode == "baseline":
        return _baseline(records, cfg, schema)
    return run_pipeline(cnet, rcnet, records, selector_for(cfg, records), cfg.tta, schema)


def build_report(records: Sequence[SampleRecord], results: Sequence[PipelineResult], config: dict,
                 schema: KeypointSchema = H36M17) -> RunReport:
    by_id = {r.id: r for r in records}
    missing = [r.id for r in results if by_id[r.id].ground_truth is None]
    if missing:
        raise SupervisionUnavailableError(f"{len(missing)} samples lack ground truth, e.g. {missing[0]!r}")
    if not results:
        return RunReport([], config)
    pre = np.stack([by_id[r.id].predicted for r in results])
    post = np.stack([r.pose_corrected for r in results])
    gt = np.stack([by_id[r.id].ground_truth for r in results])
    distal = list(schema.distal_indices)
    d_pre, d_post = subset_mpjpe(pre, gt, distal), subset_mpjpe(post, gt, distal)
    m_pre, m_post = mpjpe(pre, gt), mpjpe(post, gt)
    pa_pre, pa_post = pa_mpjpe(pre, gt), pa_mpjpe(post, gt)
    rows = []
    for i, r in enumerate(results):
        rows.append(SampleRow(
            id=r.id,
            energy=float(r.decision.score),
            ood=bool(r.decision.is_ood),
            path=r.path.value,
            distal_pre=float(d_pre[i]),
            distal_post=float(d_post[i]),
            mpjpe_pre=float(m_pre[i]),
            mpjpe_post=float(m_post[i]),
            pa_mpjpe_pre=float(pa_pre[i]),
            pa_mpjpe_post=float(pa_post[i]),
            l_tt_trace=[float(v) for v in r.tta_loss_trace],
            elapsed_us=r.elapsed * 1e6,
        ))
    return RunReport(rows, config)


def evaluate(cfg: ArmConfig, cnet, rcnet, records: Sequence[SampleRecord], config: Optional[dict] = None,
             schema: KeypointSchema = H36M17) -> RunReport:
    """Run one arm over ``records`` and score it against their ground truth."""
    missing = [r.id for r in records if r.ground_truth is None]
    if missing:
        raise SupervisionUnavailableError(f"{len(missing)} samples lack ground truth, e.g. {missing[0]!r}")
    results = run_arm(cfg, cnet, rcnet, records, schema)
    echo = dict(config or {})
    echo.setdefault("mode", cfg.mode)
    echo.setdefault("seed", cfg.seed)
    echo.setdefault("energy_threshold", cfg.threshold)
    echo.setdefault("ood_direction", cfg.direction.value)
    if cfg.mode == "random_select":
        echo.setdefault("random_rate", selector_for(cfg, records).random_rate)
    echo.setdefault("tta_steps", cfg.tta.steps)
    echo.setdefault("tta_lr", cfg.tta.learning_rate)
    echo.setdefault("episodic", cfg.tta.episodic)
    return build_report(records, results, echo, schema)


# -- correlation between the self-consistency loss and the true error --------

@dataclass
class CorrelationResult:
    ids: list
    l_tt: np.ndarray
    distal_error: np.ndarray
    bin_edges: np.ndarray
    bin_counts: np.ndarray
    bin_mean_l_tt: np.ndarray
    bin_mean_error: np.ndarray
    pearson_r: Optional[float]

    @property
    def applicable(self) -> bool:
        return self.pearson_r is not None

    def csv_rows(self) -> tuple[list[str], list[list]]:
        header = ["kind", "id", "l_tt", "distal_mpjpe", "bin_low", "bin_high", "count", "pearson_r"]
        rows = [["sample", i, float(l), float(e), "", "", "", ""]
                for i, l, e in zip(self.ids, self.l_tt, self.distal_error)]
        for k in range(len(self.bin_counts)):
            rows.append(["bin", "", _cell(self.bin_mean_l_tt[k]), _cell(self.bin_mean_error[k]),
                         float(self.bin_edges[k]), float(self.bin_edges[k + 1]), int(self.bin_counts[k]), ""])
        r = "n/a" if self.pearson_r is None else float(self.pearson_r)
        rows.append(["summary", "", "", "", "", "", len(self.ids), r])
        return header, rows


def _cell(value):
    return "" if math.isnan(value) else float(value)


def pearson(x, y) -> Optional[float]:
    """Pearson correlation, or ``None`` when either variable is constant."""
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    dx, dy = x - x.mean(), y - y.mean()
    denom = math.sqrt(float(dx @ dx) * float(dy @ dy))
    if denom == 0.0:
        return None
    return float(dx @ dy) / denom


def correlation(cnet: Network, rcnet: Network, records: Sequence[SampleRecord], bins: int = 20,
                schema: KeypointSchema = H36M17) -> CorrelationResult:
    if len(records) < MIN_CORRELATION_SAMPLES:
        raise InsufficientDataError(f"need at least {MIN_CORRELATION_SAMPLES} samples, got {len(records)}")
    missing = [r.id for r in records if r.ground_truth is None]
    if missing:
        raise SupervisionUnavailableError(f"{len(missing)} samples lack ground truth, e.g. {missing[0]!r}")
    pred = np.stack([check_pose(r.predicted, schema) for r in records])
    gt = np.stack([r.ground_truth for r in records])
    l_tt = np.array([consistency_loss(cnet, rcnet, p, schema)[0] for p in pred])
    corrected = correct_distal(cnet, pred, schema)
    err = subset_mpjpe(corrected, gt, list(schema.distal_indices))

    lo, hi = float(l_tt.min()), float(l_tt.max())
    if hi == lo:
        edges = np.linspace(lo, lo + 1.0, bins + 1)
        which = np.zeros(len(l_tt), dtype=int)
    else:
        edges = np.linspace(lo, hi, bins + 1)
        which = np.clip(np.searchsorted(edges, l_tt, side="right") - 1, 0, bins - 1)
    counts = np.bincount(which, minlength=bins)
    with np.errstate(invalid="ignore", divide="ignore"):
        mean_l = np.bincount(which, weights=l_tt, minlength=bins) / counts
        mean_e = np.bincount(which, weights=err, minlength=bins) / counts
    return CorrelationResult([r.id for r in records], l_tt, err, edges, counts, mean_l, mean_e,
                             pearson(l_tt, err))


# -- latency ------------------------------------------------------------------

WARMUP = 50


@dataclass
class BenchRow:
    arm: str
    path: str
    count: int
    mean_us: float
    p95_us: float


def _summarize(arm, path, elapsed_us) -> BenchRow:
    if len(elapsed_us) == 0:
        return BenchRow(arm, path, 0, math.nan, math.nan)
    values = np.asarray(elapsed_us)
    return BenchRow(arm, path, len(values), float(values.mean()), float(np.percentile(values, 95)))


def bench(cnet, rcnet, records: Sequence[SampleRecord], arms: Sequence[str] = MODES,
          base: ArmConfig = ArmConfig(), warmup: int = WARMUP,
          schema: KeypointSchema = H36M17) -> list[BenchRow]:
    """Per-arm latency in microseconds over all samples after the first ``warmup``."""
    out = []
    for arm in arms:
        cfg = ArmConfig(arm, base.threshold, base.direction, base.random_rate, base.seed, base.tta)
        results = run_arm(cfg, cnet, rcnet, records, schema)[warmup:]
        all_us = [r.elapsed * 1e6 for r in results]
        out.append(_summarize(arm, "all", all_us))
        out.append(_summarize(arm, "fast", [r.elapsed * 1e6 for r in results if r.path is Route.FAST]))
        out.append(_summarize(arm, "adapted", [r.elapsed * 1e6 for r in results if r.path is Route.ADAPTED]))
    return out
