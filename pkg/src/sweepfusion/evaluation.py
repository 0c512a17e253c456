"""Oriented-box IoU, COCO-style average precision, and the offset sweep.

The offset sweep is the artifact's headline experiment: for every
(detector variant, offset) cell it synthesizes sweep streams whose radar
schedule realizes that offset at every trigger, runs detection, and scores
oriented-box AP at IoU 0.5 / 0.65 / 0.8.
"""

from __future__ import annotations

import hashlib
import json
import os
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field, replace

import numpy as np

from . import geometry
from .detector import Detection, DetectorParams, detect
from .errors import DegenerateGeometryError, ParameterError, StreamNotWarmError, UndefinedAPError
from .pairing import ratio_from_periods, stream_fusion
from .scene import GeneratorConfig, OrientedBoxBEV, ground_truth_at, random_scenario
from .sensors import LidarParams, RadarParams
from .timebase import NS_PER_S, FusionPolicy, SweepSchedule, warmup_ns

DEFAULT_IOU_THRESHOLDS = (0.5, 0.65, 0.8)
REPORT_SCHEMA_VERSION = 1


def oriented_iou(a: OrientedBoxBEV, b: OrientedBoxBEV) -> float:
    """Intersection over union of two oriented rectangles.

    Intersection via convex polygon clipping, areas by the shoelace
    formula; computed in continuous geometry (no rasterization).
    """
    if a.area <= 0.0 or b.area <= 0.0:
        raise DegenerateGeometryError("IoU of a zero-area box is undefined")
    inter = geometry.intersection_area(a.corners(), b.corners())
    union = a.area + b.area - inter
    if union <= 0.0:
        return 0.0
    return min(1.0, max(0.0, inter / union))


def match_detections(
    dets: list[Detection], gts: list[OrientedBoxBEV], iou_thr: float
) -> tuple[list[bool], int]:
    """Greedy one-to-one matching in the given (confidence-ranked) order.

    Each detection takes the unmatched ground-truth box of highest IoU at
    or above the threshold; ties break toward the lower ground-truth index.
    Returns per-detection TP flags and the count of unmatched ground truth.
    """
    taken = [False] * len(gts)
    flags: list[bool] = []
    for det in dets:
        best_iou = 0.0
        best_j = -1
        for j, gt in enumerate(gts):
            if taken[j]:
                continue
            iou = oriented_iou(det.box, gt)
            if iou >= iou_thr and iou > best_iou:
                best_iou = iou
                best_j = j
        if best_j >= 0:
            taken[best_j] = True
            flags.append(True)
        else:
            flags.append(False)
    return flags, taken.count(False)


@dataclass(frozen=True)
class APResult:
    iou_threshold: float
    ap: float
    precision: np.ndarray
    recall: np.ndarray
    tp: int
    fp: int
    fn: int


def _rank_dataset(frames) -> list[tuple[float, int, int]]:
    """Global confidence ranking (stable in frame order, then frame-local rank)."""
    order = []
    for f_idx, (dets, _) in enumerate(frames):
        for d_idx, det in enumerate(dets):
            order.append((det.confidence, f_idx, d_idx))
    order.sort(key=lambda t: (-t[0], t[1], t[2]))
    return order


def average_precision(frames, iou_thr: float) -> APResult:
    """101-point interpolated AP over a dataset of (detections, ground truth).

    ``frames`` is a sequence of ``(list[Detection], list[OrientedBoxBEV])``
    pairs; detections must already be sorted by descending confidence
    within their frame.  Matching is per frame; the precision/recall curve
    sweeps the global confidence ranking with ties broken by stable input
    order, so the result is bit-reproducible.
    """
    n_gt = sum(len(gts) for _, gts in frames)
    if n_gt == 0:
        raise UndefinedAPError("average precision needs at least one ground-truth box")

    per_frame_flags = [match_detections(dets, gts, iou_thr)[0] for dets, gts in frames]
    ranking = _rank_dataset(frames)
    tp_cum = 0
    fp_cum = 0
    precision = np.empty(len(ranking))
    recall = np.empty(len(ranking))
    for r, (_, f_idx, d_idx) in enumerate(ranking):
        if per_frame_flags[f_idx][d_idx]:
            tp_cum += 1
        else:
            fp_cum += 1
        precision[r] = tp_cum / (tp_cum + fp_cum)
        recall[r] = tp_cum / n_gt

    ap = _interpolated_ap(precision, recall)
    return APResult(
        iou_threshold=iou_thr,
        ap=ap,
        precision=precision,
        recall=recall,
        tp=tp_cum,
        fp=fp_cum,
        fn=n_gt - tp_cum,
    )


def _interpolated_ap(precision: np.ndarray, recall: np.ndarray) -> float:
    """Mean of max-interpolated precision at recalls {0.00, 0.01, ..., 1.00}."""
    if len(precision) == 0:
        return 0.0
    # running maximum of precision from the right
    p_right = np.maximum.accumulate(precision[::-1])[::-1]
    grid = np.arange(101) / 100.0
    idx = np.searchsorted(recall, grid, side="left")
    vals = np.where(idx < len(recall), p_right[np.minimum(idx, len(recall) - 1)], 0.0)
    return float(vals.mean())


def brute_force_ap(frames, iou_thr: float) -> float:
    """Independent AP oracle: re-match every ranking prefix from scratch.

    Enumerates all cut points of the global confidence ranking, recomputes
    the per-frame greedy matching on each retained subset, and interpolates
    over the resulting explicit PR points.  Quadratic; only for small
    datasets.
    """
    n_gt = sum(len(gts) for _, gts in frames)
    if n_gt == 0:
        raise UndefinedAPError("average precision needs at least one ground-truth box")
    ranking = _rank_dataset(frames)
    points = []
    for k in range(1, len(ranking) + 1):
        kept_idx: dict[int, set[int]] = {}
        for _, f_idx, d_idx in ranking[:k]:
            kept_idx.setdefault(f_idx, set()).add(d_idx)
        tp = 0
        n_det = 0
        for f_idx, (dets, gts) in enumerate(frames):
            subset = [d for i, d in enumerate(dets) if i in kept_idx.get(f_idx, set())]
            n_det += len(subset)
            flags, _ = match_detections(subset, list(gts), iou_thr)
            tp += sum(flags)
        points.append((tp / n_gt, tp / n_det))
    grid = np.arange(101) / 100.0
    total = 0.0
    for r in grid:
        best = 0.0
        for rec, prec in points:
            if rec >= r and prec > best:
                best = prec
        total += best
    return total / 101.0


# ---------------------------------------------------------------------------
# Offset realization and the sweep experiment.


def offset_schedules(
    lidar_hz: float, radar_hz: float, offset: int
) -> tuple[SweepSchedule, SweepSchedule, int, int]:
    """Schedules realizing a constant pairing offset at every trigger.

    For ``offset < ratio`` the radar phase is shifted by whole lidar periods
    and triggers run at the radar cadence.  A gap of a full ``ratio`` lidar
    periods cannot coexist with latest-available pairing under commensurate
    schedules (the next radar sweep would complete exactly at the trigger),
    so the ``offset == ratio`` cell slows the radar by one lidar period,
    which yields the same radar staleness per azimuth.

    Returns ``(lidar, radar, fusion_every, base_ratio)``.
    """
    lidar = SweepSchedule.from_hz(lidar_hz)
    base_radar = SweepSchedule.from_hz(radar_hz)
    ratio = ratio_from_periods(lidar, base_radar)
    if offset < 0 or offset > ratio:
        raise ParameterError(f"offset {offset} outside 0..{ratio}")
    p_l = lidar.period_ns
    if offset < ratio:
        radar = SweepSchedule(
            period_ns=base_radar.period_ns, phase_ns=((ratio - offset) % ratio) * p_l
        )
        return lidar, radar, ratio, ratio
    radar = SweepSchedule(period_ns=(ratio + 1) * p_l, phase_ns=p_l)
    return lidar, radar, ratio + 1, ratio


@dataclass(frozen=True)
class SweepExperimentConfig:
    generator: GeneratorConfig = field(default_factory=GeneratorConfig)
    lidar_hz: float = 20.0
    radar_hz: float = 4.0
    lidar_params: LidarParams = field(default_factory=LidarParams)
    radar_params: RadarParams = field(default_factory=RadarParams)
    policy: FusionPolicy = field(default_factory=FusionPolicy)
    sector_width_deg: float = 120.0
    n_scenarios: int = 50
    windows_per_scenario: int = 6
    base_seed: int = 1000
    offsets: tuple[int, ...] | None = None
    iou_thresholds: tuple[float, ...] = DEFAULT_IOU_THRESHOLDS

    def scenario_seeds(self) -> list[int]:
        return [self.base_seed + i for i in range(self.n_scenarios)]


@dataclass(frozen=True)
class OffsetSweepReport:
    """AP matrix over (variant, offset, IoU threshold) plus run metadata."""

    cells: dict[tuple[str, int], dict[float, APResult]]
    variants: tuple[str, ...]
    offsets: tuple[int, ...]
    iou_thresholds: tuple[float, ...]
    n_scenarios: int
    seed_set_hash: str
    metadata: dict = field(default_factory=dict)

    def validate(self) -> None:
        for v in self.variants:
            for off in self.offsets:
                cell = self.cells.get((v, off))
                if cell is None:
                    raise ValueError(f"missing report cell ({v}, {off})")
                for thr in self.iou_thresholds:
                    ap = cell[thr].ap
                    if not (0.0 <= ap <= 1.0) or not np.isfinite(ap):
                        raise ValueError(f"AP out of range in cell ({v}, {off}, {thr})")

    def ap(self, variant: str, offset: int, iou_thr: float) -> float:
        return self.cells[(variant, offset)][iou_thr].ap

    def to_csv_text(self, metadata_lines: list[str] | None = None) -> str:
        lines = []
        for ml in metadata_lines or []:
            lines.append(f"# {ml}")
        lines.append("variant,offset,iou_threshold,ap,tp,fp,fn,n_scenarios,seed_set_hash")
        for variant in self.variants:
            for off in self.offsets:
                for thr in self.iou_thresholds:
                    r = self.cells[(variant, off)][thr]
                    lines.append(
                        f"{variant},{off},{thr},{r.ap:.6f},{r.tp},{r.fp},{r.fn},"
                        f"{self.n_scenarios},{self.seed_set_hash}"
                    )
        return "\n".join(lines) + "\n"

    def summary_text(self) -> str:
        lines = []
        header = "offset".rjust(8) + "".join(f"  AP@{thr:<5}" for thr in self.iou_thresholds)
        for variant in self.variants:
            lines.append(f"variant: {variant}")
            lines.append(header)
            for off in self.offsets:
                row = f"{off:8d}"
                for thr in self.iou_thresholds:
                    row += f"   {self.cells[(variant, off)][thr].ap:.3f} "
                lines.append(row)
            lines.append("")
        return "\n".join(lines)


def _horizon_for(
    lidar: SweepSchedule,
    radar: SweepSchedule,
    policy: FusionPolicy,
    ratio: int,
    windows: int,
) -> int:
    step = policy.fusion_every * lidar.period_ns
    return warmup_ns(lidar, radar, policy, ratio) + (windows + 1) * step


def required_duration_s(cfg: SweepExperimentConfig) -> float:
    """Scenario duration long enough for every offset cell of the sweep."""
    lidar = SweepSchedule.from_hz(cfg.lidar_hz)
    base_radar = SweepSchedule.from_hz(cfg.radar_hz)
    ratio = ratio_from_periods(lidar, base_radar)
    offsets = cfg.offsets if cfg.offsets is not None else tuple(range(ratio + 1))
    worst = 0
    for off in offsets:
        lid, rad, every, base_ratio = offset_schedules(cfg.lidar_hz, cfg.radar_hz, off)
        policy = replace(
            cfg.policy,
            fusion_every=every,
            concat_frames=cfg.policy.concat_frames or (base_ratio + 1),
        )
        eff_ratio = ratio_from_periods(lid, rad)
        worst = max(worst, _horizon_for(lid, rad, policy, eff_ratio, cfg.windows_per_scenario))
    return worst / NS_PER_S + 0.1


def run_offset_cell(
    cfg: SweepExperimentConfig,
    scenario_seed: int,
    offset: int,
    variants: dict[str, DetectorParams],
) -> dict[str, list[tuple[list[Detection], list[OrientedBoxBEV]]]]:
    """Stream one scenario at one offset and run every detector variant on it.

    The stream is built once; variants share it.  Pure function of its
    arguments, safe to run in worker processes.
    """
    lidar, radar, every, base_ratio = offset_schedules(cfg.lidar_hz, cfg.radar_hz, offset)
    policy = replace(
        cfg.policy,
        fusion_every=every,
        concat_frames=cfg.policy.concat_frames or (base_ratio + 1),
    )
    eff_ratio = ratio_from_periods(lidar, radar)
    horizon = _horizon_for(lidar, radar, policy, eff_ratio, cfg.windows_per_scenario)
    generator = replace(cfg.generator, duration=max(cfg.generator.duration, horizon / NS_PER_S))
    scenario = random_scenario(generator, scenario_seed)
    sets = stream_fusion(
        scenario,
        lidar,
        radar,
        cfg.lidar_params,
        cfg.radar_params,
        policy,
        horizon,
        sector_width_deg=cfg.sector_width_deg,
    )
    if len(sets) < cfg.windows_per_scenario:
        raise StreamNotWarmError(
            f"stream produced {len(sets)} windows, need {cfg.windows_per_scenario}"
        )
    sets = sets[: cfg.windows_per_scenario]
    out: dict[str, list] = {name: [] for name in variants}
    for paired in sets:
        if paired.offset != offset:
            raise AssertionError(
                f"offset cell {offset} produced a window tagged {paired.offset}"
            )
        gts = ground_truth_at(scenario, paired.trigger_ns / NS_PER_S)
        for name, params in variants.items():
            out[name].append((detect(paired, params), gts))
    return out


def _cell_task(args):
    cfg, seed, offset, variants = args
    return run_offset_cell(cfg, seed, offset, variants)


def worker_count() -> int:
    """Worker processes for sweep/calibration cells (results never depend on it)."""
    raw = os.environ.get("SWEEPFUSION_WORKERS", "1")
    try:
        return max(1, int(raw))
    except ValueError:
        return 1


def offset_sweep(
    cfg: SweepExperimentConfig,
    variants: dict[str, DetectorParams],
    metadata: dict | None = None,
) -> OffsetSweepReport:
    """Run the (variant x offset) AP matrix experiment.

    Deterministic for a fixed config: per-cell streams are pure functions of
    (scenario seed, offset), cells are reduced in a fixed order, and the
    worker count only affects wall time.
    """
    lidar = SweepSchedule.from_hz(cfg.lidar_hz)
    base_radar = SweepSchedule.from_hz(cfg.radar_hz)
    ratio = ratio_from_periods(lidar, base_radar)
    offsets = cfg.offsets if cfg.offsets is not None else tuple(range(ratio + 1))
    seeds = cfg.scenario_seeds()

    tasks = [(cfg, seed, off, variants) for off in offsets for seed in seeds]
    n_workers = worker_count()
    if n_workers > 1:
        with ProcessPoolExecutor(max_workers=n_workers) as pool:
            results = list(pool.map(_cell_task, tasks, chunksize=1))
    else:
        results = [_cell_task(t) for t in tasks]

    cells: dict[tuple[str, int], dict[float, APResult]] = {}
    for o_idx, off in enumerate(offsets):
        per_variant: dict[str, list] = {name: [] for name in variants}
        for s_idx in range(len(seeds)):
            res = results[o_idx * len(seeds) + s_idx]
            for name in variants:
                per_variant[name].extend(res[name])
        for name in variants:
            cells[(name, off)] = {
                thr: average_precision(per_variant[name], thr) for thr in cfg.iou_thresholds
            }

    seed_hash = hashlib.sha256(json.dumps(seeds).encode()).hexdigest()[:16]
    report = OffsetSweepReport(
        cells=cells,
        variants=tuple(variants),
        offsets=tuple(offsets),
        iou_thresholds=tuple(cfg.iou_thresholds),
        n_scenarios=cfg.n_scenarios,
        seed_set_hash=seed_hash,
        metadata=metadata or {},
    )
    report.validate()
    return report
