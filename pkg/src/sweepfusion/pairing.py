"""Offset-aware pairing of the two sweep streams.

At every fusion trigger (a lidar completion) the newest lidar sweeps are
cut into azimuth sectors and concatenated into one frame that approximates
a radar sweep window; the concatenated frame is paired with the latest
completed radar sweep, tagged with the offset (count of whole lidar periods
the radar is stale by), and combined with a configurable set of history
pairs.  History can be thinned (stride 2) or re-aligned by reconstructing a
radar frame from azimuth slices of two adjacent real sweeps.
"""

from __future__ import annotations

import json
from collections import OrderedDict
from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .errors import StreamNotWarmError, StructuralError, TimeRangeError
from .scene import Scenario
from .sensors import (
    LidarParams,
    LidarRawFrame,
    RadarParams,
    RadarRawFrame,
    scan_lidar,
    scan_radar,
)
from .timebase import (
    NS_PER_S,
    FusionPolicy,
    SweepSchedule,
    compute_offset,
    fusion_triggers,
    sec_to_ns,
    warmup_ns,
)

MANIFEST_SCHEMA_VERSION = 1


def ratio_from_periods(lidar: SweepSchedule, radar: SweepSchedule) -> int:
    """Integer sweep ratio computed exactly from the stored periods."""
    if radar.period_ns < lidar.period_ns:
        raise StructuralError("radar period must be >= lidar period")
    return radar.period_ns // lidar.period_ns


@dataclass(frozen=True)
class ConcatLidarFrame:
    """Union of azimuth sectors cut from consecutive lidar sweeps.

    ``points`` has shape (n, 4) float64 with columns x, y, azimuth in
    degrees and absolute capture time in seconds; rows are ordered by
    capture time (source sweeps oldest to newest).
    """

    t_end_ns: int
    source_indices: tuple[int, ...]
    sector_width_deg: float
    points: np.ndarray

    COL_X, COL_Y, COL_AZ, COL_T = 0, 1, 2, 3

    @property
    def n_points(self) -> int:
        return self.points.shape[0]


@dataclass(frozen=True)
class PairedFrameSet:
    """One fusion input: the current pair plus selected history pairs."""

    trigger_ns: int
    offset: int
    lidar: ConcatLidarFrame
    radar: RadarRawFrame
    history: tuple[tuple[ConcatLidarFrame, RadarRawFrame], ...]  # oldest -> newest
    policy: FusionPolicy
    lidar_period_ns: int
    radar_period_ns: int

    @property
    def trigger_s(self) -> float:
        return self.trigger_ns / NS_PER_S


def _circular_diff_deg(a: np.ndarray, center: float) -> np.ndarray:
    """Signed angular difference a - center mapped to (-180, 180]."""
    d = (np.asarray(a, dtype=np.float64) - center) % 360.0
    return np.where(d > 180.0, d - 360.0, d)


def concat_lidar(
    frames: Sequence[LidarRawFrame],
    sector_width_deg: float,
    radar: SweepSchedule,
    expected_count: int | None = None,
) -> ConcatLidarFrame:
    """Concatenate consecutive lidar sweeps by azimuth sector.

    Each sweep contributes only the points whose azimuth falls within a
    sector of the given width centered on the radar head's mid-sweep
    pointing azimuth during that sweep's interval, so the concatenated
    frame approximates what the radar saw over the same span.  Sectors of
    neighbouring sweeps overlap; duplicated points are kept.
    """
    if not frames:
        raise StructuralError("concat_lidar needs at least one frame")
    if expected_count is not None and len(frames) != expected_count:
        raise StructuralError(
            f"expected {expected_count} source frames, got {len(frames)}"
        )
    if not (0.0 < sector_width_deg <= 360.0):
        raise StructuralError("sector width must be in (0, 360] degrees")
    indices = [f.sweep_index for f in frames]
    if any(b - a != 1 for a, b in zip(indices, indices[1:])):
        raise StructuralError(f"source sweeps not consecutive: {indices}")

    half = 0.5 * sector_width_deg
    chunks = []
    for frame in frames:
        mid_ns = frame.t_start_ns + (frame.t_end_ns - frame.t_start_ns) // 2
        center = radar.azimuth_deg_at(mid_ns)
        az = frame.points[:, LidarRawFrame.COL_AZ]
        keep = np.abs(_circular_diff_deg(az, center)) <= half
        pts = frame.points[keep].copy()
        pts[:, LidarRawFrame.COL_REL_T] += frame.t_start_ns / NS_PER_S  # -> absolute
        chunks.append(pts)
    merged = (
        np.concatenate(chunks, axis=0) if chunks else np.empty((0, 4), dtype=np.float64)
    )
    return ConcatLidarFrame(
        t_end_ns=frames[-1].t_end_ns,
        source_indices=tuple(indices),
        sector_width_deg=sector_width_deg,
        points=merged,
    )


def reconstruct_aligned_radar(
    r_prev: RadarRawFrame, r_next: RadarRawFrame, t_start_ns: int, t_end_ns: int
) -> RadarRawFrame:
    """Rebuild a radar frame covering an arbitrary period-length window.

    Azimuth bins captured by ``r_prev`` inside ``[t_start, r_prev.t_end)``
    are taken from it; the remaining bins were swept by ``r_next`` inside
    ``[r_prev.t_end, t_end)``.  Every bin is assigned exactly once and the
    per-bin capture times of the output preserve the source capture times.
    """
    if r_next.sweep_index != r_prev.sweep_index + 1 or r_next.t_start_ns != r_prev.t_end_ns:
        raise StructuralError("source radar sweeps are not adjacent")
    if r_prev.intensity.shape != r_next.intensity.shape:
        raise StructuralError("source radar sweeps have mismatched grids")
    if r_prev.range_resolution != r_next.range_resolution:
        raise StructuralError("source radar sweeps have mismatched range resolution")
    period_ns = r_prev.t_end_ns - r_prev.t_start_ns
    if t_end_ns - t_start_ns != period_ns:
        raise StructuralError("target window must be one radar period long")
    if t_start_ns < r_prev.t_start_ns or t_start_ns > r_prev.t_end_ns:
        raise StructuralError("target window does not overlap the source sweeps")

    a_bins = r_prev.azimuth_bins
    dt_ns = t_start_ns - r_prev.t_start_ns
    # bin a is captured (2a+1) * period / (2A) after its sweep start; exact
    # integer comparison decides which source sweep captured it inside the
    # target window
    a_idx = np.arange(a_bins, dtype=np.int64)
    from_prev = (2 * a_idx + 1) * period_ns >= 2 * a_bins * dt_ns

    grid = np.where(from_prev[:, None], r_prev.intensity, r_next.intensity)
    rel = (a_idx + 0.5) / a_bins * (period_ns / NS_PER_S)
    start_prev = (r_prev.t_start_ns - t_start_ns) / NS_PER_S
    start_next = (r_next.t_start_ns - t_start_ns) / NS_PER_S
    capture_rel = np.where(from_prev, start_prev + rel, start_next + rel)
    return RadarRawFrame(
        sweep_index=r_prev.sweep_index,
        t_start_ns=t_start_ns,
        t_end_ns=t_end_ns,
        range_resolution=r_prev.range_resolution,
        intensity=grid.astype(np.float32),
        capture_rel_s=capture_rel,
    )


class FrameBuffer:
    """Bounded ring buffer of sweep frames keyed by sweep index."""

    def __init__(self, maxlen: int):
        self.maxlen = maxlen
        self._frames: OrderedDict[int, object] = OrderedDict()

    def push(self, frame) -> None:
        self._frames[frame.sweep_index] = frame
        while len(self._frames) > self.maxlen:
            self._frames.popitem(last=False)

    def get(self, index: int):
        frame = self._frames.get(index)
        if frame is None:
            raise StreamNotWarmError(f"sweep {index} not buffered")
        return frame

    def __contains__(self, index: int) -> bool:
        return index in self._frames

    def __len__(self) -> int:
        return len(self._frames)


def buffer_capacity(ratio: int, policy: FusionPolicy) -> int:
    return ratio + policy.history_count * policy.history_stride * ratio + 2


def _aligned_radar_for_window(
    radar_buf: FrameBuffer, radar: SweepSchedule, t_start_ns: int, t_end_ns: int
) -> RadarRawFrame:
    j = radar.index_containing(t_start_ns)
    start_j, _ = radar.interval_ns(j)
    if start_j == t_start_ns:
        return radar_buf.get(j)  # window coincides with a real sweep
    return reconstruct_aligned_radar(radar_buf.get(j), radar_buf.get(j + 1), t_start_ns, t_end_ns)


def _cut_points_after(concat: ConcatLidarFrame, t_min_s: float) -> ConcatLidarFrame:
    keep = concat.points[:, ConcatLidarFrame.COL_T] >= t_min_s
    if bool(keep.all()):
        return concat
    return ConcatLidarFrame(
        t_end_ns=concat.t_end_ns,
        source_indices=concat.source_indices,
        sector_width_deg=concat.sector_width_deg,
        points=concat.points[keep],
    )


class _WindowBuilder:
    """Builds (and memoizes) pairing windows anchored at lidar completions."""

    def __init__(
        self,
        lidar_buf: FrameBuffer,
        radar_buf: FrameBuffer,
        lidar: SweepSchedule,
        radar: SweepSchedule,
        policy: FusionPolicy,
        ratio: int,
        sector_width_deg: float,
    ):
        self.lidar_buf = lidar_buf
        self.radar_buf = radar_buf
        self.lidar = lidar
        self.radar = radar
        self.policy = policy
        self.ratio = ratio
        self.sector_width_deg = sector_width_deg
        self.concat_n = policy.concat_count(ratio)
        self._memo: OrderedDict[tuple[int, bool], tuple] = OrderedDict()
        self._memo_cap = 2 * (policy.history_count * policy.history_stride + 2)

    def window(self, anchor_ns: int, aligned: bool) -> tuple[ConcatLidarFrame, RadarRawFrame]:
        key = (anchor_ns, aligned)
        hit = self._memo.get(key)
        if hit is not None:
            self._memo.move_to_end(key)
            return hit
        i_t = self.lidar.latest_completion_index(anchor_ns)
        if self.lidar.completion_ns(i_t) != anchor_ns:
            raise StructuralError("window anchor is not a lidar completion")
        frames = [
            self.lidar_buf.get(i) for i in range(i_t - self.concat_n + 1, i_t + 1)
        ]
        concat = concat_lidar(
            frames, self.sector_width_deg, self.radar, expected_count=self.concat_n
        )
        if aligned:
            t_s = anchor_ns - self.radar.period_ns
            radar_frame = _aligned_radar_for_window(self.radar_buf, self.radar, t_s, anchor_ns)
            if self.policy.align_lidar_window:
                concat = _cut_points_after(concat, t_s / NS_PER_S)
        else:
            j = self.radar.latest_completion_index(anchor_ns)
            if j < 1:
                raise StreamNotWarmError("no radar sweep completed before window anchor")
            radar_frame = self.radar_buf.get(j)
        out = (concat, radar_frame)
        self._memo[key] = out
        while len(self._memo) > self._memo_cap:
            self._memo.popitem(last=False)
        return out


def pair_at_trigger(
    trigger_ns: int,
    lidar_buf: FrameBuffer,
    radar_buf: FrameBuffer,
    lidar: SweepSchedule,
    radar: SweepSchedule,
    policy: FusionPolicy,
    sector_width_deg: float = 120.0,
) -> PairedFrameSet:
    """Assemble the fusion input for one trigger from buffered sweeps.

    Raises ``StreamNotWarmError`` when the buffers do not yet hold every
    sweep the policy needs.
    """
    ratio = ratio_from_periods(lidar, radar)
    policy.validate_against_ratio(ratio)
    builder = _WindowBuilder(
        lidar_buf, radar_buf, lidar, radar, policy, ratio, sector_width_deg
    )
    return _pair_with_builder(trigger_ns, builder)


def _pair_with_builder(trigger_ns: int, builder: _WindowBuilder) -> PairedFrameSet:
    policy = builder.policy
    concat, radar_frame = builder.window(trigger_ns, aligned=False)
    offset = compute_offset(trigger_ns, builder.radar, builder.lidar)
    history = []
    for k in range(policy.history_count, 0, -1):  # oldest first
        anchor = trigger_ns - k * policy.history_stride * builder.radar.period_ns
        anchor = builder.lidar.completion_ns(builder.lidar.latest_completion_index(anchor))
        history.append(builder.window(anchor, aligned=policy.align_history))
    return PairedFrameSet(
        trigger_ns=trigger_ns,
        offset=offset,
        lidar=concat,
        radar=radar_frame,
        history=tuple(history),
        policy=policy,
        lidar_period_ns=builder.lidar.period_ns,
        radar_period_ns=builder.radar.period_ns,
    )


def select_history(
    past_sets: Sequence[PairedFrameSet],
    history_count: int,
    stride: int,
    current_trigger_ns: int,
    radar_period_ns: int,
) -> list[tuple[ConcatLidarFrame, RadarRawFrame]]:
    """Select history pairs from previously emitted fusion windows.

    Picks the windows whose triggers sit ``k * stride`` radar periods before
    the current trigger (k = 1..history_count) and returns their current
    pairs oldest to newest.
    """
    if history_count == 0:
        return []
    by_trigger = {s.trigger_ns: s for s in past_sets}
    out = []
    for k in range(history_count, 0, -1):
        want = current_trigger_ns - k * stride * radar_period_ns
        got = by_trigger.get(want)
        if got is None:
            raise StreamNotWarmError(
                f"no past fusion window at t={want} ns (need {history_count} x stride {stride})"
            )
        out.append((got.lidar, got.radar))
    return out


def stream_fusion(
    scenario: Scenario,
    lidar: SweepSchedule,
    radar: SweepSchedule,
    lidar_params: LidarParams,
    radar_params: RadarParams,
    policy: FusionPolicy,
    horizon_ns: int,
    sector_width_deg: float = 120.0,
    seed: int | None = None,
) -> list[PairedFrameSet]:
    """Run the full pairing pipeline over ``[0, horizon)``.

    Sweeps are generated lazily in time order into bounded ring buffers and
    one ``PairedFrameSet`` is emitted per fusion trigger.  Deterministic for
    fixed inputs.
    """
    if horizon_ns > sec_to_ns(scenario.duration):
        raise TimeRangeError("horizon exceeds scenario duration")
    seed = scenario.seed if seed is None else seed
    ratio = ratio_from_periods(lidar, radar)
    policy.validate_against_ratio(ratio)
    warm = warmup_ns(lidar, radar, policy, ratio)
    triggers = fusion_triggers(lidar, policy.fusion_every, horizon_ns, warmup_ns=warm)
    if len(triggers) == 0:
        raise StreamNotWarmError(
            f"horizon {horizon_ns} ns shorter than warm-up {warm} ns; no triggers fit"
        )

    cap = buffer_capacity(ratio, policy)
    lidar_buf = FrameBuffer(cap)
    radar_buf = FrameBuffer(cap)
    builder = _WindowBuilder(
        lidar_buf, radar_buf, lidar, radar, policy, ratio, sector_width_deg
    )

    next_lidar = 1
    next_radar = 1
    sets: list[PairedFrameSet] = []
    for trigger in triggers.tolist():
        while lidar.completion_ns(next_lidar) <= trigger:
            t0, t1 = lidar.interval_ns(next_lidar)
            lidar_buf.push(
                scan_lidar(scenario, t0, t1, lidar_params, sweep_index=next_lidar, seed=seed)
            )
            next_lidar += 1
        while radar.completion_ns(next_radar) <= trigger:
            t0, t1 = radar.interval_ns(next_radar)
            radar_buf.push(
                scan_radar(scenario, t0, t1, radar_params, sweep_index=next_radar, seed=seed)
            )
            next_radar += 1
        sets.append(_pair_with_builder(trigger, builder))
    return sets


# ---------------------------------------------------------------------------
# Manifest: replayable description of the emitted fusion windows.


def _radar_source_indices(frame: RadarRawFrame, radar: SweepSchedule) -> list[int]:
    if frame.capture_rel_s is None:
        return [frame.sweep_index]
    j = radar.index_containing(frame.t_start_ns)
    start_j, _ = radar.interval_ns(j)
    return [j] if start_j == frame.t_start_ns else [j, j + 1]


def manifest_dict(
    sets: Sequence[PairedFrameSet],
    radar: SweepSchedule,
    lidar_file: str = "frames/lidar_{index:06d}.bin",
    radar_file: str = "frames/radar_{index:06d}.bin",
    metadata: dict | None = None,
) -> dict:
    entries = []
    for s in sets:
        history = []
        for concat, rframe in s.history:
            history.append(
                {
                    "anchor_ns": concat.t_end_ns,
                    "aligned": s.policy.align_history,
                    "lidar_sources": [
                        lidar_file.format(index=i) for i in concat.source_indices
                    ],
                    "radar_sources": [
                        radar_file.format(index=i)
                        for i in _radar_source_indices(rframe, radar)
                    ],
                }
            )
        entries.append(
            {
                "trigger_ns": s.trigger_ns,
                "offset": s.offset,
                "lidar_sources": [lidar_file.format(index=i) for i in s.lidar.source_indices],
                "radar_source": radar_file.format(index=s.radar.sweep_index),
                "history": history,
            }
        )
    policy = sets[0].policy if sets else None
    doc = {
        "schema_version": MANIFEST_SCHEMA_VERSION,
        "lidar_period_ns": sets[0].lidar_period_ns if sets else None,
        "radar_period_ns": sets[0].radar_period_ns if sets else None,
        "policy": None
        if policy is None
        else {
            "fusion_every": policy.fusion_every,
            "history_count": policy.history_count,
            "history_stride": policy.history_stride,
            "align_history": policy.align_history,
            "align_lidar_window": policy.align_lidar_window,
            "concat_frames": policy.concat_frames,
        },
        "sets": entries,
    }
    if metadata:
        doc["metadata"] = metadata
    return doc


def write_manifest(path, sets, radar, metadata: dict | None = None) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(manifest_dict(sets, radar, metadata=metadata), fh, indent=2, sort_keys=True)
        fh.write("\n")
