"""Exact arithmetic over rotating-sweep schedules.

All timestamps are integer nanoseconds so that completion comparisons,
tie rules and offset counts are decidable without float ambiguity.
Sweep ``i`` of a schedule occupies ``[phase + (i-1)*period, phase + i*period)``
and completes at ``phase + i*period``; the sensor rotates 0..360 degrees
linearly over each sweep interval.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .errors import FrequencyOrderError, PolicyError, StreamNotWarmError

NS_PER_S = 1_000_000_000


def sec_to_ns(t_s: float) -> int:
    """Convert seconds to integer nanoseconds (round half to even)."""
    if not math.isfinite(t_s):
        raise ValueError("timestamp must be finite")
    return int(round(t_s * NS_PER_S))


def ns_to_sec(t_ns: int) -> float:
    return t_ns / NS_PER_S


@dataclass(frozen=True)
class SweepSchedule:
    """Periodic sweep-completion timing of one rotating sensor.

    ``phase_ns`` is the completion time of sweep index 0; real generated
    sweeps start at index 1 (the first interval that lies after the phase).
    """

    period_ns: int
    phase_ns: int = 0

    def __post_init__(self) -> None:
        if self.period_ns <= 0:
            raise ValueError("period_ns must be positive")

    @classmethod
    def from_hz(cls, frequency_hz: float, phase_s: float = 0.0) -> "SweepSchedule":
        if frequency_hz <= 0:
            raise ValueError("frequency must be positive")
        return cls(period_ns=int(round(NS_PER_S / frequency_hz)), phase_ns=sec_to_ns(phase_s))

    @property
    def frequency_hz(self) -> float:
        return NS_PER_S / self.period_ns

    @property
    def period_s(self) -> float:
        return self.period_ns / NS_PER_S

    def completion_ns(self, index: int) -> int:
        return self.phase_ns + index * self.period_ns

    def interval_ns(self, index: int) -> tuple[int, int]:
        """Half-open capture interval of sweep ``index``."""
        end = self.completion_ns(index)
        return end - self.period_ns, end

    def latest_completion_index(self, t_ns: int) -> int:
        """Largest sweep index whose completion is <= ``t_ns`` (may be <= 0)."""
        return (t_ns - self.phase_ns) // self.period_ns

    def index_containing(self, t_ns: int) -> int:
        """Sweep index whose half-open interval contains ``t_ns``."""
        return (t_ns - self.phase_ns) // self.period_ns + 1

    def azimuth_deg_at(self, t_ns: int) -> float:
        """Instantaneous pointing azimuth of the rotating head, in [0, 360)."""
        return 360.0 * ((t_ns - self.phase_ns) % self.period_ns) / self.period_ns


@dataclass(frozen=True)
class FusionPolicy:
    """Pairing policy: trigger cadence, history selection and alignment.

    ``fusion_every`` is the number of lidar sweeps between fusion triggers
    (1 = fuse on every lidar completion).  ``history_stride`` of 2 selects
    every other past window ("skipping"); ``align_history`` rebuilds each
    history radar frame from azimuth slices of two adjacent real sweeps so
    it matches the history window exactly.  ``concat_frames`` overrides the
    default ratio+1 sweep count of the concatenated lidar frame.
    ``align_lidar_window`` additionally re-cuts history lidar points to the
    aligned window (only meaningful when ``align_history`` is set).
    """

    fusion_every: int = 1
    history_count: int = 4
    history_stride: int = 1
    align_history: bool = False
    align_lidar_window: bool = True
    concat_frames: int | None = None

    def __post_init__(self) -> None:
        if self.fusion_every < 1:
            raise PolicyError("fusion_every must be >= 1")
        if self.history_count < 0:
            raise PolicyError("history_count must be >= 0")
        if self.history_stride not in (1, 2):
            raise PolicyError("history_stride must be 1 or 2")
        if self.concat_frames is not None and self.concat_frames < 1:
            raise PolicyError("concat_frames must be >= 1")

    def validate_against_ratio(self, ratio: int) -> None:
        if self.fusion_every > ratio:
            raise PolicyError(
                f"fusion_every={self.fusion_every} exceeds the sweep ratio {ratio}; "
                "the paired frames would not overlap in time"
            )

    def concat_count(self, ratio: int) -> int:
        return self.concat_frames if self.concat_frames is not None else ratio + 1


def compute_ratio(f_lidar_hz: float, f_radar_hz: float) -> int:
    """Number of lidar sweeps completed per radar sweep, floor(f_l / f_r)."""
    if f_radar_hz <= 0:
        raise ValueError("radar frequency must be positive")
    if f_lidar_hz < f_radar_hz:
        raise FrequencyOrderError(
            f"lidar frequency {f_lidar_hz} Hz below radar frequency {f_radar_hz} Hz; "
            "the surround radar is assumed to be the slower sensor"
        )
    # Tiny epsilon guards float quotients like 0.3/0.1 that land just below
    # an integer.
    return int(math.floor(f_lidar_hz / f_radar_hz + 1e-9))


def fusion_frequency(f_lidar_hz: float, fusion_every: int, ratio: int | None = None) -> float:
    """Output frequency when fusing every ``fusion_every``-th lidar sweep."""
    if fusion_every < 1:
        raise PolicyError("fusion_every must be >= 1")
    if ratio is not None and fusion_every > ratio:
        raise PolicyError(
            f"fusion_every={fusion_every} exceeds the sweep ratio {ratio}; "
            "paired frames would share no time overlap"
        )
    return f_lidar_hz / fusion_every


def fusion_triggers(
    lidar: SweepSchedule,
    fusion_every: int,
    horizon_ns: int,
    warmup_ns: int = 0,
    ratio: int | None = None,
) -> np.ndarray:
    """Every ``fusion_every``-th lidar completion in ``[warmup_ns, horizon_ns)``.

    Returns an int64 array of trigger timestamps.  Triggers anchor on sweep
    indices divisible by ``fusion_every`` so consecutive triggers are exactly
    ``fusion_every * period_ns`` apart.
    """
    if horizon_ns <= 0:
        raise ValueError("horizon must be positive")
    if ratio is not None and (fusion_every < 1 or fusion_every > ratio):
        raise PolicyError(f"fusion_every={fusion_every} outside 1..{ratio}")
    if fusion_every < 1:
        raise PolicyError("fusion_every must be >= 1")
    step = fusion_every * lidar.period_ns
    lo = max(warmup_ns, lidar.phase_ns + step)  # first real triggerable sweep
    first = lidar.phase_ns + step * max(1, -(-(lo - lidar.phase_ns) // step))
    if first >= horizon_ns:
        return np.empty(0, dtype=np.int64)
    return np.arange(first, horizon_ns, step, dtype=np.int64)


def compute_offset(trigger_ns: int, radar: SweepSchedule, lidar: SweepSchedule) -> int:
    """Count of complete lidar periods between the latest radar completion
    at or before the trigger and the trigger itself.

    A radar completion exactly at the trigger yields offset 0 (the radar
    frame has arrived).  Raises ``StreamNotWarmError`` when no real radar
    sweep (index >= 1) has completed yet.
    """
    idx = radar.latest_completion_index(trigger_ns)
    if idx < 1:
        raise StreamNotWarmError(
            f"no radar sweep completed at or before t={trigger_ns} ns"
        )
    t_r = radar.completion_ns(idx)
    return (trigger_ns - t_r) // lidar.period_ns


def warmup_ns(
    lidar: SweepSchedule,
    radar: SweepSchedule,
    policy: FusionPolicy,
    ratio: int,
) -> int:
    """Earliest time a trigger may fire under ``policy``.

    Requires the concatenation window of lidar sweeps and one radar sweep
    to be complete, plus one full pairing window per requested history slot
    (history slots sit ``stride * radar period`` apart).
    """
    concat_n = policy.concat_count(ratio)
    lidar_ready = lidar.phase_ns + concat_n * lidar.period_ns
    radar_ready = radar.phase_ns + radar.period_ns
    history_span = policy.history_count * policy.history_stride * radar.period_ns
    return history_span + max(lidar_ready, radar_ready)
