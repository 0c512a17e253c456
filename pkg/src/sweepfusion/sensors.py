"""Azimuth-progressive sweep samplers for the two rotating sensors.

Each azimuth of a sweep is sampled at its true capture instant, which is
what makes frames of a moving scene internally smeared and makes the two
sensors disagree in time; this module is the physical source of every
misalignment effect measured downstream.

Frames serialize to a small self-describing binary container (header plus
little-endian float32 payload) with bit-exact round-trips.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field

import numpy as np

from . import _kernels
from .errors import ParameterError, StructuralError, TimeRangeError
from .scene import Scenario
from .timebase import NS_PER_S, sec_to_ns

_MAGIC = b"SWPFRAME"
_VERSION = 1
_KIND_LIDAR = 0
_KIND_RADAR = 1
_HEADER = struct.Struct("<8sIBxxxqqq")

_SALT_LIDAR = 0x11DA7
_SALT_RADAR = 0x7ADA7


@dataclass(frozen=True)
class LidarParams:
    rays_per_sweep: int = 1080
    range_noise: float = 0.03
    max_range: float = 120.0

    def __post_init__(self) -> None:
        if self.rays_per_sweep < 1 or self.max_range <= 0 or self.range_noise < 0:
            raise ParameterError("invalid lidar parameters")


@dataclass(frozen=True)
class RadarParams:
    azimuth_bins: int = 400
    range_bins: int = 256
    range_resolution: float = 0.5
    beam_sigma_deg: float = 0.45
    subrays: int = 5
    noise_level: float = 0.05
    target_return: float = 1.0

    def __post_init__(self) -> None:
        if self.azimuth_bins < 1 or self.range_bins < 1:
            raise ParameterError("radar bin counts must be >= 1")
        if self.range_resolution <= 0 or self.subrays < 1:
            raise ParameterError("invalid radar parameters")
        if self.noise_level < 0 or self.target_return <= 0:
            raise ParameterError("invalid radar intensity parameters")


@dataclass(frozen=True)
class LidarRawFrame:
    """One 360-degree sweep of range returns.

    ``points`` has shape (n, 4) float64 with columns x, y, azimuth in
    degrees and capture time relative to ``t_start_ns`` in seconds; rows
    are sorted by capture time.
    """

    sweep_index: int
    t_start_ns: int
    t_end_ns: int
    points: np.ndarray

    COL_X, COL_Y, COL_AZ, COL_REL_T = 0, 1, 2, 3

    @property
    def n_points(self) -> int:
        return self.points.shape[0]

    @property
    def period_s(self) -> float:
        return (self.t_end_ns - self.t_start_ns) / NS_PER_S

    def capture_times_abs(self) -> np.ndarray:
        return self.t_start_ns / NS_PER_S + self.points[:, self.COL_REL_T]


@dataclass(frozen=True)
class RadarRawFrame:
    """One 360-degree polar intensity sweep.

    ``intensity`` has shape (azimuth_bins, range_bins) float32.  Azimuth bin
    ``a`` is normally captured at ``t_start + (a + 0.5) / A * period``;
    reconstructed frames carry explicit per-bin capture times instead.
    """

    sweep_index: int
    t_start_ns: int
    t_end_ns: int
    range_resolution: float
    intensity: np.ndarray
    capture_rel_s: np.ndarray | None = field(default=None)

    @property
    def azimuth_bins(self) -> int:
        return self.intensity.shape[0]

    @property
    def range_bins(self) -> int:
        return self.intensity.shape[1]

    @property
    def period_s(self) -> float:
        return (self.t_end_ns - self.t_start_ns) / NS_PER_S

    def azimuth_capture_rel(self) -> np.ndarray:
        if self.capture_rel_s is not None:
            return self.capture_rel_s
        a = self.azimuth_bins
        return (np.arange(a, dtype=np.float64) + 0.5) / a * self.period_s

    def azimuth_capture_abs(self) -> np.ndarray:
        return self.t_start_ns / NS_PER_S + self.azimuth_capture_rel()


def _check_interval(scenario: Scenario, t_start_ns: int, t_end_ns: int) -> None:
    if t_end_ns <= t_start_ns:
        raise TimeRangeError("sweep interval must have positive length")
    if t_start_ns < 0 or t_end_ns > sec_to_ns(scenario.duration):
        raise TimeRangeError(
            f"sweep interval [{t_start_ns}, {t_end_ns}) ns outside scenario duration"
        )


def _track_arrays(scenario: Scenario):
    m = len(scenario.vehicles)
    c0 = np.empty((m, 2))
    vel = np.empty((m, 2))
    yaw0 = np.empty(m)
    rate = np.empty(m)
    half = np.empty((m, 2))
    for j, v in enumerate(scenario.vehicles):
        c0[j] = (v.box.cx, v.box.cy)
        vel[j] = v.velocity
        yaw0[j] = v.box.yaw
        rate[j] = v.yaw_rate
        half[j] = (0.5 * v.box.length, 0.5 * v.box.width)
    return c0, vel, yaw0, rate, half


def _poses_at(scenario, t_abs: np.ndarray):
    """Per-(ray, box) pose arrays for the kernels; trig is evaluated here so
    both kernel backends see identical inputs."""
    c0, vel, yaw0, rate, half = _track_arrays(scenario)
    t = t_abs[:, None]
    box_cx = c0[None, :, 0] + vel[None, :, 0] * t
    box_cy = c0[None, :, 1] + vel[None, :, 1] * t
    yaw = yaw0[None, :] + rate[None, :] * t
    return box_cx, box_cy, np.cos(yaw), np.sin(yaw), half[:, 0].copy(), half[:, 1].copy()


def scan_lidar(
    scenario: Scenario,
    t_start_ns: int,
    t_end_ns: int,
    params: LidarParams,
    sweep_index: int = 0,
    seed: int = 0,
) -> LidarRawFrame:
    """Simulate one lidar sweep: nearest-hit ray casting with range noise.

    Ray ``k`` points at azimuth ``k * 360 / n`` and fires at the instant the
    head passes that azimuth.  Misses produce no point, so an empty frame is
    valid.  Deterministic for fixed (scenario, interval, params, seed).
    """
    _check_interval(scenario, t_start_ns, t_end_ns)
    n = params.rays_per_sweep
    period_s = (t_end_ns - t_start_ns) / NS_PER_S
    az_deg = np.arange(n, dtype=np.float64) * (360.0 / n)
    rel_t = az_deg / 360.0 * period_s
    t_abs = t_start_ns / NS_PER_S + rel_t

    az_rad = np.deg2rad(az_deg)
    dir_x = np.cos(az_rad)
    dir_y = np.sin(az_rad)

    if scenario.vehicles:
        box_cx, box_cy, yaw_cos, yaw_sin, half_l, half_w = _poses_at(scenario, t_abs)
        ranges = _kernels.ray_box_ranges(
            dir_x, dir_y, box_cx, box_cy, yaw_cos, yaw_sin, half_l, half_w, params.max_range
        )
        nearest = ranges.min(axis=1)
    else:
        nearest = np.full(n, np.inf)

    rng = np.random.default_rng(
        np.random.SeedSequence([seed, _SALT_LIDAR, sweep_index, max(t_start_ns, 0)])
    )
    noise = rng.normal(0.0, params.range_noise, n) if params.range_noise > 0 else np.zeros(n)

    hit = np.isfinite(nearest)
    r = nearest[hit] + noise[hit]
    points = np.column_stack(
        [r * dir_x[hit], r * dir_y[hit], az_deg[hit], rel_t[hit]]
    )
    return LidarRawFrame(
        sweep_index=sweep_index, t_start_ns=t_start_ns, t_end_ns=t_end_ns, points=points
    )


def scan_radar(
    scenario: Scenario,
    t_start_ns: int,
    t_end_ns: int,
    params: RadarParams,
    sweep_index: int = 0,
    seed: int = 0,
) -> RadarRawFrame:
    """Simulate one radar sweep into a polar intensity grid.

    Each azimuth bin is sampled at its capture instant with a small fan of
    Gaussian-weighted sub-rays; every vehicle crossed by a sub-ray deposits
    its weighted return at the entry range (additive, no occlusion between
    vehicles).  Uniform speckle noise is added per bin.
    """
    _check_interval(scenario, t_start_ns, t_end_ns)
    a_bins, r_bins = params.azimuth_bins, params.range_bins
    period_s = (t_end_ns - t_start_ns) / NS_PER_S
    az_centers = (np.arange(a_bins, dtype=np.float64) + 0.5) * (360.0 / a_bins)
    rel_t = (np.arange(a_bins, dtype=np.float64) + 0.5) / a_bins * period_s

    n_sub = params.subrays
    if n_sub == 1:
        q = np.zeros(1)
    else:
        q = np.linspace(-1.5, 1.5, n_sub)
    weights = np.exp(-0.5 * q * q)
    weights = weights / weights.sum() * params.target_return

    ray_az = np.deg2rad(az_centers[:, None] + q[None, :] * params.beam_sigma_deg).ravel()
    dir_x = np.cos(ray_az)
    dir_y = np.sin(ray_az)
    t_abs = np.repeat(t_start_ns / NS_PER_S + rel_t, n_sub)

    if scenario.vehicles:
        box_cx, box_cy, yaw_cos, yaw_sin, half_l, half_w = _poses_at(scenario, t_abs)
        max_range = params.range_resolution * r_bins
        ranges = _kernels.ray_box_ranges(
            dir_x, dir_y, box_cx, box_cy, yaw_cos, yaw_sin, half_l, half_w, max_range
        )
        grid = _kernels.radar_accumulate(
            ranges, weights, a_bins, n_sub, params.range_resolution, r_bins
        )
    else:
        grid = np.zeros((a_bins, r_bins), dtype=np.float64)

    if params.noise_level > 0:
        rng = np.random.default_rng(
            np.random.SeedSequence([seed, _SALT_RADAR, sweep_index, max(t_start_ns, 0)])
        )
        grid = grid + rng.uniform(0.0, params.noise_level, size=grid.shape)

    return RadarRawFrame(
        sweep_index=sweep_index,
        t_start_ns=t_start_ns,
        t_end_ns=t_end_ns,
        range_resolution=params.range_resolution,
        intensity=grid.astype(np.float32),
    )


_BEV_MAP_CACHE: dict[tuple, tuple[np.ndarray, np.ndarray, np.ndarray]] = {}


def _bev_lookup(a_bins: int, r_bins: int, range_res: float, cell: float, half_extent: float):
    key = (a_bins, r_bins, range_res, cell, half_extent)
    cached = _BEV_MAP_CACHE.get(key)
    if cached is not None:
        return cached
    g = int(round(2.0 * half_extent / cell))
    centers = -half_extent + (np.arange(g, dtype=np.float64) + 0.5) * cell
    x = centers[:, None]
    y = centers[None, :]
    bearing = np.degrees(np.arctan2(y, x)) % 360.0
    rng_m = np.hypot(x, y)
    az_idx = np.minimum((bearing / 360.0 * a_bins).astype(np.int64), a_bins - 1)
    r_idx = (rng_m / range_res).astype(np.int64)
    valid = r_idx < r_bins
    r_idx = np.where(valid, r_idx, 0)
    _BEV_MAP_CACHE[key] = (az_idx, r_idx, valid)
    return az_idx, r_idx, valid


def radar_to_bev(frame: RadarRawFrame, cell_size: float, half_extent: float) -> np.ndarray:
    """Nearest-bin resampling of a polar frame onto a square cartesian grid.

    Output[i, j] is the intensity of the polar bin containing the center of
    the cell at ``x = -half_extent + (i + 0.5) * cell`` (same for y); cells
    beyond the radar's maximum range are zero.
    """
    if cell_size <= 0:
        raise ParameterError("cell_size must be positive")
    if half_extent <= 0:
        raise ParameterError("half_extent must be positive")
    az_idx, r_idx, valid = _bev_lookup(
        frame.azimuth_bins, frame.range_bins, frame.range_resolution, cell_size, half_extent
    )
    out = frame.intensity[az_idx, r_idx]
    return np.where(valid, out, np.float32(0.0))


# ---------------------------------------------------------------------------
# Binary frame container.


def frame_to_bytes(frame) -> bytes:
    if isinstance(frame, LidarRawFrame):
        head = _HEADER.pack(
            _MAGIC, _VERSION, _KIND_LIDAR, frame.sweep_index, frame.t_start_ns, frame.t_end_ns
        )
        counts = struct.pack("<II", frame.n_points, 4)
        payload = frame.points.astype("<f4").tobytes(order="C")
        return head + counts + payload
    if isinstance(frame, RadarRawFrame):
        head = _HEADER.pack(
            _MAGIC, _VERSION, _KIND_RADAR, frame.sweep_index, frame.t_start_ns, frame.t_end_ns
        )
        has_capture = 1 if frame.capture_rel_s is not None else 0
        counts = struct.pack(
            "<IIfB", frame.azimuth_bins, frame.range_bins, frame.range_resolution, has_capture
        )
        payload = frame.intensity.astype("<f4").tobytes(order="C")
        if has_capture:
            payload += frame.capture_rel_s.astype("<f4").tobytes(order="C")
        return head + counts + payload
    raise StructuralError(f"unsupported frame type {type(frame)!r}")


def frame_from_bytes(data: bytes):
    magic, version, kind, sweep_index, t_start_ns, t_end_ns = _HEADER.unpack_from(data, 0)
    if magic != _MAGIC:
        raise StructuralError("bad magic string in frame container")
    if version != _VERSION:
        raise StructuralError(f"unsupported frame container version {version}")
    off = _HEADER.size
    if kind == _KIND_LIDAR:
        n, ncol = struct.unpack_from("<II", data, off)
        off += 8
        pts = np.frombuffer(data, dtype="<f4", count=n * ncol, offset=off)
        return LidarRawFrame(
            sweep_index=sweep_index,
            t_start_ns=t_start_ns,
            t_end_ns=t_end_ns,
            points=pts.reshape(n, ncol).astype(np.float64),
        )
    if kind == _KIND_RADAR:
        a_bins, r_bins, range_res, has_capture = struct.unpack_from("<IIfB", data, off)
        off += 13
        grid = np.frombuffer(data, dtype="<f4", count=a_bins * r_bins, offset=off)
        off += 4 * a_bins * r_bins
        capture = None
        if has_capture:
            capture = np.frombuffer(data, dtype="<f4", count=a_bins, offset=off).astype(
                np.float64
            )
        return RadarRawFrame(
            sweep_index=sweep_index,
            t_start_ns=t_start_ns,
            t_end_ns=t_end_ns,
            range_resolution=float(range_res),
            intensity=grid.reshape(a_bins, r_bins).copy(),
            capture_rel_s=capture,
        )
    raise StructuralError(f"unknown sensor kind {kind}")


def write_frame(frame, path) -> None:
    with open(path, "wb") as fh:
        fh.write(frame_to_bytes(frame))


def read_frame(path):
    with open(path, "rb") as fh:
        return frame_from_bytes(fh.read())
