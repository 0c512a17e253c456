"""Hot numeric kernels with a numba fast path and a pure-numpy fallback.

Backend selection: numba is used when importable unless the environment
variable ``SWEEPFUSION_NUMBA`` is set to ``0``/``false``/``no``.  Both
backends perform the same IEEE operations in the same order on
precomputed inputs (directions and pose trigonometry are evaluated by the
caller), so their outputs are bit-identical; ``tests/test_kernels.py``
asserts this and ``benchmarks/bench_kernels.py`` compares their speed.
"""

from __future__ import annotations

import os

import numpy as np

_FLAG = os.environ.get("SWEEPFUSION_NUMBA", "").strip().lower()
NUMBA_REQUESTED = _FLAG not in ("0", "false", "no", "off")

if NUMBA_REQUESTED:
    try:
        from numba import njit

        NUMBA_ENABLED = True
    except ImportError:  # pragma: no cover - numba is a declared dependency
        NUMBA_ENABLED = False
else:
    NUMBA_ENABLED = False


def backend_name() -> str:
    return "numba" if NUMBA_ENABLED else "numpy"


# ---------------------------------------------------------------------------
# Ray / oriented-box intersection.
#
# Rays start at the origin.  Box poses are given per (ray, box) because each
# ray is cast at its own capture instant against the moving world.


def _ray_box_ranges_loop(dir_x, dir_y, box_cx, box_cy, yaw_cos, yaw_sin, half_l, half_w, max_range):
    n = dir_x.shape[0]
    m = half_l.shape[0]
    out = np.full((n, m), np.inf, dtype=np.float64)
    for i in range(n):
        dx = dir_x[i]
        dy = dir_y[i]
        for j in range(m):
            c = yaw_cos[i, j]
            s = yaw_sin[i, j]
            cx = box_cx[i, j]
            cy = box_cy[i, j]
            # ray origin and direction in the box frame
            ox = -(c * cx + s * cy)
            oy = s * cx - c * cy
            ddx = c * dx + s * dy
            ddy = -s * dx + c * dy
            hl = half_l[j]
            hw = half_w[j]
            if ddx != 0.0:
                t1 = (-hl - ox) / ddx
                t2 = (hl - ox) / ddx
                lo_x = min(t1, t2)
                hi_x = max(t1, t2)
            elif -hl <= ox <= hl:
                lo_x = -np.inf
                hi_x = np.inf
            else:
                continue
            if ddy != 0.0:
                t1 = (-hw - oy) / ddy
                t2 = (hw - oy) / ddy
                lo_y = min(t1, t2)
                hi_y = max(t1, t2)
            elif -hw <= oy <= hw:
                lo_y = -np.inf
                hi_y = np.inf
            else:
                continue
            t_enter = max(lo_x, lo_y)
            t_exit = min(hi_x, hi_y)
            if t_enter <= t_exit and t_enter > 1e-9 and t_enter <= max_range:
                out[i, j] = t_enter
    return out


def ray_box_ranges_numpy(dir_x, dir_y, box_cx, box_cy, yaw_cos, yaw_sin, half_l, half_w, max_range):
    n = dir_x.shape[0]
    m = half_l.shape[0]
    if n == 0 or m == 0:
        return np.full((n, m), np.inf, dtype=np.float64)
    dx = dir_x[:, None]
    dy = dir_y[:, None]
    c = yaw_cos
    s = yaw_sin
    ox = -(c * box_cx + s * box_cy)
    oy = s * box_cx - c * box_cy
    ddx = c * dx + s * dy
    ddy = -s * dx + c * dy
    hl = half_l[None, :]
    hw = half_w[None, :]

    with np.errstate(divide="ignore", invalid="ignore"):
        t1x = (-hl - ox) / ddx
        t2x = (hl - ox) / ddx
        t1y = (-hw - oy) / ddy
        t2y = (hw - oy) / ddy
    par_x = ddx == 0.0
    par_y = ddy == 0.0
    in_x = np.abs(ox) <= hl
    in_y = np.abs(oy) <= hw
    lo_x = np.where(par_x, np.where(in_x, -np.inf, np.inf), np.minimum(t1x, t2x))
    hi_x = np.where(par_x, np.where(in_x, np.inf, -np.inf), np.maximum(t1x, t2x))
    lo_y = np.where(par_y, np.where(in_y, -np.inf, np.inf), np.minimum(t1y, t2y))
    hi_y = np.where(par_y, np.where(in_y, np.inf, -np.inf), np.maximum(t1y, t2y))
    t_enter = np.maximum(lo_x, lo_y)
    t_exit = np.minimum(hi_x, hi_y)
    hit = (t_enter <= t_exit) & (t_enter > 1e-9) & (t_enter <= max_range)
    return np.where(hit, t_enter, np.inf)


# ---------------------------------------------------------------------------
# Radar polar accumulation: deposit per-(ray, box) entry ranges into an
# (azimuth bin, range bin) grid.  Returns are additive (no occlusion between
# vehicles), deposits happen in C order of (azimuth, subray, box).


def _radar_accumulate_loop(ranges, weights, n_az, n_sub, range_res, n_range_bins):
    grid = np.zeros((n_az, n_range_bins), dtype=np.float64)
    m = ranges.shape[1]
    max_r = range_res * n_range_bins
    for a in range(n_az):
        for s in range(n_sub):
            row = a * n_sub + s
            w = weights[s]
            for j in range(m):
                r = ranges[row, j]
                if r < max_r:
                    rb = int(r / range_res)
                    grid[a, rb] += w
    return grid


def radar_accumulate_numpy(ranges, weights, n_az, n_sub, range_res, n_range_bins):
    grid = np.zeros((n_az, n_range_bins), dtype=np.float64)
    m = ranges.shape[1]
    if m == 0:
        return grid
    max_r = range_res * n_range_bins
    flat = ranges.reshape(n_az, n_sub, m)
    mask = flat < max_r
    a_idx, s_idx, _ = np.nonzero(mask)  # C order: same deposit order as the loop
    r_hit = flat[mask]
    rb = (r_hit / range_res).astype(np.int64)
    np.add.at(grid, (a_idx, rb), weights[s_idx])
    return grid


if NUMBA_ENABLED:
    ray_box_ranges_numba = njit(cache=True)(_ray_box_ranges_loop)
    radar_accumulate_numba = njit(cache=True)(_radar_accumulate_loop)
else:  # pragma: no cover - exercised only when numba is disabled
    ray_box_ranges_numba = None
    radar_accumulate_numba = None


def ray_box_ranges(dir_x, dir_y, box_cx, box_cy, yaw_cos, yaw_sin, half_l, half_w, max_range):
    """Entry range of each ray into each oriented box (inf = miss), shape (n, m)."""
    if NUMBA_ENABLED and dir_x.shape[0] > 0 and half_l.shape[0] > 0:
        return ray_box_ranges_numba(
            dir_x, dir_y, box_cx, box_cy, yaw_cos, yaw_sin, half_l, half_w, max_range
        )
    return ray_box_ranges_numpy(
        dir_x, dir_y, box_cx, box_cy, yaw_cos, yaw_sin, half_l, half_w, max_range
    )


def radar_accumulate(ranges, weights, n_az, n_sub, range_res, n_range_bins):
    """Accumulate sub-ray hits into a polar intensity grid, shape (n_az, n_range_bins)."""
    if NUMBA_ENABLED and ranges.shape[1] > 0:
        return radar_accumulate_numba(ranges, weights, n_az, n_sub, range_res, n_range_bins)
    return radar_accumulate_numpy(ranges, weights, n_az, n_sub, range_res, n_range_bins)
