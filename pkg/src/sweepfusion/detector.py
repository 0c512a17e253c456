"""Geometric detection stage over paired frame sets.

The pipeline rasterizes the concatenated lidar points, clusters occupied
cells, fits a minimum-area oriented box per cluster, then scores and
refines each candidate against the radar intensity map.  Radar evidence is
looked up under the box *translated back* by the estimated travel since the
radar captured the target, so a stale radar frame only confirms a candidate
when the staleness is compensated; this is where temporal misalignment
turns into lost confidence and dragged boxes.

Calibration mirrors a multi-branch deployment: the rasterization and
clustering stage is shared, while the radar-fusion stage carries one
parameter branch per offset (``per_offset``), or a single branch trained on
pooled offsets (``mixed``).
"""

from __future__ import annotations

import itertools
import json
import math
from dataclasses import dataclass, field, fields, replace

import numpy as np
from scipy import ndimage

from . import geometry
from .errors import CalibrationError, DegenerateGeometryError, ParameterError
from .pairing import ConcatLidarFrame, PairedFrameSet
from .scene import OrientedBoxBEV
from .sensors import radar_to_bev
from .timebase import NS_PER_S

MODES = ("none", "per_offset", "mixed")
PARAMS_SCHEMA_VERSION = 1


@dataclass(frozen=True)
class Detection:
    box: OrientedBoxBEV
    confidence: float

    def __post_init__(self) -> None:
        if not (0.0 <= self.confidence <= 1.0):
            raise ValueError("confidence must lie in [0, 1]")


@dataclass(frozen=True)
class BranchParams:
    """Radar-fusion parameters of one calibration branch.

    ``design_offset`` is the staleness (in lidar periods) the branch was
    calibrated to compensate; the branch always applies its own design
    offset, matching a model trained for a fixed misalignment.
    """

    radar_weight: float
    search_radius: float
    scale_x: float
    scale_y: float
    design_offset: int


@dataclass(frozen=True)
class DetectorParams:
    # shared low-level stage
    cell_size: float = 0.25
    min_points: int = 5
    # radar fusion stage (used directly in mode "none")
    radar_weight: float = 0.4
    search_radius: float = 1.0
    compensation_mode: str = "none"
    branches: dict[int, BranchParams] = field(default_factory=dict)
    mixed_branch: BranchParams | None = None
    # vehicle size prior used to complete partially observed boxes
    prior_length: float = 4.5
    prior_width: float = 2.0
    face_split: float = 3.2
    yaw_edge_min: float = 2.5
    # scoring constants
    intensity_floor: float = 0.08
    confirm_pad: float = 0.4
    min_confidence: float = 0.8
    refine_weight: float = 0.3
    blob_radius: float = 2.0
    min_blob_mass: float = 0.5
    lidar_score_points: int = 15
    # radar BEV grid
    bev_cell: float = 0.5
    bev_half_extent: float = 48.0
    # history association gates
    assoc_base_radius: float = 2.0
    assoc_rate: float = 18.0
    assoc_refine_rate: float = 4.0

    def __post_init__(self) -> None:
        if self.cell_size <= 0:
            raise ParameterError("cell_size must be positive")
        if self.min_points < 1:
            raise ParameterError("min_points must be >= 1")
        if not (0.0 <= self.radar_weight <= 1.0):
            raise ParameterError("radar_weight must lie in [0, 1]")
        if self.compensation_mode not in MODES:
            raise ParameterError(f"unknown compensation mode {self.compensation_mode!r}")
        if self.compensation_mode == "per_offset" and not self.branches:
            raise ParameterError("per_offset mode requires a branch table")
        if self.compensation_mode == "mixed" and self.mixed_branch is None:
            raise ParameterError("mixed mode requires a pooled branch")


# ---------------------------------------------------------------------------
# Shared low-level stage: rasterize + cluster + box fit.


def cluster_points(points: np.ndarray, cell_size: float, min_points: int) -> list[np.ndarray]:
    """Group points into 8-connected occupancy-cell components.

    Returns index arrays into ``points``, ordered by first occupied cell in
    row-major scan order; clusters with fewer than ``min_points`` points are
    discarded.
    """
    if cell_size <= 0:
        raise ParameterError("cell_size must be positive")
    n = points.shape[0]
    if n == 0:
        return []
    ij = np.floor(points[:, :2] / cell_size).astype(np.int64)
    origin = ij.min(axis=0)
    ij -= origin
    shape = ij.max(axis=0) + 1
    occ = np.zeros(shape, dtype=bool)
    occ[ij[:, 0], ij[:, 1]] = True
    labels, n_labels = ndimage.label(occ, structure=np.ones((3, 3), dtype=int))
    if n_labels == 0:
        return []
    point_label = labels[ij[:, 0], ij[:, 1]]
    clusters = []
    for lab in range(1, n_labels + 1):
        idx = np.nonzero(point_label == lab)[0]
        if idx.size >= min_points:
            clusters.append(idx)
    return clusters


def fit_oriented_box(points: np.ndarray) -> OrientedBoxBEV:
    """Minimum-area enclosing rectangle of a cluster (hull + calipers)."""
    if points.shape[0] < 3:
        raise DegenerateGeometryError("need >= 3 points to fit a box")
    cx, cy, length, width, yaw = geometry.min_area_rect(points[:, :2])
    # guard against exactly-degenerate rectangles from collinear-ish input
    eps = 1e-9
    return OrientedBoxBEV(cx, cy, max(length, eps), max(width, eps), yaw)


def _fit_cluster_box(points: np.ndarray, params: DetectorParams) -> OrientedBoxBEV:
    """Orientation-robust rectangle fit for an outline cluster.

    A scan cluster is dominated by one face line; the minimum-area rectangle
    of a ragged L tilts to shave corner area, so when the hull has a
    confident long edge the box is aligned to it instead.
    """
    if points.shape[0] < 3:
        raise DegenerateGeometryError("need >= 3 points to fit a box")
    yaw, edge_len = geometry.longest_hull_edge(points[:, :2])
    if edge_len >= params.yaw_edge_min:
        cx, cy, length, width, yaw = geometry.rect_at_yaw(points[:, :2], yaw)
    else:
        cx, cy, length, width, yaw = geometry.min_area_rect(points[:, :2])
    eps = 1e-9
    return OrientedBoxBEV(cx, cy, max(length, eps), max(width, eps), yaw)


def complete_box_with_prior(box: OrientedBoxBEV, params: DetectorParams) -> OrientedBoxBEV:
    """Grow a partially observed rectangle to the vehicle size prior.

    A scan from the origin samples only the sensor-facing faces, so a fitted
    rectangle usually captures one face line (or an L).  The observed extent
    decides which box axis it represents: extents above ``face_split`` read
    as the side of the vehicle, shorter ones as an end face whose normal is
    the vehicle's length axis.  Each axis is then grown to at least the
    prior size by extending *away* from the sensor, keeping the observed
    (near) edges in place.
    """
    if box.length >= params.face_split:
        length_yaw = box.yaw
        l_obs, w_obs = box.length, box.width
    else:
        length_yaw = geometry.wrap_angle(box.yaw + 0.5 * math.pi)
        l_obs, w_obs = box.width, box.length
    e_l = np.array([math.cos(length_yaw), math.sin(length_yaw)])
    e_w = np.array([-e_l[1], e_l[0]])
    center = np.array([box.cx, box.cy])
    u = center / max(np.hypot(*center), 1e-12)  # outward radial direction

    new_l = max(l_obs, params.prior_length)
    new_w = max(w_obs, params.prior_width)
    sign_l = 1.0 if float(e_l @ u) >= 0.0 else -1.0
    sign_w = 1.0 if float(e_w @ u) >= 0.0 else -1.0
    center = (
        center
        + e_l * (sign_l * 0.5 * (new_l - l_obs))
        + e_w * (sign_w * 0.5 * (new_w - w_obs))
    )
    return OrientedBoxBEV(float(center[0]), float(center[1]), new_l, new_w, length_yaw)


# ---------------------------------------------------------------------------
# Radar evidence.


def _grid_window(bev: np.ndarray, cell: float, half_extent: float, cx: float, cy: float, radius: float):
    """Cell-center coordinates and values of the grid patch around a point."""
    g = bev.shape[0]
    i0 = max(int(math.floor((cx - radius + half_extent) / cell)), 0)
    i1 = min(int(math.ceil((cx + radius + half_extent) / cell)), g)
    j0 = max(int(math.floor((cy - radius + half_extent) / cell)), 0)
    j1 = min(int(math.ceil((cy + radius + half_extent) / cell)), g)
    if i0 >= i1 or j0 >= j1:
        return None
    xs = -half_extent + (np.arange(i0, i1, dtype=np.float64) + 0.5) * cell
    ys = -half_extent + (np.arange(j0, j1, dtype=np.float64) + 0.5) * cell
    patch = bev[i0:i1, j0:j1].astype(np.float64)
    return xs[:, None], ys[None, :], patch


def _radar_evidence(
    box: OrientedBoxBEV,
    anchor: tuple[float, float],
    bev: np.ndarray,
    displacement: tuple[float, float],
    search_radius: float,
    params: DetectorParams,
) -> tuple[float, float, tuple[float, float]]:
    """Radar support for a box hypothesis, evaluated at the compensated spot.

    The radar saw the target ``displacement`` ago, so evidence is searched
    around ``anchor - displacement`` (the anchor is the cluster's outline
    centroid, which is what the radar blob of the same target looks like
    from the sensor).  The score combines two factors: the fraction of the
    nearby intensity that lies under the translated (padded) box, and an
    alignment kernel on the distance between the blob centroid and the
    expected spot, scaled by the search radius.  No nearby intensity at all
    scores 0.

    Returns ``(score, region_mass, blob_centroid)``.
    """
    cell = params.bev_cell
    ex = anchor[0] - displacement[0]
    ey = anchor[1] - displacement[1]
    region_r = search_radius + params.blob_radius
    win = _grid_window(bev, cell, params.bev_half_extent, ex, ey, region_r + cell)
    if win is None:
        return 0.0, 0.0, (ex, ey)
    xs, ys, patch = win
    patch = np.where(patch > params.intensity_floor, patch, 0.0)  # cut speckle
    dx = xs - ex
    dy = ys - ey
    in_region = dx * dx + dy * dy <= region_r * region_r
    w = np.where(in_region, patch, 0.0)
    region_mass = float(w.sum())
    if region_mass < params.min_blob_mass:
        return 0.0, region_mass, (ex, ey)
    mx = float((w * xs).sum() / region_mass)
    my = float((w * ys).sum() / region_mass)

    bx = box.cx - displacement[0]
    by = box.cy - displacement[1]
    c, s = math.cos(box.yaw), math.sin(box.yaw)
    u = (xs - bx) * c + (ys - by) * s
    v = -(xs - bx) * s + (ys - by) * c
    pad = params.confirm_pad
    in_box = (np.abs(u) <= 0.5 * box.length + pad) & (np.abs(v) <= 0.5 * box.width + pad)
    containment = min(1.0, max(0.0, float(w[in_box].sum()) / region_mass))
    resid2 = (mx - ex) ** 2 + (my - ey) ** 2
    alignment = math.exp(-0.5 * resid2 / (search_radius * search_radius))
    return containment * alignment, region_mass, (mx, my)


def radar_confirmation(
    box: OrientedBoxBEV,
    bev: np.ndarray,
    displacement: tuple[float, float],
    params: DetectorParams | None = None,
    search_radius: float | None = None,
) -> float:
    """Normalized radar intensity under the displacement-compensated box.

    The box (and expected blob location) is translated *back* by
    ``displacement``, the target's estimated travel since the stale radar
    sweep captured it.
    """
    params = params or DetectorParams()
    radius = params.search_radius if search_radius is None else search_radius
    score, _, _ = _radar_evidence(
        box, (box.cx, box.cy), bev, displacement, radius, params
    )
    return score


# ---------------------------------------------------------------------------
# History association and velocity estimate.


def _concat_box_centers(frame: ConcatLidarFrame, params: DetectorParams) -> np.ndarray:
    """Completed-box centers of the clusters in one concatenated frame.

    Completed centers are far more stable across windows than raw point
    centroids (which shift with the visible faces), so velocity estimates
    difference them instead.
    """
    pts = frame.points[:, :2]
    clusters = cluster_points(pts, params.cell_size, params.min_points)
    centers = []
    for idx in clusters:
        try:
            box = complete_box_with_prior(_fit_cluster_box(pts[idx], params), params)
        except DegenerateGeometryError:
            continue
        centers.append((box.cx, box.cy))
    if not centers:
        return np.empty((0, 2), dtype=np.float64)
    return np.asarray(centers, dtype=np.float64)


def _estimate_velocity(
    paired: PairedFrameSet,
    centroid: np.ndarray,
    params: DetectorParams,
    history_centroids: list[tuple[float, np.ndarray]],
) -> tuple[tuple[float, float], bool]:
    """Constant-velocity estimate of the cluster from history associations.

    Chains from the newest history window backwards: each step predicts the
    cluster's past position from the current velocity estimate and accepts
    the nearest centroid within a gate that tightens once a velocity is
    known.  The final velocity is the component-wise median of the pairwise
    slopes between consecutive matched positions, which shrugs off a single
    badly-completed history box.
    """
    if not history_centroids:
        return (0.0, 0.0), False
    t_now = paired.lidar.t_end_ns / NS_PER_S
    matched_t = [t_now]
    matched_p = [np.asarray(centroid, dtype=np.float64)]
    vel = np.zeros(2)
    have_vel = False
    for t_k, cands in sorted(history_centroids, key=lambda h: -h[0]):  # newest first
        if cands.shape[0] == 0:
            continue
        dt = t_k - t_now
        pred = centroid + vel * dt
        rate = params.assoc_refine_rate if have_vel else params.assoc_rate
        gate = params.assoc_base_radius + rate * abs(dt)
        d = np.hypot(cands[:, 0] - pred[0], cands[:, 1] - pred[1])
        k = int(np.argmin(d))
        if d[k] > gate:
            continue
        matched_t.append(t_k)
        matched_p.append(cands[k])
        slopes = []
        for a in range(len(matched_t) - 1):
            dt_pair = matched_t[a] - matched_t[a + 1]
            if dt_pair != 0.0:
                slopes.append((matched_p[a] - matched_p[a + 1]) / dt_pair)
        if slopes:
            vel = np.median(np.asarray(slopes), axis=0)
            have_vel = True
    if len(matched_t) < 2:
        return (0.0, 0.0), False
    return (float(vel[0]), float(vel[1])), True


def estimate_displacement(
    paired: PairedFrameSet, centroid: np.ndarray, params: DetectorParams | None = None
) -> tuple[tuple[float, float], bool]:
    """Predicted travel of a cluster over the radar-vs-lidar temporal gap.

    Velocity comes from nearest-centroid association across the history
    frames; the displacement is that velocity times ``offset`` lidar
    periods.  Returns ``((0, 0), False)`` when no history associates.
    """
    params = params or DetectorParams()
    history = [
        (h.t_end_ns / NS_PER_S, _concat_box_centers(h, params)) for h, _ in paired.history
    ]
    vel, ok = _estimate_velocity(paired, np.asarray(centroid, dtype=np.float64), params, history)
    gap = paired.offset * paired.lidar_period_ns / NS_PER_S
    return (vel[0] * gap, vel[1] * gap), ok


def _select_branch(params: DetectorParams, offset: int) -> BranchParams | None:
    if params.compensation_mode == "none":
        return None
    if params.compensation_mode == "mixed":
        b = params.mixed_branch
        # the pooled branch compensates whatever offset the data carries
        return replace(b, design_offset=offset)
    if offset in params.branches:
        return params.branches[offset]
    nearest = min(params.branches, key=lambda k: (abs(k - offset), k))
    return params.branches[nearest]


def detect(
    paired: PairedFrameSet,
    params: DetectorParams,
    trace: dict | None = None,
) -> list[Detection]:
    """Run the full detection pipeline on one paired frame set.

    Deterministic; returns detections sorted by descending confidence
    (stable for ties).  ``trace``, when given, records the branch used per
    candidate cluster for dispatch diagnostics.
    """
    bev = radar_to_bev(paired.radar, params.bev_cell, params.bev_half_extent)
    pts = paired.lidar.points[:, :2]
    times = paired.lidar.points[:, ConcatLidarFrame.COL_T]
    clusters = cluster_points(pts, params.cell_size, params.min_points)
    if trace is not None:
        trace["mode"] = params.compensation_mode
        trace["branch_offsets"] = []

    branch = _select_branch(params, paired.offset)
    history_centers = [
        (h.t_end_ns / NS_PER_S, _concat_box_centers(h, params)) for h, _ in paired.history
    ]

    p_l = paired.lidar_period_ns / NS_PER_S
    t_trigger = paired.lidar.t_end_ns / NS_PER_S
    out: list[Detection] = []
    for idx in clusters:
        cpts = pts[idx]
        try:
            box_obs = complete_box_with_prior(_fit_cluster_box(cpts, params), params)
        except DegenerateGeometryError:
            continue
        lidar_score = min(1.0, idx.size / params.lidar_score_points)
        center_obs = np.array([box_obs.cx, box_obs.cy])
        vel, _ = _estimate_velocity(paired, center_obs, params, history_centers)

        # deskew: cluster points were captured at different instants of a
        # moving target; shift each to trigger time before the final fit
        dsk = cpts + np.asarray(vel)[None, :] * (t_trigger - times[idx])[:, None]
        try:
            box_out = complete_box_with_prior(_fit_cluster_box(dsk, params), params)
        except DegenerateGeometryError:
            continue

        if branch is None:
            w_r = params.radar_weight
            radius = params.search_radius
            disp = (0.0, 0.0)
        else:
            w_r = branch.radar_weight
            radius = branch.search_radius
            gap = branch.design_offset * p_l
            disp = (branch.scale_x * vel[0] * gap, branch.scale_y * vel[1] * gap)
        if trace is not None:
            trace["branch_offsets"].append(None if branch is None else branch.design_offset)

        # radar evidence lives at the target's position when the (stale)
        # radar sweep captured it: the observed position minus the
        # compensated travel; the cluster's outline centroid anchors the
        # expected blob location
        anchor = (float(cpts[:, 0].mean()), float(cpts[:, 1].mean()))
        conf_score, mass, (mx, my) = _radar_evidence(
            box_obs, anchor, bev, disp, radius, params
        )
        cx, cy = box_out.cx, box_out.cy
        if mass >= params.min_blob_mass:
            # drag the output toward where the radar says the target is
            cx += params.refine_weight * ((mx + disp[0]) - anchor[0])
            cy += params.refine_weight * ((my + disp[1]) - anchor[1])
        box_final = OrientedBoxBEV(cx, cy, box_out.length, box_out.width, box_out.yaw)

        confidence = (1.0 - w_r) * lidar_score + w_r * conf_score
        confidence = min(1.0, max(0.0, confidence))
        if confidence < params.min_confidence:
            continue
        out.append(Detection(box=box_final, confidence=confidence))

    out.sort(key=lambda d: -d.confidence)
    return out


# ---------------------------------------------------------------------------
# Calibration.


DEFAULT_GRID = {
    "radar_weight": (0.2, 0.4, 0.6),
    "search_radius": (0.75, 1.0, 1.5),
    "scale": (0.0, 0.5, 1.0, 1.25),
}


@dataclass(frozen=True)
class TrainingStream:
    """Labeled fusion windows that realize one offset value."""

    offset: int
    windows: tuple[tuple[PairedFrameSet, tuple[OrientedBoxBEV, ...]], ...]


def _objective(
    windows, params: DetectorParams, iou_thresholds=(0.5, 0.65, 0.8)
) -> float:
    from . import evaluation  # late import; evaluation depends on this module

    frames = [(detect(p, params), list(gts)) for p, gts in windows]
    total = 0.0
    for thr in iou_thresholds:
        total += evaluation.average_precision(frames, thr).ap
    return total / len(iou_thresholds)


def calibrate(
    streams: list[TrainingStream],
    mode: str,
    base: DetectorParams | None = None,
    grid: dict | None = None,
) -> DetectorParams:
    """Grid-search the radar-fusion stage against labeled streams.

    ``per_offset`` fits one branch per offset value (the shared low-level
    stage comes from ``base`` and is common to all branches); ``mixed`` fits
    a single branch on all streams pooled.  Ties break toward the lowest
    radar weight, then the smallest search radius, then the smallest scale.

    Returns ``(params, objective_table)`` where the table maps each branch
    key (or ``"pooled"``) to its best objective value.
    """
    if mode not in ("per_offset", "mixed"):
        raise ParameterError(f"calibration mode must be per_offset or mixed, got {mode!r}")
    if not streams or all(not s.windows for s in streams):
        raise CalibrationError("no training windows supplied")
    base = base or DetectorParams()
    grid = grid or DEFAULT_GRID
    candidates = list(
        itertools.product(grid["radar_weight"], grid["search_radius"], grid["scale"])
    )

    def best_branch(windows, design_offset: int) -> tuple[BranchParams, float]:
        best = None
        for w_r, radius, scale in candidates:
            branch = BranchParams(
                radar_weight=w_r,
                search_radius=radius,
                scale_x=scale,
                scale_y=scale,
                design_offset=design_offset,
            )
            trial = replace(
                base,
                compensation_mode="per_offset",
                branches={design_offset: branch},
            )
            score = _objective(windows, trial)
            key = (-score, w_r, radius, scale)
            if best is None or key < best[0]:
                best = (key, branch, score)
        return best[1], best[2]

    if mode == "per_offset":
        branches: dict[int, BranchParams] = {}
        scores: dict[int, float] = {}
        for stream in sorted(streams, key=lambda s: s.offset):
            if not stream.windows:
                raise CalibrationError(f"offset {stream.offset} has no training windows")
            branch, score = best_branch(stream.windows, stream.offset)
            branches[stream.offset] = branch
            scores[stream.offset] = score
        out = replace(base, compensation_mode="per_offset", branches=branches, mixed_branch=None)
        return out, scores

    pooled = tuple(w for s in streams for w in s.windows)
    best = None
    for w_r, radius, scale in candidates:
        branch = BranchParams(
            radar_weight=w_r, search_radius=radius, scale_x=scale, scale_y=scale, design_offset=0
        )
        trial = replace(base, compensation_mode="mixed", mixed_branch=branch, branches={})
        score = _objective(pooled, trial)
        key = (-score, w_r, radius, scale)
        if best is None or key < best[0]:
            best = (key, branch, score)
    out = replace(base, compensation_mode="mixed", mixed_branch=best[1], branches={})
    return out, {"pooled": best[2]}


# ---------------------------------------------------------------------------
# Serialization.


def _branch_to_dict(b: BranchParams) -> dict:
    return {
        "radar_weight": b.radar_weight,
        "search_radius": b.search_radius,
        "scale_x": b.scale_x,
        "scale_y": b.scale_y,
        "design_offset": b.design_offset,
    }


def _branch_from_dict(d: dict) -> BranchParams:
    return BranchParams(
        radar_weight=float(d["radar_weight"]),
        search_radius=float(d["search_radius"]),
        scale_x=float(d["scale_x"]),
        scale_y=float(d["scale_y"]),
        design_offset=int(d["design_offset"]),
    )


def params_to_dict(params: DetectorParams) -> dict:
    doc: dict = {"schema_version": PARAMS_SCHEMA_VERSION}
    for f in fields(DetectorParams):
        value = getattr(params, f.name)
        if f.name == "branches":
            doc[f.name] = {str(k): _branch_to_dict(v) for k, v in sorted(value.items())}
        elif f.name == "mixed_branch":
            doc[f.name] = None if value is None else _branch_to_dict(value)
        else:
            doc[f.name] = value
    return doc


def params_from_dict(doc: dict) -> DetectorParams:
    kwargs = {}
    for f in fields(DetectorParams):
        if f.name not in doc:
            continue
        value = doc[f.name]
        if f.name == "branches":
            value = {int(k): _branch_from_dict(v) for k, v in value.items()}
        elif f.name == "mixed_branch":
            value = None if value is None else _branch_from_dict(value)
        kwargs[f.name] = value
    return DetectorParams(**kwargs)


def save_params(params: DetectorParams, path, metadata: dict | None = None) -> None:
    doc = params_to_dict(params)
    if metadata:
        doc["metadata"] = metadata
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(doc, fh, indent=2, sort_keys=True)
        fh.write("\n")


def load_params(path) -> DetectorParams:
    with open(path, "r", encoding="utf-8") as fh:
        return params_from_dict(json.load(fh))
