"""Synthetic bird's-eye-view world: moving vehicles with closed-form ground truth.

The ego sensor pair sits at the origin and never moves.  Vehicle centers
translate with constant velocity and headings rotate at a constant rate, so
ground truth at any timestamp is exact (no integration).
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field

import numpy as np

from . import geometry
from .errors import GenerationError, TimeRangeError

SCENARIO_SCHEMA_VERSION = 1


@dataclass(frozen=True)
class OrientedBoxBEV:
    """Oriented rectangle in the BEV plane; yaw is the heading of the length axis."""

    cx: float
    cy: float
    length: float
    width: float
    yaw: float

    def __post_init__(self) -> None:
        if self.length <= 0 or self.width <= 0:
            raise ValueError("box dimensions must be positive")

    @property
    def area(self) -> float:
        return self.length * self.width

    def corners(self) -> np.ndarray:
        """Counter-clockwise corners, shape (4, 2)."""
        return geometry.box_corners(self.cx, self.cy, self.length, self.width, self.yaw)

    def contains(self, points: np.ndarray, pad: float = 0.0) -> np.ndarray:
        return geometry.points_in_box(
            points, self.cx, self.cy, self.length, self.width, self.yaw, pad=pad
        )


@dataclass(frozen=True)
class VehicleTrack:
    track_id: int
    box: OrientedBoxBEV
    velocity: tuple[float, float]
    yaw_rate: float = 0.0

    def box_at(self, t: float) -> OrientedBoxBEV:
        return OrientedBoxBEV(
            cx=self.box.cx + self.velocity[0] * t,
            cy=self.box.cy + self.velocity[1] * t,
            length=self.box.length,
            width=self.box.width,
            yaw=geometry.wrap_angle(self.box.yaw + self.yaw_rate * t),
        )


@dataclass(frozen=True)
class Scenario:
    duration: float
    bounds: float  # square half-extent in meters, sensor at (0, 0)
    seed: int
    vehicles: tuple[VehicleTrack, ...] = field(default_factory=tuple)

    def __post_init__(self) -> None:
        if self.duration <= 0:
            raise ValueError("duration must be positive")
        if self.bounds <= 0:
            raise ValueError("bounds must be positive")


def ground_truth_at(scenario: Scenario, t: float) -> list[OrientedBoxBEV]:
    """Exact vehicle boxes at time ``t`` within the scenario window."""
    if t < 0.0 or t > scenario.duration:
        raise TimeRangeError(f"t={t} outside [0, {scenario.duration}]")
    return [v.box_at(t) for v in scenario.vehicles]


@dataclass(frozen=True)
class GeneratorConfig:
    """Sampling ranges for random scenarios.

    ``min_start_range`` keeps vehicles (and their whole paths) away from the
    sensor origin; ``min_separation`` is the minimum center-to-center
    distance maintained between any two vehicles over the full duration.
    """

    duration: float = 4.0
    bounds: float = 40.0
    n_vehicles: tuple[int, int] = (4, 7)
    speed: tuple[float, float] = (5.0, 15.0)
    length: tuple[float, float] = (4.2, 4.8)
    width: tuple[float, float] = (1.8, 2.2)
    yaw_rate: tuple[float, float] = (0.0, 0.0)
    min_start_range: float = 8.0
    min_separation: float = 6.0
    edge_margin: float = 3.0
    max_retries: int = 300


def _linear_min_distance(p0: np.ndarray, v: np.ndarray, horizon: float) -> float:
    """Minimum of |p0 + v t| over t in [0, horizon]."""
    vv = float(v @ v)
    if vv == 0.0:
        return float(np.hypot(*p0))
    t_star = min(max(-float(p0 @ v) / vv, 0.0), horizon)
    closest = p0 + v * t_star
    return float(np.hypot(*closest))


def random_scenario(config: GeneratorConfig, seed: int) -> Scenario:
    """Deterministic scenario sampler; same (config, seed) gives the same world.

    Vehicles are placed sequentially with rejection: each candidate must stay
    inside the bounds for the whole duration, keep its path away from the
    origin, and keep ``min_separation`` from every already-placed vehicle at
    all times (centers move linearly, so pairwise distance is a closed form).
    """
    rng = np.random.default_rng(np.random.SeedSequence([0x5CE4E, seed]))
    n = int(rng.integers(config.n_vehicles[0], config.n_vehicles[1] + 1))
    placed: list[VehicleTrack] = []
    inner = config.bounds - config.edge_margin
    for track_id in range(n):
        ok = False
        for _ in range(config.max_retries):
            pos = rng.uniform(-inner, inner, size=2)
            speed = rng.uniform(*config.speed)
            heading = rng.uniform(-math.pi, math.pi)
            vel = np.array([speed * math.cos(heading), speed * math.sin(heading)])
            yaw_rate = rng.uniform(*config.yaw_rate)
            end = pos + vel * config.duration
            if np.any(np.abs(end) > inner):
                continue
            if _linear_min_distance(pos, vel, config.duration) < config.min_start_range:
                continue
            clear = True
            for other in placed:
                rel_p = pos - np.array([other.box.cx, other.box.cy])
                rel_v = vel - np.asarray(other.velocity)
                if _linear_min_distance(rel_p, rel_v, config.duration) < config.min_separation:
                    clear = False
                    break
            if not clear:
                continue
            box = OrientedBoxBEV(
                cx=float(pos[0]),
                cy=float(pos[1]),
                length=float(rng.uniform(*config.length)),
                width=float(rng.uniform(*config.width)),
                yaw=geometry.wrap_angle(heading),
            )
            placed.append(
                VehicleTrack(
                    track_id=track_id,
                    box=box,
                    velocity=(float(vel[0]), float(vel[1])),
                    yaw_rate=float(yaw_rate),
                )
            )
            ok = True
            break
        if not ok:
            raise GenerationError(
                f"could not place vehicle {track_id} after {config.max_retries} retries"
            )
    return Scenario(
        duration=config.duration, bounds=config.bounds, seed=seed, vehicles=tuple(placed)
    )


def scenario_to_dict(scenario: Scenario) -> dict:
    return {
        "schema_version": SCENARIO_SCHEMA_VERSION,
        "duration": scenario.duration,
        "bounds": scenario.bounds,
        "seed": scenario.seed,
        "vehicles": [
            {
                "id": v.track_id,
                "center": [v.box.cx, v.box.cy],
                "size": [v.box.length, v.box.width],
                "yaw": v.box.yaw,
                "velocity": list(v.velocity),
                "yaw_rate": v.yaw_rate,
            }
            for v in scenario.vehicles
        ],
    }


def scenario_from_dict(doc: dict) -> Scenario:
    vehicles = tuple(
        VehicleTrack(
            track_id=int(v["id"]),
            box=OrientedBoxBEV(
                cx=float(v["center"][0]),
                cy=float(v["center"][1]),
                length=float(v["size"][0]),
                width=float(v["size"][1]),
                yaw=float(v["yaw"]),
            ),
            velocity=(float(v["velocity"][0]), float(v["velocity"][1])),
            yaw_rate=float(v["yaw_rate"]),
        )
        for v in doc["vehicles"]
    )
    return Scenario(
        duration=float(doc["duration"]),
        bounds=float(doc["bounds"]),
        seed=int(doc["seed"]),
        vehicles=vehicles,
    )


def save_scenario(scenario: Scenario, path, metadata: dict | None = None) -> None:
    doc = scenario_to_dict(scenario)
    if metadata:
        doc["metadata"] = metadata
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(doc, fh, indent=2, sort_keys=True)
        fh.write("\n")


def load_scenario(path) -> Scenario:
    with open(path, "r", encoding="utf-8") as fh:
        return scenario_from_dict(json.load(fh))
