"""Driving-quality scoring for planned trajectories.

Five sub-scores per trajectory: collision-free (nc), drivable-area
compliance (dac), projected time-to-collision (ttc), comfort bounds on
finite-difference dynamics, and route progress (ep) against a reference.
The composite score gates everything behind nc and dac and mixes the rest
with fixed weights. A collision also zeroes ttc, so near-miss and contact
failures share one axis.
"""

from __future__ import annotations

import json
import math
import os
from dataclasses import dataclass

import numpy as np
from shapely.geometry import LineString, Point
from shapely.prepared import prep

from .errors import DomainError
from .kinematics import Trajectory, express_in_frame
from .world import Scene, expert_rollout


@dataclass(frozen=True)
class OrientedBox:
    """Rectangle at (cx, cy), rotated by heading, with full extents."""

    cx: float
    cy: float
    heading: float
    length: float
    width: float

    def __post_init__(self):
        if self.length <= 0.0 or self.width <= 0.0:
            raise DomainError(f"box extents must be positive: {self.length}x{self.width}")

    def corners(self) -> np.ndarray:
        c, s = math.cos(self.heading), math.sin(self.heading)
        hl, hw = self.length / 2.0, self.width / 2.0
        local = np.array([[hl, hw], [hl, -hw], [-hl, -hw], [-hl, hw]])
        rot = np.array([[c, -s], [s, c]])
        return local @ rot.T + np.array([self.cx, self.cy])


@dataclass(frozen=True)
class SubScores:
    """Per-trajectory sub-metric outcomes; binaries are 0/1 integers."""

    nc: int
    dac: int
    ttc: int
    comfort: int
    ep: float


@dataclass(frozen=True)
class MetricConfig:
    weight_ttc: float = 5.0
    weight_comfort: float = 2.0
    weight_ep: float = 5.0
    divisor: float = 12.0
    ttc_horizon: float = 1.0
    max_abs_accel: float = 4.5
    max_abs_jerk: float = 8.0
    max_abs_yaw_rate: float = 0.95
    max_abs_yaw_accel: float = 1.9
    ego_length: float = 4.6
    ego_width: float = 1.8

    def __post_init__(self):
        if min(self.weight_ttc, self.weight_comfort, self.weight_ep) <= 0.0:
            raise DomainError("sub-score weights must be positive")
        total = self.weight_ttc + self.weight_comfort + self.weight_ep
        if abs(self.divisor - total) > 1e-12:
            raise DomainError(
                f"divisor {self.divisor} must equal the weight sum {total}"
            )
        if self.ttc_horizon <= 0.0 or self.ego_length <= 0.0 or self.ego_width <= 0.0:
            raise DomainError("horizon and ego footprint must be positive")


def obb_overlap(a: OrientedBox, b: OrientedBox, tol: float = 1e-9) -> bool:
    """Closed-set rectangle overlap by the separating-axis test.

    Boundary contact within ``tol`` counts as overlap; a separating axis
    must open a gap strictly wider than ``tol``.
    """
    d = np.array([b.cx - a.cx, b.cy - a.cy])
    for heading in (a.heading, b.heading):
        c, s = math.cos(heading), math.sin(heading)
        for axis in (np.array([c, s]), np.array([-s, c])):
            ra = _projected_radius(a, axis)
            rb = _projected_radius(b, axis)
            if abs(float(d @ axis)) > ra + rb + tol:
                return False
    return True


def _projected_radius(box: OrientedBox, axis: np.ndarray) -> float:
    c, s = math.cos(box.heading), math.sin(box.heading)
    u = np.array([c, s])
    v = np.array([-s, c])
    return (box.length / 2.0) * abs(float(axis @ u)) \
        + (box.width / 2.0) * abs(float(axis @ v))


def _wrap_angle(d: float) -> float:
    return (d + math.pi) % (2.0 * math.pi) - math.pi


def _agent_box(track, k: int) -> OrientedBox:
    j = min(k, track.poses.shape[0] - 1)
    x, y, heading = track.poses[j]
    return OrientedBox(float(x), float(y), float(heading), track.length, track.width)


def _collides(ego_boxes, ego_speeds, scene: Scene, taus=None,
              dt: float = 0.5) -> bool:
    """Overlap at any step, optionally after constant-velocity projection."""
    for k, ego in enumerate(ego_boxes):
        for track in scene.agents:
            agent = _agent_box(track, k)
            if taus is None:
                if obb_overlap(ego, agent):
                    return True
                continue
            vx, vy = track.velocity(k, dt)
            ec, es = math.cos(ego.heading), math.sin(ego.heading)
            speed = ego_speeds[k]
            for tau in taus:
                ego_p = OrientedBox(
                    ego.cx + speed * ec * tau, ego.cy + speed * es * tau,
                    ego.heading, ego.length, ego.width,
                )
                agent_p = OrientedBox(
                    agent.cx + vx * tau, agent.cy + vy * tau,
                    agent.heading, agent.length, agent.width,
                )
                if obb_overlap(ego_p, agent_p):
                    return True
    return False


def score_trajectory(traj: Trajectory, scene: Scene,
                     cfg: MetricConfig = MetricConfig(),
                     ref_progress: float | None = None) -> SubScores:
    """Score a planning-frame trajectory against its scene.

    The trajectory starts at the origin of the scene's initial ego pose and
    is lifted into world coordinates here. ``ref_progress`` supplies the
    reference arc-length for the progress ratio; when omitted it is taken
    from a fresh expert rollout on the scene.
    """
    world_traj = express_in_frame(traj, scene.ego_init)
    states = world_traj.states
    for track in scene.agents:
        if track.poses.shape[0] < len(states):
            raise DomainError(
                f"agent track has {track.poses.shape[0]} poses for "
                f"{len(states)} trajectory states"
            )

    ego_boxes = [OrientedBox(s.x, s.y, s.theta, cfg.ego_length, cfg.ego_width)
                 for s in states]
    ego_speeds = [s.v for s in states]

    nc = 0 if _collides(ego_boxes, ego_speeds, scene) else 1

    poly = scene.corridor_polygon()
    prepared = prep(poly)
    dac = 1
    for box in ego_boxes:
        if not all(prepared.covers(Point(px, py)) for px, py in box.corners()):
            dac = 0
            break

    if nc == 0:
        ttc = 0
    else:
        n_tau = max(int(round(cfg.ttc_horizon / traj.dt)), 1)
        taus = [traj.dt * (i + 1) for i in range(n_tau)]
        ttc = 0 if _collides(ego_boxes, ego_speeds, scene,
                             taus=taus, dt=traj.dt) else 1

    comfort = 1
    v = np.array([s.v for s in states])
    theta = np.array([s.theta for s in states])
    accel = np.diff(v) / traj.dt
    yaw_rate = np.array([_wrap_angle(d) for d in np.diff(theta)]) / traj.dt
    jerk = np.diff(accel) / traj.dt
    yaw_accel = np.diff(yaw_rate) / traj.dt
    if (np.any(np.abs(accel) > cfg.max_abs_accel)
            or np.any(np.abs(jerk) > cfg.max_abs_jerk)
            or np.any(np.abs(yaw_rate) > cfg.max_abs_yaw_rate)
            or np.any(np.abs(yaw_accel) > cfg.max_abs_yaw_accel)):
        comfort = 0

    if ref_progress is None:
        expert = express_in_frame(
            expert_rollout(scene, traj.dt, len(states) - 1), scene.ego_init
        )
        ref_progress = _progress(expert.states, scene)
    progress = _progress(states, scene)
    if ref_progress < 0.1:
        ep = 1.0
    else:
        ep = min(max(progress / ref_progress, 0.0), 1.0)

    return SubScores(nc=nc, dac=dac, ttc=ttc, comfort=comfort, ep=ep)


def _progress(states, scene: Scene) -> float:
    line = LineString(scene.centerline)
    s0 = line.project(Point(states[0].x, states[0].y))
    s1 = line.project(Point(states[-1].x, states[-1].y))
    return float(s1 - s0)


def reference_progress(scene: Scene, dt: float = 0.5, T: int = 8) -> float:
    """Expert arc-length progress, for scoring many trajectories per scene."""
    expert = express_in_frame(expert_rollout(scene, dt, T), scene.ego_init)
    return _progress(expert.states, scene)


def pdms(sub: SubScores, cfg: MetricConfig = MetricConfig()) -> float:
    """Composite driving score in [0, 1]."""
    for name in ("nc", "dac", "ttc", "comfort"):
        if getattr(sub, name) not in (0, 1):
            raise DomainError(f"{name} must be 0 or 1, got {getattr(sub, name)!r}")
    if not 0.0 <= sub.ep <= 1.0:
        raise DomainError(f"ep must lie in [0, 1], got {sub.ep!r}")
    mix = (cfg.weight_ttc * sub.ttc + cfg.weight_comfort * sub.comfort
           + cfg.weight_ep * sub.ep) / cfg.divisor
    return sub.nc * sub.dac * mix


# ---------------------------------------------------------------------------
# Evaluation report files


EVAL_HEADER = "scene_id,nc,dac,ttc,comfort,ep,pdms"


def save_eval_csv(path, rows) -> None:
    """Write (scene_id, SubScores, pdms) rows; floats roundtrip exactly."""
    tmp = str(path) + ".tmp"
    with open(tmp, "w") as fh:
        fh.write(EVAL_HEADER + "\n")
        for scene_id, sub, score in rows:
            fh.write(f"{scene_id},{sub.nc},{sub.dac},{sub.ttc},{sub.comfort},"
                     f"{sub.ep:.17g},{score:.17g}\n")
    os.replace(tmp, path)


def load_eval_csv(path) -> list[tuple[str, SubScores, float]]:
    rows = []
    with open(path) as fh:
        header = fh.readline().strip()
        if header != EVAL_HEADER:
            raise DomainError(f"unexpected eval header in {path}: {header!r}")
        for line in fh:
            sid, nc, dac, ttc, comfort, ep, score = line.strip().split(",")
            rows.append((sid, SubScores(int(nc), int(dac), int(ttc),
                                        int(comfort), float(ep)), float(score)))
    return rows


def summarize_eval(rows) -> dict:
    """Corpus means of every sub-score and the composite, scaled to 0-100."""
    if not rows:
        raise DomainError("cannot summarize an empty evaluation")
    out = {"count": len(rows)}
    for name in ("nc", "dac", "ttc", "comfort", "ep"):
        out[name] = 100.0 * float(np.mean([getattr(sub, name) for _, sub, _ in rows]))
    out["pdms"] = 100.0 * float(np.mean([score for _, _, score in rows]))
    return out


def save_summary_json(path, summary: dict) -> None:
    tmp = str(path) + ".tmp"
    with open(tmp, "w") as fh:
        json.dump(summary, fh, indent=2, sort_keys=True)
        fh.write("\n")
    os.replace(tmp, path)
