"""Seeded 2D driving scenes and the scripted expert that produces
ground-truth trajectories.

A scene is a route centerline inside a drivable corridor polygon, a few
scripted box agents, a discrete route command, and an initial ego state,
all expressed in world coordinates with a randomized global pose so that
nothing downstream can rely on axis alignment. Seven scenario kinds cover
straight and curved lane keeping, 90-degree turns, obstacle bypass and
nudge maneuvers, and lead-vehicle following.

The expert combines pure-pursuit steering with a proportional speed
controller (braking-distance and time-gap caps against blocking agents).
Its per-step controls are clamped and rate-limited inside the action
vocabulary and the comfort envelope, so every emitted trajectory passes the
range filter by construction. Trajectories are returned in the ego's
initial frame; waypoint 0 is the origin.
"""

from __future__ import annotations

import json
import math
import os
from dataclasses import dataclass, field
from typing import Iterable, Sequence

import numpy as np
from shapely.geometry import LineString, Point, Polygon
from shapely.prepared import prep

from . import rng as rng_mod
from .errors import DomainError, ExpertFailure
from .kinematics import EgoState, KinematicAction, Trajectory, advance, rollout

KINDS = (
    "STRAIGHT",
    "CURVE_KEEP",
    "LEFT_TURN",
    "RIGHT_TURN",
    "BYPASS",
    "NUDGE",
    "LEAD_FOLLOW",
)
COMMANDS = ("LEFT", "STRAIGHT", "RIGHT")

SCENE_SCHEMA_VERSION = 1

# Ego footprint shared with the metric suite (meters).
EGO_LENGTH = 4.6
EGO_WIDTH = 1.8


@dataclass(frozen=True)
class WorldConfig:
    T: int = 8
    dt: float = 0.5
    n_map: int = 16
    width_range: tuple[float, float] = (3.5, 7.0)
    placement_range: float = 200.0


@dataclass(frozen=True)
class AgentTrack:
    length: float
    width: float
    poses: np.ndarray  # [n_steps+1, 3] of (x, y, heading), world frame

    def velocity(self, k: int, dt: float) -> tuple[float, float]:
        """World-frame velocity at step k from pose differences."""
        n = self.poses.shape[0]
        if n < 2:
            return 0.0, 0.0
        j = min(k, n - 2)
        return (
            float((self.poses[j + 1, 0] - self.poses[j, 0]) / dt),
            float((self.poses[j + 1, 1] - self.poses[j, 1]) / dt),
        )


@dataclass(frozen=True)
class Scene:
    centerline: np.ndarray  # [M, 2] world frame, starts at the ego
    corridor: np.ndarray  # [K, 2] polygon ring, world frame
    agents: tuple[AgentTrack, ...]
    command: str
    ego_init: EgoState
    target_speed: float
    seed: int
    kind: str

    def corridor_polygon(self) -> Polygon:
        poly = Polygon(self.corridor)
        if not poly.is_valid:
            raise DomainError(f"degenerate corridor polygon (seed={self.seed}, kind={self.kind})")
        return poly


@dataclass(frozen=True)
class TokenBundle:
    """Ego-frame planner inputs: env tokens, command one-hot, ego features."""

    env: np.ndarray  # [n_tokens, 11]
    command: np.ndarray  # [3]
    ego: np.ndarray  # [5]: (v, theta-in-own-frame, prev_accel, prev_yaw_rate,
    #                        route target speed)


ENV_FEATURE_DIM = 11
EGO_FEATURE_DIM = 5


def _smoothstep(u: np.ndarray) -> np.ndarray:
    u = np.clip(u, 0.0, 1.0)
    return u * u * (3.0 - 2.0 * u)


def _resample(points: np.ndarray, spacing: float = 0.5) -> np.ndarray:
    """Even arc-length resampling of a polyline."""
    line = LineString(points)
    n = max(int(line.length / spacing), 2)
    s = np.linspace(0.0, line.length, n + 1)
    return np.array([[line.interpolate(si).x, line.interpolate(si).y] for si in s])


def _offset_path(base: np.ndarray, offsets: np.ndarray) -> np.ndarray:
    """Shift each base point laterally (left-positive) by its offset."""
    d = np.gradient(base, axis=0)
    norms = np.hypot(d[:, 0], d[:, 1])
    normal = np.stack([-d[:, 1] / norms, d[:, 0] / norms], axis=1)
    return base + normal * offsets[:, None]


def _rigid(points: np.ndarray, pose: tuple[float, float, float]) -> np.ndarray:
    tx, ty, th = pose
    c, s = math.cos(th), math.sin(th)
    rot = np.array([[c, -s], [s, c]])
    return points @ rot.T + np.array([tx, ty])


class _SceneBuild:
    """Mutable construction-frame pieces before global placement."""

    def __init__(self) -> None:
        self.base: np.ndarray | None = None  # road center, defines the corridor
        self.centerline: np.ndarray | None = None  # route to follow
        self.width: float = 5.0
        self.agents: list[tuple[float, float, np.ndarray]] = []
        self.command: str = "STRAIGHT"
        self.target_speed: float = 5.0
        self.v0: float | None = None  # None: drawn as a fraction of target


def _straight_base(length: float, back: float = 6.0) -> np.ndarray:
    xs = np.arange(-back, length + 6.0 + 0.25, 0.5)
    return np.stack([xs, np.zeros_like(xs)], axis=1)


def _arc_base(radius: float, sign: float, arc_len: float, back: float = 6.0) -> np.ndarray:
    """Tangent-at-origin circular arc (heading +x), prefixed by a straight tail."""
    tail = np.stack([np.arange(-back, 0.0, 0.5), np.zeros(len(np.arange(-back, 0.0, 0.5)))], axis=1)
    s = np.arange(0.0, arc_len + 0.25, 0.5)
    phi = s / radius
    x = radius * np.sin(phi)
    y = sign * radius * (1.0 - np.cos(phi))
    return np.concatenate([tail, np.stack([x, y], axis=1)], axis=0)


def _stationary_agent(x: float, y: float, heading: float, length: float, width: float, n: int) -> tuple:
    poses = np.tile(np.array([x, y, heading]), (n, 1))
    return (length, width, poses)


def _moving_agent(x: float, y: float, heading: float, speed: float, length: float, width: float,
                  n: int, dt: float) -> tuple:
    k = np.arange(n)[:, None]
    step = np.array([math.cos(heading), math.sin(heading)]) * speed * dt
    xy = np.array([x, y]) + k * step
    poses = np.concatenate([xy, np.full((n, 1), heading)], axis=1)
    return (length, width, poses)


def _build_straight(r: np.random.Generator, cfg: WorldConfig, build: _SceneBuild) -> None:
    build.width = float(r.uniform(*cfg.width_range))
    build.target_speed = float(r.uniform(5.0, 13.0))
    length = build.target_speed * cfg.dt * cfg.T + 30.0
    build.base = _straight_base(length)
    build.centerline = build.base.copy()
    n_poses = cfg.T + 2
    # Side traffic strictly outside the corridor; it never interferes.
    for _ in range(int(r.integers(0, 3))):
        side = float(r.choice([-1.0, 1.0]))
        lat = side * (build.width / 2.0 + 1.6 + float(r.uniform(0.0, 2.5)))
        x0 = float(r.uniform(-5.0, 35.0))
        speed = float(r.uniform(0.0, 15.0))
        build.agents.append(
            _moving_agent(x0, lat, 0.0, speed, float(r.uniform(4.2, 5.2)),
                          float(r.uniform(1.7, 2.1)), n_poses, cfg.dt)
        )


def _build_curve(r: np.random.Generator, cfg: WorldConfig, build: _SceneBuild) -> None:
    build.width = float(r.uniform(*cfg.width_range))
    radius = float(r.uniform(25.0, 80.0))
    sign = float(r.choice([-1.0, 1.0]))
    build.target_speed = float(
        min(r.uniform(4.0, 12.0), math.sqrt(2.0 * radius), 0.76 * radius)
    )
    arc_len = build.target_speed * cfg.dt * cfg.T + 30.0
    build.base = _arc_base(radius, sign, arc_len)
    build.centerline = build.base.copy()
    n_poses = cfg.T + 2
    for _ in range(int(r.integers(0, 3))):
        # Parked on the outer side only; straight-line motion on the inner
        # side could cut into a curved corridor.
        idx = int(r.integers(len(build.base) // 3, len(build.base) - 2))
        p = build.base[idx]
        d = build.base[idx + 1] - build.base[idx]
        heading = math.atan2(d[1], d[0])
        normal = np.array([-math.sin(heading), math.cos(heading)])
        outer = -sign
        lat = build.width / 2.0 + 1.6 + float(r.uniform(0.0, 2.0))
        pos = p + normal * outer * lat
        build.agents.append(
            _stationary_agent(float(pos[0]), float(pos[1]), heading,
                              float(r.uniform(4.2, 5.2)), float(r.uniform(1.7, 2.1)), n_poses)
        )


def _build_turn(r: np.random.Generator, cfg: WorldConfig, build: _SceneBuild, sign: float) -> None:
    build.width = float(r.uniform(4.0, cfg.width_range[1]))
    radius = float(r.uniform(8.0, 15.0))
    approach = float(r.uniform(10.0, 18.0))
    exit_len = float(r.uniform(15.0, 25.0))
    build.target_speed = float(min(r.uniform(3.5, 7.0), math.sqrt(2.0 * radius), 0.76 * radius))
    xs = np.arange(-6.0, approach, 0.5)
    tail = np.stack([xs, np.zeros_like(xs)], axis=1)
    s = np.arange(0.0, radius * math.pi / 2.0 + 0.25, 0.5)
    phi = s / radius
    arc = np.stack(
        [approach + radius * np.sin(phi), sign * radius * (1.0 - np.cos(phi))], axis=1
    )
    s2 = np.arange(0.5, exit_len, 0.5)
    end_heading = sign * math.pi / 2.0
    exit_seg = arc[-1] + np.stack(
        [np.cos(end_heading) * s2, np.sin(end_heading) * s2], axis=1
    )
    build.base = np.concatenate([tail, arc, exit_seg], axis=0)
    build.centerline = build.base.copy()
    build.command = "LEFT" if sign > 0 else "RIGHT"
    n_poses = cfg.T + 2
    if r.uniform() < 0.5:
        # One parked car beyond the outer edge of the turn corner.
        lat = build.width / 2.0 + 2.0 + float(r.uniform(0.0, 1.5))
        build.agents.append(
            _stationary_agent(approach + float(r.uniform(2.0, radius)), -sign * lat, 0.0,
                              float(r.uniform(4.2, 5.2)), float(r.uniform(1.7, 2.1)), n_poses)
        )


def _build_obstacle_route(
    r: np.random.Generator, cfg: WorldConfig, build: _SceneBuild, intrusion_range: tuple[float, float],
    min_width: float
) -> None:
    """Shared geometry for BYPASS and NUDGE: a parked vehicle intrudes into
    the corridor and the route jogs around it."""
    build.width = float(r.uniform(min_width, cfg.width_range[1]))
    build.target_speed = float(r.uniform(4.0, 6.5))
    length = build.target_speed * cfg.dt * cfg.T + 30.0
    build.base = _straight_base(length)
    intr = float(r.uniform(*intrusion_range))
    side = float(r.choice([-1.0, 1.0]))
    agent_w = float(r.uniform(1.7, 2.1))
    agent_l = float(r.uniform(4.2, 5.2))
    s_obs = float(r.uniform(16.0, min(26.0, length - 10.0)))
    agent_lat = side * (build.width / 2.0 + agent_w / 2.0 - intr)
    n_poses = cfg.T + 2
    build.agents.append(
        _stationary_agent(s_obs, agent_lat, 0.0, agent_l, agent_w, n_poses)
    )
    # Lateral jog: clear the intruding car by >= 0.4 m while keeping 1.5 m
    # of corridor clearance on the far side.
    need = intr + 0.4 + EGO_WIDTH / 2.0 - build.width / 2.0
    o_cap = build.width / 2.0 - 1.55
    o_mag = float(np.clip(max(need + 0.15, 0.25), 0.25, o_cap))
    xs = build.base[:, 0]
    ramp_in = _smoothstep((xs - (s_obs - 14.0)) / 8.0)
    ramp_out = _smoothstep(((s_obs + 8.0) - xs) / 8.0)
    offsets = -side * o_mag * np.minimum(ramp_in, ramp_out)
    build.centerline = _offset_path(build.base, offsets)


def _build_lead_follow(r: np.random.Generator, cfg: WorldConfig, build: _SceneBuild) -> None:
    build.width = float(r.uniform(3.5, 6.0))
    parked = bool(r.uniform() < 0.5)
    agent_l = float(r.uniform(4.2, 5.2))
    half_gap = agent_l / 2.0 + EGO_LENGTH / 2.0
    n_poses = cfg.T + 2
    if parked:
        # The gap is sized to the approach speed so the ego both reaches the
        # lead and finishes stopping within the horizon.
        build.target_speed = float(r.uniform(6.5, 8.2))
        build.v0 = float(build.target_speed * r.uniform(0.72, 0.88))
        clear0 = build.v0 * build.v0 / 6.4 + 0.5 * build.v0 + 3.5 + float(r.uniform(0.0, 1.5))
        build.agents.append(
            _stationary_agent(clear0 + half_gap, 0.0, 0.0, agent_l, float(r.uniform(1.7, 2.1)), n_poses)
        )
    else:
        build.target_speed = float(r.uniform(6.0, 11.0))
        clear0 = float(r.uniform(14.0, 24.0))
        v_lead = float(r.uniform(1.5, 4.0))
        build.agents.append(
            _moving_agent(clear0 + half_gap, 0.0, 0.0, v_lead, agent_l,
                          float(r.uniform(1.7, 2.1)), n_poses, cfg.dt)
        )
    length = build.target_speed * cfg.dt * cfg.T + 40.0
    build.base = _straight_base(length)
    build.centerline = build.base.copy()


_BUILDERS = {
    "STRAIGHT": _build_straight,
    "CURVE_KEEP": _build_curve,
    "LEFT_TURN": lambda r, c, b: _build_turn(r, c, b, +1.0),
    "RIGHT_TURN": lambda r, c, b: _build_turn(r, c, b, -1.0),
    "BYPASS": lambda r, c, b: _build_obstacle_route(r, c, b, (1.2, 2.0), 5.5),
    "NUDGE": lambda r, c, b: _build_obstacle_route(r, c, b, (0.4, 1.0), 4.5),
    "LEAD_FOLLOW": _build_lead_follow,
}


def generate_scene(seed: int, kind: str, cfg: WorldConfig = WorldConfig()) -> Scene:
    """Deterministic scene for (seed, kind); global pose is randomized."""
    if kind not in KINDS:
        raise DomainError(f"unknown scenario kind {kind!r}")
    r = rng_mod.stream(seed, rng_mod.STAGE_WORLD, KINDS.index(kind))
    build = _SceneBuild()
    _BUILDERS[kind](r, cfg, build)
    if build.v0 is None:
        build.v0 = float(build.target_speed * r.uniform(0.55, 0.95))

    corridor = Polygon(
        LineString(build.base).buffer(build.width / 2.0, cap_style="flat", quad_segs=12).exterior
    )
    ring = np.asarray(corridor.exterior.coords)[:-1]

    # Random global placement; downstream code must not rely on axis alignment.
    pose = (
        float(r.uniform(-cfg.placement_range, cfg.placement_range)),
        float(r.uniform(-cfg.placement_range, cfg.placement_range)),
        float(r.uniform(-math.pi, math.pi)),
    )
    centerline = _rigid(build.centerline, pose)
    ring_w = _rigid(ring, pose)
    agents = []
    for length, width, poses in build.agents:
        xy = _rigid(poses[:, :2], pose)
        heading = poses[:, 2] + pose[2]
        agents.append(AgentTrack(length=length, width=width,
                                 poses=np.concatenate([xy, heading[:, None]], axis=1)))
    # Construction frame puts the ego at the origin with heading +x.
    start = _rigid(np.array([[0.0, 0.0]]), pose)[0]
    ego_init = EgoState(x=float(start[0]), y=float(start[1]), v=build.v0,
                        theta=pose[2], frame_time=0)
    return Scene(
        centerline=centerline,
        corridor=ring_w,
        agents=tuple(agents),
        command=build.command,
        ego_init=ego_init,
        target_speed=build.target_speed,
        seed=int(seed),
        kind=kind,
    )


# ---------------------------------------------------------------------------
# Expert controller


def _ego_corners(x: float, y: float, theta: float) -> np.ndarray:
    c, s = math.cos(theta), math.sin(theta)
    hl, hw = EGO_LENGTH / 2.0, EGO_WIDTH / 2.0
    local = np.array([[hl, hw], [hl, -hw], [-hl, -hw], [-hl, hw]])
    rot = np.array([[c, -s], [s, c]])
    return local @ rot.T + np.array([x, y])


def _agent_polygon(track: AgentTrack, k: int) -> Polygon:
    j = min(k, track.poses.shape[0] - 1)
    x, y, h = track.poses[j]
    c, s = math.cos(h), math.sin(h)
    hl, hw = track.length / 2.0, track.width / 2.0
    local = np.array([[hl, hw], [hl, -hw], [-hl, -hw], [-hl, hw]])
    rot = np.array([[c, -s], [s, c]])
    return Polygon(local @ rot.T + np.array([x, y]))


def _blocking_speed_cap(
    scene: Scene, line: LineString, s_ego: float, v_ego: float, k: int, dt: float
) -> float:
    """Speed limit from the nearest in-lane agent ahead of the ego."""
    cap = math.inf
    for track in scene.agents:
        j = min(k, track.poses.shape[0] - 1)
        ax, ay, ah = track.poses[j]
        p = Point(ax, ay)
        lat = p.distance(line)
        if lat > (EGO_WIDTH + track.width) / 2.0 + 0.3:
            continue
        s_agent = line.project(p)
        clear = s_agent - s_ego - track.length / 2.0 - EGO_LENGTH / 2.0
        if clear < -1.0 or clear > 60.0:
            continue
        vx, vy = track.velocity(k, dt)
        v_along = vx * math.cos(ah) + vy * math.sin(ah)
        # Anticipate one control period of travel at the current speed; the
        # proportional loop tracks this cap with a delay of roughly 1/gain.
        # Two square-root profiles: a firm main brake and a gentler final
        # approach. Both reach zero in finite time, unlike a linear law.
        clear_pred = clear - max(v_ego, 0.0) * dt
        brake_main = math.sqrt(2.0 * 3.2 * max(0.0, clear_pred - 2.5))
        brake_final = math.sqrt(2.0 * 1.8 * max(0.0, clear_pred - 1.6))
        cap = min(cap, max(0.0, v_along) + min(brake_main, brake_final))
    return cap


def _wrap_angle(a: float) -> float:
    return math.atan2(math.sin(a), math.cos(a))


def _expert_actions(
    scene: Scene, dt: float, T: int, ld_gain: float
) -> list[KinematicAction]:
    line = LineString(scene.centerline)
    state = scene.ego_init
    prev_a, prev_w = 0.0, 0.0
    halted = False
    actions = []
    for k in range(T):
        s_ego = line.project(Point(state.x, state.y))
        lookahead = float(np.clip(ld_gain * max(state.v, 2.0), 3.0, 10.0))
        target_pt = line.interpolate(min(s_ego + lookahead, line.length))
        alpha = _wrap_angle(
            math.atan2(target_pt.y - state.y, target_pt.x - state.x) - state.theta
        )
        curvature = 2.0 * math.sin(alpha) / lookahead
        w_cmd = float(np.clip(state.v * curvature, -0.9, 0.9))
        w_cmd = float(np.clip(w_cmd, prev_w - 0.8, prev_w + 0.8))

        cap = _blocking_speed_cap(scene, line, s_ego, state.v, k, dt)
        # Once braked nearly to rest behind a stopped obstruction, stay
        # stopped instead of creeping back up the brake curve.
        if cap < 1.0 and state.v < 3.0:
            halted = True
        v_allow = 0.0 if halted else min(scene.target_speed, cap)
        a_cmd = float(np.clip(2.2 * (v_allow - state.v), -4.0, 2.5))
        a_cmd = float(np.clip(a_cmd, prev_a - 3.5, prev_a + 3.5))
        a_cmd = max(a_cmd, -state.v / dt)  # brake to a stop, never reverse

        action = KinematicAction(accel=a_cmd, yaw_rate=w_cmd)
        actions.append(action)
        state = advance(state, action, dt)
        prev_a, prev_w = a_cmd, w_cmd
    return actions


def _check_expert(scene: Scene, actions: Sequence[KinematicAction], dt: float) -> bool:
    """Corridor containment and agent clearance for a world-frame replay."""
    poly = scene.corridor_polygon()
    prepared = prep(poly)
    state = scene.ego_init
    states = [state]
    for action in actions:
        state = advance(state, action, dt)
        states.append(state)
    for k, s in enumerate(states):
        corners = _ego_corners(s.x, s.y, s.theta)
        if not all(prepared.covers(Point(cx, cy)) for cx, cy in corners):
            return False
        ego_poly = Polygon(corners)
        for track in scene.agents:
            if ego_poly.distance(_agent_polygon(track, k)) < 0.05:
                return False
    return True


_LD_GAINS = (0.9, 0.7, 1.2, 0.55, 1.5)


def expert_rollout(scene: Scene, dt: float = 0.5, T: int = 8) -> Trajectory:
    """Expert trajectory in the ego's initial frame (waypoint 0 at origin).

    Retries with different lookahead gains when the rollout leaves the
    corridor or clips an agent; a scene that fails all gains is reported as
    un-drivable so the corpus generator can discard it.
    """
    for gain in _LD_GAINS:
        actions = _expert_actions(scene, dt, T, gain)
        if _check_expert(scene, actions, dt):
            origin = EgoState(x=0.0, y=0.0, v=scene.ego_init.v, theta=0.0, frame_time=0)
            return rollout(origin, actions, dt)
    raise ExpertFailure(
        f"expert left the corridor for all lookahead gains (seed={scene.seed}, kind={scene.kind})"
    )


# ---------------------------------------------------------------------------
# Tokenization


def _ray_boundary_point(
    ring: LineString, origin: np.ndarray, direction: np.ndarray
) -> np.ndarray:
    probe = LineString([origin, origin + direction * 60.0])
    hit = probe.intersection(ring)
    if hit.is_empty:
        return origin + direction * 60.0
    pts = []
    for geom in getattr(hit, "geoms", [hit]):
        pts.extend(np.asarray(geom.coords))
    pts = np.asarray(pts)
    d = np.hypot(pts[:, 0] - origin[0], pts[:, 1] - origin[1])
    return pts[int(np.argmin(d))]


def tokenize_scene(scene: Scene, step: int = 0, ego: EgoState | None = None,
                   n_map: int = 16, dt: float = 0.5) -> TokenBundle:
    """Ego-frame token bundle at a step (agents read their scripted pose).

    Env token features, width 11:
      [is_agent, is_boundary, is_center, rel_x, rel_y, vel_x, vel_y,
       cos(rel_heading), sin(rel_heading), length, width]
    Map tokens carry the local route tangent as their heading and zeros for
    velocity and size.  Ego features carry speed, the previous action, and
    the route target speed; heading is zero in the ego's own frame.
    """
    if ego is None:
        ego = scene.ego_init
    c, s = math.cos(ego.theta), math.sin(ego.theta)
    to_ego = np.array([[c, s], [-s, c]])
    origin = np.array([ego.x, ego.y])

    tokens = []
    for track in scene.agents:
        j = min(step, track.poses.shape[0] - 1)
        ax, ay, ah = track.poses[j]
        rel = to_ego @ (np.array([ax, ay]) - origin)
        vx, vy = track.velocity(step, dt)
        rel_v = to_ego @ np.array([vx, vy])
        rel_h = ah - ego.theta
        tokens.append([1.0, 0.0, 0.0, rel[0], rel[1], rel_v[0], rel_v[1],
                       math.cos(rel_h), math.sin(rel_h), track.length, track.width])

    line = LineString(scene.centerline)
    ring = LineString(np.vstack([scene.corridor, scene.corridor[:1]]))
    s_ego = line.project(Point(ego.x, ego.y))
    horizon = min(60.0, line.length - s_ego)
    n_center = n_map // 2
    n_bound = n_map - n_center
    stations = []
    for i in range(max(n_center, n_bound)):
        si = s_ego + horizon * (i + 0.5) / max(n_center, n_bound)
        p = line.interpolate(min(si, line.length))
        q = line.interpolate(min(si + 0.5, line.length))
        tang = np.array([q.x - p.x, q.y - p.y])
        norm = np.hypot(*tang)
        tang = tang / norm if norm > 1e-9 else np.array([1.0, 0.0])
        stations.append((np.array([p.x, p.y]), tang))

    for i in range(n_center):
        p, tang = stations[i]
        rel = to_ego @ (p - origin)
        rel_t = to_ego @ tang
        tokens.append([0.0, 0.0, 1.0, rel[0], rel[1], 0.0, 0.0,
                       rel_t[0], rel_t[1], 0.0, 0.0])
    for i in range(n_bound):
        p, tang = stations[i]
        side = 1.0 if i % 2 == 0 else -1.0
        normal = np.array([-tang[1], tang[0]]) * side
        bp = _ray_boundary_point(ring, p, normal)
        rel = to_ego @ (bp - origin)
        rel_t = to_ego @ tang
        tokens.append([0.0, 1.0, 0.0, rel[0], rel[1], 0.0, 0.0,
                       rel_t[0], rel_t[1], 0.0, 0.0])

    command = np.zeros(3)
    command[COMMANDS.index(scene.command)] = 1.0
    ego_feats = np.array([ego.v, 0.0, 0.0, 0.0, scene.target_speed])
    return TokenBundle(env=np.array(tokens, dtype=np.float64),
                       command=command, ego=ego_feats)


# ---------------------------------------------------------------------------
# Serialization and corpus generation


def save_scene(scene: Scene, path) -> None:
    doc = {
        "schema_version": SCENE_SCHEMA_VERSION,
        "kind": scene.kind,
        "seed": scene.seed,
        "command": scene.command,
        "target_speed": scene.target_speed,
        "ego_init": {"x": scene.ego_init.x, "y": scene.ego_init.y,
                     "v": scene.ego_init.v, "theta": scene.ego_init.theta},
        "centerline": scene.centerline.tolist(),
        "corridor": scene.corridor.tolist(),
        "agents": [
            {"length": a.length, "width": a.width, "poses": a.poses.tolist()}
            for a in scene.agents
        ],
    }
    tmp = str(path) + ".tmp"
    with open(tmp, "w") as fh:
        json.dump(doc, fh)
    os.replace(tmp, path)


def load_scene(path) -> Scene:
    with open(path) as fh:
        doc = json.load(fh)
    if doc.get("schema_version") != SCENE_SCHEMA_VERSION:
        raise DomainError(f"unsupported scene schema in {path}: {doc.get('schema_version')}")
    ego = doc["ego_init"]
    scene = Scene(
        centerline=np.asarray(doc["centerline"], dtype=np.float64),
        corridor=np.asarray(doc["corridor"], dtype=np.float64),
        agents=tuple(
            AgentTrack(length=a["length"], width=a["width"],
                       poses=np.asarray(a["poses"], dtype=np.float64))
            for a in doc["agents"]
        ),
        command=doc["command"],
        ego_init=EgoState(x=ego["x"], y=ego["y"], v=ego["v"], theta=ego["theta"], frame_time=0),
        target_speed=doc["target_speed"],
        seed=doc["seed"],
        kind=doc["kind"],
    )
    scene.corridor_polygon()  # validates geometry at load time
    return scene


def generate_corpus(
    out_dir, root_seed: int, counts: dict[str, int], cfg: WorldConfig = WorldConfig()
) -> list[dict]:
    """Write scenes and expert trajectories; returns the manifest records.

    Un-drivable scenes are discarded and replaced deterministically by
    bumping an attempt counter in the seed derivation.
    """
    from .kinematics import save_trajectory_csv

    scenes_dir = os.path.join(out_dir, "scenes")
    traj_dir = os.path.join(out_dir, "trajectories")
    os.makedirs(scenes_dir, exist_ok=True)
    os.makedirs(traj_dir, exist_ok=True)
    records = []
    index = 0
    for kind in KINDS:
        n = counts.get(kind, 0)
        for slot in range(n):
            scene = None
            traj = None
            for attempt in range(20):
                seed_stream = rng_mod.stream(root_seed, rng_mod.STAGE_WORLD,
                                             KINDS.index(kind), slot, attempt)
                scene_seed = int(seed_stream.integers(0, 2**62))
                candidate = generate_scene(scene_seed, kind, cfg)
                try:
                    traj = expert_rollout(candidate, cfg.dt, cfg.T)
                except ExpertFailure:
                    continue
                scene = candidate
                break
            if scene is None:
                raise ExpertFailure(
                    f"could not produce a drivable {kind} scene after 20 attempts (slot {slot})"
                )
            scene_id = f"scene_{index:04d}"
            scene_file = os.path.join("scenes", f"{scene_id}.json")
            save_scene(scene, os.path.join(out_dir, scene_file))
            save_trajectory_csv(traj, os.path.join(traj_dir, f"{scene_id}.csv"))
            records.append({"file": scene_file, "kind": kind, "seed": scene.seed,
                            "scene_id": scene_id})
            index += 1
    tmp = os.path.join(out_dir, "manifest.jsonl.tmp")
    with open(tmp, "w") as fh:
        for rec in records:
            fh.write(json.dumps(rec) + "\n")
    os.replace(tmp, os.path.join(out_dir, "manifest.jsonl"))
    return records


def load_manifest(out_dir) -> list[dict]:
    path = os.path.join(out_dir, "manifest.jsonl")
    records = []
    with open(path) as fh:
        for line in fh:
            if line.strip():
                records.append(json.loads(line))
    return records
