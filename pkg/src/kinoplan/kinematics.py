"""Constant-control motion model and trajectory rollout.

A vehicle state is (x, y, v, theta) in some reference frame. A control is a
(longitudinal acceleration, yaw rate) pair held constant over one step of
duration dt. Over a single step the state change in the vehicle's local frame
has the closed form

    dv     = a * dt
    dtheta = w * dt
    dx     = (v/w) sin(wT) + a [ (cos(wT) - 1)/w^2 + T sin(wT)/w ]
    dy     = v (1 - cos(wT))/w + a [ sin(wT)/w^2 - T cos(wT)/w ]

with T = dt, switching to a truncated series for |w*T| below a small
threshold. Rollout accumulates local deltas into the initial frame by
rotating each (dx, dy) with the accumulated heading.

Headings are kept unwrapped: rollout sums heading increments, and wrapping
would break exactness of those sums.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Iterable, Sequence

import numpy as np

from .errors import DomainError

# Below this |w*T| the closed form switches to a series; both branches agree
# to ~1e-18 relative at the threshold in double precision.
OMEGA_EPS = 1e-6


@dataclass(frozen=True)
class EgoState:
    """Vehicle pose and speed at one timestep, tagged with its frame."""

    x: float
    y: float
    v: float
    theta: float
    frame_time: int = 0


@dataclass(frozen=True)
class KinematicAction:
    """Longitudinal acceleration [m/s^2] and yaw rate [rad/s]."""

    accel: float
    yaw_rate: float


@dataclass(frozen=True)
class StateDelta:
    """State change over one step, measured in the instantaneous local frame."""

    dx: float
    dy: float
    dv: float
    dtheta: float


@dataclass(frozen=True)
class Trajectory:
    """Uniformly spaced state sequence (T+1 states including the initial)."""

    states: tuple[EgoState, ...]
    dt: float

    def positions(self) -> np.ndarray:
        return np.array([[s.x, s.y] for s in self.states], dtype=np.float64)

    def speeds(self) -> np.ndarray:
        return np.array([s.v for s in self.states], dtype=np.float64)

    def headings(self) -> np.ndarray:
        return np.array([s.theta for s in self.states], dtype=np.float64)


def _check_finite(*values: float) -> None:
    for val in values:
        if not math.isfinite(val):
            raise DomainError(f"non-finite kinematic input: {val!r}")


def _local_delta(v: float, a: float, w: float, dt: float) -> tuple[float, float]:
    """Local (dx, dy) for constant controls over dt."""
    u = w * dt
    if abs(u) >= OMEGA_EPS:
        sin_u = math.sin(u)
        cos_u = math.cos(u)
        # 1 - cos(u) via 2 sin^2(u/2): same value, no cancellation for small u.
        vers_u = 2.0 * math.sin(0.5 * u) ** 2
        dx = (v / w) * sin_u + a * (dt * sin_u / w - vers_u / (w * w))
        dy = v * vers_u / w + a * (sin_u / (w * w) - dt * cos_u / w)
    else:
        u2 = u * u
        # Series for sin(u)/u, (1-cos u)/u etc.; truncation error O(u^6).
        dx = v * dt * (1.0 - u2 / 6.0 + u2 * u2 / 120.0) + a * dt * dt * (
            0.5 - u2 / 8.0 + u2 * u2 / 144.0
        )
        dy = v * dt * (u / 2.0 - u * u2 / 24.0) + a * dt * dt * (u / 3.0 - u * u2 / 30.0)
    return dx, dy


def step(state: EgoState, action: KinematicAction, dt: float) -> StateDelta:
    """Exact state change for one constant-control step, in the local frame."""
    if not dt > 0.0:
        raise DomainError(f"dt must be positive, got {dt}")
    _check_finite(state.v, action.accel, action.yaw_rate, dt)
    dx, dy = _local_delta(state.v, action.accel, action.yaw_rate, dt)
    return StateDelta(dx=dx, dy=dy, dv=action.accel * dt, dtheta=action.yaw_rate * dt)


def advance(state: EgoState, action: KinematicAction, dt: float) -> EgoState:
    """One rollout step: rotate the local delta by the current heading."""
    delta = step(state, action, dt)
    cos_t = math.cos(state.theta)
    sin_t = math.sin(state.theta)
    return EgoState(
        x=state.x + cos_t * delta.dx - sin_t * delta.dy,
        y=state.y + sin_t * delta.dx + cos_t * delta.dy,
        v=state.v + delta.dv,
        theta=state.theta + delta.dtheta,
        frame_time=state.frame_time,
    )


def rollout(initial: EgoState, actions: Sequence[KinematicAction], dt: float) -> Trajectory:
    """Unroll an action sequence from ``initial``, in ``initial``'s frame.

    ``initial`` may carry a nonzero pose; its heading then seeds the rotation
    accumulation, so composing rollouts is plain concatenation.
    """
    if len(actions) == 0:
        raise DomainError("rollout requires a non-empty action sequence")
    states = [initial]
    current = initial
    for action in actions:
        current = advance(current, action, dt)
        states.append(current)
    return Trajectory(states=tuple(states), dt=dt)


def integrate_numeric(
    state: EgoState, action: KinematicAction, dt: float, substeps: int
) -> StateDelta:
    """Numerical-quadrature oracle for :func:`step`.

    Speed and heading have constant rates, so their substep values are exact;
    positions accumulate by midpoint quadrature of x' = v cos(theta),
    y' = v sin(theta) over ``substeps`` uniform slices. Converges to the
    closed form at second order in the slice width.
    """
    if substeps < 1:
        raise DomainError(f"substeps must be >= 1, got {substeps}")
    h = dt / substeps
    # Chunked so a 1e6-substep call stays within a few MB of scratch.
    chunk = 1 << 19
    dx = 0.0
    dy = 0.0
    for start in range(0, substeps, chunk):
        n = min(chunk, substeps - start)
        tau = (start + np.arange(n, dtype=np.float64) + 0.5) * h
        v_mid = state.v + action.accel * tau
        th_mid = action.yaw_rate * tau
        dx += h * float(np.sum(v_mid * np.cos(th_mid)))
        dy += h * float(np.sum(v_mid * np.sin(th_mid)))
    return StateDelta(dx=dx, dy=dy, dv=action.accel * dt, dtheta=action.yaw_rate * dt)


def local_deltas_batch(
    v: np.ndarray, accel: np.ndarray, yaw_rate: np.ndarray, dt: float
) -> tuple[np.ndarray, np.ndarray]:
    """Vectorized :func:`_local_delta` over aligned arrays (labeler hot path)."""
    u = yaw_rate * dt
    small = np.abs(u) < OMEGA_EPS
    w_safe = np.where(small, 1.0, yaw_rate)
    sin_u = np.sin(u)
    cos_u = np.cos(u)
    vers_u = 2.0 * np.sin(0.5 * u) ** 2
    dx_big = (v / w_safe) * sin_u + accel * (dt * sin_u / w_safe - vers_u / (w_safe * w_safe))
    dy_big = v * vers_u / w_safe + accel * (sin_u / (w_safe * w_safe) - dt * cos_u / w_safe)
    u2 = u * u
    dx_small = v * dt * (1.0 - u2 / 6.0 + u2 * u2 / 120.0) + accel * dt * dt * (
        0.5 - u2 / 8.0 + u2 * u2 / 144.0
    )
    dy_small = v * dt * (u / 2.0 - u * u2 / 24.0) + accel * dt * dt * (u / 3.0 - u * u2 / 30.0)
    return np.where(small, dx_small, dx_big), np.where(small, dy_small, dy_big)


def express_in_frame(traj: Trajectory, anchor: EgoState) -> Trajectory:
    """Re-express a trajectory given in ``anchor``'s own frame into the frame
    ``anchor`` itself is expressed in (rigid transform by anchor's pose)."""
    cos_t = math.cos(anchor.theta)
    sin_t = math.sin(anchor.theta)
    out = []
    for s in traj.states:
        out.append(
            EgoState(
                x=anchor.x + cos_t * s.x - sin_t * s.y,
                y=anchor.y + sin_t * s.x + cos_t * s.y,
                v=s.v,
                theta=s.theta + anchor.theta,
                frame_time=anchor.frame_time,
            )
        )
    return Trajectory(states=tuple(out), dt=traj.dt)


def save_trajectory_csv(traj: Trajectory, path) -> None:
    """Write waypoints as ``k,x,y,v,theta`` rows with 17 significant digits."""
    lines = ["k,x,y,v,theta"]
    for k, s in enumerate(traj.states):
        lines.append(f"{k},{s.x:.17g},{s.y:.17g},{s.v:.17g},{s.theta:.17g}")
    with open(path, "w") as fh:
        fh.write("\n".join(lines) + "\n")


def load_trajectory_csv(path, dt: float, frame_time: int = 0) -> Trajectory:
    """Read a trajectory written by :func:`save_trajectory_csv`."""
    states = []
    with open(path) as fh:
        header = fh.readline().strip()
        if header != "k,x,y,v,theta":
            raise DomainError(f"unexpected trajectory header in {path}: {header!r}")
        for line in fh:
            if not line.strip():
                continue
            _, x, y, v, theta = line.strip().split(",")
            states.append(
                EgoState(x=float(x), y=float(y), v=float(v), theta=float(theta), frame_time=frame_time)
            )
    return Trajectory(states=tuple(states), dt=dt)
