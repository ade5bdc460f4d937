"""Discrete joint action vocabulary and inverse labeling.

Continuous (accel, yaw rate) controls are uniformly binned per axis and
addressed by a single joint id, acceleration-major:

    id = accel_index * yaw_bins + yaw_index

``derive_labels`` inverts a continuous trajectory into ids by greedy
exhaustive search: at each step every vocabulary action is held constant
over a short lookahead, scored by summed squared position error against the
matching waypoints, and the argmin is committed for one step. Re-rolling the
committed ids (``relabel_trajectory``) yields the kinematically consistent
replacement used as training ground truth.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from functools import lru_cache
from typing import Sequence

import numpy as np

from .errors import DomainError, OutOfVocabularyError
from .kinematics import (
    EgoState,
    KinematicAction,
    Trajectory,
    advance,
    local_deltas_batch,
    rollout,
)


@dataclass(frozen=True)
class VocabConfig:
    accel_bins: int = 128
    accel_range: tuple[float, float] = (-12.5, 12.5)
    yaw_bins: int = 64
    yaw_range: tuple[float, float] = (-1.5, 1.5)

    def __post_init__(self) -> None:
        if self.accel_bins < 1 or self.yaw_bins < 1:
            raise DomainError("bin counts must be >= 1")
        if not self.accel_range[0] < self.accel_range[1]:
            raise DomainError(f"bad accel_range {self.accel_range}")
        if not self.yaw_range[0] < self.yaw_range[1]:
            raise DomainError(f"bad yaw_range {self.yaw_range}")

    @property
    def vocab_size(self) -> int:
        return self.accel_bins * self.yaw_bins

    @property
    def accel_width(self) -> float:
        return (self.accel_range[1] - self.accel_range[0]) / self.accel_bins

    @property
    def yaw_width(self) -> float:
        return (self.yaw_range[1] - self.yaw_range[0]) / self.yaw_bins


@lru_cache(maxsize=8)
def _axis_centers(cfg: VocabConfig) -> tuple[np.ndarray, np.ndarray]:
    a = cfg.accel_range[0] + (np.arange(cfg.accel_bins) + 0.5) * cfg.accel_width
    w = cfg.yaw_range[0] + (np.arange(cfg.yaw_bins) + 0.5) * cfg.yaw_width
    return a, w


@lru_cache(maxsize=8)
def _joint_centers(cfg: VocabConfig) -> tuple[np.ndarray, np.ndarray]:
    """Per-id (accel, yaw) center arrays in joint-id order."""
    a, w = _axis_centers(cfg)
    return np.repeat(a, cfg.yaw_bins), np.tile(w, cfg.accel_bins)


def _axis_index(value: float, lo: float, hi: float, bins: int, name: str) -> int:
    if not math.isfinite(value):
        raise DomainError(f"non-finite {name} value: {value!r}")
    if value < lo or value > hi:
        raise OutOfVocabularyError(f"{name}={value} outside [{lo}, {hi}]")
    idx = int(math.floor((value - lo) * bins / (hi - lo)))
    # The exact upper boundary lands on index == bins; clamp into the last bin.
    return min(idx, bins - 1)


def encode(action: KinematicAction, cfg: VocabConfig) -> int:
    ai = _axis_index(action.accel, *cfg.accel_range, cfg.accel_bins, "accel")
    wi = _axis_index(action.yaw_rate, *cfg.yaw_range, cfg.yaw_bins, "yaw_rate")
    return ai * cfg.yaw_bins + wi


def decode(action_id: int, cfg: VocabConfig) -> KinematicAction:
    if not 0 <= action_id < cfg.vocab_size:
        raise DomainError(f"action id {action_id} outside [0, {cfg.vocab_size})")
    a_centers, w_centers = _axis_centers(cfg)
    ai, wi = divmod(int(action_id), cfg.yaw_bins)
    return KinematicAction(accel=float(a_centers[ai]), yaw_rate=float(w_centers[wi]))


def derive_labels(gt: Trajectory, cfg: VocabConfig, horizon: int = 3) -> list[int]:
    """Greedy exhaustive inverse labeling of a continuous trajectory.

    At step i every vocabulary action is rolled out, held constant, for
    min(horizon, steps remaining) steps from the committed state, scored by
    summed squared position error against gt waypoints i+1..i+L, and the
    lowest-cost id (ties to the lowest id) is committed for a single step.
    The scan is vectorized over the whole vocabulary.
    """
    n_steps = len(gt.states) - 1
    if n_steps < 1:
        raise DomainError("derive_labels needs at least two waypoints")
    if horizon < 1:
        raise DomainError(f"horizon must be >= 1, got {horizon}")
    acc, yaw = _joint_centers(cfg)
    gt_xy = gt.positions()
    dt = gt.dt
    current = gt.states[0]
    labels: list[int] = []
    for i in range(n_steps):
        lookahead = min(horizon, n_steps - i)
        x = np.full(cfg.vocab_size, current.x)
        y = np.full(cfg.vocab_size, current.y)
        v = np.full(cfg.vocab_size, current.v)
        th = np.full(cfg.vocab_size, current.theta)
        cost = np.zeros(cfg.vocab_size)
        for j in range(lookahead):
            dx, dy = local_deltas_batch(v, acc, yaw, dt)
            cos_t = np.cos(th)
            sin_t = np.sin(th)
            x = x + cos_t * dx - sin_t * dy
            y = y + sin_t * dx + cos_t * dy
            v = v + acc * dt
            th = th + yaw * dt
            gx, gy = gt_xy[i + 1 + j]
            cost += (x - gx) ** 2 + (y - gy) ** 2
        winner = int(np.argmin(cost))  # argmin takes the first = lowest id on ties
        labels.append(winner)
        current = advance(current, decode(winner, cfg), dt)
    return labels


def relabel_trajectory(
    initial: EgoState, labels: Sequence[int], cfg: VocabConfig, dt: float
) -> Trajectory:
    """Roll the decoded label sequence out from ``initial``.

    The result replaces the original continuous trajectory as training
    ground truth, so targets are exactly reachable within the vocabulary.
    """
    return rollout(initial, [decode(l, cfg) for l in labels], dt)


def filter_segment(gt: Trajectory, cfg: VocabConfig) -> bool:
    """True iff per-step finite-difference accel and yaw rate stay inside the
    configured ranges (closed intervals)."""
    v = gt.speeds()
    th = gt.headings()
    accel = np.diff(v) / gt.dt
    yaw = np.diff(th) / gt.dt
    a_lo, a_hi = cfg.accel_range
    w_lo, w_hi = cfg.yaw_range
    return bool(
        np.all(accel >= a_lo)
        and np.all(accel <= a_hi)
        and np.all(yaw >= w_lo)
        and np.all(yaw <= w_hi)
    )


def save_labels_csv(path, rows: Sequence[tuple[str, int, int]]) -> None:
    """Write label rows as ``segment_id,k,action_id``."""
    lines = ["segment_id,k,action_id"]
    for seg, k, action_id in rows:
        lines.append(f"{seg},{k},{action_id}")
    with open(path, "w") as fh:
        fh.write("\n".join(lines) + "\n")


def load_labels_csv(path) -> list[tuple[str, int, int]]:
    rows = []
    with open(path) as fh:
        header = fh.readline().strip()
        if header != "segment_id,k,action_id":
            raise DomainError(f"unexpected label header in {path}: {header!r}")
        for line in fh:
            if not line.strip():
                continue
            seg, k, action_id = line.strip().split(",")
            rows.append((seg, int(k), int(action_id)))
    return rows
