import math

import numpy as np
import pytest

from kinoplan.errors import DomainError
from kinoplan.kinematics import (
    OMEGA_EPS,
    EgoState,
    KinematicAction,
    Trajectory,
    advance,
    express_in_frame,
    integrate_numeric,
    load_trajectory_csv,
    local_deltas_batch,
    rollout,
    save_trajectory_csv,
    step,
)

ORIGIN = EgoState(x=0.0, y=0.0, v=10.0, theta=0.0)


def test_straight_constant_speed():
    d = step(ORIGIN, KinematicAction(0.0, 0.0), 0.5)
    assert (d.dx, d.dy, d.dv, d.dtheta) == (5.0, 0.0, 0.0, 0.0)


def test_straight_accel_from_rest():
    d = step(EgoState(0, 0, 0.0, 0.0), KinematicAction(2.0, 0.0), 0.5)
    assert (d.dx, d.dy, d.dv, d.dtheta) == (0.25, 0.0, 1.0, 0.0)


def test_curved_step_matches_numeric_oracle():
    # Frozen from the closed form; independently cross-checked below against
    # midpoint quadrature with 1e6 substeps.
    act = KinematicAction(0.0, 0.5)
    d = step(ORIGIN, act, 0.5)
    assert d.dx == pytest.approx(4.9480791850904584, abs=1e-12)
    assert d.dy == pytest.approx(0.62175156578710433, abs=1e-12)
    assert d.dv == 0.0
    assert d.dtheta == 0.25
    num = integrate_numeric(ORIGIN, act, 0.5, 1_000_000)
    assert abs(num.dx - d.dx) < 1e-6
    assert abs(num.dy - d.dy) < 1e-6


def test_numeric_oracle_exact_for_straight():
    num = integrate_numeric(ORIGIN, KinematicAction(0.0, 0.0), 0.5, 1_000_000)
    assert abs(num.dx - 5.0) < 1e-9
    assert abs(num.dy) < 1e-9


def test_numeric_oracle_converges_from_below():
    # One coarse slice shows visible quadrature error on a curved step; the
    # fine version lands on the closed form.
    act = KinematicAction(3.0, 0.9)
    coarse = integrate_numeric(ORIGIN, act, 0.5, 1)
    fine = integrate_numeric(ORIGIN, act, 0.5, 1_000_000)
    closed = step(ORIGIN, act, 0.5)
    assert abs(coarse.dx - closed.dx) > 1e-4
    assert abs(fine.dx - closed.dx) < 1e-6
    assert abs(fine.dy - closed.dy) < 1e-6


def test_closed_form_vs_oracle_random_sweep():
    rng = np.random.default_rng(7)
    for _ in range(20):
        st = EgoState(0, 0, float(rng.uniform(-2, 15)), 0.0)
        act = KinematicAction(float(rng.uniform(-12.5, 12.5)), float(rng.uniform(-1.5, 1.5)))
        closed = step(st, act, 0.5)
        num = integrate_numeric(st, act, 0.5, 200_000)
        assert abs(num.dx - closed.dx) < 1e-6
        assert abs(num.dy - closed.dy) < 1e-6


def test_rollout_straight_rows():
    traj = rollout(ORIGIN, [KinematicAction(0.0, 0.0)] * 8, 0.5)
    xs = traj.positions()[:, 0]
    np.testing.assert_array_equal(xs, np.arange(9) * 5.0)
    np.testing.assert_array_equal(traj.positions()[:, 1], np.zeros(9))


def test_single_step_rollout_is_unrotated_step():
    act = KinematicAction(-3.0, 1.1)
    d = step(ORIGIN, act, 0.5)
    traj = rollout(ORIGIN, [act], 0.5)
    assert traj.states[1].x == d.dx
    assert traj.states[1].y == d.dy
    assert traj.states[1].v == ORIGIN.v + d.dv
    assert traj.states[1].theta == d.dtheta


def test_constant_turn_is_circular_arc():
    # v=10, w=0.5 gives radius 20 about (0, 20) when starting at the origin
    # with heading 0.
    traj = rollout(ORIGIN, [KinematicAction(0.0, 0.5)] * 4, 0.5)
    pts = traj.positions()
    radii = np.hypot(pts[:, 0] - 0.0, pts[:, 1] - 20.0)
    assert np.max(np.abs(radii - 20.0)) < 1e-6


def test_frame_composition():
    rng = np.random.default_rng(11)
    for _ in range(10):
        acts = [
            KinematicAction(float(rng.uniform(-6, 6)), float(rng.uniform(-1.2, 1.2)))
            for _ in range(8)
        ]
        full = rollout(ORIGIN, acts, 0.5)
        part1 = rollout(ORIGIN, acts[:3], 0.5)
        anchor = part1.states[-1]

        # Route A: continue from the terminal state directly.
        cont = rollout(anchor, acts[3:], 0.5)
        for s_full, s_cont in zip(full.states[3:], cont.states):
            assert abs(s_full.x - s_cont.x) < 1e-9
            assert abs(s_full.y - s_cont.y) < 1e-9
            assert abs(s_full.theta - s_cont.theta) < 1e-9

        # Route B: roll out in the anchor's own frame, then re-express.
        local = rollout(EgoState(0, 0, anchor.v, 0.0), acts[3:], 0.5)
        lifted = express_in_frame(local, anchor)
        for s_full, s_lift in zip(full.states[3:], lifted.states):
            assert abs(s_full.x - s_lift.x) < 1e-9
            assert abs(s_full.y - s_lift.y) < 1e-9


def test_mirror_symmetry_is_exact():
    rng = np.random.default_rng(3)
    for _ in range(10):
        acts = [
            KinematicAction(float(rng.uniform(-8, 8)), float(rng.uniform(-1.5, 1.5)))
            for _ in range(8)
        ]
        mirrored = [KinematicAction(a.accel, -a.yaw_rate) for a in acts]
        t1 = rollout(ORIGIN, acts, 0.5)
        t2 = rollout(ORIGIN, mirrored, 0.5)
        for s1, s2 in zip(t1.states, t2.states):
            assert s1.x == s2.x
            assert s1.y == -s2.y
            assert s1.theta == -s2.theta
            assert s1.v == s2.v


def test_dtheta_dv_linear_in_dt():
    act = KinematicAction(1.7, -0.37)
    base = step(EgoState(0, 0, 4.0, 0.0), act, 0.25)
    doubled = step(EgoState(0, 0, 4.0, 0.0), act, 0.5)
    assert doubled.dv == 2.0 * base.dv
    assert doubled.dtheta == 2.0 * base.dtheta


def test_branch_continuity_at_threshold():
    dt = 0.5
    for v, a in [(10.0, 0.0), (3.0, 8.0), (14.0, -12.0)]:
        st = EgoState(0, 0, v, 0.0)
        below = step(st, KinematicAction(a, OMEGA_EPS * 0.999 / dt), dt)
        above = step(st, KinematicAction(a, OMEGA_EPS * 1.001 / dt), dt)
        assert abs(below.dx - above.dx) < 1e-8
        assert abs(below.dy - above.dy) < 1e-8
        assert abs(below.dv - above.dv) < 1e-8
        assert abs(below.dtheta - above.dtheta) < 1e-8


def test_batch_deltas_match_scalar():
    rng = np.random.default_rng(19)
    v = rng.uniform(-2, 15, size=64)
    a = rng.uniform(-12.5, 12.5, size=64)
    w = rng.uniform(-1.5, 1.5, size=64)
    w[:4] = [0.0, 1e-9, -1e-9, OMEGA_EPS * 2]
    dx, dy = local_deltas_batch(v, a, w, 0.5)
    for i in range(64):
        d = step(EgoState(0, 0, v[i], 0.0), KinematicAction(a[i], w[i]), 0.5)
        assert dx[i] == d.dx
        assert dy[i] == d.dy


def test_advance_rotates_by_current_heading():
    st = EgoState(1.0, -2.0, 6.0, math.pi / 2, frame_time=4)
    nxt = advance(st, KinematicAction(0.0, 0.0), 0.5)
    assert nxt.x == pytest.approx(1.0, abs=1e-12)
    assert nxt.y == pytest.approx(1.0, abs=1e-12)
    assert nxt.frame_time == 4


def test_csv_roundtrip_is_bitwise(tmp_path):
    rng = np.random.default_rng(23)
    acts = [
        KinematicAction(float(rng.uniform(-8, 8)), float(rng.uniform(-1.5, 1.5)))
        for _ in range(8)
    ]
    traj = rollout(ORIGIN, acts, 0.5)
    path = tmp_path / "traj.csv"
    save_trajectory_csv(traj, path)
    text = path.read_text()
    assert text.splitlines()[0] == "k,x,y,v,theta"
    loaded = load_trajectory_csv(path, dt=0.5)
    assert len(loaded.states) == len(traj.states)
    for a, b in zip(traj.states, loaded.states):
        assert (a.x, a.y, a.v, a.theta) == (b.x, b.y, b.v, b.theta)


def test_domain_errors():
    with pytest.raises(DomainError):
        step(ORIGIN, KinematicAction(0.0, 0.0), 0.0)
    with pytest.raises(DomainError):
        step(EgoState(0, 0, float("nan"), 0.0), KinematicAction(0.0, 0.0), 0.5)
    with pytest.raises(DomainError):
        step(ORIGIN, KinematicAction(float("inf"), 0.0), 0.5)
    with pytest.raises(DomainError):
        rollout(ORIGIN, [], 0.5)
    with pytest.raises(DomainError):
        integrate_numeric(ORIGIN, KinematicAction(0.0, 0.0), 0.5, 0)


def test_bad_csv_header_rejected(tmp_path):
    path = tmp_path / "bad.csv"
    path.write_text("a,b,c\n1,2,3\n")
    with pytest.raises(DomainError):
        load_trajectory_csv(path, dt=0.5)


def test_trajectory_accessors():
    traj = rollout(ORIGIN, [KinematicAction(1.0, 0.1)] * 3, 0.5)
    assert isinstance(traj, Trajectory)
    assert traj.positions().shape == (4, 2)
    assert traj.speeds().shape == (4,)
    assert traj.headings().shape == (4,)
    assert traj.speeds()[0] == 10.0
