import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from netpen.control import (TRANSITIONS, GainConfig, MissionLimits, MissionState, PidBank, PidState,
                            mission_step, pid_step, servo_command)
from netpen.records import ControlCommand, Phase, Telemetry
from netpen.scene import CameraIntrinsics
from netpen.vision import HoughLine, RopePairObservation

CAM = CameraIntrinsics()


def obs(dist=2.0, mid=320.0, yaw=0.0):
    return RopePairObservation(HoughLine(mid - 50, 0, 100), HoughLine(mid + 50, 0, 100), 100.0, mid,
                               distance_est=dist, yaw_est=yaw)


def tel(depth=1.0, k=0):
    return Telemetry(k, depth, 0.0)


# -- pid ------------------------------------------------------------------------

def test_pid_proportional():
    assert pid_step(PidState(kp=1.0), 0.5, 0.1)[1] == pytest.approx(0.5)


def test_pid_integral_sum():
    s, outs = PidState(ki=1.0), []
    for _ in range(3):
        s, u = pid_step(s, 1.0, 0.1)
        outs.append(u)
    assert outs == pytest.approx([0.1, 0.2, 0.3])


def test_pid_saturates():
    assert pid_step(PidState(kp=10.0), 0.5, 0.1)[1] == 1.0


def test_pid_derivative_starts_at_zero():
    s, u = pid_step(PidState(kd=1.0), 0.4, 0.1)
    assert u == 0.0
    s, u = pid_step(s, 0.5, 0.1)
    assert u == pytest.approx(1.0)


def test_pid_state_invariants():
    with pytest.raises(ValueError):
        PidState(out_min=1, out_max=1)
    with pytest.raises(ValueError):
        PidState(integral_limit=-1)
    with pytest.raises(ValueError):
        pid_step(PidState(), 1.0, 0.0)


@settings(max_examples=200)
@given(st.floats(0, 5), st.floats(0, 5), st.floats(0, 5), st.floats(0, 2),
       st.lists(st.floats(-100, 100), min_size=1, max_size=40), st.floats(0.01, 0.5))
def test_pid_bounds(kp, ki, kd, lim, errors, dt):
    s = PidState(kp, ki, kd, integral_limit=lim)
    for e in errors:
        s, u = pid_step(s, e, dt)
        assert -1.0 <= u <= 1.0
        assert abs(s.integral) <= lim


@given(st.lists(st.floats(-100, 100), min_size=1, max_size=20))
def test_zero_gains(errors):
    s0 = PidState()
    s = s0
    for e in errors:
        s, u = pid_step(s, e, 0.1)
        assert u == 0.0
        assert s.integral == 0.0
        assert s == PidState(prev_error=e)


# -- servo ----------------------------------------------------------------------

def test_zero_error_command():
    m = MissionState(phase=Phase.TRACK)
    cmd, _ = servo_command(obs(), m, GainConfig(), PidBank.from_gains(GainConfig()), 0.1, CAM)
    assert cmd.surge == pytest.approx(0) and cmd.sway == pytest.approx(0) and cmd.yaw_rate == pytest.approx(0)
    assert cmd.heave == pytest.approx(0.1 / 0.3)


def test_sign_conventions():
    g = GainConfig()
    m = MissionState(phase=Phase.TRACK)
    bank = PidBank.from_gains(g)
    assert servo_command(obs(dist=2.5), m, g, bank, 0.1, CAM)[0].surge > 0
    assert servo_command(obs(dist=1.5), m, g, bank, 0.1, CAM)[0].surge < 0
    assert servo_command(obs(mid=400), m, g, bank, 0.1, CAM)[0].sway > 0
    assert servo_command(obs(yaw=0.1), m, g, bank, 0.1, CAM)[0].yaw_rate < 0


def test_absent_observation_holds():
    g = GainConfig()
    bank = PidBank.from_gains(g)
    cmd, bank2 = servo_command(None, MissionState(phase=Phase.TRACK), g, bank, 0.1, CAM)
    assert cmd == ControlCommand(0, 0, 0, 0)
    assert bank2 == bank


def test_no_descent_outside_track():
    g = GainConfig()
    for ph in (Phase.ACQUIRE, Phase.LOST):
        cmd, _ = servo_command(obs(), MissionState(phase=ph), g, PidBank.from_gains(g), 0.1, CAM)
        assert cmd.heave == 0.0


@settings(max_examples=100, deadline=None)
@given(st.lists(st.one_of(st.none(), st.tuples(st.floats(0.1, 50), st.floats(-1e4, 1e4), st.floats(-1.5, 1.5))),
                min_size=1, max_size=30))
def test_commands_always_bounded(seq):
    g = GainConfig()
    bank = PidBank.from_gains(g)
    m = MissionState(phase=Phase.TRACK)
    for item in seq:
        o = None if item is None else obs(*item)
        cmd, bank = servo_command(o, m, g, bank, 0.1, CAM)
        assert all(-1.0 <= c <= 1.0 for c in cmd.as_tuple())


# -- mission state machine -------------------------------------------------------

def test_acquire_to_track():
    m = MissionState()
    for k in range(4):
        m = mission_step(m, obs(), tel(k=k))
        assert m.phase == Phase.ACQUIRE
    m = mission_step(m, obs(), tel())
    assert m.phase == Phase.TRACK


def test_acquire_streak_resets():
    m = MissionState()
    for o in [obs()] * 4 + [None] + [obs()] * 4:
        m = mission_step(m, o, tel())
    assert m.phase == Phase.ACQUIRE


def test_track_to_done_at_bottom():
    m = mission_step(MissionState(phase=Phase.TRACK), obs(), tel(depth=9.8))
    assert m.phase == Phase.DONE


def test_track_lost_recover_abort():
    lim = MissionLimits(lost_frames=5, abort_frames=50)
    m = MissionState(phase=Phase.TRACK)
    for _ in range(4):
        m = mission_step(m, None, tel(), lim)
    assert m.phase == Phase.TRACK
    m = mission_step(m, None, tel(), lim)
    assert m.phase == Phase.LOST
    assert mission_step(m, obs(), tel(), lim).phase == Phase.TRACK
    for _ in range(50):
        m = mission_step(m, None, tel(), lim)
    assert m.phase == Phase.LOST
    m = mission_step(m, None, tel(), lim)
    assert m.phase == Phase.ABORT


def test_mission_state_invariants():
    with pytest.raises(ValueError):
        MissionState(target_distance=0)
    with pytest.raises(ValueError):
        MissionState(lost_frames=-1)


@settings(max_examples=200, deadline=None)
@given(st.sampled_from(list(Phase)),
       st.lists(st.tuples(st.booleans(), st.floats(0, 12)), min_size=1, max_size=80))
def test_transitions_legal_and_terminal(start, seq):
    m = MissionState(phase=start)
    for valid, depth in seq:
        nxt = mission_step(m, obs() if valid else None, tel(depth), MissionLimits(3, 3, 10))
        assert nxt.phase in TRANSITIONS[m.phase]
        if m.phase in (Phase.DONE, Phase.ABORT):
            assert nxt == m
        assert min(nxt.frames_in_phase, nxt.lost_frames, nxt.valid_streak) >= 0
        m = nxt
