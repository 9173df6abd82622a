"""Per-axis PID servoing and the top-to-bottom inspection state machine."""
from __future__ import annotations

from dataclasses import dataclass, replace

from .records import ControlCommand, Phase, Telemetry
from .scene import CameraIntrinsics
from .vision import RopePairObservation


@dataclass(frozen=True)
class PidState:
    kp: float = 0.0
    ki: float = 0.0
    kd: float = 0.0
    integral: float = 0.0
    prev_error: float | None = None
    out_min: float = -1.0
    out_max: float = 1.0
    integral_limit: float = 1.0

    def __post_init__(self):
        if not self.out_min < self.out_max:
            raise ValueError("out_min must be below out_max")
        if self.integral_limit < 0:
            raise ValueError("integral_limit must be non-negative")

    def reset(self):
        return replace(self, integral=0.0, prev_error=None)


def pid_step(state: PidState, error: float, dt: float):
    """One PID update with clamping anti-windup; returns ``(new_state, output)``.

    The integral only accumulates when ``ki`` is non-zero, and the derivative
    term is zero on the first call after a reset.
    """
    if dt <= 0:
        raise ValueError("dt must be positive")
    integral = state.integral
    if state.ki != 0.0:
        lim = state.integral_limit
        integral = min(lim, max(-lim, integral + error * dt))
    deriv = 0.0 if state.prev_error is None else (error - state.prev_error) / dt
    out = state.kp * error + state.ki * integral + state.kd * deriv
    out = min(state.out_max, max(state.out_min, out))
    return replace(state, integral=integral, prev_error=error), out


@dataclass(frozen=True)
class AxisGains:
    kp: float = 0.0
    ki: float = 0.0
    kd: float = 0.0
    integral_limit: float = 1.0

    def pid(self):
        return PidState(self.kp, self.ki, self.kd, integral_limit=self.integral_limit)


@dataclass(frozen=True)
class GainConfig:
    """Default gains, tuned on the default scene for the 2 m tracking scenario."""

    surge: AxisGains = AxisGains(kp=0.9, ki=0.08, kd=0.25, integral_limit=2.0)
    sway: AxisGains = AxisGains(kp=3.0, ki=0.2, kd=0.5, integral_limit=1.0)
    yaw: AxisGains = AxisGains(kp=1.2, ki=0.0, kd=0.1, integral_limit=1.0)
    heave_v_max: float = 0.3  # maps descent_rate (m/s) to a normalized heave command


@dataclass(frozen=True)
class PidBank:
    surge: PidState
    sway: PidState
    yaw: PidState

    @classmethod
    def from_gains(cls, gains: GainConfig):
        return cls(gains.surge.pid(), gains.sway.pid(), gains.yaw.pid())


@dataclass(frozen=True)
class MissionLimits:
    acquire_frames: int = 5
    lost_frames: int = 5
    abort_frames: int = 50


@dataclass(frozen=True)
class MissionState:
    phase: Phase = Phase.ACQUIRE
    frames_in_phase: int = 0
    lost_frames: int = 0
    valid_streak: int = 0
    target_distance: float = 2.0
    descent_rate: float = 0.1
    bottom_depth: float = 9.75

    def __post_init__(self):
        if self.target_distance <= 0:
            raise ValueError("target_distance must be positive")
        if min(self.frames_in_phase, self.lost_frames, self.valid_streak) < 0:
            raise ValueError("counters must be non-negative")


def servo_command(obs: RopePairObservation | None, mission: MissionState, gains: GainConfig,
                  pids: PidBank, dt: float, cam: CameraIntrinsics):
    """Map a rope observation to a velocity command; returns ``(command, pids)``.

    Each PID sees an error whose positive sign calls for a positive command:
    range excess drives surge toward the net, a rope midpoint right of ``cx``
    drives sway right, and a positive yaw drives a negative yaw rate.  Without
    an observation the vehicle holds (all zeros) and the PIDs are left as is.
    Descent is commanded only while tracking.
    """
    if dt <= 0:
        raise ValueError("dt must be positive")
    if obs is None or obs.distance_est is None:
        return ControlCommand(), pids
    surge_pid, surge = pid_step(pids.surge, obs.distance_est - mission.target_distance, dt)
    sway_pid, sway = pid_step(pids.sway, (obs.midpoint_u - cam.cx) / cam.width, dt)
    yaw_err = -obs.yaw_est if obs.yaw_est is not None else 0.0
    yaw_pid, yaw_rate = pid_step(pids.yaw, yaw_err, dt)
    heave = 0.0
    if mission.phase == Phase.TRACK:
        heave = min(1.0, max(-1.0, mission.descent_rate / gains.heave_v_max))
    cmd = ControlCommand(surge, sway, heave, yaw_rate).clipped()
    return cmd, PidBank(surge_pid, sway_pid, yaw_pid)


def _enter(mission, phase):
    return replace(mission, phase=phase, frames_in_phase=0)


def mission_step(mission: MissionState, obs: RopePairObservation | None, telemetry: Telemetry,
                 limits: MissionLimits = MissionLimits()) -> MissionState:
    if mission.phase in (Phase.DONE, Phase.ABORT):
        return mission
    if telemetry.depth >= mission.bottom_depth:
        return _enter(mission, Phase.DONE)
    m = replace(mission, frames_in_phase=mission.frames_in_phase + 1)
    valid = obs is not None
    if m.phase == Phase.ACQUIRE:
        streak = m.valid_streak + 1 if valid else 0
        m = replace(m, valid_streak=streak)
        if streak >= limits.acquire_frames:
            m = replace(_enter(m, Phase.TRACK), lost_frames=0)
    elif m.phase == Phase.TRACK:
        lost = 0 if valid else m.lost_frames + 1
        m = replace(m, lost_frames=lost)
        if lost >= limits.lost_frames:
            m = _enter(m, Phase.LOST)
    elif m.phase == Phase.LOST:
        if valid:
            m = replace(_enter(m, Phase.TRACK), lost_frames=0)
        else:
            m = replace(m, lost_frames=m.lost_frames + 1)
            if m.frames_in_phase > limits.abort_frames:
                m = _enter(m, Phase.ABORT)
    return m


# legal phase transitions, used to check mission logs
TRANSITIONS = {
    Phase.ACQUIRE: {Phase.ACQUIRE, Phase.TRACK, Phase.DONE},
    Phase.TRACK: {Phase.TRACK, Phase.LOST, Phase.DONE},
    Phase.LOST: {Phase.LOST, Phase.TRACK, Phase.ABORT, Phase.DONE},
    Phase.DONE: {Phase.DONE},
    Phase.ABORT: {Phase.ABORT},
}
