"""Keyframe pose plus constant-velocity dynamics.

Velocities live in the keyframe camera frame: a displacement ``v2t(v*dt, w*dt)``
is left-multiplied onto the world-to-camera pose.
"""

from dataclasses import dataclass, field

import numpy as np

from .lie import orthonormalize, v2t


@dataclass(frozen=True)
class PoseIncrement:
    delta_t: np.ndarray = field(default_factory=lambda: np.zeros(3))
    delta_theta: np.ndarray = field(default_factory=lambda: np.zeros(3))

    def __post_init__(self):
        object.__setattr__(self, "delta_t", np.asarray(self.delta_t, dtype=np.float64))
        object.__setattr__(self, "delta_theta", np.asarray(self.delta_theta, dtype=np.float64))
        if not (np.all(np.isfinite(self.delta_t)) and np.all(np.isfinite(self.delta_theta))):
            raise ValueError("pose increment must be finite")
        if np.linalg.norm(self.delta_theta) >= np.pi:
            raise ValueError("rotation increment must be smaller than pi")

    @classmethod
    def from_vector(cls, x):
        x = np.asarray(x, dtype=np.float64)
        return cls(x[:3], x[3:6])

    def as_transform(self):
        return v2t(self.delta_t, self.delta_theta)


@dataclass(frozen=True)
class MotionState:
    """World-to-camera keyframe pose with linear and angular velocity."""

    T_cw: np.ndarray
    v: np.ndarray = field(default_factory=lambda: np.zeros(3))
    omega: np.ndarray = field(default_factory=lambda: np.zeros(3))

    def __post_init__(self):
        T = np.array(self.T_cw, dtype=np.float64)
        if T.shape != (4, 4):
            raise ValueError("T_cw must be a 4x4 matrix")
        object.__setattr__(self, "T_cw", T)
        object.__setattr__(self, "v", np.asarray(self.v, dtype=np.float64).copy())
        object.__setattr__(self, "omega", np.asarray(self.omega, dtype=np.float64).copy())

    @property
    def R_cw(self):
        return self.T_cw[:3, :3]

    @property
    def t_cw(self):
        return self.T_cw[:3, 3]

    def with_velocity(self, v, omega):
        return MotionState(self.T_cw, v, omega)


def velocity_transform(v, omega, scale):
    """``v2t(v*scale, omega*scale)``; the T1 factor of the extended pose."""
    return v2t(np.asarray(v) * scale, np.asarray(omega) * scale)


def boundary_poses(state, delta_tau):
    """Poses at the first and last event of an accumulation interval."""
    if delta_tau < 0:
        raise ValueError("delta_tau must be non-negative")
    if delta_tau == 0:
        return state.T_cw.copy(), state.T_cw.copy()
    half = 0.5 * delta_tau
    T_first = velocity_transform(state.v, state.omega, -half) @ state.T_cw
    T_last = velocity_transform(state.v, state.omega, half) @ state.T_cw
    return T_first, T_last


def extended_factors(state, inc, delta_tau, sign):
    """The three factors (T1, T2, T3) whose product is the extended pose."""
    if sign not in (-1, 1):
        raise ValueError("sign must be +1 or -1")
    T1 = velocity_transform(state.v, state.omega, sign * 0.5 * delta_tau)
    T2 = inc.as_transform() if inc is not None else np.eye(4)
    return T1, T2, state.T_cw


def compose_extended(state, inc, delta_tau, sign):
    """Extended pose T1 @ T2 @ T3; ``sign`` picks the last (+1) or first (-1) boundary."""
    T1, T2, T3 = extended_factors(state, inc, delta_tau, sign)
    return T1 @ T2 @ T3


def predict_next(state, dt):
    """Constant-velocity prediction of the next keyframe state."""
    if dt < 0:
        raise ValueError("dt must be non-negative")
    if dt == 0:
        return MotionState(state.T_cw, state.v, state.omega)
    return MotionState(velocity_transform(state.v, state.omega, dt) @ state.T_cw,
                       state.v, state.omega)


def apply_increment(state, inc):
    """Fold a pose increment into the keyframe pose by left multiplication."""
    T = inc.as_transform() @ state.T_cw
    T[:3, :3] = orthonormalize(T[:3, :3])
    return MotionState(T, state.v, state.omega)
