"""Rigid-body quadrotor model with quaternion attitude.

State layout (13 entries, scalar-first Hamilton quaternion, world to body)::

    x = [p_WB (3), v_WB (3), q_WB (4), omega_B (3)]

The 12-entry analysis state swaps the quaternion for ZYX Euler angles::

    s = [p (3), v (3), (roll, pitch, yaw) (3), omega_B (3)]
"""

from __future__ import annotations

import logging
from dataclasses import dataclass

import numpy as np

logger = logging.getLogger(__name__)

GRAVITY = 9.81

POS = slice(0, 3)
VEL = slice(3, 6)
QUAT = slice(6, 10)
OMEGA = slice(10, 13)

# Euler-form (12-dim) layout
E_POS = slice(0, 3)
E_VEL = slice(3, 6)
E_ATT = slice(6, 9)
E_OMEGA = slice(9, 12)

STATE_NAMES = ("x", "y", "z", "vx", "vy", "vz", "roll", "pitch", "yaw", "wx", "wy", "wz")

_UNIT_TOL = 1e-6
_GIMBAL_TOL = 1e-6


@dataclass(frozen=True)
class QuadParams:
    """Physical parameters. Defaults are the small quadrotor used throughout.

    ``c_tau`` (rotor drag-torque to thrust ratio, metres) is not part of the
    published parameter table; 0.01 is a typical small-rotor value.
    """

    m: float = 0.18
    g: float = GRAVITY
    J: tuple[float, float, float] = (0.00025, 0.000232, 0.0003738)
    l: float = 0.086
    c_tau: float = 0.01

    def __post_init__(self):
        if self.m <= 0 or self.l <= 0 or self.c_tau <= 0 or self.g <= 0:
            raise ValueError("m, g, l and c_tau must be positive")
        if len(self.J) != 3 or min(self.J) <= 0:
            raise ValueError("J must hold three positive diagonal entries")

    @property
    def inertia(self) -> np.ndarray:
        return np.diag(self.J)

    @property
    def hover_thrust(self) -> float:
        """Per-rotor thrust balancing gravity."""
        return self.m * self.g / 4.0

    def hover_command(self) -> np.ndarray:
        return np.full(4, self.hover_thrust)

    def to_dict(self) -> dict:
        return {"m": self.m, "g": self.g, "J": list(self.J), "l": self.l, "c_tau": self.c_tau}

    @classmethod
    def from_dict(cls, d: dict) -> "QuadParams":
        d = dict(d)
        if "J" in d:
            d["J"] = tuple(float(j) for j in d["J"])
        return cls(**d)


# ---------------------------------------------------------------------------
# Quaternion / rotation helpers
# ---------------------------------------------------------------------------

def quat_mul(q1, q2) -> np.ndarray:
    """Hamilton product ``q1 ⊗ q2`` with scalar-first quaternions."""
    w1, x1, y1, z1 = q1
    w2, x2, y2, z2 = q2
    return np.array([
        w1 * w2 - x1 * x2 - y1 * y2 - z1 * z2,
        w1 * x2 + x1 * w2 + y1 * z2 - z1 * y2,
        w1 * y2 - x1 * z2 + y1 * w2 + z1 * x2,
        w1 * z2 + x1 * y2 - y1 * x2 + z1 * w2,
    ])


def quat_conj(q) -> np.ndarray:
    return np.array([q[0], -q[1], -q[2], -q[3]])


def _check_unit(q, tol=_UNIT_TOL):
    n = np.linalg.norm(q)
    if abs(n - 1.0) > tol:
        raise ValueError(f"quaternion is not unit length (norm={n:.9g})")


def rotate_vector(q, v) -> np.ndarray:
    """Rotate a body-frame vector into the world frame: ``q v q*``."""
    q = np.asarray(q, dtype=float)
    _check_unit(q)
    w = q[0]
    u = q[1:]
    v = np.asarray(v, dtype=float)
    # expanded form of q (0, v) q*
    t = 2.0 * np.cross(u, v)
    return v + w * t + np.cross(u, t)


def quat_to_rotmat(q) -> np.ndarray:
    w, x, y, z = q
    return np.array([
        [1 - 2 * (y * y + z * z), 2 * (x * y - w * z), 2 * (x * z + w * y)],
        [2 * (x * y + w * z), 1 - 2 * (x * x + z * z), 2 * (y * z - w * x)],
        [2 * (x * z - w * y), 2 * (y * z + w * x), 1 - 2 * (x * x + y * y)],
    ])


def euler_to_rotmat(roll, pitch, yaw) -> np.ndarray:
    """``R = Rz(yaw) @ Ry(pitch) @ Rx(roll)`` (body to world)."""
    cr, sr = np.cos(roll), np.sin(roll)
    cp, sp = np.cos(pitch), np.sin(pitch)
    cy, sy = np.cos(yaw), np.sin(yaw)
    return np.array([
        [cy * cp, cy * sp * sr - sy * cr, cy * sp * cr + sy * sr],
        [sy * cp, sy * sp * sr + cy * cr, sy * sp * cr - cy * sr],
        [-sp, cp * sr, cp * cr],
    ])


def euler_to_quat(roll, pitch, yaw) -> np.ndarray:
    cr, sr = np.cos(roll / 2), np.sin(roll / 2)
    cp, sp = np.cos(pitch / 2), np.sin(pitch / 2)
    cy, sy = np.cos(yaw / 2), np.sin(yaw / 2)
    return np.array([
        cr * cp * cy + sr * sp * sy,
        sr * cp * cy - cr * sp * sy,
        cr * sp * cy + sr * cp * sy,
        cr * cp * sy - sr * sp * cy,
    ])


def quat_to_euler(q) -> np.ndarray:
    """ZYX Euler angles ``(roll, pitch, yaw)`` of a unit quaternion.

    At gimbal lock (pitch within 1e-6 rad of ±π/2) roll is set to zero and the
    whole rotation about the vertical is assigned to yaw.
    """
    q = np.asarray(q, dtype=float)
    _check_unit(q)
    w, x, y, z = q
    sinp = 2.0 * (w * y - x * z)
    sinp = min(1.0, max(-1.0, sinp))
    pitch = np.arcsin(sinp)
    if abs(abs(pitch) - np.pi / 2) < _GIMBAL_TOL:
        logger.debug("gimbal lock at pitch=%.9f, roll set to 0", pitch)
        roll = 0.0
        # R[0,1] = -sin(yaw) cos(roll) + ..., with roll = 0 yaw follows from R's first column block
        R = quat_to_rotmat(q)
        yaw = np.arctan2(-R[0, 1], R[1, 1])
    else:
        roll = np.arctan2(2.0 * (w * x + y * z), 1.0 - 2.0 * (x * x + y * y))
        yaw = np.arctan2(2.0 * (w * z + x * y), 1.0 - 2.0 * (y * y + z * z))
    return np.array([_wrap(roll), pitch, _wrap(yaw)])


def _wrap(a):
    """Wrap to (-π, π]."""
    a = np.mod(a + np.pi, 2 * np.pi) - np.pi
    return np.pi if a == -np.pi else a


def skew(w) -> np.ndarray:
    return np.array([
        [0.0, -w[2], w[1]],
        [w[2], 0.0, -w[0]],
        [-w[1], w[0], 0.0],
    ])


# ---------------------------------------------------------------------------
# Rotor mixing and dynamics
# ---------------------------------------------------------------------------

def mixer_matrix(params: QuadParams) -> np.ndarray:
    """4x4 map from rotor thrusts to (total thrust, tau_x, tau_y, tau_z)."""
    l, c = params.l, params.c_tau
    return np.array([
        [1.0, 1.0, 1.0, 1.0],
        [-l, -l, l, l],
        [-l, l, l, -l],
        [-c, c, -c, c],
    ])


def mix_rotors(u, params: QuadParams) -> tuple[np.ndarray, np.ndarray]:
    """Collective body thrust and body torques from four rotor thrusts."""
    T0, T1, T2, T3 = u
    l, c = params.l, params.c_tau
    T_B = np.array([0.0, 0.0, T0 + T1 + T2 + T3])
    tau_B = np.array([
        l * (-T0 - T1 + T2 + T3),
        l * (-T0 + T1 + T2 - T3),
        c * (-T0 + T1 - T2 + T3),
    ])
    return T_B, tau_B


def clamp_thrusts(u) -> np.ndarray:
    """Rotors cannot pull; negative commands are clipped to zero."""
    u = np.asarray(u, dtype=float)
    if np.any(u < 0.0):
        logger.warning("negative rotor thrust %s clamped to 0", np.array2string(u, precision=4))
        return np.maximum(u, 0.0)
    return u


def dynamics_rhs(x, u, params: QuadParams) -> np.ndarray:
    """Time derivative of the 13-dim state under rotor thrusts ``u``."""
    q = x[QUAT]
    w = x[OMEGA]
    T_B, tau_B = mix_rotors(u, params)
    J = np.asarray(params.J)

    dx = np.empty(13)
    dx[POS] = x[VEL]
    dx[VEL] = rotate_vector(q, T_B) / params.m
    dx[5] -= params.g
    dx[QUAT] = 0.5 * quat_mul(q, (0.0, w[0], w[1], w[2]))
    dx[OMEGA] = (tau_B - np.cross(w, J * w)) / J
    return dx


def _rhs_unchecked(x, u, params):
    # same as dynamics_rhs but skips the unit-norm check, since RK4 stages
    # evaluate at slightly non-unit intermediate quaternions
    q = x[QUAT]
    w = x[OMEGA]
    T_B, tau_B = mix_rotors(u, params)
    J = np.asarray(params.J)
    qw, qv = q[0], q[1:]
    t = 2.0 * np.cross(qv, T_B)
    dx = np.empty(13)
    dx[POS] = x[VEL]
    dx[VEL] = (T_B + qw * t + np.cross(qv, t)) / params.m
    dx[5] -= params.g
    dx[QUAT] = 0.5 * quat_mul(q, (0.0, w[0], w[1], w[2]))
    dx[OMEGA] = (tau_B - np.cross(w, J * w)) / J
    return dx


def rk4_step(x, u, dt: float, params: QuadParams) -> np.ndarray:
    """One classic RK4 step with ``u`` held constant; renormalizes ``q``."""
    if dt <= 0:
        raise ValueError("dt must be positive")
    x = np.asarray(x, dtype=float)
    u = clamp_thrusts(u)
    k1 = _rhs_unchecked(x, u, params)
    k2 = _rhs_unchecked(x + 0.5 * dt * k1, u, params)
    k3 = _rhs_unchecked(x + 0.5 * dt * k2, u, params)
    k4 = _rhs_unchecked(x + dt * k3, u, params)
    xn = x + (dt / 6.0) * (k1 + 2.0 * k2 + 2.0 * k3 + k4)
    xn[QUAT] /= np.linalg.norm(xn[QUAT])
    return xn


# ---------------------------------------------------------------------------
# State construction / conversion
# ---------------------------------------------------------------------------

def make_state(p=(0, 0, 0), v=(0, 0, 0), q=(1, 0, 0, 0), omega=(0, 0, 0)) -> np.ndarray:
    x = np.empty(13)
    x[POS] = p
    x[VEL] = v
    x[QUAT] = q
    x[OMEGA] = omega
    _check_unit(x[QUAT], 1e-9)
    return x


def to_euler_state(x) -> np.ndarray:
    """13-dim quaternion state -> 12-dim Euler analysis state."""
    s = np.empty(12)
    s[E_POS] = x[POS]
    s[E_VEL] = x[VEL]
    s[E_ATT] = quat_to_euler(x[QUAT])
    s[E_OMEGA] = x[OMEGA]
    return s


def from_euler_state(s) -> np.ndarray:
    return make_state(s[E_POS], s[E_VEL], euler_to_quat(*s[E_ATT]), s[E_OMEGA])

