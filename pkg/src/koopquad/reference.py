"""Helical reference trajectories and cascaded PD/PID tracking control."""

from __future__ import annotations

import logging
from dataclasses import dataclass, field, replace

import numpy as np

from . import quadsim as qs
from .quadsim import QuadParams

logger = logging.getLogger(__name__)


@dataclass(frozen=True)
class HelixSpec:
    """Parameters of one helix ``center + (r cos wt, r sin wt, h t / T)``.

    ``seed`` drives the optional input dither applied while collecting data.
    """

    radius: float = 1.0
    total_height: float = 1.0
    duration: float = 30.0
    dt: float = 0.01
    angular_rate: float = 0.5
    center: tuple[float, float, float] = (0.0, 0.0, 0.0)
    seed: int = 0

    @property
    def n_steps(self) -> int:
        return int(round(self.duration / self.dt))

    def to_dict(self) -> dict:
        return {
            "radius": self.radius, "total_height": self.total_height,
            "duration": self.duration, "dt": self.dt,
            "angular_rate": self.angular_rate, "center": list(self.center),
            "seed": self.seed,
        }


@dataclass
class Trajectory:
    timestamps: np.ndarray
    ref_position: np.ndarray      # (N, 3)
    ref_velocity: np.ndarray      # (N, 3)
    ref_yaw: np.ndarray           # (N,)
    ref_acceleration: np.ndarray  # (N, 3)

    @property
    def dt(self) -> float:
        return float(self.timestamps[1] - self.timestamps[0])

    def __len__(self) -> int:
        return len(self.timestamps)

    def sample(self, k: int) -> "RefSample":
        return RefSample(self.ref_position[k], self.ref_velocity[k],
                         self.ref_acceleration[k], float(self.ref_yaw[k]))


@dataclass(frozen=True)
class RefSample:
    position: np.ndarray
    velocity: np.ndarray
    acceleration: np.ndarray = field(default_factory=lambda: np.zeros(3))
    yaw: float = 0.0


@dataclass(frozen=True)
class PidGains:
    """Cascaded position/attitude gains.

    The outer loop maps position error to a desired acceleration, the inner
    loop maps ZYX Euler-angle error to an angular acceleration. Gains are per
    axis. Integral terms default to zero, which gives the PD collector.
    """

    kp_pos: tuple = (4.0, 4.0, 6.0)
    kd_pos: tuple = (3.0, 3.0, 4.0)
    ki_pos: tuple = (0.0, 0.0, 0.0)
    kp_att: tuple = (120.0, 120.0, 40.0)
    kd_att: tuple = (18.0, 18.0, 10.0)
    ki_att: tuple = (0.0, 0.0, 0.0)
    max_tilt: float = 0.6
    max_rotor_thrust: float = 1.5
    integral_limit: float = 1.0
    feedforward: bool = True

    def __post_init__(self):
        for name in ("kp_pos", "kd_pos", "ki_pos", "kp_att", "kd_att", "ki_att"):
            if min(getattr(self, name)) < 0:
                raise ValueError(f"{name} must be non-negative")

    def with_integral(self, ki_pos=(0.6, 0.6, 1.0), ki_att=(0.0, 0.0, 0.0)) -> "PidGains":
        return replace(self, ki_pos=tuple(ki_pos), ki_att=tuple(ki_att))

    def to_dict(self) -> dict:
        return {k: (list(v) if isinstance(v, tuple) else v) for k, v in self.__dict__.items()}

    @classmethod
    def from_dict(cls, d: dict) -> "PidGains":
        return cls(**{k: (tuple(v) if isinstance(v, list) else v) for k, v in d.items()})


# ---------------------------------------------------------------------------
# Trajectories
# ---------------------------------------------------------------------------

def gen_helix(spec: HelixSpec) -> Trajectory:
    if spec.dt <= 0 or spec.duration <= 0:
        raise ValueError("dt and duration must be positive")
    n = spec.n_steps
    t = np.arange(n + 1) * spec.dt
    r, w = spec.radius, spec.angular_rate
    climb = spec.total_height / spec.duration
    c, s = np.cos(w * t), np.sin(w * t)
    center = np.asarray(spec.center, dtype=float)

    pos = np.column_stack([r * c, r * s, climb * t]) + center
    vel = np.column_stack([-r * w * s, r * w * c, np.full_like(t, climb)])
    acc = np.column_stack([-r * w * w * c, -r * w * w * s, np.zeros_like(t)])
    return Trajectory(t, pos, vel, np.zeros_like(t), acc)


def sample_random_specs(n: int, seed: int, radius=(1.0, 5.0), height=(1.0, 6.0),
                        **overrides) -> list[HelixSpec]:
    """Draw ``n`` helices with uniform radius and height; deterministic in ``seed``."""
    if n < 1:
        raise ValueError("n must be >= 1")
    rng = np.random.default_rng(seed)
    radii = rng.uniform(*radius, size=n)
    heights = rng.uniform(*height, size=n)
    child_seeds = rng.integers(0, 2**31 - 1, size=n)
    return [
        HelixSpec(radius=float(r), total_height=float(h), seed=int(s), **overrides)
        for r, h, s in zip(radii, heights, child_seeds)
    ]


def desired_attitude(force_w, yaw: float) -> tuple[float, float]:
    """Roll and pitch aligning the body z-axis with ``force_w`` at the given yaw."""
    cy, sy = np.cos(yaw), np.sin(yaw)
    fx = cy * force_w[0] + sy * force_w[1]
    fy = -sy * force_w[0] + cy * force_w[1]
    fz = force_w[2]
    pitch = np.arctan2(fx, fz)
    roll = np.arctan2(-fy, np.hypot(fx, fz))
    return float(roll), float(pitch)


def reference_states(traj: Trajectory, params: QuadParams) -> np.ndarray:
    """Full 12-dim Euler-form reference along ``traj`` via differential flatness.

    Attitude is the one whose thrust axis produces the reference acceleration;
    body rates come from differentiating the Euler angles on the time grid.
    """
    n = len(traj)
    att = np.zeros((n, 3))
    g_w = np.array([0.0, 0.0, -params.g])
    for k in range(n):
        f = params.m * (traj.ref_acceleration[k] - g_w)
        att[k, :2] = desired_attitude(f, traj.ref_yaw[k])
        att[k, 2] = traj.ref_yaw[k]
    datt = np.gradient(att, traj.timestamps, axis=0, edge_order=2)
    roll, pitch = att[:, 0], att[:, 1]
    droll, dpitch, dyaw = datt.T
    omega = np.column_stack([
        droll - np.sin(pitch) * dyaw,
        np.cos(roll) * dpitch + np.sin(roll) * np.cos(pitch) * dyaw,
        -np.sin(roll) * dpitch + np.cos(roll) * np.cos(pitch) * dyaw,
    ])
    return np.hstack([traj.ref_position, traj.ref_velocity, att, omega])


# ---------------------------------------------------------------------------
# Control
# ---------------------------------------------------------------------------

def _wrap(a):
    return (a + np.pi) % (2 * np.pi) - np.pi


class PidController:
    """Cascaded position -> attitude controller returning rotor thrusts.

    Holds the integral states; with zero ``ki`` gains it is a pure PD law and
    the integrators stay at zero.
    """

    def __init__(self, gains: PidGains, params: QuadParams, dt: float = 0.01):
        self.gains = gains
        self.params = params
        self.dt = dt
        self._minv = np.linalg.inv(qs.mixer_matrix(params))
        self.reset()

    def reset(self):
        self.int_pos = np.zeros(3)
        self.int_att = np.zeros(3)
        self.saturated = 0

    def __call__(self, x, ref: RefSample) -> np.ndarray:
        g = self.gains
        p = self.params
        pos, vel, q, w = x[qs.POS], x[qs.VEL], x[qs.QUAT], x[qs.OMEGA]

        e_pos = np.asarray(ref.position) - pos
        e_vel = np.asarray(ref.velocity) - vel
        if any(g.ki_pos):
            self.int_pos = np.clip(self.int_pos + e_pos * self.dt, -g.integral_limit, g.integral_limit)
        acc = np.asarray(g.kp_pos) * e_pos + np.asarray(g.kd_pos) * e_vel + np.asarray(g.ki_pos) * self.int_pos
        if g.feedforward:
            acc = acc + np.asarray(ref.acceleration)
        force = p.m * (acc + np.array([0.0, 0.0, p.g]))
        force[2] = max(force[2], 0.0)

        roll_d, pitch_d = desired_attitude(force, ref.yaw)
        roll_d = float(np.clip(roll_d, -g.max_tilt, g.max_tilt))
        pitch_d = float(np.clip(pitch_d, -g.max_tilt, g.max_tilt))

        R = qs.quat_to_rotmat(q)
        thrust = max(float(force @ R[:, 2]), 0.0)

        att = qs.quat_to_euler(q)
        e_att = _wrap(np.array([roll_d, pitch_d, ref.yaw]) - att)
        if any(g.ki_att):
            self.int_att = np.clip(self.int_att + e_att * self.dt, -g.integral_limit, g.integral_limit)
        J = np.asarray(p.J)
        alpha = np.asarray(g.kp_att) * e_att - np.asarray(g.kd_att) * w + np.asarray(g.ki_att) * self.int_att
        tau = J * alpha + np.cross(w, J * w)

        u = self._minv @ np.concatenate([[thrust], tau])
        u_sat = np.clip(u, 0.0, g.max_rotor_thrust)
        if np.any(u_sat != u):
            self.saturated += 1
        return u_sat


def pd_track(x, ref: RefSample, gains: PidGains, params: QuadParams) -> np.ndarray:
    """Stateless PD tracking law (integral gains are ignored)."""
    pd = replace(gains, ki_pos=(0.0, 0.0, 0.0), ki_att=(0.0, 0.0, 0.0))
    return PidController(pd, params)(x, ref)


def initial_state(traj: Trajectory) -> np.ndarray:
    """At the first reference point, at rest, level."""
    return qs.make_state(p=traj.ref_position[0])


# ---------------------------------------------------------------------------
# Data collection
# ---------------------------------------------------------------------------

DIVERGENCE_NORM = 1e6


class DivergenceError(RuntimeError):
    def __init__(self, step: int, msg: str = ""):
        super().__init__(msg or f"state diverged at step {step}")
        self.step = step


def simulate_tracking(traj: Trajectory, controller, params: QuadParams, steps: int | None = None,
                      x0=None, dither: float = 0.0, rng=None):
    """Closed-loop rollout of ``controller`` along ``traj``.

    ``dither`` adds zero-mean Gaussian noise (newtons, per rotor) to the applied
    thrusts, drawn from ``rng``; the logged input is the one actually applied.
    Returns a :class:`~koopquad.dataset.TrajectoryLog`.
    """
    from .dataset import TrajectoryLog

    dt = traj.dt
    steps = len(traj) - 1 if steps is None else steps
    if steps > len(traj) - 1:
        raise ValueError("steps exceed the reference length")
    x = initial_state(traj) if x0 is None else np.asarray(x0, dtype=float)
    xs = np.empty((steps + 1, 13))
    us = np.empty((steps, 4))
    xs[0] = x
    diverged = None
    for k in range(steps):
        u = controller(x, traj.sample(k))
        if dither > 0.0:
            u = np.maximum(u + rng.normal(0.0, dither, size=4), 0.0)
        x = qs.rk4_step(x, u, dt, params)
        if not np.all(np.isfinite(x)) or np.linalg.norm(x) > DIVERGENCE_NORM:
            diverged = k + 1
            logger.error("rollout diverged at step %d", diverged)
            xs, us = xs[: k + 1], us[:k]
            break
        us[k] = u
        xs[k + 1] = x
    euler = np.array([qs.to_euler_state(s) for s in xs])
    return TrajectoryLog(traj.timestamps[: len(xs)].copy(), euler, us, xs, diverged)


def collect_dataset(specs, gains: PidGains, params: QuadParams, dither: float = 0.0):
    """Simulate every helix under PD tracking and stack the logs in spec order.

    A diverged trajectory is dropped (and reported in ``meta['diverged']``).
    """
    from .dataset import SnapshotDataset

    if not specs:
        raise ValueError("need at least one helix spec")
    logs, diverged = [], []
    for i, spec in enumerate(specs):
        traj = gen_helix(spec)
        ctrl = PidController(replace(gains, ki_pos=(0.0,) * 3, ki_att=(0.0,) * 3), params, spec.dt)
        rng = np.random.default_rng(spec.seed)
        log = simulate_tracking(traj, ctrl, params, dither=dither, rng=rng)
        if log.diverged_at is not None:
            diverged.append({"trajectory": i, "step": log.diverged_at})
            continue
        logs.append(log)
    return SnapshotDataset(logs, {"diverged": diverged, "specs": [s.to_dict() for s in specs]})
