"""Core geometric and kinematic types: poses, plans, obstacles, clearance.

All types are immutable values after construction and safe to share across
threads.  Kinematics follow the explicit-Euler unicycle update (position
advances along the current heading, then the heading turns), which makes a
plan recovered from bare positions exactly self-consistent.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

TWO_PI = 2.0 * math.pi

# configurable defaults; obstacle radius is half a 0.33 m disk, the robot
# disk is half a 0.43 m chassis width plus margin
DEFAULT_OBSTACLE_RADIUS = 0.165
DEFAULT_ROBOT_RADIUS = 0.267
DEFAULT_DT = 0.1
DEFAULT_HORIZON = 50


def wrap_angle(a: float) -> float:
    """Normalize an angle to (-pi, pi]."""
    w = (a + math.pi) % TWO_PI - math.pi
    return math.pi if w == -math.pi else w


def wrap_angles(a: np.ndarray) -> np.ndarray:
    w = np.remainder(np.asarray(a, dtype=np.float64) + math.pi, TWO_PI) - math.pi
    return np.where(w == -math.pi, math.pi, w)


@dataclass(frozen=True)
class ActionLimits:
    v_max: float = 1.0
    w_max: float = 1.57

    def clamp(self, v: float, w: float) -> tuple[float, float]:
        return (
            min(max(v, -self.v_max), self.v_max),
            min(max(w, -self.w_max), self.w_max),
        )


DEFAULT_LIMITS = ActionLimits()


@dataclass(frozen=True)
class Pose:
    x: float = 0.0
    y: float = 0.0
    yaw: float = 0.0

    def __post_init__(self):
        object.__setattr__(self, "x", float(self.x))
        object.__setattr__(self, "y", float(self.y))
        object.__setattr__(self, "yaw", wrap_angle(float(self.yaw)))

    @property
    def xy(self) -> np.ndarray:
        return np.array([self.x, self.y])

    def as_array(self) -> np.ndarray:
        return np.array([self.x, self.y, self.yaw])


@dataclass(frozen=True)
class ControlAction:
    """A (v, w) twist command.  Planners and plan constructors enforce the
    configured limits; the raw value type stays unconstrained so kinematic
    utilities can integrate arbitrary twists."""

    v: float
    w: float

    def __post_init__(self):
        object.__setattr__(self, "v", float(self.v))
        object.__setattr__(self, "w", float(self.w))


def step_diff_drive(pose: Pose, u: ControlAction, dt: float) -> Pose:
    """One explicit-Euler unicycle step: advance along yaw, then turn."""
    if dt <= 0:
        raise ValueError("dt must be positive")
    return Pose(
        pose.x + u.v * math.cos(pose.yaw) * dt,
        pose.y + u.v * math.sin(pose.yaw) * dt,
        pose.yaw + u.w * dt,
    )


def integrate_controls(dt: float, actions: np.ndarray, start: Pose | None = None) -> np.ndarray:
    """Integrate a (T, 2) action sequence into (T, 3) poses.

    Row t of the result is the pose *before* applying action t, so the
    output aligns index-for-index with the actions.
    """
    actions = np.asarray(actions, dtype=np.float64)
    T = actions.shape[0]
    p = start or Pose()
    poses = np.empty((T, 3))
    poses[0] = (p.x, p.y, p.yaw)
    for t in range(T - 1):
        p = step_diff_drive(p, ControlAction(actions[t, 0], actions[t, 1]), dt)
        poses[t + 1] = (p.x, p.y, p.yaw)
    return poses


def transform_to_frame(frame: Pose, points: np.ndarray) -> np.ndarray:
    """Express world-frame points (..., 2) in ``frame``'s local frame."""
    pts = np.asarray(points, dtype=np.float64) - frame.xy
    c, s = math.cos(frame.yaw), math.sin(frame.yaw)
    rot = np.array([[c, s], [-s, c]])
    return pts @ rot.T


def transform_from_frame(frame: Pose, points: np.ndarray) -> np.ndarray:
    """Express ``frame``-local points (..., 2) in the world frame."""
    pts = np.asarray(points, dtype=np.float64)
    c, s = math.cos(frame.yaw), math.sin(frame.yaw)
    rot = np.array([[c, -s], [s, c]])
    return pts @ rot.T + frame.xy


class MotionPlan:
    """A length-T sequence of (pose, action) steps in the start frame.

    Invariants checked on construction: the first pose is the origin with
    zero yaw, actions respect the default limits, and Euler-integrating
    action t from pose t reproduces pose t+1 within 1e-6 m / 1e-6 rad.
    """

    __slots__ = ("dt", "poses", "actions")

    POSITION_TOL = 1e-6
    ANGLE_TOL = 1e-6

    def __init__(self, dt: float, poses: np.ndarray, actions: np.ndarray, validate: bool = True):
        self.dt = float(dt)
        self.poses = np.asarray(poses, dtype=np.float64)
        self.actions = np.asarray(actions, dtype=np.float64)
        if validate:
            self._validate()

    def _validate(self):
        if self.dt <= 0:
            raise ValueError("dt must be positive")
        if self.poses.ndim != 2 or self.poses.shape[1] != 3:
            raise ValueError("poses must be (T, 3)")
        if self.actions.shape != (self.poses.shape[0], 2):
            raise ValueError("actions must be (T, 2) aligned with poses")
        if self.T < 2:
            raise ValueError("a plan needs at least two steps")
        if np.max(np.abs(self.poses[0])) > 1e-9:
            raise ValueError("plans are expressed in the start frame: first pose must be the origin")
        if np.max(np.abs(self.actions[:, 0])) > DEFAULT_LIMITS.v_max + 1e-6:
            raise ValueError("linear velocity exceeds limit")
        if np.max(np.abs(self.actions[:, 1])) > DEFAULT_LIMITS.w_max + 1e-6:
            raise ValueError("angular velocity exceeds limit")
        # kinematic consistency of every step against the Euler update
        x, y, yaw = self.poses[:-1].T
        v, w = self.actions[:-1].T
        px = x + v * np.cos(yaw) * self.dt
        py = y + v * np.sin(yaw) * self.dt
        pyaw = yaw + w * self.dt
        pos_err = np.hypot(px - self.poses[1:, 0], py - self.poses[1:, 1])
        ang_err = np.abs(wrap_angles(pyaw - self.poses[1:, 2]))
        if pos_err.size and pos_err.max() > self.POSITION_TOL:
            raise ValueError(f"kinematic inconsistency: position error {pos_err.max():.2e}")
        if ang_err.size and ang_err.max() > self.ANGLE_TOL:
            raise ValueError(f"kinematic inconsistency: angle error {ang_err.max():.2e}")

    # ------------------------------------------------------------------

    @property
    def T(self) -> int:
        return self.poses.shape[0]

    @property
    def positions(self) -> np.ndarray:
        return self.poses[:, :2]

    @property
    def yaws(self) -> np.ndarray:
        return self.poses[:, 2]

    @property
    def velocities(self) -> np.ndarray:
        return self.actions

    def goal_pose(self) -> Pose:
        x, y, yaw = self.poses[-1]
        return Pose(x, y, yaw)

    def step(self, t: int) -> tuple[Pose, ControlAction]:
        x, y, yaw = self.poses[t]
        v, w = self.actions[t]
        return Pose(x, y, yaw), ControlAction(v, w)

    def channels(self) -> np.ndarray:
        """(4, T) array of the (x, y, v, w) channels."""
        return np.stack(
            [self.poses[:, 0], self.poses[:, 1], self.actions[:, 0], self.actions[:, 1]]
        )

    # ------------------------------------------------------------------
    # constructors
    # ------------------------------------------------------------------

    @classmethod
    def from_controls(cls, dt: float, actions: np.ndarray) -> "MotionPlan":
        poses = integrate_controls(dt, actions)
        return cls(dt, poses, np.asarray(actions, dtype=np.float64))

    @classmethod
    def from_segment(cls, dt: float, poses: np.ndarray, actions: np.ndarray) -> "MotionPlan":
        """Re-express a rollout segment in its own start frame."""
        poses = np.asarray(poses, dtype=np.float64)
        frame = Pose(*poses[0])
        xy = transform_to_frame(frame, poses[:, :2])
        yaw = wrap_angles(poses[:, 2] - frame.yaw)
        return cls(dt, np.column_stack([xy, yaw]), np.asarray(actions, dtype=np.float64))

    @classmethod
    def from_positions(cls, dt: float, xy: np.ndarray) -> "MotionPlan":
        """Recover a plan from bare positions by displacement differencing.

        Headings come from displacement directions, v from chord lengths,
        and w from wrapped heading differences; the last action repeats the
        previous one.  The result is re-expressed in its start frame and is
        exactly consistent under the Euler update.
        """
        xy = np.asarray(xy, dtype=np.float64)
        T = xy.shape[0]
        if T < 3:
            raise ValueError("need at least three positions")
        d = np.diff(xy, axis=0)
        norms = np.hypot(d[:, 0], d[:, 1])
        yaws = np.empty(T)
        heading = 0.0
        for t in range(T - 1):
            if norms[t] > 1e-12:
                heading = math.atan2(d[t, 1], d[t, 0])
            yaws[t] = heading
        yaws[T - 1] = yaws[T - 2]
        v = norms / dt
        w = wrap_angles(np.diff(yaws)) / dt  # (T-1,), zero on carried headings
        actions = np.column_stack([np.append(v, v[-1]), np.append(w, w[-1])])
        poses = np.column_stack([xy, yaws])
        return cls.from_segment(dt, poses, actions)


class ObstacleTimeline:
    """N circular obstacles with fixed radii moving at constant velocity."""

    __slots__ = ("starts", "velocities", "radii", "dt")

    def __init__(self, starts, velocities, radii, dt: float):
        self.starts = np.asarray(starts, dtype=np.float64).reshape(-1, 2)
        self.velocities = np.asarray(velocities, dtype=np.float64).reshape(-1, 2)
        radii = np.asarray(radii, dtype=np.float64).reshape(-1)
        if radii.size == 1 and self.starts.shape[0] > 1:
            radii = np.full(self.starts.shape[0], radii[0])
        self.radii = radii
        self.dt = float(dt)
        if self.velocities.shape != self.starts.shape:
            raise ValueError("starts and velocities must align")
        if self.radii.shape[0] != self.starts.shape[0]:
            raise ValueError("radii must align with obstacles")
        if np.any(self.radii <= 0):
            raise ValueError("radii must be positive")

    @property
    def n(self) -> int:
        return self.starts.shape[0]

    @classmethod
    def empty(cls, dt: float) -> "ObstacleTimeline":
        return cls(np.zeros((0, 2)), np.zeros((0, 2)), np.zeros(0) + 1.0, dt)

    def positions_at(self, t) -> np.ndarray:
        """Obstacle centers at step(s) t: (N, 2), or (T, N, 2) for arrays."""
        t = np.asarray(t, dtype=np.float64)
        if t.ndim == 0:
            return self.starts + self.velocities * (float(t) * self.dt)
        return self.starts[None] + self.velocities[None] * (t[:, None, None] * self.dt)

    def extended(self, starts, velocities, radii) -> "ObstacleTimeline":
        return ObstacleTimeline(
            np.vstack([self.starts, np.asarray(starts, dtype=np.float64).reshape(-1, 2)]),
            np.vstack([self.velocities, np.asarray(velocities, dtype=np.float64).reshape(-1, 2)]),
            np.concatenate([self.radii, np.asarray(radii, dtype=np.float64).reshape(-1)]),
            self.dt,
        )


def obstacle_position(timeline: ObstacleTimeline, i: int, t: int) -> tuple[float, float]:
    """Center of obstacle i at step t under first-order dynamics."""
    if not 0 <= i < timeline.n:
        raise IndexError(f"obstacle index {i} out of range for N={timeline.n}")
    p = timeline.starts[i] + timeline.velocities[i] * (t * timeline.dt)
    return float(p[0]), float(p[1])


def clearance_distance(
    plan: MotionPlan, timeline: ObstacleTimeline, robot_radius: float = DEFAULT_ROBOT_RADIUS
) -> float:
    """Signed minimum clearance between the robot disk and all obstacle disks.

    Minimum over timesteps of center distance minus both radii; negative
    means some timestep is in collision.  Empty timelines give +inf.
    """
    if abs(plan.dt - timeline.dt) > 1e-12:
        raise ValueError("horizon mismatch: plan and timeline disagree on dt")
    if timeline.n == 0:
        return float("inf")
    centers = timeline.positions_at(np.arange(plan.T))  # (T, N, 2)
    diff = centers - plan.positions[:, None, :]
    dist = np.hypot(diff[..., 0], diff[..., 1]) - timeline.radii[None, :] - robot_radius
    return float(dist.min())


# ----------------------------------------------------------------------
# benchmark environment description
# ----------------------------------------------------------------------

SCRIPT_KINDS = ("constant", "bounce", "sine", "retarget")


@dataclass(frozen=True)
class ObstacleScript:
    """Parametric motion profile for one scripted benchmark obstacle."""

    kind: str
    x0: float
    y0: float
    speed: float
    heading: float
    radius: float = DEFAULT_OBSTACLE_RADIUS
    amplitude: float = 0.0  # sine: heading swing, rad
    period: float = 4.0  # sine: seconds per swing cycle
    retarget_lo: float = 1.0  # retarget: seconds between heading draws
    retarget_hi: float = 3.0
    seed: int = 0

    def __post_init__(self):
        if self.kind not in SCRIPT_KINDS:
            raise ValueError(f"unknown script kind {self.kind!r}")
        for name in ("x0", "y0", "speed", "heading", "radius", "amplitude",
                     "period", "retarget_lo", "retarget_hi"):
            object.__setattr__(self, name, float(getattr(self, name)))
        object.__setattr__(self, "seed", int(self.seed))


@dataclass(frozen=True)
class EnvSpec:
    """One benchmark environment: arena, walls, scripted obstacles, task."""

    name: str
    bounds: tuple[float, float, float, float]  # xmin, xmax, ymin, ymax
    walls: tuple[tuple[float, float, float, float], ...]
    scripts: tuple[ObstacleScript, ...]
    start: Pose
    goal: Pose
    seed: int

    def __post_init__(self):
        object.__setattr__(self, "bounds", tuple(float(b) for b in self.bounds))
        object.__setattr__(
            self, "walls", tuple(tuple(float(x) for x in w) for w in self.walls)
        )
        object.__setattr__(self, "seed", int(self.seed))
        xmin, xmax, ymin, ymax = self.bounds
        for p, label in ((self.start, "start"), (self.goal, "goal")):
            if not (xmin < p.x < xmax and ymin < p.y < ymax):
                raise ValueError(f"{label} pose lies outside the arena")

    @property
    def n_obstacles(self) -> int:
        return len(self.scripts)

    def wall_array(self) -> np.ndarray:
        return np.asarray(self.walls, dtype=np.float64).reshape(-1, 4)
