"""Fixed differentiable trajectory decoder.

Given sampled dynamic obstacles, reconstructs the plan that is optimal for
them by unrolling gradient descent on

    J = w_s * sum_t |x[t+1] - 2 x[t] + x[t-1]|^2
      + w_c * sum_t sum_i max(c - d(x[t], C[t,i]), 0)^2
      + w_e * (|x[0] - start|^2 + |x[T-1] - goal|^2)

with waypoints initialized on the straight start->goal line.  The descent
direction is the hand-derived gradient of J expressed in tape operations,
so every unrolled step stays differentiable with respect to the obstacle
starts and velocities.  Obstacle distances are time-synchronized: waypoint
t is penalized against the obstacle positions at step t.

Step-size safeguard: any candidate step that would increase J halves the
step size and retries, so the cost trace is non-increasing.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import DualArray, DualValue, Tape
from .world import MotionPlan

_DIST_EPS = 1e-6  # inside sqrt; bounds 1/d chain factors near contact
_HEADING_DOT_FLOOR = 1e-4  # chord dot-product floor for angle extraction


class DecoderDivergenceError(RuntimeError):
    """Unrolling produced a non-finite cost or gradient; reduce the step size."""


@dataclass(frozen=True)
class DecoderConfig:
    iterations: int = 100
    step_size: float = 0.05
    smooth_weight: float = 1.0
    collision_weight: float = 10.0
    endpoint_weight: float = 10.0
    clearance: float = 0.5
    max_halvings: int = 30

    def __post_init__(self):
        if self.iterations < 1:
            raise ValueError("iterations must be >= 1")
        if self.step_size <= 0:
            raise ValueError("step_size must be positive")
        if min(self.smooth_weight, self.collision_weight, self.endpoint_weight) < 0:
            raise ValueError("weights must be non-negative")


@dataclass
class ReconstructedPlan:
    """Decoder output: tape-recorded waypoints and derived velocities."""

    positions: DualArray  # (T, 2)
    v: DualArray  # (T-1,) chord speeds
    w: DualArray  # (T-2,) heading rates from displacement directions
    dt: float
    final_cost: DualValue
    cost_trace: np.ndarray

    @property
    def T(self) -> int:
        return self.positions.shape[0]

    def to_motion_plan(self) -> MotionPlan:
        """Convert to a MotionPlan; raises if the path breaks action limits."""
        return MotionPlan.from_positions(self.dt, self.positions.values)


def obstacle_track(starts: DualArray, vels: DualArray, T: int, dt: float) -> DualArray:
    """Tape-recorded obstacle centers, (T, N, 2), under constant velocity."""
    times = (np.arange(T) * dt)[:, None, None]
    return starts + vels * times


def _cost_values(x, obs, start, goal, cfg) -> float:
    """Numpy mirror of the decoder cost, used for the step-size safeguard."""
    s = x[2:] - 2.0 * x[1:-1] + x[:-2]
    J = cfg.smooth_weight * float(np.sum(s * s))
    if cfg.collision_weight > 0 and obs.shape[1] > 0:
        diff = x[:, None, :] - obs
        d = np.sqrt(diff[..., 0] ** 2 + diff[..., 1] ** 2 + _DIST_EPS)
        hinge = np.maximum(cfg.clearance - d, 0.0)
        J += cfg.collision_weight * float(np.sum(hinge * hinge))
    e0 = x[0] - start
    e1 = x[-1] - goal
    J += cfg.endpoint_weight * float(e0 @ e0 + e1 @ e1)
    return J


def _cost_tape(x: DualArray, obs: DualArray, start, goal, cfg) -> DualValue:
    s = (x[2:] - x[1:-1] * 2.0) + x[:-2]
    J = (s * s).sum() * cfg.smooth_weight
    if cfg.collision_weight > 0 and obs.shape[1] > 0:
        diff = x[:, None, :] - obs
        d = ad.sqrt((diff * diff).sum(axis=2) + _DIST_EPS)
        hinge = ad.relu(cfg.clearance - d)
        J = J + (hinge * hinge).sum() * cfg.collision_weight
    e0 = x[0] - start
    e1 = x[-1] - goal
    J = J + ((e0 * e0).sum() + (e1 * e1).sum()) * cfg.endpoint_weight
    return J


def _grad_tape(x: DualArray, obs: DualArray, start, goal, cfg, zero_id: int) -> DualArray:
    """Hand-derived dJ/dx as tape operations, (T, 2)."""
    tape = x.tape
    T = x.shape[0]

    def pad_rows(arr: DualArray, before: int, after: int) -> DualArray:
        ids = arr.ids
        blocks = []
        if before:
            blocks.append(np.full((before, ids.shape[1]), zero_id, dtype=np.int64))
        blocks.append(ids)
        if after:
            blocks.append(np.full((after, ids.shape[1]), zero_id, dtype=np.int64))
        return DualArray(tape, np.concatenate(blocks, axis=0))

    s = (x[2:] - x[1:-1] * 2.0) + x[:-2]  # (T-2, 2)
    g = (pad_rows(s, 0, 2) + pad_rows(s, 2, 0) - pad_rows(s, 1, 1) * 2.0) * (
        2.0 * cfg.smooth_weight
    )

    if cfg.collision_weight > 0 and obs.shape[1] > 0:
        diff = x[:, None, :] - obs  # (T, N, 2)
        d = ad.sqrt((diff * diff).sum(axis=2) + _DIST_EPS)  # (T, N)
        coef = (ad.relu(cfg.clearance - d) / d) * (-2.0 * cfg.collision_weight)
        gc = (diff * coef[:, :, None]).sum(axis=1)  # (T, 2)
        g = g + gc

    e0 = (x[0] - start) * (2.0 * cfg.endpoint_weight)  # (2,)
    e1 = (x[-1] - goal) * (2.0 * cfg.endpoint_weight)
    end_ids = np.concatenate(
        [
            e0.ids[None, :],
            np.full((T - 2, 2), zero_id, dtype=np.int64),
            e1.ids[None, :],
        ],
        axis=0,
    )
    return g + DualArray(tape, end_ids)


def decode(
    starts: DualArray,
    vels: DualArray,
    start_xy,
    goal_xy,
    T: int,
    dt: float,
    cfg: DecoderConfig = DecoderConfig(),
) -> ReconstructedPlan:
    """Reconstruct the plan that is optimal for the given obstacle motion.

    ``starts``/``vels`` are (N, 2) tape-recorded obstacle parameters;
    ``start_xy``/``goal_xy`` are fixed endpoint constants.  Deterministic
    given its inputs.
    """
    tape = starts.tape
    if vels.tape is not tape:
        raise ad.TapeMismatchError("starts and vels must live on one tape")
    start = np.asarray(start_xy, dtype=np.float64).reshape(2)
    goal = np.asarray(goal_xy, dtype=np.float64).reshape(2)

    obs = obstacle_track(starts, vels, T, dt)
    obs_vals = obs.values
    zero_id = tape.leaf(0.0).i

    line = start[None, :] + np.linspace(0.0, 1.0, T)[:, None] * (goal - start)[None, :]
    x = tape.leaves(line)

    eta = cfg.step_size
    J_prev = _cost_values(x.values, obs_vals, start, goal, cfg)
    trace = [J_prev]
    if not np.isfinite(J_prev):
        raise DecoderDivergenceError("non-finite cost at initialization")

    for _ in range(cfg.iterations):
        g = _grad_tape(x, obs, start, goal, cfg, zero_id)
        if not np.all(np.isfinite(g.values)):
            raise DecoderDivergenceError("non-finite descent direction")
        stepped = False
        for _attempt in range(cfg.max_halvings + 1):
            cand = x - g * eta
            J_cand = _cost_values(cand.values, obs_vals, start, goal, cfg)
            if np.isfinite(J_cand) and J_cand <= J_prev * (1 + 1e-12) + 1e-15:
                x = cand
                J_prev = min(J_cand, J_prev)
                stepped = True
                break
            eta *= 0.5
        if not stepped:
            # gradient is numerically null at this scale; keep the iterate
            pass
        trace.append(J_prev)

    final_cost = _cost_tape(x, obs, start, goal, cfg)

    d = x[1:] - x[:-1]  # (T-1, 2)
    v = ad.sqrt((d * d).sum(axis=1) + _DIST_EPS) * (1.0 / dt)
    cross = d[:-1, 0] * d[1:, 1] - d[:-1, 1] * d[1:, 0]
    dot = (d[:-1] * d[1:]).sum(axis=1)
    dot_safe = ad.select(dot - _HEADING_DOT_FLOOR, dot, _HEADING_DOT_FLOOR)
    w = ad.atan2(cross, dot_safe) * (1.0 / dt)

    return ReconstructedPlan(
        positions=x,
        v=v,
        w=w,
        dt=dt,
        final_cost=final_cost,
        cost_trace=np.asarray(trace),
    )


def decode_timeline(
    starts_np,
    vels_np,
    start_xy,
    goal_xy,
    T: int,
    dt: float,
    cfg: DecoderConfig = DecoderConfig(),
) -> tuple[Tape, DualArray, DualArray, ReconstructedPlan]:
    """Plain-number convenience wrapper: builds a fresh tape with leaf
    obstacle parameters and decodes against them."""
    tape = Tape()
    starts = tape.leaves(np.asarray(starts_np, dtype=np.float64).reshape(-1, 2))
    vels = tape.leaves(np.asarray(vels_np, dtype=np.float64).reshape(-1, 2))
    rec = decode(starts, vels, start_xy, goal_xy, T, dt, cfg)
    return tape, starts, vels, rec


def reconstruction_from_positions(positions, dt: float) -> ReconstructedPlan:
    """Wrap fixed positions as a ReconstructedPlan (no optimization).

    Analysis/testing helper: velocities are derived exactly as ``decode``
    derives them; the cost field is a placeholder zero.
    """
    tape = Tape()
    x = tape.leaves(np.asarray(positions, dtype=np.float64).reshape(-1, 2))
    d = x[1:] - x[:-1]
    v = ad.sqrt((d * d).sum(axis=1) + _DIST_EPS) * (1.0 / dt)
    cross = d[:-1, 0] * d[1:, 1] - d[:-1, 1] * d[1:, 0]
    dot = (d[:-1] * d[1:]).sum(axis=1)
    dot_safe = ad.select(dot - _HEADING_DOT_FLOOR, dot, _HEADING_DOT_FLOOR)
    w = ad.atan2(cross, dot_safe) * (1.0 / dt)
    return ReconstructedPlan(x, v, w, dt, tape.leaf(0.0), np.zeros(0))


def reconstruction_loss(plan: MotionPlan, rec: ReconstructedPlan) -> DualValue:
    """Channel-mean squared error between a plan and its reconstruction.

    Four channels (x, y, v, w), each averaged over its own valid range,
    then averaged together; yaw is excluded.  v compares on t < T-1 and w
    on t < T-2 because the reconstruction derives them from displacements.
    """
    if rec.T != plan.T:
        raise ValueError("horizon mismatch between plan and reconstruction")
    if abs(rec.dt - plan.dt) > 1e-12:
        raise ValueError("dt mismatch between plan and reconstruction")
    T = plan.T
    ex = rec.positions[:, 0] - plan.positions[:, 0]
    ey = rec.positions[:, 1] - plan.positions[:, 1]
    ev = rec.v - plan.actions[: T - 1, 0]
    ew = rec.w - plan.actions[: T - 2, 1]
    mx = (ex * ex).sum() * (1.0 / T)
    my = (ey * ey).sum() * (1.0 / T)
    mv = (ev * ev).sum() * (1.0 / (T - 1))
    mw = (ew * ew).sum() * (1.0 / (T - 2))
    return (mx + my + mv + mw) * 0.25
