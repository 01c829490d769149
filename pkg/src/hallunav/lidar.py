"""2D LiDAR rendering: analytic ray casting against disks and wall segments.

Beams span the field of view inclusively, beam 0 at -fov/2 relative to the
robot heading.  Beams that hit nothing carry max_range so downstream
consumers always see bounded inputs.  All operations are pure.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .world import Pose, transform_from_frame, transform_to_frame

_HIT_EPS = 1e-9  # intersections closer than this are behind the emitter


@dataclass(frozen=True)
class LidarParams:
    beam_count: int = 720
    fov: float = 1.5 * math.pi  # 270 degrees
    max_range: float = 10.0
    noise_sigma: float = 0.0

    def __post_init__(self):
        if self.beam_count < 1:
            raise ValueError("beam_count must be >= 1")
        if self.max_range <= 0:
            raise ValueError("max_range must be positive")

    def beam_angles(self) -> np.ndarray:
        """Beam directions relative to the heading, endpoints inclusive."""
        if self.beam_count == 1:
            return np.zeros(1)
        return np.linspace(-self.fov / 2, self.fov / 2, self.beam_count)

    @property
    def beam_spacing(self) -> float:
        if self.beam_count == 1:
            return self.fov if self.fov > 0 else 2 * math.pi
        return self.fov / (self.beam_count - 1)


@dataclass(frozen=True)
class LidarScan:
    """One scan: ranges per beam, robot-centric."""

    ranges: np.ndarray
    params: LidarParams

    def __post_init__(self):
        r = np.asarray(self.ranges, dtype=np.float64)
        object.__setattr__(self, "ranges", r)
        if r.shape != (self.params.beam_count,):
            raise ValueError("range count does not match beam count")
        if np.any(r <= 0) or np.any(r > self.params.max_range + 1e-9):
            raise ValueError("ranges must lie in (0, max_range]")

    def hit_points(self) -> np.ndarray:
        """Robot-frame (M, 2) points for beams that hit something."""
        return scan_points(self.ranges, self.params)


def scan_points(ranges: np.ndarray, params: LidarParams) -> np.ndarray:
    """Convert hit beams (range < max_range) to robot-frame points."""
    ranges = np.asarray(ranges, dtype=np.float64)
    hit = ranges < params.max_range - 1e-9
    ang = params.beam_angles()[hit]
    r = ranges[hit]
    return np.column_stack([r * np.cos(ang), r * np.sin(ang)])


def rebin_points(points: np.ndarray, params: LidarParams) -> np.ndarray:
    """Bin robot-frame points back into beam ranges (nearest hit per beam).

    Points outside the field of view are dropped; empty beams read
    max_range.
    """
    ranges = np.full(params.beam_count, params.max_range)
    points = np.asarray(points, dtype=np.float64).reshape(-1, 2)
    if points.shape[0] == 0:
        return ranges
    ang = np.arctan2(points[:, 1], points[:, 0])
    dist = np.hypot(points[:, 0], points[:, 1])
    idx = np.rint((ang + params.fov / 2) / params.beam_spacing).astype(np.int64)
    ok = (idx >= 0) & (idx < params.beam_count) & (dist > _HIT_EPS)
    # keep angular residual within half a beam so out-of-fov points never
    # alias onto the edge beams
    ok &= np.abs(ang - (-params.fov / 2 + idx * params.beam_spacing)) <= params.beam_spacing / 2 + 1e-12
    np.minimum.at(ranges, idx[ok], np.minimum(dist[ok], params.max_range))
    return ranges


def _ray_disk_ranges(origin, dirs, centers, radii, max_range):
    """(beams,) nearest positive ray-disk hit distance per beam."""
    best = np.full(dirs.shape[0], max_range)
    if centers.shape[0] == 0:
        return best
    oc = origin[None, :] - centers[:, None, :]  # (M, 1, 2) broadcast over beams
    b = np.einsum("mbk,bk->mb", np.broadcast_to(oc, (centers.shape[0], dirs.shape[0], 2)), dirs)
    c0 = (oc[:, 0, 0] ** 2 + oc[:, 0, 1] ** 2)[:, None] - (radii**2)[:, None]
    disc = b * b - c0
    with np.errstate(invalid="ignore"):
        s = np.sqrt(np.maximum(disc, 0.0))
        t1 = -b - s
        t2 = -b + s
        t = np.where(t1 > _HIT_EPS, t1, np.where(t2 > _HIT_EPS, t2, np.inf))
        t = np.where(disc >= 0.0, t, np.inf)
    return np.minimum(best, np.min(t, axis=0).clip(max=max_range))


def _ray_segment_ranges(origin, dirs, walls, max_range):
    """(beams,) nearest positive ray-segment hit distance per beam."""
    best = np.full(dirs.shape[0], max_range)
    if walls.shape[0] == 0:
        return best
    p = walls[:, 0:2]
    e = walls[:, 2:4] - p  # segment direction
    po = p[:, None, :] - origin[None, None, :]  # (K, 1, 2)
    denom = dirs[None, :, 0] * (-e[:, None, 1]) - dirs[None, :, 1] * (-e[:, None, 0])
    with np.errstate(divide="ignore", invalid="ignore"):
        t = (po[..., 0] * (-e[:, None, 1]) - po[..., 1] * (-e[:, None, 0])) / denom
        u = (dirs[None, :, 0] * po[..., 1] - dirs[None, :, 1] * po[..., 0]) / denom
        valid = (np.abs(denom) > 1e-15) & (t > _HIT_EPS) & (u >= 0.0) & (u <= 1.0)
        t = np.where(valid, t, np.inf)
    return np.minimum(best, np.min(t, axis=0).clip(max=max_range))


def cast_scan(
    pose: Pose,
    disks: np.ndarray | Sequence,
    walls: np.ndarray | Sequence = (),
    params: LidarParams = LidarParams(),
    rng: np.random.Generator | None = None,
) -> LidarScan:
    """Ray cast one scan from ``pose``.

    ``disks`` is (M, 3) rows of (cx, cy, radius); zero/negative radii are
    ignored.  ``walls`` is (K, 4) rows of (x1, y1, x2, y2) segments.
    Optional Gaussian range noise is added when the params carry a sigma
    and an rng is supplied.
    """
    disks = np.asarray(disks, dtype=np.float64).reshape(-1, 3)
    walls = np.asarray(walls, dtype=np.float64).reshape(-1, 4)
    disks = disks[disks[:, 2] > 0.0]
    ang = pose.yaw + params.beam_angles()
    dirs = np.column_stack([np.cos(ang), np.sin(ang)])
    origin = pose.xy
    r = _ray_disk_ranges(origin, dirs, disks[:, :2], disks[:, 2], params.max_range)
    r = np.minimum(r, _ray_segment_ranges(origin, dirs, walls, params.max_range))
    if params.noise_sigma > 0.0 and rng is not None:
        r = np.clip(r + rng.normal(0.0, params.noise_sigma, r.shape), 1e-6, params.max_range)
    return LidarScan(r, params)


@dataclass(frozen=True)
class ScanHistory:
    """L scans ordered oldest to newest, all in the newest robot frame."""

    ranges: np.ndarray  # (L, beam_count)
    params: LidarParams

    def __post_init__(self):
        r = np.asarray(self.ranges, dtype=np.float64)
        object.__setattr__(self, "ranges", r)
        if r.ndim != 2 or r.shape[1] != self.params.beam_count:
            raise ValueError("history must be (L, beam_count)")

    def __len__(self) -> int:
        return self.ranges.shape[0]

    @property
    def newest(self) -> np.ndarray:
        return self.ranges[-1]


def reframe_scan(scan: np.ndarray, scan_pose: Pose, target_pose: Pose, params: LidarParams) -> np.ndarray:
    """Re-express one scan's hit points in ``target_pose``'s frame and re-bin."""
    pts_local = scan_points(scan, params)
    if pts_local.shape[0] == 0:
        return np.full(params.beam_count, params.max_range)
    pts_world = transform_from_frame(scan_pose, pts_local)
    return rebin_points(transform_to_frame(target_pose, pts_world), params)


def assemble_history(
    poses: Sequence[Pose], scans: Sequence[np.ndarray | LidarScan], params: LidarParams
) -> ScanHistory:
    """Build a ScanHistory with every past scan re-framed into the newest pose.

    ``poses`` and ``scans`` must be aligned, oldest first.  Requires exact
    odometry, which the simulator provides.
    """
    if len(poses) != len(scans):
        raise ValueError("poses and scans must have the same length")
    if len(poses) == 0:
        raise ValueError("history must not be empty")
    newest_pose = poses[-1]
    rows = []
    for pose, scan in zip(poses, scans):
        r = scan.ranges if isinstance(scan, LidarScan) else np.asarray(scan, dtype=np.float64)
        rows.append(reframe_scan(r, pose, newest_pose, params))
    return ScanHistory(np.stack(rows), params)


# ----------------------------------------------------------------------
# plain-text debug export
# ----------------------------------------------------------------------

def scan_to_text(scan: LidarScan) -> str:
    lines = [
        "format: hallunav-scan/1",
        f"beam_count: {scan.params.beam_count}",
        f"fov: {scan.params.fov!r}",
        f"max_range: {scan.params.max_range!r}",
    ]
    lines += [f"{i} {float(r)!r}" for i, r in enumerate(scan.ranges)]
    return "\n".join(lines) + "\n"


def scan_from_text(text: str) -> LidarScan:
    lines = [ln for ln in text.splitlines() if ln.strip()]
    if not lines or lines[0] != "format: hallunav-scan/1":
        raise ValueError("not a scan text export")
    header = dict(ln.split(": ", 1) for ln in lines[1:4])
    params = LidarParams(
        beam_count=int(header["beam_count"]),
        fov=float(header["fov"]),
        max_range=float(header["max_range"]),
    )
    ranges = np.empty(params.beam_count)
    for ln in lines[4:]:
        i, r = ln.split()
        ranges[int(i)] = float(r)
    return LidarScan(ranges, params)
