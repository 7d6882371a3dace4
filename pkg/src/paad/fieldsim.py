"""A deterministic 2D crop-row world that produces labeled training frames.

The robot drives down the corridor between two stalk rows. Each frame it
observes a grayscale camera proxy and a 270 degree LiDAR scan, plans a
10-waypoint path with pure pursuit toward its *estimate* of the row
centerline, and the path is labeled geometrically. Heading/offset estimates
are occasionally corrupted, which yields paths into a row; camera and LiDAR
occlusions are drawn from independent random streams.

Frame convention: x along the row, y to the right of the direction of
travel, headings measured from +x toward +y.
"""
from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field, replace

import numpy as np

from . import kernels
from .diffcore import ConfigurationError
from .geometry import WAYPOINT_SPACING, CameraModel, PlannedPath

LIDAR_BEAMS = 1081
LIDAR_FOV = math.radians(270.0)
LIDAR_MAX = 10.0
FRAME_RATE_HZ = 3.0
SPEED = 0.6


@dataclass(frozen=True)
class WorldConfig:
    row_spacing: float = 0.76
    stalk_radius: float = 0.02
    stalk_pitch: float = 0.15
    gap_probability: float = 0.05
    clutter_density: float = 0.5          # clutter objects per metre of row
    occlusion_probability: float = 0.2    # camera, per frame
    lidar_occlusion_probability: float = 0.2
    corruption_probability: float = 0.04  # chance a heading-estimate fault starts
    corruption_persistence: float = 0.6   # chance an active fault carries to the next frame
    disturbance_probability: float = 0.2  # terrain kicks to the true heading
    length: float = 40.0
    x_start: float = -5.0
    robot_radius: float = 0.12
    stalk_height: float = 1.5
    clutter_height: float = 0.4
    seed: int = 0

    def __post_init__(self):
        if self.row_spacing <= 2 * self.stalk_radius:
            raise ConfigurationError("row spacing must exceed the stalk diameter")
        if self.stalk_radius <= 0 or self.stalk_pitch <= 0 or self.length <= 0:
            raise ConfigurationError("stalk radius, pitch and row length must be positive")
        for name in ("gap_probability", "occlusion_probability", "lidar_occlusion_probability",
                     "corruption_probability", "corruption_persistence",
                     "disturbance_probability"):
            v = getattr(self, name)
            if not 0.0 <= v <= 1.0:
                raise ConfigurationError(f"{name} must lie in [0, 1], got {v}")
        if self.clutter_density < 0:
            raise ConfigurationError("clutter density must be non-negative")

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass
class World:
    circles: np.ndarray        # (m, 3): x, y, radius
    heights: np.ndarray        # (m,)
    is_clutter: np.ndarray     # (m,) bool
    config: WorldConfig

    def __len__(self):
        return len(self.circles)

    @property
    def n_stalks(self) -> int:
        return int((~self.is_clutter).sum())


@dataclass
class RobotState:
    x: float
    y: float
    heading: float
    speed: float = SPEED
    mode: str = "normal"

    @property
    def pose(self) -> tuple[float, float, float]:
        return (self.x, self.y, self.heading)


@dataclass
class ObservationFrame:
    image: np.ndarray          # (H, W) uint8 grayscale
    lidar: np.ndarray          # (1081,) float32 ranges in metres
    path: PlannedPath
    labels: np.ndarray         # (T,) uint8
    timestamp: int
    flags: int = 0             # bit 0 camera occluded, bit 1 LiDAR occluded, bit 2 estimate corrupted

    CAMERA_OCCLUDED = 1
    LIDAR_OCCLUDED = 2
    CORRUPTED = 4

    @property
    def anomalous(self) -> bool:
        return bool(self.labels.any())

    def image_float(self) -> np.ndarray:
        return self.image.astype(np.float32) / 255.0


# ------------------------------------------------------------------ world

def generate_world(cfg: WorldConfig) -> World:
    """Two jittered stalk rows at y = +/- spacing/2 plus clutter outside the corridor."""
    rng = np.random.default_rng([cfg.seed, 0])
    n = int(math.floor(cfg.length / cfg.stalk_pitch + 1e-9))
    xs, ys = [], []
    half = cfg.row_spacing / 2
    for side in (-1.0, 1.0):
        base = cfg.x_start + (np.arange(n) + 0.5) * cfg.stalk_pitch
        jx = rng.uniform(-0.25, 0.25, n) * cfg.stalk_pitch
        jy = rng.normal(0.0, 0.01, n)
        keep = rng.random(n) >= cfg.gap_probability
        xs.append((base + jx)[keep])
        ys.append((side * half + jy)[keep])
    sx, sy = np.concatenate(xs), np.concatenate(ys)
    stalks = np.stack([sx, sy, np.full(sx.shape, cfg.stalk_radius)], axis=1)

    n_clutter = int(round(cfg.clutter_density * cfg.length))
    cx = cfg.x_start + rng.uniform(0, cfg.length, n_clutter)
    side = np.where(rng.random(n_clutter) < 0.5, -1.0, 1.0)
    cy = side * (half + rng.uniform(0.08, 1.5, n_clutter))
    cr = rng.uniform(0.03, 0.1, n_clutter)
    clutter = np.stack([cx, cy, cr], axis=1)

    circles = np.concatenate([stalks, clutter]).reshape(-1, 3)
    heights = np.concatenate([np.full(len(stalks), cfg.stalk_height),
                              np.full(n_clutter, cfg.clutter_height)])
    is_clutter = np.concatenate([np.zeros(len(stalks), bool), np.ones(n_clutter, bool)])
    return World(circles, heights, is_clutter, cfg)


def lidar_angles() -> np.ndarray:
    return np.linspace(-LIDAR_FOV / 2, LIDAR_FOV / 2, LIDAR_BEAMS)


def lidar_scan(world: World, pose) -> np.ndarray:
    """1081 ranges over a 270 degree fan centred on the heading; 10 m when nothing is hit."""
    x, y, th = pose
    return kernels.ray_cast(x, y, th + lidar_angles(), world.circles, LIDAR_MAX)


# ----------------------------------------------------------------- camera

def render_camera(world: World, pose, cam: CameraModel) -> np.ndarray:
    """Grayscale float image in [0, 1]; obstacles drawn far to near as filled columns."""
    img = np.zeros((cam.image_h, cam.image_w), dtype=np.float64)
    if len(world) == 0:
        return img
    px, py, th = pose
    c, s = math.cos(th), math.sin(th)
    dx = world.circles[:, 0] - px
    dy = world.circles[:, 1] - py
    fwd = c * dx + s * dy
    lat = -s * dx + c * dy
    r = world.circles[:, 2]
    vis = (fwd > 0.1) & (fwd < LIDAR_MAX)
    order = np.argsort(-fwd[vis], kind="stable")
    idx = np.flatnonzero(vis)[order]
    top_r, col_c, depth = cam.project(fwd[idx], lat[idx], world.heights[idx])
    bot_r, _, _ = cam.project(fwd[idx], lat[idx], 0.0)
    half_w = np.maximum(cam.focal * r[idx] / depth, 0.5)
    shade = 0.3 + 0.7 / (1.0 + fwd[idx])
    shade = np.where(world.is_clutter[idx], 0.5 * shade, shade)
    H, W = img.shape
    for t, b, cc, hw, v in zip(top_r, bot_r, col_c, half_w, shade):
        c0 = int(math.ceil(cc - hw - 0.5))
        c1 = int(math.floor(cc + hw - 0.5))
        r0 = int(math.ceil(t - 0.5))
        r1 = int(math.floor(b - 0.5))
        c0, c1 = max(c0, 0), min(c1, W - 1)
        r0, r1 = max(r0, 0), min(r1, H - 1)
        if c0 <= c1 and r0 <= r1:
            img[r0:r1 + 1, c0:c1 + 1] = v
    return img


def occlude_camera(img: np.ndarray, rng: np.random.Generator) -> np.ndarray:
    """Cover 70-100% of the frame with near-field leaf texture."""
    H, W = img.shape
    frac = rng.uniform(0.7, 1.0)
    width = int(math.ceil(frac * W))
    left = int(rng.integers(0, W - width + 1))
    tex = rng.uniform(0.35, 0.95, (H, width))
    out = img.copy()
    out[:, left:left + width] = tex
    return out


def occlude_lidar(scan: np.ndarray, rng: np.random.Generator) -> np.ndarray:
    """Leaves on the sensor: 70-100% of the beams return 0.05-0.4 m."""
    n = scan.shape[0]
    count = int(math.ceil(rng.uniform(0.7, 1.0) * n))
    start = int(rng.integers(0, n - count + 1))
    out = scan.copy()
    out[start:start + count] = rng.uniform(0.05, 0.4, count)
    return out


# --------------------------------------------------------------- planning

def plan_path(world: World, pose, noise=(0.0, 0.0), horizon: int = 10,
              lookahead: float = 1.0, max_curvature: float = 2.0) -> PlannedPath:
    """Pure pursuit toward the row centerline as the robot *believes* it to be.

    ``noise`` = (lateral error m, heading error rad) added to the true pose to
    form the estimate. Waypoint 0 is the current position; consecutive
    waypoints are exactly 0.2 m apart.
    """
    _, y, th = pose
    by, bth = y + noise[0], th + noise[1]
    # integrate in the believed row frame, starting at (0, by, bth)
    pts = [(0.0, by)]
    cx, cy, ch = 0.0, by, bth
    for _ in range(horizon - 1):
        alpha = math.atan2(-cy, lookahead) - ch
        kappa = max(-max_curvature, min(max_curvature, 2.0 * math.sin(alpha) / lookahead))
        ch += kappa * WAYPOINT_SPACING
        cx += WAYPOINT_SPACING * math.cos(ch)
        cy += WAYPOINT_SPACING * math.sin(ch)
        pts.append((cx, cy))
    p = np.asarray(pts) - np.array([0.0, by])
    cb, sb = math.cos(bth), math.sin(bth)
    local = np.stack([cb * p[:, 0] + sb * p[:, 1], -sb * p[:, 0] + cb * p[:, 1]], axis=1)
    local[0] = 0.0
    return PlannedPath(local, tuple(float(v) for v in pose))


def violations(world: World, points: np.ndarray) -> np.ndarray:
    """Per-point failure: inside collision distance of an obstacle or off the trail."""
    cfg = world.config
    pts = np.asarray(points, dtype=np.float64).reshape(-1, 2)
    off = np.abs(pts[:, 1]) > cfg.row_spacing / 2
    if len(world) == 0:
        return off
    d = np.hypot(pts[:, None, 0] - world.circles[None, :, 0],
                 pts[:, None, 1] - world.circles[None, :, 1]) - world.circles[None, :, 2]
    return off | (d.min(axis=1) < cfg.robot_radius)


def label_horizon(world: World, path: PlannedPath) -> np.ndarray:
    """1 from the first violating waypoint onward (failure is absorbing)."""
    v = violations(world, path.in_world())
    return np.maximum.accumulate(v.astype(np.uint8))


# ---------------------------------------------------------------- episode

@dataclass
class _Streams:
    dynamics: np.random.Generator
    planner: np.random.Generator
    camera: np.random.Generator
    lidar: np.random.Generator

    @classmethod
    def from_seed(cls, seed: int) -> "_Streams":
        return cls(*(np.random.default_rng([seed, k]) for k in (1, 2, 3, 4)))


def episode_world(cfg: WorldConfig, steps: int) -> World:
    needed = steps * WAYPOINT_SPACING + 2 * LIDAR_MAX + 5.0
    return generate_world(replace(cfg, length=max(cfg.length, needed), x_start=-LIDAR_MAX))


def run_episode(cfg: WorldConfig, steps: int, cam: CameraModel | None = None,
                horizon: int = 10) -> list[ObservationFrame]:
    """Simulate ``steps`` frames at 3 Hz (one 0.2 m waypoint per frame).

    A robot that ends a step in a failure state is put back on the centerline
    before the next frame, so every frame starts from a valid pose.
    """
    cam = cam or CameraModel.default()
    world = episode_world(cfg, steps)
    rs = _Streams.from_seed(cfg.seed)
    robot = RobotState(0.0, 0.0, 0.0)
    frames = []
    fault = None
    for t in range(steps):
        # perception estimate for the planner
        est = (rs.planner.normal(0.0, 0.02), rs.planner.normal(0.0, math.radians(1.0)))
        if fault is not None and rs.planner.random() >= cfg.corruption_persistence:
            fault = None
        if fault is None and rs.planner.random() < cfg.corruption_probability:
            fault = (rs.planner.choice([-1.0, 1.0]) * rs.planner.uniform(0.15, 0.3),
                     rs.planner.choice([-1.0, 1.0]) * math.radians(rs.planner.uniform(15, 30)))
        flags = 0
        if fault is not None:
            est = (est[0] + fault[0], est[1] + fault[1])
            flags |= ObservationFrame.CORRUPTED

        path = plan_path(world, robot.pose, est, horizon)
        labels = label_horizon(world, path)

        img = render_camera(world, robot.pose, cam)
        img = np.clip(img + rs.camera.normal(0.0, 0.02, img.shape), 0.0, 1.0)
        if rs.camera.random() < cfg.occlusion_probability:
            img = occlude_camera(img, rs.camera)
            flags |= ObservationFrame.CAMERA_OCCLUDED
        scan = lidar_scan(world, robot.pose)
        scan = np.clip(scan + rs.lidar.normal(0.0, 0.01, scan.shape), 0.02, LIDAR_MAX)
        if rs.lidar.random() < cfg.lidar_occlusion_probability:
            scan = occlude_lidar(scan, rs.lidar)
            flags |= ObservationFrame.LIDAR_OCCLUDED

        frames.append(ObservationFrame(
            image=np.round(img * 255).astype(np.uint8),
            lidar=scan.astype(np.float32),
            path=path, labels=labels, timestamp=t, flags=flags))

        _advance(world, robot, path, rs.dynamics, cfg)
    return frames


def _advance(world: World, robot: RobotState, path: PlannedPath, rng, cfg: WorldConfig):
    wp = path.in_world()
    seg = wp[1] - wp[0]
    heading = math.atan2(seg[1], seg[0]) + rng.normal(0.0, math.radians(1.5))
    if rng.random() < cfg.disturbance_probability:
        heading += rng.choice([-1.0, 1.0]) * math.radians(rng.uniform(5, 20))
    robot.x, robot.y = float(wp[1, 0]), float(wp[1, 1] + rng.normal(0.0, 0.01))
    robot.heading = heading
    if violations(world, np.array([[robot.x, robot.y]]))[0]:
        # intervention: back onto the centerline, roughly aligned with the row
        robot.mode = "failure"
        robot.y = 0.0
        robot.heading = rng.normal(0.0, math.radians(3.0))
        robot.mode = "normal"


def anomaly_fraction(frames) -> float:
    return float(np.mean([f.anomalous for f in frames])) if frames else 0.0
