"""Planned-path rasterization: front-view perspective projection and bird's-eye view.

Robot frame convention used everywhere in this package: x points forward, y
points to the right, angles are measured from +x toward +y. Image columns grow
with y and image rows grow downward.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .diffcore import ConfigurationError, DimensionError

WAYPOINT_SPACING = 0.2


@dataclass(frozen=True)
class CameraModel:
    """Pinhole camera mounted at the robot origin, looking forward and pitched down."""

    focal: float = 40.0
    cx: float = 40.0
    cy: float = 30.0
    height: float = 0.3
    pitch: float = 0.0
    image_h: int = 60
    image_w: int = 80

    def __post_init__(self):
        if self.focal <= 0:
            raise ConfigurationError("camera focal length must be positive")
        if self.height <= 0:
            raise ConfigurationError("camera mount height must be positive")
        if not (0 <= self.cx <= self.image_w and 0 <= self.cy <= self.image_h):
            raise ConfigurationError("principal point must lie inside the image")

    @classmethod
    def default(cls, image_h: int = 60, image_w: int = 80) -> "CameraModel":
        # 160 px focal at 320 px width (90 degree horizontal FOV), scaled with resolution
        return cls(focal=160.0 * image_w / 320.0, cx=image_w / 2, cy=image_h / 2,
                   image_h=image_h, image_w=image_w)

    def project(self, x, y, z=0.0):
        """Continuous (row, col, depth) of robot-frame points; depth <= 0 is behind."""
        x = np.asarray(x, dtype=np.float64)
        y = np.asarray(y, dtype=np.float64)
        rz = np.asarray(z, dtype=np.float64) - self.height
        cp, sp = math.cos(self.pitch), math.sin(self.pitch)
        depth = x * cp - rz * sp
        down = -x * sp - rz * cp
        with np.errstate(divide="ignore", invalid="ignore"):
            col = self.cx + self.focal * y / depth
            row = self.cy + self.focal * down / depth
        return row, col, depth

    def horizon_row(self) -> int:
        return int(math.floor(self.cy - self.focal * math.tan(self.pitch) + 0.5))

    def to_dict(self) -> dict:
        return dict(focal=self.focal, cx=self.cx, cy=self.cy, height=self.height,
                    pitch=self.pitch, image_h=self.image_h, image_w=self.image_w)


@dataclass
class PlannedPath:
    """T waypoints in the robot frame at the planning instant.

    ``pose`` is the world pose (x, y, heading) of the robot when the path was
    planned; it is needed only to map the path back into the world.
    """

    waypoints: np.ndarray
    pose: tuple[float, float, float] = (0.0, 0.0, 0.0)

    def __post_init__(self):
        self.waypoints = np.asarray(self.waypoints, dtype=np.float64).reshape(-1, 2)

    def __len__(self):
        return len(self.waypoints)

    def spacing(self) -> np.ndarray:
        return np.hypot(*np.diff(self.waypoints, axis=0).T)

    def in_world(self) -> np.ndarray:
        px, py, th = self.pose
        c, s = math.cos(th), math.sin(th)
        w = self.waypoints
        return np.stack([px + c * w[:, 0] - s * w[:, 1], py + s * w[:, 0] + c * w[:, 1]], axis=1)

    def mirrored(self) -> "PlannedPath":
        w = self.waypoints.copy()
        w[:, 1] *= -1
        return PlannedPath(w, self.pose)


@dataclass
class PathImage:
    """Binary single-channel raster of a path; ``roi`` is the [start, stop) row band."""

    pixels: np.ndarray
    roi: tuple[int, int] = field(default=(0, 0))

    def __post_init__(self):
        if self.roi == (0, 0):
            self.roi = (0, self.pixels.shape[0])

    @property
    def shape(self):
        return self.pixels.shape


def bresenham(r0: int, c0: int, r1: int, c1: int):
    """Integer midpoint line from (r0, c0) to (r1, c1), both endpoints included."""
    dr, dc = abs(r1 - r0), abs(c1 - c0)
    sr = 1 if r1 >= r0 else -1
    sc = 1 if c1 >= c0 else -1
    err = dc - dr
    r, c = r0, c0
    while True:
        yield r, c
        if r == r1 and c == c1:
            return
        e2 = 2 * err
        if e2 > -dr:
            err -= dr
            c += sc
        if e2 < dc:
            err += dc
            r += sr


def _draw_polyline(img: np.ndarray, pts: list[tuple[int, int] | None]) -> None:
    H, W = img.shape
    prev = None
    for p in pts:
        if p is None:
            prev = None
            continue
        seg = [p] if prev is None else bresenham(prev[0], prev[1], p[0], p[1])
        for r, c in seg:
            if 0 <= r < H and 0 <= c < W:
                img[r, c] = 1
        prev = p


# far-off projections are clamped so line drawing stays bounded
_PIXEL_CLAMP = 10_000


def _to_pixel(row: float, col: float) -> tuple[int, int]:
    r = int(math.floor(min(max(row, -_PIXEL_CLAMP), _PIXEL_CLAMP) + 0.5))
    c = int(math.floor(min(max(col, -_PIXEL_CLAMP), _PIXEL_CLAMP) + 0.5))
    return r, c


def project_path(path: PlannedPath, cam: CameraModel) -> PathImage:
    """Front-view raster of the path with consecutive waypoints joined by 1 px lines.

    Waypoints at or behind the camera plane are skipped and break the polyline.
    """
    img = np.zeros((cam.image_h, cam.image_w), dtype=np.uint8)
    rows, cols, depth = cam.project(path.waypoints[:, 0], path.waypoints[:, 1])
    pts = []
    for r, c, d in zip(rows, cols, depth):
        pts.append(_to_pixel(r, c) if d > 1e-6 else None)
    _draw_polyline(img, pts)
    start = min(max(cam.horizon_row(), 0), cam.image_h)
    img[:start] = 0
    return PathImage(img, (start, cam.image_h))


def crop_roi(img: PathImage) -> PathImage:
    start, stop = img.roi
    if stop <= start:
        raise ConfigurationError(f"empty region of interest {img.roi}")
    px = img.pixels[start:stop]
    return PathImage(px.copy(), (0, px.shape[0]))


def project_bev(path: PlannedPath, scale_px_per_m: float = 20.0, grid_size: int = 48) -> PathImage:
    """Top-down raster; the robot sits at (row=grid_size, col=grid_size/2)."""
    img = np.zeros((grid_size, grid_size), dtype=np.uint8)
    pts = []
    for x, y in path.waypoints:
        pts.append(_to_pixel(grid_size - x * scale_px_per_m, grid_size / 2 + y * scale_px_per_m))
    _draw_polyline(img, pts)
    return PathImage(img, (0, grid_size))


def path_input_shape(cam: CameraModel, view: str = "front", bev_size: int = 48) -> tuple[int, int]:
    """Shape of the image fed to the path CNN for the given view."""
    if view == "bev":
        return bev_size, bev_size
    if view != "front":
        raise ConfigurationError(f"unknown path view {view!r}")
    start = min(max(cam.horizon_row(), 0), cam.image_h)
    if start >= cam.image_h:
        raise ConfigurationError("horizon lies below the image; empty region of interest")
    return cam.image_h - start, cam.image_w


def render_path_input(path: PlannedPath, cam: CameraModel, view: str = "front",
                      bev_scale: float = 20.0, bev_size: int = 48) -> np.ndarray:
    """Path raster ready for the network (ROI-cropped for the front view), float32."""
    if view == "bev":
        return project_bev(path, bev_scale, bev_size).pixels.astype(np.float32)
    if view != "front":
        raise ConfigurationError(f"unknown path view {view!r}")
    out = crop_roi(project_path(path, cam)).pixels.astype(np.float32)
    if out.shape != path_input_shape(cam, view):
        raise DimensionError(f"path raster {out.shape} vs expected {path_input_shape(cam, view)}")
    return out
