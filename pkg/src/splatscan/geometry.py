"""Spherical projection geometry and range images.

The sensor's optical frame is x-forward, y-left, z-up.  A point maps to
image coordinates through azimuth/elevation angles:

    azimuth   = atan2(y, x)          (0 along +x, positive toward +y)
    elevation = atan2(z, hypot(x,y)) (positive toward +z)

    u = fx * azimuth   + cx
    v = fy * elevation + cy

with negative focal lengths so that azimuth decreases left-to-right and
elevation decreases top-to-bottom (north pole at the top of the image).
The intrinsics are fixed by the image size and the angular bounds:

    fx = -(W - 1) / (az_max - az_min)
    fy = -(H - 1) / (el_max - el_min)
    cx = (W / 2) * (1 + (az_max + az_min) / (az_max - az_min))
    cy = (H / 2) * (1 + (el_max + el_min) / (el_max - el_min))

For bounds that straddle zero this places the extreme angles within one
pixel of the image corners (exactly at 0.5 px offsets for symmetric
bounds); bounds far from zero shift the usable window and are accepted
as-is.
"""

from __future__ import annotations

from dataclasses import dataclass
from functools import cached_property

import numpy as np
from scipy import ndimage

from .errors import GeometryError

__all__ = [
    "SphericalCamera",
    "RangeImage",
    "NormalImage",
    "spherical_coords",
    "ray_direction",
    "estimate_camera",
    "build_range_image",
    "smooth_range_image",
    "range_image_normals",
]

_MIN_RANGE = 1e-9


def spherical_coords(points: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Azimuth and elevation (radians) of one point or an (..., 3) array."""
    p = np.asarray(points, dtype=float)
    az = np.arctan2(p[..., 1], p[..., 0])
    el = np.arctan2(p[..., 2], np.hypot(p[..., 0], p[..., 1]))
    return az, el


def ray_direction(azimuth: np.ndarray, elevation: np.ndarray) -> np.ndarray:
    """Unit direction for given angles; inverse of :func:`spherical_coords`."""
    az = np.asarray(azimuth, dtype=float)
    el = np.asarray(elevation, dtype=float)
    ce = np.cos(el)
    return np.stack([ce * np.cos(az), ce * np.sin(az), np.sin(el)], axis=-1)


@dataclass(eq=False)
class SphericalCamera:
    """Spherical projection onto a W x H grid over fixed angular bounds."""

    width: int
    height: int
    az_min: float
    az_max: float
    el_min: float
    el_max: float

    def __post_init__(self):
        if self.width < 2 or self.height < 2:
            raise GeometryError("image must be at least 2 x 2")
        if not (self.az_max > self.az_min and self.el_max > self.el_min):
            raise GeometryError("angular bounds must have positive extent")
        if self.el_min < -np.pi / 2 - 1e-9 or self.el_max > np.pi / 2 + 1e-9:
            raise GeometryError("elevation bounds outside [-pi/2, pi/2]")

    @property
    def fov_h(self) -> float:
        return self.az_max - self.az_min

    @property
    def fov_v(self) -> float:
        return self.el_max - self.el_min

    @property
    def fx(self) -> float:
        return -(self.width - 1) / self.fov_h

    @property
    def fy(self) -> float:
        return -(self.height - 1) / self.fov_v

    @property
    def cx(self) -> float:
        return 0.5 * self.width * (1.0 + (self.az_max + self.az_min) / self.fov_h)

    @property
    def cy(self) -> float:
        return 0.5 * self.height * (1.0 + (self.el_max + self.el_min) / self.fov_v)

    @property
    def K(self) -> np.ndarray:
        return np.array(
            [[self.fx, 0.0, self.cx], [0.0, self.fy, self.cy], [0.0, 0.0, 1.0]]
        )

    @property
    def full_circle(self) -> bool:
        """True when the azimuth span plus one column pitch closes the circle."""
        pitch = self.fov_h / (self.width - 1)
        return self.fov_h + pitch >= 2.0 * np.pi - 0.5 * pitch

    def angles_of(self, uv: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        uv = np.asarray(uv, dtype=float)
        az = (uv[..., 0] - self.cx) / self.fx
        el = (uv[..., 1] - self.cy) / self.fy
        return az, el

    def project(self, points: np.ndarray) -> np.ndarray:
        """Continuous (u, v) image coordinates of (..., 3) points."""
        az, el = spherical_coords(points)
        u = self.fx * az + self.cx
        v = self.fy * el + self.cy
        return np.stack([u, v], axis=-1)

    def pixel_of(self, points: np.ndarray) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
        """Nearest-pixel (col, row) of points plus an in-bounds mask.

        Rounding is half-up, so u = 3.5 lands in column 4.
        """
        uv = self.project(points)
        cols = np.floor(uv[..., 0] + 0.5).astype(int)
        rows = np.floor(uv[..., 1] + 0.5).astype(int)
        ok = (cols >= 0) & (cols < self.width) & (rows >= 0) & (rows < self.height)
        return cols, rows, ok

    def back_project(self, uv: np.ndarray, ranges: np.ndarray) -> np.ndarray:
        """Points at the given ranges along the rays of (..., 2) pixel coords."""
        az, el = self.angles_of(uv)
        return np.asarray(ranges, dtype=float)[..., None] * ray_direction(az, el)

    @cached_property
    def pixel_grid(self) -> np.ndarray:
        """(H, W, 2) continuous coordinates of every pixel center."""
        u = np.arange(self.width, dtype=float)
        v = np.arange(self.height, dtype=float)
        uu, vv = np.meshgrid(u, v)
        return np.stack([uu, vv], axis=-1)

    @property
    def grid_offset(self) -> np.ndarray:
        """Sub-pixel offset of stored samples from integer coordinates.

        K maps the angular extremes near, not onto, the image corners; a
        uniform sensor grid covering the bounds therefore lands at integer
        coordinates plus a constant sub-pixel shift.  This is that shift,
        wrapped to [-0.5, 0.5) so it is relative to the pixel each sample
        rounds into.  Rays and lookups that stand in for stored samples
        must include it.
        """
        first = np.array(
            [self.fx * self.az_max + self.cx, self.fy * self.el_max + self.cy]
        )
        return (first + 0.5) % 1.0 - 0.5

    @cached_property
    def sample_grid(self) -> np.ndarray:
        """(H, W, 2) continuous coordinates where each pixel's sample lives."""
        return self.pixel_grid + self.grid_offset

    @cached_property
    def pixel_directions(self) -> np.ndarray:
        """(H, W, 3) unit ray direction of every pixel's sample location."""
        az, el = self.angles_of(self.sample_grid)
        return ray_direction(az, el)

    def same_grid(self, other: "SphericalCamera") -> bool:
        return (
            self.width == other.width
            and self.height == other.height
            and abs(self.az_min - other.az_min) < 1e-12
            and abs(self.az_max - other.az_max) < 1e-12
            and abs(self.el_min - other.el_min) < 1e-12
            and abs(self.el_max - other.el_max) < 1e-12
        )


def estimate_camera(points: np.ndarray, width: int, height: int) -> SphericalCamera:
    """Fit a camera to a cloud: bounds are the cloud's angular extremes.

    Points closer than 1e-9 to the origin are ignored.  Raises
    :class:`GeometryError` when no usable points remain or the cloud has
    zero angular extent along either axis.
    """
    p = np.asarray(points, dtype=float).reshape(-1, 3)
    norms = np.linalg.norm(p, axis=1)
    p = p[norms > _MIN_RANGE]
    if p.shape[0] == 0:
        raise GeometryError("no usable points for camera estimation")
    az, el = spherical_coords(p)
    az_min, az_max = float(az.min()), float(az.max())
    el_min, el_max = float(el.min()), float(el.max())
    if az_max - az_min < 1e-12 or el_max - el_min < 1e-12:
        raise GeometryError("cloud has zero angular extent")
    return SphericalCamera(width, height, az_min, az_max, el_min, el_max)


@dataclass
class RangeImage:
    """Per-pixel range in meters; ``valid`` marks pixels that saw a point."""

    range: np.ndarray
    valid: np.ndarray

    def __post_init__(self):
        self.range = np.asarray(self.range, dtype=float)
        self.valid = np.asarray(self.valid, dtype=bool)
        if self.range.shape != self.valid.shape or self.range.ndim != 2:
            raise GeometryError("range and valid must be matching H x W arrays")

    @property
    def shape(self) -> tuple[int, int]:
        return self.range.shape


@dataclass
class NormalImage:
    """Per-pixel unit surface normal in the sensor frame."""

    normals: np.ndarray
    valid: np.ndarray

    def __post_init__(self):
        self.normals = np.asarray(self.normals, dtype=float)
        self.valid = np.asarray(self.valid, dtype=bool)
        if self.normals.ndim != 3 or self.normals.shape[2] != 3:
            raise GeometryError("normals must be H x W x 3")
        if self.normals.shape[:2] != self.valid.shape:
            raise GeometryError("normals and valid shapes disagree")


def build_range_image(cam: SphericalCamera, points: np.ndarray) -> RangeImage:
    """Project a sensor-frame cloud; on pixel collisions the nearest point wins.

    Points at the origin or projecting outside the grid are dropped.
    Empty pixels get range 0 and are invalid.
    """
    p = np.asarray(points, dtype=float).reshape(-1, 3)
    r = np.linalg.norm(p, axis=1)
    keep = r > _MIN_RANGE
    p, r = p[keep], r[keep]
    cols, rows, ok = cam.pixel_of(p)
    cols, rows, r = cols[ok], rows[ok], r[ok]
    img = np.full((cam.height, cam.width), np.inf)
    np.minimum.at(img, (rows, cols), r)
    valid = np.isfinite(img)
    img[~valid] = 0.0
    return RangeImage(img, valid)


def smooth_range_image(rimg: RangeImage, wrap: bool = False, size: int = 3) -> RangeImage:
    """Median-filter the valid ranges; the valid mask is unchanged.

    Invalid pixels are excluded from every window (they enter as +inf);
    a pixel whose window is mostly invalid keeps its original value.
    Meant as a preprocessing step for normal estimation, where per-pixel
    range noise turns into large orientation noise.
    """
    filled = np.where(rimg.valid, rimg.range, np.inf)
    k = size // 2
    if wrap and k:
        filled = np.pad(filled, ((0, 0), (k, k)), mode="wrap")
    sm = ndimage.median_filter(filled, size=size, mode="nearest")
    if wrap and k:
        sm = sm[:, k:-k]
    out = np.where(rimg.valid & np.isfinite(sm), sm, rimg.range)
    return RangeImage(out, rimg.valid.copy())


def range_image_normals(cam: SphericalCamera, rimg: RangeImage) -> NormalImage:
    """Central-difference surface normals of a range image.

    A pixel gets a normal only when all four neighbors are valid; the
    horizontal neighbors wrap around the azimuth seam for full-circle
    cameras.  Normals are unit length and oriented toward the sensor
    (negative dot product with the viewing ray).
    """
    H, W = rimg.shape
    dirs = cam.pixel_directions
    pts = rimg.range[..., None] * dirs

    wrap = cam.full_circle
    if wrap:
        left = np.roll(pts, 1, axis=1)
        right = np.roll(pts, -1, axis=1)
        lv = np.roll(rimg.valid, 1, axis=1)
        rv = np.roll(rimg.valid, -1, axis=1)
    else:
        left = np.zeros_like(pts)
        right = np.zeros_like(pts)
        left[:, 1:] = pts[:, :-1]
        right[:, :-1] = pts[:, 1:]
        lv = np.zeros_like(rimg.valid)
        rv = np.zeros_like(rimg.valid)
        lv[:, 1:] = rimg.valid[:, :-1]
        rv[:, :-1] = rimg.valid[:, 1:]

    up = np.zeros_like(pts)
    down = np.zeros_like(pts)
    up[1:] = pts[:-1]
    down[:-1] = pts[1:]
    uv_ = np.zeros_like(rimg.valid)
    dv_ = np.zeros_like(rimg.valid)
    uv_[1:] = rimg.valid[:-1]
    dv_[:-1] = rimg.valid[1:]

    ok = rimg.valid & lv & rv & uv_ & dv_
    dx = right - left
    dy = down - up
    n = np.cross(dx, dy)
    norm = np.linalg.norm(n, axis=-1)
    ok &= norm > 1e-12
    n = np.divide(n, np.maximum(norm, 1e-12)[..., None], where=ok[..., None])
    # orient toward the sensor: flip where the normal points along the ray
    flip = np.sum(n * dirs, axis=-1) > 0
    n[flip] = -n[flip]
    n[~ok] = 0.0
    return NormalImage(n, ok)
