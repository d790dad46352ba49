"""Pinhole camera model with radial-tangential distortion.

Projection applies distortion; undistortion runs a fixed-point iteration on
normalized coordinates (10 rounds, 1e-8 px tolerance), which is exact enough
for project/backproject round trips at 1e-6 px.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

SENSOR_MONO = "mono"
SENSOR_STEREO = "stereo"
SENSOR_RGBD = "rgbd"


@dataclass
class CameraModel:
    fx: float
    fy: float
    cx: float
    cy: float
    width: int
    height: int
    dist: np.ndarray = field(default_factory=lambda: np.zeros(5))  # k1 k2 p1 p2 k3
    bf: float = 0.0          # baseline * fx, stereo only (px * m)
    depth_scale: float = 1.0  # raw depth / depth_scale = meters (rgbd)
    sensor_kind: str = SENSOR_MONO

    def __post_init__(self):
        if self.fx <= 0 or self.fy <= 0:
            raise ValueError("focal lengths must be positive")
        if self.width <= 0 or self.height <= 0:
            raise ValueError("image size must be positive")
        d = np.zeros(5)
        dist = np.atleast_1d(np.asarray(self.dist, dtype=float))
        d[:dist.size] = dist[:5]
        self.dist = d
        if self.sensor_kind == SENSOR_STEREO and self.bf <= 0:
            raise ValueError("stereo camera requires positive baseline*fx")

    # -- intrinsics ---------------------------------------------------------

    @property
    def k_matrix(self):
        return np.array([[self.fx, 0.0, self.cx],
                         [0.0, self.fy, self.cy],
                         [0.0, 0.0, 1.0]])

    @property
    def has_distortion(self):
        return bool(np.any(self.dist != 0.0))

    @property
    def baseline(self):
        return self.bf / self.fx if self.bf > 0 else 0.0

    # -- distortion on normalized coords -------------------------------------

    def _distort_normalized(self, xn, yn):
        k1, k2, p1, p2, k3 = self.dist
        r2 = xn * xn + yn * yn
        radial = 1.0 + r2 * (k1 + r2 * (k2 + r2 * k3))
        xd = xn * radial + 2.0 * p1 * xn * yn + p2 * (r2 + 2.0 * xn * xn)
        yd = yn * radial + p1 * (r2 + 2.0 * yn * yn) + 2.0 * p2 * xn * yn
        return xd, yd

    def _undistort_normalized(self, xd, yd):
        xn, yn = np.array(xd, dtype=float, copy=True), np.array(yd, dtype=float, copy=True)
        tol = 1e-8 / max(self.fx, self.fy)
        for _ in range(10):
            xh, yh = self._distort_normalized(xn, yn)
            dx, dy = xh - xd, yh - yd
            xn -= dx
            yn -= dy
            if np.max(np.abs(dx)) < tol and np.max(np.abs(dy)) < tol:
                break
        return xn, yn

    # -- projection -----------------------------------------------------------

    def project(self, pts_cam):
        """Camera-frame points -> pixel coords.

        Accepts (3,) or (N, 3); returns (uv, valid) where valid requires
        positive depth and landing inside the image bounds.
        """
        pts = np.asarray(pts_cam, dtype=float)
        single = pts.ndim == 1
        pts = np.atleast_2d(pts)
        z = pts[:, 2]
        ok = z > 1e-9
        zs = np.where(ok, z, 1.0)
        xn, yn = pts[:, 0] / zs, pts[:, 1] / zs
        if self.has_distortion:
            xn, yn = self._distort_normalized(xn, yn)
        u = self.fx * xn + self.cx
        v = self.fy * yn + self.cy
        uv = np.stack([u, v], axis=1)
        valid = ok & (u >= 0) & (u < self.width) & (v >= 0) & (v < self.height)
        if single:
            return uv[0], bool(valid[0])
        return uv, valid

    def backproject(self, u, v, depth):
        """Pixel + depth (meters) -> camera-frame point(s)."""
        u = np.asarray(u, dtype=float)
        v = np.asarray(v, dtype=float)
        depth = np.asarray(depth, dtype=float)
        if np.any(depth <= 0):
            raise ValueError("backproject requires positive depth")
        xn = (u - self.cx) / self.fx
        yn = (v - self.cy) / self.fy
        if self.has_distortion:
            xn, yn = self._undistort_normalized(xn, yn)
        pts = np.stack([xn * depth, yn * depth, np.broadcast_to(depth, np.shape(xn))],
                       axis=-1)
        return pts

    def undistort_points(self, uv):
        """Raw pixel keypoints -> pixel coords under the distortion-free model."""
        uv = np.asarray(uv, dtype=float)
        if uv.size == 0:
            return uv.reshape(0, 2)
        if not self.has_distortion:
            return uv.copy()
        xn = (uv[:, 0] - self.cx) / self.fx
        yn = (uv[:, 1] - self.cy) / self.fy
        xu, yu = self._undistort_normalized(xn, yn)
        return np.stack([self.fx * xu + self.cx, self.fy * yu + self.cy], axis=1)

    def is_in_image(self, uv, margin=0.0):
        uv = np.asarray(uv, dtype=float)
        u, v = uv[..., 0], uv[..., 1]
        return ((u >= margin) & (u < self.width - margin)
                & (v >= margin) & (v < self.height - margin))

    def stereo_depth(self, disparity, min_disparity=0.5):
        """Disparity (px) -> depth (m); non-positive/too-small disparity -> 0."""
        disparity = np.asarray(disparity, dtype=float)
        ok = disparity > min_disparity
        return np.where(ok, self.bf / np.where(ok, disparity, 1.0), 0.0)

    def raw_depth_to_meters(self, raw):
        """RGB-D raw depth map -> meters; zero stays zero (no measurement)."""
        raw = np.asarray(raw, dtype=float)
        return np.where(raw > 0, raw / self.depth_scale, 0.0)

    def fov_center(self, pose, median_depth):
        """World-frame point seen through the image center at the given depth."""
        pc = self.backproject(self.cx, self.cy, float(median_depth))
        return pose.transform(np.asarray(pc, dtype=float).reshape(3))
