"""Synthetic box-world renderer with exact poses, depth, and disk layouts.

A camera flies inside a textured box; every frame is ray-cast against the
box planes, so the color image, the depth map, and the ground-truth pose
are exact by construction — end-to-end trajectory errors then measure the
engine, not the fixture.  Writers emit the on-disk layouts the dataset
loaders expect (TUM rgb/depth sequences, KITTI stereo sequences) together
with matching settings and run-config files.
"""

from __future__ import annotations

import os
from dataclasses import dataclass
from typing import List, Optional, Sequence, Tuple

import cv2
import numpy as np
import yaml

from slamkit.camera import CameraModel
from slamkit.geometry import SE3, quat_from_rotation

DEPTH_PNG_FACTOR = 5000.0
T0 = 1000.0           # first synthetic timestamp (seconds)
FPS = 30.0


def default_camera(width: int = 320, height: int = 240, sensor: str = "mono",
                   bf: float = 0.0, depth_scale: float = 1.0) -> CameraModel:
    return CameraModel(fx=230.0, fy=230.0, cx=(width - 1) / 2.0,
                       cy=(height - 1) / 2.0, width=width, height=height,
                       bf=bf, depth_scale=depth_scale, sensor_kind=sensor)


# --------------------------------------------------------------------- scene


def _texture(seed: int, size: int = 768, squares: int = 500,
             border: int = 0) -> np.ndarray:
    """Corner-rich color texture: random rectangles over a smooth ramp.

    A nonzero border leaves a uniform margin, keeping detectable corners
    away from the rectangle's occluding rim (corners on a depth edge are
    T-junctions whose apparent 3D position slides with viewpoint).
    """
    rng = np.random.default_rng(seed)
    y, x = np.mgrid[0:size, 0:size].astype(np.float32)
    base = (120.0 + 50.0 * np.sin(2 * np.pi * x / size * 2.3 + seed)
            + 35.0 * np.cos(2 * np.pi * y / size * 3.1))
    img = np.repeat(base[..., None], 3, axis=2)
    lo, hi = border, size - border
    for _ in range(squares):
        w, h = rng.integers(5, 28, size=2)
        x0 = int(rng.integers(lo, hi - w))
        y0 = int(rng.integers(lo, hi - h))
        img[y0:y0 + h, x0:x0 + w] = rng.integers(10, 246, size=3)
    if border:
        mean = img[border:-border, border:-border].mean(axis=(0, 1))
        img[:border] = img[-border:] = mean
        img[:, :border] = img[:, -border:] = mean
    return np.clip(img, 0, 255).astype(np.uint8)


@dataclass
class Plane:
    """Finite textured rectangle: p0 center, unit in-plane axes ex/ey."""

    p0: np.ndarray
    ex: np.ndarray
    ey: np.ndarray
    sx: float            # half extent along ex (meters)
    sy: float
    tex: np.ndarray

    @property
    def normal(self) -> np.ndarray:
        return np.cross(self.ex, self.ey)


def box_scene(seed: int = 0, depth: float = 2.4, half_width: float = 2.0,
              half_height: float = 1.4,
              fold: float = 14.0) -> List[Plane]:
    """Creased room interior; camera convention is x right, y down,
    z forward, so the floor sits at +y.

    Back wall, floor, and ceiling are each folded about the x=0 crease by
    ±fold degrees, so every view contains non-coplanar structure (a view
    of a single plane leaves the pose ambiguous — planar PnP has a
    mirrored second solution).  Creases are contact edges, never depth
    discontinuities, which keeps corner depths well defined.  The room
    stays convex, so nearest-hit ray casting resolves panel overshoot.
    """
    ux = np.array([1.0, 0.0, 0.0])
    uy = np.array([0.0, 1.0, 0.0])
    uz = np.array([0.0, 0.0, 1.0])
    z_lo, z_hi = -1.9, depth + 0.8      # overshoot so the view never leaks
    z_mid, z_half = (z_lo + z_hi) / 2, (z_hi - z_lo) / 2
    c, s = np.cos(np.deg2rad(fold)), np.sin(np.deg2rad(fold))
    half_span = (half_width + 0.6) / c
    planes = [
        Plane(np.array([0.0, 0.0, -1.8]), ux, uy,
              half_width + 0.8, half_height + 0.6, _texture(seed + 1)),
        Plane(np.array([-half_width, 0.0, z_mid]), uz, uy,
              z_half, half_height + 0.6, _texture(seed + 2)),
        Plane(np.array([half_width, 0.0, z_mid]), uz, uy,
              z_half, half_height + 0.6, _texture(seed + 3)),
    ]
    for i, sgn in enumerate((1.0, -1.0)):
        # back wall halves bulge toward the camera away from the crease
        ex = np.array([sgn * c, 0.0, -s])
        planes.append(Plane(np.array([0.0, 0.0, depth]) + half_span * ex,
                            ex, uy, half_span, half_height + 0.8,
                            _texture(seed + 4 + i)))
        # floor and ceiling halves rise toward their side walls
        ex = np.array([sgn * c, -sgn * s, 0.0])
        planes.append(Plane(np.array([0.0, half_height, z_mid])
                            + half_span * ex, ex, uz, half_span, z_half,
                            _texture(seed + 6 + i)))
        ex = np.array([sgn * c, sgn * s, 0.0])
        planes.append(Plane(np.array([0.0, -half_height, z_mid])
                            + half_span * ex, ex, uz, half_span, z_half,
                            _texture(seed + 8 + i)))
    return planes


def _sample_bilinear(tex: np.ndarray, tx: np.ndarray, ty: np.ndarray) -> np.ndarray:
    h, w = tex.shape[:2]
    tx = np.clip(tx, 0.0, w - 1.0001)
    ty = np.clip(ty, 0.0, h - 1.0001)
    x0 = tx.astype(int)
    y0 = ty.astype(int)
    fx = (tx - x0)[..., None]
    fy = (ty - y0)[..., None]
    t = tex.astype(np.float32)
    top = t[y0, x0] * (1 - fx) + t[y0, x0 + 1] * fx
    bot = t[y0 + 1, x0] * (1 - fx) + t[y0 + 1, x0 + 1] * fx
    return top * (1 - fy) + bot * fy


def render(camera: CameraModel, pose: SE3,
           scene: Sequence[Plane]) -> Tuple[np.ndarray, np.ndarray]:
    """Ray-cast one view -> (color uint8 RGB, depth float32 meters).

    pose is camera-to-world.  Depth equals the ray parameter because the
    camera-frame ray is scaled to unit z, so depth 0 marks a miss.
    """
    h, w = camera.height, camera.width
    v, u = np.mgrid[0:h, 0:w].astype(np.float64)
    rays_cam = np.stack([(u - camera.cx) / camera.fx,
                         (v - camera.cy) / camera.fy,
                         np.ones_like(u)], axis=-1)
    rays_w = rays_cam @ pose.r.T
    origin = pose.t

    depth = np.full((h, w), np.inf)
    color = np.zeros((h, w, 3), dtype=np.float32)
    for plane in scene:
        n = plane.normal
        denom = rays_w @ n
        with np.errstate(divide="ignore", invalid="ignore"):
            s = ((plane.p0 - origin) @ n) / denom
        q = origin + s[..., None] * rays_w
        rel = q - plane.p0
        a = rel @ plane.ex
        b = rel @ plane.ey
        hit = (np.abs(denom) > 1e-12) & (s > 0.05) & (s < depth) \
            & (np.abs(a) <= plane.sx) & (np.abs(b) <= plane.sy)
        if not np.any(hit):
            continue
        size = plane.tex.shape[0]
        tx = (a[hit] + plane.sx) / (2 * plane.sx) * (size - 1)
        ty = (b[hit] + plane.sy) / (2 * plane.sy) * (size - 1)
        color[hit] = _sample_bilinear(plane.tex, tx, ty)
        depth[hit] = s[hit]
    depth[~np.isfinite(depth)] = 0.0
    return np.clip(color, 0, 255).astype(np.uint8), depth.astype(np.float32)


# -------------------------------------------------------------- trajectories


def _look_at(eye: np.ndarray, target: np.ndarray) -> SE3:
    z = target - eye
    z = z / np.linalg.norm(z)
    down = np.array([0.0, 1.0, 0.0])
    x = np.cross(down, z)
    x = x / np.linalg.norm(x)
    y = np.cross(z, x)
    return SE3(np.column_stack([x, y, z]), eye)


def circuit_trajectory(n: int, radius: float = 0.35,
                       loops: float = 1.0) -> List[SE3]:
    """A closed translation-dominant circuit (ends where it starts)."""
    poses = []
    for k in range(n):
        theta = 2 * np.pi * loops * k / max(n - 1, 1)
        eye = np.array([radius * np.sin(theta),
                        0.08 * np.sin(2 * theta),
                        0.20 * (1 - np.cos(theta))])
        target = np.array([0.0, 0.05, 2.4])
        poses.append(_look_at(eye, target))
    return poses


def sweep_trajectory(n: int, step: float = 0.035,
                     sway: float = 0.25) -> List[SE3]:
    """Mostly-forward motion with lateral sway (stereo/odometry style)."""
    poses = []
    for k in range(n):
        eye = np.array([sway * np.sin(0.08 * k), 0.05 * np.sin(0.05 * k),
                        step * k])
        target = eye + np.array([0.25 * np.sin(0.04 * k), 0.0, 3.0])
        poses.append(_look_at(eye, target))
    return poses


def timestamps_for(n: int, t0: float = T0, fps: float = FPS) -> List[float]:
    return [t0 + k / fps for k in range(n)]


# ------------------------------------------------------------------- writers


def _write_tum_gt(path: str, timestamps: Sequence[float],
                  poses: Sequence[SE3]) -> None:
    lines = ["# ground truth trajectory"]
    for t, pose in zip(timestamps, poses):
        q = quat_from_rotation(pose.r)
        vals = " ".join(f"{v:.9f}" for v in (*pose.t, *q))
        lines.append(f"{t:.6f} {vals}")
    with open(path, "w") as f:
        f.write("\n".join(lines) + "\n")


def write_tum_sequence(root: str, name: str, camera: CameraModel,
                       poses: Sequence[SE3], scene: Sequence[Plane],
                       timestamps: Optional[Sequence[float]] = None) -> str:
    """Render a TUM-layout sequence (rgb/, depth/, associations, gt)."""
    if timestamps is None:
        timestamps = timestamps_for(len(poses))
    seq = os.path.join(root, name)
    os.makedirs(os.path.join(seq, "rgb"), exist_ok=True)
    os.makedirs(os.path.join(seq, "depth"), exist_ok=True)
    assoc = []
    for t, pose in zip(timestamps, poses):
        color, depth = render(camera, pose, scene)
        fname = f"{t:.6f}.png"
        cv2.imwrite(os.path.join(seq, "rgb", fname), color[..., ::-1])
        raw = np.round(depth * DEPTH_PNG_FACTOR).astype(np.uint16)
        cv2.imwrite(os.path.join(seq, "depth", fname), raw)
        assoc.append(f"{t:.6f} rgb/{fname} {t:.6f} depth/{fname}")
    with open(os.path.join(seq, "associations.txt"), "w") as f:
        f.write("\n".join(assoc) + "\n")
    _write_tum_gt(os.path.join(seq, "groundtruth.txt"), timestamps, poses)
    return seq


def write_kitti_sequence(root: str, name: str, camera: CameraModel,
                         poses: Sequence[SE3], scene: Sequence[Plane],
                         baseline: float,
                         timestamps: Optional[Sequence[float]] = None) -> str:
    """Render a KITTI-layout stereo sequence (image_0/1, times, poses)."""
    if timestamps is None:
        timestamps = timestamps_for(len(poses), t0=0.0, fps=10.0)
    seq = os.path.join(root, "sequences", name)
    os.makedirs(os.path.join(seq, "image_0"), exist_ok=True)
    os.makedirs(os.path.join(seq, "image_1"), exist_ok=True)
    shift = SE3(np.eye(3), np.array([baseline, 0.0, 0.0]))
    for i, pose in enumerate(poses):
        left, _ = render(camera, pose, scene)
        right, _ = render(camera, pose @ shift, scene)
        fname = f"{i:06d}.png"
        cv2.imwrite(os.path.join(seq, "image_0", fname),
                    cv2.cvtColor(left, cv2.COLOR_RGB2GRAY))
        cv2.imwrite(os.path.join(seq, "image_1", fname),
                    cv2.cvtColor(right, cv2.COLOR_RGB2GRAY))
    with open(os.path.join(seq, "times.txt"), "w") as f:
        f.write("".join(f"{t:.6f}\n" for t in timestamps))
    poses_dir = os.path.join(root, "poses")
    os.makedirs(poses_dir, exist_ok=True)
    with open(os.path.join(poses_dir, f"{name}.txt"), "w") as f:
        for pose in poses:
            m = np.hstack([pose.r, pose.t.reshape(3, 1)])
            f.write(" ".join(f"{v:.9f}" for v in m.reshape(-1)) + "\n")
    return seq


def write_settings(path: str, camera: CameraModel, fps: float = FPS,
                   extra: Optional[dict] = None) -> str:
    lines = ["%YAML:1.0",
             f"Camera.fx: {camera.fx}",
             f"Camera.fy: {camera.fy}",
             f"Camera.cx: {camera.cx}",
             f"Camera.cy: {camera.cy}",
             f"Camera.width: {camera.width}",
             f"Camera.height: {camera.height}",
             f"Camera.fps: {fps}"]
    if camera.bf > 0:
        lines.append(f"Camera.bf: {camera.bf}")
    if camera.sensor_kind == "rgbd":
        lines.append(f"DepthMapFactor: {DEPTH_PNG_FACTOR}")
    for key, value in (extra or {}).items():
        lines.append(f"{key}: {value}")
    with open(path, "w") as f:
        f.write("\n".join(lines) + "\n")
    return path


def write_config(path: str, dataset_type: str, sensor_type: str,
                 base_path: str, name: str, settings_path: str,
                 global_parameters: Optional[dict] = None,
                 system_state: Optional[dict] = None,
                 save_trajectory: Optional[dict] = None) -> str:
    doc = {
        "DATASET": {"type": dataset_type},
        dataset_type: {
            "sensor_type": sensor_type,
            "base_path": base_path,
            "name": name,
            "settings": settings_path,
        },
    }
    if global_parameters:
        doc["GLOBAL_PARAMETERS"] = global_parameters
    if system_state:
        doc["SYSTEM_STATE"] = system_state
    if save_trajectory:
        doc["SAVE_TRAJECTORY"] = save_trajectory
    with open(path, "w") as f:
        yaml.safe_dump(doc, f, sort_keys=False)
    return path


# --------------------------------------------------------------- one-stops

# detector settings tuned for the small synthetic frames: plenty of
# corners per image but a bounded feature budget keeps the tests quick
FAST_PARAMS = {"num_features": 700, "fast_threshold": 15}


def make_tum_rgbd(root, n: int = 40, seed: int = 0,
                  trajectory: Optional[Sequence[SE3]] = None,
                  global_parameters: Optional[dict] = None,
                  system_state: Optional[dict] = None,
                  save_trajectory: Optional[dict] = None):
    """Full RGB-D fixture -> (config_path, camera, poses, timestamps)."""
    root = str(root)
    # bf = fx * 8 cm virtual baseline: depth readings enter the optimizer
    # as virtual-right-coordinate rows, as on a real depth camera rig
    camera = default_camera(sensor="rgbd", bf=230.0 * 0.08,
                            depth_scale=DEPTH_PNG_FACTOR)
    scene = box_scene(seed)
    poses = list(trajectory) if trajectory is not None \
        else circuit_trajectory(n)
    timestamps = timestamps_for(len(poses))
    write_tum_sequence(root, "seq", camera, poses, scene, timestamps)
    settings = write_settings(os.path.join(root, "tum.yaml"), camera)
    params = dict(FAST_PARAMS)
    params.update(global_parameters or {})
    config = write_config(os.path.join(root, "config.yaml"), "TUM_DATASET",
                          "rgbd", root, "seq", settings,
                          global_parameters=params,
                          system_state=system_state,
                          save_trajectory=save_trajectory)
    return config, camera, poses, timestamps


def make_kitti_stereo(root, n: int = 40, seed: int = 3, baseline: float = 0.12,
                      trajectory: Optional[Sequence[SE3]] = None,
                      global_parameters: Optional[dict] = None):
    """Full stereo fixture -> (config_path, camera, poses, timestamps)."""
    root = str(root)
    camera = default_camera(sensor="stereo", bf=230.0 * baseline)
    scene = box_scene(seed, depth=3.2 + 0.035 * n, half_width=3.0)
    poses = list(trajectory) if trajectory is not None \
        else sweep_trajectory(n)
    timestamps = timestamps_for(len(poses), t0=0.0, fps=10.0)
    write_kitti_sequence(root, "00", camera, poses, scene, baseline,
                         timestamps)
    settings = write_settings(os.path.join(root, "kitti.yaml"), camera,
                              fps=10.0)
    params = dict(FAST_PARAMS)
    params.update(global_parameters or {})
    config = write_config(os.path.join(root, "config.yaml"), "KITTI_DATASET",
                          "stereo", root, "00", settings,
                          global_parameters=params)
    return config, camera, poses, timestamps
