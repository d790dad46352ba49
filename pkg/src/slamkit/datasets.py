"""Uniform frame access over KITTI odometry, TUM RGB-D, EuRoC, video
files and image folders, plus ground-truth loading and RGB-depth
association.

Every handle yields FrameBundle objects in nondecreasing timestamp
order.  Depth images come back in meters (raw / DepthMapFactor, zero
meaning "no depth").  Ground truth is normalized to camera-to-world SE3
in the left-camera frame; EuRoC body poses are multiplied by the
body-to-camera extrinsic from the settings file.
"""

from __future__ import annotations

import glob as globmod
import os
from dataclasses import dataclass
from typing import List, Optional, Sequence, Tuple

import cv2
import numpy as np

from .camera import SENSOR_MONO, SENSOR_RGBD, SENSOR_STEREO
from .config import (
    EUROC_DATASET,
    FOLDER_DATASET,
    KITTI_DATASET,
    TUM_DATASET,
    VIDEO_DATASET,
    DatasetConfig,
    body_to_camera_from_settings,
)
from .geometry import SE3, interpolate_pose
from .trajectory import ASSOCIATION_MAX_DT, associate_timestamps, read_trajectory


class DatasetError(Exception):
    pass


class DatasetLayoutError(DatasetError):
    """Directory structure does not match the dataset family; names the path."""


class MissingAssociationsError(DatasetLayoutError):
    pass


class EmptyDatasetError(DatasetError):
    pass


class UnsupportedDatasetError(DatasetError):
    pass


@dataclass
class FrameBundle:
    index: int
    timestamp: float
    left: np.ndarray
    right: Optional[np.ndarray] = None
    depth: Optional[np.ndarray] = None  # float32 meters, 0 = no depth


def _require(path: str) -> str:
    if not os.path.exists(path):
        raise DatasetLayoutError(f"missing path: {path}")
    return path


def _imread_gray(path: str) -> np.ndarray:
    img = cv2.imread(path, cv2.IMREAD_GRAYSCALE)
    if img is None:
        raise DatasetError(f"cannot read image: {path}")
    return img


def _imread_color(path: str) -> np.ndarray:
    img = cv2.imread(path, cv2.IMREAD_COLOR)
    if img is None:
        raise DatasetError(f"cannot read image: {path}")
    return img


def _imread_raw(path: str) -> np.ndarray:
    img = cv2.imread(path, cv2.IMREAD_UNCHANGED)
    if img is None:
        raise DatasetError(f"cannot read image: {path}")
    return img


# --------------------------------------------------------------- ground truth


class GroundTruthTrajectory:
    """Timestamped camera-to-world poses with interpolated lookup."""

    def __init__(self, timestamps: Sequence[float], poses: Sequence[SE3],
                 frame: str = "camera"):
        ts = np.asarray(timestamps, dtype=float)
        keep = np.ones(len(ts), dtype=bool)
        keep[1:] = np.diff(ts) > 0
        if not np.all(np.diff(ts) >= 0):
            raise ValueError("ground-truth timestamps must be non-decreasing")
        # exact duplicates keep the first sample; the invariant is strict
        self.timestamps = ts[keep]
        self.poses = [p for p, k in zip(poses, keep) if k]
        self.frame = frame
        if len(self.timestamps) == 0:
            raise ValueError("empty ground truth")

    def __len__(self) -> int:
        return len(self.timestamps)

    def in_range(self, t: float) -> bool:
        return self.timestamps[0] <= t <= self.timestamps[-1]

    def pose_at(self, t: float) -> SE3:
        """Pose at t: linear in translation, spherical-linear in rotation."""
        if not self.in_range(t):
            raise ValueError(f"timestamp {t} outside ground-truth range "
                             f"[{self.timestamps[0]}, {self.timestamps[-1]}]")
        i = int(np.searchsorted(self.timestamps, t, side="right")) - 1
        if i >= len(self.timestamps) - 1:
            return self.poses[-1].copy()
        t0, t1 = self.timestamps[i], self.timestamps[i + 1]
        alpha = 0.0 if t1 == t0 else (t - t0) / (t1 - t0)
        return interpolate_pose(self.poses[i], self.poses[i + 1], alpha)

    def position_at(self, t: float) -> np.ndarray:
        return self.pose_at(t).t

    def transformed(self, t_extra: SE3, frame: str) -> "GroundTruthTrajectory":
        poses = [p.compose(t_extra) for p in self.poses]
        return GroundTruthTrajectory(self.timestamps, poses, frame=frame)


def load_groundtruth(path: str, fmt: str,
                     timestamps: Optional[Sequence[float]] = None) -> GroundTruthTrajectory:
    """Parse a ground-truth file: tum, kitti, euroc or simple format.

    kitti rows carry no timestamps; pass the per-frame times to attach
    them (row index otherwise).  euroc rows are comma separated
    "t_ns,x,y,z,qw,qx,qy,qz[,...]" with extra state columns ignored.
    simple rows are "t x y z qx qy qz qw [scale]".
    """
    _require(path)
    if fmt in ("tum", "kitti"):
        rec = read_trajectory(path, fmt)
        ts = rec.timestamps
        if fmt == "kitti" and timestamps is not None:
            if len(timestamps) < len(rec):
                raise ValueError("fewer timestamps than ground-truth rows")
            ts = np.asarray(timestamps, dtype=float)[: len(rec)]
        return GroundTruthTrajectory(ts, list(rec.poses))
    if fmt == "euroc":
        ts, poses = [], []
        with open(path) as f:
            for ln, line in enumerate(f, start=1):
                line = line.strip()
                if not line or line.startswith("#"):
                    continue
                parts = line.replace(",", " ").split()
                if len(parts) < 8:
                    raise ValueError(f"{path}:{ln}: euroc row needs >= 8 fields")
                try:
                    t = float(parts[0]) * 1e-9
                    x, y, z, qw, qx, qy, qz = (float(v) for v in parts[1:8])
                except ValueError as e:
                    raise ValueError(f"{path}:{ln}: {e}") from None
                ts.append(t)
                poses.append(SE3.from_quat_t(np.array([qx, qy, qz, qw]),
                                             np.array([x, y, z])))
        return GroundTruthTrajectory(ts, poses, frame="body")
    if fmt == "simple":
        ts, poses = [], []
        with open(path) as f:
            for ln, line in enumerate(f, start=1):
                line = line.strip()
                if not line or line.startswith("#"):
                    continue
                parts = line.split()
                if len(parts) not in (8, 9):
                    raise ValueError(f"{path}:{ln}: simple row needs 8 or 9 fields")
                try:
                    vals = [float(v) for v in parts]
                except ValueError as e:
                    raise ValueError(f"{path}:{ln}: {e}") from None
                t, x, y, z, qx, qy, qz, qw = vals[:8]
                ts.append(t)
                poses.append(SE3.from_quat_t(np.array([qx, qy, qz, qw]),
                                             np.array([x, y, z])))
        return GroundTruthTrajectory(ts, poses)
    raise ValueError(f"unknown ground-truth format '{fmt}'")


def groundtruth_scale(gt: GroundTruthTrajectory, t_prev: float, t_cur: float) -> float:
    """Inter-frame translation magnitude from interpolated ground truth."""
    return float(np.linalg.norm(gt.position_at(t_cur) - gt.position_at(t_prev)))


# ---------------------------------------------------------------- association


def associate_rgb_depth(rgb_index: Sequence[Tuple[float, str]],
                        depth_index: Sequence[Tuple[float, str]],
                        max_dt: float = ASSOCIATION_MAX_DT):
    """Greedy nearest-timestamp pairing of (t, path) lists; one use each."""
    pairs = associate_timestamps([t for t, _ in rgb_index],
                                 [t for t, _ in depth_index], max_dt)
    return [(rgb_index[i], depth_index[j]) for i, j in pairs]


# -------------------------------------------------------------------- handles


class Dataset:
    """Sequential frame source; subclasses fill _timestamps and read(i)."""

    sensor_type = SENSOR_MONO
    fps: float = 30.0

    def __init__(self, config: DatasetConfig):
        self.config = config
        self._timestamps: List[float] = []

    def __len__(self) -> int:
        return len(self._timestamps)

    @property
    def num_frames(self) -> int:
        return len(self._timestamps)

    def timestamp(self, i: int) -> float:
        return self._timestamps[i]

    def frame(self, i: int) -> FrameBundle:
        raise NotImplementedError

    def __iter__(self):
        for i in range(len(self)):
            yield self.frame(i)

    def groundtruth(self) -> GroundTruthTrajectory:
        raise DatasetError(f"{type(self).__name__} has no ground truth configured")


class KittiDataset(Dataset):
    """base_path/sequences/<seq>/image_0|image_1 + times.txt, poses/<seq>.txt."""

    def __init__(self, config: DatasetConfig):
        super().__init__(config)
        self.sensor_type = config.sensor_type
        seq_dir = _require(os.path.join(config.base_path, "sequences", config.name))
        self.left_dir = _require(os.path.join(seq_dir, "image_0"))
        self.right_dir = (_require(os.path.join(seq_dir, "image_1"))
                          if self.sensor_type == SENSOR_STEREO else None)
        self.left_files = sorted(globmod.glob(os.path.join(self.left_dir, "*.png")))
        if not self.left_files:
            raise EmptyDatasetError(f"no images in {self.left_dir}")
        times_path = _require(os.path.join(seq_dir, "times.txt"))
        with open(times_path) as f:
            times = [float(line) for line in f if line.strip()]
        self._timestamps = times[: len(self.left_files)]
        if len(self._timestamps) < len(self.left_files):
            raise DatasetLayoutError(f"times.txt shorter than image list: {times_path}")
        if len(times) > 1:
            self.fps = 1.0 / max(np.median(np.diff(times)), 1e-6)

    def frame(self, i: int) -> FrameBundle:
        left = _imread_gray(self.left_files[i])
        right = None
        if self.right_dir is not None:
            right = _imread_gray(os.path.join(self.right_dir,
                                              os.path.basename(self.left_files[i])))
        return FrameBundle(i, self._timestamps[i], left, right=right)

    def groundtruth(self) -> GroundTruthTrajectory:
        path = self.config.groundtruth_file
        if not path or path == "auto":
            path = os.path.join(self.config.base_path, "poses",
                                f"{self.config.name}.txt")
        return load_groundtruth(path, "kitti", timestamps=self._timestamps)


class TumDataset(Dataset):
    """Sequence folder with rgb/, depth/ and a pre-built associations.txt."""

    def __init__(self, config: DatasetConfig, depth_factor: float = 5000.0):
        super().__init__(config)
        self.sensor_type = config.sensor_type
        self.depth_factor = depth_factor
        self.seq_dir = _require(os.path.join(config.base_path, config.name))
        assoc = os.path.join(self.seq_dir, "associations.txt")
        if not os.path.exists(assoc):
            raise MissingAssociationsError(f"missing path: {assoc}")
        self.rgb_files: List[str] = []
        self.depth_files: List[str] = []
        with open(assoc) as f:
            for line in f:
                line = line.strip()
                if not line or line.startswith("#"):
                    continue
                t_rgb, rgb_path, _t_depth, depth_path = line.split()[:4]
                self._timestamps.append(float(t_rgb))
                self.rgb_files.append(os.path.join(self.seq_dir, rgb_path))
                self.depth_files.append(os.path.join(self.seq_dir, depth_path))
        if not self.rgb_files:
            raise EmptyDatasetError(f"no associated frames in {assoc}")
        if len(self._timestamps) > 1:
            dt = np.median(np.diff(self._timestamps))
            self.fps = 1.0 / max(dt, 1e-6)

    def frame(self, i: int) -> FrameBundle:
        left = _imread_color(self.rgb_files[i])
        depth = None
        if self.sensor_type == SENSOR_RGBD:
            raw = _imread_raw(self.depth_files[i])
            depth = raw.astype(np.float32) / self.depth_factor
        return FrameBundle(i, self._timestamps[i], left, depth=depth)

    def groundtruth(self) -> GroundTruthTrajectory:
        path = self.config.groundtruth_file
        if not path or path == "auto":
            path = os.path.join(self.seq_dir, "groundtruth.txt")
        return load_groundtruth(path, "tum")


class EurocDataset(Dataset):
    """base/name/mav0/cam0|cam1/data/<t_ns>.png; body-frame ground truth."""

    def __init__(self, config: DatasetConfig, settings: Optional[dict] = None):
        super().__init__(config)
        self.sensor_type = config.sensor_type
        self.settings = settings or {}
        mav = _require(os.path.join(config.base_path, config.name, "mav0"))
        self.cam0 = _require(os.path.join(mav, "cam0", "data"))
        self.cam1 = (_require(os.path.join(mav, "cam1", "data"))
                     if self.sensor_type == SENSOR_STEREO else None)
        self.left_files = sorted(globmod.glob(os.path.join(self.cam0, "*.png")))
        if not self.left_files:
            raise EmptyDatasetError(f"no images in {self.cam0}")
        self._timestamps = [int(os.path.splitext(os.path.basename(p))[0]) * 1e-9
                            for p in self.left_files]
        self.mav_dir = mav
        if len(self._timestamps) > 1:
            self.fps = 1.0 / max(np.median(np.diff(self._timestamps)), 1e-6)

    def frame(self, i: int) -> FrameBundle:
        left = _imread_gray(self.left_files[i])
        right = None
        if self.cam1 is not None:
            right = _imread_gray(os.path.join(self.cam1,
                                              os.path.basename(self.left_files[i])))
        return FrameBundle(i, self._timestamps[i], left, right=right)

    def groundtruth(self) -> GroundTruthTrajectory:
        path = self.config.groundtruth_file
        if not path or path == "auto":
            path = os.path.join(self.mav_dir, "state_groundtruth_estimate0",
                                "data.tum")
        _require(path)
        gt = load_groundtruth(path, "tum")
        # body-frame poses: right-multiply by T_bc to land in the camera frame
        t_bc = body_to_camera_from_settings(self.settings)
        return gt.transformed(t_bc, frame="camera")


class VideoDataset(Dataset):
    """Any container OpenCV can demux; timestamps are frame_index / fps."""

    def __init__(self, config: DatasetConfig):
        super().__init__(config)
        path = _require(os.path.join(config.base_path, config.name))
        cap = cv2.VideoCapture(path)
        if not cap.isOpened():
            raise DatasetError(f"cannot open video: {path}")
        self.fps = float(config.fps or cap.get(cv2.CAP_PROP_FPS) or 30.0)
        frames = []
        while True:
            ok, img = cap.read()
            if not ok:
                break
            frames.append(img)
        cap.release()
        if not frames:
            raise EmptyDatasetError(f"no frames in {path}")
        self._frames = frames
        self._timestamps = [i / self.fps for i in range(len(frames))]

    def frame(self, i: int) -> FrameBundle:
        return FrameBundle(i, self._timestamps[i], self._frames[i])

    def groundtruth(self) -> GroundTruthTrajectory:
        if not self.config.groundtruth_file:
            return super().groundtruth()
        return load_groundtruth(self.config.groundtruth_file, "simple")


class FolderDataset(Dataset):
    """Glob of image files under base_path; timestamps are index / fps."""

    def __init__(self, config: DatasetConfig):
        super().__init__(config)
        root = _require(config.base_path)
        self.files = sorted(globmod.glob(os.path.join(root, config.glob)))
        if not self.files:
            raise EmptyDatasetError(
                f"glob '{config.glob}' matches no files under {root}")
        self.fps = float(config.fps or 30.0)
        self._timestamps = [i / self.fps for i in range(len(self.files))]

    def frame(self, i: int) -> FrameBundle:
        return FrameBundle(i, self._timestamps[i], _imread_color(self.files[i]))

    def groundtruth(self) -> GroundTruthTrajectory:
        if not self.config.groundtruth_file:
            return super().groundtruth()
        return load_groundtruth(self.config.groundtruth_file, "simple")


def open_dataset(config: DatasetConfig, settings: Optional[dict] = None) -> Dataset:
    if config.type == KITTI_DATASET:
        return KittiDataset(config)
    if config.type == TUM_DATASET:
        factor = float((settings or {}).get("DepthMapFactor", 5000.0))
        return TumDataset(config, depth_factor=factor)
    if config.type == EUROC_DATASET:
        return EurocDataset(config, settings=settings)
    if config.type == VIDEO_DATASET:
        return VideoDataset(config)
    if config.type == FOLDER_DATASET:
        return FolderDataset(config)
    raise UnsupportedDatasetError(f"unsupported dataset type '{config.type}'")
