"""Frames and keyframes.

A Frame owns its keypoint arrays; a KeyFrame shares them but carries an
independent pose plus covisibility / spanning-tree / bag-of-words state.
"""

from __future__ import annotations

import numpy as np

from .camera import CameraModel
from .features import KP_OCTAVE, KP_U, KP_V
from .geometry import SE3

STATE_NOT_INITIALIZED = "NOT_INITIALIZED"
STATE_OK = "OK"
STATE_LOST = "LOST"


class Frame:

    __slots__ = ("id", "timestamp", "camera", "kps", "desc", "kps_u", "depths",
                 "pose", "state", "points", "outlier", "image", "depth_image")

    def __init__(self, frame_id, timestamp, camera: CameraModel, kps, desc,
                 depths=None, image=None, depth_image=None):
        self.id = int(frame_id)
        self.timestamp = float(timestamp)
        self.camera = camera
        self.kps = np.asarray(kps, dtype=np.float32).reshape(-1, 5)
        self.desc = np.asarray(desc, dtype=np.uint8).reshape(-1, 32)
        if len(self.kps) != len(self.desc):
            raise ValueError("keypoint/descriptor count mismatch")
        self.kps_u = camera.undistort_points(self.kps[:, :2]).astype(np.float32)
        if depths is not None:
            depths = np.asarray(depths, dtype=np.float32).reshape(-1)
            if len(depths) != len(self.kps):
                raise ValueError("per-keypoint depth count mismatch")
        self.depths = depths
        self.pose: SE3 | None = None
        self.state = STATE_NOT_INITIALIZED
        self.points = [None] * len(self.kps)   # MapPoint or None per keypoint
        self.outlier = np.zeros(len(self.kps), dtype=bool)
        self.image = image
        self.depth_image = depth_image

    def __len__(self):
        return len(self.kps)

    def median_scene_depth(self):
        """Median z of this frame's depth evidence, in the camera frame."""
        if self.depths is not None and np.any(self.depths > 0):
            return float(np.median(self.depths[self.depths > 0]))
        if self.pose is None:
            raise ValueError("frame has no depth information")
        zs = []
        w2c = self.pose.inverse()
        for p in self.points:
            if p is not None and not p.is_bad:
                zs.append(w2c.transform(p.position)[2])
        if not zs:
            raise ValueError("frame has no depth information")
        return float(np.median(zs))

    def matched_points(self):
        """(keypoint index, MapPoint) pairs currently bound, outliers excluded."""
        return [(i, p) for i, p in enumerate(self.points)
                if p is not None and not p.is_bad and not self.outlier[i]]


class KeyFrame:

    __slots__ = ("kid", "frame_id", "timestamp", "camera", "kps", "desc",
                 "kps_u", "depths", "pose", "points", "bow", "covisible",
                 "parent", "children", "median_depth", "is_bad", "image",
                 "depth_image", "loop_query_id", "loop_words", "loop_score")

    def __init__(self, kid, frame: Frame):
        if frame.pose is None:
            raise ValueError("keyframe requires a posed frame")
        self.kid = int(kid)
        self.frame_id = frame.id
        self.timestamp = frame.timestamp
        self.camera = frame.camera
        self.kps = frame.kps
        self.desc = frame.desc
        self.kps_u = frame.kps_u
        self.depths = frame.depths
        self.pose = frame.pose.copy()
        self.points = list(frame.points)
        self.bow = {}                 # word id -> tf-idf weight
        self.covisible = {}           # keyframe id -> shared point count
        self.parent = None            # spanning-tree parent keyframe id
        self.children = set()
        try:
            self.median_depth = frame.median_scene_depth()
        except ValueError:
            self.median_depth = 1.0
        self.is_bad = False
        self.image = frame.image
        self.depth_image = frame.depth_image
        self.loop_query_id = -1
        self.loop_words = 0
        self.loop_score = 0.0

    def __len__(self):
        return len(self.kps)

    def center(self):
        return self.pose.t

    def fov_center(self):
        """World point seen through the image centre at the median scene depth."""
        return self.camera.fov_center(self.pose, self.median_depth)

    def observed_points(self):
        return [(i, p) for i, p in enumerate(self.points)
                if p is not None and not p.is_bad]

    def covisible_by_weight(self, min_weight=0):
        """Neighbour keyframe ids sorted by descending shared-point count."""
        items = [(k, w) for k, w in self.covisible.items() if w >= min_weight]
        items.sort(key=lambda kw: (-kw[1], kw[0]))
        return [k for k, _ in items]
