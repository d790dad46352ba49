"""Front-end tracking.

Per-frame pose estimation against the sparse map: constant-velocity pose
prediction (or relocalization after a loss), guided local-map matching
refined by motion-only bundle adjustment, and the keyframe decision.  A
standalone visual-odometry mode composes essential-matrix motions whose
unit translations are scaled by ground-truth inter-frame distances.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass
from typing import List, Optional, Tuple

import numpy as np

from .datasets import groundtruth_scale
from .epipolar import (DegenerateGeometryError, estimate_relative_pose_2d2d,
                       ransac_p3p, triangulate_two_view, triangulation_angles)
from .features import KP_OCTAVE
from .frame import Frame, STATE_LOST, STATE_NOT_INITIALIZED, STATE_OK
from .geometry import SE3
from .matching import hamming_matrix, match_knn_ratio, match_within_radius
from .optimize import OptimizationFailure, octave_sigma2, solve_motion_only
from .sparse_map import SparseMap
from .trajectory import TrajectoryRecord
from .vocabulary import IncrementalBinaryIndex

log = logging.getLogger("slamkit.tracking")

MIN_INIT_MATCHES = 100
MIN_INIT_PARALLAX_DEG = 1.0
MIN_TRACK_INLIERS = 30
MIN_RELOC_INLIERS = 50
SEARCH_RADIUS_PX = 15.0
# default frame gaps between keyframes under the tracked-ratio rule
KF_GAP_MAPPING_IDLE = 0
KF_GAP_MAPPING_BUSY = 3


def _frame_seed(frame_id: int) -> int:
    # deterministic RANSAC seed per frame so reruns reproduce trajectories
    return (int(frame_id) * 2654435761) % (2 ** 32)


class InitializationFailure(RuntimeError):
    """Map seeding cannot proceed with these frames; retry with later ones."""


class InsufficientParallax(InitializationFailure):
    """Two-view baseline too small (median triangulation angle below gate)."""


@dataclass
class TrackerState:
    """Mutable tracking context carried between frames.

    velocity is the relative camera motion T_{k-1->k}; composing
    last_frame.pose with it predicts the next camera-to-world pose.  It is
    defined only while the tracker is OK.
    """

    mode: str = STATE_NOT_INITIALIZED
    last_frame: Optional[Frame] = None
    velocity: Optional[SE3] = None
    reference_kid: int = -1

    def predicted_pose(self) -> SE3:
        if self.last_frame is None or self.last_frame.pose is None:
            raise ValueError("no previous pose to predict from")
        if self.velocity is None:
            return self.last_frame.pose.copy()
        return self.last_frame.pose @ self.velocity

    def set_lost(self) -> None:
        self.mode = STATE_LOST
        self.velocity = None


@dataclass
class KeyframePolicy:
    """Keyframe decision rule.

    With use_fov_centers the decision is purely spatial: a new keyframe is
    created only when the frame's field-of-view center lies strictly farther
    than max_fov_centers_distance from every existing keyframe's.  Otherwise
    a tracked-ratio rule applies; min_frames_between=None resolves to 0 when
    local mapping is idle and 3 when it is busy.
    """

    use_fov_centers: bool = False
    max_fov_centers_distance: float = 0.2
    min_frames_between: Optional[int] = None
    min_tracked_ratio: float = 0.9

    def __post_init__(self):
        if self.max_fov_centers_distance <= 0:
            raise ValueError("max_fov_centers_distance must be positive")


# ------------------------------------------------------------ initialization


def initialize(frames, smap: SparseMap, min_matches: int = MIN_INIT_MATCHES,
               min_parallax_deg: float = MIN_INIT_PARALLAX_DEG,
               seed: Optional[int] = None):
    """Seed the map from one depth frame or a monocular frame pair.

    Returns the inserted keyframes (one for depth, two for monocular).
    Raises InitializationFailure when the attempt should be retried with
    different frames; InsufficientParallax flags a too-small baseline.
    """
    frames = [f for f in frames]
    if len(frames) == 1:
        return [_initialize_from_depth(frames[0], smap, min_matches)]
    if len(frames) == 2:
        return _initialize_two_view(frames[0], frames[1], smap, min_matches,
                                    min_parallax_deg, seed)
    raise ValueError("initialize takes one depth frame or two monocular frames")


def _initialize_from_depth(frame: Frame, smap: SparseMap, min_valid: int):
    if frame.depths is None:
        raise InitializationFailure("frame carries no per-keypoint depth")
    valid = np.nonzero(frame.depths > 0)[0]
    if len(valid) < min_valid:
        raise InitializationFailure(
            f"depth init needs >= {min_valid} depth-valid keypoints, "
            f"got {len(valid)}")
    if frame.pose is None:
        frame.pose = SE3.identity()
    frame.state = STATE_OK
    kf = smap.add_keyframe(frame)
    pc = frame.camera.backproject(frame.kps[valid, 0], frame.kps[valid, 1],
                                  frame.depths[valid])
    pw = frame.pose.transform(pc)
    for row, idx in enumerate(valid):
        p = smap.new_point(pw[row], descriptor=frame.desc[idx],
                           first_kid=kf.kid)
        smap.add_observation(p, kf, int(idx))
        frame.points[idx] = p
        smap.update_point_geometry(p)
    log.info("initialized depth map: %d points from frame %d",
             len(valid), frame.id)
    return kf


def _initialize_two_view(f1: Frame, f2: Frame, smap: SparseMap,
                         min_matches: int, min_parallax_deg: float,
                         seed: Optional[int]):
    m = match_knn_ratio(f1.desc, f2.desc)
    if len(m) < min_matches:
        raise InitializationFailure(
            f"two-view init needs >= {min_matches} ratio-test matches, "
            f"got {len(m)}")
    cam = f1.camera
    uv1 = f1.kps_u[m[:, 0]].astype(float)
    uv2 = f2.kps_u[m[:, 1]].astype(float)
    if seed is None:
        seed = _frame_seed(f2.id)
    try:
        r, t, inliers = estimate_relative_pose_2d2d(uv1, uv2, cam, seed=seed)
    except DegenerateGeometryError as e:
        raise InitializationFailure(f"two-view geometry degenerate: {e}")

    xn1 = (uv1[inliers] - (cam.cx, cam.cy)) / (cam.fx, cam.fy)
    xn2 = (uv2[inliers] - (cam.cx, cam.cy)) / (cam.fx, cam.fy)
    pts = triangulate_two_view(r, t, xn1, xn2)
    z2 = (pts @ r.T + t)[:, 2]
    good = np.isfinite(pts).all(axis=1) & (pts[:, 2] > 1e-6) & (z2 > 1e-6)
    if good.sum() < 8:
        raise InitializationFailure("cheirality left fewer than 8 points")
    angles = triangulation_angles(r, t, pts[good])
    median_deg = float(np.degrees(np.median(angles)))
    if median_deg < min_parallax_deg:
        raise InsufficientParallax(
            f"median triangulation angle {median_deg:.3f} deg "
            f"< {min_parallax_deg} deg")

    # gauge: first camera at f1.pose (identity unless preset), median depth 1
    s0 = 1.0 / float(np.median(pts[good, 2]))
    base = f1.pose if f1.pose is not None else SE3.identity()
    f1.pose = base.copy()
    f2.pose = base @ SE3(r, t * s0).inverse()
    f1.state = f2.state = STATE_OK

    kf1 = smap.add_keyframe(f1)
    kf2 = smap.add_keyframe(f2)
    kept = m[inliers][good]
    pw = base.transform(pts[good] * s0)
    for row, (i1, i2, _) in enumerate(kept):
        p = smap.new_point(pw[row], descriptor=f2.desc[i2], first_kid=kf1.kid)
        smap.add_observation(p, kf1, int(i1))
        smap.add_observation(p, kf2, int(i2))
        f1.points[i1] = p
        f2.points[i2] = p
        smap.update_point_descriptor(p)
        smap.update_point_geometry(p)
    kf1.median_depth = f1.median_scene_depth()
    kf2.median_depth = f2.median_scene_depth()
    smap.update_covisibility(kf2)
    log.info("initialized monocular map: %d points from frames %d/%d "
             "(median parallax %.2f deg)", len(kept), f1.id, f2.id, median_deg)
    return [kf1, kf2]


# ------------------------------------------------------------ visual odometry


def compose_scaled_motion(pose_prev: SE3, r_rel: np.ndarray,
                          t_rel: np.ndarray, s: float) -> SE3:
    """C_k = C_{k-1} [R, s t] with (R, t) the pose of camera k in camera k-1."""
    return pose_prev @ SE3(r_rel, float(s) * np.asarray(t_rel, dtype=float))


def vo_step(state: TrackerState, frame: Frame, gt,
            match_ratio: float = 0.75) -> SE3:
    """One inter-frame visual-odometry step.

    Matches the previous frame, estimates the essential-matrix motion, and
    composes it with the translation magnitude taken from ground truth
    (monocular VO has no scale of its own).  Zero ground-truth motion or
    degenerate geometry holds the previous pose; only the latter marks the
    frame LOST.
    """
    prev = state.last_frame
    if prev is None:
        frame.pose = SE3.identity() if frame.pose is None else frame.pose
        frame.state = STATE_OK
        state.mode = STATE_OK
        state.last_frame = frame
        return frame.pose
    held = prev.pose.copy()
    m = match_knn_ratio(prev.desc, frame.desc, ratio=match_ratio)
    try:
        if len(m) < 8:
            raise DegenerateGeometryError(f"only {len(m)} matches")
        r, t, inliers = estimate_relative_pose_2d2d(
            prev.kps_u[m[:, 0]].astype(float), frame.kps_u[m[:, 1]].astype(float),
            frame.camera, seed=_frame_seed(frame.id))
    except DegenerateGeometryError as e:
        frame.pose = held
        frame.state = STATE_LOST
        state.set_lost()
        state.last_frame = frame
        log.info("vo frame %d LOST (%s), pose held", frame.id, e)
        return frame.pose

    s = groundtruth_scale(gt, prev.timestamp, frame.timestamp)
    if s == 0.0:
        frame.pose = held
    else:
        rel = SE3(r, t).inverse()    # camera k expressed in camera k-1
        frame.pose = compose_scaled_motion(held, rel.r, rel.t, s)
    frame.state = STATE_OK
    state.mode = STATE_OK
    state.velocity = held.inverse() @ frame.pose
    state.last_frame = frame
    log.info("vo frame %d OK scale %.4f inliers %d/%d",
             frame.id, s, int(inliers.sum()), len(m))
    return frame.pose


# --------------------------------------------------------- local-map tracking


def local_map_points(smap: SparseMap, reference_kid: int) -> List:
    """Points observed by the reference keyframe and its covisible neighbours."""
    ref = smap.keyframes[reference_kid]
    kids = [ref.kid] + ref.covisible_by_weight()
    seen = {}
    for kid in kids:
        kf = smap.keyframes.get(kid)
        if kf is None:
            continue
        for _, p in kf.observed_points():
            seen[p.pid] = p
    return list(seen.values())


def _project_points(points, pose: SE3, camera) -> Tuple[np.ndarray, np.ndarray]:
    pos = np.stack([p.position for p in points])
    uv, valid = camera.project(pose.inverse().transform(pos))
    return uv, valid


def _match_against_frame(points, uv, frame: Frame, radius: float):
    """Guided descriptor match of projected points against frame keypoints."""
    desc = np.stack([p.descriptor for p in points])
    m = match_within_radius(desc, uv, frame.desc, frame.kps_u, radius)
    if len(m) == 0:
        return np.zeros((0, 2), dtype=np.int64)
    return m[:, :2].astype(np.int64)


def track_local_map(state: TrackerState, frame: Frame, smap: SparseMap,
                    radius: float = SEARCH_RADIUS_PX,
                    min_inliers: int = MIN_TRACK_INLIERS):
    """Track the local map and refine the pose with motion-only BA.

    Projects the local-map points through the constant-velocity prediction,
    matches within `radius`, optimizes, then rematches with the refined pose
    at half the radius and optimizes again.  The frame ends OK with at least
    `min_inliers` inlier observations, LOST otherwise.  Map points are never
    moved.  Returns (pose, [(keypoint index, MapPoint), ...] inliers).
    """
    predicted = state.predicted_pose()
    cam = frame.camera
    points = local_map_points(smap, state.reference_kid)
    if not points:
        return _track_lost(state, frame, predicted, 0)
    uv, visible = _project_points(points, predicted, cam)
    cand = [points[i] for i in np.nonzero(visible)[0]]
    for p in cand:
        p.n_visible += 1
    if not cand:
        return _track_lost(state, frame, predicted, 0)

    m1 = _match_against_frame(cand, uv[visible], frame, radius)
    pose = predicted
    if len(m1) > 0:
        try:
            pose, _, _ = _solve_observations(pose, cand, m1, frame, smap)
        except OptimizationFailure:
            return _track_lost(state, frame, predicted, len(m1))

    # second pass with the refined pose and a tighter gate
    uv2, visible2 = _project_points(cand, pose, cam)
    idx2 = np.nonzero(visible2)[0]
    cand2 = [cand[i] for i in idx2]
    if not cand2:
        return _track_lost(state, frame, pose, 0)
    m2 = _match_against_frame(cand2, uv2[idx2], frame, radius / 2.0)
    if len(m2) == 0:
        return _track_lost(state, frame, pose, 0)
    try:
        pose, inlier_mask, report = _solve_observations(pose, cand2, m2,
                                                        frame, smap)
    except OptimizationFailure:
        return _track_lost(state, frame, pose, len(m2))

    frame.points = [None] * len(frame.kps)
    frame.outlier[:] = False
    obs = []
    for (pi, ki), ok in zip(m2, inlier_mask):
        frame.points[ki] = cand2[pi]
        if ok:
            cand2[pi].n_found += 1
            obs.append((int(ki), cand2[pi]))
        else:
            frame.outlier[ki] = True
    n_inl = len(obs)
    frame.pose = pose

    if n_inl >= min_inliers:
        frame.state = STATE_OK
        prev_pose = state.last_frame.pose if state.last_frame is not None else None
        state.mode = STATE_OK
        state.velocity = (prev_pose.inverse() @ pose
                          if prev_pose is not None else None)
        state.last_frame = frame
        log.info("frame %d OK inliers %d/%d chi2 %.3e",
                 frame.id, n_inl, len(m2), report.final_chi2)
    else:
        return _track_lost(state, frame, pose, n_inl)
    return pose, obs


def _solve_observations(pose, points, matches, frame, smap):
    pos = np.stack([points[pi].position for pi, _ in matches])
    kp = matches[:, 1]
    sigma2 = octave_sigma2(frame.kps[kp, KP_OCTAVE], smap.scale_factor)
    return solve_motion_only(pose, pos, frame.kps_u[kp].astype(float),
                             sigma2, frame.camera,
                             ur=_virtual_right(frame, kp))


def _virtual_right(frame, kp_rows):
    """Measured u - bf/z per keypoint row; NaN where depth is unknown.

    Depth-backed observations then pin the pose along the viewing ray in
    motion-only BA instead of constraining only the image position.
    """
    bf = float(getattr(frame.camera, "bf", 0.0))
    if bf <= 0.0 or frame.depths is None:
        return None
    z = np.asarray(frame.depths, dtype=float)[kp_rows]
    safe = np.where(z > 0.0, z, 1.0)
    ur = np.where(z > 0.0, frame.kps_u[kp_rows, 0].astype(float) - bf / safe,
                  np.nan)
    return ur if np.isfinite(ur).any() else None


def _track_lost(state, frame, pose, n_obs):
    frame.pose = pose
    frame.state = STATE_LOST
    state.set_lost()
    state.last_frame = frame
    log.info("frame %d LOST (%d observations)", frame.id, n_obs)
    return pose, []


# -------------------------------------------------------------- relocalization


def relocalize(frame: Frame, smap: SparseMap, index,
               min_inliers: int = MIN_RELOC_INLIERS, max_candidates: int = 5,
               match_ratio: float = 0.75):
    """Try to re-acquire the pose of a lost frame against the map.

    Queries the place-recognition index for candidate keyframes, matches
    descriptors, solves P3P within RANSAC, and refines with motion-only BA.
    Returns (pose, keyframe id, inlier observations) or None.
    """
    if index is None:
        return None
    for kid, _score in index.query(frame.desc, max_results=max_candidates):
        kf = smap.keyframes.get(kid)
        if kf is None or kf.is_bad:
            continue
        m = match_knn_ratio(frame.desc, kf.desc, ratio=match_ratio)
        rows = [(fi, kf.points[ki]) for fi, ki, _ in m
                if kf.points[ki] is not None and not kf.points[ki].is_bad]
        if len(rows) < 4:
            continue
        kp_idx = np.array([fi for fi, _ in rows])
        world = np.stack([p.position for _, p in rows])
        uv = frame.kps_u[kp_idx].astype(float)
        try:
            pose0, mask = ransac_p3p(world, uv, frame.camera,
                                     seed=(_frame_seed(frame.id) + kid) % 2 ** 32)
        except DegenerateGeometryError:
            continue
        sigma2 = octave_sigma2(frame.kps[kp_idx[mask], KP_OCTAVE],
                               smap.scale_factor)
        try:
            pose, inl, _ = solve_motion_only(pose0, world[mask], uv[mask],
                                             sigma2, frame.camera,
                                             ur=_virtual_right(frame, kp_idx[mask]))
        except OptimizationFailure:
            continue
        if int(inl.sum()) < min_inliers:
            continue
        frame.points = [None] * len(frame.kps)
        frame.outlier[:] = False
        obs = []
        masked_rows = [rows[i] for i in np.nonzero(mask)[0]]
        for j, ok in enumerate(inl):
            if ok:
                fi, p = masked_rows[j]
                frame.points[fi] = p
                obs.append((int(fi), p))
        frame.pose = pose
        frame.state = STATE_OK
        log.info("relocalized frame %d against keyframe %d (%d inliers)",
                 frame.id, kid, len(obs))
        return pose, kid, obs
    return None


# ------------------------------------------------------------ keyframe policy


def need_new_keyframe(state: TrackerState, frame: Frame, smap: SparseMap,
                      policy: KeyframePolicy,
                      local_mapping_idle: bool = True) -> bool:
    """Keyframe decision for a frame tracked OK (see KeyframePolicy)."""
    if frame.state != STATE_OK or not smap.keyframes:
        return False
    if policy.use_fov_centers:
        center = frame.camera.fov_center(frame.pose, frame.median_scene_depth())
        dmin = min(float(np.linalg.norm(kf.fov_center() - center))
                   for kf in smap.keyframes.values() if not kf.is_bad)
        return dmin > policy.max_fov_centers_distance
    ref = smap.keyframes.get(state.reference_kid)
    ref_count = len(ref.observed_points()) if ref is not None else 0
    ratio = len(frame.matched_points()) / max(ref_count, 1)
    gap = policy.min_frames_between
    if gap is None:
        gap = KF_GAP_MAPPING_IDLE if local_mapping_idle else KF_GAP_MAPPING_BUSY
    newest = max(kf.frame_id for kf in smap.keyframes.values())
    return ratio < policy.min_tracked_ratio and frame.id - newest >= gap


# ----------------------------------------------------------------- stereo depth


def stereo_keypoint_depths(left_kps, left_desc, right_kps, right_desc, camera,
                           row_tolerance: float = 2.0, max_distance: int = 64,
                           min_disparity: float = 0.5) -> np.ndarray:
    """Per-keypoint depth from rectified left-right matching.

    For each left keypoint the best descriptor match among right keypoints
    within `row_tolerance` image rows (and with positive disparity) gives
    depth = baseline*fx / disparity.  Returns float32 meters, 0 where no
    acceptable match exists or disparity falls below `min_disparity`.
    """
    left_kps = np.asarray(left_kps, dtype=np.float32).reshape(-1, 5)
    right_kps = np.asarray(right_kps, dtype=np.float32).reshape(-1, 5)
    depths = np.zeros(len(left_kps), dtype=np.float32)
    if len(left_kps) == 0 or len(right_kps) == 0:
        return depths
    d = hamming_matrix(np.asarray(left_desc, dtype=np.uint8),
                       np.asarray(right_desc, dtype=np.uint8)).astype(float)
    dv = np.abs(left_kps[:, 1:2] - right_kps[None, :, 1])
    disparity = left_kps[:, 0:1] - right_kps[None, :, 0]
    d[(dv > row_tolerance) | (disparity <= 0)] = np.inf
    best = np.argmin(d, axis=1)
    ok = d[np.arange(len(left_kps)), best] <= max_distance
    disp = disparity[np.arange(len(left_kps)), best]
    z = camera.stereo_depth(disp, min_disparity=min_disparity)
    depths[ok] = z[ok].astype(np.float32)
    return depths


# ---------------------------------------------------------------- orchestrator


class Tracker:
    """Sequential tracking front end over a SparseMap.

    Feed posed-feature frames to process_frame(); it initializes the map,
    tracks, relocalizes after losses, applies the keyframe policy, and keeps
    a per-frame online trajectory record.  Returns the keyframe it inserted
    for a frame, or None.
    """

    def __init__(self, camera, smap: Optional[SparseMap] = None,
                 policy: Optional[KeyframePolicy] = None,
                 min_track_inliers: int = MIN_TRACK_INLIERS,
                 min_reloc_inliers: int = MIN_RELOC_INLIERS,
                 search_radius: float = SEARCH_RADIUS_PX,
                 min_init_matches: int = MIN_INIT_MATCHES,
                 reloc_index: Optional[IncrementalBinaryIndex] = None,
                 spawn_depth_points: bool = True):
        self.camera = camera
        self.smap = smap if smap is not None else SparseMap()
        self.policy = policy if policy is not None else KeyframePolicy()
        self.state = TrackerState()
        self.record = TrajectoryRecord("online")
        self.min_track_inliers = int(min_track_inliers)
        self.min_reloc_inliers = int(min_reloc_inliers)
        self.search_radius = float(search_radius)
        self.min_init_matches = int(min_init_matches)
        self.reloc_index = (reloc_index if reloc_index is not None
                            else IncrementalBinaryIndex())
        self.spawn_depth_points = bool(spawn_depth_points)
        self._pending_init: Optional[Frame] = None

    # -- pipeline ------------------------------------------------------------

    def process_frame(self, frame: Frame, local_mapping_idle: bool = True):
        if self.state.mode == STATE_NOT_INITIALIZED:
            new_kf = self._try_initialize(frame)
        elif self.state.mode == STATE_OK:
            new_kf = self._track(frame, local_mapping_idle)
        else:
            new_kf = self._relocalize(frame)
        self._append_record(frame)
        return new_kf

    def _append_record(self, frame: Frame):
        pose = frame.pose
        if pose is None:
            last = self.state.last_frame
            pose = (last.pose if last is not None and last.pose is not None
                    else SE3.identity())
        self.record.append(frame.timestamp, pose, frame.state)

    def _try_initialize(self, frame: Frame):
        if frame.depths is not None and np.any(frame.depths > 0):
            try:
                kf = _initialize_from_depth(frame, self.smap,
                                            self.min_init_matches)
            except InitializationFailure as e:
                log.info("depth init deferred at frame %d: %s", frame.id, e)
                return None
            self._after_init([kf], frame)
            return kf
        if self._pending_init is None:
            self._pending_init = frame
            return None
        try:
            kfs = _initialize_two_view(self._pending_init, frame, self.smap,
                                       self.min_init_matches,
                                       MIN_INIT_PARALLAX_DEG, None)
        except InsufficientParallax as e:
            log.info("two-view init deferred at frame %d: %s", frame.id, e)
            return None                     # keep waiting for baseline
        except InitializationFailure as e:
            log.info("two-view init restarted at frame %d: %s", frame.id, e)
            self._pending_init = frame
            return None
        self._pending_init = None
        self._after_init(kfs, frame)
        return kfs[-1]

    def _after_init(self, kfs, frame: Frame):
        for kf in kfs:
            self.reloc_index.add(kf.kid, kf.desc)
        self.state.mode = STATE_OK
        self.state.last_frame = frame
        self.state.velocity = None
        self.state.reference_kid = kfs[-1].kid

    def _track(self, frame: Frame, local_mapping_idle: bool):
        if self.state.reference_kid not in self.smap.keyframes:
            alive = sorted(self.smap.keyframes)
            if not alive:
                self.state.set_lost()
                return None
            self.state.reference_kid = alive[-1]
        track_local_map(self.state, frame, self.smap,
                        radius=self.search_radius,
                        min_inliers=self.min_track_inliers)
        if frame.state != STATE_OK:
            return self._relocalize(frame)
        if need_new_keyframe(self.state, frame, self.smap, self.policy,
                             local_mapping_idle):
            return self._insert_keyframe(frame)
        return None

    def _relocalize(self, frame: Frame):
        got = relocalize(frame, self.smap, self.reloc_index,
                         min_inliers=self.min_reloc_inliers)
        if got is None:
            frame.state = STATE_LOST
            if frame.pose is None and self.state.last_frame is not None:
                frame.pose = self.state.last_frame.pose
            self.state.set_lost()
            self.state.last_frame = frame
            return None
        _pose, kid, _obs = got
        self.state.mode = STATE_OK
        self.state.velocity = None
        self.state.reference_kid = kid
        self.state.last_frame = frame
        return None

    def _insert_keyframe(self, frame: Frame):
        kf = self.smap.add_keyframe(frame)
        for i, p in enumerate(list(kf.points)):
            if p is None:
                continue
            if frame.outlier[i] or p.is_bad:
                kf.points[i] = None
                continue
            self.smap.add_observation(p, kf, i)
        if self.spawn_depth_points and frame.depths is not None:
            self._spawn_depth_points(frame, kf)
        for _, p in kf.observed_points():
            self.smap.update_point_descriptor(p)
            self.smap.update_point_geometry(p)
        self.smap.update_covisibility(kf)
        self.reloc_index.add(kf.kid, kf.desc)
        self.state.reference_kid = kf.kid
        log.info("new keyframe %d (frame %d): %d observations, %d keyframes",
                 kf.kid, frame.id, len(kf.observed_points()),
                 len(self.smap.keyframes))
        return kf

    def _spawn_depth_points(self, frame: Frame, kf):
        free = [i for i in range(len(frame.kps))
                if kf.points[i] is None and frame.depths[i] > 0]
        if not free:
            return
        idx = np.array(free)
        pc = self.camera.backproject(frame.kps[idx, 0], frame.kps[idx, 1],
                                     frame.depths[idx])
        pw = frame.pose.transform(pc)
        for row, i in enumerate(idx):
            p = self.smap.new_point(pw[row], descriptor=frame.desc[i],
                                    first_kid=kf.kid)
            self.smap.add_observation(p, kf, int(i))
            self.smap.update_point_geometry(p)
