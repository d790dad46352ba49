"""Back-end map refinement.

Consumes keyframes from the tracking front end and refines the sparse map
around each one: culling of unreliable recent points, temporal triangulation
of new points against covisible neighbours, duplicate-point fusion, local
bundle adjustment, and pruning of redundant keyframes.
"""

from __future__ import annotations

import logging
from collections import deque
from dataclasses import dataclass
from typing import List, Optional

import numpy as np

from .epipolar import sampson_distance_px, triangulate_two_view, \
    triangulation_angles
from .features import KP_OCTAVE
from .geometry import skew
from .matching import hamming_distance, match_knn_ratio
from .optimize import local_window, solve_local_ba
from .sparse_map import MapPoint, SparseMap

log = logging.getLogger("slamkit.local_mapping")

MIN_FOUND_RATIO = 0.25
MIN_OBSERVATIONS_MONO = 3
MIN_OBSERVATIONS_DEPTH = 2
OBSERVATION_GRACE_KEYFRAMES = 2
RECENT_POINT_WINDOW = 3        # keyframes a new point stays under scrutiny
SAMPSON_GATE_PX = 1.5
REPROJECTION_GATE_PX = 2.0
MIN_PARALLAX_DEG = 1.0
FUSE_RADIUS_PX = 3.0
FUSE_MAX_HAMMING = 50
CULL_COVERAGE = 0.9
CULL_MIN_OTHER_OBSERVERS = 3
TOP_COVISIBLE_NEIGHBOURS = 10


@dataclass
class LocalMappingConfig:
    """Numeric gates of the refinement steps (defaults as documented)."""

    min_found_ratio: float = MIN_FOUND_RATIO
    min_observations: Optional[int] = None   # None: 3 mono, 2 depth sensors
    grace_keyframes: int = OBSERVATION_GRACE_KEYFRAMES
    recent_window: int = RECENT_POINT_WINDOW
    sampson_px: float = SAMPSON_GATE_PX
    reprojection_px: float = REPROJECTION_GATE_PX
    min_parallax_deg: float = MIN_PARALLAX_DEG
    scale_consistency_factor: Optional[float] = None  # None: 1.5 * scale step
    fuse_radius_px: float = FUSE_RADIUS_PX
    fuse_max_hamming: int = FUSE_MAX_HAMMING
    cull_coverage: float = CULL_COVERAGE
    cull_min_other_observers: int = CULL_MIN_OTHER_OBSERVERS
    num_neighbours: int = TOP_COVISIBLE_NEIGHBOURS
    ba_max_iters: int = 20


@dataclass(frozen=True)
class LocalWindow:
    """Keyframes optimized around a center, plus the fixed outside observers."""

    center: int
    kids: frozenset
    fixed: frozenset
    point_ids: frozenset

    def __post_init__(self):
        if self.center not in self.kids:
            raise ValueError("window must contain its center keyframe")
        if self.kids & self.fixed:
            raise ValueError("fixed keyframes must lie outside the window")

    @classmethod
    def around(cls, smap: SparseMap, center_kf) -> "LocalWindow":
        window, fixed, point_ids = local_window(smap, center_kf)
        return cls(center_kf.kid, frozenset(window), frozenset(fixed),
                   frozenset(point_ids))


# -------------------------------------------------------------- point culling


def cull_map_points(smap: SparseMap, points, current_kid: int,
                    min_found_ratio: float = MIN_FOUND_RATIO,
                    min_observations: int = MIN_OBSERVATIONS_MONO,
                    grace_keyframes: int = OBSERVATION_GRACE_KEYFRAMES
                    ) -> List[int]:
    """Remove unreliable recently-created points; returns the removed ids.

    A point is removed when its found ratio (matches over visibility
    predictions) falls below `min_found_ratio`, or when it is still observed
    by fewer than `min_observations` keyframes once `grace_keyframes`
    keyframes have passed since its creation.
    """
    removed = []
    for p in points:
        if p.is_bad:
            continue
        if p.found_ratio < min_found_ratio:
            removed.append(p)
        elif (current_kid - p.first_kid >= grace_keyframes
              and p.num_observations() < min_observations):
            removed.append(p)
    ids = [p.pid for p in removed]
    for p in removed:
        smap.remove_point(p)
    return ids


# -------------------------------------------------------------- triangulation


def _pinhole(camera, pts_cam):
    """Distortion-free projection; matches undistorted keypoint coordinates."""
    z = pts_cam[:, 2]
    zs = np.where(z > 1e-12, z, 1.0)
    return np.stack([camera.fx * pts_cam[:, 0] / zs + camera.cx,
                     camera.fy * pts_cam[:, 1] / zs + camera.cy], axis=1)


def _unbound(kf):
    return np.array([i for i, p in enumerate(kf.points) if p is None],
                    dtype=np.int64)


def triangulate_new_points(smap: SparseMap, kf, neighbors=None,
                           sampson_px: float = SAMPSON_GATE_PX,
                           reprojection_px: float = REPROJECTION_GATE_PX,
                           min_parallax_deg: float = MIN_PARALLAX_DEG,
                           scale_consistency_factor: Optional[float] = None,
                           match_ratio: float = 0.75) -> List[MapPoint]:
    """Create map points from kf's unmatched keypoints and its neighbours.

    Candidate pairs are ratio-test descriptor matches between keypoints not
    yet bound to a point, kept only when they respect the epipolar geometry
    (Sampson distance below `sampson_px`).  Triangulations must then pass
    four gates: positive depth in both views, parallax above
    `min_parallax_deg`, reprojection error below `reprojection_px` in both
    views, and camera distances consistent with the keypoint octaves.
    """
    if neighbors is None:
        neighbors = [smap.keyframes[k]
                     for k in kf.covisible_by_weight()[:TOP_COVISIBLE_NEIGHBOURS]
                     if k in smap.keyframes]
    factor = (1.5 * smap.scale_factor if scale_consistency_factor is None
              else float(scale_consistency_factor))
    cam = kf.camera
    min_parallax = np.radians(min_parallax_deg)
    created: List[MapPoint] = []
    for nkf in neighbors:
        if nkf.is_bad or nkf.kid == kf.kid:
            continue
        free1 = _unbound(kf)
        free2 = _unbound(nkf)
        if len(free1) == 0 or len(free2) == 0:
            continue
        m = match_knn_ratio(kf.desc[free1], nkf.desc[free2], ratio=match_ratio)
        if len(m) == 0:
            continue
        i1 = free1[m[:, 0]]
        i2 = free2[m[:, 1]]
        uv1 = kf.kps_u[i1].astype(float)
        uv2 = nkf.kps_u[i2].astype(float)

        t21 = nkf.pose.inverse() @ kf.pose     # kf camera -> neighbour camera
        e = skew(t21.t) @ t21.r
        on_epipolar = sampson_distance_px(e, cam, uv1, uv2) < sampson_px
        if not on_epipolar.any():
            continue
        i1, i2, uv1, uv2 = (i1[on_epipolar], i2[on_epipolar],
                            uv1[on_epipolar], uv2[on_epipolar])

        xn1 = (uv1 - (cam.cx, cam.cy)) / (cam.fx, cam.fy)
        xn2 = (uv2 - (nkf.camera.cx, nkf.camera.cy)) / (nkf.camera.fx,
                                                        nkf.camera.fy)
        pts1 = triangulate_two_view(t21.r, t21.t, xn1, xn2)
        pts2 = pts1 @ t21.r.T + t21.t
        ok = (np.isfinite(pts1).all(axis=1)
              & (pts1[:, 2] > 1e-9) & (pts2[:, 2] > 1e-9))
        ok &= triangulation_angles(t21.r, t21.t, pts1) > min_parallax
        ok &= np.linalg.norm(_pinhole(cam, pts1) - uv1, axis=1) < reprojection_px
        ok &= np.linalg.norm(_pinhole(nkf.camera, pts2) - uv2,
                             axis=1) < reprojection_px

        world = kf.pose.transform(pts1)
        d1 = np.linalg.norm(world - kf.center(), axis=1)
        d2 = np.linalg.norm(world - nkf.center(), axis=1)
        ratio_dist = d1 / np.maximum(d2, 1e-12)
        ratio_octave = smap.scale_factor ** (kf.kps[i1, KP_OCTAVE].astype(float)
                                             - nkf.kps[i2, KP_OCTAVE])
        ok &= (ratio_dist > ratio_octave / factor) \
            & (ratio_dist < ratio_octave * factor)

        for j in np.nonzero(ok)[0]:
            p = smap.new_point(world[j], descriptor=kf.desc[i1[j]],
                               first_kid=kf.kid)
            smap.add_observation(p, kf, int(i1[j]))
            smap.add_observation(p, nkf, int(i2[j]))
            smap.update_point_descriptor(p)
            smap.update_point_geometry(p)
            created.append(p)
    if created:
        smap.update_covisibility(kf)
    return created


# -------------------------------------------------------------------- fusion


def _fuse_into(smap: SparseMap, target, points, radius_px: float,
               max_hamming: int) -> int:
    """Merge source points that project onto target keypoints already bound
    to a different point.  Returns the number of merges."""
    fused = 0
    cam = target.camera
    w2c = target.pose.inverse()
    for p in sorted(points, key=lambda q: q.pid):
        if p.is_bad or target.kid in p.observations:
            continue
        pc = w2c.transform(p.position)
        if pc[2] <= 1e-9:
            continue
        uv = _pinhole(cam, pc[None, :])[0]
        if not cam.is_in_image(uv):
            continue
        near = np.nonzero(np.linalg.norm(target.kps_u - uv, axis=1)
                          <= radius_px)[0]
        best_idx, best_d = -1, max_hamming
        for i in near:                 # ascending: ties keep the lowest index
            q = target.points[i]
            if q is None or q is p or q.is_bad:
                continue
            d = int(hamming_distance(p.descriptor, target.desc[i]))
            if d < best_d:
                best_idx, best_d = int(i), d
        if best_idx < 0:
            continue
        q = target.points[best_idx]
        winner, loser = (p, q) if (p.num_observations(), -p.pid) \
            > (q.num_observations(), -q.pid) else (q, p)
        smap.replace_point(loser, winner)
        smap.update_point_descriptor(winner)
        smap.update_point_geometry(winner)
        fused += 1
    return fused


def fuse_duplicates(smap: SparseMap, kf, neighbors=None,
                    radius_px: float = FUSE_RADIUS_PX,
                    max_hamming: int = FUSE_MAX_HAMMING) -> int:
    """Merge duplicate map points between kf and its covisible neighbours.

    Projects kf's points into each neighbour and each neighbour's points
    into kf; a projection landing within `radius_px` of a keypoint bound to
    another point whose descriptor lies within `max_hamming` merges the two,
    keeping the one with more observations.  Idempotent: once merged, the
    surviving point observes both keyframes and is skipped afterwards.
    """
    if neighbors is None:
        neighbors = [smap.keyframes[k]
                     for k in kf.covisible_by_weight()[:TOP_COVISIBLE_NEIGHBOURS]
                     if k in smap.keyframes]
    fused = 0
    for nkf in neighbors:
        if nkf.is_bad or nkf.kid == kf.kid:
            continue
        fused += _fuse_into(smap, nkf, [p for _, p in kf.observed_points()],
                            radius_px, max_hamming)
        fused += _fuse_into(smap, kf, [p for _, p in nkf.observed_points()],
                            radius_px, max_hamming)
    if fused:
        smap.update_covisibility(kf)
        for nkf in neighbors:
            if not nkf.is_bad:
                smap.update_covisibility(nkf)
    return fused


# ------------------------------------------------------------ keyframe culling


def cull_keyframes(smap: SparseMap, window, coverage: float = CULL_COVERAGE,
                   min_other_observers: int = CULL_MIN_OTHER_OBSERVERS
                   ) -> List[int]:
    """Remove redundant keyframes from `window`; returns the removed ids.

    A keyframe (never id 0) is redundant when at least `coverage` of its
    observed points are each seen by `min_other_observers` other keyframes
    at the same or a finer pyramid octave.  The spanning tree is re-parented
    by the removal.
    """
    removed = []
    for kid in sorted(set(window)):
        if kid == 0 or kid not in smap.keyframes:
            continue
        kf = smap.keyframes[kid]
        obs = kf.observed_points()
        redundant = 0
        for i, p in obs:
            own_octave = int(kf.kps[i, KP_OCTAVE])
            others = 0
            for okid, oidx in p.observations.items():
                if okid == kid:
                    continue
                okf = smap.keyframes.get(okid)
                if okf is None or okf.is_bad:
                    continue
                if int(okf.kps[oidx, KP_OCTAVE]) <= own_octave:
                    others += 1
                    if others >= min_other_observers:
                        break
            if others >= min_other_observers:
                redundant += 1
        if redundant >= coverage * len(obs):
            smap.remove_keyframe(kid)
            removed.append(kid)
    return removed


# ---------------------------------------------------------------- orchestrator


class LocalMapper:
    """Sequential refinement worker over a keyframe queue.

    push() enqueues keyframes from tracking; each spin_once() runs the full
    refinement pass for one keyframe: recent-point culling, temporal
    triangulation, duplicate fusion, local bundle adjustment, and keyframe
    pruning.  `idle` reports whether the queue is empty (the tracking
    keyframe policy relaxes its frame gap while the mapper is idle).
    """

    def __init__(self, smap: SparseMap, depth_sensor: bool = False,
                 config: Optional[LocalMappingConfig] = None):
        self.smap = smap
        self.depth_sensor = bool(depth_sensor)
        self.config = config if config is not None else LocalMappingConfig()
        self.queue = deque()
        self.recent_points: List[MapPoint] = []

    @property
    def idle(self) -> bool:
        return not self.queue

    def push(self, kf) -> None:
        self.queue.append(kf)

    def spin_once(self) -> bool:
        """Process one queued keyframe; returns False when idle."""
        if not self.queue:
            return False
        self.process_keyframe(self.queue.popleft())
        return True

    def min_observations(self) -> int:
        if self.config.min_observations is not None:
            return self.config.min_observations
        return (MIN_OBSERVATIONS_DEPTH if self.depth_sensor
                else MIN_OBSERVATIONS_MONO)

    def process_keyframe(self, kf) -> None:
        cfg = self.config
        smap = self.smap
        # points the front end spawned with this keyframe join the watchlist
        known = {p.pid for p in self.recent_points}
        for _, p in kf.observed_points():
            if p.first_kid == kf.kid and p.pid not in known:
                self.recent_points.append(p)

        removed = cull_map_points(
            smap, self.recent_points, kf.kid,
            min_found_ratio=cfg.min_found_ratio,
            min_observations=self.min_observations(),
            grace_keyframes=cfg.grace_keyframes)
        self.recent_points = [
            p for p in self.recent_points
            if not p.is_bad and kf.kid - p.first_kid < cfg.recent_window]

        new_points = triangulate_new_points(
            smap, kf,
            sampson_px=cfg.sampson_px,
            reprojection_px=cfg.reprojection_px,
            min_parallax_deg=cfg.min_parallax_deg,
            scale_consistency_factor=cfg.scale_consistency_factor,
        )
        self.recent_points.extend(new_points)

        fused = fuse_duplicates(smap, kf, radius_px=cfg.fuse_radius_px,
                                max_hamming=cfg.fuse_max_hamming)

        report = None
        if len(smap.keyframes) >= 3:
            report = solve_local_ba(smap, kf, max_iters=cfg.ba_max_iters)

        window = LocalWindow.around(smap, kf)
        culled = cull_keyframes(smap, window.kids - {kf.kid},
                                coverage=cfg.cull_coverage,
                                min_other_observers=cfg.cull_min_other_observers)

        log.info(
            "keyframe %d: culled %d points, created %d, fused %d, "
            "pruned keyframes %s, ba %s", kf.kid, len(removed),
            len(new_points), fused, culled or "none",
            "chi2 %.3e -> %.3e" % (report.initial_chi2, report.final_chi2)
            if report is not None else "skipped")
