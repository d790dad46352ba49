"""Loop detection and loop correction over the sparse map.

Detection scores bag-of-words vectors against every stored keyframe,
floors candidates at the worst covisible-neighbor score, and accepts a
match only after its covisibility group survives three consecutive
query keyframes (temporal group consistency).  Verification matches map
points by descriptor and solves the relative transform with 3-point
similarity RANSAC — full Sim3 for monocular input, scale locked to 1
for stereo / RGB-D.  Correction propagates the transform through the
query's covisible group, fuses duplicate points across the loop
boundary, then relaxes the whole trajectory with pose-graph
optimization (spanning tree + strong covisibility edges + the loop
edge) and requests a global bundle adjustment.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from typing import Dict, List, Optional, Sequence, Set, Tuple

import numpy as np

from .epipolar import umeyama_alignment
from .frame import KeyFrame
from .geometry import SE3, Sim3
from .matching import match_knn_ratio
from .optimize import PoseGraphEdge, solve_pose_graph
from .sparse_map import SparseMap
from .vocabulary import IncrementalBinaryIndex, Vocabulary, similarity

log_detect = logging.getLogger("slamkit.loop_detecting")
log_close = logging.getLogger("slamkit.loop_closing")

MIN_KEYFRAMES_FOR_DETECTION = 10
CONSISTENCY_WINDOW = 3
MIN_LOOP_INLIERS = 20
STRONG_COVISIBILITY_WEIGHT = 100
MATCH_RATIO = 0.8


@dataclass
class LoopCandidate:
    """A place-recognition hit, enriched by geometric verification."""

    query_kid: int
    match_kid: int
    score: float
    consistency: int = 0
    relative: Optional[Sim3] = None   # world-side correction g: drifted -> loop frame
    inliers: int = 0
    point_pairs: List[Tuple[int, int]] = field(default_factory=list)


@dataclass
class LoopClosureResult:
    success: bool
    reason: str
    report: Optional[object] = None
    gba_requested: bool = False
    reintegrate: bool = False


class LoopDetector:
    """BoW database with temporal group consistency.

    Owns its own scoring backend — a trained vocabulary when available,
    otherwise the online incremental binary index — and, optionally, a
    dedicated feature manager so detection can run with settings that
    differ from the tracker's.
    """

    def __init__(self, vocabulary: Optional[Vocabulary] = None,
                 feature_manager=None, min_score_floor: float = 1e-9,
                 index_seed: int = 0):
        # the floor's default only guards against numerically-zero scores;
        # raise it to demand an absolute similarity level
        self.vocabulary = vocabulary
        self.feature_manager = feature_manager
        self.min_score_floor = float(min_score_floor)
        self.index = IncrementalBinaryIndex(seed=index_seed)
        self._bows: Dict[int, dict] = {}
        self._groups: List[Tuple[Set[int], int]] = []

    # ------------------------------------------------------------- database

    def bow_of(self, kf: KeyFrame) -> dict:
        if not kf.bow and self.vocabulary is not None and len(kf.desc):
            kf.bow = self.vocabulary.transform(kf.desc)
        return kf.bow

    def add_keyframe(self, kf: KeyFrame) -> None:
        if self.vocabulary is not None:
            self._bows[kf.kid] = self.bow_of(kf)
        else:
            self.index.add(kf.kid, kf.desc)

    def _scores(self, kf: KeyFrame, covisible: Set[int]):
        """(neighbor scores, candidate scores) for kf vs the database.

        With a vocabulary the two views coincide.  The incremental index
        runs a second query with the covisible set excluded so that
        near-duplicate neighbors cannot soak up the candidate votes.
        """
        if self.vocabulary is not None:
            bow = self.bow_of(kf)
            scores = {kid: similarity(bow, other)
                      for kid, other in self._bows.items() if kid != kf.kid}
            return scores, scores
        neighbors = dict(self.index.query(kf.desc, exclude_image=kf.kid,
                                          max_results=50))
        candidates = dict(self.index.query(
            kf.desc, exclude_image=covisible | {kf.kid}, max_results=50))
        return neighbors, candidates

    # ------------------------------------------------------------- detection

    def detect_loop(self, kf: KeyFrame, smap: SparseMap) -> Optional[LoopCandidate]:
        """Temporal-consistency-gated loop candidate for kf, or None."""
        if len(smap.keyframes) < MIN_KEYFRAMES_FOR_DETECTION:
            self.add_keyframe(kf)
            self._groups = []
            return None

        covisible = set(kf.covisible)
        neighbor_view, scores = self._scores(kf, covisible)
        neighbor_scores = [neighbor_view[k] for k in covisible if k in neighbor_view]
        min_score = max(self.min_score_floor,
                        min(neighbor_scores) if neighbor_scores else 0.0)

        candidates = []
        for kid, score in scores.items():
            if kid in covisible or kid == kf.kid:
                continue
            other = smap.keyframes.get(kid)
            if other is None or other.is_bad:
                continue
            if score >= min_score and score >= self.min_score_floor:
                candidates.append((score, kid))
        candidates.sort(reverse=True)
        candidates = candidates[:10]

        accepted: Optional[LoopCandidate] = None
        new_groups: List[Tuple[Set[int], int]] = []
        for score, kid in candidates:
            other = smap.keyframes[kid]
            group = set(other.covisible) | {kid}
            count = 1
            for prev_group, prev_count in self._groups:
                if group & prev_group:
                    count = max(count, prev_count + 1)
            new_groups.append((group, count))
            if count >= CONSISTENCY_WINDOW and accepted is None:
                accepted = LoopCandidate(kf.kid, kid, float(score), count)
        self._groups = new_groups
        self.add_keyframe(kf)
        if accepted is not None:
            log_detect.info("loop candidate: kf %d -> kf %d score %.4f "
                            "consistency %d", accepted.query_kid,
                            accepted.match_kid, accepted.score,
                            accepted.consistency)
        return accepted


# --------------------------------------------------------------- verification


def _matched_point_positions(query_kf: KeyFrame, match_kf: KeyFrame):
    """Descriptor-matched map-point pairs between two keyframes.

    Returns (query positions, match positions, query points, match points)
    restricted to keypoints with live map points on both sides.
    """
    qi = [(i, p) for i, p in query_kf.observed_points()]
    mi = [(i, p) for i, p in match_kf.observed_points()]
    if not qi or not mi:
        return (np.zeros((0, 3)),) * 2 + ([], [])
    q_rows = np.array([i for i, _ in qi])
    m_rows = np.array([i for i, _ in mi])
    matches = match_knn_ratio(query_kf.desc[q_rows], match_kf.desc[m_rows],
                              ratio=MATCH_RATIO, cross_check=True)
    pq, pm = [], []
    for qr, mr, _ in matches:
        pq.append(qi[qr][1])
        pm.append(mi[mr][1])
    if not pq:
        return (np.zeros((0, 3)),) * 2 + ([], [])
    return (np.stack([p.position for p in pq]),
            np.stack([p.position for p in pm]), pq, pm)


def verify_geometric(candidate: LoopCandidate, smap: SparseMap,
                     monocular: bool = True, max_iters: int = 200,
                     inlier_threshold: Optional[float] = None
                     ) -> Optional[LoopCandidate]:
    """3-point similarity RANSAC between the matched map points.

    Solves the world-side correction g mapping the query side's (drifted)
    point positions onto the match side's. Monocular input solves a full
    Sim3; depth sensors lock scale to 1. Accepts the candidate iff the
    refit on the consensus set keeps >= 20 inliers.
    """
    query_kf = smap.keyframes[candidate.query_kid]
    match_kf = smap.keyframes[candidate.match_kid]
    p_query, p_match, pts_q, pts_m = _matched_point_positions(query_kf, match_kf)
    n = len(p_query)
    if n < 3:
        log_close.info("loop rejected: %d matched points", n)
        return None
    if inlier_threshold is None:
        inlier_threshold = 0.05 * max(match_kf.median_depth, 1e-6)

    rng = np.random.default_rng(candidate.query_kid * 2654435761
                                % 2 ** 32 ^ candidate.match_kid)
    best_inliers = np.zeros(n, dtype=bool)
    for _ in range(max_iters):
        sample = rng.choice(n, size=3, replace=False)
        try:
            g = umeyama_alignment(p_query[sample], p_match[sample],
                                  with_scale=monocular)
        except ValueError:
            continue
        err = np.linalg.norm(g.transform(p_query) - p_match, axis=1)
        inliers = err < inlier_threshold
        if inliers.sum() > best_inliers.sum():
            best_inliers = inliers
            if inliers.all():
                break
    if best_inliers.sum() < 3:
        log_close.info("loop rejected: no consensus (%d matches)", n)
        return None
    # refinement on the consensus set, then the acceptance recount
    g = umeyama_alignment(p_query[best_inliers], p_match[best_inliers],
                          with_scale=monocular)
    err = np.linalg.norm(g.transform(p_query) - p_match, axis=1)
    inliers = err < inlier_threshold
    if inliers.sum() < MIN_LOOP_INLIERS:
        log_close.info("loop rejected: %d inliers < %d", int(inliers.sum()),
                       MIN_LOOP_INLIERS)
        return None
    g = umeyama_alignment(p_query[inliers], p_match[inliers],
                          with_scale=monocular)
    if not monocular:
        g = Sim3(g.r, g.t, 1.0)
    candidate.relative = g
    candidate.inliers = int(inliers.sum())
    candidate.point_pairs = [(pts_q[i].pid, pts_m[i].pid)
                             for i in np.nonzero(inliers)[0]]
    log_close.info("loop verified: kf %d -> kf %d inliers %d scale %.6f",
                   candidate.query_kid, candidate.match_kid,
                   candidate.inliers, g.s)
    return candidate


# ----------------------------------------------------------------- correction


def _apply_world_correction(pose: SE3, g: Sim3) -> SE3:
    """Camera-to-world pose after the world-side similarity g.

    Scale folds into the translation so the pose stays rigid.
    """
    return SE3(g.r @ pose.r, g.s * (g.r @ pose.t) + g.t)


def _anchor_kid(point, smap: SparseMap) -> Optional[int]:
    """Reference keyframe a point rides with during global rewrites."""
    if point.first_kid in smap.keyframes:
        return point.first_kid
    alive = [k for k in point.observations if k in smap.keyframes]
    return min(alive) if alive else None


def build_pose_graph_edges(smap: SparseMap,
                           loop_pairs: Sequence[Tuple[int, int]] = (),
                           strong_weight: int = STRONG_COVISIBILITY_WEIGHT,
                           poses: Optional[Dict[int, SE3]] = None
                           ) -> List[PoseGraphEdge]:
    """Spanning tree + strong covisibility + loop edges, deduplicated.

    Measurements Z_ij = X_i^-1 X_j come from `poses` (default: current
    keyframe poses).
    """
    if poses is None:
        poses = {kid: kf.pose for kid, kf in smap.keyframes.items()}
    seen = set()
    edges: List[PoseGraphEdge] = []

    def add(i, j):
        key = (min(i, j), max(i, j))
        if i == j or key in seen or i not in poses or j not in poses:
            return
        seen.add(key)
        z = poses[i].inverse().compose(poses[j])
        edges.append(PoseGraphEdge(i, j, z))

    for kid, kf in smap.keyframes.items():
        if kf.parent is not None:
            add(kf.parent, kid)
        for other, weight in kf.covisible.items():
            if weight >= strong_weight:
                add(kid, other)
    for i, j in loop_pairs:
        add(i, j)
    return edges


def correct_loop(smap: SparseMap, candidate: LoopCandidate,
                 monocular: bool = True) -> LoopClosureResult:
    """Propagate the verified loop transform and relax the trajectory.

    The query's covisible group is moved by g, duplicate points across
    the loop are fused, and the pose graph (spanning tree + covisibility
    edges of weight >= 100 + the loop edge) is optimized with keyframe 0
    held fixed. A cost increase rolls everything back.
    """
    if candidate.relative is None:
        raise ValueError("candidate must be geometrically verified first")
    g = candidate.relative
    query_kf = smap.keyframes[candidate.query_kid]

    # rollback snapshot
    saved_poses = {kid: kf.pose.copy() for kid, kf in smap.keyframes.items()}
    saved_points = {pid: p.position.copy() for pid, p in smap.points.items()}

    # measurements are taken from the drift-consistent pre-correction poses
    pre_poses = {kid: kf.pose.copy() for kid, kf in smap.keyframes.items()}
    edges = build_pose_graph_edges(smap, poses=pre_poses)
    z_loop_sim3 = (Sim3.from_se3(smap.keyframes[candidate.match_kid].pose)
                   .inverse().compose(g.compose(Sim3.from_se3(query_kf.pose))))
    edges.append(PoseGraphEdge(candidate.match_kid, candidate.query_kid,
                               z_loop_sim3.to_se3()))

    # propagate the correction through the query's covisible group; points
    # ride with their anchor keyframe so the post-PGO update stays coherent
    group = {candidate.query_kid} | set(query_kf.covisible)
    for kid in group:
        kf = smap.keyframes.get(kid)
        if kf is None or kf.is_bad:
            continue
        kf.pose = _apply_world_correction(kf.pose, g)
    for p in smap.points.values():
        if _anchor_kid(p, smap) in group:
            p.position = g.transform(p.position)

    # fuse duplicates across the loop boundary
    fused = 0
    for pid_q, pid_m in candidate.point_pairs:
        pq = smap.points.get(pid_q)
        pm = smap.points.get(pid_m)
        if pq is None or pm is None or pq.pid == pm.pid:
            continue
        keep, drop = (pq, pm) if pq.num_observations() >= pm.num_observations() \
            else (pm, pq)
        smap.replace_point(drop, keep)
        fused += 1
    for kid in group | {candidate.match_kid}:
        kf = smap.keyframes.get(kid)
        if kf is not None and not kf.is_bad:
            smap.update_covisibility(kf)

    # pose graph: Sim3 nodes for monocular (scale drift), SE3 for depth
    gauge_kid = min(smap.keyframes)
    if monocular:
        nodes = {kid: Sim3.from_se3(kf.pose, g.s if kid in group else 1.0)
                 for kid, kf in smap.keyframes.items()}
        for e in edges:
            e.z = Sim3.from_se3(e.z) if isinstance(e.z, SE3) else e.z
        edges[-1].z = z_loop_sim3   # the loop measurement carries the scale
    else:
        nodes = {kid: kf.pose.copy() for kid, kf in smap.keyframes.items()}
    initial_nodes = {kid: v.copy() for kid, v in nodes.items()}

    try:
        solved, report = solve_pose_graph(nodes, edges, fixed_ids={gauge_kid})
    except (ValueError, np.linalg.LinAlgError) as exc:
        _rollback(smap, saved_poses, saved_points)
        log_close.warning("loop correction aborted: %s", exc)
        return LoopClosureResult(False, f"pose graph failed: {exc}")
    if not np.isfinite(report.final_chi2) or report.final_chi2 > report.initial_chi2:
        _rollback(smap, saved_poses, saved_points)
        log_close.warning("loop correction rolled back: cost %.3e -> %.3e",
                          report.initial_chi2, report.final_chi2)
        return LoopClosureResult(False, "pose graph diverged", report)

    # apply optimized poses; points ride with their anchor keyframe
    for kid, kf in smap.keyframes.items():
        sol = solved[kid]
        kf.pose = sol.to_se3() if isinstance(sol, Sim3) else sol
    for p in smap.points.values():
        anchor = _anchor_kid(p, smap)
        if anchor is None:
            continue
        before = initial_nodes[anchor]
        after = solved[anchor]
        if isinstance(after, Sim3):
            delta = after.compose(before.inverse())
        else:
            delta = Sim3.from_se3(after.compose(before.inverse()))
        p.position = delta.transform(p.position)

    smap.bump_version()
    log_close.info("loop closed: kf %d -> kf %d, %d fused points, "
                   "pose graph %s in %d iters, cost %.3e -> %.3e",
                   candidate.query_kid, candidate.match_kid, fused,
                   report.termination, report.iterations,
                   report.initial_chi2, report.final_chi2)
    return LoopClosureResult(True, "closed", report,
                             gba_requested=True, reintegrate=True)


def _rollback(smap: SparseMap, poses, points) -> None:
    for kid, pose in poses.items():
        kf = smap.keyframes.get(kid)
        if kf is not None:
            kf.pose = pose
    for pid, pos in points.items():
        p = smap.points.get(pid)
        if p is not None:
            p.position = pos
