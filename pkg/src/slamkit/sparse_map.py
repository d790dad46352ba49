"""Sparse map: keyframes, map points, covisibility graph, spanning tree."""

from __future__ import annotations

import numpy as np

from .frame import Frame, KeyFrame
from .matching import pairwise_hamming

COVISIBILITY_MIN_SHARED = 15


class MapPoint:

    __slots__ = ("pid", "position", "observations", "descriptor", "normal",
                 "min_dist", "max_dist", "n_visible", "n_found", "is_bad",
                 "first_kid", "replaced_by")

    def __init__(self, pid, position, descriptor=None, first_kid=-1):
        self.pid = int(pid)
        self.position = np.asarray(position, dtype=float).reshape(3)
        self.observations = {}        # keyframe id -> keypoint index
        self.descriptor = (np.zeros(32, dtype=np.uint8) if descriptor is None
                           else np.asarray(descriptor, dtype=np.uint8).reshape(32))
        self.normal = np.array([0.0, 0.0, 1.0])
        self.min_dist = 0.0
        self.max_dist = np.inf
        self.n_visible = 1
        self.n_found = 1
        self.is_bad = False
        self.first_kid = int(first_kid)
        self.replaced_by = None

    @property
    def found_ratio(self):
        """Fraction of visibility predictions confirmed by an actual match."""
        return self.n_found / max(self.n_visible, 1)

    def num_observations(self):
        return len(self.observations)


class SparseMap:
    """Keyframes + map points with covisibility bookkeeping.

    version increments on every global pose adjustment (loop correction, GBA)
    so downstream consumers can detect map-wide rewrites.
    """

    def __init__(self, covisibility_threshold=COVISIBILITY_MIN_SHARED,
                 scale_factor=1.2, num_levels=4):
        self.keyframes = {}
        self.points = {}
        self.next_kid = 0
        self.next_pid = 0
        self.version = 0
        self.covisibility_threshold = int(covisibility_threshold)
        self.scale_factor = float(scale_factor)
        self.num_levels = int(num_levels)

    # -- lifecycle ----------------------------------------------------------

    def add_keyframe(self, frame: Frame) -> KeyFrame:
        kf = KeyFrame(self.next_kid, frame)
        self.next_kid += 1
        self.keyframes[kf.kid] = kf
        return kf

    def new_point(self, position, descriptor=None, first_kid=-1) -> MapPoint:
        p = MapPoint(self.next_pid, position, descriptor, first_kid)
        self.next_pid += 1
        self.points[p.pid] = p
        return p

    def add_observation(self, point: MapPoint, kf: KeyFrame, kp_idx: int):
        kp_idx = int(kp_idx)
        prev = point.observations.get(kf.kid)
        if prev is not None and prev != kp_idx and kf.points[prev] is point:
            kf.points[prev] = None
        occupant = kf.points[kp_idx]
        if (occupant is not None and occupant is not point
                and occupant.observations.get(kf.kid) == kp_idx):
            occupant.observations.pop(kf.kid)
        point.observations[kf.kid] = kp_idx
        kf.points[kp_idx] = point

    def remove_observation(self, point: MapPoint, kid: int):
        idx = point.observations.pop(kid, None)
        if idx is not None:
            kf = self.keyframes.get(kid)
            if kf is not None and kf.points[idx] is point:
                kf.points[idx] = None

    def remove_point(self, point: MapPoint):
        point.is_bad = True
        for kid, idx in list(point.observations.items()):
            kf = self.keyframes.get(kid)
            if kf is not None and kf.points[idx] is point:
                kf.points[idx] = None
        point.observations.clear()
        self.points.pop(point.pid, None)

    def replace_point(self, old: MapPoint, new: MapPoint):
        """Merge old into new: observations re-bound, counters accumulated."""
        if old.pid == new.pid:
            return
        for kid, idx in list(old.observations.items()):
            kf = self.keyframes.get(kid)
            if kf is None:
                continue
            if kid not in new.observations:
                new.observations[kid] = idx
                kf.points[idx] = new
            else:
                kf.points[idx] = None
        new.n_visible += old.n_visible
        new.n_found += old.n_found
        old.observations.clear()
        old.is_bad = True
        old.replaced_by = new
        self.points.pop(old.pid, None)

    def remove_keyframe(self, kid: int):
        kf = self.keyframes.get(kid)
        if kf is None:
            return
        kf.is_bad = True
        for i, p in enumerate(kf.points):
            if p is not None and p.observations.get(kid) == i:
                p.observations.pop(kid, None)
        # detach from covisibility
        for other_id in list(kf.covisible):
            other = self.keyframes.get(other_id)
            if other is not None:
                other.covisible.pop(kid, None)
        kf.covisible.clear()
        # re-parent spanning-tree children to the removed node's parent
        parent = self.keyframes.get(kf.parent) if kf.parent is not None else None
        if parent is not None:
            parent.children.discard(kid)
        for child_id in list(kf.children):
            child = self.keyframes.get(child_id)
            if child is not None:
                child.parent = kf.parent
                if parent is not None:
                    parent.children.add(child_id)
        kf.children.clear()
        del self.keyframes[kid]

    def bump_version(self):
        self.version += 1

    # -- covisibility ---------------------------------------------------------

    def shared_point_counts(self, kf: KeyFrame):
        """Exact shared-point counts between kf and every other keyframe."""
        counts = {}
        for _, p in kf.observed_points():
            for other_id in p.observations:
                if other_id != kf.kid:
                    counts[other_id] = counts.get(other_id, 0) + 1
        return counts

    def update_covisibility(self, kf: KeyFrame):
        """Recompute kf's covisibility edges; keeps the graph symmetric.

        Returns the edge list [(kf.kid, other id, weight), ...].
        """
        counts = self.shared_point_counts(kf)
        new_edges = {k: c for k, c in counts.items()
                     if c >= self.covisibility_threshold}
        stale = set(kf.covisible) - set(new_edges)
        kf.covisible = new_edges
        for other_id in stale:
            other = self.keyframes.get(other_id)
            if other is not None:
                other.covisible.pop(kf.kid, None)
        for other_id, c in new_edges.items():
            other = self.keyframes.get(other_id)
            if other is not None:
                other.covisible[kf.kid] = c
        # spanning tree: first edge attaches to the strongest neighbour
        if kf.parent is None and kf.kid != 0 and new_edges:
            best = max(new_edges.items(), key=lambda kw: (kw[1], -kw[0]))[0]
            if best in self.keyframes:
                kf.parent = best
                self.keyframes[best].children.add(kf.kid)
        return [(kf.kid, k, c) for k, c in sorted(new_edges.items())]

    # -- map point maintenance -------------------------------------------------

    def update_point_descriptor(self, point: MapPoint):
        """Representative descriptor: observation descriptor with minimum
        median Hamming distance to the other observations."""
        descs = []
        for kid, idx in point.observations.items():
            kf = self.keyframes.get(kid)
            if kf is not None:
                descs.append(kf.desc[idx])
        if not descs:
            return
        if len(descs) == 1:
            point.descriptor = descs[0].copy()
            return
        d = pairwise_hamming(np.stack(descs))
        medians = np.median(d, axis=1)
        point.descriptor = descs[int(np.argmin(medians))].copy()

    def update_point_geometry(self, point: MapPoint):
        """Viewing normal (mean observation direction) and scale-consistent
        distance bounds from the reference observation's octave."""
        if not point.observations:
            return
        dirs = []
        for kid in point.observations:
            kf = self.keyframes.get(kid)
            if kf is None:
                continue
            v = point.position - kf.center()
            n = np.linalg.norm(v)
            if n > 1e-12:
                dirs.append(v / n)
        if dirs:
            n = np.sum(dirs, axis=0)
            nn = np.linalg.norm(n)
            if nn > 1e-12:
                point.normal = n / nn
        ref_kid = point.first_kid if point.first_kid in point.observations \
            else next(iter(point.observations))
        kf = self.keyframes.get(ref_kid)
        if kf is None:
            return
        idx = point.observations[ref_kid]
        dist = float(np.linalg.norm(point.position - kf.center()))
        octave = int(kf.kps[idx, 2])
        level_scale = self.scale_factor ** octave
        point.max_dist = dist * level_scale
        point.min_dist = point.max_dist / (self.scale_factor ** self.num_levels)

    # -- integrity ------------------------------------------------------------

    def check_integrity(self):
        """List of referential-integrity violations (empty means consistent)."""
        problems = []
        for pid, p in self.points.items():
            for kid, idx in p.observations.items():
                kf = self.keyframes.get(kid)
                if kf is None:
                    problems.append(f"point {pid} observes missing keyframe {kid}")
                elif idx < 0 or idx >= len(kf.points):
                    problems.append(f"point {pid} kp index {idx} out of range")
                elif kf.points[idx] is not p:
                    problems.append(f"point {pid} not bound at kf {kid}[{idx}]")
        for kid, kf in self.keyframes.items():
            for i, p in enumerate(kf.points):
                if p is not None and not p.is_bad and p.pid in self.points:
                    if p.observations.get(kid) != i and kid in p.observations:
                        problems.append(f"kf {kid}[{i}] bound to point {p.pid} "
                                        "with mismatched back-reference")
            for other_id, w in kf.covisible.items():
                other = self.keyframes.get(other_id)
                if other is None:
                    problems.append(f"kf {kid} covisible with missing {other_id}")
                elif other.covisible.get(kid) != w:
                    problems.append(f"covisibility asymmetric {kid}<->{other_id}")
        return problems
