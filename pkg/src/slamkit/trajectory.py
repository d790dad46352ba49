"""Timestamped camera-trajectory records and three-format disk I/O.

A record is an ordered sequence of (timestamp, pose, tracking state)
samples.  Online records are causal and append-only: a sample, once
appended, is never rewritten, so a file produced by the streaming writer
is stable under extension (any prefix keeps its bytes).  Final records
are written once after the run.

Formats:
  tum    "t tx ty tz qx qy qz qw", space separated, timestamp fixed at
         nine decimals, values at nine significant digits.
  kitti  twelve row-major values of the 3x4 [R|t] per line, no
         timestamps; samples flagged LOST are omitted and their sample
         indices listed in a ``<path>.index`` sidecar.
  euroc  "t_ns,tx,ty,tz,qw,qx,qy,qz" comma separated, integer
         nanoseconds, qw first.
"""

from __future__ import annotations

import os
from typing import List, Optional, Sequence, Tuple

import numpy as np

from .frame import STATE_LOST, STATE_OK
from .geometry import SE3

FORMATS = ("tum", "kitti", "euroc")

LOST_SIDECAR_SUFFIX = ".index"

# Timestamp association window (seconds) shared by trajectory alignment
# and RGB-depth pairing.
ASSOCIATION_MAX_DT = 0.02


def _g9(v: float) -> str:
    return "%.9g" % v


class TrajectoryRecord:
    """Ordered (timestamp, pose, state) samples; online kind is append-only."""

    def __init__(self, kind: str = "online"):
        if kind not in ("online", "final"):
            raise ValueError(f"unknown trajectory kind '{kind}'")
        self.kind = kind
        self._timestamps: List[float] = []
        self._poses: List[SE3] = []
        self._states: List[str] = []

    def __len__(self) -> int:
        return len(self._timestamps)

    def append(self, timestamp: float, pose: SE3, state: str = STATE_OK) -> None:
        # poses are snapshotted so later in-place edits by the caller
        # cannot rewrite history
        if self._timestamps and timestamp < self._timestamps[-1]:
            raise ValueError("timestamps must be non-decreasing")
        self._timestamps.append(float(timestamp))
        self._poses.append(pose.copy())
        self._states.append(state)

    @property
    def timestamps(self) -> np.ndarray:
        return np.asarray(self._timestamps, dtype=float)

    @property
    def poses(self) -> Tuple[SE3, ...]:
        return tuple(self._poses)

    @property
    def states(self) -> Tuple[str, ...]:
        return tuple(self._states)

    def positions(self) -> np.ndarray:
        if not self._poses:
            return np.zeros((0, 3))
        return np.stack([p.t for p in self._poses])

    def sample(self, i: int) -> Tuple[float, SE3, str]:
        return self._timestamps[i], self._poses[i], self._states[i]


def _format_line(timestamp: float, pose: SE3, fmt: str) -> str:
    if fmt == "tum":
        x, y, z = pose.t
        qx, qy, qz, qw = pose.quaternion()
        vals = " ".join(_g9(v) for v in (x, y, z, qx, qy, qz, qw))
        return "%.9f %s" % (timestamp, vals)
    if fmt == "kitti":
        m = pose.matrix()[:3, :].reshape(-1)
        return " ".join(_g9(v) for v in m)
    if fmt == "euroc":
        x, y, z = pose.t
        qx, qy, qz, qw = pose.quaternion()
        t_ns = int(round(timestamp * 1e9))
        return "%d,%s" % (t_ns, ",".join(_g9(v) for v in (x, y, z, qw, qx, qy, qz)))
    raise ValueError(f"unknown trajectory format '{fmt}'")


def _parse_line(line: str, fmt: str) -> Tuple[float, SE3]:
    if fmt == "tum":
        f = [float(v) for v in line.split()]
        if len(f) != 8:
            raise ValueError(f"tum line needs 8 fields, got {len(f)}")
        t, x, y, z, qx, qy, qz, qw = f
        return t, SE3.from_quat_t(np.array([qx, qy, qz, qw]), np.array([x, y, z]))
    if fmt == "kitti":
        f = [float(v) for v in line.split()]
        if len(f) != 12:
            raise ValueError(f"kitti line needs 12 fields, got {len(f)}")
        m = np.array(f, dtype=float).reshape(3, 4)
        return 0.0, SE3(m[:, :3], m[:, 3])
    if fmt == "euroc":
        f = line.split(",")
        if len(f) != 8:
            raise ValueError(f"euroc line needs 8 fields, got {len(f)}")
        t = int(f[0]) * 1e-9
        x, y, z, qw, qx, qy, qz = (float(v) for v in f[1:])
        return t, SE3.from_quat_t(np.array([qx, qy, qz, qw]), np.array([x, y, z]))
    raise ValueError(f"unknown trajectory format '{fmt}'")


class TrajectoryWriter:
    """Streaming per-frame writer; one line per sample, flushed on write.

    The output file is append-only: lines already written are never
    touched again, so its byte prefix is stable while the run extends.
    For the kitti format LOST samples produce no line; their sample
    indices go to the ``<path>.index`` sidecar instead (created lazily).
    """

    def __init__(self, path: str, fmt: str = "tum"):
        if fmt not in FORMATS:
            raise ValueError(f"unknown trajectory format '{fmt}'")
        self.path = path
        self.fmt = fmt
        self.count = 0          # samples seen
        self.written = 0        # lines written
        self._fh = open(path, "w")
        self._sidecar = None

    def write(self, timestamp: float, pose: SE3, state: str = STATE_OK) -> None:
        i = self.count
        self.count += 1
        if self.fmt == "kitti" and state == STATE_LOST:
            if self._sidecar is None:
                self._sidecar = open(self.path + LOST_SIDECAR_SUFFIX, "w")
            self._sidecar.write("%d\n" % i)
            self._sidecar.flush()
            return
        self._fh.write(_format_line(timestamp, pose, self.fmt) + "\n")
        self._fh.flush()
        self.written += 1

    def close(self) -> None:
        self._fh.close()
        if self._sidecar is not None:
            self._sidecar.close()

    def __enter__(self) -> "TrajectoryWriter":
        return self

    def __exit__(self, *exc) -> None:
        self.close()


def write_trajectory(record: TrajectoryRecord, path: str, fmt: str = "tum") -> None:
    """Write a whole record; see module docstring for the line formats."""
    if len(record) == 0:
        raise ValueError("cannot write an empty trajectory")
    with TrajectoryWriter(path, fmt) as w:
        for i in range(len(record)):
            w.write(*record.sample(i))


def read_trajectory(path: str, fmt: str = "tum") -> TrajectoryRecord:
    """Inverse of write_trajectory up to what the format can carry.

    Poses round-trip; tracking states do not (every sample reads back
    OK).  kitti timestamps are the original sample indices, recovered
    through the LOST sidecar when one is present.
    """
    record = TrajectoryRecord(kind="final")
    lost: set = set()
    if fmt == "kitti" and os.path.exists(path + LOST_SIDECAR_SUFFIX):
        with open(path + LOST_SIDECAR_SUFFIX) as f:
            lost = {int(line) for line in f if line.strip()}
    with open(path) as f:
        idx = 0
        for line in f:
            line = line.strip()
            if not line or line.startswith("#"):
                continue
            t, pose = _parse_line(line, fmt)
            if fmt == "kitti":
                while idx in lost:
                    idx += 1
                t = float(idx)
                idx += 1
            record.append(t, pose, STATE_OK)
    return record


def associate_timestamps(ts_a: Sequence[float], ts_b: Sequence[float],
                         max_dt: float = ASSOCIATION_MAX_DT) -> List[Tuple[int, int]]:
    """Greedy one-to-one pairing of two timestamp lists.

    Candidate pairs within max_dt are taken in order of increasing |dt|,
    each index used at most once.  Matches the behaviour of the standard
    RGB-depth association tool, so dataset pairing and trajectory
    alignment agree on what "same instant" means.
    """
    a = np.asarray(ts_a, dtype=float)
    b = np.asarray(ts_b, dtype=float)
    if len(a) == 0 or len(b) == 0:
        return []
    order_b = np.argsort(b, kind="stable")
    b_sorted = b[order_b]
    cand = []
    # only a handful of b samples can sit inside the window of each a
    lo = np.searchsorted(b_sorted, a - max_dt, side="left")
    hi = np.searchsorted(b_sorted, a + max_dt, side="right")
    for i in range(len(a)):
        for k in range(lo[i], hi[i]):
            j = int(order_b[k])
            # swap-symmetric tie-break keeps the pairing identical when
            # the two lists trade places
            cand.append((abs(a[i] - b[j]), min(i, j), max(i, j), i, j))
    cand.sort()
    used_a: set = set()
    used_b: set = set()
    pairs = []
    for _, _, _, i, j in cand:
        if i in used_a or j in used_b:
            continue
        used_a.add(i)
        used_b.add(j)
        pairs.append((i, j))
    pairs.sort()
    return pairs
