"""Session orchestration: the pipeline behind the command-line entry points.

A session binds dataset input, feature extraction, tracking, local mapping,
loop closing, global bundle adjustment, and volumetric integration into one
deterministic cooperative loop.  It owns a run directory (logs/,
trajectories/, metrics/, slam_state/), streams newline-JSON events with
base64-packed point blocks to subscribers, executes control commands
(run / pause / step / save / reset / draw_ground_truth / shutdown), and can
save and reload its complete sparse-map state.

The six live workers — tracking, local mapping, loop detection, loop
closing, global BA, volumetric integration — are spun round-robin from a
single thread: one frame is tracked, then each downstream worker advances
by one unit of work.  The schedule is fixed, so a run is reproducible
sample-for-sample; wall-clock time gates snapshot emission only, never the
pipeline.
"""

from __future__ import annotations

import base64
import hashlib
import json
import logging
import os
import struct
import sys
import threading
import time
from collections import deque
from dataclasses import asdict, dataclass, field, fields as dc_fields
from datetime import datetime
from typing import Callable, Dict, List, Optional, Tuple

import numpy as np

from .camera import CameraModel, SENSOR_MONO, SENSOR_RGBD
from .config import ConfigError, SlamConfig
from .datasets import DatasetError, open_dataset
from .evaluation import (DegenerateAlignmentError, align_umeyama, compute_ate,
                         compute_percent_lost)
from .features import FeatureManager, FeatureTrackerConfig
from .frame import Frame, STATE_LOST, STATE_OK
from .geometry import SE3, quat_from_rotation
from .local_mapping import LocalMapper
from .loop_closing import LoopDetector, correct_loop, verify_geometric
from .optimize import solve_global_ba
from .sparse_map import MapPoint, SparseMap
from .tracking import (KeyframePolicy, Tracker, TrackerState,
                       stereo_keypoint_depths, vo_step)
from .trajectory import TrajectoryRecord, TrajectoryWriter, write_trajectory
from .tsdf import (KeyframePacket, TsdfConfig, VoxelVolume, extract_pointcloud,
                   integrate, reintegrate)
from .vocabulary import IncrementalBinaryIndex, Vocabulary

log = logging.getLogger("slamkit.session")
log_gba = logging.getLogger("slamkit.gba")

COMMAND_KINDS = ("run", "pause", "step", "save", "reset",
                 "draw_ground_truth", "shutdown")

SNAPSHOT_MIN_INTERVAL = 0.1          # seconds between snapshots (<= 10 Hz)
SNAPSHOT_MAX_POINTS = 100_000        # hard cap on the decimated cloud
GT_ALIGN_EVERY = 10                  # frames between alignment refreshes

STATE_FORMAT_VERSION = 1
_MAP_MAGIC = b"SLKMAP01"
_INDEX_MAGIC = b"SLKIDX01"

_POINT_DTYPE = np.dtype([("position", "<f4", (3,)),
                         ("color", "u1", (3,)),
                         ("_pad", "u1")])     # itemsize 16

_SPARSE_POINT_COLOR = (205, 205, 205)
_GROUNDTRUTH_COLOR = (220, 60, 60)


class SessionError(Exception):
    """Session-level failure (bad command context, unsaveable state, ...)."""


class StateCompatibilityError(SessionError):
    """A saved state cannot be loaded under the current configuration."""


# --------------------------------------------------------------------------
# commands and wire events
# --------------------------------------------------------------------------


@dataclass
class SessionCommand:
    """One control-channel request; step is honored only while paused."""

    kind: str
    payload: Optional[dict] = None

    def __post_init__(self):
        if self.kind not in COMMAND_KINDS:
            raise ValueError(f"unknown command kind '{self.kind}'")
        if self.payload is not None and not isinstance(self.payload, dict):
            raise ValueError("command payload must be a mapping")


def encode_event(event: dict) -> bytes:
    """One wire event: canonical JSON on a single newline-terminated line."""
    return (json.dumps(event, sort_keys=True, separators=(",", ":"))
            + "\n").encode("utf-8")


def encode_point_block(positions, colors=None) -> dict:
    """Pack a point cloud into a base64 block with a declared layout.

    Each record is 16 bytes: position float32 xyz at offset 0, color u8
    rgb at offset 12, one pad byte.  The layout is spelled out in the
    block so consumers never hard-code it.
    """
    positions = np.asarray(positions, dtype=np.float32).reshape(-1, 3)
    n = len(positions)
    rec = np.zeros(n, dtype=_POINT_DTYPE)
    rec["position"] = positions
    if colors is not None:
        rec["color"] = np.asarray(colors, dtype=np.uint8).reshape(-1, 3)
    return {
        "count": n,
        "stride": _POINT_DTYPE.itemsize,
        "layout": [
            {"field": "position", "dtype": "<f4", "components": 3, "offset": 0},
            {"field": "color", "dtype": "u1", "components": 3, "offset": 12},
        ],
        "data": base64.b64encode(rec.tobytes()).decode("ascii"),
    }


def decode_point_block(block: dict) -> Tuple[np.ndarray, np.ndarray]:
    """Inverse of encode_point_block -> (positions float32, colors uint8)."""
    raw = base64.b64decode(block["data"])
    if block["stride"] != _POINT_DTYPE.itemsize:
        raise ValueError(f"unsupported point stride {block['stride']}")
    rec = np.frombuffer(raw, dtype=_POINT_DTYPE)
    if len(rec) != block["count"]:
        raise ValueError("point block length mismatch")
    return rec["position"].astype(np.float32), rec["color"].copy()


def pose_to_seven(pose: SE3) -> List[float]:
    """SE3 -> [tx ty tz qx qy qz qw]."""
    q = quat_from_rotation(pose.r)
    return [float(v) for v in (*pose.t, *q)]


@dataclass
class MapSnapshot:
    """A self-consistent view of the live map for one instant.

    All fields are read under the same map version; the point cloud is
    decimated deterministically (fixed stride over id-sorted points) to
    at most SNAPSHOT_MAX_POINTS entries.
    """

    epoch: int
    map_version: int
    frame_index: int
    num_frames: int
    tracking_state: str
    keyframes: List[Tuple[int, List[float]]]
    points: np.ndarray                    # (n, 3) float32
    colors: np.ndarray                    # (n, 3) uint8
    current_pose: Optional[List[float]]
    num_map_points: int
    ate: Optional[dict] = None            # {"t","ex","ey","ez","rmse"} lists
    groundtruth: Optional[np.ndarray] = None   # aligned gt polyline (m, 3)

    def to_event(self) -> dict:
        event = {
            "type": "snapshot",
            "epoch": self.epoch,
            "map_version": self.map_version,
            "frame_index": self.frame_index,
            "num_frames": self.num_frames,
            "tracking_state": self.tracking_state,
            "keyframes": [[kid, pose] for kid, pose in self.keyframes],
            "num_keyframes": len(self.keyframes),
            "num_map_points": self.num_map_points,
            "current_pose": self.current_pose,
            "points": encode_point_block(self.points, self.colors),
            "ate": self.ate,
        }
        if self.groundtruth is not None:
            colors = np.tile(np.array(_GROUNDTRUTH_COLOR, dtype=np.uint8),
                             (len(self.groundtruth), 1))
            event["groundtruth"] = encode_point_block(self.groundtruth, colors)
        else:
            event["groundtruth"] = None
        return event


def _decimate(points: np.ndarray, cap: int) -> np.ndarray:
    if len(points) <= cap:
        return points
    stride = -(-len(points) // cap)
    return points[::stride][:cap]


# --------------------------------------------------------------------------
# binary state serialization
# --------------------------------------------------------------------------


class _BinWriter:
    """Little-endian append-only buffer; the framing mirror of _BinReader."""

    def __init__(self):
        self.buf = bytearray()

    def raw(self, data: bytes):
        self.buf += data

    def u8(self, v):
        self.buf += struct.pack("<B", int(v))

    def i64(self, v):
        self.buf += struct.pack("<q", int(v))

    def f64(self, v):
        self.buf += struct.pack("<d", float(v))

    def text(self, s: str):
        data = s.encode("utf-8")
        self.i64(len(data))
        self.buf += data

    def arr(self, a, dtype):
        data = np.ascontiguousarray(a, dtype=dtype).tobytes()
        self.i64(len(data))
        self.buf += data

    def getvalue(self) -> bytes:
        return bytes(self.buf)


class _BinReader:
    def __init__(self, data: bytes):
        self.data = data
        self.pos = 0

    def raw(self, n: int) -> bytes:
        if self.pos + n > len(self.data):
            raise SessionError("truncated state file")
        out = self.data[self.pos:self.pos + n]
        self.pos += n
        return out

    def u8(self) -> int:
        return struct.unpack("<B", self.raw(1))[0]

    def i64(self) -> int:
        return struct.unpack("<q", self.raw(8))[0]

    def f64(self) -> float:
        return struct.unpack("<d", self.raw(8))[0]

    def text(self) -> str:
        return self.raw(self.i64()).decode("utf-8")

    def arr(self, dtype, shape) -> np.ndarray:
        nbytes = self.i64()
        a = np.frombuffer(self.raw(nbytes), dtype=dtype)
        return a.reshape(shape).copy()

    def done(self) -> bool:
        return self.pos == len(self.data)


def _write_camera(w: _BinWriter, cam: CameraModel):
    w.f64(cam.fx), w.f64(cam.fy), w.f64(cam.cx), w.f64(cam.cy)
    w.i64(cam.width), w.i64(cam.height)
    w.arr(cam.dist, "<f8")
    w.f64(cam.bf), w.f64(cam.depth_scale)
    w.text(cam.sensor_kind)


def _read_camera(r: _BinReader) -> CameraModel:
    fx, fy, cx, cy = r.f64(), r.f64(), r.f64(), r.f64()
    width, height = r.i64(), r.i64()
    dist = r.arr("<f8", (5,))
    bf, depth_scale = r.f64(), r.f64()
    kind = r.text()
    return CameraModel(fx, fy, cx, cy, width, height, dist=dist, bf=bf,
                       depth_scale=depth_scale, sensor_kind=kind)


def serialize_map(smap: SparseMap) -> bytes:
    """Canonical binary image of a sparse map.

    Entities are emitted in sorted-id order and transient fields (images,
    loop-query scratch, badness flags) are excluded, so serializing a map,
    loading it, and serializing again yields identical bytes.
    """
    w = _BinWriter()
    w.raw(_MAP_MAGIC)
    w.i64(STATE_FORMAT_VERSION)

    kids = sorted(smap.keyframes)
    cameras: List[CameraModel] = []
    cam_index: Dict[int, int] = {}
    for kid in kids:
        cam = smap.keyframes[kid].camera
        if id(cam) not in cam_index:
            cam_index[id(cam)] = len(cameras)
            cameras.append(cam)
    w.i64(len(cameras))
    for cam in cameras:
        _write_camera(w, cam)

    w.i64(smap.next_kid), w.i64(smap.next_pid), w.i64(smap.version)
    w.i64(smap.covisibility_threshold)
    w.f64(smap.scale_factor), w.i64(smap.num_levels)

    w.i64(len(kids))
    for kid in kids:
        kf = smap.keyframes[kid]
        w.i64(kf.kid), w.i64(kf.frame_id), w.f64(kf.timestamp)
        w.i64(cam_index[id(kf.camera)])
        w.arr(kf.pose.r, "<f8"), w.arr(kf.pose.t, "<f8")
        w.f64(kf.median_depth)
        w.i64(-1 if kf.parent is None else kf.parent)
        children = sorted(kf.children)
        w.i64(len(children))
        for c in children:
            w.i64(c)
        covisible = sorted(kf.covisible.items())
        w.i64(len(covisible))
        for other, weight in covisible:
            w.i64(other), w.i64(weight)
        bow = sorted(kf.bow.items())
        w.i64(len(bow))
        for word, weight in bow:
            w.i64(word), w.f64(weight)
        w.i64(len(kf.kps))
        w.arr(kf.kps, "<f4"), w.arr(kf.desc, "u1"), w.arr(kf.kps_u, "<f4")
        w.u8(kf.depths is not None)
        if kf.depths is not None:
            w.arr(kf.depths, "<f4")
        bindings = [p.pid if (p is not None and p.pid in smap.points) else -1
                    for p in kf.points]
        w.arr(np.asarray(bindings, dtype=np.int64), "<i8")

    pids = sorted(smap.points)
    w.i64(len(pids))
    for pid in pids:
        p = smap.points[pid]
        w.i64(p.pid)
        w.arr(p.position, "<f8"), w.arr(p.descriptor, "u1"), w.arr(p.normal, "<f8")
        w.f64(p.min_dist), w.f64(p.max_dist)
        w.i64(p.n_visible), w.i64(p.n_found), w.i64(p.first_kid)
        obs = sorted((kid, idx) for kid, idx in p.observations.items()
                     if kid in smap.keyframes)
        w.i64(len(obs))
        for kid, idx in obs:
            w.i64(kid), w.i64(idx)
    return w.getvalue()


def deserialize_map(data: bytes) -> SparseMap:
    r = _BinReader(data)
    if r.raw(len(_MAP_MAGIC)) != _MAP_MAGIC:
        raise SessionError("not a map state file (bad magic)")
    version = r.i64()
    if version != STATE_FORMAT_VERSION:
        raise StateCompatibilityError(
            f"map state format {version} unsupported "
            f"(this build reads {STATE_FORMAT_VERSION})")
    cameras = [_read_camera(r) for _ in range(r.i64())]

    smap = SparseMap()
    smap.next_kid, smap.next_pid, smap.version = r.i64(), r.i64(), r.i64()
    smap.covisibility_threshold = r.i64()
    smap.scale_factor, smap.num_levels = r.f64(), r.i64()

    from .frame import KeyFrame  # local import: only the type, not a Frame

    bindings: Dict[int, np.ndarray] = {}
    for _ in range(r.i64()):
        kf = KeyFrame.__new__(KeyFrame)
        kf.kid, kf.frame_id, kf.timestamp = r.i64(), r.i64(), r.f64()
        kf.camera = cameras[r.i64()]
        kf.pose = SE3(r.arr("<f8", (3, 3)), r.arr("<f8", (3,)))
        kf.median_depth = r.f64()
        parent = r.i64()
        kf.parent = None if parent < 0 else parent
        kf.children = {r.i64() for _ in range(r.i64())}
        kf.covisible = {r.i64(): r.i64() for _ in range(r.i64())}
        kf.bow = {r.i64(): r.f64() for _ in range(r.i64())}
        n = r.i64()
        kf.kps = r.arr("<f4", (n, 5))
        kf.desc = r.arr("u1", (n, 32))
        kf.kps_u = r.arr("<f4", (n, 2))
        kf.depths = r.arr("<f4", (n,)) if r.u8() else None
        bindings[kf.kid] = r.arr("<i8", (n,))
        kf.points = [None] * n
        kf.is_bad = False
        kf.image = None
        kf.depth_image = None
        kf.loop_query_id = -1
        kf.loop_words = 0
        kf.loop_score = 0.0
        smap.keyframes[kf.kid] = kf

    for _ in range(r.i64()):
        pid = r.i64()
        position = r.arr("<f8", (3,))
        descriptor = r.arr("u1", (32,))
        p = MapPoint(pid, position, descriptor)
        p.normal = r.arr("<f8", (3,))
        p.min_dist, p.max_dist = r.f64(), r.f64()
        p.n_visible, p.n_found, p.first_kid = r.i64(), r.i64(), r.i64()
        p.observations = {r.i64(): r.i64() for _ in range(r.i64())}
        smap.points[p.pid] = p

    for kid, row in bindings.items():
        kf = smap.keyframes[kid]
        for i, pid in enumerate(row):
            if pid >= 0:
                kf.points[i] = smap.points.get(int(pid))
    if not r.done():
        raise SessionError("trailing bytes in map state file")
    return smap


def serialize_loop_database(detector: LoopDetector) -> bytes:
    """Dump the loop detector's scoring backend (index or BoW table).

    The database legitimately retains culled keyframes, so it cannot be
    rebuilt from the surviving map and must travel with the saved state.
    """
    w = _BinWriter()
    w.raw(_INDEX_MAGIC)
    w.i64(STATE_FORMAT_VERSION)
    if detector.vocabulary is not None:
        w.u8(1)
        w.i64(len(detector._bows))
        for kid in sorted(detector._bows):
            w.i64(kid)
            bow = sorted(detector._bows[kid].items())
            w.i64(len(bow))
            for word, weight in bow:
                w.i64(word), w.f64(weight)
    else:
        index = detector.index
        w.u8(0)
        w.i64(index.max_hamming)
        w.i64(index.bit_choices.shape[0]), w.i64(index.bit_choices.shape[1])
        w.arr(index.bit_choices, "<i8")
        w.i64(len(index._desc))
        if index._desc:
            w.arr(np.stack(index._desc), "u1")
        w.arr(np.asarray(index._image_of, dtype=np.int64), "<i8")
        w.arr(np.asarray(index.images, dtype=np.int64), "<i8")
    return w.getvalue()


def deserialize_loop_database(data: bytes) -> dict:
    """-> {"mode": "bows", "bows": {...}} or {"mode": "index", "index": obj}."""
    r = _BinReader(data)
    if r.raw(len(_INDEX_MAGIC)) != _INDEX_MAGIC:
        raise SessionError("not a loop index file (bad magic)")
    version = r.i64()
    if version != STATE_FORMAT_VERSION:
        raise StateCompatibilityError(
            f"loop index format {version} unsupported "
            f"(this build reads {STATE_FORMAT_VERSION})")
    if r.u8() == 1:
        bows = {}
        for _ in range(r.i64()):
            kid = r.i64()
            bows[kid] = {r.i64(): r.f64() for _ in range(r.i64())}
        if not r.done():
            raise SessionError("trailing bytes in loop index file")
        return {"mode": "bows", "bows": bows}
    max_hamming = r.i64()
    tables, bits = r.i64(), r.i64()
    bit_choices = r.arr("<i8", (tables, bits))
    n = r.i64()
    desc = r.arr("u1", (n, 32)) if n else np.zeros((0, 32), dtype=np.uint8)
    image_of = r.arr("<i8", (-1,))
    images = r.arr("<i8", (-1,))
    if not r.done():
        raise SessionError("trailing bytes in loop index file")

    index = IncrementalBinaryIndex(num_tables=tables, bits_per_table=bits,
                                   max_hamming=max_hamming)
    index.bit_choices = bit_choices
    index._desc = [desc[i] for i in range(n)]
    index._image_of = [int(v) for v in image_of]
    index.images = [int(v) for v in images]
    index._buckets = {}
    if n:
        keys = index._keys(desc)
        for i in range(n):
            for t in range(tables):
                index._buckets.setdefault((t, int(keys[i, t])), []).append(i)
    return {"mode": "index", "index": index}


def _canonical_json(obj) -> bytes:
    return (json.dumps(obj, sort_keys=True, indent=2) + "\n").encode("utf-8")


def _fingerprint_diff(expected: dict, found: dict, prefix="") -> List[str]:
    keys = sorted(set(expected) | set(found))
    diffs = []
    for k in keys:
        path = f"{prefix}{k}"
        if k not in expected or k not in found:
            diffs.append(path)
        elif isinstance(expected[k], dict) and isinstance(found[k], dict):
            diffs.extend(_fingerprint_diff(expected[k], found[k], path + "."))
        elif expected[k] != found[k]:
            diffs.append(path)
    return diffs


@dataclass
class SavedState:
    """A reloadable snapshot of the mapping back end.

    Folder layout: map.bin (sparse map), loop_index.bin (loop detector
    database), config_fingerprint.json (descriptor-compatibility gate),
    meta.json (summary; no wall-clock fields, so repeated saves of the
    same state are byte-identical).
    """

    format_version: int
    fingerprint: dict
    smap: SparseMap
    loop_payload: dict
    meta: dict


def save_state(session: "SlamSession", folder: str,
               json_export: bool = False) -> SavedState:
    """Write the session's map + loop database under `folder`.

    With json_export a human-readable map.json (poses and point positions
    only) is written alongside the binary state for inspection.
    """
    smap = session.smap
    if smap is None or not smap.keyframes:
        raise SessionError("refusing to save: the map has no keyframes")
    os.makedirs(folder, exist_ok=True)
    fingerprint = session.config_fingerprint()
    meta = {
        "format_version": STATE_FORMAT_VERSION,
        "map_version": smap.version,
        "num_keyframes": len(smap.keyframes),
        "num_points": len(smap.points),
        "sensor_type": session.sensor_type,
        "dataset": session.dataset_name,
    }
    with open(os.path.join(folder, "map.bin"), "wb") as f:
        f.write(serialize_map(smap))
    with open(os.path.join(folder, "loop_index.bin"), "wb") as f:
        f.write(serialize_loop_database(session.detector))
    with open(os.path.join(folder, "config_fingerprint.json"), "wb") as f:
        f.write(_canonical_json(fingerprint))
    with open(os.path.join(folder, "meta.json"), "wb") as f:
        f.write(_canonical_json(meta))
    if json_export:
        export = {
            "map_version": smap.version,
            "keyframes": {str(kid): pose_to_seven(kf.pose)
                          for kid, kf in sorted(smap.keyframes.items())},
            "points": {str(pid): [float(v) for v in p.position]
                       for pid, p in sorted(smap.points.items())},
        }
        with open(os.path.join(folder, "map.json"), "wb") as f:
            f.write(_canonical_json(export))
    log.info("saved state: %d keyframes, %d points -> %s",
             len(smap.keyframes), len(smap.points), folder)
    return SavedState(STATE_FORMAT_VERSION, fingerprint, smap,
                      {"mode": "live"}, meta)


def load_state(folder: str, fingerprint: Optional[dict] = None) -> SavedState:
    """Read a SavedState folder; verify `fingerprint` when provided.

    A fingerprint mismatch is refused with the differing keys spelled out:
    a map built with different descriptor settings cannot be matched
    against, so loading it would fail silently later.
    """
    paths = {name: os.path.join(folder, name)
             for name in ("map.bin", "loop_index.bin",
                          "config_fingerprint.json", "meta.json")}
    missing = [n for n, p in paths.items() if not os.path.exists(p)]
    if missing:
        raise SessionError(
            f"saved state at '{folder}' is missing {', '.join(sorted(missing))}")
    with open(paths["config_fingerprint.json"], "rb") as f:
        found = json.loads(f.read().decode("utf-8"))
    if fingerprint is not None and found != fingerprint:
        diffs = _fingerprint_diff(fingerprint, found) or ["<structure>"]
        raise StateCompatibilityError(
            "saved state is incompatible with the current configuration; "
            "differs in: " + ", ".join(diffs))
    with open(paths["meta.json"], "rb") as f:
        meta = json.loads(f.read().decode("utf-8"))
    if meta.get("format_version") != STATE_FORMAT_VERSION:
        raise StateCompatibilityError(
            f"saved state format {meta.get('format_version')} unsupported")
    with open(paths["map.bin"], "rb") as f:
        smap = deserialize_map(f.read())
    with open(paths["loop_index.bin"], "rb") as f:
        loop_payload = deserialize_loop_database(f.read())
    return SavedState(STATE_FORMAT_VERSION, found, smap, loop_payload, meta)


# --------------------------------------------------------------------------
# log routing
# --------------------------------------------------------------------------

LOG_ROUTES = (
    ("tracking.log", ("slamkit.tracking",)),
    ("local_mapping.log", ("slamkit.local_mapping",)),
    ("loop_closing.log", ("slamkit.loop_closing",)),
    ("loop_detecting.log", ("slamkit.loop_detecting",)),
    ("gba.log", ("slamkit.gba",)),
    ("volumetric_integrator.log", ("slamkit.tsdf", "slamkit.meshing")),
    ("session.log", ("slamkit.session",)),
)


class _LogRouter:
    """Per-run file handlers mapping module loggers onto the log layout."""

    def __init__(self, log_dir: str):
        os.makedirs(log_dir, exist_ok=True)
        formatter = logging.Formatter(
            "%(asctime)s %(levelname)s %(name)s: %(message)s")
        self._attached: List[Tuple[logging.Logger, logging.Handler, int]] = []
        self._handlers: List[logging.Handler] = []
        for filename, names in LOG_ROUTES:
            handler = logging.FileHandler(os.path.join(log_dir, filename))
            handler.setFormatter(formatter)
            self._handlers.append(handler)
            for name in names:
                logger = logging.getLogger(name)
                previous = logger.level
                if logger.getEffectiveLevel() > logging.INFO:
                    logger.setLevel(logging.INFO)
                logger.addHandler(handler)
                self._attached.append((logger, handler, previous))

    def close(self):
        for logger, handler, previous in self._attached:
            logger.removeHandler(handler)
            logger.setLevel(previous)
        for handler in self._handlers:
            handler.close()
        self._attached = []
        self._handlers = []


# --------------------------------------------------------------------------
# the session
# --------------------------------------------------------------------------


def _dataclass_from_params(cls, params: dict):
    names = {f.name for f in dc_fields(cls)}
    kwargs = {k: v for k, v in params.items() if k in names}
    return cls(**kwargs)


def _sha256_file(path: str) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as f:
        for chunk in iter(lambda: f.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


class SlamSession:
    """One run of the engine over a dataset, with live control.

    Construction validates everything (config, dataset layout, camera,
    vocabulary, saved-state compatibility) but writes nothing; the first
    run()/start() creates the run directory.  Modes: "slam" (full
    pipeline), "dense-recon" (slam + volumetric integration), "vo"
    (frame-to-frame visual odometry, ground-truth scale), "viewer"
    (serve a saved map, no processing).
    """

    def __init__(self, config: SlamConfig, run_dir: Optional[str] = None,
                 out_root: str = "results", max_frames: Optional[int] = None,
                 mode: str = "slam"):
        if mode not in ("slam", "dense-recon", "vo", "viewer"):
            raise ConfigError(f"unknown session mode '{mode}'")
        self.config = config
        self.mode = mode
        self.max_frames = max_frames
        self.sensor_type = config.dataset.sensor_type
        self.dataset_name = config.dataset.name or config.dataset.type
        params = dict(config.global_parameters)

        self.feature_config = _dataclass_from_params(FeatureTrackerConfig, params)
        self.policy = _dataclass_from_params(KeyframePolicy, params)
        # the keyframe FOV-centers rule is a per-sensor calibration detail,
        # so it lives in the settings file next to the intrinsics
        settings = config.settings
        if "KeyFrame.useFovCentersBasedGeneration" in settings:
            self.policy.use_fov_centers = bool(
                settings["KeyFrame.useFovCentersBasedGeneration"])
        if "KeyFrame.maxFovCentersDistance" in settings:
            self.policy.max_fov_centers_distance = float(
                settings["KeyFrame.maxFovCentersDistance"])
        self.loop_closing_enabled = bool(params.get("loop_closing", True))
        self.volumetric = (mode == "dense-recon"
                           or bool(params.get("volumetric_integration", False)))
        self.snapshot_max_points = min(
            int(params.get("snapshot_max_points", SNAPSHOT_MAX_POINTS)),
            SNAPSHOT_MAX_POINTS)

        self._vocabulary = None
        self._vocabulary_sha = None
        vocab_path = params.get("vocabulary_path")
        if vocab_path and mode in ("slam", "dense-recon"):
            if not os.path.isabs(vocab_path):
                vocab_path = os.path.join(
                    os.path.dirname(os.path.abspath(config.path)), vocab_path)
            if not os.path.exists(vocab_path):
                raise ConfigError(f"vocabulary file not found: {vocab_path}")
            self._vocabulary = Vocabulary.load(vocab_path)
            self._vocabulary_sha = _sha256_file(vocab_path)

        if mode == "viewer":
            self.dataset = None
            self.camera = None
            self.groundtruth = None
        else:
            self.dataset = open_dataset(config.dataset, config.settings)
            self.camera = config.camera()
            try:
                self.groundtruth = self.dataset.groundtruth()
            except (DatasetError, OSError, ValueError):
                self.groundtruth = None
            if mode == "vo" and self.groundtruth is None:
                raise ConfigError(
                    "vo mode needs ground truth for translation scale")
        if self.volumetric and self.sensor_type != SENSOR_RGBD:
            raise ConfigError(
                "volumetric integration requires a depth-capable (rgbd) sensor")
        self.tsdf_config = (_dataclass_from_params(TsdfConfig, params)
                            if self.volumetric else None)

        loaded = None
        state_cfg = config.system_state
        want_load = bool(state_cfg.get("load_state")) or mode == "viewer"
        if want_load:
            folder = state_cfg.get("folder_path")
            if not folder:
                raise ConfigError(
                    "SYSTEM_STATE.folder_path is required to load a state")
            if not os.path.isabs(folder):
                folder = os.path.join(
                    os.path.dirname(os.path.abspath(config.path)), folder)
            loaded = load_state(folder, fingerprint=self.config_fingerprint())
            log.info("loaded state: %d keyframes, %d points from %s",
                     len(loaded.smap.keyframes), len(loaded.smap.points), folder)

        traj_cfg = config.save_trajectory
        self.save_final_trajectory = bool(traj_cfg.get("save_trajectory", True))
        self.trajectory_format = str(traj_cfg.get("format_type", "tum"))
        if self.trajectory_format not in ("tum", "kitti", "euroc"):
            raise ConfigError(
                f"unknown trajectory format '{self.trajectory_format}'")
        self.trajectory_basename = str(traj_cfg.get("basename", "trajectory"))
        self._trajectory_folder = traj_cfg.get("output_folder", "")

        self.run_dir = run_dir
        self.out_root = out_root
        self._started = False
        self._router: Optional[_LogRouter] = None
        self._online: Optional[TrajectoryWriter] = None

        self._commands: deque = deque()
        self._wake = threading.Event()
        self._sinks: List[Callable[[dict], None]] = []
        self._interactive = False
        self._paused = False
        self._step_budget = 0
        self._shutdown = False
        self._snapshot_requested = False
        self._last_snapshot = -np.inf
        self.epoch = 0
        self._initial_state = loaded
        self._build_pipeline(loaded)

    # -- configuration fingerprints ---------------------------------------

    def config_fingerprint(self) -> dict:
        feature = asdict(self.feature_config)
        feature["tile_grid"] = list(feature["tile_grid"])
        return {
            "format_version": STATE_FORMAT_VERSION,
            "sensor_type": self.sensor_type,
            "feature": feature,
            "loop": {
                "backend": ("vocabulary" if self._vocabulary is not None
                            else "incremental_index"),
                "vocabulary_sha256": self._vocabulary_sha,
            },
        }

    # -- pipeline construction ---------------------------------------------

    def _build_pipeline(self, loaded: Optional[SavedState]):
        self.features = FeatureManager(self.feature_config)
        self.smap = loaded.smap if loaded is not None else SparseMap(
            scale_factor=self.feature_config.scale_factor,
            num_levels=self.feature_config.num_levels)
        self.detector = LoopDetector(vocabulary=self._vocabulary)
        if loaded is not None:
            payload = loaded.loop_payload
            if payload["mode"] == "bows":
                if self._vocabulary is None:
                    raise StateCompatibilityError(
                        "saved loop database needs a vocabulary backend")
                self.detector._bows = dict(payload["bows"])
            elif payload["mode"] == "index":
                if self._vocabulary is not None:
                    raise StateCompatibilityError(
                        "saved loop database was built without a vocabulary")
                self.detector.index = payload["index"]

        self._has_depth = self.sensor_type in (SENSOR_RGBD, "stereo")
        if self.mode in ("slam", "dense-recon"):
            self.tracker = Tracker(self.camera, smap=self.smap,
                                   policy=self.policy)
            if loaded is not None and self.smap.keyframes:
                # wake up lost over the reloaded map: first frames relocalize
                self.tracker.state.mode = STATE_LOST
                for kid in sorted(self.smap.keyframes):
                    self.tracker.reloc_index.add(
                        kid, self.smap.keyframes[kid].desc)
            self.mapper = LocalMapper(self.smap, depth_sensor=self._has_depth)
        else:
            self.tracker = None
            self.mapper = None
        self.volume = (VoxelVolume(self.tsdf_config)
                       if self.volumetric else None)
        self._volume_synced_version = -1
        self._volume_has_data = False

        self._vo_state = TrackerState()
        self._vo_record = TrajectoryRecord("online")

        self._cursor = 0
        self._frames_done = 0
        self._kf_pending: deque = deque()
        self._loop_pending: deque = deque()
        self._packet_pending: deque = deque()
        self._gba_requested = False
        self._closures = 0
        self._final_log: List[Tuple[float, str, Optional[int], Optional[SE3]]] = []
        self._end_announced = False

        self._gt_enabled = False
        self._gt_alignment = None
        self._gt_points: List[Optional[np.ndarray]] = []
        self._frames_since_align = 0
        self._ate_history: Dict[str, List[float]] = {
            "t": [], "ex": [], "ey": [], "ez": [], "rmse": []}

    @property
    def record(self) -> TrajectoryRecord:
        """The per-frame online trajectory (append-only)."""
        if self.tracker is not None:
            return self.tracker.record
        return self._vo_record

    @property
    def tracking_state(self) -> str:
        if self.mode == "viewer":
            return STATE_OK
        if self.tracker is not None:
            return self.tracker.state.mode
        return self._vo_state.mode

    def _limit(self) -> int:
        if self.dataset is None:
            return 0
        n = len(self.dataset)
        return n if self.max_frames is None else min(n, int(self.max_frames))

    # -- outputs -------------------------------------------------------------

    def start(self):
        """Create the run directory tree and open the per-frame writer."""
        if self._started:
            return
        if self.run_dir is None:
            stamp = datetime.now().strftime("%Y%m%d_%H%M%S")
            candidate = os.path.join(self.out_root, stamp)
            n = 1
            while os.path.exists(candidate):
                candidate = os.path.join(self.out_root, f"{stamp}_{n}")
                n += 1
            self.run_dir = candidate
        for sub in ("metrics", "slam_state", "trajectories"):
            os.makedirs(os.path.join(self.run_dir, sub), exist_ok=True)
        self._router = _LogRouter(os.path.join(self.run_dir, "logs"))
        self._open_online_writer()
        self._started = True
        log.info("run directory: %s (mode %s, %d frames)",
                 self.run_dir, self.mode, self._limit())

    def trajectories_dir(self) -> str:
        folder = self._trajectory_folder or "trajectories"
        if not os.path.isabs(folder):
            folder = os.path.join(self.run_dir, folder)
        os.makedirs(folder, exist_ok=True)
        return folder

    def _open_online_writer(self):
        if self.mode == "viewer":
            return
        suffix = "" if self.epoch == 0 else f".e{self.epoch}"
        name = f"{self.trajectory_basename}_online{suffix}.txt"
        path = os.path.join(self.trajectories_dir(), name)
        self._online = TrajectoryWriter(path, self.trajectory_format)

    def close(self):
        if self._online is not None:
            self._online.close()
            self._online = None
        if self._router is not None:
            self._router.close()
            self._router = None

    # -- control channel -------------------------------------------------------

    def set_interactive(self, flag: bool):
        """Interactive sessions idle at pauses/end-of-data awaiting commands."""
        self._interactive = bool(flag)
        self._wake.set()

    def subscribe(self, sink: Callable[[dict], None]):
        self._sinks.append(sink)

    def unsubscribe(self, sink: Callable[[dict], None]):
        if sink in self._sinks:
            self._sinks.remove(sink)

    def request_snapshot(self):
        """Ask the run loop to emit a snapshot soon (any thread).

        Snapshots are built on the session thread so consumers never see
        a map mid-mutation; a paused loop serves the request on its next
        wakeup.
        """
        self._snapshot_requested = True
        self._wake.set()

    def submit(self, command: SessionCommand):
        """Queue a command from any thread; the run loop executes in order."""
        self._commands.append(command)
        self._wake.set()

    def _emit(self, event: dict):
        for sink in list(self._sinks):
            try:
                sink(event)
            except Exception:
                log.exception("snapshot sink failed; dropping it")
                self.unsubscribe(sink)

    def describe(self) -> dict:
        return {
            "type": "hello",
            "mode": self.mode,
            "sensor_type": self.sensor_type,
            "dataset": self.dataset_name,
            "num_frames": self._limit(),
            "epoch": self.epoch,
            "paused": self._paused,
            "has_groundtruth": self.groundtruth is not None,
        }

    def handle_command(self, command: SessionCommand) -> dict:
        """Execute one command; returns (and broadcasts) the ack/error event."""
        kind = command.kind
        payload = command.payload or {}
        try:
            if kind == "run":
                self._paused = False
                event = {"type": "ack", "command": kind}
            elif kind == "pause":
                self._paused = True
                event = {"type": "ack", "command": kind}
            elif kind == "step":
                if not self._paused:
                    raise SessionError("step is only valid while paused")
                self._step_budget += 1
                event = {"type": "ack", "command": kind}
            elif kind == "save":
                folder = payload.get("folder")
                if folder is None:
                    self.start()
                    folder = os.path.join(self.run_dir, "slam_state")
                save_state(self, folder,
                           json_export=bool(payload.get("json_export")))
                event = {"type": "ack", "command": kind, "folder": folder}
            elif kind == "reset":
                self.reset()
                event = {"type": "ack", "command": kind, "epoch": self.epoch}
            elif kind == "draw_ground_truth":
                enabled = bool(payload.get("enabled", not self._gt_enabled))
                if enabled and self.groundtruth is None:
                    raise SessionError("no ground truth available to draw")
                self._gt_enabled = enabled
                event = {"type": "ack", "command": kind, "enabled": enabled}
            elif kind == "shutdown":
                self._shutdown = True
                event = {"type": "ack", "command": kind}
            else:  # pragma: no cover - SessionCommand already validates
                raise SessionError(f"unknown command '{kind}'")
        except SessionError as e:
            log.info("command %s rejected: %s", kind, e)
            event = {"type": "error", "command": kind, "error": str(e)}
        self._emit(event)
        return event

    def _drain_commands(self):
        while self._commands:
            self.handle_command(self._commands.popleft())

    def reset(self):
        """Back to frame 0 with cleared modules; a fresh epoch begins."""
        self.epoch += 1
        if self._online is not None:
            self._online.close()
            self._online = None
        self._build_pipeline(None)
        if self._started:
            self._open_online_writer()
        log.info("session reset: epoch %d", self.epoch)

    # -- frame pipeline --------------------------------------------------------

    def _frame_from_bundle(self, bundle) -> Frame:
        kps, desc = self.features.detect_and_compute(bundle.left)
        depths = None
        depth_image = None
        if bundle.depth is not None:
            depth_image = bundle.depth
            h, w = depth_image.shape[:2]
            ui = np.clip(np.rint(kps[:, 0]).astype(int), 0, w - 1)
            vi = np.clip(np.rint(kps[:, 1]).astype(int), 0, h - 1)
            depths = depth_image[vi, ui].astype(np.float32)
            depths[~np.isfinite(depths)] = 0.0
            depths[depths < 0] = 0.0
        elif bundle.right is not None:
            rkps, rdesc = self.features.detect_and_compute(bundle.right)
            depths = stereo_keypoint_depths(kps, desc, rkps, rdesc, self.camera)
        image = None
        if self.volume is not None and bundle.left.ndim == 3:
            image = np.ascontiguousarray(bundle.left[..., ::-1])  # BGR -> RGB
        return Frame(bundle.index, bundle.timestamp, self.camera, kps, desc,
                     depths=depths, image=image,
                     depth_image=depth_image if self.volume is not None else None)

    def _track_frame(self, i: int):
        frame = self._frame_from_bundle(self.dataset.frame(i))
        if self.mode == "vo":
            pose = vo_step(self._vo_state, frame, self.groundtruth)
            self._vo_record.append(frame.timestamp, pose, frame.state)
            kf = None
        else:
            kf = self.tracker.process_frame(
                frame, local_mapping_idle=self.mapper.idle)
        t, pose, state = self.record.sample(len(self.record) - 1)
        if self._online is not None:
            self._online.write(t, pose, state)

        ref_kid, rel = None, None
        if self.tracker is not None and state == STATE_OK:
            kid = self.tracker.state.reference_kid
            ref_kf = self.smap.keyframes.get(kid)
            if ref_kf is not None and not ref_kf.is_bad:
                ref_kid = kid
                rel = ref_kf.pose.inverse() @ pose
        self._final_log.append((t, state, ref_kid, rel))

        if kf is not None:
            if self.volume is not None and frame.depth_image is not None:
                packet = KeyframePacket(kf.kid, kf.pose.copy(),
                                        self.smap.version,
                                        depth=frame.depth_image,
                                        color=frame.image)
                self._packet_pending.append(packet)
            kf.image = None
            kf.depth_image = None
            self.mapper.push(kf)
            if self.loop_closing_enabled:
                self._kf_pending.append(kf.kid)

    def _spin_local_mapping(self):
        if self.mapper is not None:
            self.mapper.spin_once()

    def _spin_loop_detector(self):
        if not self._kf_pending:
            return
        kid = self._kf_pending.popleft()
        kf = self.smap.keyframes.get(kid)
        if kf is None or kf.is_bad:
            return
        candidate = self.detector.detect_loop(kf, self.smap)
        if candidate is not None:
            self._loop_pending.append(candidate)

    def _spin_loop_closer(self):
        if not self._loop_pending:
            return
        candidate = self._loop_pending.popleft()
        if (candidate.query_kid not in self.smap.keyframes
                or candidate.match_kid not in self.smap.keyframes):
            return
        monocular = self.sensor_type == SENSOR_MONO
        verified = verify_geometric(candidate, self.smap, monocular=monocular)
        if verified is None:
            return
        result = correct_loop(self.smap, verified, monocular=monocular)
        if result.success:
            self._closures += 1
            if result.gba_requested:
                self._gba_requested = True

    def _spin_gba(self):
        if not self._gba_requested:
            return
        self._gba_requested = False
        report = solve_global_ba(self.smap)
        log_gba.info("global BA: %d iters, chi2 %.4e -> %.4e (%s)",
                     report.iterations, report.initial_chi2,
                     report.final_chi2, report.termination)

    def _spin_volumetric(self):
        if self.volume is None:
            return
        if self._volume_has_data and self.smap.version > self._volume_synced_version:
            reintegrate(self.volume, self.smap)
            self._volume_synced_version = self.smap.version
        if self._packet_pending:
            packet = self._packet_pending.popleft()
            kf = self.smap.keyframes.get(packet.kid)
            if kf is not None and not kf.is_bad:
                packet.pose = kf.pose.copy()
            integrate(self.volume, packet, self.camera)
            self._volume_has_data = True
            self._volume_synced_version = max(self._volume_synced_version,
                                              packet.map_version)

    def _update_gt_errors(self):
        if self.tracker is None and self.mode != "vo":
            return
        rec = self.record
        t = rec.timestamps[-1]
        gt = self.groundtruth
        point = None
        if gt is not None and gt.in_range(t):
            point = gt.position_at(t)
        self._gt_points.append(point)
        if not self._gt_enabled or gt is None:
            return
        idx = [i for i, p in enumerate(self._gt_points) if p is not None]
        if len(idx) < 3:
            return
        est = rec.positions()[idx]
        ref = np.stack([self._gt_points[i] for i in idx])
        self._frames_since_align += 1
        if self._gt_alignment is None or self._frames_since_align >= GT_ALIGN_EVERY:
            try:
                self._gt_alignment, _ = align_umeyama(
                    est, ref, with_scale=self.sensor_type == SENSOR_MONO)
                self._frames_since_align = 0
            except DegenerateAlignmentError:
                return
        if self._gt_points[-1] is None:
            return
        aligned = self._gt_alignment.transform(est)
        errors = aligned - ref
        e = errors[-1]
        rmse = float(np.sqrt(np.mean(np.sum(errors ** 2, axis=1))))
        hist = self._ate_history
        hist["t"].append(float(t))
        hist["ex"].append(float(e[0]))
        hist["ey"].append(float(e[1]))
        hist["ez"].append(float(e[2]))
        hist["rmse"].append(rmse)

    def step_once(self):
        """Advance the whole pipeline by exactly one frame."""
        i = self._cursor
        self._cursor += 1
        self._track_frame(i)
        self._spin_local_mapping()
        self._spin_loop_detector()
        self._spin_loop_closer()
        self._spin_gba()
        self._spin_volumetric()
        self._frames_done += 1
        self._update_gt_errors()

    # -- snapshots ---------------------------------------------------------------

    def snapshot(self) -> MapSnapshot:
        smap = self.smap
        keyframes = [(kid, pose_to_seven(smap.keyframes[kid].pose))
                     for kid in sorted(smap.keyframes)]
        if self.volume is not None and len(self.volume.blocks):
            pts, cols = extract_pointcloud(self.volume)
            pts = pts.astype(np.float32)
        else:
            pids = sorted(smap.points)
            pts = (np.stack([smap.points[p].position for p in pids])
                   .astype(np.float32) if pids else np.zeros((0, 3), np.float32))
            cols = np.tile(np.array(_SPARSE_POINT_COLOR, dtype=np.uint8),
                           (len(pts), 1))
        n_total = len(pts)
        pts = _decimate(pts, self.snapshot_max_points)
        cols = _decimate(cols, self.snapshot_max_points)

        current = None
        rec = self.record
        if len(rec):
            current = pose_to_seven(rec.sample(len(rec) - 1)[1])

        ate = None
        gt_polyline = None
        if self._gt_enabled and self._ate_history["t"]:
            ate = {k: list(v) for k, v in self._ate_history.items()}
            if self._gt_alignment is not None:
                idx = [i for i, p in enumerate(self._gt_points) if p is not None]
                ref = np.stack([self._gt_points[i] for i in idx])
                gt_polyline = _decimate(
                    self._gt_alignment.inverse().transform(ref)
                    .astype(np.float32), self.snapshot_max_points)
        return MapSnapshot(
            epoch=self.epoch,
            map_version=smap.version,
            frame_index=self._frames_done,
            num_frames=self._limit(),
            tracking_state=self.tracking_state,
            keyframes=keyframes,
            points=pts,
            colors=cols,
            current_pose=current,
            num_map_points=n_total,
            ate=ate,
            groundtruth=gt_polyline,
        )

    def _emit_snapshot(self, force: bool = False):
        if not self._sinks:
            return
        now = time.monotonic()
        if not force and now - self._last_snapshot < SNAPSHOT_MIN_INTERVAL:
            return
        self._last_snapshot = now
        self._emit(self.snapshot().to_event())

    # -- run loop -----------------------------------------------------------------

    def run(self) -> int:
        """Process to dataset end (or shutdown), then write final outputs."""
        self.start()
        try:
            while not self._shutdown:
                self._drain_commands()
                if self._snapshot_requested:
                    self._snapshot_requested = False
                    self._emit_snapshot(force=True)
                if self._shutdown:
                    break
                if self._paused and self._step_budget == 0:
                    if not self._interactive:
                        break
                    self._wake.wait(0.05)
                    self._wake.clear()
                    continue
                if self._cursor >= self._limit():
                    if not self._end_announced:
                        self._end_announced = True
                        log.info("dataset exhausted after %d frames",
                                 self._frames_done)
                        self._emit_snapshot(force=True)
                    if not self._interactive:
                        break
                    self._paused = True
                    continue
                self.step_once()
                if self._step_budget > 0:
                    self._step_budget -= 1
                    if self._step_budget == 0:
                        self._emit_snapshot(force=True)
                self._emit_snapshot()
            self._finalize()
            return 0
        finally:
            self.close()

    def final_record(self) -> TrajectoryRecord:
        """Per-frame trajectory re-expressed through optimized keyframes.

        Each OK frame rides its reference keyframe: the relative pose
        captured at tracking time composed onto the keyframe's current
        (loop-corrected) pose.  Frames whose reference was culled, and
        non-OK frames, keep their online pose.
        """
        final = TrajectoryRecord("final")
        rec = self.record
        for i, (t, state, ref_kid, rel) in enumerate(self._final_log):
            pose = rec.sample(i)[1]
            if ref_kid is not None and rel is not None:
                kf = self.smap.keyframes.get(ref_kid)
                if kf is not None and not kf.is_bad:
                    pose = kf.pose @ rel
            final.append(t, pose, state)
        return final

    def _groundtruth_record(self) -> Optional[TrajectoryRecord]:
        if self.groundtruth is None or len(self.groundtruth) == 0:
            return None
        ref = TrajectoryRecord("final")
        for t, pose in zip(self.groundtruth.timestamps, self.groundtruth.poses):
            ref.append(float(t), pose)
        return ref

    def _finalize(self):
        if self.mode == "viewer" or not len(self.record):
            return
        final = self.final_record()
        if self.save_final_trajectory:
            path = os.path.join(self.trajectories_dir(),
                                f"{self.trajectory_basename}_final.txt")
            write_trajectory(final, path, self.trajectory_format)
            log.info("final trajectory: %d samples -> %s", len(final), path)
        metrics = {
            "num_frames": len(self.record),
            "num_keyframes": len(self.smap.keyframes),
            "num_map_points": len(self.smap.points),
            "map_version": self.smap.version,
            "loop_closures": self._closures,
            "percent_lost": compute_percent_lost(self.record),
        }
        reference = self._groundtruth_record()
        if reference is not None:
            try:
                ate = compute_ate(final, reference,
                                  with_scale=self.sensor_type == SENSOR_MONO)
                metrics["ate_rmse"] = ate.rmse
                metrics["ate_max"] = ate.max_error
                metrics["ate_mean"] = ate.mean
                metrics["ate_pairs"] = ate.num_pairs
            except (DegenerateAlignmentError, ValueError) as e:
                log.info("ATE skipped: %s", e)
        with open(os.path.join(self.run_dir, "metrics", "metrics.json"),
                  "wb") as f:
            f.write(_canonical_json(metrics))
        if (self.mode in ("slam", "dense-recon") and self.smap.keyframes):
            save_state(self, os.path.join(self.run_dir, "slam_state"))
        log.info("run complete: %s", json.dumps(metrics, sort_keys=True))


def run_slam(config_path: str, max_frames: Optional[int] = None,
             run_dir: Optional[str] = None, out_root: str = "results",
             mode: str = "slam",
             session_hook: Optional[Callable[[SlamSession], None]] = None) -> int:
    """Configure, run, and tear down one session; returns a process status.

    Configuration problems (bad config, missing dataset or settings,
    incompatible saved state) are reported on stderr before any output
    directory exists, with a nonzero status.  `session_hook` runs after
    validation but before processing — the control endpoint attaches here.
    """
    from .config import load_config
    try:
        config = load_config(config_path)
        session = SlamSession(config, run_dir=run_dir, out_root=out_root,
                              max_frames=max_frames, mode=mode)
    except (ConfigError, DatasetError, SessionError) as e:
        sys.stderr.write(f"error: {e}\n")
        return 2
    if session_hook is not None:
        session_hook(session)
    try:
        return session.run()
    except KeyboardInterrupt:
        return 130
