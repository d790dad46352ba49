"""Sparse TSDF volume: voxel-block hashing, per-keyframe fusion, re-integration.

The volume is a spatial hash of fixed-size voxel blocks allocated on demand
along the truncation band of each integrated depth image.  Every integrated
keyframe packet (pose snapshot + depth + color) is retained so the whole
volume can be rebuilt deterministically after global pose adjustments:
``reintegrate`` replays the retained packets with the map's current poses and
reproduces a fresh integration bit for bit.  Memory therefore grows with the
number of integrated keyframes, not with the number of integration calls.
"""

import logging
from dataclasses import dataclass
from typing import Dict, Iterator, List, Optional, Tuple

import numpy as np

from .camera import CameraModel
from .geometry import SE3

log = logging.getLogger("slamkit.tsdf")

# Teschner-style spatial-hash primes; one per coordinate, mixed by xor.
HASH_P1 = 73856093
HASH_P2 = 19349663
HASH_P3 = 83492791

MAX_LOAD_FACTOR = 0.75

DEFAULT_VOXEL_SIZE = 0.02
DEFAULT_BLOCK_EDGE = 8
DEFAULT_MAX_WEIGHT = 100.0

# Packed block-coordinate keys: 21 bits per signed axis.
_PACK_OFFSET = 1 << 20

BlockCoord = Tuple[int, int, int]


@dataclass
class TsdfConfig:
    """Volumetric integration parameters.

    ``truncation=None`` resolves to four voxels.  The voxel defaults are not
    tied to any dataset; expose them per run.
    """

    voxel_size: float = DEFAULT_VOXEL_SIZE
    truncation: Optional[float] = None
    block_edge: int = DEFAULT_BLOCK_EDGE
    max_weight: float = DEFAULT_MAX_WEIGHT
    depth_min: float = 0.1
    depth_max: float = 8.0

    def __post_init__(self):
        if self.voxel_size <= 0:
            raise ValueError("voxel_size must be positive")
        e = int(self.block_edge)
        if e <= 0 or (e & (e - 1)) != 0:
            raise ValueError("block_edge must be a positive power of two")
        if self.truncation is not None and self.truncation < self.voxel_size:
            raise ValueError("truncation must be at least one voxel")
        if self.max_weight < 1:
            raise ValueError("max_weight must be at least 1")
        if not (0 < self.depth_min < self.depth_max):
            raise ValueError("need 0 < depth_min < depth_max")

    def resolved_truncation(self) -> float:
        return 4.0 * self.voxel_size if self.truncation is None else float(self.truncation)


@dataclass
class KeyframePacket:
    """Everything needed to (re-)integrate one keyframe.

    ``depth`` is metric with zeros marking invalid samples; ``pose`` is the
    camera-to-world transform at capture time and is refreshed from the map
    on re-integration.
    """

    kid: int
    pose: SE3
    map_version: int
    depth: np.ndarray
    color: Optional[np.ndarray] = None


class VoxelBlock:
    """One cubical brick of voxels, stored flat in x-major order."""

    __slots__ = ("coord", "tsdf", "weight", "rgb", "rgb_n")

    def __init__(self, coord: BlockCoord, edge: int):
        n = edge ** 3
        self.coord = coord
        self.tsdf = np.zeros(n)
        self.weight = np.zeros(n)
        self.rgb = np.zeros((n, 3))
        self.rgb_n = np.zeros(n)


class BlockHash:
    """Open-addressing hash table keyed by integer block coordinates.

    Linear probing over a power-of-two table; grows when the load factor
    would exceed 0.75.  Keys are never deleted individually (the volume is
    only ever cleared wholesale), so no tombstones.
    """

    __slots__ = ("_keys", "_values", "_mask", "size")

    def __init__(self, capacity: int = 64):
        cap = 1 << max(4, int(capacity - 1).bit_length())
        self._keys: List[Optional[BlockCoord]] = [None] * cap
        self._values: List[Optional[VoxelBlock]] = [None] * cap
        self._mask = cap - 1
        self.size = 0

    @property
    def capacity(self) -> int:
        return self._mask + 1

    @staticmethod
    def hash_key(key: BlockCoord) -> int:
        return (key[0] * HASH_P1) ^ (key[1] * HASH_P2) ^ (key[2] * HASH_P3)

    def _probe(self, key: BlockCoord) -> int:
        keys = self._keys
        mask = self._mask
        i = ((key[0] * HASH_P1) ^ (key[1] * HASH_P2) ^ (key[2] * HASH_P3)) & mask
        while True:
            k = keys[i]
            if k is None or k == key:
                return i
            i = (i + 1) & mask

    def get(self, key: BlockCoord) -> Optional[VoxelBlock]:
        i = self._probe(key)
        return self._values[i] if self._keys[i] is not None else None

    def put(self, key: BlockCoord, value: VoxelBlock):
        i = self._probe(key)
        if self._keys[i] is None:
            if (self.size + 1) > MAX_LOAD_FACTOR * (self._mask + 1):
                self._grow()
                i = self._probe(key)
            self._keys[i] = key
            self.size += 1
        self._values[i] = value

    def _grow(self):
        old = [(k, v) for k, v in zip(self._keys, self._values) if k is not None]
        cap = (self._mask + 1) * 2
        self._keys = [None] * cap
        self._values = [None] * cap
        self._mask = cap - 1
        for k, v in old:
            j = self._probe(k)
            self._keys[j] = k
            self._values[j] = v

    def __contains__(self, key: BlockCoord) -> bool:
        return self._keys[self._probe(key)] is not None

    def __len__(self) -> int:
        return self.size

    def items(self) -> Iterator[Tuple[BlockCoord, VoxelBlock]]:
        for k, v in zip(self._keys, self._values):
            if k is not None:
                yield k, v


class VoxelVolume:
    """Hashed collection of voxel blocks plus the retained keyframe packets."""

    def __init__(self, config: Optional[TsdfConfig] = None):
        self.config = config or TsdfConfig()
        self.voxel_size = float(self.config.voxel_size)
        self.truncation = self.config.resolved_truncation()
        self.block_edge = int(self.config.block_edge)
        self.blocks = BlockHash()
        self.version = -1  # newest map version folded into the volume
        self.retained: Dict[int, Tuple[KeyframePacket, CameraModel]] = {}
        e = self.block_edge
        r = np.arange(e)
        idx = np.stack(np.meshgrid(r, r, r, indexing="ij"), axis=-1).reshape(-1, 3)
        self._local_centers = (idx + 0.5) * self.voxel_size

    @property
    def block_size(self) -> float:
        return self.block_edge * self.voxel_size

    def get_or_create_block(self, coord: BlockCoord) -> VoxelBlock:
        b = self.blocks.get(coord)
        if b is None:
            b = VoxelBlock(coord, self.block_edge)
            self.blocks.put(coord, b)
        return b

    def voxel_centers(self, coord: BlockCoord) -> np.ndarray:
        """World-space centers of every voxel in the block, flat order."""
        base = np.asarray(coord, dtype=float) * self.block_size
        return base + self._local_centers

    def sorted_blocks(self) -> List[Tuple[BlockCoord, VoxelBlock]]:
        return sorted(self.blocks.items(), key=lambda kv: kv[0])

    def clear_blocks(self):
        self.blocks = BlockHash()


def _pack_coords(coords: np.ndarray) -> np.ndarray:
    c = coords + _PACK_OFFSET
    return (c[:, 0] << 42) + (c[:, 1] << 21) + c[:, 2]


def _unpack_coords(keys: np.ndarray) -> np.ndarray:
    m = (1 << 21) - 1
    out = np.stack([(keys >> 42) & m, (keys >> 21) & m, keys & m], axis=1)
    return out - _PACK_OFFSET


def _covered_block_coords(volume: VoxelVolume, camera: CameraModel,
                          us: np.ndarray, vs: np.ndarray, ds: np.ndarray,
                          pose: SE3) -> np.ndarray:
    """Block coordinates covering the truncation band of the depth samples.

    Samples each pixel's ray segment [d - trunc, d + trunc] at half-block
    steps and dilates by a half-width that absorbs the step quantization, the
    voxel radius and the nearest-pixel ray mismatch, so every voxel that can
    pass the integration predicate lands in a returned block.  Over-coverage
    is harmless: the per-voxel predicate decides the actual updates.
    """
    cfg = volume.config
    trunc = volume.truncation
    bs = volume.block_size
    rays = camera.backproject(us.astype(float), vs.astype(float), 1.0)
    s0 = np.maximum(ds - trunc, 1e-4)
    s1 = ds + trunc
    step = 0.5 * bs
    n_steps = max(2, int(np.ceil(2.0 * trunc / step)) + 1)
    ts = np.linspace(0.0, 1.0, n_steps)
    ss = s0[:, None] + (s1 - s0)[:, None] * ts[None, :]
    pts_cam = rays[:, None, :] * ss[:, :, None]
    pts_w = pose.transform(pts_cam.reshape(-1, 3))

    half = (0.5 * (2.0 * trunc) / (n_steps - 1) + volume.voxel_size
            + 0.75 * (cfg.depth_max + trunc) / min(camera.fx, camera.fy) + 1e-4)
    base = np.floor((pts_w - half) / bs).astype(np.int64)
    m = int(2.0 * half / bs) + 2
    r = np.arange(m)
    offs = np.stack(np.meshgrid(r, r, r, indexing="ij"), axis=-1).reshape(-1, 3)
    cand = (base[:, None, :] + offs[None, :, :]).reshape(-1, 3)
    keys = np.unique(_pack_coords(cand))
    return _unpack_coords(keys)


def integrate(volume: VoxelVolume, packet: KeyframePacket,
              camera: CameraModel) -> int:
    """Fuse one keyframe packet into the volume; returns touched block count.

    Every voxel in the camera frustum whose projective signed distance
    ``depth(u, v) - z`` lies within the truncation band receives a running
    mean update with unit weight increment, capped at ``max_weight``; colors
    keep their own uncapped running mean.  The packet is retained (keyed by
    keyframe id) for later re-integration.
    """
    if packet.pose is None:
        raise ValueError("keyframe packet has no pose")
    cfg = volume.config
    trunc = volume.truncation
    depth = np.asarray(packet.depth, dtype=float)
    h, w = depth.shape
    valid = (depth > 0) & (depth >= cfg.depth_min) & (depth <= cfg.depth_max)
    volume.retained[packet.kid] = (packet, camera)
    volume.version = max(volume.version, int(packet.map_version))
    if not valid.any():
        log.info("keyframe %d: no valid depth, 0 blocks touched", packet.kid)
        return 0

    vs, us = np.nonzero(valid)
    coords = _covered_block_coords(volume, camera, us, vs, depth[vs, us], packet.pose)

    pose_inv = packet.pose.inverse()
    color = None
    if packet.color is not None:
        color = np.asarray(packet.color)
    touched = 0
    allocated = 0
    for coord in map(tuple, coords):
        existing = coord in volume.blocks
        block = volume.get_or_create_block(coord)
        allocated += not existing
        centers = pose_inv.transform(volume.voxel_centers(coord))
        z = centers[:, 2]
        uv, _ = camera.project(centers)
        ui = np.rint(uv[:, 0]).astype(int)
        vi = np.rint(uv[:, 1]).astype(int)
        inb = (z > 1e-9) & (ui >= 0) & (ui < w) & (vi >= 0) & (vi < h)
        ui_c = np.where(inb, ui, 0)
        vi_c = np.where(inb, vi, 0)
        dsamp = depth[vi_c, ui_c]
        sdf = dsamp - z
        upd = inb & valid[vi_c, ui_c] & (np.abs(sdf) <= trunc)
        if not upd.any():
            continue
        s = np.clip(sdf[upd], -trunc, trunc) / trunc
        w0 = block.weight[upd]
        block.tsdf[upd] = (w0 * block.tsdf[upd] + s) / (w0 + 1.0)
        block.weight[upd] = np.minimum(w0 + 1.0, cfg.max_weight)
        if color is not None:
            c = color[vi_c, ui_c][upd].astype(float)
            n0 = block.rgb_n[upd]
            block.rgb[upd] = (n0[:, None] * block.rgb[upd] + c) / (n0[:, None] + 1.0)
            block.rgb_n[upd] = n0 + 1.0
        touched += 1
    log.info("keyframe %d: touched %d blocks (%d newly allocated)",
             packet.kid, touched, allocated)
    return touched


def reintegrate(volume: VoxelVolume, smap) -> VoxelVolume:
    """Rebuild the volume from retained packets with the map's current poses.

    Packets whose keyframe survived in the map get their pose snapshot
    refreshed; packets of culled keyframes replay with the last snapshot.
    Replaying through the ordinary integration path makes the result
    identical to a fresh integration under the final poses.
    """
    entries = list(volume.retained.values())
    for packet, _ in entries:
        kf = smap.keyframes.get(packet.kid)
        if kf is not None:
            packet.pose = kf.pose.copy()
    volume.clear_blocks()
    volume.retained = {}
    volume.version = -1
    for packet, camera in entries:
        integrate(volume, packet, camera)
    volume.version = max(volume.version, int(smap.version))
    log.info("reintegrated %d packets at map version %d: %d blocks",
             len(entries), volume.version, len(volume.blocks))
    return volume


def extract_pointcloud(volume: VoxelVolume) -> Tuple[np.ndarray, np.ndarray]:
    """Colored centers of observed voxels near the zero crossing.

    Returns ``(points (N, 3) float, colors (N, 3) uint8)``; voxels qualify
    when weight >= 1 and |tsdf| < 0.5 * voxel_size / truncation.
    """
    gate = 0.5 * volume.voxel_size / volume.truncation
    pts, cols = [], []
    for coord, block in volume.sorted_blocks():
        m = (block.weight >= 1.0) & (np.abs(block.tsdf) < gate)
        if not m.any():
            continue
        pts.append(volume.voxel_centers(coord)[m])
        c = np.zeros((int(m.sum()), 3))
        seen = block.rgb_n[m] > 0
        c[seen] = block.rgb[m][seen]
        cols.append(np.clip(np.rint(c), 0, 255).astype(np.uint8))
    if not pts:
        return np.zeros((0, 3)), np.zeros((0, 3), dtype=np.uint8)
    return np.concatenate(pts), np.concatenate(cols)
