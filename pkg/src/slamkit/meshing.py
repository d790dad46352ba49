"""Surface extraction from sparse TSDF volumes: marching cubes + PLY export.

The per-configuration triangle tables are generated at import time by
walking each configuration's isosurface loops across the cube faces.  On a
face with four sign crossings the surface is always routed around the
inside corners, a choice that depends only on that face's sign pattern, so
any two cubes sharing a face triangulate their common boundary identically
and the mesh closes across cube (and voxel-block) boundaries.  Loops are
oriented so triangle normals point from negative values (inside) toward
positive (free space).

Blocks are meshed one at a time over the cubes whose base voxel they own;
corner samples falling into the seven positive-neighbour blocks are gathered
from the hash, and vertices are deduplicated by their global lattice edge,
which stitches the per-block patches into one surface.
"""

import itertools
import logging
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np

from .tsdf import VoxelVolume

log = logging.getLogger("slamkit.meshing")

_CORNER_OFFSETS = np.array([
    [0, 0, 0], [1, 0, 0], [1, 1, 0], [0, 1, 0],
    [0, 0, 1], [1, 0, 1], [1, 1, 1], [0, 1, 1],
], dtype=np.int64)

_EDGE_CORNERS = (
    (0, 1), (1, 2), (2, 3), (3, 0),
    (4, 5), (5, 6), (6, 7), (7, 4),
    (0, 4), (1, 5), (2, 6), (3, 7),
)

# Faces as corner cycles; consecutive pairs are the face's edges.
_FACES = (
    (0, 1, 2, 3), (4, 5, 6, 7),
    (0, 1, 5, 4), (1, 2, 6, 5),
    (2, 3, 7, 6), (3, 0, 4, 7),
)

_EDGE_INDEX = {frozenset(c): i for i, c in enumerate(_EDGE_CORNERS)}

_EDGE_MIDPOINTS = np.array(
    [(_CORNER_OFFSETS[a] + _CORNER_OFFSETS[b]) / 2.0 for a, b in _EDGE_CORNERS])


def _face_links(inside: Sequence[int], face: Sequence[int]) -> List[Tuple[int, int]]:
    """Crossed-edge pairs connected by the surface across one face."""
    bits = [inside[c] for c in face]
    edges = [_EDGE_INDEX[frozenset((face[i], face[(i + 1) % 4]))] for i in range(4)]
    crossed = [i for i in range(4) if bits[i] != bits[(i + 1) % 4]]
    if len(crossed) == 2:
        return [(edges[crossed[0]], edges[crossed[1]])]
    if len(crossed) == 4:
        # ambiguous face: wrap each inside corner so the routing is a
        # function of the face's sign pattern alone
        return [(edges[(i - 1) % 4], edges[i]) for i in range(4) if bits[i]]
    return []


def _cycles(adj: Dict[int, List[int]]) -> List[List[int]]:
    seen = set()
    out = []
    for start in sorted(adj):
        if start in seen:
            continue
        cyc = [start]
        seen.add(start)
        prev, cur = -1, start
        while True:
            a, b = adj[cur]
            nxt = b if a == prev else a
            if nxt == start:
                break
            cyc.append(nxt)
            seen.add(nxt)
            prev, cur = cur, nxt
        out.append(cyc)
    return out


def _oriented(cycle: List[int], inside: Sequence[int]) -> List[int]:
    pts = _EDGE_MIDPOINTS[cycle]
    normal = np.sum(np.cross(pts, np.roll(pts, -1, axis=0)), axis=0)
    outward = np.zeros(3)
    for e in cycle:
        a, b = _EDGE_CORNERS[e]
        if inside[a]:
            outward += _CORNER_OFFSETS[b] - _CORNER_OFFSETS[a]
        else:
            outward += _CORNER_OFFSETS[a] - _CORNER_OFFSETS[b]
    return cycle[::-1] if float(normal @ outward) < 0 else cycle


def _build_tables() -> Tuple[np.ndarray, List[List[int]]]:
    edge_table = np.zeros(256, dtype=np.int32)
    tri_table: List[List[int]] = []
    for config in range(256):
        inside = [(config >> i) & 1 for i in range(8)]
        adj: Dict[int, List[int]] = {}
        for face in _FACES:
            for a, b in _face_links(inside, face):
                adj.setdefault(a, []).append(b)
                adj.setdefault(b, []).append(a)
        assert all(len(p) == 2 for p in adj.values())
        tris: List[int] = []
        mask = 0
        for cyc in _cycles(adj):
            cyc = _oriented(cyc, inside)
            for i in range(1, len(cyc) - 1):
                tris.extend((cyc[0], cyc[i], cyc[i + 1]))
            for e in cyc:
                mask |= 1 << e
        edge_table[config] = mask
        tri_table.append(tris)
    return edge_table, tri_table


EDGE_TABLE, TRI_TABLE = _build_tables()


class _MeshBuilder:
    """Accumulates triangles with vertices deduplicated by global lattice edge."""

    def __init__(self, spacing: float, with_colors: bool):
        self.spacing = spacing
        self.with_colors = with_colors
        self.key_index: Dict[Tuple[int, int, int, int], int] = {}
        self.verts: List[np.ndarray] = []
        self.cols: List[np.ndarray] = []
        self.faces: List[Tuple[int, int, int]] = []

    def _vertex(self, origin, base, edge, values, colors) -> int:
        a, b = _EDGE_CORNERS[edge]
        ca = base + _CORNER_OFFSETS[a]
        cb = base + _CORNER_OFFSETS[b]
        axis = int(np.nonzero(ca != cb)[0][0])
        lo, hi = (ca, cb) if ca[axis] < cb[axis] else (cb, ca)
        key = (origin[0] + int(lo[0]), origin[1] + int(lo[1]),
               origin[2] + int(lo[2]), axis)
        idx = self.key_index.get(key)
        if idx is not None:
            return idx
        vlo = values[lo[0], lo[1], lo[2]]
        vhi = values[hi[0], hi[1], hi[2]]
        t = vlo / (vlo - vhi)
        pos = (np.asarray(origin) + lo + 0.5).astype(float)
        pos[axis] += t
        idx = len(self.verts)
        self.key_index[key] = idx
        self.verts.append(pos * self.spacing)
        if self.with_colors:
            clo = colors[lo[0], lo[1], lo[2]]
            chi = colors[hi[0], hi[1], hi[2]]
            self.cols.append(clo + t * (chi - clo))
        return idx

    def march(self, values: np.ndarray, valid: np.ndarray,
              origin: Tuple[int, int, int], colors: Optional[np.ndarray],
              n_cubes: Optional[Tuple[int, int, int]] = None):
        """March over the cubes of one corner-value grid.

        Cube (i, j, k) reads corners (i..i+1, j..j+1, k..k+1) and requires
        all eight observed (valid).  origin is the global lattice coordinate
        of grid corner (0, 0, 0).
        """
        inside = values < 0
        c = [s - 1 for s in values.shape] if n_cubes is None else list(n_cubes)
        cfg = np.zeros(c, dtype=np.int32)
        ok = np.ones(c, dtype=bool)
        for bit, (dx, dy, dz) in enumerate(_CORNER_OFFSETS):
            sl = (slice(dx, dx + c[0]), slice(dy, dy + c[1]), slice(dz, dz + c[2]))
            cfg |= inside[sl].astype(np.int32) << bit
            ok &= valid[sl]
        active = ok & (cfg != 0) & (cfg != 255)
        for i, j, k in np.argwhere(active):
            tris = TRI_TABLE[cfg[i, j, k]]
            base = np.array([i, j, k], dtype=np.int64)
            for n in range(0, len(tris), 3):
                v0 = self._vertex(origin, base, tris[n], values, colors)
                v1 = self._vertex(origin, base, tris[n + 1], values, colors)
                v2 = self._vertex(origin, base, tris[n + 2], values, colors)
                if v0 != v1 and v1 != v2 and v2 != v0:
                    self.faces.append((v0, v1, v2))

    def arrays(self) -> Tuple[np.ndarray, np.ndarray, np.ndarray]:
        if not self.verts:
            return (np.zeros((0, 3)), np.zeros((0, 3), dtype=np.int32),
                    np.zeros((0, 3), dtype=np.uint8))
        verts = np.array(self.verts)
        faces = np.array(self.faces, dtype=np.int32)
        if self.with_colors:
            cols = np.clip(np.rint(np.array(self.cols)), 0, 255).astype(np.uint8)
        else:
            cols = np.zeros((len(verts), 3), dtype=np.uint8)
        return verts, faces, cols


def marching_cubes(values: np.ndarray, valid: Optional[np.ndarray] = None,
                   origin: Tuple[int, int, int] = (0, 0, 0),
                   spacing: float = 1.0,
                   colors: Optional[np.ndarray] = None):
    """Triangulate the zero level set of a dense corner-value grid.

    Lattice point (i, j, k) sits at world (origin + (i, j, k) + 0.5) *
    spacing, matching voxel-center indexing.  Returns (vertices (N, 3),
    faces (M, 3) int32, colors (N, 3) uint8).
    """
    values = np.asarray(values, dtype=float)
    if valid is None:
        valid = np.ones(values.shape, dtype=bool)
    builder = _MeshBuilder(spacing, colors is not None)
    builder.march(values, valid, tuple(int(o) for o in origin), colors)
    return builder.arrays()


def _gather_grid(volume: VoxelVolume, coord):
    """(edge+1)^3 corner samples for one block, spilling into +1 neighbours."""
    e = volume.block_edge
    vals = np.zeros((e + 1, e + 1, e + 1))
    valid = np.zeros((e + 1, e + 1, e + 1), dtype=bool)
    cols = np.zeros((e + 1, e + 1, e + 1, 3))
    for off in itertools.product((0, 1), repeat=3):
        nb = volume.blocks.get((coord[0] + off[0], coord[1] + off[1],
                                coord[2] + off[2]))
        if nb is None:
            continue
        dst = tuple(slice(e, e + 1) if o else slice(0, e) for o in off)
        src = tuple(slice(0, 1) if o else slice(0, e) for o in off)
        vals[dst] = nb.tsdf.reshape(e, e, e)[src]
        valid[dst] = nb.weight.reshape(e, e, e)[src] >= 1.0
        cols[dst] = nb.rgb.reshape(e, e, e, 3)[src]
    return vals, valid, cols


def extract_mesh(volume: VoxelVolume):
    """Triangle mesh of the volume's zero crossing, stitched across blocks.

    Each block marches the cubes whose base voxel it owns; shared vertices
    are merged by global edge identity so patches join watertight wherever
    all corner voxels are observed.  Returns (vertices, faces, colors).
    """
    e = volume.block_edge
    builder = _MeshBuilder(volume.voxel_size, True)
    for coord, _ in volume.sorted_blocks():
        vals, valid, cols = _gather_grid(volume, coord)
        if not valid.any():
            continue
        origin = (coord[0] * e, coord[1] * e, coord[2] * e)
        builder.march(vals, valid, origin, cols, n_cubes=(e, e, e))
    verts, faces, cols = builder.arrays()
    log.info("extracted mesh: %d vertices, %d faces from %d blocks",
             len(verts), len(faces), len(volume.blocks))
    return verts, faces, cols


# -- PLY export ---------------------------------------------------------------

_VERTEX_DTYPE = np.dtype([("x", "<f4"), ("y", "<f4"), ("z", "<f4"),
                          ("red", "u1"), ("green", "u1"), ("blue", "u1")])
_FACE_DTYPE = np.dtype([("n", "u1"), ("v", "<i4", (3,))])


def _vertex_records(points, colors) -> np.ndarray:
    points = np.asarray(points, dtype=np.float32)
    colors = np.asarray(colors, dtype=np.uint8)
    rec = np.empty(len(points), dtype=_VERTEX_DTYPE)
    for i, name in enumerate(("x", "y", "z")):
        rec[name] = points[:, i]
    for i, name in enumerate(("red", "green", "blue")):
        rec[name] = colors[:, i]
    return rec


def _ply_header(n_vertices: int, n_faces: Optional[int]) -> bytes:
    lines = ["ply", "format binary_little_endian 1.0",
             "element vertex %d" % n_vertices,
             "property float x", "property float y", "property float z",
             "property uchar red", "property uchar green", "property uchar blue"]
    if n_faces is not None:
        lines += ["element face %d" % n_faces,
                  "property list uchar int vertex_indices"]
    lines.append("end_header")
    return ("\n".join(lines) + "\n").encode("ascii")


def write_pointcloud_ply(path, points, colors):
    """Binary little-endian PLY: x,y,z float32 + r,g,b uint8 per point."""
    rec = _vertex_records(points, colors)
    with open(path, "wb") as f:
        f.write(_ply_header(len(rec), None))
        f.write(rec.tobytes())


def write_mesh_ply(path, vertices, faces, colors):
    """Binary little-endian PLY mesh with uchar-counted int32 face lists."""
    rec = _vertex_records(vertices, colors)
    frec = np.empty(len(faces), dtype=_FACE_DTYPE)
    frec["n"] = 3
    frec["v"] = np.asarray(faces, dtype=np.int32)
    with open(path, "wb") as f:
        f.write(_ply_header(len(rec), len(frec)))
        f.write(rec.tobytes())
        f.write(frec.tobytes())
