"""Marching-cubes tables, stitched block meshing, and binary PLY export."""

from collections import Counter

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from slamkit.camera import CameraModel
from slamkit.geometry import SE3
from slamkit.meshing import (EDGE_TABLE, TRI_TABLE, _CORNER_OFFSETS,
                             _EDGE_CORNERS, extract_mesh, marching_cubes,
                             write_mesh_ply, write_pointcloud_ply)
from slamkit.tsdf import KeyframePacket, TsdfConfig, VoxelVolume, integrate

from test_tsdf import CAM, _lookat, _plane_packet, _sphere_depth


def _edge_use(faces):
    directed = Counter()
    for a, b, c in np.asarray(faces):
        directed[(a, b)] += 1
        directed[(b, c)] += 1
        directed[(c, a)] += 1
    return directed


def _assert_closed(faces):
    """Every directed edge once, every undirected edge twice: a closed,
    consistently wound surface."""
    directed = _edge_use(faces)
    assert all(v == 1 for v in directed.values())
    undirected = Counter(tuple(sorted(e)) for e in directed)
    assert all(v == 2 for v in undirected.values())
    return undirected


def _triangle_normals(verts, faces):
    tri = verts[np.asarray(faces)]
    return np.cross(tri[:, 1] - tri[:, 0], tri[:, 2] - tri[:, 0])


def _signed_volume(verts, faces):
    tri = verts[np.asarray(faces)]
    return np.einsum("ij,ij->i", tri[:, 0],
                     np.cross(tri[:, 1], tri[:, 2])).sum() / 6.0


def _sphere_field(n=40, radius=12.0, center=None):
    center = np.full(3, n / 2.0) if center is None else np.asarray(center)
    r = np.arange(n)
    grid = np.stack(np.meshgrid(r, r, r, indexing="ij"), -1) + 0.5
    return np.linalg.norm(grid - center, axis=-1) - radius, center


# -- generated tables ---------------------------------------------------------

def test_tables_reference_only_crossed_edges():
    assert len(TRI_TABLE) == 256 and len(EDGE_TABLE) == 256
    assert TRI_TABLE[0] == [] and TRI_TABLE[255] == []
    for config in range(256):
        inside = [(config >> i) & 1 for i in range(8)]
        crossed = {e for e, (a, b) in enumerate(_EDGE_CORNERS)
                   if inside[a] != inside[b]}
        used = set(TRI_TABLE[config])
        assert used <= crossed
        assert EDGE_TABLE[config] == sum(1 << e for e in used)
        assert len(TRI_TABLE[config]) % 3 == 0
        assert len(TRI_TABLE[config]) // 3 <= 5


def test_complementary_configs_share_edges():
    for config in range(256):
        assert EDGE_TABLE[config] == EDGE_TABLE[255 - config]
        assert (len(TRI_TABLE[config]) > 0) == (len(TRI_TABLE[255 - config]) > 0)


def test_every_config_meshes_closed_against_uniform_surroundings():
    # a lone cube with an arbitrary sign pattern, embedded in free space,
    # must triangulate into a closed consistently-wound surface together
    # with its 26 neighbours
    for config in range(1, 256):
        field = np.ones((4, 4, 4))
        for bit, (dx, dy, dz) in enumerate(_CORNER_OFFSETS):
            if (config >> bit) & 1:
                field[1 + dx, 1 + dy, 1 + dz] = -1.0
        verts, faces, _ = marching_cubes(field)
        assert len(faces) > 0, config
        _assert_closed(faces)


def test_single_inside_corner_mesh_faces_away_from_it():
    for bit in range(8):
        field = np.ones((4, 4, 4))
        corner = 1 + _CORNER_OFFSETS[bit]
        field[tuple(corner)] = -1.0
        verts, faces, _ = marching_cubes(field)
        normals = _triangle_normals(verts, faces)
        inside_pt = corner + 0.5
        tri_centers = verts[np.asarray(faces)].mean(axis=1)
        assert np.all(np.einsum("ij,ij->i", normals, tri_centers - inside_pt) > 0)


# -- dense-grid marching ------------------------------------------------------

def test_sphere_field_mesh_metrics():
    field, center = _sphere_field()
    verts, faces, _ = marching_cubes(field)
    undirected = _assert_closed(faces)
    # genus zero: V - E + F = 2
    assert len(verts) - len(undirected) + len(faces) == 2
    rad = np.linalg.norm(verts - center, axis=1)
    assert np.abs(rad - 12.0).mean() < 0.05
    assert np.abs(rad - 12.0).max() < 0.2
    normals = _triangle_normals(verts, faces)
    outward = verts[np.asarray(faces)].mean(axis=1) - center
    assert np.all(np.einsum("ij,ij->i", normals, outward) > 0)
    assert _signed_volume(verts, faces) == pytest.approx(
        4.0 / 3.0 * np.pi * 12.0 ** 3, rel=0.02)
    assert 0.5 * np.linalg.norm(normals, axis=1).sum() == pytest.approx(
        4.0 * np.pi * 12.0 ** 2, rel=0.02)


def test_plane_field_normals_and_level():
    n = 12
    k = np.arange(n) + 0.5
    field = np.broadcast_to(k - 7.3, (n, n, n)).copy()
    verts, faces, _ = marching_cubes(field)
    assert len(faces) > 0
    np.testing.assert_allclose(verts[:, 2], 7.3, atol=1e-9)
    normals = _triangle_normals(verts, faces)
    normals = normals / np.linalg.norm(normals, axis=1, keepdims=True)
    np.testing.assert_allclose(normals, np.tile([0.0, 0.0, 1.0], (len(normals), 1)),
                               atol=1e-9)


def test_all_positive_field_meshes_empty():
    verts, faces, cols = marching_cubes(np.ones((5, 5, 5)))
    assert verts.shape == (0, 3) and faces.shape == (0, 3) and cols.shape == (0, 3)


def test_valid_mask_suppresses_unobserved_cubes():
    field, center = _sphere_field(n=24, radius=7.0)
    valid = np.ones(field.shape, dtype=bool)
    valid[:, :, 14:] = False
    verts, faces, _ = marching_cubes(field, valid=valid)
    assert len(faces) > 0
    assert np.all(verts[:, 2] <= 14.0)
    # the cut leaves an open rim: some undirected edges are used only once
    undirected = Counter(tuple(sorted(e)) for e in _edge_use(faces))
    assert any(v == 1 for v in undirected.values())


@settings(deadline=None, max_examples=20)
@given(st.integers(0, 2 ** 16))
def test_random_blob_fields_mesh_closed(seed):
    rng = np.random.default_rng(seed)
    n = 20
    r = np.arange(n)
    grid = np.stack(np.meshgrid(r, r, r, indexing="ij"), -1) + 0.5
    field = np.full((n, n, n), 0.5)
    for _ in range(rng.integers(1, 4)):
        c = rng.uniform(6.0, 14.0, 3)
        sigma = rng.uniform(2.0, 4.0)
        field -= np.exp(-np.sum((grid - c) ** 2, axis=-1) / sigma ** 2)
    assert np.all(field[0] > 0) and np.all(field[-1] > 0)
    verts, faces, _ = marching_cubes(field)
    if len(faces) == 0:
        return
    _assert_closed(faces)
    assert _signed_volume(verts, faces) > 0


# -- block-stitched extraction ------------------------------------------------

def _poke_sphere_volume(center, radius=0.3, voxel=0.02, band=6):
    """Write an analytic sphere SDF straight into volume blocks."""
    volume = VoxelVolume(TsdfConfig(voxel_size=voxel))
    trunc = volume.truncation
    reach = radius + band * voxel
    lo = np.floor((np.asarray(center) - reach) / volume.block_size).astype(int)
    hi = np.floor((np.asarray(center) + reach) / volume.block_size).astype(int)
    for bx in range(lo[0], hi[0] + 1):
        for by in range(lo[1], hi[1] + 1):
            for bz in range(lo[2], hi[2] + 1):
                coord = (bx, by, bz)
                sdf = (np.linalg.norm(volume.voxel_centers(coord) - center, axis=1)
                       - radius)
                inband = np.abs(sdf) < band * voxel
                if not inband.any():
                    continue
                block = volume.get_or_create_block(coord)
                block.tsdf[inband] = np.clip(sdf[inband], -trunc, trunc) / trunc
                block.weight[inband] = 1.0
    return volume


def test_block_stitched_mesh_matches_dense_grid():
    center = np.array([0.013, -0.021, 0.007])  # straddles block boundaries
    volume = _poke_sphere_volume(center)
    v_blocks, f_blocks, _ = extract_mesh(volume)
    assert len(f_blocks) > 0

    # assemble the same data into one dense grid with a one-block margin
    coords = np.array([c for c, _ in volume.sorted_blocks()])
    e = volume.block_edge
    gmin = coords.min(axis=0) * e - 1
    shape = (coords.max(axis=0) + 1) * e + 1 - gmin
    values = np.ones(tuple(shape))
    valid = np.zeros(tuple(shape), dtype=bool)
    for coord, block in volume.sorted_blocks():
        o = np.array(coord) * e - gmin
        sl = tuple(slice(o[i], o[i] + e) for i in range(3))
        values[sl] = block.tsdf.reshape(e, e, e)
        valid[sl] = block.weight.reshape(e, e, e) >= 1.0
    v_dense, f_dense, _ = marching_cubes(values, valid=valid,
                                         origin=tuple(gmin),
                                         spacing=volume.voxel_size)
    assert len(f_blocks) == len(f_dense)
    key = lambda v: sorted(map(tuple, np.round(v, 9)))
    assert key(v_blocks) == key(v_dense)
    # stitched sphere is fully observed inside the band: closed surface
    _assert_closed(f_blocks)
    rad = np.linalg.norm(v_blocks - center, axis=1)
    assert np.abs(rad - 0.3).max() < 0.5 * volume.voxel_size


def test_extract_mesh_empty_volume():
    verts, faces, cols = extract_mesh(VoxelVolume())
    assert verts.shape == (0, 3) and faces.shape == (0, 3)
    assert cols.shape == (0, 3) and cols.dtype == np.uint8


def test_extract_mesh_integrated_plane_normals_within_5_degrees():
    volume = VoxelVolume()
    integrate(volume, _plane_packet(1.005, color=(90, 140, 30)), CAM)
    verts, faces, cols = extract_mesh(volume)
    assert len(faces) > 0
    assert np.all(np.abs(verts[:, 2] - 1.005) < volume.voxel_size)
    normals = _triangle_normals(verts, faces)
    normals = normals / np.linalg.norm(normals, axis=1, keepdims=True)
    # free space (positive tsdf) lies toward the camera: normals face -z
    cosines = normals @ np.array([0.0, 0.0, -1.0])
    assert np.all(cosines > np.cos(np.deg2rad(5.0)))
    assert np.all(np.abs(cols.astype(int) - [90, 140, 30]) <= 1)


def test_extract_mesh_integrated_sphere_radial_error():
    cam = CameraModel(70.0, 70.0, 40.0, 30.0, 80, 60)
    volume = VoxelVolume(TsdfConfig())
    center, radius = np.zeros(3), 0.5
    for kid in range(10):
        a = 2 * np.pi * kid / 10
        el = 0.5 if kid % 2 else -0.5
        eye = 1.6 * np.array([np.cos(a) * np.cos(el),
                              np.sin(a) * np.cos(el), np.sin(el)])
        pose = _lookat(eye, center)
        integrate(volume, KeyframePacket(kid, pose, 0,
                                         _sphere_depth(cam, pose, center, radius)),
                  cam)
    verts, faces, _ = extract_mesh(volume)
    assert len(verts) > 300
    err = np.abs(np.linalg.norm(verts - center, axis=1) - radius)
    assert err.mean() < volume.voxel_size


def test_extract_mesh_is_deterministic():
    volume = _poke_sphere_volume(np.array([0.0, 0.0, 0.0]), radius=0.2)
    v1, f1, c1 = extract_mesh(volume)
    v2, f2, c2 = extract_mesh(volume)
    np.testing.assert_array_equal(v1, v2)
    np.testing.assert_array_equal(f1, f2)
    np.testing.assert_array_equal(c1, c2)


# -- PLY export ---------------------------------------------------------------

_VERTEX_SIZE = 3 * 4 + 3  # float32 xyz + uint8 rgb


def _read_ply(path):
    with open(path, "rb") as f:
        data = f.read()
    end = data.index(b"end_header\n") + len(b"end_header\n")
    header = data[:end].decode("ascii").splitlines()
    return header, data[end:]


def test_pointcloud_ply_binary_roundtrip(tmp_path):
    rng = np.random.default_rng(11)
    pts = rng.normal(size=(57, 3))
    cols = rng.integers(0, 256, size=(57, 3)).astype(np.uint8)
    path = tmp_path / "cloud.ply"
    write_pointcloud_ply(path, pts, cols)
    header, body = _read_ply(path)
    assert header[0] == "ply"
    assert header[1] == "format binary_little_endian 1.0"
    assert header[2] == "element vertex 57"
    assert header[3:9] == ["property float x", "property float y",
                           "property float z", "property uchar red",
                           "property uchar green", "property uchar blue"]
    assert len(body) == 57 * _VERTEX_SIZE
    rec = np.frombuffer(body, dtype=np.dtype(
        [("x", "<f4"), ("y", "<f4"), ("z", "<f4"),
         ("red", "u1"), ("green", "u1"), ("blue", "u1")]))
    got = np.stack([rec["x"], rec["y"], rec["z"]], axis=1)
    np.testing.assert_array_equal(got, pts.astype(np.float32))
    np.testing.assert_array_equal(
        np.stack([rec["red"], rec["green"], rec["blue"]], axis=1), cols)


def test_mesh_ply_binary_roundtrip(tmp_path):
    field, _ = _sphere_field(n=12, radius=3.5)
    verts, faces, cols = marching_cubes(field)
    path = tmp_path / "mesh.ply"
    write_mesh_ply(path, verts, faces, cols)
    header, body = _read_ply(path)
    assert "element vertex %d" % len(verts) in header
    assert "element face %d" % len(faces) in header
    assert "property list uchar int vertex_indices" in header
    vbytes = len(verts) * _VERTEX_SIZE
    rec = np.frombuffer(body[:vbytes], dtype=np.dtype(
        [("x", "<f4"), ("y", "<f4"), ("z", "<f4"),
         ("red", "u1"), ("green", "u1"), ("blue", "u1")]))
    np.testing.assert_array_equal(rec["x"], verts[:, 0].astype(np.float32))
    frec = np.frombuffer(body[vbytes:], dtype=np.dtype(
        [("n", "u1"), ("v", "<i4", (3,))]))
    assert np.all(frec["n"] == 3)
    np.testing.assert_array_equal(frec["v"], faces)
