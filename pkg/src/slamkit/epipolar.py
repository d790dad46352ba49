"""Two-view geometry: essential matrix RANSAC, triangulation, P3P, alignment.

All pixel inputs are undistorted pixel coordinates; the camera intrinsics map
them to the unit-focal plane where the minimal solvers operate.
"""

from __future__ import annotations

import numpy as np

from .geometry import SE3, Sim3, orthonormalize_rotation, skew

EIGHT_POINT_MIN = 8
DEFAULT_RANSAC_THRESHOLD_PX = 1.0
DEFAULT_RANSAC_CONFIDENCE = 0.999
DEFAULT_RANSAC_MAX_ITERS = 1000


class DegenerateGeometryError(RuntimeError):
    """Raised when a minimal solver cannot produce a usable model."""


def _to_normalized(camera, uv):
    uv = np.asarray(uv, dtype=float)
    return np.stack([(uv[:, 0] - camera.cx) / camera.fx,
                     (uv[:, 1] - camera.cy) / camera.fy], axis=1)


def _hartley_normalize(pts):
    mean = pts.mean(axis=0)
    centered = pts - mean
    rms = np.sqrt((centered ** 2).sum(axis=1).mean())
    scale = np.sqrt(2.0) / max(rms, 1e-12)
    t = np.array([[scale, 0.0, -scale * mean[0]],
                  [0.0, scale, -scale * mean[1]],
                  [0.0, 0.0, 1.0]])
    return centered * scale, t


def eight_point_essential(xn1, xn2):
    """Essential matrix from >= 8 unit-focal correspondences (x2' E x1 = 0)."""
    if len(xn1) < EIGHT_POINT_MIN:
        raise DegenerateGeometryError("eight-point needs >= 8 correspondences")
    p1, t1 = _hartley_normalize(np.asarray(xn1, dtype=float))
    p2, t2 = _hartley_normalize(np.asarray(xn2, dtype=float))
    x1, y1 = p1[:, 0], p1[:, 1]
    x2, y2 = p2[:, 0], p2[:, 1]
    a = np.stack([x2 * x1, x2 * y1, x2, y2 * x1, y2 * y1, y2, x1, y1,
                  np.ones_like(x1)], axis=1)
    _, _, vt = np.linalg.svd(a)
    f = vt[-1].reshape(3, 3)
    f = t2.T @ f @ t1
    # project onto the essential manifold: singular values (1, 1, 0)
    u, _, vt = np.linalg.svd(f)
    e = u @ np.diag([1.0, 1.0, 0.0]) @ vt
    return e


def sampson_distance_px(e, camera, uv1, uv2):
    """First-order geometric error of x2' E x1 = 0, expressed in pixels."""
    k = camera.k_matrix
    k_inv = np.linalg.inv(k)
    f = k_inv.T @ e @ k_inv
    x1 = np.column_stack([np.asarray(uv1, dtype=float), np.ones(len(uv1))])
    x2 = np.column_stack([np.asarray(uv2, dtype=float), np.ones(len(uv2))])
    fx1 = x1 @ f.T
    ftx2 = x2 @ f
    num = np.sum(x2 * fx1, axis=1) ** 2
    den = fx1[:, 0] ** 2 + fx1[:, 1] ** 2 + ftx2[:, 0] ** 2 + ftx2[:, 1] ** 2
    return np.sqrt(num / np.maximum(den, 1e-18))


def decompose_essential(e):
    """Four (R, t) candidates with ||t|| = 1."""
    u, _, vt = np.linalg.svd(e)
    if np.linalg.det(u) < 0:
        u = -u
    if np.linalg.det(vt) < 0:
        vt = -vt
    w = np.array([[0.0, -1.0, 0.0], [1.0, 0.0, 0.0], [0.0, 0.0, 1.0]])
    r1 = orthonormalize_rotation(u @ w @ vt)
    r2 = orthonormalize_rotation(u @ w.T @ vt)
    t = u[:, 2] / np.linalg.norm(u[:, 2])
    return [(r1, t), (r1, -t), (r2, t), (r2, -t)]


def triangulate_two_view(r, t, xn1, xn2, cond_limit=1e8):
    """Triangulate unit-focal correspondences for cameras [I|0] and [R|t].

    DLT per point; falls back to the ray midpoint when the DLT system is
    ill-conditioned. Returns points in the first camera frame.
    """
    xn1 = np.asarray(xn1, dtype=float)
    xn2 = np.asarray(xn2, dtype=float)
    n = len(xn1)
    p1 = np.hstack([np.eye(3), np.zeros((3, 1))])
    p2 = np.hstack([r, np.asarray(t, dtype=float).reshape(3, 1)])
    a = np.empty((n, 4, 4))
    a[:, 0] = xn1[:, 0, None] * p1[2] - p1[0]
    a[:, 1] = xn1[:, 1, None] * p1[2] - p1[1]
    a[:, 2] = xn2[:, 0, None] * p2[2] - p2[0]
    a[:, 3] = xn2[:, 1, None] * p2[2] - p2[1]
    u_, s, vt = np.linalg.svd(a)
    pts_h = vt[:, -1, :]
    cond = s[:, 0] / np.maximum(s[:, 2], 1e-300)
    w = pts_h[:, 3]
    bad = (cond > cond_limit) | (np.abs(w) < 1e-12)
    pts = pts_h[:, :3] / np.where(np.abs(w) < 1e-12, 1.0, w)[:, None]
    if np.any(bad):
        pts[bad] = _midpoint_triangulate(r, t, xn1[bad], xn2[bad])
    return pts


def _midpoint_triangulate(r, t, xn1, xn2):
    # rays: o1=0, d1=[x1,y1,1]; o2 = -R't (camera-2 centre in frame 1), d2 = R'[x2,y2,1]
    n = len(xn1)
    d1 = np.column_stack([xn1, np.ones(n)])
    d1 /= np.linalg.norm(d1, axis=1, keepdims=True)
    d2 = (np.column_stack([xn2, np.ones(n)]) @ r)
    d2 /= np.linalg.norm(d2, axis=1, keepdims=True)
    o2 = -(r.T @ np.asarray(t, dtype=float))
    out = np.empty((n, 3))
    for i in range(n):
        b = np.array([np.dot(d1[i], o2), np.dot(d2[i], o2)])
        m = np.array([[1.0, -np.dot(d1[i], d2[i])],
                      [np.dot(d1[i], d2[i]), -1.0]])
        try:
            su = np.linalg.solve(m, b)
        except np.linalg.LinAlgError:
            su = np.array([1e6, 1e6])
        out[i] = 0.5 * (d1[i] * su[0] + o2 + d2[i] * su[1])
    return out


def triangulation_angles(r, t, pts):
    """Parallax angle (rad) at each point between the two camera centres."""
    pts = np.asarray(pts, dtype=float)
    c2 = -(np.asarray(r).T @ np.asarray(t, dtype=float))
    v1 = pts
    v2 = pts - c2
    n1 = np.linalg.norm(v1, axis=1)
    n2 = np.linalg.norm(v2, axis=1)
    cosang = np.sum(v1 * v2, axis=1) / np.maximum(n1 * n2, 1e-18)
    return np.arccos(np.clip(cosang, -1.0, 1.0))


def estimate_relative_pose_2d2d(uv1, uv2, camera,
                                threshold_px=DEFAULT_RANSAC_THRESHOLD_PX,
                                confidence=DEFAULT_RANSAC_CONFIDENCE,
                                max_iters=DEFAULT_RANSAC_MAX_ITERS,
                                seed=0):
    """Relative pose from 2D-2D matches: x2 = R x1 + t, ||t|| = 1.

    Essential matrix by normalized eight-point inside RANSAC (Sampson
    residual threshold in pixels), then cheirality-based disambiguation.
    Returns (R, t, inlier_mask).
    """
    uv1 = np.asarray(uv1, dtype=float)
    uv2 = np.asarray(uv2, dtype=float)
    n = len(uv1)
    if n < EIGHT_POINT_MIN:
        raise DegenerateGeometryError("need at least 8 matches")
    xn1 = _to_normalized(camera, uv1)
    xn2 = _to_normalized(camera, uv2)
    rng = np.random.default_rng(seed)

    best_mask = None
    best_count = 0
    needed = int(max_iters)
    it = 0
    while it < needed and it < max_iters:
        sample = rng.choice(n, size=EIGHT_POINT_MIN, replace=False)
        try:
            e = eight_point_essential(xn1[sample], xn2[sample])
        except (DegenerateGeometryError, np.linalg.LinAlgError):
            it += 1
            continue
        mask = sampson_distance_px(e, camera, uv1, uv2) < threshold_px
        count = int(mask.sum())
        if count > best_count:
            best_count = count
            best_mask = mask
            w = count / n
            if w > 0:
                # clamp both ends: w ~ 1 gives log(0), w ~ 0 rounds the
                # failure probability to exactly 1 and log(1) = 0
                p_fail = min(max(1.0 - w ** EIGHT_POINT_MIN, 1e-12),
                             1.0 - 1e-12)
                needed = min(max_iters,
                             int(np.ceil(np.log(1.0 - confidence)
                                         / np.log(p_fail))))
        it += 1

    if best_mask is None or best_count < EIGHT_POINT_MIN:
        raise DegenerateGeometryError("RANSAC found fewer than 8 inliers")

    e = eight_point_essential(xn1[best_mask], xn2[best_mask])
    mask = sampson_distance_px(e, camera, uv1, uv2) < threshold_px
    if mask.sum() < EIGHT_POINT_MIN:
        raise DegenerateGeometryError("refit lost the inlier set")

    r, t, cheirality = _select_pose_by_cheirality(e, xn1[mask], xn2[mask])
    full = np.zeros(n, dtype=bool)
    idx = np.nonzero(mask)[0]
    full[idx[cheirality]] = True
    if full.sum() < EIGHT_POINT_MIN:
        raise DegenerateGeometryError("cheirality kept fewer than 8 inliers")
    return r, t / np.linalg.norm(t), full


def _select_pose_by_cheirality(e, xn1, xn2):
    best = None
    for r, t in decompose_essential(e):
        pts = triangulate_two_view(r, t, xn1, xn2)
        z1 = pts[:, 2]
        z2 = (pts @ r.T + t)[:, 2]
        ok = (z1 > 0) & (z2 > 0)
        score = int(ok.sum())
        if best is None or score > best[0]:
            best = (score, r, t, ok)
    _, r, t, ok = best
    return r, t, ok


# ---------------------------------------------------------------------------
# Perspective-3-point (Grunert's quartic) + absolute orientation
# ---------------------------------------------------------------------------

def p3p_solutions(world_pts, bearings):
    """Camera poses (world-to-camera SE3) consistent with 3 point/bearing pairs.

    Grunert's distance quartic followed by rigid alignment; up to 4 solutions.
    """
    pw = np.asarray(world_pts, dtype=float)
    f = np.asarray(bearings, dtype=float)
    f = f / np.linalg.norm(f, axis=1, keepdims=True)

    a = np.linalg.norm(pw[1] - pw[2])
    b = np.linalg.norm(pw[0] - pw[2])
    c = np.linalg.norm(pw[0] - pw[1])
    if min(a, b, c) < 1e-12:
        return []
    cos_alpha = float(np.dot(f[1], f[2]))
    cos_beta = float(np.dot(f[0], f[2]))
    cos_gamma = float(np.dot(f[0], f[1]))

    a2, b2, c2 = a * a, b * b, c * c
    q = (a2 - c2) / b2
    p = (a2 + c2) / b2
    a4 = (q - 1.0) ** 2 - 4.0 * (c2 / b2) * cos_alpha ** 2
    a3 = 4.0 * (q * (1.0 - q) * cos_beta
                - (1.0 - p) * cos_alpha * cos_gamma
                + 2.0 * (c2 / b2) * cos_alpha ** 2 * cos_beta)
    a2c = 2.0 * (q ** 2 - 1.0
                 + 2.0 * q ** 2 * cos_beta ** 2
                 + 2.0 * ((b2 - c2) / b2) * cos_alpha ** 2
                 - 4.0 * p * cos_alpha * cos_beta * cos_gamma
                 + 2.0 * ((b2 - a2) / b2) * cos_gamma ** 2)
    a1 = 4.0 * (-q * (1.0 + q) * cos_beta
                + 2.0 * (a2 / b2) * cos_gamma ** 2 * cos_beta
                - (1.0 - p) * cos_alpha * cos_gamma)
    a0 = (1.0 + q) ** 2 - 4.0 * (a2 / b2) * cos_gamma ** 2

    coeffs = np.array([a4, a3, a2c, a1, a0])
    if np.max(np.abs(coeffs)) < 1e-14:
        return []
    roots = np.roots(coeffs)
    sols = []
    for v in roots:
        if abs(v.imag) > 1e-8 or v.real <= 0:
            continue
        v = float(v.real)
        denom = 1.0 + v * v - 2.0 * v * cos_beta
        if denom <= 1e-14:
            continue
        s1 = np.sqrt(b2 / denom)
        u_den = 2.0 * (cos_gamma - v * cos_alpha)
        if abs(u_den) < 1e-14:
            continue
        u = ((-1.0 + q) * v * v - 2.0 * q * cos_beta * v + 1.0 + q) / u_den
        if u <= 0:
            continue
        s2, s3 = u * s1, v * s1
        pc = np.stack([s1 * f[0], s2 * f[1], s3 * f[2]])
        g = umeyama_alignment(pw, pc, with_scale=False)
        sols.append(SE3(g.r, g.t))
    return sols


def ransac_p3p(world_pts, uv, camera, threshold_px=3.0, max_iters=200,
               min_inliers=4, seed=0):
    """Camera pose (camera-to-world) from 3D-2D matches by P3P RANSAC.

    Returns (pose, inlier mask) or raises DegenerateGeometryError.
    """
    pw = np.asarray(world_pts, dtype=float)
    uv = np.asarray(uv, dtype=float)
    n = len(pw)
    if n < 4:
        raise DegenerateGeometryError("P3P RANSAC needs >= 4 matches")
    xn = _to_normalized(camera, uv)
    bearings = np.column_stack([xn, np.ones(n)])
    rng = np.random.default_rng(seed)

    best = None
    best_count = 0
    for _ in range(max_iters):
        sample = rng.choice(n, size=3, replace=False)
        for t_cw in p3p_solutions(pw[sample], bearings[sample]):
            pc = t_cw.transform(pw)
            ok = pc[:, 2] > 1e-6
            proj, valid = camera.project(pc)
            err = np.linalg.norm(proj - uv, axis=1)
            mask = ok & valid & (err < threshold_px)
            count = int(mask.sum())
            if count > best_count:
                best_count = count
                best = (t_cw, mask)
    if best is None or best_count < min_inliers:
        raise DegenerateGeometryError("P3P RANSAC failed")
    t_cw, mask = best
    return t_cw.inverse(), mask


def umeyama_alignment(src, dst, with_scale=True) -> Sim3:
    """Least-squares similarity g with dst ~= g(src) (Umeyama's closed form)."""
    src = np.asarray(src, dtype=float)
    dst = np.asarray(dst, dtype=float)
    if src.shape != dst.shape or len(src) < 3:
        raise ValueError("alignment needs >= 3 paired points")
    mu_s = src.mean(axis=0)
    mu_d = dst.mean(axis=0)
    sc = src - mu_s
    dc = dst - mu_d
    cov = dc.T @ sc / len(src)
    u, d, vt = np.linalg.svd(cov)
    s_fix = np.eye(3)
    if np.linalg.det(u) * np.linalg.det(vt) < 0:
        s_fix[2, 2] = -1.0
    r = u @ s_fix @ vt
    if with_scale:
        var_s = (sc ** 2).sum() / len(src)
        scale = float(np.trace(np.diag(d) @ s_fix) / max(var_s, 1e-300))
    else:
        scale = 1.0
    t = mu_d - scale * (r @ mu_s)
    return Sim3(r, t, scale)
