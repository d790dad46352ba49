"""Native sparse nonlinear least-squares engine.

One Levenberg-Marquardt core drives motion-only BA, local/global BA (with
Schur elimination of point blocks), and SE3/Sim3 pose-graph optimization.
Damping is additive lambda*I: initial lambda = 1e-4 * max diagonal, x10 on a
rejected step, x0.1 on an accepted one. Robust kernel is Huber with
delta = sqrt(5.991) on sigma-whitened residuals.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .geometry import (
    SE3,
    Sim3,
    se3_adjoint,
    se3_exp,
    se3_left_jacobian_inv,
    se3_log,
    sim3_exp,
    sim3_log,
    skew,
)

CHI2_2D = 5.991                    # 95% quantile of chi-square with 2 dof
CHI2_3D = 7.815                    # 3 dof: depth-backed factors carry a third row
HUBER_DELTA = np.sqrt(CHI2_2D)
LM_LAMBDA_INIT_SCALE = 1e-4
LM_LAMBDA_UP = 10.0
LM_LAMBDA_DOWN = 0.1
LM_REL_DECREASE_TOL = 1e-6
LM_GRADIENT_TOL = 1e-8
_MAX_REJECTS = 12


class OptimizationFailure(RuntimeError):
    """Too few inliers (or a structurally unsolvable problem)."""


@dataclass
class SolverReport:
    iterations: int
    initial_chi2: float
    final_chi2: float
    termination: str   # converged | max_iter | diverged | aborted


def octave_sigma2(octaves, scale_factor):
    """Measurement variance per keypoint octave: (scale^octave)^2 px^2."""
    return np.asarray(scale_factor, dtype=float) ** (2.0 * np.asarray(octaves, dtype=float))


def _huber_sqrt_weight(chi2, delta=HUBER_DELTA):
    """delta may be a scalar or a per-factor array (mixed-dof problems)."""
    chi = np.sqrt(np.maximum(chi2, 0.0))
    d = np.broadcast_to(np.asarray(delta, dtype=float), chi.shape)
    w = np.ones_like(chi)
    over = chi > d
    w[over] = d[over] / chi[over]
    return np.sqrt(w)


def _huber_cost(chi2, thr=CHI2_2D):
    t = np.broadcast_to(np.asarray(thr, dtype=float), np.shape(chi2))
    cost = np.where(chi2 > t,
                    2.0 * np.sqrt(t * np.maximum(chi2, 0.0)) - t, chi2)
    return float(cost.sum())


# ---------------------------------------------------------------------------
# Reprojection residuals (pinhole on undistorted coordinates)
#
# A factor with a finite `ur` entry carries a third residual row: the
# horizontal coordinate in a virtual right camera displaced by baseline
# b, u_r = u - bf/z.  It pins the point along the viewing ray, which a
# two-row factor cannot do — without it, depth-backed points are free to
# slide in depth during BA.  NaN in `ur` marks a monocular factor (third
# row zeroed), so mono and depth-backed observations mix in one problem.
# ---------------------------------------------------------------------------

def _reproj_residuals(rcw, tcw, pts, fp, fl, uv, inv_sigma, fx, fy, cx, cy,
                      ur=None, bf=0.0):
    xc = np.einsum("fij,fj->fi", rcw[fp], pts[fl]) + tcw[fp]
    z = xc[:, 2]
    behind = z < 1e-6
    zs = np.where(behind, 1e-6, z)
    u = fx * xc[:, 0] / zs + cx
    v = fy * xc[:, 1] / zs + cy
    if ur is None:
        e = (np.stack([u, v], axis=1) - uv) * inv_sigma[:, None]
    else:
        e = np.zeros((len(z), 3))
        e[:, 0] = u - uv[:, 0]
        e[:, 1] = v - uv[:, 1]
        has = np.isfinite(ur)
        e[has, 2] = u[has] - bf / zs[has] - ur[has]
        e *= inv_sigma[:, None]
    # a point behind the camera is an unconditional outlier
    e[behind] = 1e3
    chi2 = (e * e).sum(axis=1)
    return xc, e, chi2


def _reproj_jacobians(rcw, xc, fp, fl, inv_sigma, fx, fy, ur=None, bf=0.0):
    z = np.where(xc[:, 2] < 1e-6, 1e-6, xc[:, 2])
    zi = 1.0 / z
    zi2 = zi * zi
    n = len(xc)
    rows = 2 if ur is None else 3
    a = np.zeros((n, rows, 3))
    a[:, 0, 0] = fx * zi
    a[:, 0, 2] = -fx * xc[:, 0] * zi2
    a[:, 1, 1] = fy * zi
    a[:, 1, 2] = -fy * xc[:, 1] * zi2
    if ur is not None:
        has = np.isfinite(ur)
        a[has, 2, 0] = fx * zi[has]
        a[has, 2, 2] = (bf - fx * xc[has, 0]) * zi2[has]
    a *= inv_sigma[:, None, None]
    # left perturbation of T_cw: dXc/d[rho,phi] = [I | -skew(Xc)]
    jp = np.zeros((n, rows, 6))
    jp[:, :, :3] = a
    sk = np.zeros((n, 3, 3))
    sk[:, 0, 1] = -xc[:, 2]
    sk[:, 0, 2] = xc[:, 1]
    sk[:, 1, 0] = xc[:, 2]
    sk[:, 1, 2] = -xc[:, 0]
    sk[:, 2, 0] = -xc[:, 1]
    sk[:, 2, 1] = xc[:, 0]
    jp[:, :, 3:] = -np.einsum("fij,fjk->fik", a, sk)
    jl = np.einsum("fij,fjk->fik", a, rcw[fp])
    return jp, jl


def _factor_thresholds(ur):
    """Per-factor chi-square gate and Huber delta (2 or 3 dof)."""
    if ur is None:
        return CHI2_2D, HUBER_DELTA
    thr = np.where(np.isfinite(ur), CHI2_3D, CHI2_2D)
    return thr, np.sqrt(thr)


# ---------------------------------------------------------------------------
# Motion-only BA: one pose, landmarks fixed
# ---------------------------------------------------------------------------

def solve_motion_only(pose: SE3, points, uv, sigma2, camera,
                      rounds=4, iters_per_round=10, min_inliers=6, ur=None):
    """Refine a single camera-to-world pose against fixed 3D points.

    Runs `rounds` LM passes with chi-square inlier re-classification (at
    the 2- or 3-dof 95% quantile per factor) between passes.  `ur` adds
    virtual-right-coordinate rows for depth-backed observations (NaN =
    monocular factor).  Returns (pose, inlier mask, report).  Raises
    OptimizationFailure when fewer than `min_inliers` factors remain.
    """
    points = np.asarray(points, dtype=float).reshape(-1, 3)
    uv = np.asarray(uv, dtype=float).reshape(-1, 2)
    inv_sigma = 1.0 / np.sqrt(np.asarray(sigma2, dtype=float))
    n = len(points)
    if n < min_inliers:
        raise OptimizationFailure(f"motion-only BA needs >= {min_inliers} factors")
    fx, fy, cx, cy = camera.fx, camera.fy, camera.cx, camera.cy
    bf = float(getattr(camera, "bf", 0.0))
    if ur is not None:
        ur = np.asarray(ur, dtype=float).reshape(-1)
        if not np.isfinite(ur).any():
            ur = None
    thr, delta = _factor_thresholds(ur)

    t_cw = pose.inverse()
    rcw = t_cw.r[None, :, :]
    tcw = t_cw.t[None, :]
    fp = np.zeros(n, dtype=int)
    fl = np.arange(n)
    inlier = np.ones(n, dtype=bool)

    def residuals(rc, tc, rows):
        u = None if ur is None else ur[rows]
        return _reproj_residuals(rc, tc, points, fp[rows], fl[rows], uv[rows],
                                 inv_sigma[rows], fx, fy, cx, cy, u, bf)

    def sub(arr, rows):
        return arr if np.isscalar(arr) else arr[rows]

    every = np.arange(n)
    _, _, chi2_all = residuals(rcw, tcw, every)
    initial_cost = _huber_cost(chi2_all, thr)
    total_iters = 0
    termination = "max_iter"

    for _ in range(rounds):
        if inlier.sum() < min_inliers:
            raise OptimizationFailure("fewer than %d inliers" % min_inliers)
        sel = np.nonzero(inlier)[0]
        lam = None
        for _ in range(iters_per_round):
            xc, e, chi2 = residuals(rcw, tcw, sel)
            cost = _huber_cost(chi2, sub(thr, sel))
            jp, _ = _reproj_jacobians(rcw, xc, fp[sel], fl[sel], inv_sigma[sel],
                                      fx, fy, None if ur is None else ur[sel],
                                      bf)
            sw = _huber_sqrt_weight(chi2, sub(delta, sel))
            jw = jp * sw[:, None, None]
            ew = e * sw[:, None]
            h = np.einsum("fai,faj->ij", jw, jw)
            g = -np.einsum("fai,fa->i", jw, ew)
            if np.max(np.abs(g)) < LM_GRADIENT_TOL:
                termination = "converged"
                break
            if lam is None:
                lam = LM_LAMBDA_INIT_SCALE * np.max(np.diag(h))
            accepted = False
            for _ in range(_MAX_REJECTS):
                try:
                    delta_x = np.linalg.solve(h + lam * np.eye(6), g)
                except np.linalg.LinAlgError:
                    lam *= LM_LAMBDA_UP
                    continue
                cand = se3_exp(delta_x).compose(SE3(rcw[0], tcw[0]))
                rc, tc = cand.r[None], cand.t[None]
                _, _, chi2_new = residuals(rc, tc, sel)
                new_cost = _huber_cost(chi2_new, sub(thr, sel))
                if np.isfinite(new_cost) and new_cost < cost:
                    rcw, tcw = rc, tc
                    lam = max(lam * LM_LAMBDA_DOWN, 1e-12)
                    accepted = True
                    break
                lam *= LM_LAMBDA_UP
            total_iters += 1
            if not accepted:
                termination = "converged"
                break
            if cost - new_cost < LM_REL_DECREASE_TOL * max(cost, 1e-12):
                termination = "converged"
                break
        _, _, chi2_all = residuals(rcw, tcw, every)
        inlier = chi2_all <= thr

    if inlier.sum() < min_inliers:
        raise OptimizationFailure("fewer than %d inliers after final round" % min_inliers)
    final_cost = _huber_cost(chi2_all[inlier], sub(thr, inlier))
    report = SolverReport(total_iters, initial_cost, min(final_cost, initial_cost),
                          termination)
    return SE3(rcw[0], tcw[0]).inverse(), inlier, report


# ---------------------------------------------------------------------------
# Bundle adjustment core (shared by local and global BA)
# ---------------------------------------------------------------------------

def bundle_adjust(poses, points, factors, free_pose_ids, free_point_ids, camera,
                  max_iters=20, use_schur=True, abort_flag=None):
    """Joint LM over camera-to-world poses and world points.

    poses: {id: SE3}; points: {id: (3,) array}; factors: iterable of
    (pose id, point id, (u, v), sigma2) with an optional fifth element —
    the measured virtual-right coordinate u - bf/z (None = monocular) —
    which adds a depth-pinning third residual row using camera.bf.  Only
    ids in the free sets move.  Returns (new_poses, new_points, chi2 per
    factor, report).

    use_schur=False solves the full dense normal equations instead of
    eliminating point blocks — same damped system, same answer; kept as the
    verification route.
    """
    pose_ids = sorted(poses)
    point_ids = sorted(points)
    pose_slot = {k: i for i, k in enumerate(pose_ids)}
    point_slot = {k: i for i, k in enumerate(point_ids)}
    np_, nl = len(pose_ids), len(point_ids)

    rcw = np.empty((np_, 3, 3))
    tcw = np.empty((np_, 3))
    for k, i in pose_slot.items():
        inv = poses[k].inverse()
        rcw[i], tcw[i] = inv.r, inv.t
    pts = np.stack([np.asarray(points[k], dtype=float) for k in point_ids])

    factors = list(factors)
    nf = len(factors)
    fp = np.array([pose_slot[f[0]] for f in factors], dtype=int)
    fl = np.array([point_slot[f[1]] for f in factors], dtype=int)
    uv = np.array([f[2] for f in factors], dtype=float).reshape(nf, 2)
    inv_sigma = 1.0 / np.sqrt(np.array([f[3] for f in factors], dtype=float))
    ur = np.array([f[4] if len(f) > 4 and f[4] is not None else np.nan
                   for f in factors], dtype=float)
    if not np.isfinite(ur).any():
        ur = None
    bf = float(getattr(camera, "bf", 0.0))
    thr, delta = _factor_thresholds(ur)

    free_pose = np.zeros(np_, dtype=bool)
    for k in free_pose_ids:
        free_pose[pose_slot[k]] = True
    free_point = np.zeros(nl, dtype=bool)
    for k in free_point_ids:
        free_point[point_slot[k]] = True
    # slot in the reduced state vector, -1 when fixed
    pslot = np.cumsum(free_pose) - 1
    pslot[~free_pose] = -1
    lslot = np.cumsum(free_point) - 1
    lslot[~free_point] = -1
    npf, nlf = int(free_pose.sum()), int(free_point.sum())

    fx, fy, cx, cy = camera.fx, camera.fy, camera.cx, camera.cy

    f_pose_free = free_pose[fp]
    f_point_free = free_point[fl]
    fps = pslot[fp]      # free-pose slot per factor (-1 = fixed)
    fls = lslot[fl]

    # observation pairs per point for the Schur pose-pose coupling
    both_free = f_pose_free & f_point_free
    pair_i, pair_j = _schur_pairs(fls, f_pose_free, nlf)

    def eval_cost(rc, tc, xs):
        _, _, chi2 = _reproj_residuals(rc, tc, xs, fp, fl, uv, inv_sigma,
                                       fx, fy, cx, cy, ur, bf)
        return _huber_cost(chi2, thr), chi2

    cost, chi2 = eval_cost(rcw, tcw, pts)
    initial_cost = cost
    lam = None
    iters = 0
    termination = "max_iter"

    for _ in range(max_iters):
        if abort_flag is not None and abort_flag():
            termination = "aborted"
            break
        xc, e, chi2 = _reproj_residuals(rcw, tcw, pts, fp, fl, uv, inv_sigma,
                                        fx, fy, cx, cy, ur, bf)
        jp, jl = _reproj_jacobians(rcw, xc, fp, fl, inv_sigma, fx, fy, ur, bf)
        sw = _huber_sqrt_weight(chi2, delta)
        jp = jp * sw[:, None, None]
        jl = jl * sw[:, None, None]
        ew = e * sw[:, None]

        u_blocks = np.zeros((npf, 6, 6))
        b_p = np.zeros((npf, 6))
        sel = f_pose_free
        np.add.at(u_blocks, fps[sel], np.einsum("fai,faj->fij", jp[sel], jp[sel]))
        np.add.at(b_p, fps[sel], -np.einsum("fai,fa->fi", jp[sel], ew[sel]))

        v_blocks = np.zeros((nlf, 3, 3))
        b_l = np.zeros((nlf, 3))
        sel = f_point_free
        np.add.at(v_blocks, fls[sel], np.einsum("fai,faj->fij", jl[sel], jl[sel]))
        np.add.at(b_l, fls[sel], -np.einsum("fai,fa->fi", jl[sel], ew[sel]))

        w_blocks = np.zeros((nf, 6, 3))
        w_blocks[both_free] = np.einsum("fai,faj->fij", jp[both_free], jl[both_free])

        g_inf = 0.0
        if npf:
            g_inf = max(g_inf, float(np.max(np.abs(b_p))))
        if nlf:
            g_inf = max(g_inf, float(np.max(np.abs(b_l))))
        if g_inf < LM_GRADIENT_TOL:
            termination = "converged"
            break

        if lam is None:
            diag_max = 0.0
            if npf:
                diag_max = max(diag_max, float(u_blocks.reshape(npf, 36)[:, ::7].max()))
            if nlf:
                diag_max = max(diag_max, float(v_blocks.reshape(nlf, 9)[:, ::4].max()))
            lam = LM_LAMBDA_INIT_SCALE * max(diag_max, 1e-12)

        accepted = False
        for _ in range(_MAX_REJECTS):
            try:
                if use_schur:
                    dp, dl = _solve_step_schur(u_blocks, v_blocks, w_blocks, b_p,
                                               b_l, fps, fls, both_free, pair_i,
                                               pair_j, npf, nlf, lam)
                else:
                    dp, dl = _solve_step_dense(u_blocks, v_blocks, w_blocks, b_p,
                                               b_l, fps, fls, both_free, npf, nlf,
                                               lam)
            except np.linalg.LinAlgError:
                lam *= LM_LAMBDA_UP
                continue
            rc, tc = rcw.copy(), tcw.copy()
            for i in range(np_):
                s = pslot[i]
                if s >= 0:
                    upd = se3_exp(dp[s]).compose(SE3(rcw[i], tcw[i]))
                    rc[i], tc[i] = upd.r, upd.t
            xs = pts.copy()
            if nlf:
                xs[free_point] += dl
            new_cost, new_chi2 = eval_cost(rc, tc, xs)
            if np.isfinite(new_cost) and new_cost < cost:
                rcw, tcw, pts = rc, tc, xs
                chi2 = new_chi2
                lam = max(lam * LM_LAMBDA_DOWN, 1e-14)
                accepted = True
                break
            lam *= LM_LAMBDA_UP
        iters += 1
        if not accepted:
            termination = "converged"
            break
        decrease = cost - new_cost
        cost = new_cost
        if decrease < LM_REL_DECREASE_TOL * max(cost, 1e-12):
            termination = "converged"
            break

    # fixed entries hand back the caller's values untouched (bit-identical)
    out_poses = {k: (SE3(rcw[i], tcw[i]).inverse() if free_pose[i]
                     else poses[k].copy())
                 for k, i in pose_slot.items()}
    out_points = {k: (pts[i].copy() if free_point[i]
                      else np.asarray(points[k], dtype=float).copy())
                  for k, i in point_slot.items()}
    report = SolverReport(iters, initial_cost, cost, termination)
    return out_poses, out_points, chi2, report


def _schur_pairs(fls, f_pose_free, nlf):
    """All ordered factor pairs (fi, fj) sharing a free point, both with free
    poses — the nonzero pose-pose blocks of W V^-1 W^T."""
    rows = np.nonzero((fls >= 0) & f_pose_free)[0]
    if len(rows) == 0 or nlf == 0:
        return np.zeros(0, dtype=int), np.zeros(0, dtype=int)
    order = rows[np.argsort(fls[rows], kind="stable")]
    groups = np.split(order, np.unique(fls[order], return_index=True)[1][1:])
    pi, pj = [], []
    for g in groups:
        k = len(g)
        pi.append(np.repeat(g, k))
        pj.append(np.tile(g, k))
    return np.concatenate(pi), np.concatenate(pj)


def _solve_step_schur(u_blocks, v_blocks, w_blocks, b_p, b_l, fps, fls,
                      both_free, pair_i, pair_j, npf, nlf, lam):
    v_inv = np.linalg.inv(v_blocks + lam * np.eye(3)[None]) if nlf else \
        np.zeros((0, 3, 3))
    if npf == 0:
        dl = np.einsum("lij,lj->li", v_inv, b_l) if nlf else np.zeros((0, 3))
        return np.zeros((0, 6)), dl

    s4 = np.zeros((npf, npf, 6, 6))
    idx = np.arange(npf)
    s4[idx, idx] = u_blocks + lam * np.eye(6)[None]
    g = b_p.copy()
    if nlf and len(pair_i):
        y = np.einsum("fij,fjk->fik", w_blocks, v_inv[np.maximum(fls, 0)])
        # chunked so the pair product never materializes too much at once
        for s in range(0, len(pair_i), 200000):
            ii = pair_i[s:s + 200000]
            jj = pair_j[s:s + 200000]
            prod = np.einsum("nij,nkj->nik", y[ii], w_blocks[jj])
            np.add.at(s4, (fps[ii], fps[jj]), -prod)
        sel = np.nonzero(both_free)[0]
        np.add.at(g, fps[sel], -np.einsum("fij,fj->fi", y[sel], b_l[fls[sel]]))

    s = s4.transpose(0, 2, 1, 3).reshape(npf * 6, npf * 6)
    dp = np.linalg.solve(s, g.reshape(-1)).reshape(npf, 6)
    if nlf:
        rhs = b_l.copy()
        sel = np.nonzero(both_free)[0]
        if len(sel):
            np.add.at(rhs, fls[sel],
                      -np.einsum("fij,fi->fj", w_blocks[sel], dp[fps[sel]]))
        dl = np.einsum("lij,lj->li", v_inv, rhs)
    else:
        dl = np.zeros((0, 3))
    return dp, dl


def _solve_step_dense(u_blocks, v_blocks, w_blocks, b_p, b_l, fps, fls,
                      both_free, npf, nlf, lam):
    n = npf * 6 + nlf * 3
    h = np.zeros((n, n))
    for s in range(npf):
        h[s * 6:s * 6 + 6, s * 6:s * 6 + 6] = u_blocks[s] + lam * np.eye(6)
    off = npf * 6
    for s in range(nlf):
        h[off + s * 3:off + s * 3 + 3, off + s * 3:off + s * 3 + 3] = \
            v_blocks[s] + lam * np.eye(3)
    for f in np.nonzero(both_free)[0]:
        r0 = fps[f] * 6
        c0 = off + fls[f] * 3
        h[r0:r0 + 6, c0:c0 + 3] += w_blocks[f]
        h[c0:c0 + 3, r0:r0 + 6] += w_blocks[f].T
    b = np.concatenate([b_p.reshape(-1), b_l.reshape(-1)])
    delta = np.linalg.solve(h, b)
    return delta[:off].reshape(npf, 6), delta[off:].reshape(nlf, 3)


# ---------------------------------------------------------------------------
# Map-facing wrappers
# ---------------------------------------------------------------------------

def factors_from_map(smap, keyframe_ids, point_ids):
    """Reprojection factors (kf id, point id, uv, sigma2, ur) for the given
    slice; ur is the measured virtual-right coordinate for depth-backed
    keypoints, None otherwise."""
    kset = set(keyframe_ids)
    out = []
    for pid in point_ids:
        p = smap.points.get(pid)
        if p is None or p.is_bad:
            continue
        for kid, idx in p.observations.items():
            if kid not in kset:
                continue
            kf = smap.keyframes.get(kid)
            if kf is None:
                continue
            sig2 = float(octave_sigma2(kf.kps[idx, 2], smap.scale_factor))
            u = float(kf.kps_u[idx, 0])
            bf = float(getattr(kf.camera, "bf", 0.0))
            z = float(kf.depths[idx]) if kf.depths is not None else 0.0
            ur_val = u - bf / z if bf > 0.0 and z > 0.0 else None
            out.append((kid, pid, (u, float(kf.kps_u[idx, 1])), sig2, ur_val))
    return out


def local_window(smap, center_kf):
    """Center + strongly covisible keyframes, their points, and the fixed
    outside observers of those points."""
    window = {center_kf.kid}
    window.update(center_kf.covisible_by_weight(
        min_weight=smap.covisibility_threshold))
    window = {k for k in window if k in smap.keyframes}
    point_ids = set()
    for kid in window:
        for _, p in smap.keyframes[kid].observed_points():
            point_ids.add(p.pid)
    fixed = set()
    for pid in point_ids:
        for kid in smap.points[pid].observations:
            if kid not in window and kid in smap.keyframes:
                fixed.add(kid)
    return window, fixed, point_ids


def solve_local_ba(smap, center_kf, max_iters=20, chi2_prune=None):
    """Local BA around a keyframe; prunes observations failing the chi-square
    gate afterwards (2- or 3-dof quantile per factor unless overridden)."""
    window, fixed, point_ids = local_window(smap, center_kf)
    all_kfs = window | fixed
    if len(point_ids) == 0 or len(all_kfs) < 2:
        return SolverReport(0, 0.0, 0.0, "converged")
    factors = factors_from_map(smap, all_kfs, point_ids)
    if len(factors) < 10:
        return SolverReport(0, 0.0, 0.0, "converged")
    poses = {k: smap.keyframes[k].pose for k in all_kfs}
    points = {pid: smap.points[pid].position for pid in point_ids}
    free_poses = {k for k in window if k != 0} or set()
    new_poses, new_points, chi2, report = bundle_adjust(
        poses, points, factors, free_poses, point_ids, center_kf.camera,
        max_iters=max_iters)
    for k in free_poses:
        smap.keyframes[k].pose = new_poses[k]
    for pid in point_ids:
        smap.points[pid].position = new_points[pid]
    # prune residual outliers
    for (kid, pid, _, _, ur_val), c2 in zip(factors, chi2):
        gate = chi2_prune if chi2_prune is not None else \
            (CHI2_3D if ur_val is not None else CHI2_2D)
        if c2 > gate:
            p = smap.points.get(pid)
            if p is not None:
                smap.remove_observation(p, kid)
    return report


def solve_global_ba(smap, abort_flag=None, max_iters=30):
    """Global BA over every keyframe (gauge: lowest keyframe id fixed) and
    every point; atomic write-back, discarded entirely on abort."""
    if not smap.keyframes or not smap.points:
        return SolverReport(0, 0.0, 0.0, "converged")
    kf_ids = sorted(smap.keyframes)
    point_ids = sorted(smap.points)
    factors = factors_from_map(smap, kf_ids, point_ids)
    if len(factors) < 10:
        return SolverReport(0, 0.0, 0.0, "converged")
    poses = {k: smap.keyframes[k].pose for k in kf_ids}
    points = {pid: smap.points[pid].position for pid in point_ids}
    camera = smap.keyframes[kf_ids[0]].camera
    free_poses = set(kf_ids[1:])
    new_poses, new_points, chi2, report = bundle_adjust(
        poses, points, factors, free_poses, set(point_ids), camera,
        max_iters=max_iters, abort_flag=abort_flag)
    if report.termination == "aborted":
        return report
    for k in kf_ids:
        smap.keyframes[k].pose = new_poses[k]
    for pid in point_ids:
        smap.points[pid].position = new_points[pid]
    smap.bump_version()
    return report


# ---------------------------------------------------------------------------
# Pose-graph optimization (SE3 or Sim3 nodes)
# ---------------------------------------------------------------------------

@dataclass
class PoseGraphEdge:
    i: int
    j: int
    z: object            # SE3 or Sim3: measured X_i^-1 X_j
    information: np.ndarray | None = None


def _check_connected(node_ids, edges):
    parent = {k: k for k in node_ids}

    def find(a):
        while parent[a] != a:
            parent[a] = parent[parent[a]]
            a = parent[a]
        return a

    for e in edges:
        ra, rb = find(e.i), find(e.j)
        if ra != rb:
            parent[ra] = rb
    comps = {}
    for k in node_ids:
        comps.setdefault(find(k), []).append(k)
    if len(comps) > 1:
        parts = "; ".join(str(sorted(v)) for v in comps.values())
        raise ValueError(f"pose graph is disconnected: components {parts}")


def _pg_residual_se3(xi_inv, xj, z_inv):
    return se3_log(z_inv.compose(xi_inv).compose(xj))


def _pg_edge_se3(xi, xj, z):
    """Residual and analytic Jacobians for r = log(Z^-1 Xi^-1 Xj) under right
    perturbations of Xi and Xj."""
    xi_inv = xi.inverse()
    r = _pg_residual_se3(xi_inv, xj, z.inverse())
    jr_inv = se3_left_jacobian_inv(-r)
    jj = jr_inv
    ji = -jr_inv @ se3_adjoint(xj.inverse().compose(xi))
    return r, ji, jj


def _pg_edge_sim3(xi, xj, z, step=1e-6):
    z_inv = z.inverse()

    def res(a, b):
        return sim3_log(z_inv.compose(a.inverse()).compose(b))

    r = res(xi, xj)
    ji = np.zeros((7, 7))
    jj = np.zeros((7, 7))
    for k in range(7):
        d = np.zeros(7)
        d[k] = step
        ji[:, k] = (res(xi.compose(sim3_exp(d)), xj)
                    - res(xi.compose(sim3_exp(-d)), xj)) / (2 * step)
        jj[:, k] = (res(xi, xj.compose(sim3_exp(d)))
                    - res(xi, xj.compose(sim3_exp(-d)))) / (2 * step)
    return r, ji, jj


def solve_pose_graph(nodes, edges, fixed_ids, max_iters=100, robust=True,
                     rel_tol=1e-12, grad_tol=1e-10):
    """LM over pose-graph nodes minimizing sum ||log(Z_ij^-1 Xi^-1 Xj)||^2_info.

    nodes: {id: SE3} or {id: Sim3} (homogeneous); edges: PoseGraphEdge list;
    fixed_ids: nodes that stay immobile (>= 1 required). Graphs are small, so
    the default tolerances polish to the stationary point. Returns
    (optimized nodes, report).
    """
    if not nodes:
        raise ValueError("empty pose graph")
    fixed_ids = set(fixed_ids)
    if not fixed_ids & set(nodes):
        raise ValueError("pose graph needs at least one fixed node")
    _check_connected(list(nodes), edges)
    is_sim3 = isinstance(next(iter(nodes.values())), Sim3)
    dim = 7 if is_sim3 else 6

    ids = sorted(nodes)
    slot = {}
    free = [k for k in ids if k not in fixed_ids]
    for i, k in enumerate(free):
        slot[k] = i
    state = {k: nodes[k].copy() for k in ids}
    n_free = len(free)

    whiteners = []
    for e in edges:
        info = np.eye(dim) if e.information is None else np.asarray(e.information,
                                                                    dtype=float)
        whiteners.append(np.linalg.cholesky(info).T)

    def edge_terms(st, e, wh, want_jac=True):
        if is_sim3:
            r, ji, jj = _pg_edge_sim3(st[e.i], st[e.j], e.z)
        else:
            r, ji, jj = _pg_edge_se3(st[e.i], st[e.j], e.z)
        return wh @ r, (wh @ ji if want_jac else None), (wh @ jj if want_jac else None)

    def total_cost(st):
        c = 0.0
        for e, wh in zip(edges, whiteners):
            if is_sim3:
                r = sim3_log(e.z.inverse().compose(st[e.i].inverse()).compose(st[e.j]))
            else:
                r = _pg_residual_se3(st[e.i].inverse(), st[e.j], e.z.inverse())
            rw = wh @ r
            s = float(rw @ rw)
            if robust and s > CHI2_2D:
                s = 2.0 * HUBER_DELTA * np.sqrt(s) - CHI2_2D
            c += s
        return c

    cost = total_cost(state)
    initial_cost = cost
    lam = None
    iters = 0
    termination = "max_iter"

    for _ in range(max_iters):
        h = np.zeros((n_free * dim, n_free * dim))
        g = np.zeros(n_free * dim)
        for e, wh in zip(edges, whiteners):
            r, ji, jj = edge_terms(state, e, wh)
            if robust:
                s = float(r @ r)
                if s > CHI2_2D:
                    swt = np.sqrt(HUBER_DELTA / np.sqrt(s))
                    r, ji, jj = r * swt, ji * swt, jj * swt
            si = slot.get(e.i, -1)
            sj = slot.get(e.j, -1)
            if si >= 0:
                a = si * dim
                h[a:a + dim, a:a + dim] += ji.T @ ji
                g[a:a + dim] -= ji.T @ r
            if sj >= 0:
                b = sj * dim
                h[b:b + dim, b:b + dim] += jj.T @ jj
                g[b:b + dim] -= jj.T @ r
            if si >= 0 and sj >= 0:
                a, b = si * dim, sj * dim
                h[a:a + dim, b:b + dim] += ji.T @ jj
                h[b:b + dim, a:a + dim] += jj.T @ ji
        if np.max(np.abs(g)) < grad_tol:
            termination = "converged"
            break
        if lam is None:
            lam = LM_LAMBDA_INIT_SCALE * max(float(np.max(np.diag(h))), 1e-12)
        accepted = False
        for _ in range(_MAX_REJECTS):
            try:
                delta = np.linalg.solve(h + lam * np.eye(n_free * dim), g)
            except np.linalg.LinAlgError:
                lam *= LM_LAMBDA_UP
                continue
            cand = {k: v.copy() for k, v in state.items()}
            for k in free:
                d = delta[slot[k] * dim:slot[k] * dim + dim]
                upd = sim3_exp(d) if is_sim3 else se3_exp(d)
                cand[k] = cand[k].compose(upd)
            new_cost = total_cost(cand)
            if np.isfinite(new_cost) and new_cost < cost:
                state = cand
                lam = max(lam * LM_LAMBDA_DOWN, 1e-14)
                accepted = True
                break
            lam *= LM_LAMBDA_UP
        iters += 1
        if not accepted:
            termination = "converged"
            break
        decrease = cost - new_cost
        cost = new_cost
        if decrease < rel_tol * max(cost, 1e-12):
            termination = "converged"
            break

    report = SolverReport(iters, initial_cost, cost, termination)
    return state, report


# ---------------------------------------------------------------------------
# Jacobian verification against central finite differences
# ---------------------------------------------------------------------------

def check_jacobians(kind="reprojection", n_samples=1000, seed=0, step=1e-6):
    """Max relative deviation between analytic Jacobians and central finite
    differences over random factor configurations."""
    rng = np.random.default_rng(seed)
    worst = 0.0
    if kind == "reprojection":
        fx = fy = 500.0
        for _ in range(n_samples):
            t_cw = se3_exp(rng.uniform(-0.5, 0.5, 6))
            x = rng.uniform(-2, 2, 3) + np.array([0.0, 0.0, 5.0])
            x = t_cw.inverse().transform(x + np.array([0, 0, rng.uniform(0, 3)]))
            xc = t_cw.transform(x)
            if xc[2] < 0.2:
                continue
            inv_sigma = np.array([1.0 / rng.uniform(0.8, 2.0)])
            rcw = t_cw.r[None]
            jp, jl = _reproj_jacobians(rcw, xc[None], np.array([0]), np.array([0]),
                                       inv_sigma, fx, fy)

            def proj(tc, pt):
                y = tc.transform(pt)
                return np.array([fx * y[0] / y[2], fy * y[1] / y[2]]) * inv_sigma[0]

            num_p = np.zeros((2, 6))
            for k in range(6):
                d = np.zeros(6)
                d[k] = step
                num_p[:, k] = (proj(se3_exp(d).compose(t_cw), x)
                               - proj(se3_exp(-d).compose(t_cw), x)) / (2 * step)
            num_l = np.zeros((2, 3))
            for k in range(3):
                d = np.zeros(3)
                d[k] = step
                num_l[:, k] = (proj(t_cw, x + d) - proj(t_cw, x - d)) / (2 * step)
            ref = max(np.max(np.abs(num_p)), np.max(np.abs(num_l)), 1.0)
            worst = max(worst,
                        float(np.max(np.abs(jp[0] - num_p))) / ref,
                        float(np.max(np.abs(jl[0] - num_l))) / ref)
    elif kind == "reprojection_depth":
        fx = fy = 500.0
        for _ in range(n_samples):
            t_cw = se3_exp(rng.uniform(-0.5, 0.5, 6))
            x = rng.uniform(-2, 2, 3) + np.array([0.0, 0.0, 5.0])
            x = t_cw.inverse().transform(x + np.array([0, 0, rng.uniform(0, 3)]))
            xc = t_cw.transform(x)
            if xc[2] < 0.2:
                continue
            inv_sigma = np.array([1.0 / rng.uniform(0.8, 2.0)])
            bf = rng.uniform(10.0, 80.0)
            rcw = t_cw.r[None]
            jp, jl = _reproj_jacobians(rcw, xc[None], np.array([0]), np.array([0]),
                                       inv_sigma, fx, fy, np.array([0.0]), bf)

            def proj(tc, pt):
                y = tc.transform(pt)
                u = fx * y[0] / y[2]
                return np.array([u, fy * y[1] / y[2], u - bf / y[2]]) * inv_sigma[0]

            num_p = np.zeros((3, 6))
            for k in range(6):
                d = np.zeros(6)
                d[k] = step
                num_p[:, k] = (proj(se3_exp(d).compose(t_cw), x)
                               - proj(se3_exp(-d).compose(t_cw), x)) / (2 * step)
            num_l = np.zeros((3, 3))
            for k in range(3):
                d = np.zeros(3)
                d[k] = step
                num_l[:, k] = (proj(t_cw, x + d) - proj(t_cw, x - d)) / (2 * step)
            ref = max(np.max(np.abs(num_p)), np.max(np.abs(num_l)), 1.0)
            worst = max(worst,
                        float(np.max(np.abs(jp[0] - num_p))) / ref,
                        float(np.max(np.abs(jl[0] - num_l))) / ref)
    elif kind == "pose_graph_se3":
        for _ in range(n_samples):
            xi = se3_exp(rng.uniform(-1.0, 1.0, 6))
            xj = se3_exp(rng.uniform(-1.0, 1.0, 6))
            z = se3_exp(rng.uniform(-0.3, 0.3, 6))
            r, ji, jj = _pg_edge_se3(xi, xj, z)
            z_inv = z.inverse()

            def res(a, b):
                return _pg_residual_se3(a.inverse(), b, z_inv)

            num_i = np.zeros((6, 6))
            num_j = np.zeros((6, 6))
            for k in range(6):
                d = np.zeros(6)
                d[k] = step
                num_i[:, k] = (res(xi.compose(se3_exp(d)), xj)
                               - res(xi.compose(se3_exp(-d)), xj)) / (2 * step)
                num_j[:, k] = (res(xi, xj.compose(se3_exp(d)))
                               - res(xi, xj.compose(se3_exp(-d)))) / (2 * step)
            ref = max(np.max(np.abs(num_i)), np.max(np.abs(num_j)), 1.0)
            worst = max(worst,
                        float(np.max(np.abs(ji - num_i))) / ref,
                        float(np.max(np.abs(jj - num_j))) / ref)
    else:
        raise ValueError(f"unknown factor kind {kind!r}")
    return worst
