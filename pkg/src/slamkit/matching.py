"""Brute-force binary descriptor matching (Hamming norm).

Matches are (M, 3) int32 arrays with columns (query index, train index,
hamming distance).
"""

from __future__ import annotations

import numpy as np
from scipy.spatial import cKDTree

_POPCOUNT = np.array([bin(i).count("1") for i in range(256)], dtype=np.uint16)

# fallback when the ratio test is undefined (train set too small)
SMALL_TRAIN_MAX_DISTANCE = 64


def hamming_distance(a, b):
    """Distance between two 32-byte descriptors, in bits."""
    return int(_POPCOUNT[np.bitwise_xor(np.asarray(a), np.asarray(b))].sum())


def hamming_matrix(query, train, chunk=512):
    """(Q, T) uint16 matrix of pairwise Hamming distances."""
    query = np.asarray(query, dtype=np.uint8)
    train = np.asarray(train, dtype=np.uint8)
    out = np.empty((len(query), len(train)), dtype=np.uint16)
    for s in range(0, len(query), chunk):
        q = query[s:s + chunk]
        out[s:s + chunk] = _POPCOUNT[np.bitwise_xor(q[:, None, :], train[None, :, :])].sum(
            axis=2)
    return out


def pairwise_hamming(descriptors):
    """(N, N) distance matrix within one descriptor set."""
    return hamming_matrix(descriptors, descriptors)


def match_knn_ratio(query, train, ratio=0.75, cross_check=True):
    """2-NN ratio-test matching; one-to-one via mutual-best cross-check.

    With fewer than 2 train descriptors the ratio test is undefined and a
    64-bit distance ceiling is used instead.
    """
    query = np.asarray(query, dtype=np.uint8)
    train = np.asarray(train, dtype=np.uint8)
    empty = np.zeros((0, 3), dtype=np.int32)
    if len(query) == 0 or len(train) == 0:
        return empty
    dist = hamming_matrix(query, train)
    if len(train) < 2:
        best = dist[:, 0]
        if cross_check:
            q = int(np.argmin(best))
            if best[q] < SMALL_TRAIN_MAX_DISTANCE:
                return np.array([[q, 0, best[q]]], dtype=np.int32)
            return empty
        qi = np.nonzero(best < SMALL_TRAIN_MAX_DISTANCE)[0]
        return np.stack([qi, np.zeros_like(qi), best[qi].astype(np.int64)],
                        axis=1).astype(np.int32)

    two = np.argpartition(dist, 1, axis=1)[:, :2]
    d_pair = np.take_along_axis(dist, two, axis=1)
    swap = d_pair[:, 0] > d_pair[:, 1]
    d_pair[swap] = d_pair[swap][:, ::-1]
    two[swap] = two[swap][:, ::-1]
    d1, d2 = d_pair[:, 0].astype(np.float64), d_pair[:, 1].astype(np.float64)
    ok = d1 < ratio * d2
    if cross_check:
        best_query_for_train = np.argmin(dist, axis=0)
        ok &= best_query_for_train[two[:, 0]] == np.arange(len(query))
    qi = np.nonzero(ok)[0]
    return np.stack([qi, two[qi, 0], d_pair[qi, 0]], axis=1).astype(np.int32)


def match_within_radius(query_desc, query_uv, train_desc, train_uv, radius,
                        max_distance=100, ratio=0.9):
    """Match each query to the best train descriptor within a pixel radius.

    Used for guided search (projected landmarks against frame keypoints).
    Applies a distance ceiling, a ratio test against the second candidate,
    and keeps train assignments one-to-one (best distance wins).
    """
    query_desc = np.asarray(query_desc, dtype=np.uint8)
    train_desc = np.asarray(train_desc, dtype=np.uint8)
    empty = np.zeros((0, 3), dtype=np.int32)
    if len(query_desc) == 0 or len(train_desc) == 0:
        return empty
    tree = cKDTree(np.asarray(train_uv, dtype=float))
    cand = tree.query_ball_point(np.asarray(query_uv, dtype=float), r=float(radius))
    qs, ts = [], []
    for qi, lst in enumerate(cand):
        if lst:
            qs.extend([qi] * len(lst))
            ts.extend(lst)
    if not qs:
        return empty
    qs = np.asarray(qs, dtype=np.int64)
    ts = np.asarray(ts, dtype=np.int64)
    d = _POPCOUNT[np.bitwise_xor(query_desc[qs], train_desc[ts])].sum(axis=1)

    order = np.lexsort((ts, d, qs))   # by query, then distance
    qs, ts, d = qs[order], ts[order], d[order]
    first = np.unique(qs, return_index=True)[1]
    best_q, best_t, best_d = qs[first], ts[first], d[first]
    # second-best distance per query for the ratio test
    counts = np.diff(np.append(first, len(qs)))
    has2 = counts > 1
    second_d = np.full(len(first), np.inf)
    second_d[has2] = d[first[has2] + 1]
    ok = (best_d <= max_distance) & (best_d < ratio * second_d)
    best_q, best_t, best_d = best_q[ok], best_t[ok], best_d[ok]

    # one-to-one on the train side: keep the closest query per train index
    order = np.lexsort((best_q, best_d, best_t))
    bt = best_t[order]
    keep = np.ones(len(bt), dtype=bool)
    keep[1:] = bt[1:] != bt[:-1]
    sel = order[keep]
    return np.stack([best_q[sel], best_t[sel], best_d[sel]], axis=1).astype(np.int32)
