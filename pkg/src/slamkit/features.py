"""Native feature pipeline: detectors, oriented binary descriptors, adaptors.

Keypoints are (N, 5) float32 arrays with columns (u, v, octave, angle,
response); u, v are always full-resolution pixel coordinates. Descriptors are
(N, 32) uint8 — 256-bit binary strings.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy import ndimage

DETECTOR_FAST = "FAST"
DETECTOR_SHI_TOMASI = "SHI_TOMASI"
DETECTOR_ORB_LIKE = "ORB_LIKE"   # FAST detection + oriented-binary description
DETECTOR_PLUGIN = "plugin"

KP_U, KP_V, KP_OCTAVE, KP_ANGLE, KP_RESPONSE = range(5)

DESCRIPTOR_BITS = 256
DESCRIPTOR_BYTES = 32
PATCH_MARGIN = 31          # border margin for description, px at the octave level
ORIENTATION_RADIUS = 15


@dataclass
class FeatureTrackerConfig:
    detector_type: str = DETECTOR_FAST
    descriptor_type: str = "ORB_LIKE"
    num_features: int = 2000
    num_levels: int = 4
    scale_factor: float = 1.2
    tile_grid: tuple = (1, 1)
    matcher_type: str = "BF"
    norm_type: str = "hamming"
    ratio_test: float = 0.75
    fast_threshold: int = 20

    def __post_init__(self):
        if self.scale_factor <= 1.0:
            raise ValueError("scale_factor must be > 1")
        if self.num_levels < 1:
            raise ValueError("num_levels must be >= 1")
        if not (0.0 < self.ratio_test <= 1.0):
            raise ValueError("ratio_test must lie in (0, 1]")


# ---------------------------------------------------------------------------
# FAST segment test on the 16-pixel Bresenham circle
# ---------------------------------------------------------------------------

# radius-3 circle in circular order starting at 12 o'clock, (dx, dy), y down
_FAST_CIRCLE = np.array([
    (0, -3), (1, -3), (2, -2), (3, -1), (3, 0), (3, 1), (2, 2), (1, 3),
    (0, 3), (-1, 3), (-2, 2), (-3, 1), (-3, 0), (-3, -1), (-2, -2), (-1, -3),
], dtype=int)

_FAST_ARC = 9  # minimum contiguous run


def fast_detect(image, threshold=20, max_keypoints=0, adaptive=True):
    """FAST corners: contiguous arc of >= 9 circle pixels all brighter or all
    darker than center +- threshold; 3x3 non-max suppression on response."""
    img = np.asarray(image, dtype=np.float32)
    h, w = img.shape
    if h < 7 or w < 7:
        return np.zeros((0, 5), dtype=np.float32)
    center = img[3:h - 3, 3:w - 3]
    diffs = np.empty((16,) + center.shape, dtype=np.float32)
    for i, (dx, dy) in enumerate(_FAST_CIRCLE):
        diffs[i] = img[3 + dy:h - 3 + dy, 3 + dx:w - 3 + dx] - center

    kps = _fast_from_diffs(diffs, float(threshold))
    if adaptive and len(kps) < 50 and threshold > 1:
        kps = _fast_from_diffs(diffs, float(threshold) / 2.0)
    if max_keypoints and len(kps) > max_keypoints:
        kps = kps[np.argsort(-kps[:, KP_RESPONSE], kind="stable")[:max_keypoints]]
    return kps


def _fast_from_diffs(diffs, t):
    brighter = diffs > t
    darker = diffs < -t
    corner_b = _has_arc(brighter)
    corner_d = _has_arc(darker)
    score_b = np.where(brighter, diffs - t, 0.0).sum(axis=0)
    score_d = np.where(darker, -diffs - t, 0.0).sum(axis=0)
    response = np.maximum(score_b * corner_b, score_d * corner_d)
    local_max = ndimage.maximum_filter(response, size=3, mode="constant")
    keep = (response > 0) & (response >= local_max)
    ys, xs = np.nonzero(keep)
    kps = np.zeros((len(ys), 5), dtype=np.float32)
    kps[:, KP_U] = xs + 3
    kps[:, KP_V] = ys + 3
    kps[:, KP_RESPONSE] = response[ys, xs]
    return kps


def _has_arc(mask):
    # wrap by 8 so every length-9 window of the circular sequence is a slice
    ext = np.concatenate([mask, mask[:_FAST_ARC - 1]], axis=0)
    out = np.zeros(mask.shape[1:], dtype=bool)
    for s in range(16):
        out |= np.logical_and.reduce(ext[s:s + _FAST_ARC], axis=0)
    return out


def shi_tomasi_detect(image, max_keypoints=0, quality_level=0.01):
    """Min-eigenvalue corner response with 3x3 non-max suppression."""
    img = np.asarray(image, dtype=np.float32)
    gx = ndimage.sobel(img, axis=1, mode="nearest") / 8.0
    gy = ndimage.sobel(img, axis=0, mode="nearest") / 8.0
    gxx = ndimage.gaussian_filter(gx * gx, 1.5, mode="nearest")
    gyy = ndimage.gaussian_filter(gy * gy, 1.5, mode="nearest")
    gxy = ndimage.gaussian_filter(gx * gy, 1.5, mode="nearest")
    tr = gxx + gyy
    det_root = np.sqrt(np.maximum((gxx - gyy) ** 2 + 4.0 * gxy * gxy, 0.0))
    response = 0.5 * (tr - det_root)
    response[:3, :] = 0
    response[-3:, :] = 0
    response[:, :3] = 0
    response[:, -3:] = 0
    floor = quality_level * response.max() if response.max() > 0 else 0.0
    local_max = ndimage.maximum_filter(response, size=3, mode="constant")
    keep = (response > floor) & (response >= local_max) & (response > 0)
    ys, xs = np.nonzero(keep)
    kps = np.zeros((len(ys), 5), dtype=np.float32)
    kps[:, KP_U] = xs
    kps[:, KP_V] = ys
    kps[:, KP_RESPONSE] = response[ys, xs]
    if max_keypoints and len(kps) > max_keypoints:
        kps = kps[np.argsort(-kps[:, KP_RESPONSE], kind="stable")[:max_keypoints]]
    return kps


# ---------------------------------------------------------------------------
# Orientation and the steered 256-bit descriptor
# ---------------------------------------------------------------------------

def _disc_offsets(radius):
    dy, dx = np.mgrid[-radius:radius + 1, -radius:radius + 1]
    m = dx * dx + dy * dy <= radius * radius
    return dx[m], dy[m]

_ORI_DX, _ORI_DY = _disc_offsets(ORIENTATION_RADIUS)

# fixed pseudo-random comparison pattern; frozen seed keeps descriptors stable
_PATTERN = np.clip(
    np.random.default_rng(8745231).normal(0.0, 6.2, size=(DESCRIPTOR_BITS, 4)),
    -15.0, 15.0)


def compute_orientations(image, kps):
    """Intensity-centroid angle over a radius-15 disc, radians in [-pi, pi]."""
    img = np.asarray(image, dtype=np.float32)
    h, w = img.shape
    angles = np.zeros(len(kps), dtype=np.float32)
    if len(kps) == 0:
        return angles
    xs = np.round(kps[:, KP_U]).astype(int)
    ys = np.round(kps[:, KP_V]).astype(int)
    r = ORIENTATION_RADIUS
    ok = (xs >= r) & (xs < w - r) & (ys >= r) & (ys < h - r)
    if np.any(ok):
        px = xs[ok, None] + _ORI_DX[None, :]
        py = ys[ok, None] + _ORI_DY[None, :]
        patch = img[py, px]
        m10 = (patch * _ORI_DX[None, :]).sum(axis=1)
        m01 = (patch * _ORI_DY[None, :]).sum(axis=1)
        angles[ok] = np.arctan2(m01, m10)
    return angles


def describe(image, kps, smoothed=None):
    """Steered binary descriptors.

    Keypoints closer than 31 px to the image border are dropped; returns
    (descriptors, kept_indices).
    """
    img = np.asarray(image, dtype=np.float32)
    h, w = img.shape
    if smoothed is None:
        smoothed = ndimage.gaussian_filter(img, 2.0, mode="nearest")
    xs = np.round(kps[:, KP_U]).astype(int)
    ys = np.round(kps[:, KP_V]).astype(int)
    keep = ((xs >= PATCH_MARGIN) & (xs < w - PATCH_MARGIN)
            & (ys >= PATCH_MARGIN) & (ys < h - PATCH_MARGIN))
    idx = np.nonzero(keep)[0]
    if len(idx) == 0:
        return np.zeros((0, DESCRIPTOR_BYTES), dtype=np.uint8), idx
    ang = kps[idx, KP_ANGLE].astype(np.float64)
    c, s = np.cos(ang)[:, None], np.sin(ang)[:, None]
    x1, y1, x2, y2 = _PATTERN[:, 0], _PATTERN[:, 1], _PATTERN[:, 2], _PATTERN[:, 3]
    rx1 = np.round(c * x1 - s * y1).astype(int) + xs[idx][:, None]
    ry1 = np.round(s * x1 + c * y1).astype(int) + ys[idx][:, None]
    rx2 = np.round(c * x2 - s * y2).astype(int) + xs[idx][:, None]
    ry2 = np.round(s * x2 + c * y2).astype(int) + ys[idx][:, None]
    bits = smoothed[ry1, rx1] < smoothed[ry2, rx2]
    return np.packbits(bits, axis=1), idx


def binarize_plugin_descriptors(desc):
    """Quantize real-valued plugin descriptors to 256 bits by per-dimension
    median thresholding."""
    desc = np.asarray(desc, dtype=np.float64)
    if desc.ndim != 2 or len(desc) == 0:
        return np.zeros((0, DESCRIPTOR_BYTES), dtype=np.uint8)
    bits = desc > np.median(desc, axis=0, keepdims=True)
    d = bits.shape[1]
    if d >= DESCRIPTOR_BITS:
        bits = bits[:, :DESCRIPTOR_BITS]
    else:
        reps = -(-DESCRIPTOR_BITS // d)
        bits = np.tile(bits, (1, reps))[:, :DESCRIPTOR_BITS]
    return np.packbits(bits, axis=1)


# ---------------------------------------------------------------------------
# Manager: pyramid + tiling adaptors around a detector/descriptor pair
# ---------------------------------------------------------------------------

class FeatureManager:
    """Detector + descriptor behind pyramid and tile adaptors.

    A plugin is any callable image -> (keypoints, descriptors); non-binary
    plugin descriptors are median-binarized to 256 bits.
    """

    def __init__(self, config: FeatureTrackerConfig | None = None, plugin=None):
        self.config = config or FeatureTrackerConfig()
        self.plugin = plugin
        if self.config.detector_type == DETECTOR_PLUGIN and plugin is None:
            raise ValueError("plugin detector requires a plugin callable")

    def detect_and_compute(self, image):
        """Grayscale image -> (keypoints (N,5) float32, descriptors (N,32) uint8)."""
        img = np.asarray(image)
        if img.ndim == 3:
            img = img.mean(axis=2)
        img = img.astype(np.float32)
        cfg = self.config

        if cfg.detector_type == DETECTOR_PLUGIN:
            kps, desc = self.plugin(img)
            kps = np.asarray(kps, dtype=np.float32).reshape(-1, 5)
            desc = np.asarray(desc)
            if desc.dtype != np.uint8 or desc.shape[1] != DESCRIPTOR_BYTES:
                desc = binarize_plugin_descriptors(desc)
            return kps, desc

        levels = self._pyramid(img)
        per_level = []
        for octave, (lvl, scale) in enumerate(levels):
            kps = self._detect_level(lvl)
            if len(kps) == 0:
                continue
            kps[:, KP_ANGLE] = compute_orientations(lvl, kps)
            kps[:, KP_OCTAVE] = octave
            per_level.append((octave, lvl, scale, kps))
        if not per_level:
            return (np.zeros((0, 5), dtype=np.float32),
                    np.zeros((0, DESCRIPTOR_BYTES), dtype=np.uint8))

        merged = []
        for octave, lvl, scale, kps in per_level:
            full = kps.copy()
            full[:, KP_U] *= scale
            full[:, KP_V] *= scale
            merged.append(full)
        merged = np.concatenate(merged, axis=0)
        sel = self._tile_select(merged, img.shape)
        merged = merged[sel]

        # describe survivors on their own pyramid level
        descs = np.zeros((len(merged), DESCRIPTOR_BYTES), dtype=np.uint8)
        described = np.zeros(len(merged), dtype=bool)
        for octave, lvl, scale, _ in per_level:
            rows = np.nonzero(merged[:, KP_OCTAVE] == octave)[0]
            if len(rows) == 0:
                continue
            local = merged[rows].copy()
            local[:, KP_U] /= scale
            local[:, KP_V] /= scale
            d, kept = describe(lvl, local)
            descs[rows[kept]] = d
            described[rows[kept]] = True
        kps_out = merged[described]
        desc_out = descs[described]
        order = np.lexsort((kps_out[:, KP_U], kps_out[:, KP_V],
                            -kps_out[:, KP_RESPONSE]))
        return np.ascontiguousarray(kps_out[order]), np.ascontiguousarray(desc_out[order])

    # -- internals ------------------------------------------------------------

    def _pyramid(self, img):
        levels = [(img, 1.0)]
        for i in range(1, self.config.num_levels):
            scale = self.config.scale_factor ** i
            h = int(round(img.shape[0] / scale))
            w = int(round(img.shape[1] / scale))
            if h < 64 or w < 64:
                break
            lvl = ndimage.zoom(img, (h / img.shape[0], w / img.shape[1]), order=1,
                               mode="nearest", grid_mode=True)
            levels.append((lvl.astype(np.float32), scale))
        return levels

    def _detect_level(self, lvl):
        cfg = self.config
        if cfg.detector_type == DETECTOR_SHI_TOMASI:
            return shi_tomasi_detect(lvl, max_keypoints=cfg.num_features)
        return fast_detect(lvl, threshold=cfg.fast_threshold,
                           max_keypoints=cfg.num_features)

    def _tile_select(self, kps, shape):
        rows, cols = self.config.tile_grid
        n = self.config.num_features
        if rows * cols <= 1:
            order = np.argsort(-kps[:, KP_RESPONSE], kind="stable")
            return order[:n]
        quota = max(1, n // (rows * cols))
        h, w = shape
        ti = np.minimum((kps[:, KP_V] * rows / h).astype(int), rows - 1)
        tj = np.minimum((kps[:, KP_U] * cols / w).astype(int), cols - 1)
        tile_id = ti * cols + tj
        keep = []
        for t in np.unique(tile_id):
            rows_t = np.nonzero(tile_id == t)[0]
            order = rows_t[np.argsort(-kps[rows_t, KP_RESPONSE], kind="stable")]
            keep.append(order[:quota])
        keep = np.concatenate(keep)
        if len(keep) > n:
            keep = keep[np.argsort(-kps[keep, KP_RESPONSE], kind="stable")[:n]]
        return keep
