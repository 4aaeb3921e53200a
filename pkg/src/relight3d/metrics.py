"""Image, geometry, and color metrics used by the evaluation suite."""

from __future__ import annotations

import math

import numpy as np
from scipy.spatial import cKDTree

from .cameras import CameraPose, project_to_pixels

PSNR_CAP = 99.0


def psnr(img_a: np.ndarray, img_b: np.ndarray) -> float:
    """Peak signal-to-noise ratio in dB for [0,1] images; capped at 99 dB."""
    a = np.asarray(img_a, dtype=np.float64)
    b = np.asarray(img_b, dtype=np.float64)
    if a.shape != b.shape:
        raise ValueError(f"shape mismatch: {a.shape} vs {b.shape}")
    mse = float(np.mean((a - b) ** 2))
    if mse == 0.0:
        return PSNR_CAP
    return min(-10.0 * math.log10(mse), PSNR_CAP)


def chamfer(points_a: np.ndarray, points_b: np.ndarray) -> float:
    """Symmetric mean nearest-neighbor distance between two point sets."""
    a = np.asarray(points_a, dtype=np.float64).reshape(-1, 3)
    b = np.asarray(points_b, dtype=np.float64).reshape(-1, 3)
    if a.shape[0] == 0 or b.shape[0] == 0:
        raise ValueError("chamfer needs non-empty point sets")
    d_ab = cKDTree(b).query(a)[0]
    d_ba = cKDTree(a).query(b)[0]
    return 0.5 * (float(d_ab.mean()) + float(d_ba.mean()))


def cross_view_normal_consistency(
    normals: np.ndarray,
    depths: np.ndarray,
    masks: np.ndarray,
    cams: list[CameraPose],
    depth_tolerance: float = 0.02,
) -> float | None:
    """Mean angular error (degrees) of world normals at matched surface points.

    Every foreground pixel of view i is back-projected via its depth, projected
    into each other view j, and compared against view j's normal at the nearest
    pixel when j's stored depth agrees within `depth_tolerance` (relative), the
    visibility check. Returns None when no pair survives the checks.
    """
    normals = np.asarray(normals, dtype=np.float64)
    depths = np.asarray(depths, dtype=np.float64)
    masks = np.asarray(masks, dtype=np.float64)
    n_views, height, width = depths.shape
    if n_views < 2:
        raise ValueError("need at least 2 views")

    angles: list[np.ndarray] = []
    for i in range(n_views):
        sel = masks[i] > 0.5
        if not sel.any():
            continue
        origins = np.broadcast_to(cams[i].center, (*depths[i].shape, 3))
        # reconstruct the per-pixel ray directions from stored points is not
        # possible here, so rebuild them from the camera
        from .cameras import pixel_rays

        _, dirs = pixel_rays(cams[i], height, width)
        points = origins[sel] + depths[i][sel, None] * dirs[sel]
        n_i = normals[i][sel]
        for j in range(n_views):
            if j == i:
                continue
            rc, depth_j = project_to_pixels(cams[j], points, height, width)
            r0 = np.floor(rc[:, 0]).astype(np.int64)
            c0 = np.floor(rc[:, 1]).astype(np.int64)
            inside = (r0 >= 0) & (r0 + 1 < height) & (c0 >= 0) & (c0 + 1 < width)
            if not inside.any():
                continue
            r0, c0 = r0[inside], c0[inside]
            fr = rc[inside, 0] - r0
            fc = rc[inside, 1] - c0
            w00 = (1 - fr) * (1 - fc)
            w01 = (1 - fr) * fc
            w10 = fr * (1 - fc)
            w11 = fr * fc
            # all four neighbors must be foreground for a clean bilinear sample
            fg = (
                (masks[j][r0, c0] > 0.5)
                & (masks[j][r0, c0 + 1] > 0.5)
                & (masks[j][r0 + 1, c0] > 0.5)
                & (masks[j][r0 + 1, c0 + 1] > 0.5)
            )
            stored = (
                w00 * depths[j][r0, c0]
                + w01 * depths[j][r0, c0 + 1]
                + w10 * depths[j][r0 + 1, c0]
                + w11 * depths[j][r0 + 1, c0 + 1]
            )
            visible = fg & (np.abs(stored - depth_j[inside]) <= depth_tolerance * depth_j[inside])
            if not visible.any():
                continue
            a = n_i[inside][visible]
            b = (
                w00[visible, None] * normals[j][r0[visible], c0[visible]]
                + w01[visible, None] * normals[j][r0[visible], c0[visible] + 1]
                + w10[visible, None] * normals[j][r0[visible] + 1, c0[visible]]
                + w11[visible, None] * normals[j][r0[visible] + 1, c0[visible] + 1]
            )
            b = b / np.maximum(np.linalg.norm(b, axis=-1, keepdims=True), 1e-12)
            dots = np.clip(np.sum(a * b, axis=-1), -1.0, 1.0)
            angles.append(np.degrees(np.arccos(dots)))
    if not angles:
        return None
    return float(np.concatenate(angles).mean())


def normal_smoothness(normal: np.ndarray, mask: np.ndarray) -> float:
    """Mean angular difference (degrees) between adjacent foreground normals.

    Lower is smoother. Pairs straddling the silhouette are excluded.
    """
    normal = np.asarray(normal, dtype=np.float64)
    mask = np.asarray(mask, dtype=np.float64) > 0.5
    diffs = []
    for axis in (0, 1):
        a = normal[:-1, :] if axis == 0 else normal[:, :-1]
        b = normal[1:, :] if axis == 0 else normal[:, 1:]
        ma = mask[:-1, :] if axis == 0 else mask[:, :-1]
        mb = mask[1:, :] if axis == 0 else mask[:, 1:]
        both = ma & mb
        if both.any():
            dots = np.clip(np.sum(a[both] * b[both], axis=-1), -1.0, 1.0)
            diffs.append(np.degrees(np.arccos(dots)))
    if not diffs:
        return float("nan")
    return float(np.concatenate(diffs).mean())


def rgb_to_hue_chroma(rgb: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Hue in degrees [0,360) and chroma (max-min) per pixel."""
    rgb = np.asarray(rgb, dtype=np.float64)
    r, g, b = rgb[..., 0], rgb[..., 1], rgb[..., 2]
    mx = rgb.max(axis=-1)
    mn = rgb.min(axis=-1)
    c = mx - mn
    hue = np.zeros_like(mx)
    safe = c > 1e-12
    rr, gg, bb, cc = r[safe], g[safe], b[safe], c[safe]
    mx_s = mx[safe]
    h = np.where(
        mx_s == rr,
        ((gg - bb) / cc) % 6.0,
        np.where(mx_s == gg, (bb - rr) / cc + 2.0, (rr - gg) / cc + 4.0),
    )
    hue[safe] = 60.0 * h
    return hue, c


def mean_hue(image: np.ndarray, mask: np.ndarray) -> float:
    """Chroma-weighted circular mean hue (degrees) over foreground pixels."""
    hue, chroma = rgb_to_hue_chroma(image)
    sel = np.asarray(mask) > 0.5
    w = chroma[sel]
    if w.sum() <= 1e-12:
        return float("nan")
    rad = np.radians(hue[sel])
    x = float((w * np.cos(rad)).sum())
    y = float((w * np.sin(rad)).sum())
    return float(math.degrees(math.atan2(y, x)) % 360.0)


def hue_histogram(image: np.ndarray, mask: np.ndarray, bins: int = 12) -> np.ndarray:
    """Chroma-weighted hue histogram over foreground pixels, normalized to sum 1."""
    hue, chroma = rgb_to_hue_chroma(image)
    sel = np.asarray(mask) > 0.5
    hist, _ = np.histogram(hue[sel], bins=bins, range=(0.0, 360.0), weights=chroma[sel])
    total = hist.sum()
    return hist / total if total > 0 else hist


def hue_distance(h1: float, h2: float) -> float:
    """Circular distance in degrees, in [0, 180]."""
    d = abs(h1 - h2) % 360.0
    return min(d, 360.0 - d)
