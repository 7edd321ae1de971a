"""Contour-preserving multi-view depth projection.

Pipeline per view: rotate -> quantize into an (H, W, B) voxel grid ->
densify (cube max filter) -> bilateral smoothing -> squeeze to a depth map
(nearest occupied surface per pixel) -> median filter. Occupied voxels store
0.1 + 0.9*z so that empty (0) is distinguishable from the nearest plane and
min-pooling over nonzero intensities selects the closest surface.

The hot kernels are JIT-compiled with numba (nogil, cached) and write into
caller-provided buffers; multi-view projection reuses one scratch workspace
per worker thread so the hot path never hits the allocator.
"""

from __future__ import annotations

import json
import math
import os
import threading
from dataclasses import dataclass
from concurrent.futures import ThreadPoolExecutor
from pathlib import Path

import numpy as np
from numba import njit
from PIL import Image

from .geomio import PointCloud, ViewPose, rotate_to_view

MAIN_PROMPT_TEMPLATE = "A realistic {metadata}."
FALLBACK_MAIN_PROMPT = "A realistic object."
POSITIVE_PROMPT = ("best quality, extremely realistic, very professional, "
                   "extremely detailed, sharp edge, normal, complete.")
NEGATIVE_PROMPT = ("low-resolution, very blurry, unrealistic, worst quality, "
                   "deep depth of field, large depth of field, distorted, "
                   "cropped, unusual, warped, incomplete.")


class ProjectionError(Exception):
    pass


@dataclass(frozen=True)
class ProjectionConfig:
    h: int = 224
    w: int = 224
    b: int = 32
    densify_kernel: int = 7
    bilateral_kernel: int = 5
    sigma_spatial: float = 2.0
    sigma_intensity: float = 0.1
    median_kernel: int = 7

    def __post_init__(self):
        if min(self.h, self.w, self.b) < 1:
            raise ValueError("grid dimensions must be >= 1")
        for name in ("densify_kernel", "bilateral_kernel", "median_kernel"):
            k = getattr(self, name)
            if k < 1 or k % 2 == 0:
                raise ValueError(f"{name} must be odd and >= 1, got {k}")
        if self.sigma_spatial <= 0 or self.sigma_intensity <= 0:
            raise ValueError("sigmas must be positive")


# ---------------------------------------------------------------------------
# numba kernels
# ---------------------------------------------------------------------------

# exp(x) for x in [-700, 0]: Cephes-style rational approximation with a
# power-of-two table for the final scaling; accurate to a few ulp and cheaper
# than the libm call inside tight loops.
_LOG2E = 1.4426950408889634073599
_EXP_C1 = 6.93145751953125e-1
_EXP_C2 = 1.42860682030941723212e-6
_EXP_P0 = 1.26177193074810590878e-4
_EXP_P1 = 3.02994407707441961300e-2
_EXP_P2 = 9.99999999999999999910e-1
_EXP_Q0 = 3.00198505138664455042e-6
_EXP_Q1 = 2.52448340349684104192e-3
_EXP_Q2 = 2.27265548208155028766e-1
_EXP_Q3 = 2.00000000000000000005e0

_POW2 = 2.0 ** (np.arange(2048, dtype=np.float64) - 1100.0)


@njit(cache=True, nogil=True, fastmath=True, error_model="numpy", inline="always")
def _fexp(x, pow2):
    nf = math.floor(_LOG2E * x + 0.5)
    xr = x - nf * _EXP_C1
    xr = xr - nf * _EXP_C2
    xx = xr * xr
    px = xr * ((_EXP_P0 * xx + _EXP_P1) * xx + _EXP_P2)
    e = px / ((((_EXP_Q0 * xx + _EXP_Q1) * xx + _EXP_Q2) * xx + _EXP_Q3) - px)
    return (1.0 + 2.0 * e) * pow2[int(nf) + 1100]


@njit(cache=True, nogil=True)
def _first_out_of_range(pts):
    for i in range(pts.shape[0]):
        for a in range(3):
            v = pts[i, a]
            if not (0.0 <= v <= 1.0):
                return i
    return -1


@njit(cache=True, nogil=True)
def _quantize_kernel(pts, grid):
    H, W, B = grid.shape
    flat = grid.ravel()
    for i in range(H * W * B):
        flat[i] = 0.0
    for i in range(pts.shape[0]):
        x = pts[i, 0]
        y = pts[i, 1]
        z = pts[i, 2]
        h = int(y * H)
        if h >= H:
            h = H - 1
        w = int(x * W)
        if w >= W:
            w = W - 1
        b = int(z * B)
        if b >= B:
            b = B - 1
        # keep the nearest surface; the intensity is strictly increasing in z,
        # so min intensity among occupied == min depth
        inten = 0.1 + 0.9 * z
        cur = grid[h, w, b]
        if cur == 0.0 or inten < cur:
            grid[h, w, b] = inten
    return grid


@njit(cache=True, nogil=True)
def _densify_kernel(grid, kernel, t1, t2, out):
    H, W, B = grid.shape
    r = kernel // 2
    # separable: cube max = 1-D max along each axis in turn; out-of-bounds
    # neighbors are simply absent from the clipped windows (values are >= 0,
    # so that equals zero padding)
    WB = W * B
    f0 = grid.reshape(H, WB)
    f1 = t1.reshape(H, WB)
    for h in range(H):
        lo = h - r if h - r > 0 else 0
        hi = h + r if h + r < H - 1 else H - 1
        dst = f1[h]
        src = f0[lo]
        for i in range(WB):
            dst[i] = src[i]
        for hh in range(lo + 1, hi + 1):
            s = f0[hh]
            for i in range(WB):
                v = s[i]
                if v > dst[i]:
                    dst[i] = v
    for h in range(H):
        slab = t1[h]
        oslab = t2[h]
        for w in range(W):
            lo = w - r if w - r > 0 else 0
            hi = w + r if w + r < W - 1 else W - 1
            dst = oslab[w]
            src = slab[lo]
            for b in range(B):
                dst[b] = src[b]
            for ww in range(lo + 1, hi + 1):
                s = slab[ww]
                for b in range(B):
                    v = s[b]
                    if v > dst[b]:
                        dst[b] = v
    for h in range(H):
        for w in range(W):
            col = t2[h, w]
            dst = out[h, w]
            for b in range(B):
                lo = b - r if b - r > 0 else 0
                hi = b + r if b + r < B - 1 else B - 1
                m = col[lo]
                for bb in range(lo + 1, hi + 1):
                    v = col[bb]
                    if v > m:
                        m = v
                dst[b] = m
    return out


@njit(cache=True, nogil=True, fastmath=True, error_model="numpy")
def _bilateral_kernel(grid, kernel, sigma_spatial, sigma_intensity, pow2, nd, out):
    """Joint spatial/intensity Gaussian smoothing over occupied voxels.

    Empty voxels stay 0 and never contribute as neighbors; out-of-bounds
    neighbors are excluded. Two exact shortcuts keep the hot loop cheap: the
    weight is symmetric in the pair, so each unordered pair is visited once
    and accumulated to both endpoints (numerator/denominator interleaved per
    voxel for locality), and the intensity factor is memoized per center
    (max-dilated grids repeat neighbor intensities in runs).
    """
    H, W, B = grid.shape
    r = kernel // 2
    g1 = np.empty(2 * r + 1, np.float64)
    inv2ss = 1.0 / (2.0 * sigma_spatial * sigma_spatial)
    for d in range(-r, r + 1):
        g1[d + r] = math.exp(-(d * d) * inv2ss)
    ninv2si = -1.0 / (2.0 * sigma_intensity * sigma_intensity)
    flat_nd = nd.reshape(H * W * B * 2)
    for i in range(H * W * B * 2):
        flat_nd[i] = 0.0
    for h in range(H):
        for w in range(W):
            base = grid[h, w]
            occ_any = False
            for b in range(B):
                if base[b] != 0.0:
                    occ_any = True
                    break
            if not occ_any:
                continue
            ndrow = nd[h, w]
            for b in range(B):
                iv = base[b]
                if iv == 0.0:
                    continue
                cn = iv  # self term: spatial and intensity weights are 1
                cd = 1.0
                prev_iu = iv
                prev_e = 1.0
                bmax = b + r if b + r < B - 1 else B - 1
                b0 = b - r if b - r > 0 else 0
                # pairs within the same depth column, positive offset
                for bb in range(b + 1, bmax + 1):
                    iu = base[bb]
                    if iu == 0.0:
                        continue
                    if iu != prev_iu:
                        di = iv - iu
                        prev_e = _fexp(di * di * ninv2si, pow2)
                        prev_iu = iu
                    wgt = g1[bb - b + r] * prev_e
                    cn += wgt * iu
                    cd += wgt
                    ndrow[bb, 0] += wgt * iv
                    ndrow[bb, 1] += wgt
                # pairs in columns to the right within the same image row
                for dw in range(1, r + 1):
                    ww = w + dw
                    if ww >= W:
                        break
                    col = grid[h, ww]
                    ndcol = nd[h, ww]
                    gw = g1[dw + r]
                    for bb in range(b0, bmax + 1):
                        iu = col[bb]
                        if iu == 0.0:
                            continue
                        if iu != prev_iu:
                            di = iv - iu
                            prev_e = _fexp(di * di * ninv2si, pow2)
                            prev_iu = iu
                        wgt = gw * g1[bb - b + r] * prev_e
                        cn += wgt * iu
                        cd += wgt
                        ndcol[bb, 0] += wgt * iv
                        ndcol[bb, 1] += wgt
                # pairs in rows below
                for dh in range(1, r + 1):
                    hh = h + dh
                    if hh >= H:
                        break
                    gh = g1[dh + r]
                    w0 = w - r if w - r > 0 else 0
                    w1 = w + r if w + r < W - 1 else W - 1
                    for ww in range(w0, w1 + 1):
                        col = grid[hh, ww]
                        ndcol = nd[hh, ww]
                        ghw = gh * g1[ww - w + r]
                        for bb in range(b0, bmax + 1):
                            iu = col[bb]
                            if iu == 0.0:
                                continue
                            if iu != prev_iu:
                                di = iv - iu
                                prev_e = _fexp(di * di * ninv2si, pow2)
                                prev_iu = iu
                            wgt = ghw * g1[bb - b + r] * prev_e
                            cn += wgt * iu
                            cd += wgt
                            ndcol[bb, 0] += wgt * iv
                            ndcol[bb, 1] += wgt
                ndrow[b, 0] += cn
                ndrow[b, 1] += cd
    for h in range(H):
        for w in range(W):
            for b in range(B):
                d = nd[h, w, b, 1]
                out[h, w, b] = nd[h, w, b, 0] / d if d > 0.0 else 0.0
    return out


@njit(cache=True, nogil=True, inline="always")
def _select_kth(buf, m, k):
    """k-th smallest of buf[:m] by iterative Hoare quickselect."""
    lo = 0
    hi = m - 1
    while lo < hi:
        pivot = buf[(lo + hi) >> 1]
        i = lo
        j = hi
        while i <= j:
            while buf[i] < pivot:
                i += 1
            while buf[j] > pivot:
                j -= 1
            if i <= j:
                tmp = buf[i]
                buf[i] = buf[j]
                buf[j] = tmp
                i += 1
                j -= 1
        if k <= j:
            hi = j
        elif k >= i:
            lo = i
        else:
            break
    return buf[k]


@njit(cache=True, nogil=True)
def _median_kernel(img, kernel, out):
    H, W = img.shape
    r = kernel // 2
    buf = np.empty(kernel * kernel, np.float64)
    for h in range(H):
        h0 = h - r if h - r > 0 else 0
        h1 = h + r if h + r < H - 1 else H - 1
        for w in range(W):
            w0 = w - r if w - r > 0 else 0
            w1 = w + r if w + r < W - 1 else W - 1
            m = 0
            for hh in range(h0, h1 + 1):
                for ww in range(w0, w1 + 1):
                    buf[m] = img[hh, ww]
                    m += 1
            # even-sized boundary neighborhoods take the lower median
            out[h, w] = _select_kth(buf, m, (m - 1) >> 1)
    return out


@njit(cache=True, nogil=True)
def _squeeze_kernel(grid, out):
    H, W, B = grid.shape
    for h in range(H):
        for w in range(W):
            col = grid[h, w]
            m = np.inf
            for b in range(B):
                v = col[b]
                if v > 0.0 and v < m:
                    m = v
            out[h, w] = m if m != np.inf else 0.0
    return out


class Workspace:
    """Preallocated scratch buffers for one (H, W, B) pipeline worker."""

    def __init__(self, h: int, w: int, b: int):
        self.dims = (h, w, b)
        self.grid = np.empty((h, w, b))
        self.t1 = np.empty((h, w, b))
        self.t2 = np.empty((h, w, b))
        self.dense = np.empty((h, w, b))
        self.nd = np.empty((h, w, b, 2))
        self.smooth = np.empty((h, w, b))
        self.depth = np.empty((h, w))

    @classmethod
    def for_config(cls, cfg: "ProjectionConfig") -> "Workspace":
        return cls(cfg.h, cfg.w, cfg.b)


def warmup_kernels() -> None:
    """Force JIT compilation of all kernels on a tiny grid."""
    pts = np.array([[0.5, 0.5, 0.5]])
    ws = Workspace(4, 4, 4)
    _first_out_of_range(pts)
    _quantize_kernel(pts, ws.grid)
    _densify_kernel(ws.grid, 3, ws.t1, ws.t2, ws.dense)
    _bilateral_kernel(ws.dense, 3, 2.0, 0.1, _POW2, ws.nd, ws.smooth)
    _squeeze_kernel(ws.smooth, ws.depth)
    _median_kernel(ws.depth, 3, np.empty((4, 4)))


# ---------------------------------------------------------------------------
# pipeline stages
# ---------------------------------------------------------------------------

def quantize(pc: PointCloud, cfg: ProjectionConfig) -> np.ndarray:
    """Scatter points into an (H, W, B) grid: point (x, y, z) lands in voxel
    (floor(y*H), floor(x*W), floor(z*B)) with 1.0 clamped into the last cell.
    A voxel keeps the intensity 0.1 + 0.9*z of its nearest (smallest-z) point;
    empty voxels are 0."""
    pts = pc.points
    bad = _first_out_of_range(pts)
    if bad >= 0:
        raise ProjectionError(
            f"point {bad} of '{pc.id}' outside [0,1]^3: {pts[bad].tolist()}")
    return _quantize_kernel(pts, np.empty((cfg.h, cfg.w, cfg.b)))


def densify(grid: np.ndarray, kernel: int) -> np.ndarray:
    """Replace each voxel with the maximum over its kernel^3 neighborhood
    (zero padding at the boundary). The input grid is not modified."""
    if kernel % 2 == 0 or kernel < 1:
        raise ValueError("kernel must be odd and >= 1")
    g = np.ascontiguousarray(grid, dtype=np.float64)
    return _densify_kernel(g, kernel, np.empty_like(g), np.empty_like(g),
                           np.empty_like(g))


def smooth_bilateral(grid: np.ndarray, kernel: int, sigma_spatial: float,
                     sigma_intensity: float) -> np.ndarray:
    """Bilateral smoothing: every occupied voxel becomes the normalized
    Gaussian-weighted average of the occupied voxels in its kernel^3
    neighborhood (itself included), with spatial weight
    exp(-||v-u||^2 / (2*sigma_spatial^2)) in voxel index units and intensity
    weight exp(-|I_v-I_u|^2 / (2*sigma_intensity^2)). Weights are normalized
    to sum to 1 over the neighborhood. Empty voxels stay 0."""
    if kernel % 2 == 0 or kernel < 1:
        raise ValueError("kernel must be odd and >= 1")
    if sigma_spatial <= 0 or sigma_intensity <= 0:
        raise ValueError("sigmas must be positive")
    g = np.ascontiguousarray(grid, dtype=np.float64)
    nd = np.empty(g.shape + (2,))
    return _bilateral_kernel(g, kernel, sigma_spatial, sigma_intensity,
                             _POW2, nd, np.empty_like(g))


def squeeze(grid: np.ndarray) -> np.ndarray:
    """Collapse the depth axis: per (h, w) column, the minimum over occupied
    intensities (the nearest surface), or 0 for an empty column."""
    g = np.ascontiguousarray(grid, dtype=np.float64)
    return _squeeze_kernel(g, np.empty(g.shape[:2]))


def median_filter(img: np.ndarray, kernel: int) -> np.ndarray:
    """Median over the kernel^2 neighborhood, restricted to in-bounds pixels;
    even-sized boundary neighborhoods take the lower median."""
    if kernel % 2 == 0 or kernel < 1:
        raise ValueError("kernel must be odd and >= 1")
    img = np.ascontiguousarray(img, dtype=np.float64)
    return _median_kernel(img, kernel, np.empty_like(img))


def project_view(pc: PointCloud, pose: ViewPose, cfg: ProjectionConfig,
                 ws: Workspace | None = None) -> np.ndarray:
    """One full view: rotate, quantize, densify, smooth, squeeze, median.
    A workspace makes the stages reuse its buffers; the returned map is
    always freshly allocated."""
    rotated = rotate_to_view(pc, pose)
    bad = _first_out_of_range(rotated.points)
    if bad >= 0:
        raise ProjectionError(
            f"point {bad} of '{pc.id}' outside [0,1]^3 after rotation")
    if ws is None or ws.dims != (cfg.h, cfg.w, cfg.b):
        ws = Workspace.for_config(cfg)
    _quantize_kernel(rotated.points, ws.grid)
    _densify_kernel(ws.grid, cfg.densify_kernel, ws.t1, ws.t2, ws.dense)
    _bilateral_kernel(ws.dense, cfg.bilateral_kernel, cfg.sigma_spatial,
                      cfg.sigma_intensity, _POW2, ws.nd, ws.smooth)
    _squeeze_kernel(ws.smooth, ws.depth)
    return _median_kernel(ws.depth, cfg.median_kernel,
                          np.empty((cfg.h, cfg.w)))


def project_views(pc: PointCloud, poses: list[ViewPose],
                  cfg: ProjectionConfig, jobs: int = 1) -> list[np.ndarray]:
    """Run the full per-view pipeline for every pose, in pose order.

    With jobs > 1 the views are processed on a thread pool (the kernels
    release the GIL) with one scratch workspace per worker; outputs are
    deterministic either way.
    """
    local = threading.local()

    def run(pose: ViewPose) -> np.ndarray:
        ws = getattr(local, "ws", None)
        if ws is None or ws.dims != (cfg.h, cfg.w, cfg.b):
            ws = Workspace.for_config(cfg)
            local.ws = ws
        try:
            return project_view(pc, pose, cfg, ws)
        except Exception as exc:
            raise ProjectionError(f"view {pose.index} of '{pc.id}': {exc}") from exc

    workers = min(jobs, len(poses), os.cpu_count() or 1)
    if workers <= 1:
        return [run(p) for p in poses]
    with ThreadPoolExecutor(max_workers=workers) as pool:
        return list(pool.map(run, poses))


# ---------------------------------------------------------------------------
# exports
# ---------------------------------------------------------------------------

def export_control_image(depth: np.ndarray) -> np.ndarray:
    """Remap a depth map to the 8-bit inverse-depth control image: background
    stays 0; occupied pixels map 1/depth linearly onto [1, 255] (round half
    up), so brighter means closer. A single occupied depth maps to 255."""
    occ = depth > 0.0
    out = np.zeros(depth.shape, dtype=np.uint8)
    if not occ.any():
        return out
    inv = 1.0 / depth[occ]
    r_min = inv.min()
    r_max = inv.max()
    if r_max == r_min:
        out[occ] = 255
        return out
    scaled = 1.0 + (inv - r_min) * (254.0 / (r_max - r_min))
    out[occ] = np.floor(scaled + 0.5).astype(np.uint8)
    return out


def depth_to_rgb8(depth: np.ndarray) -> np.ndarray:
    """Quantize a [0,1] depth map to 8 bits and triple it to RGB."""
    q = np.floor(np.clip(depth, 0.0, 1.0) * 255.0 + 0.5).astype(np.uint8)
    return np.repeat(q[:, :, None], 3, axis=2)


def save_depth_png(depth: np.ndarray, path: str | Path) -> None:
    Image.fromarray(depth_to_rgb8(depth), mode="RGB").save(Path(path), format="PNG")


def save_control_png(control: np.ndarray, path: str | Path) -> None:
    Image.fromarray(control, mode="L").save(Path(path), format="PNG")


def build_generation_manifest(pc: PointCloud, poses: list[ViewPose],
                              control_paths: list[str]) -> dict:
    """Per-view generation requests: control image plus the main prompt with
    the shape's metadata filled in and the fixed positive/negative prompts.
    Missing metadata falls back to a generic prompt and sets a warning flag."""
    if len(poses) != len(control_paths):
        raise ValueError("one control image path per pose required")
    missing = not pc.metadata
    main = (FALLBACK_MAIN_PROMPT if missing
            else MAIN_PROMPT_TEMPLATE.format(metadata=pc.metadata))
    views = [
        {
            "pose": {"index": pose.index, "azimuth_deg": pose.azimuth_deg,
                     "elevation_deg": pose.elevation_deg},
            "control_png": control_paths[k],
            "main_prompt": main,
            "positive_prompt": POSITIVE_PROMPT,
            "negative_prompt": NEGATIVE_PROMPT,
        }
        for k, pose in enumerate(poses)
    ]
    manifest = {"shape_id": pc.id, "views": views}
    if missing:
        manifest["metadata_missing"] = True
    return manifest


def export_generation_manifest(pc: PointCloud, poses: list[ViewPose],
                               control_paths: list[str], out_path: str | Path) -> dict:
    manifest = build_generation_manifest(pc, poses, control_paths)
    Path(out_path).write_text(json.dumps(manifest, indent=2) + "\n")
    return manifest
