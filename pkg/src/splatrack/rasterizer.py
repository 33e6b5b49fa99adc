"""Tile-based splat rasterizer producing log-intensity images, with a
backward pass to camera-frame means and the world-to-camera rotation.

Pixel (row i, column j) is sampled at image coordinate (u, v) = (j, i).
Colours are reduced to Rec.601 luma per gaussian before blending; blending
is linear so this equals the luma of the blended colour.
"""

from dataclasses import dataclass
import math

import numba
import numpy as np

from .gaussian_map import EmptyMapError
from .lie import camera_center

TILE = 16
BLOCK = 4  # pixel sub-blocks that share a pre-filtered candidate list
ALPHA_MAX = 0.99
T_MIN = 1e-4
COV2D_BLUR = 0.3
LOG_FLOOR = 1e-3
LUMA = np.array([0.299, 0.587, 0.114])
# Footprint radius in Mahalanobis units; the truncation jump is o*exp(-18).
EXTENT_SIGMA = 6.0


@dataclass(frozen=True)
class CameraIntrinsics:
    fx: float
    fy: float
    cx: float
    cy: float
    width: int
    height: int
    near_clip: float = 0.05

    def __post_init__(self):
        if self.fx <= 0 or self.fy <= 0:
            raise ValueError("focal lengths must be positive")
        if self.width <= 0 or self.height <= 0:
            raise ValueError("image size must be positive")
        if self.near_clip <= 0:
            raise ValueError("near_clip must be positive")

    def downscaled(self, level):
        """Intrinsics of the image average-pooled by ``2**level``."""
        s = 2 ** level
        off = (s - 1) / 2.0
        return CameraIntrinsics(self.fx / s, self.fy / s, (self.cx - off) / s,
                                (self.cy - off) / s, self.width // s,
                                self.height // s, self.near_clip)


@dataclass(frozen=True)
class Splat2D:
    mean2d: np.ndarray
    cov2d: np.ndarray
    depth: float
    color: np.ndarray
    opacity: float
    source_index: int


@dataclass
class Projection:
    """Per-gaussian screen-space quantities for one pose (arrays over the map)."""

    p_cam: np.ndarray      # (N, 3)
    visible: np.ndarray    # (N,) bool
    mean2d: np.ndarray     # (N, 2)
    J: np.ndarray          # (N, 2, 3)
    cov2d: np.ndarray      # (N, 2, 2) including the +0.3 px^2 regularization
    conic: np.ndarray      # (N, 3) inverse covariance (a, b, c)
    radius: np.ndarray     # (N, 2) half extents in pixels (x, y)


def _project(means, cov3d, T_cw, intr, extent):
    R = T_cw[:3, :3]
    p = means @ R.T + T_cw[:3, 3]
    x, y, z = p[:, 0], p[:, 1], p[:, 2]
    in_front = z > intr.near_clip
    zs = np.where(in_front, z, 1.0)
    n = means.shape[0]
    J = np.zeros((n, 2, 3))
    J[:, 0, 0] = intr.fx / zs
    J[:, 0, 2] = -intr.fx * x / zs**2
    J[:, 1, 1] = intr.fy / zs
    J[:, 1, 2] = -intr.fy * y / zs**2
    M = J @ R
    cov2d = M @ cov3d @ np.swapaxes(M, 1, 2)
    cov2d[:, 0, 0] += COV2D_BLUR
    cov2d[:, 1, 1] += COV2D_BLUR
    det = cov2d[:, 0, 0] * cov2d[:, 1, 1] - cov2d[:, 0, 1] ** 2
    conic = np.stack([cov2d[:, 1, 1] / det, -cov2d[:, 0, 1] / det, cov2d[:, 0, 0] / det], axis=1)
    mean2d = np.stack([intr.fx * x / zs + intr.cx, intr.fy * y / zs + intr.cy], axis=1)
    radius = extent * np.sqrt(np.stack([cov2d[:, 0, 0], cov2d[:, 1, 1]], axis=1))
    on_screen = ((mean2d[:, 0] + radius[:, 0] >= 0) & (mean2d[:, 0] - radius[:, 0] <= intr.width - 1)
                 & (mean2d[:, 1] + radius[:, 1] >= 0) & (mean2d[:, 1] - radius[:, 1] <= intr.height - 1))
    visible = in_front & on_screen & (det > 0)
    return Projection(p, visible, mean2d, J, cov2d, conic, radius)


def project_gaussian(g, T_cw, intr, index=0, extent=EXTENT_SIGMA):
    """Project a single :class:`Gaussian3D`; returns ``None`` when culled."""
    from .gaussian_map import covariance, sh_to_color

    cov = covariance(g)[None]
    proj = _project(np.asarray(g.mean, dtype=np.float64)[None], cov, T_cw, intr, extent)
    if not proj.visible[0]:
        return None
    d = np.asarray(g.mean) - camera_center(T_cw)
    color = sh_to_color(g.sh_coeffs, d / np.linalg.norm(d))
    return Splat2D(proj.mean2d[0], proj.cov2d[0], float(proj.p_cam[0, 2]), color,
                   float(g.opacity), index)


# -- kernels -----------------------------------------------------------------

@numba.njit(cache=True)
def _bin_tiles(order, visible, x0, x1, y0, y1, tiles_x, n_tiles):
    counts = np.zeros(n_tiles + 1, dtype=np.int64)
    for g in order:
        if not visible[g]:
            continue
        for ty in range(y0[g], y1[g] + 1):
            for tx in range(x0[g], x1[g] + 1):
                counts[ty * tiles_x + tx + 1] += 1
    offsets = np.cumsum(counts)
    ids = np.empty(offsets[-1], dtype=np.int64)
    fill = offsets[:-1].copy()
    for g in order:
        if not visible[g]:
            continue
        for ty in range(y0[g], y1[g] + 1):
            for tx in range(x0[g], x1[g] + 1):
                t = ty * tiles_x + tx
                ids[fill[t]] = g
                fill[t] += 1
    return offsets, ids


@numba.njit(cache=True)
def _block_candidates(ent, start, end, bx0, by0, out):
    """Entries of one tile whose footprint box meets a BLOCK x BLOCK pixel block."""
    n = 0
    for k in range(start, end):
        if (ent[k, 0] + ent[k, 7] >= bx0 and ent[k, 0] - ent[k, 7] <= bx0 + BLOCK - 1
                and ent[k, 1] + ent[k, 8] >= by0 and ent[k, 1] - ent[k, 8] <= by0 + BLOCK - 1):
            out[n] = k
            n += 1
    return n


@numba.njit(cache=True, parallel=True)
def _forward(width, height, tiles_x, n_tiles, offsets, ent, extent2):
    # ent columns: mean x, mean y, conic a, b, c, opacity, intensity, box half-width, half-height
    image = np.zeros((height, width))
    final_T = np.ones((height, width))
    n_last = np.zeros((height, width), dtype=np.int64)
    for t in numba.prange(n_tiles):
        tx = t % tiles_x
        ty = t // tiles_x
        start = offsets[t]
        end = offsets[t + 1]
        cand = np.empty(end - start, dtype=np.int64)
        for by0 in range(ty * TILE, min((ty + 1) * TILE, height), BLOCK):
            for bx0 in range(tx * TILE, min((tx + 1) * TILE, width), BLOCK):
                m = _block_candidates(ent, start, end, bx0, by0, cand)
                for i in range(by0, min(by0 + BLOCK, height)):
                    for j in range(bx0, min(bx0 + BLOCK, width)):
                        T = 1.0
                        C = 0.0
                        last = start
                        for q in range(m):
                            k = cand[q]
                            dx = ent[k, 0] - j
                            dy = ent[k, 1] - i
                            maha = ent[k, 2] * dx * dx + 2.0 * ent[k, 3] * dx * dy + ent[k, 4] * dy * dy
                            if maha > extent2:
                                continue
                            alpha = min(ALPHA_MAX, ent[k, 5] * math.exp(-0.5 * maha))
                            test_T = T * (1.0 - alpha)
                            if test_T < T_MIN:
                                break
                            C += ent[k, 6] * alpha * T
                            T = test_T
                            last = k + 1
                        image[i, j] = C
                        final_T[i, j] = T
                        n_last[i, j] = last
    return image, final_T, n_last


@numba.njit(cache=True, parallel=True)
def _backward(width, height, tiles_x, n_tiles, offsets, ent, extent2, final_T, n_last, grad):
    # one gradient slot per tile-list entry keeps the reduction order fixed
    out = np.zeros((ent.shape[0], 5))
    for t in numba.prange(n_tiles):
        tx = t % tiles_x
        ty = t // tiles_x
        start = offsets[t]
        end = offsets[t + 1]
        cand = np.empty(end - start, dtype=np.int64)
        for by0 in range(ty * TILE, min((ty + 1) * TILE, height), BLOCK):
            for bx0 in range(tx * TILE, min((tx + 1) * TILE, width), BLOCK):
                m = _block_candidates(ent, start, end, bx0, by0, cand)
                for i in range(by0, min(by0 + BLOCK, height)):
                    for j in range(bx0, min(bx0 + BLOCK, width)):
                        dL_dC = grad[i, j]
                        if dL_dC == 0.0:
                            continue
                        T = final_T[i, j]
                        stop = n_last[i, j]
                        behind = 0.0
                        for q in range(m - 1, -1, -1):
                            k = cand[q]
                            if k >= stop:
                                continue
                            dx = ent[k, 0] - j
                            dy = ent[k, 1] - i
                            a = ent[k, 2]
                            b = ent[k, 3]
                            c = ent[k, 4]
                            maha = a * dx * dx + 2.0 * b * dx * dy + c * dy * dy
                            if maha > extent2:
                                continue
                            raw = ent[k, 5] * math.exp(-0.5 * maha)
                            alpha = min(ALPHA_MAX, raw)
                            T = T / (1.0 - alpha)
                            dL_dalpha = (ent[k, 6] - behind) * T * dL_dC
                            behind = alpha * ent[k, 6] + (1.0 - alpha) * behind
                            if raw > ALPHA_MAX:
                                continue
                            dL_dmaha = -0.5 * raw * dL_dalpha
                            out[k, 0] += dL_dmaha * 2.0 * (a * dx + b * dy)
                            out[k, 1] += dL_dmaha * 2.0 * (b * dx + c * dy)
                            out[k, 2] += dL_dmaha * dx * dx
                            out[k, 3] += dL_dmaha * 2.0 * dx * dy
                            out[k, 4] += dL_dmaha * dy * dy
    return out


@numba.njit(cache=True)
def _reduce_entries(ids, entry, n):
    out = np.zeros((n, 5))
    for k in range(ids.shape[0]):
        for c in range(5):
            out[ids[k], c] += entry[k, c]
    return out


# -- public API ----------------------------------------------------------------

@dataclass
class RenderedImage:
    """Forward output plus everything the backward pass needs to replay it."""

    log_intensity: np.ndarray
    luma: np.ndarray
    T_cw: np.ndarray
    intr: CameraIntrinsics
    projection: Projection
    intensity: np.ndarray
    opacity: np.ndarray
    cov3d: np.ndarray
    offsets: np.ndarray
    ids: np.ndarray
    entries: np.ndarray
    final_T: np.ndarray
    n_last: np.ndarray
    extent: float

    @property
    def shape(self):
        return self.log_intensity.shape


@dataclass
class RasterGradients:
    d_point: np.ndarray   # (N, 3) dL/d(camera-frame mean)
    d_rot: np.ndarray     # (N, 3, 3) dL/dR_cw through the 2D covariance
    d_mean2d: np.ndarray  # (N, 2)
    d_cov2d: np.ndarray   # (N, 2, 2)


def gaussian_intensities(gmap, T_cw):
    rgb = gmap.colors(camera_center(T_cw))
    return rgb @ LUMA


def _tile_grid(intr):
    tiles_x = (intr.width + TILE - 1) // TILE
    tiles_y = (intr.height + TILE - 1) // TILE
    return tiles_x, tiles_y


def _tile_rects(proj, intr):
    tiles_x, tiles_y = _tile_grid(intr)
    pad = proj.radius * (1.0 + 1e-9) + 1e-9
    lo = np.floor((proj.mean2d - pad) / TILE)
    hi = np.floor((proj.mean2d + pad) / TILE)
    x0 = np.clip(lo[:, 0], 0, tiles_x - 1).astype(np.int64)
    x1 = np.clip(hi[:, 0], 0, tiles_x - 1).astype(np.int64)
    y0 = np.clip(lo[:, 1], 0, tiles_y - 1).astype(np.int64)
    y1 = np.clip(hi[:, 1], 0, tiles_y - 1).astype(np.int64)
    return x0, x1, y0, y1


def _entry_table(ids, proj, opacity, intensity):
    ent = np.empty((ids.shape[0], 9))
    ent[:, 0:2] = proj.mean2d[ids]
    ent[:, 2:5] = proj.conic[ids]
    ent[:, 5] = opacity[ids]
    ent[:, 6] = intensity[ids]
    ent[:, 7:9] = proj.radius[ids] * (1.0 + 1e-9) + 1e-9
    return ent


def depth_order(proj):
    idx = np.flatnonzero(proj.visible)
    return idx[np.argsort(proj.p_cam[idx, 2], kind="stable")]


def render(gmap, T_cw, intr, extent=EXTENT_SIGMA):
    """Render the log-intensity image of ``gmap`` seen from ``T_cw``."""
    if gmap is None or len(gmap) == 0:
        raise EmptyMapError("cannot render an empty map")
    T_cw = np.asarray(T_cw, dtype=np.float64)
    proj = _project(gmap.means, gmap.cov3d, T_cw, intr, extent)
    intensity = gaussian_intensities(gmap, T_cw)
    tiles_x, tiles_y = _tile_grid(intr)
    n_tiles = tiles_x * tiles_y
    order = depth_order(proj)
    x0, x1, y0, y1 = _tile_rects(proj, intr)
    offsets, ids = _bin_tiles(order, proj.visible, x0, x1, y0, y1, tiles_x, n_tiles)
    opacity = np.ascontiguousarray(gmap.opacities)
    ent = _entry_table(ids, proj, opacity, intensity)
    image, final_T, n_last = _forward(intr.width, intr.height, tiles_x, n_tiles, offsets, ent,
                                      extent * extent)
    log_i = np.log(np.maximum(image, LOG_FLOOR))
    return RenderedImage(log_i, image, T_cw, intr, proj, intensity, opacity, gmap.cov3d,
                         offsets, ids, ent, final_T, n_last, extent)


def render_naive(gmap, T_cw, intr, extent=EXTENT_SIGMA):
    """Reference blender: every pixel visits all visible splats in depth order.

    Vectorized over pixels, no tiling.  Returns the blended luma image.
    """
    T_cw = np.asarray(T_cw, dtype=np.float64)
    proj = _project(gmap.means, gmap.cov3d, T_cw, intr, extent)
    intensity = gaussian_intensities(gmap, T_cw)
    jj, ii = np.meshgrid(np.arange(intr.width, dtype=np.float64),
                         np.arange(intr.height, dtype=np.float64), indexing="xy")
    C = np.zeros_like(jj)
    T = np.ones_like(jj)
    done = np.zeros(jj.shape, dtype=bool)
    for g in depth_order(proj):
        dx = proj.mean2d[g, 0] - jj
        dy = proj.mean2d[g, 1] - ii
        a, b, c = proj.conic[g]
        maha = a * dx * dx + 2.0 * b * dx * dy + c * dy * dy
        alpha = np.minimum(ALPHA_MAX, gmap.opacities[g] * np.exp(-0.5 * maha))
        use = (maha <= extent * extent) & ~done
        test_T = T * (1.0 - alpha)
        stop = use & (test_T < T_MIN)
        done |= stop
        use &= ~stop
        C = np.where(use, C + intensity[g] * alpha * T, C)
        T = np.where(use, test_T, T)
    return C


def backward(rendered, pixel_grad):
    """Gradients of a loss w.r.t. camera-frame means and R_cw.

    ``pixel_grad`` is dL/d(log_intensity).  Gaussians culled in the forward
    pass receive zero gradient.  Colour is treated as constant.
    """
    pixel_grad = np.asarray(pixel_grad, dtype=np.float64)
    if pixel_grad.shape != rendered.shape:
        raise ValueError(f"pixel gradient shape {pixel_grad.shape} does not match "
                         f"rendered image {rendered.shape}")
    intr = rendered.intr
    proj = rendered.projection
    n = proj.p_cam.shape[0]
    above = rendered.luma > LOG_FLOOR
    dL_dC = np.where(above, pixel_grad / np.where(above, rendered.luma, 1.0), 0.0)
    tiles_x, tiles_y = _tile_grid(intr)
    entry = _backward(intr.width, intr.height, tiles_x, tiles_x * tiles_y, rendered.offsets,
                      rendered.entries, rendered.extent ** 2, rendered.final_T,
                      rendered.n_last, np.ascontiguousarray(dL_dC))
    per = _reduce_entries(rendered.ids, entry, n)
    return _chain_to_camera(rendered, per)


def _chain_to_camera(rendered, per):
    intr = rendered.intr
    proj = rendered.projection
    R = rendered.T_cw[:3, :3]
    n = per.shape[0]
    d_mean2d = per[:, :2]
    # dL/d(conic) as a symmetric matrix; the off-diagonal appears twice
    gQ = np.empty((n, 2, 2))
    gQ[:, 0, 0] = per[:, 2]
    gQ[:, 0, 1] = gQ[:, 1, 0] = 0.5 * per[:, 3]
    gQ[:, 1, 1] = per[:, 4]
    Q = np.empty((n, 2, 2))
    Q[:, 0, 0] = proj.conic[:, 0]
    Q[:, 0, 1] = Q[:, 1, 0] = proj.conic[:, 1]
    Q[:, 1, 1] = proj.conic[:, 2]
    d_cov2d = -Q @ gQ @ Q
    M = proj.J @ R
    d_M = 2.0 * d_cov2d @ M @ rendered.cov3d
    d_J = d_M @ R.T
    d_rot = np.swapaxes(proj.J, 1, 2) @ d_M
    x, y, z = proj.p_cam.T
    zs = np.where(proj.visible, z, 1.0)
    fx, fy = intr.fx, intr.fy
    gu, gv = d_mean2d[:, 0], d_mean2d[:, 1]
    d_point = np.empty((n, 3))
    d_point[:, 0] = gu * fx / zs - d_J[:, 0, 2] * fx / zs**2
    d_point[:, 1] = gv * fy / zs - d_J[:, 1, 2] * fy / zs**2
    d_point[:, 2] = (-gu * fx * x / zs**2 - gv * fy * y / zs**2
                     - d_J[:, 0, 0] * fx / zs**2 - d_J[:, 1, 1] * fy / zs**2
                     + d_J[:, 0, 2] * 2.0 * fx * x / zs**3
                     + d_J[:, 1, 2] * 2.0 * fy * y / zs**3)
    hidden = ~proj.visible
    d_point[hidden] = 0.0
    d_rot[hidden] = 0.0
    return RasterGradients(d_point, d_rot, d_mean2d, d_cov2d)


def set_threads(n):
    """Bound the kernel thread pool; results do not depend on the count."""
    numba.set_num_threads(max(1, min(int(n), numba.config.NUMBA_NUM_THREADS)))
