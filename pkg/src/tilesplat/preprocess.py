"""Projection of 3D Gaussians to screen-space splats and tile binning.

Projection transforms each Gaussian's mean and covariance into camera
space, applies the perspective Jacobian at the mean (the standard local
affine approximation), dilates the 2D covariance by 0.3 px^2 on the
diagonal as a low-pass guard, and inverts it to the conic used by the
blend kernels.  Splats behind the near plane, with numerically singular
2D covariance, or with no on-screen footprint are culled.

Binning assigns each surviving splat to every tile its 3-sigma AABB
overlaps and sorts each tile's list by (depth, gaussian index).
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .model import Camera, GaussianScene, activate, covariance3
from .sh import eval_sh_batch

# Screen-space covariance dilation (px^2) and the AABB extent in sigmas.
LOW_PASS_DILATION = 0.3
BOUNDING_SIGMAS = 3.0
# 2x2 determinant floor below which a splat is dropped as degenerate.
DET_EPS = 1e-12


@dataclass(frozen=True)
class Splat2D:
    """One projected splat (a single row of a SplatBatch)."""

    mean2: np.ndarray  # (2,) pixel coordinates
    cov2: np.ndarray  # (3,) dilated 2D covariance (a, b, c)
    conic: np.ndarray  # (3,) inverse covariance (a, b, c)
    depth: float
    rgb: np.ndarray  # (3,)
    opacity: float
    radius: int
    aabb: np.ndarray  # (4,) [x0, y0, x1, y1], half-open pixel bounds
    gaussian_index: int


@dataclass
class SplatBatch:
    """Projected splats in struct-of-arrays form, one row per visible splat."""

    mean2: np.ndarray  # (m, 2)
    cov2: np.ndarray  # (m, 3) upper triangle (a, b, c) of the dilated covariance
    conic: np.ndarray  # (m, 3)
    depth: np.ndarray  # (m,)
    rgb: np.ndarray  # (m, 3)
    rgb_clamped: np.ndarray  # (m, 3) bool, channels pinned at zero by the SH clamp
    opacity: np.ndarray  # (m,)
    radius: np.ndarray  # (m,) int64
    aabb: np.ndarray  # (m, 4) int64, half-open [x0, y0, x1, y1]
    gaussian_index: np.ndarray  # (m,) int64 row in the source scene

    @property
    def n(self) -> int:
        return self.mean2.shape[0]

    def astype(self, dtype) -> "SplatBatch":
        """Cast the float fields to the blending dtype; metadata is shared."""
        return SplatBatch(
            mean2=self.mean2.astype(dtype),
            cov2=self.cov2.astype(dtype),
            conic=self.conic.astype(dtype),
            depth=self.depth.astype(dtype),
            rgb=self.rgb.astype(dtype),
            rgb_clamped=self.rgb_clamped,
            opacity=self.opacity.astype(dtype),
            radius=self.radius,
            aabb=self.aabb,
            gaussian_index=self.gaussian_index,
        )

    def row(self, i: int) -> Splat2D:
        return Splat2D(
            mean2=self.mean2[i].copy(),
            cov2=self.cov2[i].copy(),
            conic=self.conic[i].copy(),
            depth=float(self.depth[i]),
            rgb=self.rgb[i].copy(),
            opacity=float(self.opacity[i]),
            radius=int(self.radius[i]),
            aabb=self.aabb[i].copy(),
            gaussian_index=int(self.gaussian_index[i]),
        )


@dataclass
class PreprocessStats:
    n_input: int = 0
    culled_near: int = 0
    culled_degenerate: int = 0
    culled_offscreen: int = 0

    @property
    def n_visible(self) -> int:
        return (
            self.n_input
            - self.culled_near
            - self.culled_degenerate
            - self.culled_offscreen
        )


def preprocess(scene: GaussianScene, cam: Camera) -> tuple[SplatBatch, PreprocessStats]:
    """Project every Gaussian and cull the invisible ones.

    Returns float64 splat arrays; cast with SplatBatch.astype for a
    lower-precision blend.  Row order follows scene order, so ties in
    depth sort by ascending gaussian_index automatically.
    """
    stats = PreprocessStats(n_input=scene.n)
    scales, rots, opac = activate(scene.log_scales, scene.rotations, scene.opacity_logits)
    cov3 = covariance3(scales, rots)  # (n, 3, 3)

    R = cam.rotation
    t = scene.means @ R.T + cam.translation  # (n, 3) camera space
    in_front = t[:, 2] > cam.near
    stats.culled_near = int(scene.n - in_front.sum())
    idx = np.flatnonzero(in_front)
    if idx.size == 0:
        return _empty_batch(), stats

    t = t[idx]
    cov_cam = np.einsum("ij,njk,lk->nil", R, cov3[idx], R)  # (m, 3, 3)
    tz = t[:, 2]
    J = np.zeros((idx.size, 2, 3), dtype=np.float64)
    J[:, 0, 0] = cam.fx / tz
    J[:, 0, 2] = -cam.fx * t[:, 0] / tz**2
    J[:, 1, 1] = cam.fy / tz
    J[:, 1, 2] = -cam.fy * t[:, 1] / tz**2
    cov2 = np.einsum("nij,njk,nlk->nil", J, cov_cam, J)  # (m, 2, 2)
    a = cov2[:, 0, 0] + LOW_PASS_DILATION
    b = cov2[:, 0, 1]
    c = cov2[:, 1, 1] + LOW_PASS_DILATION

    det = a * c - b * b
    ok = det > DET_EPS
    stats.culled_degenerate = int(idx.size - ok.sum())
    if not ok.all():
        idx, t, tz = idx[ok], t[ok], tz[ok]
        a, b, c, det = a[ok], b[ok], c[ok], det[ok]
    if idx.size == 0:
        return _empty_batch(), stats

    mean2 = np.stack(
        [cam.fx * t[:, 0] / tz + cam.cx, cam.fy * t[:, 1] / tz + cam.cy], axis=1
    )
    lam_max = 0.5 * (a + c) + np.sqrt(np.maximum(0.25 * (a - c) ** 2 + b * b, 0.0))
    radius = np.ceil(BOUNDING_SIGMAS * np.sqrt(lam_max)).astype(np.int64)
    center = np.floor(mean2).astype(np.int64)
    x0 = np.clip(center[:, 0] - radius, 0, cam.width)
    x1 = np.clip(center[:, 0] + radius + 1, 0, cam.width)
    y0 = np.clip(center[:, 1] - radius, 0, cam.height)
    y1 = np.clip(center[:, 1] + radius + 1, 0, cam.height)
    on_screen = (x0 < x1) & (y0 < y1)
    stats.culled_offscreen = int(idx.size - on_screen.sum())
    if not on_screen.all():
        keep = on_screen
        idx, t, tz = idx[keep], t[keep], tz[keep]
        a, b, c, det, mean2 = a[keep], b[keep], c[keep], det[keep], mean2[keep]
        radius = radius[keep]
        x0, x1, y0, y1 = x0[keep], x1[keep], y0[keep], y1[keep]
    if idx.size == 0:
        return _empty_batch(), stats

    conic = np.stack([c / det, -b / det, a / det], axis=1)
    dirs_raw = scene.means[idx] - cam.center
    dirs = dirs_raw / np.linalg.norm(dirs_raw, axis=1, keepdims=True)
    rgb, clamped = eval_sh_batch(scene.sh[idx], dirs, scene.degree)

    batch = SplatBatch(
        mean2=mean2,
        cov2=np.stack([a, b, c], axis=1),
        conic=conic,
        depth=tz.copy(),
        rgb=rgb,
        rgb_clamped=clamped,
        opacity=opac[idx],
        radius=radius,
        aabb=np.stack([x0, y0, x1, y1], axis=1),
        gaussian_index=idx.astype(np.int64),
    )
    return batch, stats


def _empty_batch() -> SplatBatch:
    return SplatBatch(
        mean2=np.zeros((0, 2)),
        cov2=np.zeros((0, 3)),
        conic=np.zeros((0, 3)),
        depth=np.zeros(0),
        rgb=np.zeros((0, 3)),
        rgb_clamped=np.zeros((0, 3), dtype=bool),
        opacity=np.zeros(0),
        radius=np.zeros(0, dtype=np.int64),
        aabb=np.zeros((0, 4), dtype=np.int64),
        gaussian_index=np.zeros(0, dtype=np.int64),
    )


def project_gaussian(scene: GaussianScene, i: int, cam: Camera) -> Splat2D | None:
    """Project a single Gaussian; None if culled."""
    sub = GaussianScene(
        means=scene.means[i : i + 1],
        log_scales=scene.log_scales[i : i + 1],
        rotations=scene.rotations[i : i + 1],
        opacity_logits=scene.opacity_logits[i : i + 1],
        sh=scene.sh[i : i + 1],
    )
    batch, _ = preprocess(sub, cam)
    if batch.n == 0:
        return None
    s = batch.row(0)
    return Splat2D(
        mean2=s.mean2,
        cov2=s.cov2,
        conic=s.conic,
        depth=s.depth,
        rgb=s.rgb,
        opacity=s.opacity,
        radius=s.radius,
        aabb=s.aabb,
        gaussian_index=i,
    )


def compute_aabb(mean2, cov2, width: int, height: int) -> np.ndarray | None:
    """Half-open pixel AABB covering 3 sigma around the mean; None if off-screen."""
    a, b, c = np.asarray(cov2, dtype=np.float64)
    lam_max = 0.5 * (a + c) + np.sqrt(max(0.25 * (a - c) ** 2 + b * b, 0.0))
    r = int(np.ceil(BOUNDING_SIGMAS * np.sqrt(lam_max)))
    cx, cy = int(np.floor(mean2[0])), int(np.floor(mean2[1]))
    x0, x1 = max(cx - r, 0), min(cx + r + 1, width)
    y0, y1 = max(cy - r, 0), min(cy + r + 1, height)
    if x0 >= x1 or y0 >= y1:
        return None
    return np.array([x0, y0, x1, y1], dtype=np.int64)


@dataclass
class TileBinning:
    """Per-tile splat lists, each sorted front to back."""

    tile_w: int
    tile_h: int
    nx: int  # tiles per row
    ny: int
    image_w: int
    image_h: int
    lists: list[np.ndarray]  # per tile: batch row indices, depth-sorted
    tiles_per_splat: np.ndarray  # (m,) duplication count, for workload analysis

    @property
    def n_tiles(self) -> int:
        return self.nx * self.ny

    @property
    def total_invocations(self) -> int:
        """Total (splat, tile) pairings, the unit of rasterizer work."""
        return int(sum(len(l) for l in self.lists))

    def tile_rect(self, t: int) -> tuple[int, int, int, int]:
        """Pixel bounds (x0, y0, x1, y1) of tile t, clipped to the image."""
        ty, tx = divmod(t, self.nx)
        x0 = tx * self.tile_w
        y0 = ty * self.tile_h
        return (
            x0,
            y0,
            min(x0 + self.tile_w, self.image_w),
            min(y0 + self.tile_h, self.image_h),
        )


def bin_and_sort(
    batch: SplatBatch, tile_size: tuple[int, int], image_size: tuple[int, int]
) -> TileBinning:
    """Assign splats to every tile their AABB overlaps; sort by (depth, index).

    The tile grid covers the image with partial tiles at the right/bottom
    edges.  Sorting uses the float64 depths so the traversal order is the
    same no matter what dtype the blend itself runs in.
    """
    tw, th = tile_size
    w, h = image_size
    if tw <= 0 or th <= 0:
        raise ValueError("tile dimensions must be positive")
    nx = (w + tw - 1) // tw
    ny = (h + th - 1) // th
    m = batch.n
    if m == 0:
        return TileBinning(
            tw, th, nx, ny, w, h,
            [np.zeros(0, dtype=np.int64) for _ in range(nx * ny)],
            np.zeros(0, dtype=np.int64),
        )

    x0, y0, x1, y1 = (batch.aabb[:, k] for k in range(4))
    tx0 = x0 // tw
    tx1 = (x1 - 1) // tw + 1  # exclusive
    ty0 = y0 // th
    ty1 = (y1 - 1) // th + 1
    spans_x = tx1 - tx0
    spans_y = ty1 - ty0
    counts = spans_x * spans_y  # tiles per splat

    splat_ids = np.repeat(np.arange(m, dtype=np.int64), counts)
    total = int(counts.sum())
    # Local pair index within each splat's tile block, decoded to (dx, dy).
    starts = np.concatenate(([0], np.cumsum(counts)[:-1]))
    local = np.arange(total, dtype=np.int64) - np.repeat(starts, counts)
    sx = np.repeat(spans_x, counts)
    dx = local % sx
    dy = local // sx
    tile_ids = (np.repeat(ty0, counts) + dy) * nx + np.repeat(tx0, counts) + dx

    order = np.lexsort((splat_ids, batch.depth[splat_ids], tile_ids))
    sorted_tiles = tile_ids[order]
    sorted_splats = splat_ids[order]
    bounds_lo = np.searchsorted(sorted_tiles, np.arange(nx * ny), side="left")
    bounds_hi = np.searchsorted(sorted_tiles, np.arange(nx * ny), side="right")
    lists = [sorted_splats[lo:hi] for lo, hi in zip(bounds_lo, bounds_hi)]
    return TileBinning(tw, th, nx, ny, w, h, lists, counts)
