"""Tile-based forward rasterizer with depth-chunked blending.

Each tile owns a depth-sorted splat list.  Three traversal schedules
share one alpha kernel and produce bit-identical pixels:

* Gaussian-centric: walk the list front to back, updating every pixel a
  splat covers (terminated pixels still get evaluated; their weight is
  zero).  This is the reference order.
* Depth-chunked (z-tiled): split the list into K chunks, blend each
  chunk independently from T = 1 with no early termination, then merge
  partials in depth order.  The merge identity C = sum_k T_in^k C_loc^k
  with T_in^(k+1) = T_in^k * That_out^k makes this exactly equivalent to
  the global sweep when eps_t = 0; with eps_t > 0 termination is applied
  at chunk granularity.
* Pixel-centric: walk the same list but skip pixels that have already
  terminated.  Used for the trailing portion of the list in hybrid mode,
  where most surviving work belongs to a few unterminated pixels.

Pixel centers sit at half-integer coordinates; alpha is
opacity * exp(-q/2) with q the conic quadratic form, floored at 0 and
the product clamped to 0.99.  Splats with alpha below 1/255 at a pixel
do not blend there.
"""

from __future__ import annotations

from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np

from .execmodel import EvalCounters, OcclusionTrace, RenderStats
from .model import Camera, GaussianScene, ImageRGB
from .preprocess import SplatBatch, TileBinning, bin_and_sort, preprocess

ALPHA_MIN = 1.0 / 255.0
ALPHA_MAX = 0.99

_HYBRID_MODES = ("off", "fixed_fraction", "occlusion_threshold")


@dataclass
class RenderConfig:
    tile_size: tuple[int, int] = (64, 64)
    z_tiles: int = 1
    eps_t: float = 1e-4
    hybrid: str = "off"
    hybrid_fraction: float = 0.25
    occlusion_threshold: float = 0.9
    background: tuple[float, float, float] = (0.0, 0.0, 0.0)
    dtype: type = np.float32
    threads: int = 1
    seed: int = 0
    record_occlusion: bool = False
    bank_trace_groups: int = 0  # max write groups to record; 0 disables

    def validate(self) -> None:
        tw, th = self.tile_size
        if tw <= 0 or th <= 0:
            raise ValueError("tile_size must be positive")
        if self.z_tiles < 1:
            raise ValueError("z_tiles must be >= 1")
        if self.eps_t < 0:
            raise ValueError("eps_t must be >= 0")
        if self.hybrid not in _HYBRID_MODES:
            raise ValueError(f"hybrid must be one of {_HYBRID_MODES}")
        if not 0.0 < self.hybrid_fraction < 1.0:
            raise ValueError("hybrid_fraction must be in (0, 1)")
        if not 0.0 < self.occlusion_threshold < 1.0:
            raise ValueError("occlusion_threshold must be in (0, 1)")
        if np.dtype(self.dtype) not in (np.dtype(np.float32), np.dtype(np.float64)):
            raise ValueError("dtype must be float32 or float64")
        if len(self.background) != 3 or any(
            not np.isfinite(v) or v < 0 for v in self.background
        ):
            raise ValueError("background must be 3 finite non-negative values")
        if self.threads < 1:
            raise ValueError("threads must be >= 1")
        if self.bank_trace_groups < 0:
            raise ValueError("bank_trace_groups must be >= 0")


@dataclass
class PixelState:
    """Per-pixel blend state over one tile (arrays are tile-shaped)."""

    rgb: np.ndarray  # (h, w, 3) accumulated color, background excluded
    T: np.ndarray  # (h, w) transmittance
    terminated: np.ndarray  # (h, w) bool
    n_contrib: np.ndarray  # (h, w) int32 splats blended
    stop: np.ndarray  # (h, w) int32 list position after the last blended splat


@dataclass
class ZTilePartial:
    """One depth chunk blended in isolation (T starts at 1, no termination)."""

    rgb_loc: np.ndarray  # (h, w, 3)
    T_out: np.ndarray  # (h, w) chunk transmittance
    n_contrib: np.ndarray  # (h, w) int32


def _fresh_state(h: int, w: int, dtype, end_pos: int) -> PixelState:
    return PixelState(
        rgb=np.zeros((h, w, 3), dtype=dtype),
        T=np.ones((h, w), dtype=dtype),
        terminated=np.zeros((h, w), dtype=bool),
        n_contrib=np.zeros((h, w), dtype=np.int32),
        stop=np.full((h, w), end_pos, dtype=np.int32),
    )


def _clone_state(s: PixelState) -> PixelState:
    return PixelState(
        rgb=s.rgb.copy(),
        T=s.T.copy(),
        terminated=s.terminated.copy(),
        n_contrib=s.n_contrib.copy(),
        stop=s.stop.copy(),
    )


def alpha_patch(batch: SplatBatch, i: int, x0: int, x1: int, y0: int, y1: int):
    """Alpha of splat i over a pixel rectangle, in the batch dtype.

    Returns (alpha, dx, dy) where dx/dy are pixel-center offsets from the
    splat mean.  Every traversal schedule calls this one function, which
    is what makes their outputs bit-identical.
    """
    dt = batch.mean2.dtype
    half = dt.type(0.5)
    dx = np.arange(x0, x1).astype(dt) + half - batch.mean2[i, 0]  # (w,)
    dy = np.arange(y0, y1).astype(dt) + half - batch.mean2[i, 1]  # (h,)
    a, b, c = batch.conic[i]
    q = (
        a * dx[None, :] ** 2
        + 2 * b * dy[:, None] * dx[None, :]
        + c * dy[:, None] ** 2
    )
    q = np.maximum(q, dt.type(0))  # guard tiny negative from rounding
    alpha = np.minimum(batch.opacity[i] * np.exp(-half * q), dt.type(ALPHA_MAX))
    return alpha, dx, dy


def alpha_of(batch: SplatBatch, i: int, px: float, py: float) -> float:
    """Alpha of splat i at one pixel (px, py are integer pixel indices)."""
    alpha, _, _ = alpha_patch(batch, i, int(px), int(px) + 1, int(py), int(py) + 1)
    return float(alpha[0, 0])


class _BankTraceRecorder:
    """Collects 16-pixel write groups (raster order per splat region)."""

    def __init__(self, cap: int):
        self.cap = cap
        self.groups: list[np.ndarray] = []

    def record(self, ix0: int, iy0: int, contrib: np.ndarray) -> None:
        if len(self.groups) >= self.cap:
            return
        ys, xs = np.nonzero(contrib)
        if xs.size == 0:
            return
        coords = np.stack([xs + ix0, ys + iy0], axis=1)
        for s in range(0, len(coords), 16):
            if len(self.groups) >= self.cap:
                return
            self.groups.append(coords[s : s + 16])


def _sweep(
    state: PixelState,
    batch: SplatBatch,
    order: np.ndarray,
    rect: tuple[int, int, int, int],
    start: int,
    end: int,
    *,
    eps_t: float,
    pixel_centric: bool,
    counters: EvalCounters,
    theta: float | None = None,
    bank_rec: _BankTraceRecorder | None = None,
) -> int:
    """Blend order[start:end] into state, front to back.

    Returns the position after the last splat processed: ``end``
    normally, or the switch position if ``theta`` is set and the tile's
    terminated fraction crossed it.
    """
    x0r, y0r, x1r, y1r = rect
    n_pix = state.T.size
    for k in range(start, end):
        i = int(order[k])
        bx0, by0, bx1, by1 = batch.aabb[i]
        ix0 = max(int(bx0), x0r)
        ix1 = min(int(bx1), x1r)
        iy0 = max(int(by0), y0r)
        iy1 = min(int(by1), y1r)
        if ix0 >= ix1 or iy0 >= iy1:
            continue
        sl = (slice(iy0 - y0r, iy1 - y0r), slice(ix0 - x0r, ix1 - x0r))
        alpha, _, _ = alpha_patch(batch, i, ix0, ix1, iy0, iy1)
        live = ~state.terminated[sl]
        npx = alpha.size
        counters.candidates += npx
        if pixel_centric:
            nlive = int(np.count_nonzero(live))
            counters.performed += nlive
            counters.skipped += npx - nlive
        else:
            counters.performed += npx
        contrib = live & (alpha >= ALPHA_MIN)
        w = np.where(contrib, alpha, alpha.dtype.type(0))
        Tl = state.T[sl]
        state.rgb[sl] += (Tl * w)[..., None] * batch.rgb[i]
        Tnew = np.where(contrib, Tl * (1 - alpha), Tl)
        state.T[sl] = Tnew
        state.n_contrib[sl] += contrib
        if eps_t > 0.0:
            newly = live & (Tnew < eps_t)
            if newly.any():
                stop_sl = state.stop[sl]
                stop_sl[newly] = k + 1
                state.terminated[sl] |= newly
        if bank_rec is not None:
            bank_rec.record(ix0, iy0, contrib)
        if theta is not None and np.count_nonzero(state.terminated) > theta * n_pix:
            return k + 1
    return end


def blend_tile_global(
    batch: SplatBatch,
    order: np.ndarray,
    rect: tuple[int, int, int, int],
    *,
    eps_t: float = 1e-4,
    carry: PixelState | None = None,
    counters: EvalCounters | None = None,
    start: int = 0,
    end: int | None = None,
) -> PixelState:
    """Gaussian-centric front-to-back blend of one tile's list."""
    x0, y0, x1, y1 = rect
    end = len(order) if end is None else end
    state = _clone_state(carry) if carry is not None else _fresh_state(
        y1 - y0, x1 - x0, batch.mean2.dtype, len(order)
    )
    counters = counters if counters is not None else EvalCounters()
    _sweep(
        state, batch, order, rect, start, end,
        eps_t=eps_t, pixel_centric=False, counters=counters,
    )
    return state


def blend_pixel_centric(
    batch: SplatBatch,
    order: np.ndarray,
    rect: tuple[int, int, int, int],
    carry: PixelState,
    *,
    eps_t: float = 1e-4,
    counters: EvalCounters | None = None,
    start: int = 0,
    end: int | None = None,
) -> PixelState:
    """Pixel-centric blend: same math, terminated pixels are skipped."""
    end = len(order) if end is None else end
    state = _clone_state(carry)
    counters = counters if counters is not None else EvalCounters()
    _sweep(
        state, batch, order, rect, start, end,
        eps_t=eps_t, pixel_centric=True, counters=counters,
    )
    return state


def blend_ztile(
    batch: SplatBatch,
    order: np.ndarray,
    rect: tuple[int, int, int, int],
    start: int,
    end: int,
    *,
    counters: EvalCounters | None = None,
    bank_rec: _BankTraceRecorder | None = None,
) -> ZTilePartial:
    """Blend one depth chunk in isolation (T from 1, never terminating)."""
    x0, y0, x1, y1 = rect
    state = _fresh_state(y1 - y0, x1 - x0, batch.mean2.dtype, end)
    counters = counters if counters is not None else EvalCounters()
    _sweep(
        state, batch, order, rect, start, end,
        eps_t=0.0, pixel_centric=False, counters=counters, bank_rec=bank_rec,
    )
    return ZTilePartial(rgb_loc=state.rgb, T_out=state.T, n_contrib=state.n_contrib)


def _merge_partial(
    state: PixelState, part: ZTilePartial, eps_t: float, chunk_end: int
) -> None:
    """Fold one chunk partial into the running merge state (in depth order)."""
    live = ~state.terminated
    w = np.where(live, state.T, state.T.dtype.type(0))
    state.rgb += w[..., None] * part.rgb_loc
    state.T = np.where(live, state.T * part.T_out, state.T)
    state.n_contrib += np.where(live, part.n_contrib, 0)
    if eps_t > 0.0:
        newly = live & (state.T < eps_t)
        if newly.any():
            state.stop[newly] = chunk_end
            state.terminated |= newly


def merge_ztiles(
    partials: list[ZTilePartial],
    chunk_ends: list[int],
    rect: tuple[int, int, int, int],
    dtype,
    *,
    eps_t: float = 1e-4,
) -> PixelState:
    """Merge chunk partials in depth order.

    Once a pixel's incoming transmittance falls below eps_t the
    remaining partials are skipped for it (chunk-granular termination).
    """
    if not partials:
        raise ValueError("no partials to merge")
    if len(chunk_ends) != len(partials):
        raise ValueError("chunk_ends must match partials")
    x0, y0, x1, y1 = rect
    state = _fresh_state(y1 - y0, x1 - x0, dtype, chunk_ends[-1])
    for part, cend in zip(partials, chunk_ends):
        _merge_partial(state, part, eps_t, cend)
    return state


def composite_background(state: PixelState, background: np.ndarray) -> np.ndarray:
    """Final tile color: accumulated rgb plus remaining transmittance times bg."""
    return state.rgb + state.T[..., None] * background


def _chunk_bounds(prefix_end: int, k: int) -> list[tuple[int, int]]:
    """K equal-count chunks of [0, prefix_end); the last takes the remainder."""
    base = prefix_end // k
    bounds = [(i * base, (i + 1) * base) for i in range(k - 1)]
    bounds.append(((k - 1) * base, prefix_end))
    return bounds


@dataclass
class ForwardTrace:
    """Everything the backward pass needs from a forward render."""

    batch: SplatBatch  # blend-dtype splats (what the pixels actually saw)
    batch64: SplatBatch  # float64 projection for parameter chaining
    binning: TileBinning
    t_final: np.ndarray  # (h, w) final transmittance per pixel
    stop: np.ndarray  # (h, w) int32 list position after each pixel's last blend


@dataclass
class RenderResult:
    image: ImageRGB
    stats: RenderStats
    trace: ForwardTrace | None = None


def render(
    scene: GaussianScene,
    cam: Camera,
    cfg: RenderConfig | None = None,
    *,
    want_trace: bool = False,
) -> RenderResult:
    """Render a scene: preprocess, bin, blend tiles, composite background.

    Tiles are independent; with cfg.threads > 1 they run on a thread
    pool.  Per-tile work and the (tile-order) reduction of stats are
    fixed, so results are bit-identical across thread counts and reruns.
    """
    cfg = cfg if cfg is not None else RenderConfig()
    cfg.validate()
    if want_trace and (cfg.z_tiles != 1 or cfg.hybrid != "off"):
        raise ValueError("gradient tracing requires z_tiles=1 and hybrid='off'")
    dtype = np.dtype(cfg.dtype).type

    batch64, pstats = preprocess(scene, cam)
    binning = bin_and_sort(batch64, cfg.tile_size, (cam.width, cam.height))
    batch = batch64 if dtype == np.float64 else batch64.astype(dtype)
    bg = np.asarray(cfg.background, dtype=dtype)

    h, w = cam.height, cam.width
    img = np.zeros((h, w, 3), dtype=dtype)
    t_final = np.ones((h, w), dtype=dtype) if want_trace else None
    stop_img = np.zeros((h, w), dtype=np.int32) if want_trace else None
    K = cfg.z_tiles

    def run_tile(t: int):
        order = binning.lists[t]
        rect = binning.tile_rect(t)
        x0, y0, x1, y1 = rect
        m = len(order)
        counters = EvalCounters()
        bank_rec = (
            _BankTraceRecorder(cfg.bank_trace_groups)
            if cfg.bank_trace_groups > 0
            else None
        )
        occl_counts: list[int] | None = None

        if cfg.hybrid == "fixed_fraction" and m > 0:
            split: int | None = int(np.ceil((1.0 - cfg.hybrid_fraction) * m))
        elif cfg.hybrid == "occlusion_threshold":
            split = None  # decided dynamically
        else:
            split = m

        if K == 1:
            state = _fresh_state(y1 - y0, x1 - x0, dtype, m)
            if split is None:
                switch = _sweep(
                    state, batch, order, rect, 0, m,
                    eps_t=cfg.eps_t, pixel_centric=False, counters=counters,
                    theta=cfg.occlusion_threshold, bank_rec=bank_rec,
                )
                _sweep(
                    state, batch, order, rect, switch, m,
                    eps_t=cfg.eps_t, pixel_centric=True, counters=counters,
                )
                split_used = switch
            else:
                _sweep(
                    state, batch, order, rect, 0, split,
                    eps_t=cfg.eps_t, pixel_centric=False, counters=counters,
                    bank_rec=bank_rec,
                )
                if split < m:
                    _sweep(
                        state, batch, order, rect, split, m,
                        eps_t=cfg.eps_t, pixel_centric=True, counters=counters,
                    )
                split_used = split
            if cfg.record_occlusion:
                occl_counts = [int(np.count_nonzero(state.T < cfg.eps_t))]
        else:
            prefix_end = m if split is None else split
            bounds = _chunk_bounds(prefix_end, K)
            state = _fresh_state(y1 - y0, x1 - x0, dtype, m)
            occl_counts = [] if cfg.record_occlusion else None
            switch_pos = prefix_end
            for kk, (lo, hi) in enumerate(bounds):
                if split is None and np.count_nonzero(state.terminated) > (
                    cfg.occlusion_threshold * state.T.size
                ):
                    switch_pos = lo
                    if occl_counts is not None:
                        # remaining chunk boundaries report the frozen count
                        occ = int(np.count_nonzero(state.T < cfg.eps_t))
                        occl_counts.extend([occ] * (K - kk))
                    break
                part = blend_ztile(
                    batch, order, rect, lo, hi,
                    counters=counters, bank_rec=bank_rec,
                )
                _merge_partial(state, part, cfg.eps_t, hi)
                if occl_counts is not None:
                    occl_counts.append(int(np.count_nonzero(state.T < cfg.eps_t)))
            if switch_pos < m:
                _sweep(
                    state, batch, order, rect, switch_pos, m,
                    eps_t=cfg.eps_t, pixel_centric=True, counters=counters,
                )
            split_used = switch_pos if split is None else split

        img[y0:y1, x0:x1] = composite_background(state, bg)
        if want_trace:
            t_final[y0:y1, x0:x1] = state.T
            stop_img[y0:y1, x0:x1] = state.stop
        bank_groups = bank_rec.groups if bank_rec is not None else None
        return counters, occl_counts, split_used, bank_groups

    n_tiles = binning.n_tiles
    if cfg.threads > 1 and n_tiles > 1:
        with ThreadPoolExecutor(max_workers=cfg.threads) as ex:
            results = list(ex.map(run_tile, range(n_tiles)))
    else:
        results = [run_tile(t) for t in range(n_tiles)]

    stats = RenderStats(
        image_w=w,
        image_h=h,
        tile_w=binning.tile_w,
        tile_h=binning.tile_h,
        n_tiles=n_tiles,
        n_input=pstats.n_input,
        culled_near=pstats.culled_near,
        culled_degenerate=pstats.culled_degenerate,
        culled_offscreen=pstats.culled_offscreen,
        n_splats=batch.n,
        per_tile_lengths=[len(l) for l in binning.lists],
        invocations=binning.total_invocations,
    )
    occl_total = np.zeros(K, dtype=np.int64) if cfg.record_occlusion else None
    all_groups: list[np.ndarray] | None = (
        [] if cfg.bank_trace_groups > 0 else None
    )
    splits: list[int] = []
    for counters, occl_counts, split_used, bank_groups in results:
        stats.counters.merge(counters)
        splits.append(split_used)
        if occl_total is not None and occl_counts is not None:
            occl_total += np.asarray(occl_counts, dtype=np.int64)
        if all_groups is not None and bank_groups:
            take = cfg.bank_trace_groups - len(all_groups)
            if take > 0:
                all_groups.extend(bank_groups[:take])
    if cfg.hybrid != "off":
        stats.hybrid_splits = splits
    if occl_total is not None:
        stats.occlusion = OcclusionTrace(
            n_chunks=K,
            occluded_after_chunk=occl_total,
            total_pixels=w * h,
            eps_t=cfg.eps_t,
        )
    if all_groups is not None:
        stats.bank_groups = all_groups

    trace = None
    if want_trace:
        trace = ForwardTrace(
            batch=batch,
            batch64=batch64,
            binning=binning,
            t_final=t_final,
            stop=stop_img,
        )
    return RenderResult(image=ImageRGB(img), stats=stats, trace=trace)
