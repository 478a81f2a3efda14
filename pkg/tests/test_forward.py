"""Forward blending: alpha kernel, compositing, z-chunks, hybrid schedules."""

import numpy as np
import pytest

from tilesplat.execmodel import EvalCounters
from tilesplat.forward import (
    ALPHA_MIN,
    RenderConfig,
    _chunk_bounds,
    alpha_of,
    alpha_patch,
    blend_pixel_centric,
    blend_tile_global,
    blend_ztile,
    composite_background,
    merge_ztiles,
    render,
)
from tilesplat.preprocess import SplatBatch
from tilesplat.synth import make_camera, opaque_foreground_scene, random_scene


def hand_batch(splats, dtype=np.float64, image=(8, 8)) -> SplatBatch:
    """Build a SplatBatch directly from (mean2, conic, depth, rgb, opacity)."""
    w, h = image
    m = len(splats)
    conic = np.array([s["conic"] for s in splats], dtype=np.float64)
    # cov2 as the exact inverse of each conic
    det = conic[:, 0] * conic[:, 2] - conic[:, 1] ** 2
    cov2 = np.stack([conic[:, 2], -conic[:, 1], conic[:, 0]], axis=1) / det[:, None]
    return SplatBatch(
        mean2=np.array([s["mean2"] for s in splats], dtype=dtype),
        cov2=cov2.astype(dtype),
        conic=conic.astype(dtype),
        depth=np.array([s["depth"] for s in splats], dtype=dtype),
        rgb=np.array([s["rgb"] for s in splats], dtype=dtype),
        rgb_clamped=np.zeros((m, 3), dtype=bool),
        opacity=np.array([s["opacity"] for s in splats], dtype=dtype),
        radius=np.full(m, max(w, h), dtype=np.int64),
        aabb=np.tile([0, 0, w, h], (m, 1)).astype(np.int64),
        gaussian_index=np.arange(m, dtype=np.int64),
    )


def test_alpha_patch_values():
    batch = hand_batch(
        [dict(mean2=(2.5, 2.5), conic=(1.0, 0.0, 1.0), depth=1, rgb=(1, 1, 1), opacity=0.8)]
    )
    assert alpha_of(batch, 0, 2, 2) == pytest.approx(0.8)  # at the mean
    assert alpha_of(batch, 0, 3, 2) == pytest.approx(0.8 * np.exp(-0.5))  # q = 1
    assert alpha_of(batch, 0, 3, 3) == pytest.approx(0.8 * np.exp(-1.0))  # q = 2


def test_alpha_patch_clamps_and_dtype():
    batch = hand_batch(
        [dict(mean2=(1.5, 1.5), conic=(0.5, 0, 0.5), depth=1, rgb=(1, 0, 0), opacity=0.99)],
        dtype=np.float32,
    )
    alpha, dx, dy = alpha_patch(batch, 0, 0, 4, 0, 4)
    assert alpha.dtype == np.float32
    assert alpha.max() <= np.float32(0.99)
    assert alpha.shape == (4, 4)
    np.testing.assert_allclose(dx, np.arange(4) + 0.5 - 1.5)


def test_chunk_bounds_partition():
    assert _chunk_bounds(10, 3) == [(0, 3), (3, 6), (6, 10)]
    assert _chunk_bounds(8, 4) == [(0, 2), (2, 4), (4, 6), (6, 8)]
    assert _chunk_bounds(3, 8)[-1] == (0, 3)  # K > m: empty leading chunks
    bounds = _chunk_bounds(3, 8)
    assert bounds[0] == (0, 0) and bounds[-1][1] == 3


def test_two_splat_compositing_hand_unrolled():
    batch = hand_batch(
        [
            dict(mean2=(2.5, 2.5), conic=(0.5, 0, 0.5), depth=1.0,
                 rgb=(1.0, 0.0, 0.25), opacity=0.6),
            dict(mean2=(2.5, 2.5), conic=(0.25, 0, 0.25), depth=2.0,
                 rgb=(0.0, 1.0, 0.5), opacity=0.9),
        ]
    )
    order = np.array([0, 1])
    state = blend_tile_global(batch, order, (0, 0, 8, 8), eps_t=0.0)
    bg = np.array([0.2, 0.3, 0.4])
    img = composite_background(state, bg)

    # pixel at both means: straight front-to-back arithmetic
    aA, aB = 0.6, 0.9
    want = aA * np.array([1.0, 0.0, 0.25]) + (1 - aA) * aB * np.array([0.0, 1.0, 0.5])
    want = want + (1 - aA) * (1 - aB) * bg
    np.testing.assert_allclose(img[2, 2], want, rtol=1e-12)
    assert state.n_contrib[2, 2] == 2

    # off-center pixel: same identity with the gaussian falloff applied
    aA = 0.6 * np.exp(-0.5 * (0.5 * 2.0))  # dx = dy = 1
    aB = 0.9 * np.exp(-0.5 * (0.25 * 2.0))
    want = aA * np.array([1.0, 0.0, 0.25]) + (1 - aA) * aB * np.array([0.0, 1.0, 0.5])
    want = want + (1 - aA) * (1 - aB) * bg
    np.testing.assert_allclose(img[3, 3], want, rtol=1e-12)


def test_below_threshold_alpha_does_not_blend():
    batch = hand_batch(
        [dict(mean2=(2.5, 2.5), conic=(1, 0, 1), depth=1, rgb=(1, 1, 1),
              opacity=ALPHA_MIN * 0.5)]
    )
    state = blend_tile_global(batch, np.array([0]), (0, 0, 8, 8), eps_t=0.0)
    assert np.all(state.rgb == 0)
    assert np.all(state.T == 1)
    assert np.all(state.n_contrib == 0)


def test_termination_stop_positions():
    splats = [
        dict(mean2=(1.5, 1.5), conic=(2.0, 0, 2.0), depth=float(k + 1),
             rgb=(1, 1, 1), opacity=0.99)
        for k in range(3)
    ]
    batch = hand_batch(splats, image=(4, 4))
    counters = EvalCounters()
    state = blend_tile_global(
        batch, np.arange(3), (0, 0, 4, 4), eps_t=0.05, counters=counters
    )
    # the center pixel saturates on the first splat: T = 0.01 < 0.05
    assert state.terminated[1, 1]
    assert state.stop[1, 1] == 1
    assert state.n_contrib[1, 1] == 1
    # gaussian-centric traversal still evaluates every candidate
    assert counters.performed == counters.candidates == 3 * 16


def test_pixel_centric_skips_terminated():
    splats = [
        dict(mean2=(1.5, 1.5), conic=(2.0, 0, 2.0), depth=float(k + 1),
             rgb=(1, 1, 1), opacity=0.99)
        for k in range(3)
    ]
    batch = hand_batch(splats, image=(4, 4))
    order = np.arange(3)
    rect = (0, 0, 4, 4)
    ref = blend_tile_global(batch, order, rect, eps_t=0.05)
    carry = blend_tile_global(batch, order, rect, eps_t=0.05, end=0)  # fresh
    counters = EvalCounters()
    got = blend_pixel_centric(batch, order, rect, carry, eps_t=0.05, counters=counters)
    np.testing.assert_array_equal(ref.rgb, got.rgb)
    np.testing.assert_array_equal(ref.T, got.T)
    np.testing.assert_array_equal(ref.stop, got.stop)
    assert counters.skipped > 0
    assert counters.performed + counters.skipped == counters.candidates


def test_pixel_centric_saturated_carry_performs_nothing():
    batch = hand_batch(
        [dict(mean2=(1.5, 1.5), conic=(1, 0, 1), depth=1, rgb=(1, 1, 1), opacity=0.9)],
        image=(4, 4),
    )
    carry = blend_tile_global(batch, np.arange(1), (0, 0, 4, 4), end=0)
    carry.terminated[:] = True
    counters = EvalCounters()
    out = blend_pixel_centric(
        batch, np.arange(1), (0, 0, 4, 4), carry, counters=counters
    )
    assert counters.performed == 0
    assert counters.skipped == counters.candidates == 16
    np.testing.assert_array_equal(out.rgb, carry.rgb)


def test_single_chunk_merge_is_bitwise_global():
    rng = np.random.default_rng(0)
    cam = make_camera(32, 32)
    scene = random_scene(rng, 40, cam)
    from tilesplat.preprocess import bin_and_sort, preprocess

    batch64, _ = preprocess(scene, cam)
    batch = batch64.astype(np.float32)
    binning = bin_and_sort(batch64, (32, 32), (32, 32))
    order = binning.lists[0]
    rect = (0, 0, 32, 32)
    ref = blend_tile_global(batch, order, rect, eps_t=1e-4)
    part = blend_ztile(batch, order, rect, 0, len(order))
    merged = merge_ztiles([part], [len(order)], rect, np.float32, eps_t=1e-4)
    np.testing.assert_array_equal(ref.rgb, merged.rgb)
    np.testing.assert_array_equal(ref.T, merged.T)
    np.testing.assert_array_equal(ref.n_contrib, merged.n_contrib)


@pytest.mark.parametrize("K", [2, 3, 4, 8])
def test_ztile_merge_equals_global_eps0(K):
    rng = np.random.default_rng(K)
    cam = make_camera(64, 64)
    scene = random_scene(rng, 96, cam)
    base = dict(tile_size=(32, 32), eps_t=0.0, background=(0.1, 0.2, 0.3))
    a = render(scene, cam, RenderConfig(**base, dtype=np.float64, z_tiles=1))
    b = render(scene, cam, RenderConfig(**base, dtype=np.float64, z_tiles=K))
    assert float(np.abs(a.image.data - b.image.data).max()) <= 1e-12

    a32 = render(scene, cam, RenderConfig(**base, dtype=np.float32, z_tiles=1))
    b32 = render(scene, cam, RenderConfig(**base, dtype=np.float32, z_tiles=K))
    x, y = a32.image.data, b32.image.data
    assert np.all(np.abs(x - y) <= 1e-5 * np.maximum(np.abs(x), np.abs(y)) + 1e-7)


def test_hybrid_modes_bit_identical():
    rng = np.random.default_rng(5)
    cam = make_camera(96, 96)
    scene = opaque_foreground_scene(rng, cam)
    base = dict(tile_size=(32, 32), eps_t=1e-4)
    pure = render(scene, cam, RenderConfig(**base))
    for mode, extra in (
        ("fixed_fraction", dict(hybrid_fraction=0.25)),
        ("occlusion_threshold", dict(occlusion_threshold=0.9)),
    ):
        hyb = render(scene, cam, RenderConfig(**base, hybrid=mode, **extra))
        assert np.array_equal(pure.image.data, hyb.image.data), mode
        assert hyb.stats.hybrid_splits is not None
        assert hyb.stats.counters.performed < pure.stats.counters.performed
        assert hyb.stats.counters.candidates == pure.stats.counters.candidates


def test_hybrid_split_position_fixed_fraction():
    rng = np.random.default_rng(6)
    cam = make_camera(32, 32)
    scene = random_scene(rng, 50, cam)
    res = render(
        scene, cam,
        RenderConfig(tile_size=(32, 32), hybrid="fixed_fraction", hybrid_fraction=0.25),
    )
    m = res.stats.per_tile_lengths[0]
    assert res.stats.hybrid_splits[0] == int(np.ceil(0.75 * m))


def test_empty_scene_renders_background():
    cam = make_camera(16, 16, focal=10.0)
    # single gaussian behind the camera: everything culls
    from tilesplat.model import GaussianScene

    scene = GaussianScene(
        means=np.array([[0.0, 0.0, -5.0]]),
        log_scales=np.zeros((1, 3)),
        rotations=np.array([[1.0, 0, 0, 0]]),
        opacity_logits=np.zeros(1),
        sh=np.zeros((1, 1, 3)),
    )
    res = render(scene, cam, RenderConfig(background=(0.25, 0.5, 0.75)))
    want = np.broadcast_to([0.25, 0.5, 0.75], (16, 16, 3)).astype(np.float32)
    np.testing.assert_array_equal(res.image.data, want)
    assert res.stats.n_splats == 0


def test_trace_contents():
    rng = np.random.default_rng(7)
    cam = make_camera(32, 32)
    scene = random_scene(rng, 20, cam)
    cfg = RenderConfig(tile_size=(16, 16), eps_t=0.0, dtype=np.float64)
    res = render(scene, cam, cfg, want_trace=True)
    tr = res.trace
    assert tr is not None
    assert tr.t_final.shape == (32, 32)
    assert tr.stop.shape == (32, 32)
    # with eps_t = 0 nothing terminates: stop equals each tile's list length
    for t in range(tr.binning.n_tiles):
        x0, y0, x1, y1 = tr.binning.tile_rect(t)
        assert np.all(tr.stop[y0:y1, x0:x1] == len(tr.binning.lists[t]))
    assert np.all(tr.t_final > 0) and np.all(tr.t_final <= 1)


def test_trace_requires_plain_schedule():
    rng = np.random.default_rng(8)
    cam = make_camera(16, 16)
    scene = random_scene(rng, 4, cam)
    with pytest.raises(ValueError, match="trac"):
        render(scene, cam, RenderConfig(z_tiles=2), want_trace=True)
    with pytest.raises(ValueError, match="trac"):
        render(scene, cam, RenderConfig(hybrid="fixed_fraction"), want_trace=True)


def test_config_validation():
    bad = [
        dict(tile_size=(0, 16)),
        dict(z_tiles=0),
        dict(eps_t=-1.0),
        dict(hybrid="maybe"),
        dict(hybrid_fraction=0.0),
        dict(occlusion_threshold=1.0),
        dict(dtype=np.int32),
        dict(background=(0.1, 0.2)),
        dict(background=(-0.1, 0.2, 0.3)),
        dict(threads=0),
        dict(bank_trace_groups=-1),
    ]
    for kw in bad:
        with pytest.raises(ValueError):
            RenderConfig(**kw).validate()


def test_threads_bit_identical():
    rng = np.random.default_rng(9)
    cam = make_camera(64, 64)
    scene = random_scene(rng, 128, cam)
    cfg1 = RenderConfig(tile_size=(16, 16), threads=1)
    cfg8 = RenderConfig(tile_size=(16, 16), threads=8)
    a = render(scene, cam, cfg1)
    b = render(scene, cam, cfg8)
    assert np.array_equal(a.image.data, b.image.data)
    assert a.stats.to_text() == b.stats.to_text()


def test_occlusion_trace_recording():
    rng = np.random.default_rng(10)
    cam = make_camera(64, 64)
    scene = random_scene(rng, 64, cam, logit_range=(2.0, 3.0))
    cfg = RenderConfig(tile_size=(32, 32), z_tiles=4, eps_t=1e-2, record_occlusion=True)
    res = render(scene, cam, cfg)
    occ = res.stats.occlusion
    assert occ is not None
    assert occ.n_chunks == 4
    assert occ.total_pixels == 64 * 64
    assert occ.eps_t == 1e-2
    counts = occ.occluded_after_chunk
    assert np.all(np.diff(counts) >= 0)  # occlusion only grows
    assert counts[-1] > 0


def test_bank_trace_groups_cap():
    rng = np.random.default_rng(11)
    cam = make_camera(64, 64)
    scene = random_scene(rng, 64, cam)
    cfg = RenderConfig(tile_size=(32, 32), bank_trace_groups=20)
    res = render(scene, cam, cfg)
    groups = res.stats.bank_groups
    assert groups is not None
    assert 0 < len(groups) <= 20
    assert all(1 <= len(g) <= 16 and g.shape[1] == 2 for g in groups)


def test_partial_edge_tiles():
    rng = np.random.default_rng(12)
    cam = make_camera(50, 30)
    scene = random_scene(rng, 30, cam)
    res = render(scene, cam, RenderConfig(tile_size=(16, 16)))
    assert res.image.data.shape == (30, 50, 3)
    full = render(scene, cam, RenderConfig(tile_size=(64, 64)))
    np.testing.assert_allclose(res.image.data, full.image.data, atol=2e-7)
