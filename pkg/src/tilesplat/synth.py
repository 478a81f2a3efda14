"""Seeded synthetic scenes and cameras for tests, analysis, and demos.

All generators draw from a caller-provided numpy Generator so a seed
pins the scene exactly.  World-space scales are chosen through the
camera so footprints land at predictable pixel sizes.
"""

from __future__ import annotations

import numpy as np

from .model import Camera, GaussianScene, opacity_to_logit
from .sh import SH_C0, coeff_count


def make_camera(
    width: int = 128,
    height: int = 128,
    focal: float | None = None,
    near: float = 0.2,
) -> Camera:
    """Identity-pose pinhole camera centered on the image."""
    f = float(focal) if focal is not None else float(max(width, height))
    return Camera(
        world_to_cam=np.eye(4),
        fx=f,
        fy=f,
        cx=width / 2.0,
        cy=height / 2.0,
        width=width,
        height=height,
        near=near,
    )


def orbit_camera(
    width: int,
    height: int,
    angle_deg: float,
    radius: float,
    target_z: float,
    focal: float | None = None,
) -> Camera:
    """Camera on a horizontal circle of given radius looking at (0, 0, target_z)."""
    f = float(focal) if focal is not None else float(max(width, height))
    ang = np.deg2rad(angle_deg)
    target = np.array([0.0, 0.0, target_z])
    eye = target + radius * np.array([np.sin(ang), 0.0, -np.cos(ang)])
    fwd = target - eye
    fwd = fwd / np.linalg.norm(fwd)
    up = np.array([0.0, 1.0, 0.0])
    right = np.cross(up, fwd)
    right = right / np.linalg.norm(right)
    down = np.cross(fwd, right)
    R = np.stack([right, down, fwd])
    w2c = np.eye(4)
    w2c[:3, :3] = R
    w2c[:3, 3] = -R @ eye
    return Camera(
        world_to_cam=w2c,
        fx=f,
        fy=f,
        cx=width / 2.0,
        cy=height / 2.0,
        width=width,
        height=height,
    )


def _unproject(cam: Camera, u, v, z):
    """Pixel (u, v) at camera depth z back to world (identity-pose cameras)."""
    x = (u - cam.cx) * z / cam.fx
    y = (v - cam.cy) * z / cam.fy
    return np.stack([x, y, z], axis=-1)


def _random_quats(rng: np.random.Generator, n: int) -> np.ndarray:
    q = rng.normal(size=(n, 4))
    # keep norms comfortably away from zero; raw quats stay unnormalized
    low = np.linalg.norm(q, axis=1) < 0.3
    q[low] += np.array([1.0, 0.0, 0.0, 0.0])
    return q


def _dc_from_rgb(rgb: np.ndarray) -> np.ndarray:
    """Degree-0 coefficients that evaluate to the given base colors."""
    return (rgb - 0.5) / SH_C0


def random_scene(
    rng: np.random.Generator,
    n: int,
    cam: Camera,
    degree: int = 0,
    px_sigma: tuple[float, float] = (1.5, 6.0),
    z_range: tuple[float, float] = (3.0, 9.0),
    logit_range: tuple[float, float] = (-2.0, 2.5),
    margin: float = 0.1,
) -> GaussianScene:
    """General-purpose scene: splats scattered across the view frustum."""
    z = rng.uniform(*z_range, size=n)
    u = rng.uniform(margin * cam.width, (1 - margin) * cam.width, size=n)
    v = rng.uniform(margin * cam.height, (1 - margin) * cam.height, size=n)
    means = _unproject(cam, u, v, z)
    sig_px = rng.uniform(*px_sigma, size=(n, 3))
    aniso = rng.uniform(0.6, 1.4, size=(n, 3))
    log_scales = np.log(sig_px * aniso * z[:, None] / cam.fx)
    rgb = rng.uniform(0.1, 0.9, size=(n, 3))
    k = coeff_count(degree)
    sh = np.zeros((n, k, 3))
    sh[:, 0, :] = _dc_from_rgb(rgb)
    if k > 1:
        sh[:, 1:, :] = rng.normal(scale=0.08, size=(n, k - 1, 3))
    return GaussianScene(
        means=means,
        log_scales=log_scales,
        rotations=_random_quats(rng, n),
        opacity_logits=rng.uniform(*logit_range, size=n),
        sh=sh,
    )


def outdoor_scene(
    rng: np.random.Generator, cam: Camera, n: int = 1000
) -> GaussianScene:
    """Large overlapping splats (mean footprint well above 48 px across)."""
    return random_scene(
        rng,
        n,
        cam,
        degree=0,
        px_sigma=(8.0, 20.0),
        z_range=(4.0, 12.0),
        logit_range=(-1.0, 2.0),
        margin=0.05,
    )


def _quilt_layer(
    cam: Camera, z: float, grid: int, sigma_px: float, opacity: float, rgb
) -> GaussianScene:
    """One depth layer of large splats covering the full image."""
    step_u = cam.width / grid
    step_v = cam.height / grid
    centers_u = (np.arange(grid) + 0.5) * step_u
    centers_v = (np.arange(grid) + 0.5) * step_v
    uu, vv = np.meshgrid(centers_u, centers_v)
    means = _unproject(cam, uu.ravel(), vv.ravel(), np.full(grid * grid, z))
    n = grid * grid
    log_scales = np.full((n, 3), np.log(sigma_px * z / cam.fx))
    sh = np.zeros((n, 1, 3))
    sh[:, 0, :] = _dc_from_rgb(np.tile(np.asarray(rgb, dtype=np.float64), (n, 1)))
    return GaussianScene(
        means=means,
        log_scales=log_scales,
        rotations=np.tile([1.0, 0.0, 0.0, 0.0], (n, 1)),
        opacity_logits=np.full(n, float(opacity_to_logit(opacity))),
        sh=sh,
    )


def _concat_scenes(scenes: list[GaussianScene]) -> GaussianScene:
    return GaussianScene(
        means=np.concatenate([s.means for s in scenes]),
        log_scales=np.concatenate([s.log_scales for s in scenes]),
        rotations=np.concatenate([s.rotations for s in scenes]),
        opacity_logits=np.concatenate([s.opacity_logits for s in scenes]),
        sh=np.concatenate([s.sh for s in scenes]),
    )


def indoor_scene(
    rng: np.random.Generator, cam: Camera, layers: int = 8
) -> GaussianScene:
    """Dense depth-layered scene; nearly every pixel saturates early.

    Each layer is a 3x3 quilt of large high-opacity splats, so the
    transmittance of a typical pixel drops below 1e-4 within a few
    layers and the occluded fraction approaches 1 by the back.
    """
    parts = []
    for l in range(layers):
        z = 2.0 + 0.8 * l
        rgb = rng.uniform(0.2, 0.8, size=3)
        parts.append(
            _quilt_layer(cam, z, grid=3, sigma_px=0.5 * cam.width, opacity=0.97, rgb=rgb)
        )
    return _concat_scenes(parts)


def opaque_foreground_scene(
    rng: np.random.Generator, cam: Camera, n_back: int = 150
) -> GaussianScene:
    """A fully opaque near wall with plenty of hidden background work.

    Three stacked 2x2 quilts of 0.99-opacity splats terminate every
    pixel almost immediately; the background splats all sort behind
    them, so a trailing pixel-centric pass skips nearly all of that
    work.
    """
    parts = []
    for j, z in enumerate((1.8, 2.0, 2.2)):
        rgb = rng.uniform(0.3, 0.7, size=3)
        parts.append(
            _quilt_layer(cam, z, grid=2, sigma_px=0.5 * cam.width, opacity=0.99, rgb=rgb)
        )
    parts.append(
        random_scene(
            rng,
            n_back,
            cam,
            px_sigma=(3.0, 10.0),
            z_range=(4.0, 10.0),
            logit_range=(0.0, 2.5),
        )
    )
    return _concat_scenes(parts)


def toy_training_scene(
    rng: np.random.Generator, cam: Camera, n: int = 10
) -> tuple[GaussianScene, GaussianScene]:
    """(target, initial) pair for small fitting runs.

    The initial scene is the target with jittered positions, gray
    colors, and uniform moderate opacity, so optimization has real work
    on every parameter group but starts within the basin.
    """
    target = random_scene(
        rng,
        n,
        cam,
        degree=0,
        px_sigma=(1.0, 2.5),
        z_range=(3.0, 6.0),
        logit_range=(0.5, 2.0),
        margin=0.2,
    )
    init = target.copy()
    jitter = rng.normal(scale=0.05, size=init.means.shape) * init.means[:, 2:3]
    init.means = init.means + jitter * 0.05
    init.sh = np.zeros_like(init.sh)
    init.sh[:, 0, :] = _dc_from_rgb(np.full((n, 3), 0.5))
    init.opacity_logits = np.full(n, 0.5)
    init.log_scales = init.log_scales + rng.normal(scale=0.1, size=(n, 3))
    return target, init
