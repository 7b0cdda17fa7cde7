"""Tile-based splat rendering of color, depth, alpha and feature maps, with analytic gradients."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from . import _kernels as K
from .scene import (
    COV2D_EPS, FEATURE_DIM, NEAR_PLANE, PARAM_FIELDS, SH_C1, Camera, GaussianScene, Projection,
    _sh1_basis, project_scene, rotmat_vjp,
)

DEFAULT_TILE = 16


@dataclass
class _RenderContext:
    proj: Projection
    ids: np.ndarray           # visible Gaussian indices, depth-sorted
    tile_offsets: np.ndarray
    tile_ids: np.ndarray      # positions into ``ids``
    means: np.ndarray
    conics: np.ndarray
    opac: np.ndarray
    vals: np.ndarray
    bg_vals: np.ndarray
    final_T: np.ndarray
    last_idx: np.ndarray
    tile: int
    n_tiles_x: int
    n_gaussians: int


@dataclass
class RenderedView:
    color: np.ndarray      # (H, W, 3)
    depth: np.ndarray      # (H, W)
    alpha: np.ndarray      # (H, W) accumulated alpha
    feature: np.ndarray    # (H, W, 16)
    counts: np.ndarray     # (H, W) contributing splats per pixel
    _ctx: Optional[_RenderContext] = field(default=None, repr=False)

    @property
    def transmittance(self) -> np.ndarray:
        return 1.0 - self.alpha


@dataclass
class RenderGradients:
    """Per-Gaussian loss gradients, one array per scene parameter."""

    positions: np.ndarray
    log_scales: np.ndarray
    rotations: np.ndarray
    colors: np.ndarray
    opacity_logits: np.ndarray
    features: np.ndarray
    sh: Optional[np.ndarray] = None

    @classmethod
    def zeros_like(cls, scene: GaussianScene) -> "RenderGradients":
        return cls(**{k: np.zeros(v.shape) for k, v in scene.params().items()})

    def as_dict(self) -> dict[str, np.ndarray]:
        return {k: getattr(self, k) for k in PARAM_FIELDS if getattr(self, k) is not None}

    def __iadd__(self, other: "RenderGradients"):
        for k, v in other.as_dict().items():
            getattr(self, k)[...] += v
        return self

    def all_finite(self) -> bool:
        return all(np.all(np.isfinite(v)) for v in self.as_dict().values())


def _bin_tiles(means, radii, W, H, tile):
    """CSR tile lists; entries keep the (already depth-sorted) input order."""
    ntx = (W + tile - 1) // tile
    nty = (H + tile - 1) // tile
    px0 = np.clip(np.ceil(means[:, 0] - radii), 0, W - 1).astype(np.int64)
    px1 = np.clip(np.floor(means[:, 0] + radii), 0, W - 1).astype(np.int64)
    py0 = np.clip(np.ceil(means[:, 1] - radii), 0, H - 1).astype(np.int64)
    py1 = np.clip(np.floor(means[:, 1] + radii), 0, H - 1).astype(np.int64)
    # a bbox lying between pixel centres touches no pixel
    hit = (px1 >= px0) & (py1 >= py0) & (means[:, 0] + radii >= px0) & (means[:, 0] - radii <= px1) \
        & (means[:, 1] + radii >= py0) & (means[:, 1] - radii <= py1)
    tx0, tx1, ty0, ty1 = px0 // tile, px1 // tile, py0 // tile, py1 // tile
    nx = np.where(hit, tx1 - tx0 + 1, 0)
    ny = np.where(hit, ty1 - ty0 + 1, 0)
    per = nx * ny
    total = int(per.sum())
    owner = np.repeat(np.arange(len(means)), per)
    local = np.arange(total) - np.repeat(np.cumsum(per) - per, per)
    nxr = np.repeat(nx, per)
    tile_x = np.repeat(tx0, per) + local % np.maximum(nxr, 1)
    tile_y = np.repeat(ty0, per) + local // np.maximum(nxr, 1)
    tile_key = tile_y * ntx + tile_x
    order = np.argsort(tile_key, kind="stable")
    tile_ids = owner[order].astype(np.int64)
    counts = np.bincount(tile_key, minlength=ntx * nty)
    offsets = np.zeros(ntx * nty + 1, dtype=np.int64)
    np.cumsum(counts, out=offsets[1:])
    return offsets, tile_ids, ntx


def render(scene: GaussianScene, camera: Camera, background_color=(0.0, 0.0, 0.0),
           background_depth: float = 0.0, tile: int = DEFAULT_TILE, near: float = NEAR_PLANE,
           cov_eps: float = COV2D_EPS) -> RenderedView:
    """Alpha-blend the scene front to back into color, expected depth, alpha and features.

    Splats are sorted by camera depth (ties by source index). The blend stops once the
    transmittance falls below 1e-4; background color and depth fill the remainder.
    """
    W, H = camera.resolution
    proj = project_scene(scene, camera, near, cov_eps)
    vis = np.flatnonzero(proj.valid)
    ids = vis[np.lexsort((vis, proj.depths[vis]))]

    means = np.ascontiguousarray(proj.means2d[ids])
    conics = np.ascontiguousarray(proj.conics[ids])
    opac = scene.opacities[ids]
    vals = np.empty((len(ids), K.NV))
    vals[:, :3] = proj.colors[ids]
    vals[:, 3:3 + FEATURE_DIM] = scene.features[ids]
    vals[:, K.IDX_DEPTH] = proj.depths[ids]
    bg_vals = np.zeros(K.NV)
    bg_vals[:3] = background_color
    bg_vals[K.IDX_DEPTH] = background_depth

    offsets, tile_ids, ntx = _bin_tiles(means, proj.radii[ids], W, H, tile)
    out_vals = np.empty((H, W, K.NV))
    alpha = np.empty((H, W))
    final_T = np.empty((H, W))
    last = np.empty((H, W), dtype=np.int64)
    count = np.empty((H, W), dtype=np.int64)
    K.forward_tiles(offsets, tile_ids, means, conics, opac, vals, bg_vals,
                    H, W, tile, ntx, out_vals, alpha, final_T, last, count)

    ctx = _RenderContext(proj, ids, offsets, tile_ids, means, conics, opac, vals, bg_vals,
                         final_T, last, tile, ntx, len(scene))
    return RenderedView(
        color=out_vals[:, :, :3].copy(), depth=out_vals[:, :, K.IDX_DEPTH].copy(), alpha=alpha,
        feature=out_vals[:, :, 3:3 + FEATURE_DIM].copy(), counts=count, _ctx=ctx,
    )


def _check_map(name, arr, shape):
    if arr is None:
        return np.zeros(shape)
    arr = np.asarray(arr, dtype=np.float64)
    if arr.shape != shape:
        raise ValueError(f"gradient map {name} has shape {arr.shape}, expected {shape}")
    return arr


def render_backward(scene: GaussianScene, camera: Camera, view: RenderedView, grad_color=None,
                    grad_depth=None, grad_alpha=None, grad_feature=None) -> RenderGradients:
    """Gradients of a scalar loss w.r.t. every scene parameter, given dLoss/d(map) per channel."""
    ctx = view._ctx
    if ctx is None or ctx.n_gaussians != len(scene):
        raise ValueError("view was not rendered from this scene")
    H, W = view.alpha.shape
    g_vals = np.zeros((H, W, K.NV))
    g_vals[:, :, :3] = _check_map("color", grad_color, (H, W, 3))
    g_vals[:, :, 3:3 + FEATURE_DIM] = _check_map("feature", grad_feature, (H, W, FEATURE_DIM))
    g_vals[:, :, K.IDX_DEPTH] = _check_map("depth", grad_depth, (H, W))
    g_alpha = _check_map("alpha", grad_alpha, (H, W))

    grads = RenderGradients.zeros_like(scene)
    if len(ctx.ids) == 0:
        return grads
    entry = np.zeros((len(ctx.tile_ids), 6 + K.NV))
    K.backward_tiles(ctx.tile_offsets, ctx.tile_ids, ctx.means, ctx.conics, ctx.opac, ctx.vals,
                     ctx.bg_vals, H, W, ctx.tile, ctx.n_tiles_x, ctx.final_T, ctx.last_idx,
                     g_vals, g_alpha, entry)
    n_vis = len(ctx.ids)
    # fixed-order reduction of per-entry partials
    per = np.stack([np.bincount(ctx.tile_ids, weights=entry[:, j], minlength=n_vis)
                    for j in range(entry.shape[1])], axis=1)

    ids = ctx.ids
    p = ctx.proj
    opac = ctx.opac
    grads.opacity_logits[ids] = per[:, 5] * opac * (1.0 - opac)
    grads.features[ids] = per[:, 9:9 + FEATURE_DIM]
    g_color = per[:, 6:9]
    grads.colors[ids] = g_color

    # conic (a, b, c) -> full symmetric inverse-covariance gradient -> cov2d
    Q = np.empty((n_vis, 2, 2))
    Q[:, 0, 0], Q[:, 0, 1], Q[:, 1, 0], Q[:, 1, 1] = (ctx.conics[:, 0], ctx.conics[:, 1],
                                                      ctx.conics[:, 1], ctx.conics[:, 2])
    GQ = np.empty((n_vis, 2, 2))
    GQ[:, 0, 0] = per[:, 2]
    GQ[:, 0, 1] = GQ[:, 1, 0] = 0.5 * per[:, 3]
    GQ[:, 1, 1] = per[:, 4]
    G_cov = -Q @ GQ @ Q

    M = p.M[ids]
    sigma = M @ np.swapaxes(M, 1, 2)
    J = p.J[ids]
    T = J @ camera.R
    G_sigma = np.swapaxes(T, 1, 2) @ G_cov @ T
    G_T = 2.0 * G_cov @ T @ sigma
    G_J = G_T @ camera.R.T

    fx, fy = camera.focal
    x, y, z = p.t_cam[ids, 0], p.t_cam[ids, 1], p.t_cam[ids, 2]
    gm = per[:, 0:2]
    g_t = np.zeros((n_vis, 3))
    g_t[:, 0] = gm[:, 0] * fx / z - G_J[:, 0, 2] * fx / z**2
    g_t[:, 1] = gm[:, 1] * fy / z - G_J[:, 1, 2] * fy / z**2
    g_t[:, 2] = (-gm[:, 0] * fx * x / z**2 - gm[:, 1] * fy * y / z**2
                 - G_J[:, 0, 0] * fx / z**2 + G_J[:, 0, 2] * 2 * fx * x / z**3
                 - G_J[:, 1, 1] * fy / z**2 + G_J[:, 1, 2] * 2 * fy * y / z**3
                 + per[:, 6 + K.IDX_DEPTH])
    g_pos = g_t @ camera.R

    # Sigma = M M^T, M = R diag(s)
    G_M = 2.0 * G_sigma @ M
    s = p.scales[ids]
    Rq = p.Rq[ids]
    grads.log_scales[ids] = np.sum(G_M * Rq, axis=1) * s
    grads.rotations[ids] = rotmat_vjp(scene.rotations[ids].astype(np.float64), G_M * s[:, None, :])

    if scene.sh is not None:
        dirs = p.view_dirs[ids]
        basis = _sh1_basis(dirs)
        grads.sh[ids] = (basis[:, :, None] * g_color[:, None, :]).reshape(n_vis, 9)
        sh = scene.sh[ids].astype(np.float64).reshape(n_vis, 3, 3)
        g_basis = np.einsum("nkc,nc->nk", sh, g_color) * SH_C1
        g_dir = np.stack([-g_basis[:, 2], -g_basis[:, 0], g_basis[:, 1]], axis=1)
        dist = p.view_dist[ids][:, None]
        g_pos += (g_dir - dirs * np.sum(dirs * g_dir, axis=1, keepdims=True)) / dist

    grads.positions[ids] = g_pos
    return grads


@dataclass
class GradCheckReport:
    max_rel_error: dict[str, float]
    tolerance: float
    n_params: int
    seconds: float

    @property
    def passed(self) -> bool:
        return all(v < self.tolerance for v in self.max_rel_error.values())

    def format(self) -> str:
        lines = [f"{k:15s} max rel err {v:.3e}  {'ok' if v < self.tolerance else 'FAIL'}"
                 for k, v in self.max_rel_error.items()]
        lines.append(f"{self.n_params} parameters checked in {self.seconds:.1f}s: "
                     f"{'PASS' if self.passed else 'FAIL'}")
        return "\n".join(lines)


def random_scene(n: int, rng: np.random.Generator, center=(0.0, 0.0, 3.0), spread: float = 0.6,
                 sh_degree: int = 0, opacity_range=(0.05, 0.6), dtype=np.float64) -> GaussianScene:
    """Random non-saturating scene around ``center`` (used by gradient checks and tests)."""
    scene = GaussianScene.zeros(n, sh_degree, dtype)
    scene.positions[:] = np.asarray(center) + rng.uniform(-spread, spread, (n, 3))
    scene.log_scales[:] = np.log(rng.uniform(0.03, 0.15, (n, 3)))
    q = rng.normal(size=(n, 4))
    scene.rotations[:] = q / np.linalg.norm(q, axis=1, keepdims=True)
    scene.colors[:] = rng.uniform(0, 1, (n, 3))
    op = rng.uniform(*opacity_range, n)
    scene.opacity_logits[:] = np.log(op / (1 - op))
    scene.features[:] = rng.normal(0, 0.5, (n, FEATURE_DIM))
    if scene.sh is not None:
        scene.sh[:] = rng.normal(0, 0.2, (n, 9))
    return scene


def separated_scene(n: int, rng: np.random.Generator, camera: Camera, min_gap: float = 2e-3,
                    **kwargs) -> GaussianScene:
    """``random_scene`` redrawn until all camera depths differ by more than ``min_gap``.

    Two splats that swap depth order change the blend discontinuously, so a central
    difference straddling the swap measures the jump rather than the gradient.
    """
    for _ in range(1000):
        scene = random_scene(n, rng, **kwargs)
        z = np.sort(camera.world_to_camera(scene.positions)[:, 2])
        if n < 2 or np.diff(z).min() > min_gap:
            return scene
    raise ValueError(f"could not separate {n} depths by {min_gap}")


def check_gradients(scene: GaussianScene, camera: Camera, seed: int = 0, h: float = 1e-4,
                    tol: float = 1e-3, atol: float = 1e-6, background_depth: float = 10.0) -> GradCheckReport:
    """Compare analytic gradients with central differences on a random linear loss.

    The loss is a random weighted sum over every output channel. Relative error is
    |a - n| / max(|a|, |n|, atol) per parameter; the report keeps the max per class.
    """
    import time

    if len(scene) > 100:
        raise ValueError("finite-difference check is limited to 100 Gaussians")
    t0 = time.perf_counter()
    scene = scene.astype(np.float64)
    W, H = camera.resolution
    rng = np.random.default_rng(seed)
    wc = rng.uniform(-1, 1, (H, W, 3))
    wd = rng.uniform(-1, 1, (H, W)) * 0.1
    wa = rng.uniform(-1, 1, (H, W))
    wf = rng.uniform(-1, 1, (H, W, FEATURE_DIM)) * 0.2
    bg = (0.2, 0.3, 0.4)

    def loss(sc):
        v = render(sc, camera, bg, background_depth)
        return float(np.sum(wc * v.color) + np.sum(wd * v.depth) + np.sum(wa * v.alpha)
                     + np.sum(wf * v.feature))

    view = render(scene, camera, bg, background_depth)
    analytic = render_backward(scene, camera, view, wc, wd, wa, wf).as_dict()
    report: dict[str, float] = {}
    n_params = 0
    for name, arr in scene.params().items():
        worst = 0.0
        flat = arr.reshape(-1)
        an = analytic[name].reshape(-1)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + h
            lp = loss(scene)
            flat[i] = orig - h
            lm = loss(scene)
            flat[i] = orig
            num = (lp - lm) / (2 * h)
            err = abs(an[i] - num) / max(abs(an[i]), abs(num), atol)
            worst = max(worst, err)
        report[name] = worst
        n_params += flat.size
    return GradCheckReport(report, tol, n_params, time.perf_counter() - t0)
