"""Model initialization from the inpainted reference, loss scheduling, Adam, and the
outer selective-inpainting loop.
"""

from __future__ import annotations

import csv
import logging
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Optional, Sequence

import numpy as np

from .losses import LossConfig, cfdl, oacl, partition_depth_bins, photometric_loss, sdcl
from .metrics import EvalReport, evaluate
from .rasterizer import RenderGradients, render, render_backward
from .scene import FEATURE_DIM, Camera, GaussianScene, load_scene, save_scene
from .sgi import AlignmentError, Inpainter, ReferenceSet, SGIConfig, align_depth, invoke_inpainter, sgi_step

log = logging.getLogger(__name__)


class NonFiniteLossError(FloatingPointError):
    def __init__(self, message: str, view_id: int):
        super().__init__(message)
        self.view_id = view_id


@dataclass
class TrainingView:
    view_id: int
    camera: Camera
    image: np.ndarray
    mask: np.ndarray
    mono_depth: np.ndarray
    segments: Optional[np.ndarray] = None  # label map, -1 = unlabelled
    init_depth: Optional[np.ndarray] = None  # metric depth for unmasked pixels (defaults to mono_depth)

    def __post_init__(self):
        W, H = self.camera.resolution
        if self.image.shape[:2] != (H, W) or self.mask.shape != (H, W) or self.mono_depth.shape != (H, W):
            raise ValueError(f"view {self.view_id}: maps do not match the camera resolution {W}x{H}")
        if self.segments is not None and self.segments.shape != (H, W):
            raise ValueError(f"view {self.view_id}: segment map has the wrong shape")
        if self.mask.mean() >= 0.9:
            raise ValueError(f"view {self.view_id}: inpaint mask covers 90% or more of the image")

    @classmethod
    def from_dataset_view(cls, v) -> "TrainingView":
        init = getattr(v, "depth", None)
        # copies: training must never write through to the dataset
        seg = getattr(v, "segments", None)
        return cls(v.view_id, v.camera, np.array(v.image, dtype=np.float64), np.array(v.mask, dtype=bool),
                   np.array(v.mono_depth, dtype=np.float64), None if seg is None else np.array(seg),
                   None if init is None else np.array(init, dtype=np.float64))


@dataclass
class TrainConfig:
    baseline_steps: int = 8000
    seed: int = 0
    n_gaussians: int = 20000
    seed_stride: int = 2
    init_opacity: float = 0.5
    init_feature_std: float = 0.1
    sh_degree: int = 0
    lr_position: float = 2e-4  # multiplied by the scene extent
    lr_color: float = 2.5e-3
    lr_opacity: float = 5e-2
    lr_scale: float = 5e-3
    lr_rotation: float = 1e-3
    lr_feature: float = 2.5e-3
    adam_beta1: float = 0.9
    adam_beta2: float = 0.999
    adam_eps: float = 1e-15
    reseed_opacity: float = 0.005
    reseed_patience: int = 500
    background_color: tuple[float, float, float] = (0.0, 0.0, 0.0)
    background_depth: float = 0.0
    align_alpha: float = 0.5
    checkpoint_every: int = 0
    loss: LossConfig = field(default_factory=LossConfig)
    sgi: SGIConfig = field(default_factory=SGIConfig)

    def __post_init__(self):
        if self.baseline_steps < 0:
            raise ValueError("baseline_steps must be non-negative")
        if self.seed_stride < 1:
            raise ValueError("seed_stride must be >= 1")
        if self.sh_degree not in (0, 1):
            raise ValueError("sh_degree must be 0 or 1")

    def learning_rates(self, extent: float) -> dict[str, float]:
        return {"positions": self.lr_position * extent, "log_scales": self.lr_scale,
                "rotations": self.lr_rotation, "colors": self.lr_color, "sh": self.lr_color / 20,
                "opacity_logits": self.lr_opacity, "features": self.lr_feature}


@dataclass
class LossRecord:
    iteration: int
    view_id: int
    photometric: float
    sdcl: float
    cfdl: float
    oacl: float
    total: float


LOG_COLUMNS = ["iteration", "view", "photometric", "sdcl", "cfdl", "oacl", "total"]


@dataclass
class SeedPool:
    """Candidate (position, color, scale) triples for reseeding dead Gaussians."""

    positions: np.ndarray
    colors: np.ndarray
    log_scales: np.ndarray

    def __len__(self):
        return len(self.positions)


@dataclass
class TrainerState:
    scene: GaussianScene
    views: list[TrainingView]
    references: ReferenceSet
    config: TrainConfig
    extent: float
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)
    iteration: int = 0
    cursor: int = 0
    low_opacity_steps: Optional[np.ndarray] = None
    seed_pool: Optional[SeedPool] = None
    rng: Optional[np.random.Generator] = None
    history: list[LossRecord] = field(default_factory=list)
    sgi_settled: list[int] = field(default_factory=list)
    sgi_initial_error: Optional[float] = None
    sgi_round: int = 0

    def __post_init__(self):
        if not self.m:
            self.reset_optimizer()
        if self.low_opacity_steps is None:
            self.low_opacity_steps = np.zeros(len(self.scene), dtype=np.int64)
        if self.rng is None:
            self.rng = np.random.default_rng([self.config.seed, 3])

    def reset_optimizer(self):
        self.m = {k: np.zeros(a.shape) for k, a in self.scene.params().items()}
        self.v = {k: np.zeros(a.shape) for k, a in self.scene.params().items()}

    def view(self, view_id: int) -> TrainingView:
        for v in self.views:
            if v.view_id == view_id:
                return v
        raise KeyError(f"unknown view id {view_id}")

    @property
    def reference_view(self) -> int:
        return self.references.entries[0].view_id

    def schedule(self) -> list[int]:
        """One round-robin cycle: every view once, then every reference view a second time."""
        ids = sorted(v.view_id for v in self.views)
        return ids + sorted(self.references.view_ids)


def default_reference_view(views: Sequence) -> int:
    """The view with the most masked pixels (lowest id on ties)."""
    return max(views, key=lambda v: (int(v.mask.sum()), -v.view_id)).view_id


def scene_extent(cameras: Sequence[Camera]) -> float:
    centers = np.array([c.center for c in cameras])
    return float(1.1 * max(np.linalg.norm(centers - centers.mean(axis=0), axis=1).max(), 1e-3) * 2)


def _logit(p: float) -> float:
    return float(np.log(p / (1 - p)))


def seed_masked_gaussians(camera: Camera, image: np.ndarray, aligned_depth: np.ndarray, mask: np.ndarray,
                          stride: int = 2, opacity: float = 0.5, sh_degree: int = 0) -> GaussianScene:
    """One Gaussian per masked pixel on the stride grid, unprojected at the aligned depth.

    Scales are isotropic with sigma equal to the footprint of one stride cell.
    """
    H, W = mask.shape
    yy, xx = np.mgrid[0:H, 0:W]
    sel = mask & (yy % stride == 0) & (xx % stride == 0) & np.isfinite(aligned_depth) & (aligned_depth > 0)
    v, u = np.nonzero(sel)
    n = len(u)
    sc = GaussianScene.zeros(n, sh_degree, np.float32)
    if n == 0:
        return sc
    d = aligned_depth[v, u]
    sc.positions[:] = camera.unproject(u, v, d)
    sigma = stride * d / np.mean(camera.focal)
    sc.log_scales[:] = np.log(sigma)[:, None]
    sc.colors[:] = image[v, u]
    sc.opacity_logits[:] = _logit(opacity)
    return sc


def _init_cloud(views: Sequence[TrainingView], budget: int, cfg: TrainConfig, rng) -> GaussianScene:
    """Unproject unmasked pixels of every view on a stratified grid, then subsample to the budget."""
    total = sum(int((~v.mask).sum()) for v in views)
    stride = max(1, int(np.floor(np.sqrt(total / max(budget, 1)))))
    parts = []
    for v in views:
        H, W = v.mask.shape
        oy, ox = rng.integers(0, stride, 2)
        yy, xx = np.mgrid[0:H, 0:W]
        depth = v.mono_depth if v.init_depth is None else v.init_depth
        sel = ~v.mask & (yy % stride == oy) & (xx % stride == ox) & np.isfinite(depth) & (depth > 0)
        g = seed_masked_gaussians(v.camera, v.image, np.where(sel, depth, np.nan),
                                  sel, 1, cfg.init_opacity, cfg.sh_degree)
        g.log_scales[:] += np.log(0.5 * stride)  # grid spacing is ``stride`` pixels
        parts.append(g)
    cloud = parts[0]
    for p in parts[1:]:
        cloud = cloud.concat(p)
    if len(cloud) > budget:
        cloud = cloud.subset(np.sort(rng.choice(len(cloud), budget, replace=False)))
    return cloud


def init_training(views: Sequence, references: ReferenceSet, config: TrainConfig = TrainConfig()) -> TrainerState:
    """Point-cloud initialization from unmasked pixels plus masked seeding for the reference view.

    ``references`` must already hold the inpainted reference image as entry 0.
    """
    views = [v if isinstance(v, TrainingView) else TrainingView.from_dataset_view(v) for v in views]
    if len(views) < 2:
        raise ValueError("training needs at least two views")
    if not len(references):
        raise ValueError("the reference set has no inpainted reference image")
    rng = np.random.default_rng([config.seed, 0])
    ref = references.entries[0]
    r0 = next((v for v in views if v.view_id == ref.view_id), None)
    if r0 is None:
        raise ValueError(f"reference view {ref.view_id} is not a training view")
    if ref.image.shape != r0.image.shape:
        raise ValueError("inpainted reference does not match the view resolution")

    n_seed_est = int(r0.mask.sum()) // config.seed_stride**2
    cloud = _init_cloud(views, max(config.n_gaussians - n_seed_est, 1), config, rng)
    cloud.features[:] = rng.normal(0, config.init_feature_std, cloud.features.shape)

    seeds = GaussianScene.empty(config.sh_degree)
    if r0.mask.any():
        out = render(cloud, r0.camera, config.background_color, config.background_depth)
        region = ~r0.mask & (out.alpha > config.align_alpha)
        try:
            aligned = align_depth(r0.mono_depth, out.depth, region, config.sgi.min_align_pixels)
        except AlignmentError:
            log.warning("reference depth alignment failed, seeding at the raw depth prior")
            aligned = r0.mono_depth
        seeds = seed_masked_gaussians(r0.camera, ref.image, aligned, ref.mask, config.seed_stride,
                                      0.5, config.sh_degree)
    scene = cloud.concat(seeds)
    pool = seeds if len(seeds) else cloud
    state = TrainerState(scene, views, references, config, scene_extent([v.camera for v in views]),
                         seed_pool=SeedPool(pool.positions.copy(), pool.colors.copy(), pool.log_scales.copy()))
    log.info("initialized %d Gaussians (%d seeded in the reference mask)", len(scene), len(seeds))
    return state


def _segments_for(view: TrainingView, supervised: np.ndarray) -> Optional[np.ndarray]:
    if view.segments is None:
        return None
    lab = np.array(view.segments, dtype=np.int64)
    lab[~supervised] = -1
    return lab


def compute_losses(state: TrainerState, view: TrainingView, out, iteration: int, force_cfdl: bool):
    """Per-term values and the gradient maps of the weighted total."""
    cfg = state.config
    lc = cfg.loss
    H, W = view.mask.shape
    is_ref = view.view_id in state.references.view_ids
    supervised = ~view.mask
    target = view.image
    if is_ref:
        supervised = supervised | state.references.supervised_mask(view.view_id, (H, W))
        target = state.references.composite(view.view_id, view.image)

    photo = photometric_loss(out.color, target, supervised)
    g_color = lc.weight_photometric * photo.grad
    g_depth = np.zeros((H, W))
    v_sdcl = v_cfdl = v_oacl = 0.0
    if lc.weight_depth > 0:
        if iteration % lc.sdcl_period == 0 and supervised.any():
            # equal-width binning is invariant to positive affine maps of the prior, so no alignment
            part = partition_depth_bins(view.mono_depth, out.depth, supervised & np.isfinite(view.mono_depth),
                                        lc.bins, lc.weight_scheme)
            r = sdcl(part, out.depth)
            v_sdcl = r.value
            g_depth += lc.weight_depth * r.grad
        if force_cfdl and is_ref and view.mask.any():
            r = cfdl(view.mono_depth, out.depth, view.mask, state.rng, lc)
            v_cfdl = r.value
            g_depth += lc.weight_depth * lc.kappa * r.grad
    g_feat = None
    if lc.weight_oacl > 0:
        seg = _segments_for(view, supervised)
        if seg is not None:
            r = oacl(out.feature, seg, lc.epsilon, lc.phi_min)
            v_oacl = r.value
            g_feat = lc.weight_oacl * r.grad
    total = (lc.weight_photometric * photo.value + lc.weight_depth * (v_sdcl + lc.kappa * v_cfdl)
             + lc.weight_oacl * v_oacl)
    terms = (photo.value, v_sdcl, v_cfdl, v_oacl, total)
    return terms, g_color, g_depth, g_feat


def adam_update(state: TrainerState, grads: RenderGradients) -> None:
    cfg = state.config
    t = state.iteration + 1
    b1, b2 = cfg.adam_beta1, cfg.adam_beta2
    lrs = cfg.learning_rates(state.extent)
    gd = grads.as_dict()
    for name, p in state.scene.params().items():
        g = gd[name]
        m = state.m[name]
        v = state.v[name]
        m *= b1
        m += (1 - b1) * g
        v *= b2
        v += (1 - b2) * g * g
        step = lrs[name] * (m / (1 - b1**t)) / (np.sqrt(v / (1 - b2**t)) + cfg.adam_eps)
        p -= step.astype(p.dtype)
    state.scene.normalize_rotations()


def _reseed_dead(state: TrainerState) -> int:
    cfg = state.config
    low = state.scene.opacities < cfg.reseed_opacity
    state.low_opacity_steps = np.where(low, state.low_opacity_steps + 1, 0)
    dead = np.flatnonzero(state.low_opacity_steps >= cfg.reseed_patience)
    if len(dead) == 0 or state.seed_pool is None or not len(state.seed_pool):
        return 0
    pick = state.rng.integers(0, len(state.seed_pool), len(dead))
    sc = state.scene
    sc.positions[dead] = state.seed_pool.positions[pick]
    sc.colors[dead] = state.seed_pool.colors[pick]
    sc.log_scales[dead] = state.seed_pool.log_scales[pick]
    sc.rotations[dead] = (1, 0, 0, 0)
    sc.opacity_logits[dead] = _logit(0.5)
    sc.features[dead] = state.rng.normal(0, cfg.init_feature_std, (len(dead), FEATURE_DIM))
    if sc.sh is not None:
        sc.sh[dead] = 0
    for name in state.m:
        state.m[name][dead] = 0
        state.v[name][dead] = 0
    state.low_opacity_steps[dead] = 0
    return len(dead)


def train_step(state: TrainerState) -> LossRecord:
    cfg = state.config
    it = state.iteration
    force_cfdl = cfg.loss.weight_depth > 0 and it % cfg.loss.cfdl_period == 0
    refs = state.references.view_ids
    if force_cfdl and refs:
        # crop-focused steps always land on a reference view
        vid = refs[(it // cfg.loss.cfdl_period) % len(refs)]
    else:
        cycle = state.schedule()
        vid = cycle[state.cursor % len(cycle)]
        state.cursor += 1
    view = state.view(vid)

    out = render(state.scene, view.camera, cfg.background_color, cfg.background_depth)
    terms, g_color, g_depth, g_feat = compute_losses(state, view, out, it, force_cfdl and vid in refs)
    if not np.isfinite(terms[-1]):
        raise NonFiniteLossError(
            f"non-finite loss at iteration {it} on view {vid}: photometric={terms[0]} sdcl={terms[1]} "
            f"cfdl={terms[2]} oacl={terms[3]}", vid)
    grads = render_backward(state.scene, view.camera, out, g_color, g_depth, None, g_feat)
    if not grads.all_finite():
        raise NonFiniteLossError(f"non-finite gradient at iteration {it} on view {vid}", vid)
    adam_update(state, grads)
    if not all(np.isfinite(a).all() for a in state.scene.params().values()):
        raise NonFiniteLossError(f"optimizer produced non-finite parameters at iteration {it} (view {vid})", vid)
    _reseed_dead(state)
    state.iteration += 1
    rec = LossRecord(it, vid, *terms)
    state.history.append(rec)
    return rec


def write_log(records: Sequence[LossRecord], path) -> None:
    with open(path, "w", newline="") as f:
        w = csv.writer(f, lineterminator="\n")
        w.writerow(LOG_COLUMNS)
        for r in records:
            w.writerow([r.iteration, r.view_id, repr(r.photometric), repr(r.sdcl), repr(r.cfdl),
                        repr(r.oacl), repr(r.total)])


def save_checkpoint(state: TrainerState, directory, stem: str = "checkpoint") -> Path:
    """Scene file ``<stem>.splf`` plus optimizer moments in ``<stem>_optimizer.npz``."""
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    save_scene(state.scene, directory / f"{stem}.splf")
    arrays = {f"m_{k}": v for k, v in state.m.items()}
    arrays.update({f"v_{k}": v for k, v in state.v.items()})
    np.savez(directory / f"{stem}_optimizer.npz", iteration=state.iteration, cursor=state.cursor,
             low_opacity_steps=state.low_opacity_steps, **arrays)
    return directory / f"{stem}.splf"


def load_checkpoint(state: TrainerState, scene_path) -> None:
    """Restore scene and optimizer moments saved by ``save_checkpoint`` into ``state``."""
    scene_path = Path(scene_path)
    state.scene = load_scene(scene_path)
    opt = scene_path.with_name(scene_path.stem + "_optimizer.npz")
    if opt.is_file():
        with np.load(opt) as z:
            state.iteration = int(z["iteration"])
            state.cursor = int(z["cursor"])
            state.low_opacity_steps = z["low_opacity_steps"].copy()
            state.m = {k[2:]: z[k].copy() for k in z.files if k.startswith("m_")}
            state.v = {k[2:]: z[k].copy() for k in z.files if k.startswith("v_")}
    else:
        state.reset_optimizer()
        state.low_opacity_steps = np.zeros(len(state.scene), dtype=np.int64)


@dataclass
class RoundReport:
    round_index: int
    view_id: Optional[int]
    refined_pixels: int
    evaluation: Optional[EvalReport] = None


@dataclass
class RunReport:
    mode: str
    steps: int = 0
    rounds: list[RoundReport] = field(default_factory=list)
    converged: bool = False
    seconds: float = 0.0

    @property
    def sgi_rounds(self) -> int:
        return sum(1 for r in self.rounds if r.view_id is not None)


def train_steps(state: TrainerState, n: int, checkpoint_dir=None) -> None:
    every = state.config.checkpoint_every
    for _ in range(n):
        rec = train_step(state)
        if every and checkpoint_dir is not None and state.iteration % every == 0:
            save_checkpoint(state, checkpoint_dir, f"checkpoint_{state.iteration:06d}")
        if state.iteration % 500 == 0:
            log.info("step %d view %d loss %.5f", rec.iteration, rec.view_id, rec.total)


def run(state: TrainerState, mode: str = "baseline", inpainter: Optional[Inpainter] = None,
        heldout: Optional[Sequence] = None, checkpoint_dir=None, skip_baseline: bool = False,
        on_round: Optional[Callable[[TrainerState, RoundReport], None]] = None) -> tuple[TrainerState, RunReport]:
    """Baseline training, then (mode ``full``) alternate SGI steps with fine-tuning blocks.

    ``heldout`` views (with ``camera``, ``truth``, ``mask``) are evaluated after every round.
    """
    if mode not in ("baseline", "full"):
        raise ValueError(f"unknown run mode {mode!r}")
    cfg = state.config
    report = RunReport(mode)
    t0 = time.perf_counter()
    it0 = state.iteration

    def evaluate_round(k, vid, pixels):
        ev = None
        if heldout:
            ev = evaluate(state.scene, heldout, cfg.background_color, cfg.background_depth, k)
        rr = RoundReport(k, vid, pixels, ev)
        report.rounds.append(rr)
        if on_round:
            on_round(state, rr)

    if not skip_baseline:
        train_steps(state, cfg.baseline_steps, checkpoint_dir)
    evaluate_round(0, None, 0)

    if mode == "full":
        if inpainter is None:
            raise ValueError("full mode needs an inpainter backend")

        def render_depth(v):
            out = render(state.scene, v.camera, cfg.background_color, cfg.background_depth)
            return out.depth, out.alpha

        report.converged = True
        for k in range(1, cfg.sgi.max_rounds + 1):
            res = sgi_step(state, state.views, inpainter, render_depth, cfg.sgi)
            if res.converged:
                break
            train_steps(state, cfg.sgi.steps_per_round, checkpoint_dir)
            evaluate_round(k, res.view_id, int(res.refinement.B.sum()))
        else:
            report.converged = False
    report.steps = state.iteration - it0
    report.seconds = time.perf_counter() - t0
    return state, report


def reference_set_for(views: Sequence, inpainter: Inpainter, reference_view: Optional[int] = None) -> ReferenceSet:
    """Inpaint the reference view's whole mask and wrap it as entry 0 of a new reference set."""
    rid = default_reference_view(views) if reference_view is None else reference_view
    v = next((x for x in views if x.view_id == rid), None)
    if v is None:
        raise ValueError(f"reference view {rid} is not a training view")
    refs = ReferenceSet()
    refs.add(rid, invoke_inpainter(inpainter, rid, np.asarray(v.image, dtype=np.float64), v.mask), v.mask)
    return refs
