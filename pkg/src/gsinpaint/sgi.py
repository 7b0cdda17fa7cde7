"""Selective guided inpainting: find the view whose inpainted region disagrees most with its
depth prior, localize the disagreement, and re-inpaint only that part.
"""

from __future__ import annotations

import logging
import shlex
import subprocess
import tempfile
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Iterable, Mapping, Optional, Protocol

import numpy as np
from scipy import ndimage

from .fileio import read_png, read_splr, write_png, write_splr

log = logging.getLogger(__name__)


class AlignmentError(RuntimeError):
    """Too few valid pixels to fit the depth scale and shift."""


class InpainterError(RuntimeError):
    pass


class InpainterExitError(InpainterError):
    pass


class InpainterTimeoutError(InpainterError):
    pass


class InpainterOutputError(InpainterError):
    pass


@dataclass
class SGIConfig:
    percentile: float = 85.0
    tau_abs: float = 1e-3
    threshold_mode: str = "percentile"  # or "absolute" (tau_abs only)
    converge_frac: float = 0.05
    max_rounds: int = 8
    steps_per_round: int = 2000
    min_align_pixels: int = 16
    align_alpha: float = 0.5
    exclude_supervised: bool = True

    def __post_init__(self):
        if self.threshold_mode not in ("percentile", "absolute"):
            raise ValueError(f"unknown threshold mode {self.threshold_mode!r}")
        if not 0 <= self.percentile <= 100:
            raise ValueError("percentile must lie in [0, 100]")


def fit_depth_alignment(mono: np.ndarray, rendered: np.ndarray, region: np.ndarray,
                        min_pixels: int = 16) -> tuple[float, float]:
    """Least-squares (a, b) with rendered ~ a * mono + b over ``region``; a is kept positive."""
    valid = region & np.isfinite(mono) & np.isfinite(rendered)
    n = int(valid.sum())
    if n < min_pixels:
        raise AlignmentError(f"only {n} valid pixels for depth alignment (need {min_pixels})")
    x = mono[valid].astype(np.float64)
    y = rendered[valid].astype(np.float64)
    xm, ym = x.mean(), y.mean()
    var = np.sum((x - xm) ** 2)
    a = np.sum((x - xm) * (y - ym)) / var if var > 1e-12 * max(1.0, xm * xm) * n else 0.0
    if a <= 0:
        return 1.0, float(ym - xm)
    return float(a), float(ym - a * xm)


def align_depth(mono: np.ndarray, rendered: np.ndarray, region: np.ndarray,
                min_pixels: int = 16) -> np.ndarray:
    a, b = fit_depth_alignment(mono, rendered, region, min_pixels)
    return a * mono + b


@dataclass
class DepthErrorMap:
    E: np.ndarray
    valid: np.ndarray

    @property
    def cumulative(self) -> float:
        return float(self.E[self.valid].sum())


def depth_error_map(rendered: np.ndarray, aligned_mono: np.ndarray, mask: np.ndarray) -> DepthErrorMap:
    E = np.zeros(rendered.shape)
    E[mask] = np.abs(rendered[mask] - aligned_mono[mask])
    return DepthErrorMap(E, mask.copy())


def select_worst_view(cumulative: Mapping[int, float], excluded: Iterable[int] = ()) -> Optional[int]:
    """View id with the largest cumulative error; ties go to the lowest id. None if no candidates."""
    skip = set(excluded)
    best = None
    for vid, val in cumulative.items():
        if vid in skip:
            continue
        val = getattr(val, "cumulative", val)
        if best is None or val > best[1] or (val == best[1] and vid < best[0]):
            best = (vid, val)
    return None if best is None else best[0]


def sobel_gradient_magnitude(E: np.ndarray) -> np.ndarray:
    E = np.asarray(E, dtype=np.float64)
    gx = ndimage.sobel(E, axis=1, mode="nearest")
    gy = ndimage.sobel(E, axis=0, mode="nearest")
    return np.hypot(gx, gy)


SQUARE3 = np.ones((3, 3), dtype=bool)
_yy, _xx = np.mgrid[-2:3, -2:3]
DISC5 = (_xx**2 + _yy**2) <= 6.25


@dataclass
class RefinementMask:
    B: np.ndarray
    view_id: int
    iteration: int
    threshold: float


def build_refinement_mask(G: np.ndarray, base_mask: np.ndarray, config: SGIConfig = SGIConfig(),
                          view_id: int = -1, iteration: int = 0) -> Optional[RefinementMask]:
    """Erode the base mask, threshold G inside it, dilate and clip. None when nothing survives."""
    eroded = ndimage.binary_erosion(base_mask, structure=SQUARE3, border_value=1)
    if not eroded.any():
        return None
    thr = config.tau_abs
    if config.threshold_mode == "percentile":
        thr = max(float(np.percentile(G[eroded], config.percentile)), config.tau_abs)
    hot = eroded & (G > thr)
    if not hot.any():
        return None
    B = ndimage.binary_dilation(hot, structure=DISC5) & base_mask
    return RefinementMask(B, view_id, iteration, thr)


class Inpainter(Protocol):
    def __call__(self, view_id: int, image: np.ndarray, mask: np.ndarray) -> np.ndarray: ...


class OracleInpainter:
    """Answers from held-out object-free images, optionally with uniform noise of amplitude ``noise``."""

    def __init__(self, truth: Mapping[int, np.ndarray], noise: float = 0.0, seed: int = 0):
        self.truth = truth
        self.noise = noise
        self.seed = seed
        self._calls: dict[int, int] = {}

    def __call__(self, view_id: int, image: np.ndarray, mask: np.ndarray) -> np.ndarray:
        if view_id not in self.truth:
            raise KeyError(f"unknown view id {view_id}")
        patch = np.array(self.truth[view_id], dtype=np.float64)
        if self.noise > 0:
            k = self._calls.get(view_id, 0)
            self._calls[view_id] = k + 1
            rng = np.random.default_rng([self.seed, view_id, k])
            patch = np.clip(patch + rng.uniform(-self.noise, self.noise, patch.shape), 0.0, 1.0)
        return patch


class ExternalInpainter:
    """Runs ``command`` with {input}, {mask}, {output} replaced by PNG paths in a temp dir."""

    def __init__(self, command: str, timeout: float = 600.0):
        self.command = command
        self.timeout = timeout

    def __call__(self, view_id: int, image: np.ndarray, mask: np.ndarray) -> np.ndarray:
        with tempfile.TemporaryDirectory(prefix="inpaint_") as tmp:
            paths = {k: str(Path(tmp) / f"{k}.png") for k in ("input", "mask", "output")}
            write_png(paths["input"], image)
            write_png(paths["mask"], mask.astype(bool))
            argv = [tok.format(**paths) for tok in shlex.split(self.command)]
            try:
                proc = subprocess.run(argv, capture_output=True, timeout=self.timeout)
            except subprocess.TimeoutExpired as e:
                raise InpainterTimeoutError(f"inpainter exceeded {self.timeout}s") from e
            except OSError as e:
                raise InpainterExitError(f"cannot run inpainter: {e}") from e
            if proc.returncode != 0:
                raise InpainterExitError(
                    f"inpainter exited with {proc.returncode}: {proc.stderr.decode(errors='replace')[-500:]}")
            if not Path(paths["output"]).exists():
                raise InpainterOutputError("inpainter produced no output file")
            out = read_png(paths["output"])
        if out.shape != image.shape:
            raise InpainterOutputError(f"inpainter output has shape {out.shape}, expected {image.shape}")
        return out


class ExternalDepthEstimator:
    """Mono-depth backend speaking the same protocol: {input} PNG in, {output} SPLR out."""

    def __init__(self, command: str, timeout: float = 600.0):
        self.command = command
        self.timeout = timeout

    def __call__(self, image: np.ndarray) -> np.ndarray:
        with tempfile.TemporaryDirectory(prefix="depth_") as tmp:
            paths = {"input": str(Path(tmp) / "input.png"), "output": str(Path(tmp) / "output.splr")}
            write_png(paths["input"], image)
            argv = [tok.format(**paths) for tok in shlex.split(self.command)]
            try:
                proc = subprocess.run(argv, capture_output=True, timeout=self.timeout)
            except subprocess.TimeoutExpired as e:
                raise InpainterTimeoutError(f"depth estimator exceeded {self.timeout}s") from e
            if proc.returncode != 0:
                raise InpainterExitError(f"depth estimator exited with {proc.returncode}")
            if not Path(paths["output"]).exists():
                raise InpainterOutputError("depth estimator produced no output file")
            depth = read_splr(paths["output"]).astype(np.float64)
        if depth.shape != image.shape[:2]:
            raise InpainterOutputError(f"depth output has shape {depth.shape}")
        return depth


def invoke_inpainter(backend: Inpainter, view_id: int, image: np.ndarray, B: np.ndarray) -> np.ndarray:
    """Inpaint ``B`` only: pixels outside ``B`` come back bit-identical."""
    if not B.any():
        return image.copy()
    out = np.asarray(backend(view_id, image, B), dtype=np.float64)
    if out.shape != image.shape:
        raise InpainterOutputError(f"inpainter output has shape {out.shape}, expected {image.shape}")
    result = image.copy()
    result[B] = out[B]
    return result


@dataclass
class ReferenceEntry:
    view_id: int
    image: np.ndarray
    mask: np.ndarray


@dataclass
class ReferenceSet:
    """Inpainted guidance images in insertion order; entry 0 is the initial reference."""

    entries: list[ReferenceEntry] = field(default_factory=list)

    def __len__(self) -> int:
        return len(self.entries)

    def add(self, view_id: int, image: np.ndarray, mask: np.ndarray) -> None:
        for e in self.entries:
            if e.view_id == view_id and np.array_equal(e.mask, mask):
                raise ValueError(f"view {view_id} already has a reference with this mask")
        self.entries.append(ReferenceEntry(view_id, np.array(image, dtype=np.float64), mask.astype(bool).copy()))

    @property
    def view_ids(self) -> list[int]:
        seen: list[int] = []
        for e in self.entries:
            if e.view_id not in seen:
                seen.append(e.view_id)
        return seen

    def supervised_mask(self, view_id: int, shape) -> np.ndarray:
        m = np.zeros(shape, dtype=bool)
        for e in self.entries:
            if e.view_id == view_id:
                m |= e.mask
        return m

    def composite(self, view_id: int, image: np.ndarray) -> np.ndarray:
        """``image`` with every reference patch for the view pasted in, later entries on top."""
        out = np.array(image, dtype=np.float64)
        for e in self.entries:
            if e.view_id == view_id:
                out[e.mask] = e.image[e.mask]
        return out

    def copy(self) -> "ReferenceSet":
        return ReferenceSet([ReferenceEntry(e.view_id, e.image.copy(), e.mask.copy()) for e in self.entries])


@dataclass
class SGIStepResult:
    converged: bool
    view_id: Optional[int] = None
    refinement: Optional[RefinementMask] = None
    cumulative: dict[int, float] = field(default_factory=dict)
    error_maps: dict[int, DepthErrorMap] = field(default_factory=dict)


def compute_error_maps(views, render_depth: Callable, references: ReferenceSet, config: SGIConfig,
                       skip: Iterable[int] = ()) -> dict[int, DepthErrorMap]:
    """Depth error maps over each view's not-yet-supervised inpaint region."""
    skip = set(skip)
    maps: dict[int, DepthErrorMap] = {}
    for v in views:
        if v.view_id in skip or not v.mask.any():
            continue
        remaining = v.mask.copy()
        if config.exclude_supervised:
            remaining &= ~references.supervised_mask(v.view_id, v.mask.shape)
        if not remaining.any():
            continue
        depth, alpha = render_depth(v)
        region = ~v.mask & (alpha > config.align_alpha)
        aligned = align_depth(v.mono_depth, depth, region, config.min_align_pixels)
        maps[v.view_id] = depth_error_map(depth, aligned, remaining)
    return maps


def sgi_step(state, views, inpainter: Inpainter, render_depth: Callable,
             config: SGIConfig = SGIConfig()) -> SGIStepResult:
    """One refinement round on ``state`` (needs ``references``, ``sgi_settled``,
    ``sgi_initial_error`` and ``sgi_round`` attributes).

    Mutates ``state`` only after the inpainter has succeeded.
    """
    r0 = state.references.entries[0].view_id if len(state.references) else None
    skip = set(state.sgi_settled) | ({r0} if r0 is not None else set())
    maps = compute_error_maps(views, render_depth, state.references, config, skip)
    cumulative = {vid: m.cumulative for vid, m in maps.items()}
    result = SGIStepResult(True, cumulative=cumulative, error_maps=maps)
    if not maps:
        return result
    initial = state.sgi_initial_error
    if initial is None:
        initial = max(cumulative.values())
    if initial <= 0 or max(cumulative.values()) < config.converge_frac * initial:
        state.sgi_initial_error = initial
        return result

    by_id = {v.view_id: v for v in views}
    newly_settled = []
    remaining = dict(cumulative)
    while remaining:
        vid = select_worst_view(remaining)
        if remaining[vid] < config.converge_frac * initial:
            break
        emap = maps[vid]
        ref = build_refinement_mask(sobel_gradient_magnitude(emap.E), emap.valid, config,
                                    vid, state.sgi_round)
        if ref is None:
            newly_settled.append(vid)
            del remaining[vid]
            continue
        image = invoke_inpainter(inpainter, vid, by_id[vid].image, ref.B)
        state.references.add(vid, image, ref.B)
        state.sgi_settled.extend(newly_settled)
        state.sgi_initial_error = initial
        state.sgi_round += 1
        log.info("SGI round %d: view %d, %d pixels re-inpainted", state.sgi_round, vid, int(ref.B.sum()))
        return SGIStepResult(False, vid, ref, cumulative, maps)
    state.sgi_settled.extend(newly_settled)
    state.sgi_initial_error = initial
    return result
