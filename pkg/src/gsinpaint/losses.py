"""Supervision terms: masked photometric L1, soft depth clustering, crop-focused depth, and
object-aware contrastive loss.

Every loss returns a ``LossValue`` holding the scalar and dLoss/d(input map), so the
caller can push the map straight into ``render_backward``.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import NamedTuple, Optional, Sequence, Union

import numpy as np


class LossValue(NamedTuple):
    value: float
    grad: np.ndarray


@dataclass
class LossConfig:
    kappa: float = 25.0
    bins: int = 16
    sdcl_period: int = 59
    cfdl_period: int = 9
    phi_min: float = 0.01
    epsilon: float = 100.0
    crop_expand_min: float = 0.1
    crop_expand_max: float = 0.5
    center_sigma_frac: float = 0.5
    weight_scheme: str = "inverse"
    weight_photometric: float = 1.0
    weight_depth: float = 1.0
    weight_oacl: float = 0.1

    def __post_init__(self):
        if self.kappa <= 0:
            raise ValueError("kappa must be positive")
        if self.bins < 2:
            raise ValueError("bins must be at least 2")
        if self.sdcl_period < 1 or self.cfdl_period < 1:
            raise ValueError("loss periods must be >= 1")
        if not 0 <= self.crop_expand_min <= self.crop_expand_max:
            raise ValueError("bad crop expansion range")
        if self.weight_scheme not in WEIGHT_SCHEMES:
            raise ValueError(f"unknown weight scheme {self.weight_scheme!r}")


# Bin weights as a function of the normalized bin centre c in [0, 1]; all decrease with depth.
WEIGHT_SCHEMES = {
    "inverse": lambda c: 1.0 / (1.0 + c),
    "linear": lambda c: 1.0 - 0.5 * c,
    "exponential": lambda c: np.exp(-c),
}


def photometric_loss(rendered: np.ndarray, target: np.ndarray, mask: np.ndarray) -> LossValue:
    """Mean absolute color error over mask-true pixels (and channels)."""
    if rendered.shape != target.shape or rendered.shape[:2] != mask.shape:
        raise ValueError("shape mismatch between rendered, target and mask")
    n = int(mask.sum())
    grad = np.zeros(rendered.shape)
    if n == 0:
        return LossValue(0.0, grad)
    diff = rendered - target
    c = rendered.shape[2]
    value = float(np.abs(diff[mask]).sum() / (n * c))
    grad[mask] = np.sign(diff[mask]) / (n * c)
    return LossValue(value, grad)


@dataclass
class DepthBinPartition:
    """Depth bins over a region; ``labels`` is -1 outside the region."""

    bin_count: int
    edges: np.ndarray
    labels: np.ndarray
    means: np.ndarray     # rendered-depth mean per bin (nan when empty)
    counts: np.ndarray
    weights: np.ndarray

    @property
    def masks(self) -> list[np.ndarray]:
        return [self.labels == k for k in range(self.bin_count)]

    @property
    def populated(self) -> np.ndarray:
        return self.counts > 0


def bin_weights(bins: int, scheme: str = "inverse") -> np.ndarray:
    centers = np.arange(bins) / (bins - 1) if bins > 1 else np.zeros(1)
    return np.asarray(WEIGHT_SCHEMES[scheme](centers), dtype=np.float64)


def partition_depth_bins(gt_depth: np.ndarray, rendered_depth: np.ndarray, region: np.ndarray,
                         bins: int = 16, weight_scheme: str = "inverse") -> DepthBinPartition:
    """Split ``region`` into equal-width bins of ground-truth depth."""
    region = region & np.isfinite(gt_depth)
    if not region.any():
        raise ValueError("depth-bin region is empty")
    g = gt_depth[region]
    lo, hi = float(g.min()), float(g.max())
    edges = np.linspace(lo, hi, bins + 1)
    labels = np.full(gt_depth.shape, -1, dtype=np.int64)
    if hi > lo:
        idx = np.floor((g - lo) / (hi - lo) * bins).astype(np.int64)
        labels[region] = np.clip(idx, 0, bins - 1)
    else:
        labels[region] = 0
    counts = np.bincount(labels[region], minlength=bins)
    sums = np.bincount(labels[region], weights=rendered_depth[region], minlength=bins)
    with np.errstate(invalid="ignore", divide="ignore"):
        means = np.where(counts > 0, sums / np.maximum(counts, 1), np.nan)
    return DepthBinPartition(bins, edges, labels, means, counts, bin_weights(bins, weight_scheme))


def sdcl(partition: DepthBinPartition, rendered_depth: np.ndarray,
         pixel_weights: Optional[np.ndarray] = None) -> LossValue:
    """Weighted average over populated bins of the mean |d - mu_k|.

    ``mu_k`` is recomputed from ``rendered_depth`` and differentiated through.
    ``pixel_weights`` scales each residual (used by the crop-focused variant).
    """
    grad = np.zeros(rendered_depth.shape)
    region = partition.labels >= 0
    pop = partition.populated
    if not pop.any():
        return LossValue(0.0, grad)
    K = partition.bin_count
    lab = partition.labels[region]
    d = rendered_depth[region].astype(np.float64)
    gw = np.ones_like(d) if pixel_weights is None else pixel_weights[region].astype(np.float64)
    n = np.maximum(partition.counts, 1).astype(np.float64)
    mu = np.bincount(lab, weights=d, minlength=K) / n
    r = d - mu[lab]
    s = np.sign(r)
    per_bin = np.bincount(lab, weights=gw * np.abs(r), minlength=K) / n
    w = np.where(pop, partition.weights, 0.0)
    wsum = w.sum()
    value = float(np.sum(w * per_bin) / wsum)
    gs_mean = np.bincount(lab, weights=gw * s, minlength=K) / n
    grad[region] = (w[lab] / wsum) / n[lab] * (gw * s - gs_mean[lab])
    return LossValue(value, grad)


@dataclass
class Crop:
    y0: int
    y1: int  # exclusive
    x0: int
    x1: int  # exclusive

    @property
    def center(self) -> tuple[float, float]:
        return 0.5 * (self.x0 + self.x1 - 1), 0.5 * (self.y0 + self.y1 - 1)

    @property
    def half_diagonal(self) -> float:
        return 0.5 * float(np.hypot(self.x1 - self.x0, self.y1 - self.y0))

    @property
    def slices(self):
        return slice(self.y0, self.y1), slice(self.x0, self.x1)


def expanded_crop(mask: np.ndarray, rng: np.random.Generator, lo: float, hi: float) -> Optional[Crop]:
    """Bounding box of ``mask`` grown on each side by a random fraction of its size, clipped."""
    ys, xs = np.nonzero(mask)
    if len(ys) == 0:
        return None
    y0, y1, x0, x1 = ys.min(), ys.max() + 1, xs.min(), xs.max() + 1
    h, w = y1 - y0, x1 - x0
    f = rng.uniform(lo, hi, 4)
    H, W = mask.shape
    crop = Crop(max(0, int(round(y0 - f[0] * h))), min(H, int(round(y1 + f[1] * h))),
                max(0, int(round(x0 - f[2] * w))), min(W, int(round(x1 + f[3] * w))))
    if crop.y1 <= crop.y0 or crop.x1 <= crop.x0:
        return None
    return crop


def center_weights(shape: tuple[int, int], crop: Crop, sigma_frac: float) -> np.ndarray:
    """Gaussian weight exp(-|p - c|^2 / 2 sigma^2), sigma a fraction of the crop half-diagonal."""
    cx, cy = crop.center
    sigma = max(sigma_frac * crop.half_diagonal, 1e-6)
    yy, xx = np.mgrid[0:shape[0], 0:shape[1]]
    return np.exp(-((xx - cx) ** 2 + (yy - cy) ** 2) / (2 * sigma**2))


def cfdl(gt_depth: np.ndarray, rendered_depth: np.ndarray, inpaint_mask: np.ndarray,
         rng: np.random.Generator, config: LossConfig = LossConfig(),
         crop: Optional[Crop] = None) -> LossValue:
    """SDCL restricted to a randomly expanded crop around the inpaint mask, centre-weighted."""
    zero = LossValue(0.0, np.zeros(rendered_depth.shape))
    if crop is None:
        crop = expanded_crop(inpaint_mask, rng, config.crop_expand_min, config.crop_expand_max)
    if crop is None:
        return zero
    region = np.zeros(inpaint_mask.shape, dtype=bool)
    region[crop.slices] = True
    region &= np.isfinite(gt_depth)
    if not region.any():
        return zero
    part = partition_depth_bins(gt_depth, rendered_depth, region, config.bins, config.weight_scheme)
    return sdcl(part, rendered_depth, center_weights(inpaint_mask.shape, crop, config.center_sigma_frac))


def depth_loss(sdcl_value: float, cfdl_value: float, kappa: float = 25.0) -> float:
    return sdcl_value + kappa * cfdl_value


def cluster_temperature(features: np.ndarray, epsilon: float = 100.0, phi_min: float = 0.01) -> float:
    """Dispersion-scaled temperature of one cluster of (normalized) features."""
    f = np.asarray(features, dtype=np.float64).reshape(len(features), -1)
    n = len(f)
    centroid = f.mean(axis=0)
    dispersion = np.linalg.norm(f - centroid, axis=1).mean()
    return float(max(phi_min, dispersion * np.log(n + epsilon)))


SegmentInput = Union[np.ndarray, Sequence[np.ndarray]]


def segments_to_labels(segments: SegmentInput, shape) -> np.ndarray:
    """Integer label map (-1 = unlabelled) from a label map or a list of boolean masks."""
    if isinstance(segments, np.ndarray) and segments.ndim == 2 and segments.dtype.kind in "iu":
        return segments.astype(np.int64)
    labels = np.full(shape, -1, dtype=np.int64)
    for i, m in enumerate(segments):
        if np.any(labels[m] >= 0):
            raise ValueError("segments overlap")
        labels[m] = i
    return labels


def oacl(feature_map: np.ndarray, segments: SegmentInput, epsilon: float = 100.0,
         phi_min: float = 0.01, min_norm: float = 1e-8) -> LossValue:
    """Contrastive loss pulling each segment's normalized features to its centroid.

    Softmax over all segment centroids with per-centroid temperature. Temperatures and
    centroids are differentiated through; floored temperatures pass no gradient.
    Pixels whose rendered feature norm is below ``min_norm`` are ignored.
    """
    H, W, D = feature_map.shape
    grad = np.zeros(feature_map.shape)
    labels = segments_to_labels(segments, (H, W))
    f_all = feature_map.reshape(-1, D).astype(np.float64)
    norms_all = np.linalg.norm(f_all, axis=1)
    lab_all = labels.reshape(-1)
    sel = np.flatnonzero((lab_all >= 0) & (norms_all > min_norm))
    if len(sel) == 0:
        return LossValue(0.0, grad)
    present, lab = np.unique(lab_all[sel], return_inverse=True)
    S = len(present)
    if S < 2:
        return LossValue(0.0, grad)

    f = f_all[sel]
    norms = norms_all[sel][:, None]
    u = f / norms
    n_s = np.bincount(lab, minlength=S).astype(np.float64)
    centroids = np.stack([np.bincount(lab, weights=u[:, j], minlength=S) for j in range(D)], axis=1) / n_s[:, None]
    resid = u - centroids[lab]
    rn = np.linalg.norm(resid, axis=1)
    disp = np.bincount(lab, weights=rn, minlength=S) / n_s
    log_n = np.log(n_s + epsilon)
    phi_raw = disp * log_n
    floored = phi_raw <= phi_min
    phi = np.where(floored, phi_min, phi_raw)

    z = (u @ centroids.T) / phi[None, :]
    zmax = z.max(axis=1, keepdims=True)
    lse = zmax[:, 0] + np.log(np.exp(z - zmax).sum(axis=1))
    own = z[np.arange(len(u)), lab]
    coef = 1.0 / (S * n_s[lab])
    value = float(np.sum(coef * (lse - own)))

    # backward
    P = np.exp(z - lse[:, None])
    G = P.copy()
    G[np.arange(len(u)), lab] -= 1.0
    G *= coef[:, None]
    g_u = (G / phi[None, :]) @ centroids
    g_cent = (G.T @ u) / phi[:, None]
    g_phi = -np.sum(G * z, axis=0) / phi
    g_disp = np.where(floored, 0.0, g_phi * log_n)
    e = np.where(rn[:, None] > 0, resid / np.where(rn > 0, rn, 1.0)[:, None], 0.0)
    g_u += (g_disp / n_s)[lab][:, None] * e
    e_mean = np.stack([np.bincount(lab, weights=e[:, j], minlength=S) for j in range(D)], axis=1) / n_s[:, None]
    g_cent -= g_disp[:, None] * e_mean
    g_u += (g_cent / n_s[:, None])[lab]
    g_f = (g_u - u * np.sum(u * g_u, axis=1, keepdims=True)) / norms
    grad.reshape(-1, D)[sel] = g_f
    return LossValue(value, grad)
