"""PSNR / SSIM and the full-image vs masked-region evaluation protocol."""

from __future__ import annotations

import csv
import io
import time
from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np
from scipy.ndimage import gaussian_filter

PSNR_CAP = 100.0
SSIM_WIN = 11
SSIM_SIGMA = 1.5
SSIM_K1 = 0.01
SSIM_K2 = 0.03


def _as3(img: np.ndarray) -> np.ndarray:
    img = np.asarray(img, dtype=np.float64)
    return img[..., None] if img.ndim == 2 else img


def psnr(a: np.ndarray, b: np.ndarray, mask: Optional[np.ndarray] = None) -> float:
    """10 log10(1 / MSE) for images in [0, 1]; identical inputs give the 100 dB cap."""
    a, b = _as3(a), _as3(b)
    if a.shape != b.shape:
        raise ValueError(f"shape mismatch {a.shape} vs {b.shape}")
    sq = (a - b) ** 2
    if mask is not None:
        if not mask.any():
            raise ValueError("empty mask")
        sq = sq[mask]
    mse = float(sq.mean())
    if mse <= 10 ** (-PSNR_CAP / 10):
        return PSNR_CAP
    return float(10 * np.log10(1.0 / mse))


def ssim_map(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Per-pixel SSIM (channel-averaged) with an 11x11 Gaussian window, sigma 1.5, reflected borders."""
    a, b = _as3(a), _as3(b)
    if a.shape != b.shape:
        raise ValueError(f"shape mismatch {a.shape} vs {b.shape}")
    if min(a.shape[:2]) < SSIM_WIN:
        raise ValueError(f"image smaller than the {SSIM_WIN}x{SSIM_WIN} SSIM window")
    C1, C2 = SSIM_K1**2, SSIM_K2**2
    # truncate so the kernel radius is exactly 5 pixels
    filt = lambda x: gaussian_filter(x, SSIM_SIGMA, mode="reflect", truncate=(SSIM_WIN // 2) / SSIM_SIGMA)
    out = np.zeros(a.shape[:2])
    for c in range(a.shape[2]):
        x, y = a[..., c], b[..., c]
        mx, my = filt(x), filt(y)
        vx = filt(x * x) - mx * mx
        vy = filt(y * y) - my * my
        cxy = filt(x * y) - mx * my
        out += ((2 * mx * my + C1) * (2 * cxy + C2)) / ((mx * mx + my * my + C1) * (vx + vy + C2))
    return out / a.shape[2]


def ssim(a: np.ndarray, b: np.ndarray, mask: Optional[np.ndarray] = None) -> float:
    m = ssim_map(a, b)
    if mask is not None:
        if not mask.any():
            raise ValueError("empty mask")
        return float(m[mask].mean())
    return float(m.mean())


@dataclass
class ViewMetrics:
    view_id: int
    psnr_full: float
    ssim_full: float
    psnr_masked: float = float("nan")
    ssim_masked: float = float("nan")


REPORT_COLUMNS = ["view", "psnr_full", "ssim_full", "psnr_masked", "ssim_masked",
                  "lpips_full", "lpips_masked", "fid_full"]


@dataclass
class EvalReport:
    views: list[ViewMetrics] = field(default_factory=list)
    round_index: int = 0
    runtime_seconds: float = 0.0

    def _mean(self, attr: str) -> float:
        vals = [getattr(v, attr) for v in self.views if np.isfinite(getattr(v, attr))]
        return float(np.mean(vals)) if vals else float("nan")

    @property
    def mean_psnr_full(self) -> float:
        return self._mean("psnr_full")

    @property
    def mean_ssim_full(self) -> float:
        return self._mean("ssim_full")

    @property
    def mean_psnr_masked(self) -> float:
        return self._mean("psnr_masked")

    @property
    def mean_ssim_masked(self) -> float:
        return self._mean("ssim_masked")

    def to_csv(self) -> str:
        """CSV with one row per view plus a ``mean`` row. Perceptual columns are left empty."""
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["round"] + REPORT_COLUMNS)
        fmt = lambda x: "" if not np.isfinite(x) else repr(float(x))
        for v in self.views:
            w.writerow([self.round_index, v.view_id, fmt(v.psnr_full), fmt(v.ssim_full),
                        fmt(v.psnr_masked), fmt(v.ssim_masked), "", "", ""])
        w.writerow([self.round_index, "mean", fmt(self.mean_psnr_full), fmt(self.mean_ssim_full),
                    fmt(self.mean_psnr_masked), fmt(self.mean_ssim_masked), "", "", ""])
        return buf.getvalue()

    def table(self) -> str:
        lines = [f"{'view':>6} {'PSNR':>8} {'SSIM':>7} {'PSNR(m)':>8} {'SSIM(m)':>8}"]
        for v in self.views:
            lines.append(f"{v.view_id:>6} {v.psnr_full:8.3f} {v.ssim_full:7.4f} "
                         f"{v.psnr_masked:8.3f} {v.ssim_masked:8.4f}")
        lines.append(f"{'mean':>6} {self.mean_psnr_full:8.3f} {self.mean_ssim_full:7.4f} "
                     f"{self.mean_psnr_masked:8.3f} {self.mean_ssim_masked:8.4f}")
        lines.append(f"round {self.round_index}, {self.runtime_seconds:.1f}s")
        return "\n".join(lines)


def read_report_csv(text: str) -> EvalReport:
    rows = list(csv.DictReader(io.StringIO(text)))
    num = lambda s: float(s) if s else float("nan")
    report = EvalReport()
    for r in rows:
        report.round_index = int(r["round"])
        if r["view"] == "mean":
            continue
        report.views.append(ViewMetrics(int(r["view"]), num(r["psnr_full"]), num(r["ssim_full"]),
                                        num(r["psnr_masked"]), num(r["ssim_masked"])))
    return report


def evaluate_images(pairs: Sequence[tuple[int, np.ndarray, np.ndarray, Optional[np.ndarray]]],
                    round_index: int = 0) -> EvalReport:
    """Metrics for (view id, rendered, truth, mask) tuples; masked metrics skip empty masks."""
    t0 = time.perf_counter()
    report = EvalReport(round_index=round_index)
    for vid, img, truth, mask in pairs:
        vm = ViewMetrics(vid, psnr(img, truth), ssim(img, truth))
        if mask is not None and mask.any():
            vm.psnr_masked = psnr(img, truth, mask)
            vm.ssim_masked = ssim(img, truth, mask)
        report.views.append(vm)
    report.runtime_seconds = time.perf_counter() - t0
    return report


def evaluate(scene, views, background_color=(0.0, 0.0, 0.0), background_depth: float = 0.0,
             round_index: int = 0) -> EvalReport:
    """Render every held-out view (objects with ``view_id``, ``camera``, ``truth``, ``mask``)."""
    from .rasterizer import render

    t0 = time.perf_counter()
    pairs = []
    for v in views:
        out = render(scene, v.camera, background_color, background_depth)
        pairs.append((v.view_id, np.clip(out.color, 0, 1), v.truth, v.mask))
    report = evaluate_images(pairs, round_index)
    report.runtime_seconds = time.perf_counter() - t0
    return report
