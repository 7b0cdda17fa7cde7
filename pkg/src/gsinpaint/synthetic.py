"""Procedural two-variant scenes (with and without a removable object) and the
multi-view datasets rendered from them, with oracle depth, masks and segments.
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Optional

import numpy as np
from scipy import ndimage

from .fileio import (read_label_png, read_mask_png, read_png, read_splr, write_label_png,
                     write_png, write_splr)
from .rasterizer import render
from .scene import FEATURE_DIM, Camera, GaussianScene
from .sgi import OracleInpainter


class GenerationError(RuntimeError):
    pass


class DatasetNotFoundError(FileNotFoundError):
    pass


@dataclass
class SceneSpec:
    seed: int = 0
    n_views: int = 8
    n_test_views: int = 4
    width: int = 64
    height: int = 64
    fov_deg: float = 60.0
    n_clusters: int = 3
    wall_spacing: float = 0.14
    cluster_gaussians: int = 60
    cluster_radius: float = 0.3
    object_radius: float = 0.35
    object_gaussians: int = 40
    object_scale: float = 0.18
    margin: float = 0.35  # min gap between object and cluster centroids beyond their radii
    arc_radius: float = 2.6
    arc_degrees: float = 50.0
    camera_height: float = -0.35
    mask_alpha: float = 0.05
    mask_dilate: int = 2
    depth_gamma: float = 1.0  # biased-depth oracle: monotone distortion (d / d_mid) ** gamma * d_mid
    depth_noise: float = 0.0  # biased-depth oracle: per-pixel uniform noise, relative to depth
    depth_bias: float = 0.0   # biased-depth oracle: smooth additive error over the object region
    background_depth: float = 0.0

    def __post_init__(self):
        if self.n_views < 4:
            raise ValueError("a synthetic scene needs at least 4 training views")
        if not 2 <= self.n_clusters <= 5:
            raise ValueError("n_clusters must lie in [2, 5]")


LOOK_AT = np.array([0.0, 0.35, 2.6])
GROUND_Y = 0.9
WALL_Z = 4.2


def _feature(label: int) -> np.ndarray:
    f = np.zeros(FEATURE_DIM)
    f[label] = 1.0
    return f


def _flat_grid(rng, xs, ys, plane, spacing, base, label, thin=0.01) -> GaussianScene:
    """Thin textured Gaussians on an axis-aligned plane (``plane`` = 'wall' or 'ground')."""
    gx, gy = np.meshgrid(xs, ys)
    n = gx.size
    sc = GaussianScene.zeros(n, dtype=np.float64)
    jitter = rng.uniform(-0.15, 0.15, (n, 2)) * spacing
    a = gx.ravel() + jitter[:, 0]
    b = gy.ravel() + jitter[:, 1]
    if plane == "wall":
        sc.positions[:] = np.stack([a, b, np.full(n, WALL_Z)], axis=1)
        sc.log_scales[:] = np.log([0.6 * spacing, 0.6 * spacing, thin])
        checker = (np.floor(a / 0.5) + np.floor(b / 0.5)) % 2
    else:
        sc.positions[:] = np.stack([a, np.full(n, GROUND_Y), b], axis=1)
        sc.log_scales[:] = np.log([0.6 * spacing, thin, 0.6 * spacing])
        checker = (np.floor(a / 0.4) + np.floor(b / 0.4)) % 2
    col = base[None, :] * (0.75 + 0.25 * checker[:, None]) + rng.uniform(-0.05, 0.05, (n, 3))
    sc.colors[:] = np.clip(col, 0.02, 0.98)
    sc.opacity_logits[:] = np.log(0.95 / 0.05)
    sc.features[:] = _feature(label)
    return sc


def _blob(rng, center, radius, n, scale, base, label, opacity=0.9) -> GaussianScene:
    sc = GaussianScene.zeros(n, dtype=np.float64)
    d = rng.normal(size=(n, 3))
    d /= np.linalg.norm(d, axis=1, keepdims=True)
    r = radius * rng.uniform(0.0, 1.0, n) ** (1 / 3)
    sc.positions[:] = center + d * r[:, None]
    sc.log_scales[:] = np.log(scale * rng.uniform(0.8, 1.2, (n, 3)))
    q = rng.normal(size=(n, 4))
    sc.rotations[:] = q / np.linalg.norm(q, axis=1, keepdims=True)
    sc.colors[:] = np.clip(base + rng.uniform(-0.1, 0.1, (n, 3)), 0.02, 0.98)
    sc.opacity_logits[:] = np.log(opacity / (1 - opacity))
    sc.features[:] = _feature(label)
    return sc


@dataclass
class GeneratedScene:
    with_object: GaussianScene
    without_object: GaussianScene
    object_only: GaussianScene
    cluster_centers: np.ndarray
    object_center: np.ndarray
    object_label: int


def generate_scene(spec: SceneSpec) -> GeneratedScene:
    """Background (wall, ground, clusters) shared by both variants; the object is appended last."""
    rng = np.random.default_rng([spec.seed, 1])
    s = spec.wall_spacing
    wall = _flat_grid(rng, np.arange(-3.4, 3.4 + 1e-9, s), np.arange(-2.4, GROUND_Y + 1e-9, s),
                      "wall", s, np.array([0.35, 0.45, 0.7]), 0)
    ground = _flat_grid(rng, np.arange(-3.4, 3.4 + 1e-9, s), np.arange(0.8, WALL_Z + 1e-9, s),
                        "ground", s, np.array([0.55, 0.5, 0.3]), 1)
    background = wall.concat(ground)

    centers = []
    for k in range(spec.n_clusters):
        c = np.array([rng.uniform(-1.6, 1.6), GROUND_Y - spec.cluster_radius, rng.uniform(3.0, 3.8)])
        centers.append(c)
        base = rng.uniform(0.15, 0.9, 3)
        background = background.concat(
            _blob(rng, c, spec.cluster_radius, spec.cluster_gaussians, 0.09, base, 2 + k))
    centers = np.array(centers)

    need = spec.object_radius + spec.cluster_radius + spec.margin
    for _ in range(100):
        oc = np.array([rng.uniform(-0.4, 0.4), GROUND_Y - spec.object_radius, rng.uniform(2.2, 2.6)])
        if np.all(np.linalg.norm(centers - oc, axis=1) >= need):
            break
    else:
        raise GenerationError("could not place the object clear of the background clusters")
    label = 2 + spec.n_clusters
    obj = _blob(rng, oc, spec.object_radius, spec.object_gaussians, spec.object_scale,
                np.array([0.9, 0.15, 0.2]), label, opacity=0.95)
    f32 = lambda sc: sc.astype(np.float32)
    return GeneratedScene(f32(background.concat(obj)), f32(background), f32(obj), centers, oc, label)


def camera_arc(spec: SceneSpec) -> tuple[list[Camera], list[Camera]]:
    """Training and held-out cameras on one arc; test cameras sit between training ones."""
    n = spec.n_views + spec.n_test_views
    half = np.radians(spec.arc_degrees) / 2
    angles = np.linspace(-half, half, n)
    test_idx = set(np.round(np.linspace(1, n - 2, spec.n_test_views)).astype(int)) if spec.n_test_views else set()
    train, test = [], []
    for i, a in enumerate(angles):
        eye = LOOK_AT + spec.arc_radius * np.array([np.sin(a), 0.0, -np.cos(a)])
        eye[1] = spec.camera_height
        cam = Camera.look_at(eye, LOOK_AT, fov_deg=spec.fov_deg, width=spec.width, height=spec.height)
        (test if i in test_idx else train).append(cam)
    return train, test


@dataclass
class DatasetView:
    view_id: int
    camera: Camera
    image: np.ndarray        # with object; what the trainer sees
    truth: np.ndarray        # without object; held out
    depth: np.ndarray        # object-free rendered depth (exact oracle)
    mono_depth: np.ndarray   # depth handed to the trainer (biased in biased-depth mode)
    mask: np.ndarray
    segments: np.ndarray     # label map, -1 = unlabelled
    split: str = "train"

    def segment_masks(self) -> list[np.ndarray]:
        return [self.segments == k for k in np.unique(self.segments) if k >= 0]


@dataclass
class SyntheticDataset:
    spec: SceneSpec
    views: list[DatasetView] = field(default_factory=list)

    @property
    def train_views(self) -> list[DatasetView]:
        return [v for v in self.views if v.split == "train"]

    @property
    def test_views(self) -> list[DatasetView]:
        return [v for v in self.views if v.split == "test"]

    def view(self, view_id: int) -> DatasetView:
        for v in self.views:
            if v.view_id == view_id:
                return v
        raise KeyError(f"unknown view id {view_id}")

    def oracle(self, noise: float = 0.0, seed: Optional[int] = None) -> OracleInpainter:
        return OracleInpainter({v.view_id: v.truth for v in self.views}, noise,
                               self.spec.seed if seed is None else seed)


def inpaint_mask(object_alpha: np.ndarray, threshold: float, dilate: int) -> np.ndarray:
    m = object_alpha > threshold
    if dilate > 0 and m.any():
        m = ndimage.binary_dilation(m, structure=np.ones((3, 3), bool), iterations=dilate)
    return m


def segments_from_features(feature: np.ndarray, alpha: np.ndarray, n_labels: int) -> np.ndarray:
    """Majority feature label per pixel; pixels with alpha <= 0.5 stay unlabelled."""
    labels = np.argmax(feature[:, :, :n_labels], axis=2).astype(np.int64)
    labels[alpha <= 0.5] = -1
    return labels


def _biased_depth(depth, mask, spec: SceneSpec, rng) -> np.ndarray:
    out = depth.astype(np.float64).copy()
    if spec.depth_gamma != 1.0:
        pos = out > 0
        mid = float(np.median(out[pos])) if pos.any() else 1.0
        out[pos] = mid * (out[pos] / mid) ** spec.depth_gamma
    if spec.depth_bias and mask.any():
        bump = ndimage.gaussian_filter(mask.astype(np.float64), 2.0)
        out += spec.depth_bias * bump / bump.max()
    if spec.depth_noise:
        out *= 1.0 + rng.uniform(-spec.depth_noise, spec.depth_noise, out.shape)
    return out


def generate_dataset(spec: SceneSpec, scenes: Optional[GeneratedScene] = None) -> SyntheticDataset:
    scenes = scenes or generate_scene(spec)
    train_cams, test_cams = camera_arc(spec)
    rng = np.random.default_rng([spec.seed, 2])
    n_labels = scenes.object_label + 1
    data = SyntheticDataset(spec)
    cams = [(c, "train") for c in train_cams] + [(c, "test") for c in test_cams]
    for vid, (cam, split) in enumerate(cams):
        bgd = spec.background_depth
        with_obj = render(scenes.with_object, cam, background_depth=bgd)
        without = render(scenes.without_object, cam, background_depth=bgd)
        obj = render(scenes.object_only, cam, background_depth=bgd)
        mask = inpaint_mask(obj.alpha, spec.mask_alpha, spec.mask_dilate)
        data.views.append(DatasetView(
            view_id=vid, camera=cam,
            image=np.clip(with_obj.color, 0, 1), truth=np.clip(without.color, 0, 1),
            depth=without.depth, mono_depth=_biased_depth(without.depth, mask, spec, rng),
            mask=mask, segments=segments_from_features(without.feature, without.alpha, n_labels),
            split=split,
        ))
    return data


def oracle_inpaint(dataset: SyntheticDataset, view_id: int, region: np.ndarray,
                   image: Optional[np.ndarray] = None, noise: float = 0.0) -> np.ndarray:
    """``image`` (default: the training image) with ``region`` replaced by held-out truth."""
    from .sgi import invoke_inpainter

    v = dataset.view(view_id)
    base = v.image if image is None else image
    return invoke_inpainter(dataset.oracle(noise), view_id, base, region)


# --- on-disk layout -----------------------------------------------------------

CAMERAS_HEADER = ("# view_id split width height fx fy cx cy r00 r01 r02 r10 r11 r12 r20 r21 r22 tx ty tz\n"
                  "# pose maps world to camera: x_cam = R x_world + t\n")


def format_camera_line(view_id: int, split: str, cam: Camera) -> str:
    nums = [*cam.resolution, *cam.focal, *cam.principal, *cam.R.ravel(), *cam.t]
    return " ".join([str(view_id), split] + [repr(float(x)) if i >= 2 else str(x) for i, x in enumerate(nums)])


def parse_cameras(text: str) -> list[tuple[int, str, Camera]]:
    out = []
    for lineno, line in enumerate(text.splitlines(), 1):
        line = line.strip()
        if not line or line.startswith("#"):
            continue
        tok = line.split()
        if len(tok) != 20:
            raise ValueError(f"cameras.txt line {lineno}: expected 20 fields, got {len(tok)}")
        vals = [float(x) for x in tok[2:]]
        cam = Camera(np.array(vals[6:15]).reshape(3, 3), vals[15:18], vals[2:4], vals[4:6],
                     (int(vals[0]), int(vals[1])))
        out.append((int(tok[0]), tok[1], cam))
    return out


def save_dataset(dataset: SyntheticDataset, root) -> None:
    root = Path(root)
    root.mkdir(parents=True, exist_ok=True)
    lines = [CAMERAS_HEADER] + [format_camera_line(v.view_id, v.split, v.camera) + "\n" for v in dataset.views]
    (root / "cameras.txt").write_text("".join(lines))
    (root / "seed.txt").write_text(f"{dataset.spec.seed}\n")
    (root / "spec.json").write_text(json.dumps(asdict(dataset.spec), indent=1) + "\n")
    for v in dataset.views:
        d = root / f"view_{v.view_id:03d}"
        d.mkdir(exist_ok=True)
        write_png(d / "train.png", v.image)
        write_png(d / "truth.png", v.truth)
        write_splr(d / "depth.splr", v.mono_depth)
        write_splr(d / "oracle_depth.splr", v.depth)
        write_png(d / "mask.png", v.mask)
        write_label_png(d / "segments.png", v.segments)


def load_dataset(root) -> SyntheticDataset:
    """Read a dataset directory. Images come back 8-bit quantized, depths as stored."""
    root = Path(root)
    if not (root / "cameras.txt").is_file():
        raise DatasetNotFoundError(f"no dataset at {root} (cameras.txt missing)")
    spec = SceneSpec()
    if (root / "spec.json").is_file():
        spec = SceneSpec(**json.loads((root / "spec.json").read_text()))
    data = SyntheticDataset(spec)
    for vid, split, cam in parse_cameras((root / "cameras.txt").read_text()):
        d = root / f"view_{vid:03d}"
        if not d.is_dir():
            raise DatasetNotFoundError(f"missing view directory {d}")
        mono = read_splr(d / "depth.splr").astype(np.float64)
        oracle = d / "oracle_depth.splr"
        truth = d / "truth.png"
        data.views.append(DatasetView(
            view_id=vid, camera=cam, image=read_png(d / "train.png"),
            truth=read_png(truth) if truth.is_file() else None,
            depth=read_splr(oracle).astype(np.float64) if oracle.is_file() else mono,
            mono_depth=mono, mask=read_mask_png(d / "mask.png"),
            segments=read_label_png(d / "segments.png"), split=split,
        ))
    return data
