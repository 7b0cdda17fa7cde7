"""Gaussian scene representation, pinhole camera, projection and the SPLF scene file."""

from __future__ import annotations

import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterator, Optional

import numpy as np

FEATURE_DIM = 16
NEAR_PLANE = 0.01
COV2D_EPS = 0.3
# Splats are confined to their 3-sigma ellipse (Mahalanobis q < 9).
CUTOFF_Q = 9.0
FRUSTUM_GUARD = 1.3

SH_C1 = 0.4886025119029199

PARAM_FIELDS = ("positions", "log_scales", "rotations", "colors", "sh", "opacity_logits", "features")

SCENE_MAGIC = b"SPLF"
SCENE_VERSION = 1
_SCENE_HEADER = struct.Struct("<4sIIB")


class ParameterDomainError(ValueError):
    """Non-finite or otherwise invalid Gaussian parameters."""


class SceneFormatError(ValueError):
    """Base class for scene-file decoding failures."""


class SceneHeaderError(SceneFormatError):
    pass


class SceneVersionError(SceneFormatError):
    pass


class SceneTruncatedError(SceneFormatError):
    pass


def quat_to_rotmat(q: np.ndarray) -> np.ndarray:
    """Rotation matrices from (..., 4) quaternions in (w, x, y, z) order.

    Quaternions are normalized first, so any non-zero 4-vector is accepted.
    """
    q = np.asarray(q, dtype=np.float64)
    q = q / np.linalg.norm(q, axis=-1, keepdims=True)
    w, x, y, z = q[..., 0], q[..., 1], q[..., 2], q[..., 3]
    R = np.empty(q.shape[:-1] + (3, 3))
    R[..., 0, 0] = 1 - 2 * (y * y + z * z)
    R[..., 0, 1] = 2 * (x * y - w * z)
    R[..., 0, 2] = 2 * (x * z + w * y)
    R[..., 1, 0] = 2 * (x * y + w * z)
    R[..., 1, 1] = 1 - 2 * (x * x + z * z)
    R[..., 1, 2] = 2 * (y * z - w * x)
    R[..., 2, 0] = 2 * (x * z - w * y)
    R[..., 2, 1] = 2 * (y * z + w * x)
    R[..., 2, 2] = 1 - 2 * (x * x + y * y)
    return R


def rotmat_vjp(q: np.ndarray, grad_R: np.ndarray) -> np.ndarray:
    """Pull a gradient w.r.t. rotation matrices back onto the raw quaternions."""
    q = np.asarray(q, dtype=np.float64)
    norm = np.linalg.norm(q, axis=-1, keepdims=True)
    qn = q / norm
    w, x, y, z = qn[..., 0], qn[..., 1], qn[..., 2], qn[..., 3]
    G = grad_R
    gw = 2 * (-z * G[..., 0, 1] + y * G[..., 0, 2] + z * G[..., 1, 0]
              - x * G[..., 1, 2] - y * G[..., 2, 0] + x * G[..., 2, 1])
    gx = 2 * (y * G[..., 0, 1] + z * G[..., 0, 2] + y * G[..., 1, 0] - 2 * x * G[..., 1, 1]
              - w * G[..., 1, 2] + z * G[..., 2, 0] + w * G[..., 2, 1] - 2 * x * G[..., 2, 2])
    gy = 2 * (-2 * y * G[..., 0, 0] + x * G[..., 0, 1] + w * G[..., 0, 2] + x * G[..., 1, 0]
              + z * G[..., 1, 2] - w * G[..., 2, 0] + z * G[..., 2, 1] - 2 * y * G[..., 2, 2])
    gz = 2 * (-2 * z * G[..., 0, 0] - w * G[..., 0, 1] + x * G[..., 0, 2] + w * G[..., 1, 0]
              - 2 * z * G[..., 1, 1] + y * G[..., 1, 2] + x * G[..., 2, 0] + y * G[..., 2, 1])
    gqn = np.stack([gw, gx, gy, gz], axis=-1)
    return (gqn - qn * np.sum(qn * gqn, axis=-1, keepdims=True)) / norm


def covariance_from_params(log_scale, rotation) -> np.ndarray:
    """Sigma = R diag(exp(log_scale))^2 R^T for one Gaussian or a batch."""
    log_scale = np.asarray(log_scale, dtype=np.float64)
    rotation = np.asarray(rotation, dtype=np.float64)
    if not (np.all(np.isfinite(log_scale)) and np.all(np.isfinite(rotation))):
        raise ParameterDomainError("non-finite scale or rotation")
    if np.any(np.linalg.norm(rotation, axis=-1) == 0):
        raise ParameterDomainError("zero quaternion")
    M = quat_to_rotmat(rotation) * np.exp(log_scale)[..., None, :]
    return M @ np.swapaxes(M, -1, -2)


@dataclass
class GaussianSplat:
    """One Gaussian, as a plain record. Scenes store these column-wise."""

    position: np.ndarray
    log_scale: np.ndarray
    rotation: np.ndarray
    color: np.ndarray
    opacity_logit: float
    feature: np.ndarray = field(default_factory=lambda: np.zeros(FEATURE_DIM))
    sh: Optional[np.ndarray] = None

    @property
    def covariance(self) -> np.ndarray:
        return covariance_from_params(self.log_scale, self.rotation)

    @property
    def opacity(self) -> float:
        return float(1.0 / (1.0 + np.exp(-self.opacity_logit)))


@dataclass
class GaussianScene:
    """Structure-of-arrays Gaussian collection.

    ``sh`` is None for SH degree 0; for degree 1 it holds (N, 9) coefficients laid out
    as three basis functions times RGB. Arrays may be float32 (storage precision, what
    the scene file holds) or float64 (used by finite-difference checks).
    """

    positions: np.ndarray
    log_scales: np.ndarray
    rotations: np.ndarray
    colors: np.ndarray
    opacity_logits: np.ndarray
    features: np.ndarray
    sh: Optional[np.ndarray] = None

    def __post_init__(self):
        n = len(self.positions)
        expected = {
            "positions": (n, 3), "log_scales": (n, 3), "rotations": (n, 4), "colors": (n, 3),
            "opacity_logits": (n,), "features": (n, FEATURE_DIM),
        }
        if self.sh is not None:
            expected["sh"] = (n, 9)
        for name, shape in expected.items():
            arr = getattr(self, name)
            if arr.shape != shape:
                raise ValueError(f"{name} has shape {arr.shape}, expected {shape}")

    @classmethod
    def empty(cls, sh_degree: int = 0, dtype=np.float32) -> "GaussianScene":
        return cls.zeros(0, sh_degree, dtype)

    @classmethod
    def zeros(cls, n: int, sh_degree: int = 0, dtype=np.float32) -> "GaussianScene":
        rot = np.zeros((n, 4), dtype)
        rot[:, 0] = 1
        return cls(
            positions=np.zeros((n, 3), dtype), log_scales=np.zeros((n, 3), dtype), rotations=rot,
            colors=np.zeros((n, 3), dtype), opacity_logits=np.zeros(n, dtype),
            features=np.zeros((n, FEATURE_DIM), dtype),
            sh=np.zeros((n, 9), dtype) if sh_degree == 1 else None,
        )

    @classmethod
    def from_splats(cls, splats: list[GaussianSplat], sh_degree: int = 0, dtype=np.float32) -> "GaussianScene":
        scene = cls.zeros(len(splats), sh_degree, dtype)
        for i, g in enumerate(splats):
            scene.positions[i] = g.position
            scene.log_scales[i] = g.log_scale
            scene.rotations[i] = g.rotation
            scene.colors[i] = g.color
            scene.opacity_logits[i] = g.opacity_logit
            scene.features[i] = g.feature
            if scene.sh is not None and g.sh is not None:
                scene.sh[i] = g.sh
        return scene

    def __len__(self) -> int:
        return len(self.positions)

    def __getitem__(self, i: int) -> GaussianSplat:
        return GaussianSplat(
            position=self.positions[i].copy(), log_scale=self.log_scales[i].copy(),
            rotation=self.rotations[i].copy(), color=self.colors[i].copy(),
            opacity_logit=float(self.opacity_logits[i]), feature=self.features[i].copy(),
            sh=None if self.sh is None else self.sh[i].copy(),
        )

    def __iter__(self) -> Iterator[GaussianSplat]:
        return (self[i] for i in range(len(self)))

    @property
    def sh_degree(self) -> int:
        return 0 if self.sh is None else 1

    @property
    def dtype(self):
        return self.positions.dtype

    @property
    def opacities(self) -> np.ndarray:
        return 1.0 / (1.0 + np.exp(-self.opacity_logits.astype(np.float64)))

    def params(self) -> dict[str, np.ndarray]:
        """Parameter arrays by name (live references, not copies)."""
        return {k: getattr(self, k) for k in PARAM_FIELDS if getattr(self, k) is not None}

    def copy(self) -> "GaussianScene":
        return self.astype(self.dtype)

    def astype(self, dtype) -> "GaussianScene":
        return GaussianScene(**{k: None if v is None else np.array(v, dtype=dtype)
                                for k, v in self._fields().items()})

    def subset(self, index) -> "GaussianScene":
        return GaussianScene(**{k: None if v is None else v[index].copy() for k, v in self._fields().items()})

    def concat(self, other: "GaussianScene") -> "GaussianScene":
        if self.sh_degree != other.sh_degree:
            raise ValueError("cannot concatenate scenes with different SH degree")
        mine, theirs = self._fields(), other._fields()
        return GaussianScene(**{
            k: None if v is None else np.concatenate([v, theirs[k].astype(v.dtype)]) for k, v in mine.items()
        })

    def equals(self, other: "GaussianScene") -> bool:
        """Bitwise equality of every parameter array."""
        if len(self) != len(other) or self.sh_degree != other.sh_degree:
            return False
        theirs = other._fields()
        return all(v is None or (v.dtype == theirs[k].dtype and np.array_equal(v, theirs[k]))
                   for k, v in self._fields().items())

    def normalize_rotations(self) -> None:
        n = np.linalg.norm(self.rotations, axis=1, keepdims=True)
        n[n == 0] = 1
        self.rotations /= n

    def _fields(self) -> dict:
        return {k: getattr(self, k) for k in PARAM_FIELDS}


@dataclass(frozen=True)
class Camera:
    """Pinhole camera with a world-to-camera pose ``x_cam = R x_world + t``.

    Camera axes follow the OpenCV convention (x right, y down, z forward); pixel
    centers sit at integer coordinates.
    """

    R: np.ndarray
    t: np.ndarray
    focal: tuple[float, float]
    principal: tuple[float, float]
    resolution: tuple[int, int]  # (width, height)

    def __post_init__(self):
        object.__setattr__(self, "R", np.asarray(self.R, dtype=np.float64).reshape(3, 3))
        object.__setattr__(self, "t", np.asarray(self.t, dtype=np.float64).reshape(3))
        object.__setattr__(self, "focal", (float(self.focal[0]), float(self.focal[1])))
        object.__setattr__(self, "principal", (float(self.principal[0]), float(self.principal[1])))
        object.__setattr__(self, "resolution", (int(self.resolution[0]), int(self.resolution[1])))
        if min(self.focal) <= 0:
            raise ValueError(f"focal lengths must be positive, got {self.focal}")
        if min(self.resolution) < 8:
            raise ValueError(f"resolution must be at least 8x8, got {self.resolution}")

    @classmethod
    def look_at(cls, eye, target, up=(0.0, -1.0, 0.0), fov_deg: float = 60.0,
                width: int = 64, height: int = 64) -> "Camera":
        eye = np.asarray(eye, dtype=np.float64)
        fwd = np.asarray(target, dtype=np.float64) - eye
        fwd /= np.linalg.norm(fwd)
        right = np.cross(fwd, np.asarray(up, dtype=np.float64))
        right /= np.linalg.norm(right)
        down = np.cross(fwd, right)
        R = np.stack([right, down, fwd])
        f = 0.5 * width / np.tan(np.radians(fov_deg) / 2)
        return cls(R, -R @ eye, (f, f), ((width - 1) / 2, (height - 1) / 2), (width, height))

    @property
    def width(self) -> int:
        return self.resolution[0]

    @property
    def height(self) -> int:
        return self.resolution[1]

    @property
    def center(self) -> np.ndarray:
        return -self.R.T @ self.t

    def world_to_camera(self, points: np.ndarray) -> np.ndarray:
        return np.asarray(points, dtype=np.float64) @ self.R.T + self.t

    def unproject(self, u, v, depth) -> np.ndarray:
        """World points for pixel coordinates at the given camera-frame depth (z)."""
        u, v, depth = (np.asarray(a, dtype=np.float64) for a in (u, v, depth))
        x = (u - self.principal[0]) / self.focal[0] * depth
        y = (v - self.principal[1]) / self.focal[1] * depth
        cam = np.stack([x, y, depth], axis=-1)
        return (cam - self.t) @ self.R


@dataclass
class SplatFragment:
    mean2d: np.ndarray
    cov2d: np.ndarray
    camera_depth: float
    source_index: int


@dataclass
class Projection:
    """Batched projection of a scene into one camera (all N Gaussians, culled ones flagged)."""

    valid: np.ndarray       # (N,) bool
    means2d: np.ndarray     # (N, 2)
    cov2d: np.ndarray       # (N, 2, 2) with COV2D_EPS added
    conics: np.ndarray      # (N, 3) inverse covariance (a, b, c)
    depths: np.ndarray      # (N,)
    radii: np.ndarray       # (N,) 3-sigma radius in pixels
    colors: np.ndarray      # (N, 3) view-evaluated colors
    # intermediates kept for the backward pass
    t_cam: np.ndarray
    J: np.ndarray
    M: np.ndarray           # R * diag(scale)
    Rq: np.ndarray
    scales: np.ndarray
    view_dirs: Optional[np.ndarray] = None
    view_dist: Optional[np.ndarray] = None


def _safe(z: np.ndarray, near: float) -> np.ndarray:
    return np.where(z > near, z, 1.0)


def project_scene(scene: GaussianScene, cam: Camera, near: float = NEAR_PLANE,
                  cov_eps: float = COV2D_EPS) -> Projection:
    pos = scene.positions.astype(np.float64)
    t_cam = cam.world_to_camera(pos)
    z = t_cam[:, 2]
    valid = z > near
    zs = _safe(z, near)
    fx, fy = cam.focal
    cx, cy = cam.principal

    Rq = quat_to_rotmat(scene.rotations.astype(np.float64)) if len(scene) else np.zeros((0, 3, 3))
    scales = np.exp(scene.log_scales.astype(np.float64))
    M = Rq * scales[:, None, :]
    sigma = M @ np.swapaxes(M, 1, 2)

    n = len(scene)
    J = np.zeros((n, 2, 3))
    J[:, 0, 0] = fx / zs
    J[:, 0, 2] = -fx * t_cam[:, 0] / zs**2
    J[:, 1, 1] = fy / zs
    J[:, 1, 2] = -fy * t_cam[:, 1] / zs**2
    T = J @ cam.R
    cov2d = T @ sigma @ np.swapaxes(T, 1, 2)
    cov2d[:, 0, 0] += cov_eps
    cov2d[:, 1, 1] += cov_eps

    a, b, c = cov2d[:, 0, 0], cov2d[:, 0, 1], cov2d[:, 1, 1]
    det = a * c - b * b
    valid &= det > 0
    det = np.where(det > 0, det, 1.0)
    conics = np.stack([c / det, -b / det, a / det], axis=1)
    mid = 0.5 * (a + c)
    lam = mid + np.sqrt(np.maximum(mid * mid - det, 0.0))
    radii = np.sqrt(CUTOFF_Q * lam)

    means = np.stack([fx * t_cam[:, 0] / zs + cx, fy * t_cam[:, 1] / zs + cy], axis=1)
    W, H = cam.resolution
    # bounding-box cull against the image rectangle
    valid &= (means[:, 0] + radii >= -0.5) & (means[:, 0] - radii <= W - 0.5)
    valid &= (means[:, 1] + radii >= -0.5) & (means[:, 1] - radii <= H - 0.5)
    valid &= np.isfinite(means).all(axis=1)
    # guard frustum: centres far outside the field of view project to huge, unstable splats
    lim_x = FRUSTUM_GUARD * (0.5 * W + abs(cx - 0.5 * (W - 1))) / fx
    lim_y = FRUSTUM_GUARD * (0.5 * H + abs(cy - 0.5 * (H - 1))) / fy
    valid &= (np.abs(t_cam[:, 0]) <= lim_x * zs) & (np.abs(t_cam[:, 1]) <= lim_y * zs)

    colors = scene.colors.astype(np.float64)
    view_dirs = view_dist = None
    if scene.sh is not None:
        d = pos - cam.center
        view_dist = np.linalg.norm(d, axis=1)
        view_dirs = d / np.where(view_dist > 0, view_dist, 1.0)[:, None]
        colors = colors + _sh1_color(scene.sh.astype(np.float64), view_dirs)

    return Projection(valid, means, cov2d, conics, z, radii, colors, t_cam, J, M, Rq, scales,
                      view_dirs, view_dist)


def _sh1_basis(dirs: np.ndarray) -> np.ndarray:
    x, y, z = dirs[:, 0], dirs[:, 1], dirs[:, 2]
    return SH_C1 * np.stack([-y, z, -x], axis=1)


def _sh1_color(sh: np.ndarray, dirs: np.ndarray) -> np.ndarray:
    return np.einsum("nk,nkc->nc", _sh1_basis(dirs), sh.reshape(-1, 3, 3))


def project_gaussian(g: GaussianSplat, cam: Camera, near: float = NEAR_PLANE,
                     cov_eps: float = COV2D_EPS, source_index: int = 0) -> Optional[SplatFragment]:
    """Project a single Gaussian; None when behind the near plane or off-image."""
    scene = GaussianScene.from_splats([g], dtype=np.float64)
    proj = project_scene(scene, cam, near, cov_eps)
    if not proj.valid[0]:
        return None
    return SplatFragment(proj.means2d[0], proj.cov2d[0], float(proj.depths[0]), source_index)


def scene_record_floats(sh_degree: int) -> int:
    return 3 + 3 + 4 + 3 + (9 if sh_degree == 1 else 0) + 1 + FEATURE_DIM


def _record_columns(scene: GaussianScene) -> list[np.ndarray]:
    cols = [scene.positions, scene.log_scales, scene.rotations, scene.colors]
    if scene.sh is not None:
        cols.append(scene.sh)
    cols += [scene.opacity_logits[:, None], scene.features]
    return cols


def save_scene(scene: GaussianScene, path) -> None:
    """Write the little-endian SPLF file; parameters are stored as float32."""
    payload = np.concatenate([c.astype("<f4") for c in _record_columns(scene)], axis=1) \
        if len(scene) else np.zeros((0, scene_record_floats(scene.sh_degree)), "<f4")
    with open(path, "wb") as f:
        f.write(_SCENE_HEADER.pack(SCENE_MAGIC, SCENE_VERSION, len(scene), scene.sh_degree))
        f.write(np.ascontiguousarray(payload, dtype="<f4").tobytes())


def load_scene(path) -> GaussianScene:
    data = Path(path).read_bytes()
    if len(data) < _SCENE_HEADER.size:
        raise SceneHeaderError(f"{path}: file too short for header")
    magic, version, count, sh_flag = _SCENE_HEADER.unpack_from(data)
    if magic != SCENE_MAGIC:
        raise SceneHeaderError(f"{path}: bad magic {magic!r}")
    if version != SCENE_VERSION:
        raise SceneVersionError(f"{path}: unsupported version {version}")
    if sh_flag not in (0, 1):
        raise SceneHeaderError(f"{path}: bad SH-degree flag {sh_flag}")
    width = scene_record_floats(sh_flag)
    expected = _SCENE_HEADER.size + count * width * 4
    if len(data) < expected:
        raise SceneTruncatedError(f"{path}: expected {expected} bytes, found {len(data)}")
    if len(data) > expected:
        raise SceneHeaderError(f"{path}: {len(data) - expected} trailing bytes")
    rec = np.frombuffer(data, dtype="<f4", offset=_SCENE_HEADER.size, count=count * width)
    rec = rec.reshape(count, width).astype(np.float32)
    splits = [3, 3, 4, 3] + ([9] if sh_flag else []) + [1, FEATURE_DIM]
    cols = np.split(rec, np.cumsum(splits)[:-1], axis=1)
    it = iter(cols)
    pos, ls, rot, col = next(it), next(it), next(it), next(it)
    sh = next(it) if sh_flag else None
    op, feat = next(it), next(it)
    return GaussianScene(pos.copy(), ls.copy(), rot.copy(), col.copy(), op[:, 0].copy(), feat.copy(),
                         None if sh is None else sh.copy())
