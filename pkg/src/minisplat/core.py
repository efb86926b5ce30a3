"""Scene primitives shared by every stage: Gaussians, cameras and SH color."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

MAX_SH_DEGREE = 3
NUM_SH_COEFFS = (MAX_SH_DEGREE + 1) ** 2

SH_C0 = 0.28209479177387814
SH_C1 = 0.4886025119029199
SH_C2 = (
    1.0925484305920792,
    -1.0925484305920792,
    0.31539156525252005,
    -1.0925484305920792,
    0.5462742152960396,
)
SH_C3 = (
    -0.5900435899266435,
    2.890611442640554,
    -0.4570457994644658,
    0.3731763325901154,
    -0.4570457994644658,
    1.445305721320277,
    -0.5900435899266435,
)


def sigmoid(x):
    return 1.0 / (1.0 + np.exp(-x))


def logit(p):
    p = np.asarray(p, dtype=np.float64)
    return np.log(p) - np.log1p(-p)


def rgb_to_sh_dc(rgb):
    return (np.asarray(rgb, dtype=np.float64) - 0.5) / SH_C0


def sh_dc_to_rgb(dc):
    return np.asarray(dc, dtype=np.float64) * SH_C0 + 0.5


def quat_to_rotmat(q: np.ndarray) -> np.ndarray:
    """Rotation matrices for (..., 4) quaternions in (w, x, y, z) order.

    The input is normalized first, so q and -q give the same matrix.
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


def rotmat_grad_to_quat(q: np.ndarray, dR: np.ndarray) -> np.ndarray:
    """Pull a gradient w.r.t. rotation matrices back onto raw (unnormalized) quaternions."""
    q = np.asarray(q, dtype=np.float64)
    norm = np.linalg.norm(q, axis=-1, keepdims=True)
    qn = q / norm
    w, x, y, z = qn[..., 0], qn[..., 1], qn[..., 2], qn[..., 3]
    g = dR
    dw = 2 * (-z * g[..., 0, 1] + y * g[..., 0, 2] + z * g[..., 1, 0]
              - x * g[..., 1, 2] - y * g[..., 2, 0] + x * g[..., 2, 1])
    dx = 2 * (y * g[..., 0, 1] + z * g[..., 0, 2] + y * g[..., 1, 0]
              - 2 * x * g[..., 1, 1] - w * g[..., 1, 2] + z * g[..., 2, 0]
              + w * g[..., 2, 1] - 2 * x * g[..., 2, 2])
    dy = 2 * (-2 * y * g[..., 0, 0] + x * g[..., 0, 1] + w * g[..., 0, 2]
              + x * g[..., 1, 0] + z * g[..., 1, 2] - w * g[..., 2, 0]
              + z * g[..., 2, 1] - 2 * y * g[..., 2, 2])
    dz = 2 * (-2 * z * g[..., 0, 0] - w * g[..., 0, 1] + x * g[..., 0, 2]
              + w * g[..., 1, 0] - 2 * z * g[..., 1, 1] + y * g[..., 1, 2]
              + x * g[..., 2, 0] + y * g[..., 2, 1])
    dqn = np.stack([dw, dx, dy, dz], axis=-1)
    # d(q/|q|)/dq = (I - qn qn^T) / |q|
    return (dqn - qn * np.sum(dqn * qn, axis=-1, keepdims=True)) / norm


def covariance_from(scales: np.ndarray, quats: np.ndarray) -> np.ndarray:
    """Sigma = R diag(s^2) R^T for every row."""
    R = quat_to_rotmat(quats)
    M = R * np.asarray(scales, dtype=np.float64)[..., None, :]
    cov = M @ np.swapaxes(M, -1, -2)
    return 0.5 * (cov + np.swapaxes(cov, -1, -2))


def sh_degree_of(num_coeffs: int) -> int:
    deg = int(round(np.sqrt(num_coeffs))) - 1
    if (deg + 1) ** 2 != num_coeffs:
        raise ValueError(f"{num_coeffs} is not a valid SH coefficient count")
    return deg


def sh_basis(dirs: np.ndarray, degree: int, with_grad: bool = False):
    """Real SH basis values (..., K) for unit directions, K = (degree+1)^2.

    With ``with_grad`` also returns d(basis)/d(dir) of shape (..., K, 3),
    treating the components of ``dirs`` as independent polynomial variables.
    """
    dirs = np.asarray(dirs, dtype=np.float64)
    x, y, z = dirs[..., 0], dirs[..., 1], dirs[..., 2]
    K = (degree + 1) ** 2
    Y = np.zeros(dirs.shape[:-1] + (K,))
    dY = np.zeros(dirs.shape[:-1] + (K, 3)) if with_grad else None
    Y[..., 0] = SH_C0
    if degree >= 1:
        Y[..., 1] = -SH_C1 * y
        Y[..., 2] = SH_C1 * z
        Y[..., 3] = -SH_C1 * x
        if with_grad:
            dY[..., 1, 1] = -SH_C1
            dY[..., 2, 2] = SH_C1
            dY[..., 3, 0] = -SH_C1
    if degree >= 2:
        xx, yy, zz = x * x, y * y, z * z
        Y[..., 4] = SH_C2[0] * x * y
        Y[..., 5] = SH_C2[1] * y * z
        Y[..., 6] = SH_C2[2] * (2 * zz - xx - yy)
        Y[..., 7] = SH_C2[3] * x * z
        Y[..., 8] = SH_C2[4] * (xx - yy)
        if with_grad:
            dY[..., 4, 0], dY[..., 4, 1] = SH_C2[0] * y, SH_C2[0] * x
            dY[..., 5, 1], dY[..., 5, 2] = SH_C2[1] * z, SH_C2[1] * y
            dY[..., 6, 0] = -2 * SH_C2[2] * x
            dY[..., 6, 1] = -2 * SH_C2[2] * y
            dY[..., 6, 2] = 4 * SH_C2[2] * z
            dY[..., 7, 0], dY[..., 7, 2] = SH_C2[3] * z, SH_C2[3] * x
            dY[..., 8, 0], dY[..., 8, 1] = 2 * SH_C2[4] * x, -2 * SH_C2[4] * y
    if degree >= 3:
        Y[..., 9] = SH_C3[0] * y * (3 * xx - yy)
        Y[..., 10] = SH_C3[1] * x * y * z
        Y[..., 11] = SH_C3[2] * y * (4 * zz - xx - yy)
        Y[..., 12] = SH_C3[3] * z * (2 * zz - 3 * xx - 3 * yy)
        Y[..., 13] = SH_C3[4] * x * (4 * zz - xx - yy)
        Y[..., 14] = SH_C3[5] * z * (xx - yy)
        Y[..., 15] = SH_C3[6] * x * (xx - 3 * yy)
        if with_grad:
            dY[..., 9, 0] = SH_C3[0] * 6 * x * y
            dY[..., 9, 1] = SH_C3[0] * (3 * xx - 3 * yy)
            dY[..., 10, 0] = SH_C3[1] * y * z
            dY[..., 10, 1] = SH_C3[1] * x * z
            dY[..., 10, 2] = SH_C3[1] * x * y
            dY[..., 11, 0] = SH_C3[2] * -2 * x * y
            dY[..., 11, 1] = SH_C3[2] * (4 * zz - xx - 3 * yy)
            dY[..., 11, 2] = SH_C3[2] * 8 * y * z
            dY[..., 12, 0] = SH_C3[3] * -6 * x * z
            dY[..., 12, 1] = SH_C3[3] * -6 * y * z
            dY[..., 12, 2] = SH_C3[3] * (6 * zz - 3 * xx - 3 * yy)
            dY[..., 13, 0] = SH_C3[4] * (4 * zz - 3 * xx - yy)
            dY[..., 13, 1] = SH_C3[4] * -2 * x * y
            dY[..., 13, 2] = SH_C3[4] * 8 * x * z
            dY[..., 14, 0] = SH_C3[5] * 2 * x * z
            dY[..., 14, 1] = SH_C3[5] * -2 * y * z
            dY[..., 14, 2] = SH_C3[5] * (xx - yy)
            dY[..., 15, 0] = SH_C3[6] * (3 * xx - 3 * yy)
            dY[..., 15, 1] = SH_C3[6] * -6 * x * y
    if with_grad:
        return Y, dY
    return Y


def eval_sh(sh: np.ndarray, dirs: np.ndarray, level: int) -> np.ndarray:
    """RGB from SH coefficients ``sh`` (..., K, 3) along unit ``dirs`` (..., 3).

    Uses the 3DGS file convention: color = 0.5 + sum_k coeff_k * Y_k(dir).
    No clamping happens here.
    """
    sh = np.asarray(sh, dtype=np.float64)
    stored = sh_degree_of(sh.shape[-2])
    if level < 0 or level > stored:
        raise ValueError(f"SH level {level} exceeds stored level {stored}")
    dirs = np.asarray(dirs, dtype=np.float64)
    norms = np.linalg.norm(dirs, axis=-1)
    if np.any(np.abs(norms - 1.0) > 1e-6):
        raise ValueError("eval_sh expects unit directions")
    K = (level + 1) ** 2
    Y = sh_basis(dirs, level)
    return 0.5 + np.einsum("...k,...kc->...c", Y, sh[..., :K, :])


@dataclass
class GaussianSet:
    """Structure-of-arrays Gaussian scene.

    Scales and opacities are held in the optimizer's parameter space
    (log-scale, opacity logit); ``scales`` and ``opacities`` expose the
    linear values. Quaternions are (w, x, y, z).
    """

    means: np.ndarray
    log_scales: np.ndarray
    quats: np.ndarray
    opacity_logits: np.ndarray
    sh: np.ndarray
    sh_degree: int = 0

    def __post_init__(self):
        self.means = np.ascontiguousarray(self.means, dtype=np.float64).reshape(-1, 3)
        n = self.means.shape[0]
        self.log_scales = np.ascontiguousarray(self.log_scales, dtype=np.float64).reshape(n, 3)
        self.quats = np.ascontiguousarray(self.quats, dtype=np.float64).reshape(n, 4)
        self.opacity_logits = np.ascontiguousarray(self.opacity_logits, dtype=np.float64).reshape(n)
        sh = np.asarray(self.sh, dtype=np.float64)
        sh = sh.reshape(n, -1, 3) if n else np.zeros((0, NUM_SH_COEFFS, 3))
        if sh.shape[1] < NUM_SH_COEFFS:
            pad = np.zeros((n, NUM_SH_COEFFS - sh.shape[1], 3))
            sh = np.concatenate([sh, pad], axis=1)
        self.sh = np.ascontiguousarray(sh)
        if not 0 <= self.sh_degree <= MAX_SH_DEGREE:
            raise ValueError(f"sh_degree must be in [0, {MAX_SH_DEGREE}]")

    @classmethod
    def from_activated(cls, means, scales, quats, opacities, sh=None, colors=None, sh_degree=0):
        means = np.array(means, dtype=np.float64).reshape(-1, 3)
        n = len(means)
        if sh is None:
            sh = np.zeros((n, NUM_SH_COEFFS, 3))
            if colors is not None:
                sh[:, 0, :] = rgb_to_sh_dc(colors)
        else:
            sh = np.array(sh, dtype=np.float64)
        quats = np.array(quats, dtype=np.float64).reshape(n, 4)
        quats = quats / np.linalg.norm(quats, axis=1, keepdims=True)
        opac = np.clip(np.asarray(opacities, dtype=np.float64).reshape(n), 1e-12, 1 - 1e-12)
        return cls(means, np.log(np.asarray(scales, dtype=np.float64)), quats,
                   logit(opac), sh, sh_degree)

    @classmethod
    def empty(cls, sh_degree=0):
        return cls(np.zeros((0, 3)), np.zeros((0, 3)), np.zeros((0, 4)), np.zeros(0),
                   np.zeros((0, NUM_SH_COEFFS, 3)), sh_degree)

    def __len__(self):
        return self.means.shape[0]

    @property
    def scales(self) -> np.ndarray:
        return np.exp(self.log_scales)

    @property
    def opacities(self) -> np.ndarray:
        return sigmoid(self.opacity_logits)

    @property
    def unit_quats(self) -> np.ndarray:
        return self.quats / np.linalg.norm(self.quats, axis=1, keepdims=True)

    @property
    def rotations(self) -> np.ndarray:
        return quat_to_rotmat(self.quats)

    def covariances(self) -> np.ndarray:
        return covariance_from(self.scales, self.quats)

    def colors(self, cam_center=None) -> np.ndarray:
        """Per-Gaussian RGB as seen from ``cam_center`` (DC only at level 0)."""
        if self.sh_degree == 0 or cam_center is None:
            return sh_dc_to_rgb(self.sh[:, 0, :])
        d = self.means - np.asarray(cam_center)[None, :]
        d /= np.maximum(np.linalg.norm(d, axis=1, keepdims=True), 1e-12)
        return eval_sh(self.sh, d, self.sh_degree)

    def copy(self) -> GaussianSet:
        return GaussianSet(self.means.copy(), self.log_scales.copy(), self.quats.copy(),
                           self.opacity_logits.copy(), self.sh.copy(), self.sh_degree)

    def take(self, idx) -> GaussianSet:
        idx = np.asarray(idx)
        return GaussianSet(self.means[idx], self.log_scales[idx], self.quats[idx],
                           self.opacity_logits[idx], self.sh[idx], self.sh_degree)

    def concat(self, other: GaussianSet) -> GaussianSet:
        return GaussianSet(
            np.concatenate([self.means, other.means]),
            np.concatenate([self.log_scales, other.log_scales]),
            np.concatenate([self.quats, other.quats]),
            np.concatenate([self.opacity_logits, other.opacity_logits]),
            np.concatenate([self.sh, other.sh]),
            max(self.sh_degree, other.sh_degree),
        )

    def validate(self) -> None:
        """Raise ValueError if any per-Gaussian invariant is broken."""
        s = self.scales
        if not np.all(np.isfinite(self.means)):
            raise ValueError("non-finite Gaussian centers")
        if not (np.all(np.isfinite(s)) and np.all(s > 0)):
            raise ValueError("scales must be positive and finite")
        if np.any(np.abs(np.linalg.norm(self.unit_quats, axis=1) - 1) > 1e-6):
            raise ValueError("quaternions are not unit length")
        o = self.opacities
        if np.any((o < 0) | (o > 1)) or not np.all(np.isfinite(o)):
            raise ValueError("opacity outside [0, 1]")
        if len(self):
            np.linalg.cholesky(self.covariances())


@dataclass
class Camera:
    """Pinhole camera; ``R``, ``t`` map world points to camera space (x_c = R x_w + t)."""

    width: int
    height: int
    fx: float
    fy: float
    cx: float
    cy: float
    R: np.ndarray = field(default_factory=lambda: np.eye(3))
    t: np.ndarray = field(default_factory=lambda: np.zeros(3))
    name: str = ""

    def __post_init__(self):
        self.R = np.asarray(self.R, dtype=np.float64).reshape(3, 3)
        self.t = np.asarray(self.t, dtype=np.float64).reshape(3)
        self.width, self.height = int(self.width), int(self.height)
        if self.width < 1 or self.height < 1:
            raise ValueError("image size must be at least 1x1")
        if not (self.fx > 0 and self.fy > 0):
            raise ValueError("focal lengths must be positive")
        if np.abs(self.R @ self.R.T - np.eye(3)).max() > 1e-6:
            raise ValueError("camera rotation is not orthonormal")

    @property
    def center(self) -> np.ndarray:
        return -self.R.T @ self.t

    @property
    def shape(self):
        return self.height, self.width

    def world_to_camera(self, points: np.ndarray) -> np.ndarray:
        return np.asarray(points, dtype=np.float64) @ self.R.T + self.t

    def camera_to_world(self, points: np.ndarray) -> np.ndarray:
        return (np.asarray(points, dtype=np.float64) - self.t) @ self.R

    def project(self, points: np.ndarray) -> np.ndarray:
        """World points to continuous pixel coordinates (pixel centers at k + 0.5)."""
        pc = self.world_to_camera(points)
        return np.stack([self.fx * pc[..., 0] / pc[..., 2] + self.cx,
                         self.fy * pc[..., 1] / pc[..., 2] + self.cy], axis=-1)

    def pixel_grid(self):
        """Pixel-center coordinates (u, v) with shape (H, W)."""
        return np.meshgrid(np.arange(self.width) + 0.5, np.arange(self.height) + 0.5)

    def pixel_rays(self):
        """World-space ray origin and per-pixel directions (H, W, 3) with unit camera-z."""
        u, v = self.pixel_grid()
        d_cam = np.stack([(u - self.cx) / self.fx, (v - self.cy) / self.fy, np.ones_like(u)], -1)
        return self.center, d_cam @ self.R

    def unproject(self, u, v, z) -> np.ndarray:
        """Pixel coordinates plus camera-z depth to world points."""
        u, v, z = (np.asarray(a, dtype=np.float64) for a in (u, v, z))
        pc = np.stack([(u - self.cx) / self.fx * z, (v - self.cy) / self.fy * z, z], -1)
        return self.camera_to_world(pc)

    @classmethod
    def look_at(cls, eye, target, up, width, height, fov_x_deg, name=""):
        """Camera at ``eye`` looking at ``target`` (camera +z forward, +y down)."""
        eye, target, up = (np.asarray(a, dtype=np.float64) for a in (eye, target, up))
        fwd = target - eye
        fwd /= np.linalg.norm(fwd)
        right = np.cross(fwd, up)
        right /= np.linalg.norm(right)
        down = np.cross(fwd, right)
        R = np.stack([right, down, fwd])
        fx = 0.5 * width / np.tan(np.deg2rad(fov_x_deg) / 2)
        return cls(width, height, fx, fx, width / 2, height / 2, R, -R @ eye, name)
