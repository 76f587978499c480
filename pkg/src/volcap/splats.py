"""Gaussian-splat primitive math and the fine-tuning objective.

Covariance assembly
    Sigma = R diag(s^2) R^T, world frame, symmetric PSD by construction.

Rotation re-parameterization
    Networks that regress splat rotations in the camera frame must have the
    camera-to-world rotation premultiplied before rendering in world space:
    R_world = R_cam_to_world @ R_predicted.  Equivalently, a camera-frame
    covariance changes frame as Sigma_w = R_c2w Sigma_c R_c2w^T.

Scale activation
    Pre-activations are bounded with tanh, instance-normalized per axis
    with learnable affine output, and scaled by s_max:
        zhat = tanh(z);  zbar = (zhat - mu_a) / (sigma_a + eps)
        s = s_max * (gamma_a * zbar + beta_a)
    The returned values are signed; only |s| is exported (the covariance
    squares the scales, so the sign is immaterial).

Fine-tuning objective
    L = L_rec + L_ent with
    L_rec  = lambda_l1 * mean_{Omega} huber(I - Ihat) + lambda_ssim * (1 - mean SSIM)
    L_ent  = lambda_ent * sum_axes max(0, H_star - H_axis), where H_axis is
             the entropy of a Gaussian soft histogram of scale magnitudes
             over uniformly spaced bin centers on [0, s_max].
    All pieces return analytic gradients that match central finite
    differences away from the Huber kink and the entropy clip boundary.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .camera import quat_to_matrix
from .errors import InvalidInputError

SSIM_C1 = 0.01**2
SSIM_C2 = 0.03**2


@dataclass(frozen=True)
class GaussianSplat:
    """One primitive: world mean, rotation, per-axis scales, color, opacity."""

    mu: np.ndarray
    rot: np.ndarray  # unit quaternion, scalar first (w, x, y, z), world frame
    scales: np.ndarray
    color: np.ndarray
    opacity: float

    def __post_init__(self):
        mu = np.asarray(self.mu, dtype=np.float64).reshape(3)
        rot = np.asarray(self.rot, dtype=np.float64).reshape(4)
        scales = np.asarray(self.scales, dtype=np.float64).reshape(3)
        color = np.asarray(self.color, dtype=np.float64).reshape(3)
        if abs(np.linalg.norm(rot) - 1.0) > 1e-6:
            raise InvalidInputError("splat quaternion must be unit norm within 1e-6")
        if np.any(scales < 0):
            raise InvalidInputError("splat scales must be >= 0")
        if np.any((color < 0) | (color > 1)) or not 0.0 <= self.opacity <= 1.0:
            raise InvalidInputError("color and opacity must lie in [0, 1]")
        for name, arr in (("mu", mu), ("rot", rot), ("scales", scales), ("color", color)):
            object.__setattr__(self, name, arr)


@dataclass(frozen=True)
class SplatFrame:
    """All splats of one camera at one frame, stored as packed arrays."""

    mu: np.ndarray  # N x 3
    rot: np.ndarray  # N x 4, unit quaternions, scalar first
    scales: np.ndarray  # N x 3, >= 0
    color: np.ndarray  # N x 3, [0, 1]
    opacity: np.ndarray  # N, [0, 1]
    source_camera: str = ""
    frame_index: int = 0

    def __post_init__(self):
        mu = np.asarray(self.mu, dtype=np.float64).reshape(-1, 3)
        rot = np.asarray(self.rot, dtype=np.float64).reshape(-1, 4)
        scales = np.asarray(self.scales, dtype=np.float64).reshape(-1, 3)
        color = np.asarray(self.color, dtype=np.float64).reshape(-1, 3)
        opacity = np.asarray(self.opacity, dtype=np.float64).reshape(-1)
        n = mu.shape[0]
        if not (rot.shape[0] == scales.shape[0] == color.shape[0] == opacity.shape[0] == n):
            raise InvalidInputError("all splat attribute arrays must share length")
        if n and np.max(np.abs(np.linalg.norm(rot, axis=1) - 1.0)) > 1e-6:
            raise InvalidInputError("splat quaternions must be unit norm within 1e-6")
        if np.any(scales < 0):
            raise InvalidInputError("splat scales must be >= 0")
        if np.any((color < 0) | (color > 1)) or np.any((opacity < 0) | (opacity > 1)):
            raise InvalidInputError("colors and opacities must lie in [0, 1]")
        if self.frame_index < 0:
            raise InvalidInputError("frame index must be >= 0")
        for name, arr in (("mu", mu), ("rot", rot), ("scales", scales), ("color", color), ("opacity", opacity)):
            object.__setattr__(self, name, arr)

    def __len__(self) -> int:
        return self.mu.shape[0]

    @staticmethod
    def from_splats(splats, source_camera: str = "", frame_index: int = 0) -> "SplatFrame":
        splats = list(splats)
        if not splats:
            return SplatFrame(
                np.zeros((0, 3)), np.zeros((0, 4)), np.zeros((0, 3)), np.zeros((0, 3)), np.zeros(0),
                source_camera, frame_index,
            )
        return SplatFrame(
            np.stack([s.mu for s in splats]),
            np.stack([s.rot for s in splats]),
            np.stack([s.scales for s in splats]),
            np.stack([s.color for s in splats]),
            np.array([s.opacity for s in splats]),
            source_camera,
            frame_index,
        )

    def splat(self, i: int) -> GaussianSplat:
        return GaussianSplat(self.mu[i], self.rot[i], self.scales[i], self.color[i], float(self.opacity[i]))


@dataclass(frozen=True)
class ScaleActivationParams:
    """Per-axis affine (gamma, beta), output range s_max, and stabilizer eps."""

    gamma: np.ndarray = (1.0, 1.0, 1.0)
    beta: np.ndarray = (0.0, 0.0, 0.0)
    s_max: float = 0.05
    eps: float = 1e-5

    def __post_init__(self):
        if self.s_max <= 0 or self.eps <= 0:
            raise InvalidInputError("s_max and eps must be positive")
        object.__setattr__(self, "gamma", np.asarray(self.gamma, dtype=np.float64).reshape(3))
        object.__setattr__(self, "beta", np.asarray(self.beta, dtype=np.float64).reshape(3))


@dataclass(frozen=True)
class LossParams:
    """Weights and shapes of the fine-tuning objective.

    sigma_h and h_star default to s_max / m_bins (bandwidth matched to the
    bin pitch) and 0.8 * log(m_bins) (below the max-entropy ceiling so the
    clip is reachable).
    """

    lambda_l1: float = 0.8
    lambda_ssim: float = 0.2
    delta: float = 0.05
    m_bins: int = 64
    s_max: float = 0.05
    sigma_h: float | None = None
    h_star: float | None = None
    lambda_ent: float = 1e-2
    eps: float = 1e-12
    ssim_window: int = 11

    def __post_init__(self):
        if min(self.lambda_l1, self.lambda_ssim, self.lambda_ent) < 0:
            raise InvalidInputError("loss weights must be >= 0")
        if self.m_bins < 2:
            raise InvalidInputError("need at least 2 histogram bins")
        if self.sigma_h is None:
            object.__setattr__(self, "sigma_h", self.s_max / self.m_bins)
        if self.sigma_h <= 0:
            raise InvalidInputError("sigma_h must be positive")
        if self.h_star is None:
            object.__setattr__(self, "h_star", 0.8 * float(np.log(self.m_bins)))


def _as_rotation_matrix(rot) -> np.ndarray:
    rot = np.asarray(rot, dtype=np.float64)
    if rot.shape == (4,):
        return quat_to_matrix(rot)
    if rot.shape == (3, 3):
        return rot
    raise InvalidInputError(f"rotation must be a quaternion (4,) or matrix (3, 3), got {rot.shape}")


def assemble_covariance(rot, scales) -> np.ndarray:
    """Sigma = R diag(s^2) R^T from a rotation and per-axis scales."""
    R = _as_rotation_matrix(rot)
    s2 = np.asarray(scales, dtype=np.float64).reshape(3) ** 2
    return (R * s2) @ R.T


def reparameterize_rotation(rot_cam_frame, cam_pose_rot) -> np.ndarray:
    """World-frame splat rotation: R_world = R_cam_to_world @ R_cam_frame."""
    return _as_rotation_matrix(cam_pose_rot) @ _as_rotation_matrix(rot_cam_frame)


def world_covariance_from_camera(cov_cam: np.ndarray, cam_pose_rot) -> np.ndarray:
    """Change a camera-frame covariance into world frame."""
    R = _as_rotation_matrix(cam_pose_rot)
    cov = np.asarray(cov_cam, dtype=np.float64).reshape(3, 3)
    return R @ cov @ R.T


def scale_activation(
    z: np.ndarray, p: ScaleActivationParams | None = None, with_jacobian: bool = False
):
    """tanh + per-axis instance normalization + affine, times s_max.

    ``z`` is N x 3 (N splats in the instance, N >= 2).  Returns the signed
    activated scales, and with ``with_jacobian`` also the per-axis Jacobian
    of shape (3, N, N) where jac[a, i, j] = d s[i, a] / d z[j, a].
    Consumers export |s|; the covariance squares it anyway.
    """
    p = p or ScaleActivationParams()
    z = np.asarray(z, dtype=np.float64)
    if z.ndim != 2 or z.shape[1] != 3:
        raise InvalidInputError("pre-activations must be N x 3")
    n = z.shape[0]
    if n < 2:
        raise InvalidInputError("instance statistics need at least 2 splats")
    zhat = np.tanh(z)
    mu = zhat.mean(axis=0)
    sigma = zhat.std(axis=0)  # population
    zbar = (zhat - mu) / (sigma + p.eps)
    s = p.s_max * (p.gamma * zbar + p.beta)
    if not with_jacobian:
        return s
    jac = np.zeros((3, n, n))
    eye = np.eye(n)
    for a in range(3):
        dev = zhat[:, a] - mu[a]
        denom = sigma[a] + p.eps
        if sigma[a] > 0:
            dsig = dev / (n * sigma[a])  # d sigma / d zhat_j
        else:
            dsig = np.zeros(n)  # subgradient at the all-equal manifold
        dzbar = (eye - 1.0 / n) / denom - np.outer(dev, dsig) / (denom * denom)
        jac[a] = p.s_max * p.gamma[a] * dzbar * (1.0 - zhat[:, a] ** 2)[None, :]
    return s, jac


def huber(e, delta: float = 0.05):
    """Smooth-L1 penalty: e^2 / (2 delta) inside |e| < delta, |e| - delta/2 outside."""
    e = np.asarray(e, dtype=np.float64)
    out = np.where(np.abs(e) < delta, e * e / (2.0 * delta), np.abs(e) - delta / 2.0)
    return out if out.ndim else float(out)


def huber_grad(e, delta: float = 0.05):
    e = np.asarray(e, dtype=np.float64)
    out = np.where(np.abs(e) < delta, e / delta, np.sign(e))
    return out if out.ndim else float(out)


def _box_sum(x: np.ndarray, k: int) -> np.ndarray:
    """Valid-mode k x k window sums via integral images."""
    s = np.cumsum(np.cumsum(x, axis=0), axis=1)
    s = np.pad(s, ((1, 0), (1, 0)))
    return s[k:, k:] - s[:-k, k:] - s[k:, :-k] + s[:-k, :-k]


def _box_scatter(c: np.ndarray, k: int, out_shape) -> np.ndarray:
    """Adjoint of the valid-mode k x k window sum."""
    pad = k - 1
    padded = np.pad(c, ((pad, pad), (pad, pad)))
    out = _box_sum(padded, k)
    assert out.shape == tuple(out_shape)
    return out


def _ssim_channel(x: np.ndarray, y: np.ndarray, window: int, want_grad: bool):
    n = float(window * window)
    mx = _box_sum(x, window) / n
    my = _box_sum(y, window) / n
    sxx = _box_sum(x * x, window) / n - mx * mx
    syy = _box_sum(y * y, window) / n - my * my
    sxy = _box_sum(x * y, window) / n - mx * my
    a1 = 2.0 * mx * my + SSIM_C1
    a2 = 2.0 * sxy + SSIM_C2
    b1 = mx * mx + my * my + SSIM_C1
    b2 = sxx + syy + SSIM_C2
    smap = (a1 * a2) / (b1 * b2)
    mssim = float(np.mean(smap))
    if not want_grad:
        return mssim, None
    n_win = smap.size
    inv = 1.0 / (b1 * b2)
    coef_const = mx * a2 * inv - a1 * mx * inv - smap * my / b1 + smap * my / b2
    coef_x = a1 * inv
    coef_y = -smap / b2
    scale = (2.0 / n) / n_win
    grad = scale * (
        _box_scatter(coef_const, window, x.shape)
        + x * _box_scatter(coef_x, window, x.shape)
        + y * _box_scatter(coef_y, window, x.shape)
    )
    return mssim, grad


def _channels(img: np.ndarray) -> np.ndarray:
    img = np.asarray(img, dtype=np.float64)
    if img.ndim == 2:
        return img[:, :, None]
    if img.ndim == 3:
        return img
    raise InvalidInputError("images must be H x W or H x W x C")


def ssim(a: np.ndarray, b: np.ndarray, window: int = 11) -> float:
    """Mean SSIM over local uniform windows, averaged across channels.

    Local statistics use valid-region box windows (no padding) with
    C1 = 0.01^2, C2 = 0.03^2 on the unit value range.
    """
    a = _channels(a)
    b = _channels(b)
    if a.shape != b.shape:
        raise InvalidInputError("SSIM inputs must share dimensions")
    if a.shape[0] < window or a.shape[1] < window:
        raise InvalidInputError(f"image smaller than the {window}x{window} SSIM window")
    vals = [_ssim_channel(a[..., c], b[..., c], window, False)[0] for c in range(a.shape[2])]
    return float(np.mean(vals))


def ssim_with_grad(a: np.ndarray, b: np.ndarray, window: int = 11):
    """Mean SSIM and its gradient with respect to ``b`` (same shape as b)."""
    out_shape = np.asarray(b).shape
    a = _channels(a)
    b = _channels(b)
    if a.shape != b.shape:
        raise InvalidInputError("SSIM inputs must share dimensions")
    if a.shape[0] < window or a.shape[1] < window:
        raise InvalidInputError(f"image smaller than the {window}x{window} SSIM window")
    nch = a.shape[2]
    vals = []
    grad = np.zeros_like(b)
    for c in range(nch):
        v, g = _ssim_channel(a[..., c], b[..., c], window, True)
        vals.append(v)
        grad[..., c] = g / nch
    return float(np.mean(vals)), grad.reshape(out_shape)


def reconstruction_loss(I: np.ndarray, I_hat: np.ndarray, omega: np.ndarray, p: LossParams | None = None):
    """Masked Huber photometric term plus (1 - mean SSIM), with gradient.

    Returns (loss, grad wrt I_hat).  The Huber term averages per channel
    then over the masked pixels; the SSIM term covers the full image.
    """
    p = p or LossParams()
    out_shape = np.asarray(I_hat).shape
    I = _channels(I)
    I_hat = _channels(I_hat)
    if I.shape != I_hat.shape:
        raise InvalidInputError("image dimensions must match")
    omega = np.asarray(omega, dtype=bool)
    if omega.shape != I.shape[:2]:
        raise InvalidInputError("mask dimensions must match the images")
    n_omega = int(omega.sum())
    if n_omega == 0:
        raise InvalidInputError("empty pixel mask")
    nch = I.shape[2]
    e = I - I_hat
    h = huber(e, p.delta)
    loss_h = float(h[omega].sum() / (n_omega * nch))
    grad_h = np.zeros_like(I_hat)
    grad_h[omega] = -huber_grad(e[omega], p.delta) / (n_omega * nch)
    mssim, grad_s = ssim_with_grad(I, I_hat, p.ssim_window)
    grad_s = grad_s.reshape(I_hat.shape)
    loss = p.lambda_l1 * loss_h + p.lambda_ssim * (1.0 - mssim)
    grad = p.lambda_l1 * grad_h - p.lambda_ssim * grad_s
    return loss, grad.reshape(out_shape)


def soft_histogram_entropy(scales: np.ndarray, p: LossParams | None = None):
    """Clipped negative-entropy regularizer over per-axis scale histograms.

    Returns (loss, grad wrt scales).  The gradient is zero on axes whose
    entropy already meets the target.
    """
    p = p or LossParams()
    scales = np.asarray(scales, dtype=np.float64)
    if scales.ndim != 2 or scales.shape[1] != 3:
        raise InvalidInputError("scales must be N x 3")
    if scales.shape[0] < 1:
        raise InvalidInputError("need at least one splat")
    bins = np.linspace(0.0, p.s_max, p.m_bins)
    loss = 0.0
    grad = np.zeros_like(scales)
    for a in range(3):
        s = scales[:, a]
        diff = s[:, None] - bins[None, :]
        E = np.exp(-0.5 * diff**2 / (p.sigma_h**2))
        h = E.sum(axis=0)
        T = h.sum()
        if T <= 0:
            # All kernel mass underflowed; treat as zero entropy, flat gradient.
            loss += p.lambda_ent * p.h_star
            continue
        prob = h / T
        H = float(-(prob * np.log(prob + p.eps)).sum())
        if H >= p.h_star:
            continue
        loss += p.lambda_ent * (p.h_star - H)
        dH_dp = -np.log(prob + p.eps) - prob / (prob + p.eps)
        dH_dh = dH_dp / T - float(dH_dp @ h) / (T * T)
        dh_ds = E * (-diff / (p.sigma_h**2))  # N x M
        grad[:, a] = -p.lambda_ent * (dh_ds @ dH_dh)
    return float(loss), grad


def total_finetune_loss(I, I_hat, omega, scales, p: LossParams | None = None) -> float:
    """Sum of the reconstruction and entropy terms."""
    p = p or LossParams()
    rec, _ = reconstruction_loss(I, I_hat, omega, p)
    ent, _ = soft_histogram_entropy(scales, p)
    return rec + ent
