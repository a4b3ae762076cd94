"""Differentiable training losses over autodiff tensors.

Positions are laid out (..., T, J, 3) in cm, rotation matrices (..., T, J, 3, 3),
latent codes (B, C, T).  Every loss averages over all leading axes.
"""

from dataclasses import asdict, dataclass

import numpy as np

from . import autodiff as ad
from .kinematics import geodesic_distance_t
from .signal import STFT_HOP, STFT_WINDOW, log_stft_magnitude_t

SSIM_C1 = 0.01 ** 2
SSIM_C2 = 0.03 ** 2
SSIM_C3 = SSIM_C2 / 2


@dataclass
class LossWeights:
    lambda_rot: float = 1.0
    lambda_pos: float = 1.0
    lambda_speed: float = 5.0
    lambda_stft: float = 1.0
    lambda_ssim: float = 1.0
    lambda_lpips: float = 1.0
    lambda_align: float = 1.0
    lambda_kl: float = 1e-3
    lambda_cyc: float = 1.0
    lambda_ds: float = 1.0
    rho: float = 0.2
    clamp_max: float = 50.0

    @classmethod
    def paper(cls):
        return cls()

    @classmethod
    def desk(cls):
        """Thresholds rescaled to the 8-joint synthetic skeleton (styles differ by ~15 cm)."""
        return cls(rho=2.0, clamp_max=15.0, lambda_ds=0.3)

    def __post_init__(self):
        for name, value in asdict(self).items():
            if not np.isfinite(value) or value < 0:
                raise ValueError(f"loss weight {name} must be finite and >= 0, got {value}")


@dataclass
class MotionPrediction:
    """Positions plus, in 3D mode, the rotation matrices that produced them."""

    positions: ad.Tensor
    rotmats: ad.Tensor = None


def _check_same(op, a, b):
    if a.shape != b.shape:
        raise ad.ShapeError(f"{op}: shape mismatch {a.shape} vs {b.shape}")


def _mean_l1(op, a, b):
    a, b = ad._wrap(a), ad._wrap(b)
    _check_same(op, a, b)
    return ad.absolute(a - b).mean()


def _joint_l1(p_hat, p):
    """Per-joint L1 distance, summed over coordinates: (..., T, J)."""
    return ad.absolute(p_hat - p).sum(axis=-1)


def rotation_loss(R_hat, R):
    R_hat, R = ad._wrap(R_hat), ad._wrap(R)
    _check_same("rotation_loss", R_hat, R)
    return geodesic_distance_t(R, R_hat).mean()


def position_loss(p_hat, p):
    p_hat, p = ad._wrap(p_hat), ad._wrap(p)
    _check_same("position_loss", p_hat, p)
    return _joint_l1(p_hat, p).mean()


def _velocity(p):
    T = p.shape[-3]
    if T < 2:
        raise ValueError(f"speed needs at least 2 frames, got {T}")
    return p[..., 1:, :, :] - p[..., :-1, :, :]


def speed_loss(p_hat, p):
    p_hat, p = ad._wrap(p_hat), ad._wrap(p)
    _check_same("speed_loss", p_hat, p)
    return _joint_l1(_velocity(p_hat), _velocity(p)).mean()


def motion_reconstruction_loss(M_hat, M, weights, parts=None):
    """Weighted rotation + position + speed loss.

    ``M_hat``/``M`` are :class:`MotionPrediction`; when either lacks rotations
    (2D mode) the rotation term is skipped.  If ``parts`` is a dict the
    individual terms are written into it.
    """
    total = weights.lambda_pos * position_loss(M_hat.positions, M.positions)
    terms = {"pos": total}
    speed = speed_loss(M_hat.positions, M.positions)
    terms["speed"] = speed
    total = total + weights.lambda_speed * speed
    if M_hat.rotmats is not None and M.rotmats is not None:
        rot = rotation_loss(M_hat.rotmats, M.rotmats)
        terms["rot"] = rot
        total = total + weights.lambda_rot * rot
    if parts is not None:
        parts.update(terms)
    return total


def relaxed_motion_loss(p_hat, p, rho):
    """Hinge on per-joint L1: ``mean(max(|p_hat - p|_1 - rho, 0))``."""
    if rho < 0:
        raise ValueError(f"rho must be >= 0, got {rho}")
    p_hat, p = ad._wrap(p_hat), ad._wrap(p)
    _check_same("relaxed_motion_loss", p_hat, p)
    dist = _joint_l1(p_hat, p)
    if rho == 0:
        return dist.mean()
    return ad.relu(dist - rho).mean()


def _series(p):
    """(..., T, J, 3) -> (N, T) with one row per joint coordinate."""
    nd = p.ndim
    axes = tuple(range(nd - 3)) + (nd - 2, nd - 1, nd - 3)
    moved = ad.transpose(p, axes)
    return moved.reshape(-1, p.shape[-3])


def stft_loss(p_hat, p, window=STFT_WINDOW, hop=STFT_HOP):
    p_hat, p = ad._wrap(p_hat), ad._wrap(p)
    _check_same("stft_loss", p_hat, p)
    if p.shape[-3] < window:
        raise ValueError(f"stft_loss needs at least {window} frames, got {p.shape[-3]}")
    a = log_stft_magnitude_t(_series(p_hat), window, hop)
    b = log_stft_magnitude_t(_series(p), window, hop)
    return ad.absolute(a - b).mean()


def ssim_t(p_hat, p):
    """Mean SSIM over joint coordinates with statistics taken across time.

    With C3 = C2 / 2 the contrast and structure terms multiply out to
    ``(2 cov + C2) / (var + var_hat + C2)``, which avoids differentiating a
    square root at zero variance.
    """
    x, y = _series(ad._wrap(p)), _series(ad._wrap(p_hat))
    T = x.shape[-1]
    if T < 2:
        raise ValueError("SSIM needs at least 2 frames")
    mx = x.mean(axis=-1, keepdims=True)
    my = y.mean(axis=-1, keepdims=True)
    dx, dy = x - mx, y - my
    vx = (dx * dx).sum(axis=-1) * (1.0 / (T - 1))
    vy = (dy * dy).sum(axis=-1) * (1.0 / (T - 1))
    cov = (dx * dy).sum(axis=-1) * (1.0 / (T - 1))
    mx, my = mx.reshape(-1), my.reshape(-1)
    lum = (mx * my * 2.0 + SSIM_C1) / (mx * mx + my * my + SSIM_C1)
    cs = (cov * 2.0 + SSIM_C2) / (vx + vy + SSIM_C2)
    return (lum * cs).mean()


def ssim_loss(p_hat, p):
    p_hat, p = ad._wrap(p_hat), ad._wrap(p)
    _check_same("ssim_loss", p_hat, p)
    return 1.0 - ssim_t(p_hat, p)


def lpips_loss(rot6d_hat, rot6d, extractor):
    """Sum over extractor blocks of the per-frame squared feature distance.

    ``rot6d_*`` are (B, T, J, 6) tensors; ``extractor`` is a trained
    :class:`gesturelab.metrics.FeatureExtractor`.
    """
    rot6d_hat, rot6d = ad._wrap(rot6d_hat), ad._wrap(rot6d)
    _check_same("lpips_loss", rot6d_hat, rot6d)
    if extractor is None or not extractor.trained:
        raise ValueError("lpips_loss requires a trained feature extractor")
    fa = extractor.block_features_t(rot6d_hat)
    fb = extractor.block_features_t(rot6d)
    total = None
    for a, b in zip(fa, fb):
        d = a - b
        term = (d * d).sum(axis=1).mean()  # channels -> per-frame distance, averaged over (B, T)
        total = term if total is None else total + term
    return total


def alignment_loss(S_A, S_M):
    return _mean_l1("alignment_loss", S_A, S_M)


def bicycle_code_loss(I_hat, I):
    return _mean_l1("bicycle_code_loss", I_hat, I)


def kl_divergence(mu, log_var, axis=1):
    """Closed-form KL(N(mu, diag(exp(log_var))) || N(0, I)).

    ``axis`` holds the latent dimension k; the result averages over all other
    axes (frames and batch).
    """
    mu, log_var = ad._wrap(mu), ad._wrap(log_var)
    _check_same("kl_divergence", mu, log_var)
    per = (ad.exp(log_var) + mu * mu - 1.0 - log_var).sum(axis=axis) * 0.5
    return per.mean()


def diversity_loss(p1, p2, clamp_max=50.0):
    """Negative position distance between two sampled motions, floored at ``-clamp_max``."""
    p1, p2 = ad._wrap(p1), ad._wrap(p2)
    _check_same("diversity_loss", p1, p2)
    return -ad.clamp(position_loss(p1, p2), hi=clamp_max)
