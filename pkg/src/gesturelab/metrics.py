"""Evaluation metrics, the learned motion feature extractor and the noise experiment.

Positions are numpy arrays laid out (..., T, J, d) in cm.  Pairwise metrics
(diversity, multimodality) keep the ``N * ceil(N / 2)`` normalization used
in the published tables rather than the true pair count.
"""

import json
import math
import time
from dataclasses import asdict, dataclass, field, fields

import numpy as np

from . import autodiff as ad
from .kinematics import (
    euler_xyz_to_rotmat,
    forward_kinematics,
    forward_kinematics_t,
    identity_sixd,
    rotmat_to_euler_xyz,
    rotmat_to_sixd,
    sixd_to_rotmat,
    sixd_to_rotmat_t,
)
from .losses import LossWeights, MotionPrediction, motion_reconstruction_loss
from .nn import TCN, Adam, Conv1d, Module
from .signal import STFT_HOP, STFT_WINDOW, log_stft_magnitude

REFERENCE_WRIST_CM = 120.64
SSIM_C1 = 0.01 ** 2
SSIM_C2 = 0.03 ** 2
FID_BLOCK = 3  # zero-based index of the 4th residual block


class TrainingError(RuntimeError):
    pass


def _check_pair(name, a, b):
    a, b = np.asarray(a, dtype=np.float64), np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise ValueError(f"{name}: shape mismatch {a.shape} vs {b.shape}")
    return a, b


# ---------------------------------------------------------------------------
# Point-wise and structural similarity
# ---------------------------------------------------------------------------

def metric_l1(p_hat, p):
    p_hat, p = _check_pair("metric_l1", p_hat, p)
    return float(np.abs(p_hat - p).sum(-1).mean())


def metric_l1_normalized(p_hat, p, wrist_distance, reference=REFERENCE_WRIST_CM):
    """L1 rescaled to a reference skeleton by wrist-to-wrist length."""
    if wrist_distance <= 0:
        raise ValueError("wrist distance must be positive")
    return metric_l1(p_hat, p) * reference / wrist_distance


def metric_pck(p_hat, p, delta=0.2, unit=1.0):
    """Fraction of (frame, joint) pairs whose Euclidean error, in ``unit``s, is below ``delta``."""
    if delta <= 0:
        raise ValueError("PCK threshold must be positive")
    p_hat, p = _check_pair("metric_pck", p_hat, p)
    dist = np.linalg.norm(p_hat - p, axis=-1) / unit
    return float(np.mean(dist < delta))


def metric_speed_accel(p_hat, p):
    p_hat, p = _check_pair("metric_speed_accel", p_hat, p)
    if p.shape[-3] < 3:
        raise ValueError(f"speed/acceleration need at least 3 frames, got {p.shape[-3]}")
    v_hat, v = np.diff(p_hat, axis=-3), np.diff(p, axis=-3)
    a_hat, a = np.diff(v_hat, axis=-3), np.diff(v, axis=-3)
    return float(np.abs(v_hat - v).sum(-1).mean()), float(np.abs(a_hat - a).sum(-1).mean())


def _series(p):
    """Root-relative joint coordinates as (series, time) rows.

    Spectral and structural scores depend on absolute offsets, so joints are
    expressed relative to the root before comparison; that keeps every metric
    invariant to a global translation shared by both inputs.
    """
    p = p - p[..., :1, :]
    return np.moveaxis(p, -3, -1).reshape(-1, p.shape[-3])


def metric_stft(p_hat, p, window=STFT_WINDOW, hop=STFT_HOP):
    p_hat, p = _check_pair("metric_stft", p_hat, p)
    return float(np.abs(log_stft_magnitude(_series(p_hat), window, hop) - log_stft_magnitude(_series(p), window, hop)).mean())


def metric_ssim(p_hat, p):
    """Motion SSIM: statistics across time per joint coordinate, averaged."""
    p_hat, p = _check_pair("metric_ssim", p_hat, p)
    x, y = _series(p), _series(p_hat)
    T = x.shape[-1]
    if T < 2:
        raise ValueError("SSIM needs at least 2 frames")
    mx, my = x.mean(-1), y.mean(-1)
    dx, dy = x - mx[:, None], y - my[:, None]
    vx, vy = (dx * dx).sum(-1) / (T - 1), (dy * dy).sum(-1) / (T - 1)
    cov = (dx * dy).sum(-1) / (T - 1)
    lum = (2 * mx * my + SSIM_C1) / (mx ** 2 + my ** 2 + SSIM_C1)
    cs = (2 * cov + SSIM_C2) / (vx + vy + SSIM_C2)
    return float(np.mean(lum * cs))


# ---------------------------------------------------------------------------
# Pairwise diversity metrics
# ---------------------------------------------------------------------------

def pairwise_l1(motions):
    """Printed normalization: sum over pairs of L1 / (N * ceil(N / 2))."""
    N = len(motions)
    total = 0.0
    for a in range(N):
        for b in range(a + 1, N):
            total += metric_l1(motions[a], motions[b])
    return total / (N * math.ceil(N / 2))


def metric_diversity(motion, clip_len=50):
    """Pairwise L1 among non-overlapping ``clip_len``-frame clips of one motion (T, J, d)."""
    motion = np.asarray(motion, dtype=np.float64)
    T = motion.shape[0]
    if T < 2 * clip_len:
        raise ValueError(f"diversity needs at least {2 * clip_len} frames, got {T}")
    N = T // clip_len
    return pairwise_l1([motion[i * clip_len:(i + 1) * clip_len] for i in range(N)])


def metric_multimodality(runs):
    """Pairwise L1 among motions generated for the same audio."""
    runs = [np.asarray(r, dtype=np.float64) for r in runs]
    if len(runs) < 2:
        raise ValueError("multimodality needs at least 2 runs")
    if any(r.shape != runs[0].shape for r in runs):
        raise ValueError("multimodality runs must have equal shapes")
    return pairwise_l1(runs)


# ---------------------------------------------------------------------------
# Feature extractor (LPIPS / FID)
# ---------------------------------------------------------------------------

@dataclass
class ExtractorConfig:
    n_joints: int = 8
    encoder_channels: list = field(default_factory=lambda: [32, 64, 96, 128, 32])
    decoder_channels: list = field(default_factory=lambda: [32, 64, 64, 32, 32])
    kernel: int = 3


class FeatureExtractor(Module):
    """Convolutional motion autoencoder on 6D rotations.

    Encoder and decoder are five residual blocks each (dilations 1..16,
    receptive field 125 frames).  LPIPS uses all encoder block outputs; FID
    uses the time-averaged output of the 4th block.
    """

    def __init__(self, cfg=None, seed=0):
        self.cfg = cfg or ExtractorConfig()
        rng = np.random.default_rng(seed)
        J = self.cfg.n_joints
        self.encoder = TCN(J * 6, self.cfg.encoder_channels, self.cfg.kernel, rng)
        self.decoder = TCN(self.encoder.out_channels, self.cfg.decoder_channels, self.cfg.kernel, rng)
        self.out = Conv1d(self.decoder.out_channels, J * 6, 1, rng=rng)
        self.rest = np.tile(identity_sixd(), J)[None, :, None]
        self.trained = False

    @property
    def feature_dim(self):
        return self.cfg.encoder_channels[FID_BLOCK]

    def _input(self, rot6d):
        r = ad._wrap(rot6d)
        if r.ndim == 3:
            r = r.reshape(1, *r.shape)
        B, T = r.shape[:2]
        return r.reshape(B, T, -1).transpose(0, 2, 1)

    def block_features_t(self, rot6d):
        return self.encoder(self._input(rot6d), return_all=True)

    def reconstruct_t(self, rot6d):
        h = self.encoder(self._input(rot6d))
        out = self.out(self.decoder(h)) + self.rest
        B, C, T = out.shape
        return out.transpose(0, 2, 1).reshape(B, T, self.cfg.n_joints, 6)

    def _require_trained(self):
        if not self.trained:
            raise ValueError("feature extractor is untrained")

    def pooled_features(self, rot6d):
        """Time-averaged features of every block, list of (B, C) arrays."""
        self._require_trained()
        return [f.data.mean(axis=-1) for f in self.block_features_t(rot6d)]

    def fid_features(self, rot6d):
        return self.pooled_features(rot6d)[FID_BLOCK]

    def save(self, path):
        ad.save_checkpoint(path, self.state_dict(), {"extractor_config": asdict(self.cfg), "trained": self.trained})

    @classmethod
    def load(cls, path):
        params, meta = ad.load_checkpoint(path)
        ext = cls(ExtractorConfig(**meta["extractor_config"]))
        ext.load_state_dict(params)
        ext.trained = bool(meta.get("trained", False))
        return ext


def train_feature_extractor(rotations, skeleton, steps=600, batch_size=8, crop=64, lr=2e-3, seed=0,
                            holdout=None, max_pos_l1=None, cfg=None, log=None):
    """Fit the extractor as a motion autoencoder with the motion reconstruction loss.

    ``rotations`` is (N, T, J, 6).  Returns the trained extractor; per-step
    losses are appended to ``log`` when given.  If ``holdout`` rotations and
    ``max_pos_l1`` are provided, the held-out reconstruction L1 must fall
    below it.
    """
    rotations = np.asarray(rotations, dtype=np.float64)
    N, T = rotations.shape[:2]
    cfg = cfg or ExtractorConfig(n_joints=skeleton.n_joints)
    ext = FeatureExtractor(cfg, seed)
    opt = Adam(ext.parameters(), lr=lr)
    rng = np.random.default_rng(seed)
    weights = LossWeights()
    crop = min(crop, T)
    history = log if log is not None else []
    t0 = time.time()
    for step in range(steps):
        idx = rng.integers(0, N, batch_size)
        start = rng.integers(0, T - crop + 1, batch_size)
        batch = np.stack([rotations[i, s:s + crop] for i, s in zip(idx, start)])
        R = sixd_to_rotmat(batch)
        target = MotionPrediction(ad.Tensor(forward_kinematics(skeleton, R)), ad.Tensor(R))
        out = ext.reconstruct_t(ad.Tensor(batch))
        R_hat = sixd_to_rotmat_t(out)
        pred = MotionPrediction(forward_kinematics_t(skeleton, R_hat), R_hat)
        loss = motion_reconstruction_loss(pred, target, weights)
        if not np.isfinite(loss.item()):
            raise TrainingError(f"extractor training diverged at step {step} (seed {seed}, lr {lr})")
        opt.zero_grad()
        loss.backward()
        opt.step()
        history.append({"step": step, "loss": loss.item(), "time": time.time() - t0})
    ext.trained = True
    if holdout is not None:
        ext.holdout_pos_l1 = extractor_reconstruction_l1(ext, holdout, skeleton)
        if max_pos_l1 is not None and ext.holdout_pos_l1 > max_pos_l1:
            raise TrainingError(
                f"extractor held-out position L1 {ext.holdout_pos_l1:.3f} cm exceeds {max_pos_l1} cm "
                f"(seed {seed}, steps {steps}, lr {lr})"
            )
    return ext


def extractor_reconstruction_l1(ext, rotations, skeleton):
    rotations = np.asarray(rotations, dtype=np.float64)
    out = ext.reconstruct_t(ad.Tensor(rotations)).data
    return metric_l1(forward_kinematics(skeleton, out), forward_kinematics(skeleton, rotations))


def metric_lpips(rot6d_hat, rot6d, extractor):
    """Sum over blocks of squared distance between time-pooled features, averaged over clips."""
    rot6d_hat, rot6d = _check_pair("metric_lpips", rot6d_hat, rot6d)
    fa, fb = extractor.pooled_features(rot6d_hat), extractor.pooled_features(rot6d)
    return float(sum(((a - b) ** 2).sum(-1).mean() for a, b in zip(fa, fb)))


def _sqrtm_psd(S):
    w, V = np.linalg.eigh((S + S.T) / 2)
    return (V * np.sqrt(np.maximum(w, 0.0))) @ V.T


def frechet_distance(feat_a, feat_b):
    """Fréchet distance between Gaussian fits of two feature sets (n, d).

    ``Tr((S_a S_b)^1/2)`` is evaluated as the trace of the square root of the
    symmetric ``S_a^1/2 S_b S_a^1/2``; negative eigenvalues are clamped to 0.
    """
    feat_a, feat_b = np.asarray(feat_a, dtype=np.float64), np.asarray(feat_b, dtype=np.float64)
    if feat_a.shape[0] < 2 or feat_b.shape[0] < 2:
        raise ValueError("Fréchet distance needs at least 2 samples per set")
    mu_a, mu_b = feat_a.mean(0), feat_b.mean(0)
    S_a = np.atleast_2d(np.cov(feat_a, rowvar=False))
    S_b = np.atleast_2d(np.cov(feat_b, rowvar=False))
    root_a = _sqrtm_psd(S_a)
    cross = np.linalg.eigvalsh(root_a @ S_b @ root_a)
    tr_cross = np.sqrt(np.maximum(cross, 0.0)).sum()
    fd = float(((mu_a - mu_b) ** 2).sum() + np.trace(S_a) + np.trace(S_b) - 2.0 * tr_cross)
    return max(fd, 0.0)


def metric_fid(set_hat, set_ref, extractor):
    """FID between two sets of 6D motions (N, T, J, 6) using 4th-block features."""
    set_hat, set_ref = np.asarray(set_hat), np.asarray(set_ref)
    if len(set_hat) < 2 or len(set_ref) < 2:
        raise ValueError("FID needs at least 2 motions per set")
    return frechet_distance(extractor.fid_features(set_hat), extractor.fid_features(set_ref))


# ---------------------------------------------------------------------------
# Reports
# ---------------------------------------------------------------------------

@dataclass
class MetricReport:
    """Similarity / diversity metrics; positions in cm unless noted.

    pck is a fraction, ssim is unitless, stft is a mean log-magnitude gap,
    lpips and fid are feature-space distances.  Missing entries are None.
    """

    pos_l1: float = None
    pos_l1_normalized: float = None
    speed_l1: float = None
    accel_l1: float = None
    pck: float = None
    stft: float = None
    ssim: float = None
    lpips: float = None
    fid: float = None
    diversity: float = None
    multimodality: float = None

    def to_dict(self):
        return asdict(self)

    def to_json(self, **extra):
        return json.dumps({**extra, "metrics": self.to_dict()}, indent=2, sort_keys=True)

    @classmethod
    def mean(cls, reports):
        out = {}
        for f in fields(cls):
            vals = [getattr(r, f.name) for r in reports if getattr(r, f.name) is not None]
            out[f.name] = float(np.mean(vals)) if vals else None
        return cls(**out)


COLUMNS = [
    ("pos_l1", "Pos.L1", "{:.4f}"),
    ("pos_l1_normalized", "Pos.L1*", "{:.4f}"),
    ("speed_l1", "Speed", "{:.4f}"),
    ("accel_l1", "Acc.", "{:.4f}"),
    ("pck", "PCK", "{:.4f}"),
    ("stft", "STFT", "{:.4f}"),
    ("ssim", "SSIM", "{:.4f}"),
    ("lpips", "LPIPS", "{:.4f}"),
    ("fid", "FID", "{:.4f}"),
    ("diversity", "Diversity", "{:.4f}"),
    ("multimodality", "MM", "{:.4f}"),
]


def format_table(rows, label="Method"):
    """Aligned text table from ``[(row_label, MetricReport), ...]``."""
    header = [label] + [c[1] for c in COLUMNS]
    body = []
    for name, rep in rows:
        cells = [str(name)]
        for key, _, fmt in COLUMNS:
            v = getattr(rep, key)
            cells.append("-" if v is None else fmt.format(v))
        body.append(cells)
    widths = [max(len(r[i]) for r in [header] + body) for i in range(len(header))]
    lines = ["  ".join(h.ljust(w) if i == 0 else h.rjust(w) for i, (h, w) in enumerate(zip(header, widths)))]
    lines.append("  ".join("-" * w for w in widths))
    for r in body:
        lines.append("  ".join(c.ljust(w) if i == 0 else c.rjust(w) for i, (c, w) in enumerate(zip(r, widths))))
    return "\n".join(lines)


def evaluate(pred, target, skeleton=None, mode="3d", extractor=None, pck_delta=0.2, pck_unit=100.0,
             diversity_clip=50, fid_clip=64):
    """Similarity metrics for one prediction/target pairing.

    ``pred``/``target`` are (T, J, 6) rotations in 3D mode or (T, J, d)
    positions in 2D mode (a leading batch axis is allowed).  PCK distances
    are divided by ``pck_unit`` (cm per pose unit) before comparing with
    ``pck_delta``.  FID compares non-overlapping ``fid_clip``-frame windows
    and is reported only when each side yields at least two of them.
    """
    pred, target = _check_pair("evaluate", pred, target)
    if mode == "3d":
        if skeleton is None:
            raise ValueError("3D evaluation needs a skeleton")
        p_hat, p = forward_kinematics(skeleton, pred), forward_kinematics(skeleton, target)
    else:
        p_hat, p = pred, target
    speed, accel = metric_speed_accel(p_hat, p)
    rep = MetricReport(
        pos_l1=metric_l1(p_hat, p),
        speed_l1=speed,
        accel_l1=accel,
        pck=metric_pck(p_hat, p, pck_delta, pck_unit),
        stft=metric_stft(p_hat, p) if p.shape[-3] >= STFT_WINDOW else None,
        ssim=metric_ssim(p_hat, p),
    )
    if skeleton is not None and mode == "3d":
        rep.pos_l1_normalized = metric_l1_normalized(p_hat, p, skeleton.wrist_distance())
    seqs = p_hat.reshape((-1,) + p_hat.shape[-3:])
    if seqs.shape[1] >= 2 * diversity_clip:
        rep.diversity = float(np.mean([metric_diversity(s, diversity_clip) for s in seqs]))
    if extractor is not None and mode == "3d":
        rep.lpips = metric_lpips(pred, target, extractor)
        wa, wb = _windows(pred, fid_clip), _windows(target, fid_clip)
        if len(wa) >= 2:
            rep.fid = metric_fid(wa, wb, extractor)
    return rep


def _windows(rot, clip):
    rot = rot.reshape((-1,) + rot.shape[-3:])
    n = rot.shape[1] // clip
    return np.array([r[i * clip:(i + 1) * clip] for r in rot for i in range(n)])


# ---------------------------------------------------------------------------
# Euler-noise sensitivity experiment
# ---------------------------------------------------------------------------

def add_euler_noise(rotations, sigma_deg, rng):
    """Perturb every joint's intrinsic XYZ Euler angles with N(0, sigma^2) degrees."""
    R = sixd_to_rotmat(rotations)
    eul = rotmat_to_euler_xyz(R)
    eul = eul + np.deg2rad(sigma_deg) * rng.standard_normal(eul.shape)
    return rotmat_to_sixd(euler_xyz_to_rotmat(eul))


def noise_experiment(rotations, skeleton, sigmas=(1.0, 5.0), seeds=range(20), extractor=None, **eval_kw):
    """Metrics of Euler-noised ground truth against the clean motion, per sigma.

    Returns ``[(sigma, MetricReport averaged over seeds), ...]``.
    """
    rotations = np.asarray(rotations, dtype=np.float64)
    rows = []
    for sigma in sigmas:
        reps = []
        for seed in seeds:
            noisy = add_euler_noise(rotations, sigma, np.random.default_rng(seed))
            reps.append(evaluate(noisy, rotations, skeleton, "3d", extractor, **eval_kw))
        rows.append((float(sigma), MetricReport.mean(reps)))
    return rows
