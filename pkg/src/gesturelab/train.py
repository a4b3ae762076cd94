"""Training loop for the split-latent model.

One step runs the five training flows on a batch of (audio, motion) pairs:

1. ``g(S_M, I_M)``   reconstruct the motion from its own codes
2. ``g(S_A, I_M)``   reconstruct it from the audio's shared code
3. ``g(S_A, I_R1)``  relaxed reconstruction from a random specific code
4. ``I_R1 -> g -> f_M`` bicycle consistency on the specific code
5. ``g(S_A, I_R2)``  diversity between two random specific codes

plus shared-code alignment and KL terms on every Gaussian code.
"""

import csv
import time
from dataclasses import asdict, dataclass, field, fields

import numpy as np

from . import autodiff as ad
from .kinematics import forward_kinematics, forward_kinematics_t, sixd_to_rotmat, sixd_to_rotmat_t
from .losses import (
    LossWeights,
    MotionPrediction,
    alignment_loss,
    bicycle_code_loss,
    diversity_loss,
    kl_divergence,
    lpips_loss,
    motion_reconstruction_loss,
    relaxed_motion_loss,
    ssim_loss,
    stft_loss,
)
from .model import ModelConfig, SpecificCodeStats, SplitLatentModel
from .nn import Adam


class TrainingError(RuntimeError):
    """Training produced a non-finite loss or cannot proceed."""


@dataclass
class TrainConfig:
    batch_size: int = 8
    learning_rate: float = 2e-3
    lr_final: float = 0.05        # cosine decay to lr_final * learning_rate; 1.0 keeps it constant
    steps: int = 3000
    crop: int = 64
    seed: int = 0
    weights: LossWeights = field(default_factory=LossWeights.desk)
    relaxed: bool = True
    bicycle: bool = True
    diversity: bool = True
    stft: bool = False
    ssim: bool = False
    lpips: bool = False
    stats_momentum: float = 0.95
    log_every: int = 10

    def __post_init__(self):
        if isinstance(self.weights, dict):
            self.weights = LossWeights(**self.weights)
        for name in ("batch_size", "steps", "crop", "log_every"):
            if int(getattr(self, name)) < 1:
                raise ValueError(f"{name} must be >= 1")
        if not self.learning_rate > 0:
            raise ValueError("learning_rate must be > 0")
        if not 0 < self.lr_final <= 1:
            raise ValueError("lr_final must lie in (0, 1]")
        if self.crop < 3:
            raise ValueError("crop must cover at least 3 frames")
        if not 0 <= self.stats_momentum < 1:
            raise ValueError("stats_momentum must lie in [0, 1)")

    def to_dict(self):
        return asdict(self)

    @classmethod
    def from_dict(cls, d):
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ValueError(f"unknown training options: {sorted(unknown)}")
        return cls(**d)


# Component toggles for the ablation ladder.  Each entry is
# (model options, training options).
METHODS = {
    "baseline": ({"split": False, "mapping": False}, {"relaxed": False, "bicycle": False, "diversity": False}),
    "split": ({"split": True, "mapping": False}, {"relaxed": False, "bicycle": False, "diversity": False}),
    "relaxed": ({"split": True, "mapping": False}, {"relaxed": True, "bicycle": False, "diversity": False}),
    "mapping": ({"split": True, "mapping": True}, {"relaxed": True, "bicycle": False, "diversity": False}),
    "bicycle": ({"split": True, "mapping": True}, {"relaxed": True, "bicycle": True, "diversity": False}),
    "full": ({"split": True, "mapping": True}, {"relaxed": True, "bicycle": True, "diversity": True}),
}


def method_configs(method, model_cfg=None, train_cfg=None):
    """Copies of the given configs with the ablation toggles of ``method`` applied."""
    if method not in METHODS:
        raise ValueError(f"unknown method {method!r}; choose from {sorted(METHODS)}")
    m_opts, t_opts = METHODS[method]
    mc = asdict(model_cfg) if model_cfg is not None else asdict(ModelConfig())
    mc.update(m_opts)
    tc = train_cfg.to_dict() if train_cfg is not None else TrainConfig().to_dict()
    tc.update(t_opts)
    return ModelConfig(**mc), TrainConfig.from_dict(tc)


# ---------------------------------------------------------------------------
# Batches and targets
# ---------------------------------------------------------------------------

def model_motion(batch, model_cfg):
    """The motion representation the model consumes: 6D rotations or positions."""
    if model_cfg.mode == "3d":
        return batch["rotations"]
    return batch["positions"][..., :model_cfg.pos_dim]


def target_of(batch, model_cfg):
    if model_cfg.mode == "3d":
        R = sixd_to_rotmat(batch["rotations"])
        return MotionPrediction(ad.Tensor(batch["positions"]), ad.Tensor(R))
    return MotionPrediction(ad.Tensor(batch["positions"][..., :model_cfg.pos_dim]))


def prediction_of(out, model, skeleton):
    """Decoder output (B, T, J, 6|D) -> MotionPrediction via FK in 3D mode."""
    if model.cfg.mode == "3d":
        R = sixd_to_rotmat_t(out)
        return MotionPrediction(forward_kinematics_t(skeleton, R), R)
    return MotionPrediction(out)


def positions_of(motion, model_cfg, skeleton):
    """Numpy positions for a generated motion array."""
    if model_cfg.mode == "3d":
        return forward_kinematics(skeleton, motion)
    return motion


# ---------------------------------------------------------------------------
# One step
# ---------------------------------------------------------------------------

def compute_losses(model, batch, cfg, rng, skeleton, extractor=None):
    """Loss terms (name -> scalar Tensor, already weighted) and their total.

    A non-finite intermediate raises FloatingPointError naming the loss term
    whose forward pass produced it.
    """
    stage = ["encode"]
    try:
        return _compute_losses(model, batch, cfg, rng, skeleton, extractor, stage)
    except FloatingPointError as exc:
        raise FloatingPointError(f"term '{stage[0]}': {exc}") from exc


def _compute_losses(model, batch, cfg, rng, skeleton, extractor, stage):
    w = cfg.weights
    mcfg = model.cfg
    motion = model_motion(batch, mcfg)
    target = target_of(batch, mcfg)
    terms = {}

    S_A = model.encode_audio(batch["audio"], rng)
    S_M, I_M = model.encode_motion(motion, rng)
    I_M_sample = I_M.sample if I_M is not None else None

    def recon(name, out):
        stage[0] = name
        pred = prediction_of(out, model, skeleton)
        terms[name] = motion_reconstruction_loss(pred, target, w)
        if cfg.stft and w.lambda_stft > 0:
            terms[name + "_stft"] = stft_loss(pred.positions, target.positions) * w.lambda_stft
        if cfg.ssim and w.lambda_ssim > 0:
            terms[name + "_ssim"] = ssim_loss(pred.positions, target.positions) * w.lambda_ssim
        if cfg.lpips and w.lambda_lpips > 0 and mcfg.mode == "3d":
            terms[name + "_lpips"] = lpips_loss(out, ad.Tensor(batch["rotations"]), extractor) * w.lambda_lpips
        return pred

    stage[0] = "rec_motion"
    recon("rec_motion", model.decode(S_M.sample, I_M_sample))
    stage[0] = "rec_audio"
    recon("rec_audio", model.decode(S_A.sample, I_M_sample))
    if w.lambda_align > 0:
        terms["align"] = alignment_loss(S_A.mean, S_M.mean) * w.lambda_align

    # (code, log_var lives in the DCT coefficient domain)
    kl_codes = [(S_A, mcfg.dct), (S_M, mcfg.dct)] + ([(I_M, mcfg.dct)] if I_M is not None else [])
    if mcfg.split:
        T = motion.shape[1]
        B = motion.shape[0]
        need_random = cfg.relaxed or cfg.bicycle or cfg.diversity
        if need_random and mcfg.mapping and model.stats is None:
            model.stats = SpecificCodeStats(*specific_stats_of(I_M))
        if need_random:
            stage[0] = "relaxed"
            I_R1 = model.sample_specific_code(T, rng, B, return_code=True)
            if I_R1.log_var is not None:
                kl_codes.append((I_R1, False))
            out1 = model.decode(S_A.sample, I_R1.sample)
            pred1 = prediction_of(out1, model, skeleton)
            if cfg.relaxed:
                terms["relaxed"] = relaxed_motion_loss(pred1.positions, target.positions, w.rho) * w.lambda_pos
            if cfg.bicycle and w.lambda_cyc > 0:
                stage[0] = "cyc"
                _, I_hat = model.encode_motion(out1)
                terms["cyc"] = bicycle_code_loss(I_hat.mean, I_R1.sample) * w.lambda_cyc
            if cfg.diversity and w.lambda_ds > 0:
                stage[0] = "ds"
                I_R2 = model.sample_specific_code(T, rng, B)
                pred2 = prediction_of(model.decode(S_A.sample, I_R2), model, skeleton)
                terms["ds"] = diversity_loss(pred1.positions, pred2.positions, w.clamp_max) * w.lambda_ds
    if w.lambda_kl > 0:
        stage[0] = "kl"
        kl = None
        for code, in_dct in kl_codes:
            if code.log_var is None:
                continue
            term = kl_divergence(_coeff_mean(code) if in_dct else code.mean, code.log_var)
            kl = term if kl is None else kl + term
        if kl is not None:
            terms["kl"] = kl * w.lambda_kl

    total = None
    for v in terms.values():
        total = v if total is None else total + v
    return terms, total, I_M


def _coeff_mean(code):
    """DCT-domain mean of a time-domain code (KL is taken in the coefficient domain)."""
    from .signal import dct_t

    return dct_t(code.mean)


def specific_stats_of(I_M):
    """Per-channel mean and variance of the codes fed to the decoder.

    The variance combines the spread of the posterior means with the mean
    posterior variance, i.e. the variance of reparameterized samples.
    """
    mean = I_M.mean.data
    B, C, T = mean.shape
    flat = np.moveaxis(mean, 1, 0).reshape(C, -1)
    var = flat.var(axis=1)
    if I_M.log_var is not None:
        lv = I_M.log_var.data
        var = var + np.exp(np.moveaxis(lv, 1, 0).reshape(C, -1)).mean(axis=1)
    return flat.mean(axis=1), np.maximum(var, 1e-6)


def train_step(model, optimizer, batch, cfg, rng, skeleton, step=0, extractor=None):
    """One optimizer step; returns a dict of float loss terms including ``total``."""
    try:
        terms, total, I_M = compute_losses(model, batch, cfg, rng, skeleton, extractor)
    except FloatingPointError as exc:
        raise TrainingError(f"non-finite value in the forward pass at step {step} (seed {cfg.seed}): {exc}") from exc
    values = {k: v.item() for k, v in terms.items()}
    for k, v in values.items():
        if not np.isfinite(v):
            raise TrainingError(f"loss term '{k}' is non-finite ({v}) at step {step} (seed {cfg.seed})")
    optimizer.zero_grad()
    try:
        total.backward()
    except FloatingPointError as exc:
        raise TrainingError(f"non-finite gradient at step {step} (seed {cfg.seed}): {exc}") from exc
    for p in optimizer.params:
        if p.grad is not None and not np.all(np.isfinite(p.grad)):
            raise TrainingError(f"non-finite gradient at step {step} (seed {cfg.seed})")
    optimizer.step()
    if I_M is not None and model.cfg.mapping:
        mean, var = specific_stats_of(I_M)
        if model.stats is None:
            model.stats = SpecificCodeStats(mean, var)
        else:
            m = cfg.stats_momentum
            model.stats = SpecificCodeStats(m * model.stats.mean + (1 - m) * mean, m * model.stats.var + (1 - m) * var)
    values["total"] = total.item()
    return values


def recompute_specific_stats(model, dataset, chunk=None):
    """Exact I_M statistics over every training (sequence, style) pair."""
    if not model.cfg.mapping:
        return None
    L = model.cfg.dct_length if model.cfg.dct else (chunk or dataset.n_frames)
    batch = {"rotations": dataset.rotations.reshape((-1,) + dataset.rotations.shape[2:]),
             "positions": dataset.positions.reshape((-1,) + dataset.positions.shape[2:])}
    motion = model_motion(batch, model.cfg)
    means, variances = [], []
    for start in range(0, motion.shape[1] - L + 1, L):
        _, I = model.encode_motion(motion[:, start:start + L])
        m, v = specific_stats_of(I)
        means.append(m)
        variances.append(v + m ** 2)
    mean = np.mean(means, axis=0)
    var = np.mean(variances, axis=0) - mean ** 2
    model.stats = SpecificCodeStats(mean, np.maximum(var, 1e-6))
    return model.stats


@dataclass
class TrainResult:
    model: SplitLatentModel
    log: list
    seconds: float
    train_config: TrainConfig

    def write_log(self, path):
        write_log_csv(path, self.log)


def write_log_csv(path, log):
    keys = []
    for row in log:
        for k in row:
            if k not in keys:
                keys.append(k)
    with open(path, "w", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=keys)
        writer.writeheader()
        for row in log:
            writer.writerow(row)


def learning_rate_at(cfg, step):
    """Cosine schedule from ``learning_rate`` down to ``lr_final * learning_rate``."""
    f = cfg.lr_final
    if f == 1.0 or cfg.steps < 2:
        return cfg.learning_rate
    return cfg.learning_rate * (f + (1 - f) * 0.5 * (1 + np.cos(np.pi * step / (cfg.steps - 1))))


def train(dataset, model_cfg=None, train_cfg=None, extractor=None, progress=None):
    """Train a model on a :class:`SyntheticDataset`; fully determined by ``train_cfg.seed``.

    Every ``log_every`` steps a row (step, elapsed seconds and all loss
    terms) is appended to the log.  After the loop the specific-code
    statistics are recomputed over the whole training set.
    """
    model_cfg = model_cfg or ModelConfig(n_joints=dataset.skeleton.n_joints)
    cfg = train_cfg or TrainConfig()
    if model_cfg.n_joints != dataset.skeleton.n_joints:
        raise ValueError(f"model expects {model_cfg.n_joints} joints, dataset has {dataset.skeleton.n_joints}")
    crop = model_cfg.dct_length if model_cfg.dct else cfg.crop
    if crop > dataset.n_frames:
        raise ValueError(f"crop {crop} exceeds the {dataset.n_frames}-frame sequences")
    if cfg.lpips and (extractor is None or not extractor.trained):
        raise ValueError("the LPIPS loss needs a trained feature extractor")
    model = SplitLatentModel(model_cfg, seed=cfg.seed)
    model.set_audio_normalization(dataset.audio)
    optimizer = Adam(model.parameters(), lr=cfg.learning_rate)
    data_rng = np.random.default_rng([cfg.seed, 1])
    noise_rng = np.random.default_rng([cfg.seed, 2])
    log = []
    t0 = time.time()
    for step in range(cfg.steps):
        optimizer.lr = learning_rate_at(cfg, step)
        batch = dataset.sample_batch(data_rng, cfg.batch_size, crop)
        values = train_step(model, optimizer, batch, cfg, noise_rng, dataset.skeleton, step, extractor)
        if step % cfg.log_every == 0 or step == cfg.steps - 1:
            row = {"step": step, "seconds": round(time.time() - t0, 3)}
            row.update(values)
            log.append(row)
            if progress is not None:
                progress(row)
    recompute_specific_stats(model, dataset)
    model.trained = True
    return TrainResult(model, log, time.time() - t0, cfg)


# ---------------------------------------------------------------------------
# Held-out evaluation helpers
# ---------------------------------------------------------------------------

def heldout_positions(model, dataset, seed=0, sample_shared=False):
    """Generated positions for every held-out audio: (N, T, J, d)."""
    out = model.generate(dataset.audio, seed=seed, sample_shared=sample_shared)
    return positions_of(out, model.cfg, dataset.skeleton)


def nearest_style_l1(p_hat, dataset):
    """Per-sequence L1 to the closest ground-truth style, averaged (cm)."""
    ref = dataset.positions if p_hat.shape[-1] == dataset.positions.shape[-1] else dataset.positions[..., :p_hat.shape[-1]]
    d = np.abs(p_hat[:, None] - ref).sum(-1).mean(axis=(-1, -2))
    return float(d.min(axis=1).mean())


def reconstruction_l1(model, dataset, zero_specific=False):
    """Mean position L1 of ``g(S_A, I_M)`` against every held-out pair (cm).

    With ``zero_specific`` the motion-specific code is replaced by zeros.
    """
    rots = dataset.rotations.reshape((-1,) + dataset.rotations.shape[2:])
    pos = dataset.positions.reshape((-1,) + dataset.positions.shape[2:])
    audio = np.repeat(dataset.audio, dataset.n_styles, axis=0)
    batch = {"rotations": rots, "positions": pos}
    motion = model_motion(batch, model.cfg)
    L = model.cfg.dct_length if model.cfg.dct else motion.shape[1]
    errs = []
    for start in range(0, motion.shape[1] - L + 1, L):
        sl = slice(start, start + L)
        S_A = model.encode_audio(audio[:, sl]).mean
        I = None
        if model.cfg.split:
            _, I_M = model.encode_motion(motion[:, sl])
            I = np.zeros_like(I_M.mean.data) if zero_specific else I_M.mean
        out = model.decode(S_A, I).data
        p_hat = positions_of(out, model.cfg, dataset.skeleton)
        p = pos[:, sl] if model.cfg.mode == "3d" else pos[:, sl, :, :model.cfg.pos_dim]
        errs.append(np.abs(p_hat - p).sum(-1).mean())
    return float(np.mean(errs))


def multimodality_of(model, dataset, n_runs=5, seed=0, sample_shared=True):
    """Average over held-out audio of pairwise L1 among ``n_runs`` generations."""
    from .metrics import metric_multimodality

    runs = [heldout_positions(model, dataset, seed=seed + r, sample_shared=sample_shared) for r in range(n_runs)]
    return float(np.mean([metric_multimodality([r[i] for r in runs]) for i in range(dataset.n_sequences)]))


def rho_sweep(dataset, heldout, rhos, model_cfg=None, train_cfg=None, extractor=None, progress=None):
    """Train one model per rho and report held-out metrics for each.

    Returns rows ``{"rho", "pos_l1", "nearest_l1", "multimodality", "seconds"}``.
    """
    base = train_cfg or TrainConfig()
    rows = []
    for rho in rhos:
        tc = base.to_dict()
        tc["weights"] = dict(tc["weights"], rho=float(rho))
        res = train(dataset, model_cfg, TrainConfig.from_dict(tc), extractor, progress)
        p_hat = heldout_positions(res.model, heldout, seed=base.seed)
        rows.append({
            "rho": float(rho),
            "pos_l1": reconstruction_l1(res.model, heldout),
            "nearest_l1": nearest_style_l1(p_hat, heldout),
            "multimodality": multimodality_of(res.model, heldout, seed=base.seed),
            "seconds": res.seconds,
        })
    return rows
