"""Experiment drivers shared by the CLI and the acceptance suite."""

import numpy as np

from . import autodiff as ad
from . import losses as L
from .kinematics import (
    forward_kinematics,
    forward_kinematics_t,
    geodesic_distance_t,
    sixd_to_rotmat,
    sixd_to_rotmat_t,
    upper_body_skeleton,
)
from .metrics import metric_l1
from .model import latent_dct_roundtrip
from .signal import dct_t, idct_t, log_stft_magnitude_t
from .train import TrainConfig, compute_losses, nearest_style_l1, positions_of

OP_TOLERANCE = 1e-4
LOSS_TOLERANCE = 1e-3


# ---------------------------------------------------------------------------
# Gradient checks
# ---------------------------------------------------------------------------

def _unit_rot6d(rng, shape):
    """Random well-conditioned 6D inputs (two roughly orthogonal columns)."""
    a = rng.standard_normal(shape + (3,))
    b = rng.standard_normal(shape + (3,))
    return np.concatenate([a, b], axis=-1)


def op_checks(rng):
    """(name, f, x) triples covering every differentiable primitive.

    Every constant is drawn once here so each ``f`` is a fixed function.
    """
    def r(*s):
        return rng.standard_normal(s)

    def pos(*s):
        return rng.uniform(0.5, 2.0, s)

    w, other, kernel = r(3, 4), r(3, 4), r(5, 3, 3)
    bias, row4, col4 = r(5), r(4), r(4)
    w43, w42, w234, w235 = r(4, 3), r(4, 2), r(2, 3, 4), r(2, 3, 5)
    w22, w38, w44, b245 = r(2, 2), r(3, 8), r(4, 4), r(2, 4, 5)
    w257, w254, x237 = r(2, 5, 7), r(2, 5, 4), r(2, 3, 7)
    w2433, w283, w216, w285 = r(2, 4, 3, 3), r(2, 8, 3), r(2, 16), r(2, 5 * 17)
    R_ref = sixd_to_rotmat(_unit_rot6d(rng, (4,)))
    skel = upper_body_skeleton()
    idx = np.array([0, 2, 2, 1])
    return [
        ("add", lambda t: ((t + other) * w).sum(), r(3, 4)),
        ("add_broadcast", lambda t: ((t + row4) * w).sum(), r(3, 1)),
        ("sub", lambda t: ((other - t) * w).sum(), r(3, 4)),
        ("mul", lambda t: (t * other).sum(), r(3, 4)),
        ("div", lambda t: (other / t).sum(), pos(3, 4)),
        ("power", lambda t: ad.power(t, 3).sum(), r(3, 4)),
        ("exp", lambda t: ad.exp(t).sum(), r(3, 4)),
        ("log", lambda t: ad.log(t).sum(), pos(3, 4)),
        ("sqrt", lambda t: ad.sqrt(t).sum(), pos(3, 4)),
        ("relu", lambda t: (ad.relu(t) * w).sum(), r(3, 4)),
        ("abs", lambda t: (ad.absolute(t) * w).sum(), r(3, 4)),
        ("clamp", lambda t: (ad.clamp(t, -0.5, 0.5) * w).sum(), r(3, 4)),
        ("acos", lambda t: ad.acos(t).sum(), rng.uniform(-0.9, 0.9, (3, 4))),
        ("sum_axis", lambda t: (t.sum(axis=0) * col4).sum(), r(3, 4)),
        ("mean", lambda t: (t.mean(axis=1, keepdims=True) * t).sum(), r(3, 4)),
        ("reshape", lambda t: (t.reshape(4, 3) * w43).sum(), r(3, 4)),
        ("transpose", lambda t: (t.transpose(1, 0) * w43).sum(), r(3, 4)),
        ("getitem_slice", lambda t: (t[1:, ::2] * w22).sum(), r(3, 4)),
        ("getitem_fancy", lambda t: (t[idx] * w44).sum(), r(3, 4)),
        ("concat", lambda t: (ad.concat([t, t * 2.0], axis=1) * w38).sum(), r(3, 4)),
        ("stack", lambda t: (ad.stack([t, t * t], axis=0) * w234).sum(), r(3, 4)),
        ("broadcast_to", lambda t: (ad.broadcast_to(t, (2, 3, 4)) * w234).sum(), r(3, 1)),
        ("matmul", lambda t: (t @ w42).sum(), r(3, 4)),
        ("matmul_batched", lambda t: ((t @ b245) * w235).sum(), r(3, 4)),
        ("conv1d", lambda t: (ad.conv1d(t, kernel, bias) * w257).sum(), r(2, 3, 7)),
        ("conv1d_dilated", lambda t: (ad.conv1d(t, kernel, dilation=2) * w257).sum(), r(2, 3, 7)),
        ("conv1d_strided", lambda t: (ad.conv1d(t, kernel, stride=2) * w254).sum(), r(2, 3, 7)),
        ("conv1d_weight", lambda t: (ad.conv1d(x237, t) * w257).sum(), r(5, 3, 3)),
        ("sixd_to_rotmat", lambda t: (sixd_to_rotmat_t(t) * w2433).sum(), _unit_rot6d(rng, (2, 4))),
        ("geodesic", lambda t: geodesic_distance_t(sixd_to_rotmat_t(t), R_ref).sum(), _unit_rot6d(rng, (4,))),
        ("forward_kinematics", lambda t: (forward_kinematics_t(skel, sixd_to_rotmat_t(t)) * w283).sum(),
         _unit_rot6d(rng, (2, 8))),
        ("dct", lambda t: (dct_t(t) * w216).sum(), r(2, 16)),
        ("idct", lambda t: (idct_t(t) * w216).sum(), r(2, 16)),
        ("log_stft", lambda t: (log_stft_magnitude_t(t) * w285).sum(), r(2, 64)),
    ]


class _TinyExtractor:
    """Two fixed random conv blocks standing in for a trained extractor."""

    trained = True

    def __init__(self, rng, n_joints):
        self.w1 = rng.standard_normal((5, n_joints * 6, 3)) * 0.3
        self.w2 = rng.standard_normal((4, 5, 3)) * 0.3

    def block_features_t(self, rot6d):
        B, T = rot6d.shape[:2]
        x = rot6d.reshape(B, T, -1).transpose(0, 2, 1)
        h1 = ad.conv1d(x, self.w1)
        h2 = ad.conv1d(ad.exp(h1 * 0.1), self.w2)
        return [h1, h2]


def loss_checks(rng):
    """(name, f, x) triples for every training loss."""
    T, J = 34, 8
    skel = upper_body_skeleton()
    p_ref = rng.standard_normal((2, T, J, 3)) * 5
    R_ref = sixd_to_rotmat(_unit_rot6d(rng, (2, T, J)))
    weights = L.LossWeights.desk()
    ext = _TinyExtractor(rng, J)
    rot_ref = _unit_rot6d(rng, (2, 6, J))
    code_ref = rng.standard_normal((2, 4, 6))
    P = lambda *s: rng.standard_normal(s) * 5

    def motion(t):
        R = sixd_to_rotmat_t(t)
        pred = L.MotionPrediction(forward_kinematics_t(skel, R), R)
        target = L.MotionPrediction(ad.Tensor(forward_kinematics(skel, R_ref[:, :6])), ad.Tensor(R_ref[:, :6]))
        return L.motion_reconstruction_loss(pred, target, weights)

    return [
        ("rotation_loss", lambda t: L.rotation_loss(sixd_to_rotmat_t(t), R_ref[:, :6]), _unit_rot6d(rng, (2, 6, J))),
        ("position_loss", lambda t: L.position_loss(t, p_ref), P(2, T, J, 3)),
        ("speed_loss", lambda t: L.speed_loss(t, p_ref), P(2, T, J, 3)),
        ("motion_loss", motion, _unit_rot6d(rng, (2, 6, J))),
        ("relaxed_loss", lambda t: L.relaxed_motion_loss(t, p_ref, 2.0), P(2, T, J, 3)),
        ("stft_loss", lambda t: L.stft_loss(t, p_ref), P(2, T, J, 3)),
        ("ssim_loss", lambda t: L.ssim_loss(t, p_ref), P(2, T, J, 3)),
        ("lpips_loss", lambda t: L.lpips_loss(t, rot_ref, ext), _unit_rot6d(rng, (2, 6, J))),
        ("alignment_loss", lambda t: L.alignment_loss(t, code_ref), rng.standard_normal((2, 4, 6))),
        ("bicycle_loss", lambda t: L.bicycle_code_loss(t, code_ref), rng.standard_normal((2, 4, 6))),
        ("kl_divergence_mean", lambda t: L.kl_divergence(t, ad.Tensor(code_ref * 0.3)), rng.standard_normal((2, 4, 6))),
        ("kl_divergence_logvar", lambda t: L.kl_divergence(ad.Tensor(code_ref), t), rng.standard_normal((2, 4, 6)) * 0.3),
        ("diversity_loss", lambda t: L.diversity_loss(t, p_ref[:, :6], 1e3), P(2, 6, J, 3)),
    ]


def model_total_loss_check(model, dataset, seed=0, n_frames=2, params=("decoder.out.weight",), max_coords=20):
    """Finite-difference check of the total training loss w.r.t. selected parameters.

    Uses a micro-batch of ``n_frames`` frames and re-seeds the sampling noise
    for every evaluation so the loss is a deterministic function of the
    parameters.  Returns ``{param_name: error}``.
    """
    rng = np.random.default_rng(seed)
    batch = dataset.sample_batch(rng, 2, n_frames)
    cfg = TrainConfig(seed=seed)
    named = dict(model.named_parameters())
    if model.cfg.mapping and model.stats is None:
        _, I_M = model.encode_motion(batch["rotations"])
        from .model import SpecificCodeStats
        from .train import specific_stats_of

        model.stats = SpecificCodeStats(*specific_stats_of(I_M))
    out = {}
    for name in params:
        p = named[name]
        original = p.data.copy()

        def f(t, p=p):
            setattr_param(model, name, t)
            _, total, _ = compute_losses(model, batch, cfg, np.random.default_rng(seed + 1), dataset.skeleton)
            return total

        out[name] = ad.grad_check(f, original, eps=1e-6, seed=seed, max_coords=max_coords)
        setattr_param(model, name, ad.Tensor(original, requires_grad=True))
    return out


def setattr_param(module, dotted, value):
    parts = dotted.split(".")
    obj = module
    for part in parts[:-1]:
        obj = obj[int(part)] if part.isdigit() else getattr(obj, part)
    setattr(obj, parts[-1], value)


def gradient_suite(seed=0):
    """Rows ``{"kind", "name", "error", "tolerance", "passed"}`` for all ops and losses."""
    rng = np.random.default_rng(seed)
    rows = []
    for kind, checks, tol in (("op", op_checks(rng), OP_TOLERANCE), ("loss", loss_checks(rng), LOSS_TOLERANCE)):
        for name, f, x in checks:
            err = ad.grad_check(f, x, eps=1e-6, seed=seed, max_coords=60)
            rows.append({"kind": kind, "name": name, "error": float(err), "tolerance": tol, "passed": bool(err < tol)})
    return rows


# ---------------------------------------------------------------------------
# Latent DCT ablation
# ---------------------------------------------------------------------------

def _clips(dataset, length):
    """Held-out audio and ground truth cut into consecutive ``length``-frame clips."""
    n = dataset.n_frames // length
    A = np.concatenate([dataset.audio[:, i * length:(i + 1) * length] for i in range(n)])
    P = np.concatenate([dataset.positions[:, :, i * length:(i + 1) * length] for i in range(n)])
    return A, P


def _mean_speed(p):
    return float(np.linalg.norm(np.diff(p, axis=-3), axis=-1).mean())


def dct_ablation(model, dataset, seeds=range(5), keeps=(None, 50, 10)):
    """Rows of edited generations: S_A band limits and I_R = 0.

    Each row reports the L1 to the nearest ground-truth style (cm) and the
    mean joint speed (cm/frame), averaged over ``seeds`` specific-code draws.
    """
    if not model.cfg.dct:
        raise ValueError("DCT ablation needs a model trained with the DCT variant")
    L_ = model.cfg.dct_length
    A, P = _clips(dataset, L_)
    S = model.shared_code(A).data
    rows = {}
    for seed in seeds:
        rng = np.random.default_rng(seed)
        I = model.sample_specific_code(L_, rng, batch=len(A)).data
        variants = [("S_A[all]" if k is None else f"S_A[{k}:]=0", latent_dct_roundtrip(S, k, L_), I) for k in keeps]
        variants.append(("I_R=0", S, np.zeros_like(I)))
        for label, S_e, I_e in variants:
            p = positions_of(model.decode(S_e, I_e).data, model.cfg, dataset.skeleton)
            err = _nearest_l1(p, P)
            rows.setdefault(label, []).append((err, _mean_speed(p)))
    return [{"edit": k, "pos_l1": float(np.mean([v[0] for v in vs])), "speed": float(np.mean([v[1] for v in vs]))}
            for k, vs in rows.items()]


def _nearest_l1(p, P):
    d = np.abs(p[:, None] - P).sum(-1).mean(axis=(-1, -2))
    return float(d.min(axis=1).mean())


def specific_code_ablation(model, dataset):
    """Held-out reconstruction L1 with the reference's specific code and with I = 0."""
    from .train import reconstruction_l1

    return {"pos_l1": reconstruction_l1(model, dataset), "pos_l1_zero_I": reconstruction_l1(model, dataset, zero_specific=True)}


# ---------------------------------------------------------------------------
# Timeline insertion
# ---------------------------------------------------------------------------

def speed_spike_ratio(positions, start, stop):
    """Largest per-frame mean joint speed at the span boundaries over the clip median."""
    speed = np.linalg.norm(np.diff(positions, axis=0), axis=-1).mean(axis=-1)  # (T - 1,)
    median = float(np.median(speed))
    edges = [i for b in (start, stop) for i in (b - 2, b - 1, b) if 0 <= i < len(speed)]
    peak = float(max(speed[i] for i in edges)) if edges else 0.0
    return peak / max(median, 1e-9), peak, median


def timeline_insertion(model, dataset, sequence=0, style=0, start=64, length=64, seed=0):
    """Insert a held-out reference's specific code into a random-code generation.

    The reference is the ground-truth motion of ``(sequence, style)`` over
    ``[start, start + length)``; the audio is the same sequence's full track.
    """
    T = dataset.n_frames
    if not (0 <= start and length > 0 and start + length <= T):
        raise ValueError(f"span [{start}, {start + length}) is outside the {T}-frame sequence")
    rng = np.random.default_rng(seed)
    A = dataset.audio[sequence][None]
    S = model.shared_code(A)
    I_R = model.sample_specific_code(S.shape[-1], rng, batch=1)
    ref_motion = dataset.rotations[sequence, style] if model.cfg.mode == "3d" else \
        dataset.positions[sequence, style, ..., :model.cfg.pos_dim]
    I_edit = model.timeline_insert(I_R, ref_motion[start:start + length], start)
    out = model.decode(S, I_edit).data[0]
    p = positions_of(out, model.cfg, dataset.skeleton)
    p_ref = dataset.positions[sequence, style]
    if model.cfg.mode != "3d":
        p_ref = p_ref[..., :model.cfg.pos_dim]
    span = slice(start, start + length)
    ratio, peak, median = speed_spike_ratio(p, start, start + length)
    return {
        "motion": out,
        "span_pos_l1": metric_l1(p[span], p_ref[span]),
        "spike_ratio": ratio,
        "boundary_speed": peak,
        "median_speed": median,
        "inter_style_distance": dataset.style_distance(),
    }


def one_to_many_comparison(train_set, test_set, seeds=(0, 1, 2), train_cfg=None, model_cfg=None, runs=5, progress=None):
    """Multimodality of the full method vs the no-split baseline at equal step budgets."""
    from .train import method_configs, multimodality_of, reconstruction_l1, train

    rows = []
    for seed in seeds:
        for method in ("baseline", "full"):
            base = train_cfg or TrainConfig()
            tc = base.to_dict()
            tc["seed"] = seed
            mc, tcfg = method_configs(method, model_cfg, TrainConfig.from_dict(tc))
            res = train(train_set, mc, tcfg, progress=progress)
            rows.append({
                "seed": seed,
                "method": method,
                "multimodality": multimodality_of(res.model, test_set, n_runs=runs, seed=seed),
                "pos_l1": reconstruction_l1(res.model, test_set),
                "nearest_l1": nearest_style_l1(_generate(res.model, test_set, seed), test_set),
                "seconds": res.seconds,
            })
    return rows


def _generate(model, dataset, seed):
    from .train import heldout_positions

    return heldout_positions(model, dataset, seed=seed)
