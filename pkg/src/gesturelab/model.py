"""Split-latent conditional VAE for audio-driven gesture synthesis.

Data flow at inference: audio features -> audio encoder -> shared code S_A;
a Gaussian draw rescaled by training-set statistics -> mapping network ->
motion-specific code I_R; the decoder maps ``S_A (+) I_R`` to 6D joint
rotations (3D mode) or joint positions (2D mode).

All latent sequences are laid out (batch, channels, time).
"""

from dataclasses import asdict, dataclass, field

import numpy as np

from . import autodiff as ad
from .kinematics import identity_sixd
from .nn import TCN, Conv1d, Module
from .signal import dct_t, idct_t

DCT_LENGTH = 128


@dataclass
class EncoderConfig:
    audio_channels: list = field(default_factory=lambda: [128, 128, 96, 96, 64])
    motion_channels: list = field(default_factory=lambda: [256, 256, 128, 128, 64])
    decoder_channels: list = field(default_factory=lambda: [64, 128, 128, 256, 256])
    kernel: int = 3
    shared_dim: int = 16
    specific_dim: int = 16
    mapping_hidden: int = 32

    def __post_init__(self):
        for name in ("audio_channels", "motion_channels", "decoder_channels"):
            chans = getattr(self, name)
            if len(chans) == 0 or any(int(c) <= 0 for c in chans):
                raise ValueError(f"{name} must be a non-empty list of positive sizes")
        if min(self.kernel, self.shared_dim, self.specific_dim, self.mapping_hidden) <= 0:
            raise ValueError("encoder dimensions must be positive")

    @classmethod
    def paper(cls):
        return cls()

    @classmethod
    def desk(cls):
        """Narrow preset that trains on one CPU core in minutes."""
        return cls(
            audio_channels=[32, 32, 24, 24, 16],
            motion_channels=[48, 48, 32, 32, 16],
            decoder_channels=[32, 32, 48, 48, 48],
        )


@dataclass
class ModelConfig:
    mode: str = "3d"
    n_joints: int = 8
    pos_dim: int = 3
    audio_dim: int = 64
    encoder: EncoderConfig = field(default_factory=EncoderConfig.desk)
    split: bool = True
    mapping: bool = True
    dct: bool = False
    dct_length: int = DCT_LENGTH

    def __post_init__(self):
        if isinstance(self.encoder, dict):
            self.encoder = EncoderConfig(**self.encoder)
        if self.mode not in ("3d", "2d"):
            raise ValueError(f"mode must be '3d' or '2d', got {self.mode!r}")
        if self.mapping and not self.split:
            raise ValueError("the mapping network requires the split latent code")

    @property
    def motion_dim(self):
        return self.n_joints * (6 if self.mode == "3d" else self.pos_dim)

    @property
    def decoder_in(self):
        e = self.encoder
        return e.shared_dim + (e.specific_dim if self.split else 0)

    def to_dict(self):
        return asdict(self)


@dataclass
class GaussianCode:
    """A sampled code together with the Gaussian it was drawn from."""

    sample: ad.Tensor
    mean: ad.Tensor
    log_var: ad.Tensor = None


@dataclass
class SpecificCodeStats:
    mean: np.ndarray
    var: np.ndarray

    def __post_init__(self):
        self.mean = np.asarray(self.mean, dtype=np.float64)
        self.var = np.asarray(self.var, dtype=np.float64)
        if np.any(self.var <= 0):
            raise ValueError("specific code variances must be > 0")

    @classmethod
    def from_codes(cls, codes, floor=1e-6):
        """Per-channel statistics of I_M codes (B, C, T), pooled over batch and time."""
        codes = np.asarray(codes)
        flat = np.moveaxis(codes, 1, 0).reshape(codes.shape[1], -1)
        return cls(flat.mean(axis=1), np.maximum(flat.var(axis=1), floor))


def _reparameterize(mean, log_var, rng):
    eps = rng.standard_normal(mean.shape)
    return mean + ad.exp(log_var * 0.5) * eps


class GaussianHead(Module):
    """Two parallel 1x1 convolutions predicting mean and log-variance.

    With ``variational=False`` only the mean head exists (an AE head).  In DCT
    mode the code is sampled in the coefficient domain over time: the mean is
    the DCT of the time-domain 1x1 projection (a pointwise linear map commutes
    with the DCT, and keeping the bias in time avoids a spike at frame 0),
    while the log-variance comes from energy-normalised coefficients plus a
    learned offset per channel and frequency.
    """

    def __init__(self, c_in, dim, rng, variational=True, dct=False, length=DCT_LENGTH):
        self.mean_head = Conv1d(c_in, dim, 1, rng=rng)
        self.var_head = Conv1d(c_in, dim, 1, rng=rng) if variational else None
        self.dct = dct
        if dct and variational:
            self.freq_log_var = ad.Tensor(np.zeros((dim, length)), requires_grad=True)

    def __call__(self, h, rng=None):
        mean = self.mean_head(h)
        if self.var_head is None:
            return GaussianCode(mean, mean, None)
        if not self.dct:
            log_var = self.var_head(h)
            sample = mean if rng is None else _reparameterize(mean, log_var, rng)
            return GaussianCode(sample, mean, log_var)
        T = h.shape[-1]
        log_var = self.var_head(dct_t(h) * (1.0 / np.sqrt(T))) + self.freq_log_var
        if rng is None:
            return GaussianCode(mean, mean, log_var)
        # log_var stays in the coefficient domain; summed KL is invariant
        # under the orthonormal DCT.
        sample = idct_t(_reparameterize(dct_t(mean), log_var, rng))
        return GaussianCode(sample, mean, log_var)


class AudioEncoder(Module):
    def __init__(self, cfg, rng):
        e = cfg.encoder
        self.audio_dim = cfg.audio_dim
        self.tcn = TCN(cfg.audio_dim, e.audio_channels, e.kernel, rng)
        self.head = GaussianHead(self.tcn.out_channels, e.shared_dim, rng, variational=not cfg.dct, dct=cfg.dct)

    def __call__(self, A, rng=None):
        if A.shape[1] != self.audio_dim:
            raise ad.ShapeError(f"audio encoder expects {self.audio_dim} feature channels, got {A.shape[1]}")
        return self.head(self.tcn(A), rng)


class MotionEncoder(Module):
    def __init__(self, cfg, rng):
        e = cfg.encoder
        self.motion_dim = cfg.motion_dim
        self.tcn = TCN(cfg.motion_dim, e.motion_channels, e.kernel, rng)
        c = self.tcn.out_channels
        self.shared = GaussianHead(c, e.shared_dim, rng, variational=not cfg.dct, dct=cfg.dct)
        self.specific = GaussianHead(c, e.specific_dim, rng, variational=True, dct=cfg.dct, length=cfg.dct_length) if cfg.split else None

    def __call__(self, M, rng=None):
        if M.shape[1] != self.motion_dim:
            raise ad.ShapeError(f"motion encoder expects {self.motion_dim} channels, got {M.shape[1]}")
        h = self.tcn(M)
        S = self.shared(h, rng)
        I = self.specific(h, rng) if self.specific is not None else None
        return S, I


class Decoder(Module):
    def __init__(self, cfg, rng):
        e = cfg.encoder
        self.cfg = cfg
        self.tcn = TCN(cfg.decoder_in, e.decoder_channels, e.kernel, rng)
        self.out = Conv1d(self.tcn.out_channels, cfg.motion_dim, 1, rng=rng)
        # Offsets the raw output so an untrained decoder emits identity rotations.
        if cfg.mode == "3d":
            self.rest = np.tile(identity_sixd(), cfg.n_joints)[None, :, None]
        else:
            self.rest = np.zeros((1, cfg.motion_dim, 1))

    def __call__(self, z):
        return self.out(self.tcn(z)) + self.rest


class MappingNetwork(Module):
    """Per-frame fully connected VAE (dim -> hidden -> dim)."""

    def __init__(self, dim, hidden, rng):
        self.fc = Conv1d(dim, hidden, 1, rng=rng)
        self.mean_head = Conv1d(hidden, dim, 1, rng=rng)
        self.var_head = Conv1d(hidden, dim, 1, rng=rng)

    def __call__(self, z, rng):
        h = ad.relu(self.fc(z))
        mean, log_var = self.mean_head(h), self.var_head(h)
        return GaussianCode(_reparameterize(mean, log_var, rng), mean, log_var)


def motion_to_channels(motion):
    """(B, T, J, d) array/Tensor -> (B, J*d, T) Tensor."""
    m = ad._wrap(motion)
    B, T = m.shape[:2]
    return m.reshape(B, T, -1).transpose(0, 2, 1)


def channels_to_motion(x, n_joints):
    """(B, J*d, T) Tensor -> (B, T, J, d) Tensor."""
    B, C, T = x.shape
    return x.transpose(0, 2, 1).reshape(B, T, n_joints, C // n_joints)


class SplitLatentModel(Module):
    def __init__(self, cfg=None, seed=0):
        self.cfg = cfg if cfg is not None else ModelConfig()
        rng = np.random.default_rng(seed)
        self.audio_encoder = AudioEncoder(self.cfg, rng)
        self.motion_encoder = MotionEncoder(self.cfg, rng)
        self.decoder = Decoder(self.cfg, rng)
        e = self.cfg.encoder
        self.mapping = MappingNetwork(e.specific_dim, e.mapping_hidden, rng) if self.cfg.mapping else None
        self.audio_mean = np.zeros(self.cfg.audio_dim)
        self.audio_std = np.ones(self.cfg.audio_dim)
        self.stats = None
        self.trained = False

    # -- normalization ----------------------------------------------------
    def set_audio_normalization(self, features):
        """Per-band standardization from training features (..., T, F)."""
        flat = np.asarray(features).reshape(-1, self.cfg.audio_dim)
        self.audio_mean = flat.mean(axis=0)
        self.audio_std = np.maximum(flat.std(axis=0), 1e-6)

    def audio_input(self, A):
        """(B, T, F) raw log-mel -> normalized (B, F, T) Tensor."""
        A = np.asarray(A.data if isinstance(A, ad.Tensor) else A, dtype=np.float64)
        if A.ndim == 2:
            A = A[None]
        if A.shape[-1] != self.cfg.audio_dim:
            raise ad.ShapeError(f"expected {self.cfg.audio_dim} audio features, got {A.shape[-1]}")
        return ad.Tensor(((A - self.audio_mean) / self.audio_std).transpose(0, 2, 1))

    def _check_dct_length(self, T):
        if self.cfg.dct and T != self.cfg.dct_length:
            raise ValueError(f"DCT mode needs clips of exactly {self.cfg.dct_length} frames, got {T}")

    # -- encoders / decoder --------------------------------------------------
    def encode_audio(self, A, rng=None):
        """Shared code from raw features (B, T, F).  ``rng=None`` returns the mean."""
        x = self.audio_input(A)
        self._check_dct_length(x.shape[-1])
        return self.audio_encoder(x, rng)

    def encode_motion(self, M, rng=None):
        """(S_M, I_M) from motion (B, T, J, 6) or (B, T, J, D)."""
        x = motion_to_channels(M)
        self._check_dct_length(x.shape[-1])
        return self.motion_encoder(x, rng)

    def decode(self, S, I=None):
        """Latent codes (B, C, T) -> motion Tensor (B, T, J, 6 or D)."""
        S = ad._wrap(S)
        if self.cfg.split:
            if I is None:
                raise ValueError("split model needs a motion-specific code to decode")
            I = ad._wrap(I)
            if I.shape[-1] != S.shape[-1] or I.shape[0] != S.shape[0]:
                raise ad.ShapeError(f"decode: code shapes {S.shape} and {I.shape} differ in batch or length")
            z = ad.concat([S, I], axis=1)
        else:
            z = S
        return channels_to_motion(self.decoder(z), self.cfg.n_joints)

    def sample_prior_signal(self, batch, T, rng):
        """Gaussian signal rescaled by the specific-code statistics, one draw per clip.

        The draw is held constant over time; returns (B, C, T).
        """
        dim = self.cfg.encoder.specific_dim
        if self.cfg.mapping:
            if self.stats is None:
                raise ValueError("specific code statistics are missing; train the model first")
            mean, std = self.stats.mean, np.sqrt(self.stats.var)
        else:
            mean, std = np.zeros(dim), np.ones(dim)
        z = mean[None, :] + std[None, :] * rng.standard_normal((batch, dim))
        return np.repeat(z[:, :, None], T, axis=2)

    def sample_specific_code(self, T, rng, batch=1, return_code=False):
        if not self.cfg.split:
            raise ValueError("model has no motion-specific code")
        z = ad.Tensor(self.sample_prior_signal(batch, T, rng))
        if self.mapping is None:
            code = GaussianCode(z, z, None)
        else:
            code = self.mapping(z, rng)
        return code if return_code else code.sample

    # -- inference -------------------------------------------------------------
    def _require_trained(self):
        if not self.trained:
            raise ValueError("model is untrained; run training or load a checkpoint")

    def shared_code(self, A, rng=None):
        """Shared code for audio of any length; DCT models encode 128-frame clips.

        Long inputs in DCT mode are split into consecutive clips (the last one
        zero-padded), encoded separately and concatenated in time.
        """
        A = np.asarray(A, dtype=np.float64)
        if A.ndim == 2:
            A = A[None]
        if not self.cfg.dct:
            return self.encode_audio(A, rng).sample
        L = self.cfg.dct_length
        T = A.shape[1]
        pieces = []
        for start in range(0, T, L):
            clip = A[:, start:start + L]
            n = clip.shape[1]
            if n < L:
                pad = np.repeat(clip[:, -1:], L - n, axis=1)
                clip = np.concatenate([clip, pad], axis=1)
            pieces.append(self.encode_audio(clip, rng).sample.data[:, :, :n])
        return ad.Tensor(np.concatenate(pieces, axis=2))

    def generate(self, A, seed=0, sample_shared=False, S=None, I=None):
        """Motion (B, T, J, d) array for audio features (T, F) or (B, T, F)."""
        self._require_trained()
        rng = np.random.default_rng(seed)
        if S is None:
            S = self.shared_code(A, rng if sample_shared else None)
        S = ad._wrap(S)
        if self.cfg.split and I is None:
            I = self.sample_specific_code(S.shape[-1], rng, batch=S.shape[0])
        return self.decode(S, I).data

    def specific_code_of(self, M):
        """Mean motion-specific code of a motion (B, T, J, d), time-domain."""
        _, I = self.encode_motion(M)
        return I.mean.data

    def timeline_insert(self, I_R, M_ref, start):
        """Replace frames ``[start, start + n)`` of I_R (B, C, T) with the reference's code.

        ``M_ref`` is (B, n, J, d); the returned code has the same shape as I_R.
        """
        I_R = np.array(I_R.data if isinstance(I_R, ad.Tensor) else I_R, dtype=np.float64)
        M_ref = np.asarray(M_ref, dtype=np.float64)
        if M_ref.ndim == 3:
            M_ref = M_ref[None]
        n, T = M_ref.shape[1], I_R.shape[-1]
        if start < 0 or n < 0 or start + n > T:
            raise ValueError(f"span [{start}, {start + n}) is outside the {T}-frame code")
        if n == 0:
            return I_R
        I_R[..., start:start + n] = self._specific_code_any_length(M_ref)
        return I_R

    def _specific_code_any_length(self, M):
        if not self.cfg.dct:
            return self.specific_code_of(M)
        L = self.cfg.dct_length
        n = M.shape[1]
        pieces = []
        for start in range(0, n, L):
            clip = M[:, start:start + L]
            k = clip.shape[1]
            if k < L:
                clip = np.concatenate([clip, np.repeat(clip[:, -1:], L - k, axis=1)], axis=1)
            pieces.append(self.specific_code_of(clip)[:, :, :k])
        return np.concatenate(pieces, axis=2)

    # -- persistence -------------------------------------------------------------
    def state(self):
        params = self.state_dict()
        params["buffer.audio_mean"] = self.audio_mean
        params["buffer.audio_std"] = self.audio_std
        if self.stats is not None:
            params["buffer.stats_mean"] = self.stats.mean
            params["buffer.stats_var"] = self.stats.var
        return params

    def save(self, path, extra_meta=None):
        meta = {"model_config": self.cfg.to_dict(), "trained": self.trained}
        meta.update(extra_meta or {})
        ad.save_checkpoint(path, self.state(), meta)

    @classmethod
    def load(cls, path):
        params, meta = ad.load_checkpoint(path)
        model = cls(ModelConfig(**meta["model_config"]))
        model.load_state_dict({k: v for k, v in params.items() if not k.startswith("buffer.")})
        model.audio_mean = params["buffer.audio_mean"]
        model.audio_std = params["buffer.audio_std"]
        if "buffer.stats_mean" in params:
            model.stats = SpecificCodeStats(params["buffer.stats_mean"], params["buffer.stats_var"])
        model.trained = bool(meta.get("trained", False))
        return model, meta


def latent_dct_roundtrip(code, keep=None, length=DCT_LENGTH):
    """DCT each channel over time, zero bands ``>= keep`` (or a boolean mask), IDCT.

    ``code`` is (..., C, T) with T equal to ``length``.  ``keep=None`` keeps
    every band; an integer N keeps the lowest N; an array is used as a mask
    over the ``length`` bands.
    """
    from .signal import dct, idct

    code = np.asarray(code.data if isinstance(code, ad.Tensor) else code, dtype=np.float64)
    if code.shape[-1] != length:
        raise ValueError(f"latent DCT editing needs {length}-frame codes, got {code.shape[-1]}")
    coeffs = dct(code, axis=-1)
    if keep is None:
        mask = np.ones(length, dtype=bool)
    elif np.ndim(keep) == 0:
        mask = np.arange(length) < int(keep)
    else:
        mask = np.asarray(keep, dtype=bool)
        if mask.shape != (length,):
            raise ValueError(f"band mask must have {length} entries, got {mask.shape}")
    return idct(coeffs * mask, axis=-1)
