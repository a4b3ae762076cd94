"""STFT, orthonormal DCT and log-mel features.

Conventions:

* STFT frames are taken without padding, ``1 + (T - window) // hop`` of them,
  windowed by a periodic Hann window, with FFT size equal to the window size.
* The DCT is the orthonormal DCT-II; its inverse (DCT-III) is the transpose.
* Log-mel uses an HTK-scale triangular filterbank over a power spectrum and a
  centered STFT whose hop is ``sample_rate / frame_rate`` samples.
"""

from functools import lru_cache

import numpy as np

from . import autodiff as ad

STFT_WINDOW = 32
STFT_HOP = 8
LOG_FLOOR = 1e-10

SAMPLE_RATE = 16000
MOTION_FPS = 30
MEL_BANDS = 64
MEL_FFT = 1024
MEL_HOP = SAMPLE_RATE // MOTION_FPS  # 533


def hann(n):
    """Periodic Hann window."""
    return 0.5 - 0.5 * np.cos(2 * np.pi * np.arange(n) / n)


def n_frames(length, window=STFT_WINDOW, hop=STFT_HOP):
    return 1 + (length - window) // hop


def stft(x, window=STFT_WINDOW, hop=STFT_HOP):
    """Complex STFT over the last axis: (..., T) -> (..., frames, window // 2 + 1)."""
    x = np.asarray(x, dtype=np.float64)
    T = x.shape[-1]
    if T < window:
        raise ValueError(f"STFT needs at least {window} samples, got {T}")
    frames = np.lib.stride_tricks.sliding_window_view(x, window, axis=-1)[..., ::hop, :]
    return np.fft.rfft(frames * hann(window), axis=-1)


def stft_magnitude(x, window=STFT_WINDOW, hop=STFT_HOP):
    return np.abs(stft(x, window, hop))


@lru_cache(maxsize=16)
def _stft_basis(length, window, hop):
    """Real and imaginary STFT as (length, frames * bins) matrices."""
    F = n_frames(length, window, hop)
    bins = window // 2 + 1
    n = np.arange(window)
    k = np.arange(bins)
    phase = 2 * np.pi * np.outer(n, k) / window
    w = hann(window)[:, None]
    cos_b, sin_b = w * np.cos(phase), -w * np.sin(phase)
    re = np.zeros((length, F, bins))
    im = np.zeros((length, F, bins))
    for f in range(F):
        re[f * hop:f * hop + window, f] = cos_b
        im[f * hop:f * hop + window, f] = sin_b
    re.setflags(write=False)
    im.setflags(write=False)
    return re.reshape(length, F * bins), im.reshape(length, F * bins)


def log_stft_magnitude_t(x, window=STFT_WINDOW, hop=STFT_HOP, floor=LOG_FLOOR):
    """Differentiable ``log(max(|STFT(x)|, floor))`` for a Tensor (..., T).

    Returns (..., frames * bins).  The floor is applied to the power, which
    keeps the gradient finite where the magnitude vanishes.
    """
    T = x.shape[-1]
    if T < window:
        raise ValueError(f"STFT needs at least {window} samples, got {T}")
    re_b, im_b = _stft_basis(T, window, hop)
    re = x @ re_b
    im = x @ im_b
    power = ad.clamp(re * re + im * im, lo=floor * floor)
    return ad.log(power) * 0.5


def log_stft_magnitude(x, window=STFT_WINDOW, hop=STFT_HOP, floor=LOG_FLOOR):
    return np.log(np.maximum(stft_magnitude(x, window, hop), floor))


# ---------------------------------------------------------------------------
# DCT
# ---------------------------------------------------------------------------

@lru_cache(maxsize=16)
def dct_matrix(n):
    """Orthonormal DCT-II matrix ``C`` with ``dct(x) = C @ x``."""
    k = np.arange(n)[:, None]
    i = np.arange(n)[None, :]
    C = np.sqrt(2.0 / n) * np.cos(np.pi * (i + 0.5) * k / n)
    C[0] /= np.sqrt(2.0)
    C.setflags(write=False)
    return C


def dct(x, axis=-1, length=None):
    x = np.asarray(x, dtype=np.float64)
    if length is not None and x.shape[axis] != length:
        raise ValueError(f"DCT expects length {length} along axis {axis}, got {x.shape[axis]}")
    C = dct_matrix(x.shape[axis])
    return np.moveaxis(np.moveaxis(x, axis, -1) @ C.T, -1, axis)


def idct(c, axis=-1, length=None):
    c = np.asarray(c, dtype=np.float64)
    if length is not None and c.shape[axis] != length:
        raise ValueError(f"IDCT expects length {length} along axis {axis}, got {c.shape[axis]}")
    C = dct_matrix(c.shape[axis])
    return np.moveaxis(np.moveaxis(c, axis, -1) @ C, -1, axis)


def dct_t(x):
    """DCT over the last axis of a Tensor."""
    return x @ dct_matrix(x.shape[-1]).T


def idct_t(c):
    return c @ dct_matrix(c.shape[-1])


# ---------------------------------------------------------------------------
# Log-mel
# ---------------------------------------------------------------------------

def hz_to_mel(f):
    return 2595.0 * np.log10(1.0 + np.asarray(f, dtype=np.float64) / 700.0)


def mel_to_hz(m):
    return 700.0 * (10.0 ** (np.asarray(m, dtype=np.float64) / 2595.0) - 1.0)


@lru_cache(maxsize=8)
def mel_filterbank(n_mels=MEL_BANDS, n_fft=MEL_FFT, sample_rate=SAMPLE_RATE, fmin=0.0, fmax=None):
    """Triangular HTK-mel filters, shape (n_mels, n_fft // 2 + 1), unit peak."""
    fmax = sample_rate / 2 if fmax is None else fmax
    fft_freqs = np.linspace(0, sample_rate / 2, n_fft // 2 + 1)
    edges = mel_to_hz(np.linspace(hz_to_mel(fmin), hz_to_mel(fmax), n_mels + 2))
    lo, mid, hi = edges[:-2, None], edges[1:-1, None], edges[2:, None]
    rising = (fft_freqs - lo) / (mid - lo)
    falling = (hi - fft_freqs) / (hi - mid)
    fb = np.maximum(0.0, np.minimum(rising, falling))
    fb.setflags(write=False)
    return fb


def log_mel(audio, sample_rate=SAMPLE_RATE, n_mels=MEL_BANDS, hop=MEL_HOP, n_fft=MEL_FFT, floor=LOG_FLOOR,
            n_frames_out=None):
    """Log-mel power features, one row per motion frame.

    Frame ``i`` is centred on sample ``i * hop``; the frame count is
    ``len(audio) // hop`` unless ``n_frames_out`` pins it to a paired motion.
    """
    audio = np.asarray(audio, dtype=np.float64).reshape(-1)
    if audio.size == 0:
        raise ValueError("log_mel: empty audio")
    if sample_rate != SAMPLE_RATE:
        raise ValueError(f"log_mel: expected {SAMPLE_RATE} Hz audio, got {sample_rate} Hz")
    count = audio.size // hop if n_frames_out is None else int(n_frames_out)
    if count < 1:
        raise ValueError(f"log_mel: {audio.size} samples is shorter than one hop of {hop}")
    half = n_fft // 2
    padded = np.pad(audio, (half, half + max(0, count * hop - audio.size)))
    starts = np.arange(count) * hop
    frames = padded[starts[:, None] + np.arange(n_fft)[None, :]]
    power = np.abs(np.fft.rfft(frames * hann(n_fft), axis=-1)) ** 2
    mel = power @ mel_filterbank(n_mels, n_fft, sample_rate).T
    return np.log(np.maximum(mel, floor))
