import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from gesturelab import autodiff as ad
from gesturelab.signal import (
    MEL_HOP,
    dct,
    dct_matrix,
    hann,
    idct,
    log_mel,
    log_stft_magnitude,
    log_stft_magnitude_t,
    mel_filterbank,
    n_frames,
    stft_magnitude,
)


def naive_stft_magnitude(x, window=32, hop=8):
    """Direct DFT sum over every frame: |sum_n w[n] x[f*hop + n] exp(-2 pi i k n / N)|."""
    w = 0.5 - 0.5 * np.cos(2 * np.pi * np.arange(window) / window)
    frames = 1 + (len(x) - window) // hop
    out = np.zeros((frames, window // 2 + 1))
    for f in range(frames):
        for k in range(window // 2 + 1):
            acc = 0j
            for n in range(window):
                acc += w[n] * x[f * hop + n] * np.exp(-2j * np.pi * k * n / window)
            out[f, k] = abs(acc)
    return out


def naive_dct(x):
    N = len(x)
    out = np.zeros(N)
    for k in range(N):
        s = sum(x[n] * np.cos(np.pi * (2 * n + 1) * k / (2 * N)) for n in range(N))
        out[k] = s * (np.sqrt(1.0 / N) if k == 0 else np.sqrt(2.0 / N))
    return out


def test_stft_matches_naive_dft():
    x = np.random.default_rng(0).standard_normal(96)
    assert np.abs(stft_magnitude(x) - naive_stft_magnitude(x)).max() < 1e-9


def test_differentiable_stft_matches_fft():
    x = np.random.default_rng(1).standard_normal((3, 80))
    mag = stft_magnitude(x)
    ref = np.log(np.maximum(mag, 1e-10)).reshape(3, -1)
    np.testing.assert_allclose(log_stft_magnitude_t(ad.Tensor(x)).data, ref, atol=1e-9)
    np.testing.assert_allclose(log_stft_magnitude(x).reshape(3, -1), ref, atol=1e-9)


def test_stft_frame_count_and_window():
    assert n_frames(128) == 13
    assert stft_magnitude(np.zeros(128)).shape == (13, 17)
    assert hann(32)[0] == 0.0 and hann(32)[16] == pytest.approx(1.0)


def test_stft_rejects_short_input():
    with pytest.raises(ValueError):
        stft_magnitude(np.zeros(31))


def test_dct_matches_cosine_sum():
    x = np.random.default_rng(2).standard_normal(128)
    assert np.abs(dct(x) - naive_dct(x)).max() < 1e-9


def test_dct_round_trip_and_orthonormality():
    x = np.random.default_rng(3).standard_normal((5, 128))
    assert np.abs(idct(dct(x)) - x).max() < 1e-9
    D = dct_matrix(128)
    assert np.abs(D @ D.T - np.eye(128)).max() < 1e-12
    np.testing.assert_allclose(np.sum(dct(x) ** 2, axis=-1), np.sum(x ** 2, axis=-1), rtol=1e-9)


@settings(max_examples=30, deadline=None)
@given(arrays(np.float64, 16, elements=st.floats(-100, 100)), arrays(np.float64, 16, elements=st.floats(-100, 100)),
       st.floats(-5, 5), st.floats(-5, 5))
def test_dct_is_linear(x, y, a, b):
    assert np.abs(dct(a * x + b * y) - (a * dct(x) + b * dct(y))).max() < 1e-9 * max(1.0, np.abs(x).max() + np.abs(y).max())


def test_dct_of_constant_is_dc_only():
    c = dct(np.full(64, 3.0))
    assert c[0] == pytest.approx(3.0 * 8.0)
    assert np.abs(c[1:]).max() < 1e-12


def test_dct_along_axis_and_length():
    x = np.random.default_rng(4).standard_normal((8, 3))
    np.testing.assert_allclose(dct(x, axis=0)[:, 1], naive_dct(x[:, 1]), atol=1e-12)
    with pytest.raises(ValueError):
        dct(np.zeros(10), length=12)


def test_mel_filterbank_shape_and_coverage():
    fb = mel_filterbank()
    assert fb.shape == (64, 513)
    assert np.all(fb.max(axis=1) > 0.5)
    assert np.all(fb >= 0)


def test_log_mel_frame_count_and_floor():
    pcm = np.zeros(MEL_HOP * 10)
    feats = log_mel(pcm)
    assert feats.shape == (10, 64)
    np.testing.assert_allclose(feats, np.log(1e-10))


def test_log_mel_tone_lands_in_matching_band():
    t = np.arange(16000) / 16000
    feats = log_mel(np.sin(2 * np.pi * 1000 * t))
    fb = mel_filterbank()
    bin_1k = int(round(1000 / 8000 * 512))
    assert feats.mean(0).argmax() == fb[:, bin_1k].argmax()


def test_log_mel_errors():
    with pytest.raises(ValueError):
        log_mel(np.zeros(0))
    with pytest.raises(ValueError):
        log_mel(np.zeros(1000), sample_rate=44100)
