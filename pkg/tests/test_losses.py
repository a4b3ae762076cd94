import numpy as np
import pytest

from gesturelab import autodiff as ad
from gesturelab import losses as L
from gesturelab.experiments import LOSS_TOLERANCE, loss_checks


@pytest.mark.parametrize("name,f,x", loss_checks(np.random.default_rng(11)), ids=lambda v: v if isinstance(v, str) else "")
def test_loss_gradients_match_finite_differences(name, f, x):
    assert ad.grad_check(f, x, eps=1e-6, seed=0, max_coords=80) < LOSS_TOLERANCE, name


@pytest.fixture
def motions():
    rng = np.random.default_rng(0)
    return rng.standard_normal((2, 40, 8, 3)) * 10, rng.standard_normal((2, 40, 8, 3)) * 10


def test_relaxed_with_zero_rho_is_position_loss_bitwise(motions):
    a, b = motions
    assert L.relaxed_motion_loss(a, b, 0.0).item() == L.position_loss(a, b).item()


def test_relaxed_ignores_errors_below_rho():
    p = np.zeros((1, 3, 2, 3))
    q = p + np.array([0.1, 0.0, 0.0])
    assert L.relaxed_motion_loss(q, p, 0.2).item() == 0.0
    assert L.relaxed_motion_loss(q, p, 0.05).item() == pytest.approx(0.05)


def test_relaxed_rejects_negative_rho(motions):
    with pytest.raises(ValueError):
        L.relaxed_motion_loss(*motions, -1.0)


def test_position_loss_hand_value():
    p = np.zeros((1, 1, 2, 3))
    q = np.array([[[[1.0, -2.0, 0.5], [0.0, 0.0, 3.0]]]])
    assert L.position_loss(q, p).item() == pytest.approx((3.5 + 3.0) / 2)


def test_speed_loss_ignores_constant_offset(motions):
    a, _ = motions
    assert L.speed_loss(a + 7.0, a).item() == pytest.approx(0.0, abs=1e-12)


def test_speed_loss_needs_two_frames():
    with pytest.raises(ValueError):
        L.speed_loss(np.zeros((1, 1, 2, 3)), np.zeros((1, 1, 2, 3)))


def test_shape_mismatch_is_an_error(motions):
    a, b = motions
    with pytest.raises(ad.ShapeError):
        L.position_loss(a, b[:, :-1])


def test_stft_and_ssim_identity(motions):
    a, _ = motions
    assert L.stft_loss(a, a).item() == 0.0
    assert L.ssim_loss(a, a).item() == pytest.approx(0.0, abs=1e-12)
    with pytest.raises(ValueError):
        L.stft_loss(a[:, :20], a[:, :20])


def test_ssim_of_scaled_signal_below_one(motions):
    a, _ = motions
    assert L.ssim_t(a * 0.5, a).item() < 0.99


def test_rotation_loss_zero_up_to_clamp():
    R = np.broadcast_to(np.eye(3), (2, 4, 3, 3))
    assert L.rotation_loss(R, R).item() == pytest.approx(np.arccos(1 - ad.ACOS_EPS), abs=1e-12)


def test_motion_loss_weights_and_2d_skip(motions):
    a, b = motions
    w = L.LossWeights(lambda_pos=2.0, lambda_speed=3.0)
    parts = {}
    total = L.motion_reconstruction_loss(L.MotionPrediction(ad.Tensor(a)), L.MotionPrediction(ad.Tensor(b)), w, parts)
    assert "rot" not in parts
    expected = 2.0 * L.position_loss(a, b).item() + 3.0 * L.speed_loss(a, b).item()
    assert total.item() == pytest.approx(expected)


def test_kl_zero_for_standard_normal():
    z = np.zeros((2, 16, 5))
    assert L.kl_divergence(z, z).item() == 0.0
    mu = np.ones((1, 4, 1))
    assert L.kl_divergence(mu, np.zeros_like(mu)).item() == pytest.approx(2.0)


def test_diversity_loss_is_clamped(motions):
    a, _ = motions
    far = a + 1000.0
    assert L.diversity_loss(a, far, clamp_max=15.0).item() == -15.0
    x = ad.Tensor(a, requires_grad=True)
    L.diversity_loss(x, far, clamp_max=15.0).backward()
    assert np.all(x.grad == 0.0)
    assert L.diversity_loss(a, a).item() == 0.0


def test_alignment_and_bicycle_are_mean_l1():
    a = np.zeros((1, 2, 3))
    b = np.full((1, 2, 3), -2.0)
    assert L.alignment_loss(a, b).item() == 2.0
    assert L.bicycle_code_loss(b, a).item() == 2.0


def test_lpips_requires_trained_extractor():
    class Untrained:
        trained = False

    r = np.ones((1, 4, 8, 6))
    with pytest.raises(ValueError):
        L.lpips_loss(r, r, Untrained())


def test_loss_weights_validation():
    with pytest.raises(ValueError):
        L.LossWeights(lambda_kl=-1.0)
    assert L.LossWeights.paper().rho == 0.2 and L.LossWeights.paper().clamp_max == 50.0
