import csv

import numpy as np
import pytest

from gesturelab import train as T
from gesturelab.data import generate_synthetic_dataset
from gesturelab.losses import LossWeights, alignment_loss, position_loss
from gesturelab.model import ModelConfig, SplitLatentModel
from gesturelab.nn import Adam


@pytest.fixture(scope="module")
def ds():
    return generate_synthetic_dataset(2, 3, 2, 64)


def _setup(method="full", **train_kw):
    mc, tc = T.method_configs(method, ModelConfig(), T.TrainConfig(**{"batch_size": 2, "crop": 32, **train_kw}))
    model = SplitLatentModel(mc, seed=tc.seed)
    return model, tc


def test_baseline_preset_has_only_reconstruction_and_alignment(ds):
    mc, tc = T.method_configs("baseline")
    assert not mc.split and not mc.mapping
    assert not (tc.relaxed or tc.bicycle or tc.diversity)
    model = SplitLatentModel(mc)
    batch = ds.sample_batch(np.random.default_rng(0), 2, 32)
    terms, _, _ = T.compute_losses(model, batch, tc, np.random.default_rng(1), ds.skeleton)
    assert set(terms) == {"rec_motion", "rec_audio", "align", "kl"}


def test_full_preset_has_every_flow(ds):
    model, tc = _setup()
    batch = ds.sample_batch(np.random.default_rng(0), 2, 32)
    terms, total, _ = T.compute_losses(model, batch, tc, np.random.default_rng(1), ds.skeleton)
    assert set(terms) == {"rec_motion", "rec_audio", "align", "relaxed", "cyc", "ds", "kl"}
    assert total.item() == pytest.approx(sum(v.item() for v in terms.values()))
    with pytest.raises(ValueError):
        T.method_configs("nonsense")


def test_relaxed_flow_with_zero_rho_is_the_position_loss(ds, monkeypatch):
    w = LossWeights.desk()
    w.rho = 0.0
    model, tc = _setup(weights=w)
    batch = ds.sample_batch(np.random.default_rng(0), 2, 32)
    a, _, _ = T.compute_losses(model, batch, tc, np.random.default_rng(5), ds.skeleton)
    monkeypatch.setattr(T, "relaxed_motion_loss", lambda p, q, rho: position_loss(p, q))
    b, _, _ = T.compute_losses(model, batch, tc, np.random.default_rng(5), ds.skeleton)
    assert a["relaxed"].item() == b["relaxed"].item()


def test_one_step_updates_every_parameter_group(ds):
    model, tc = _setup()
    before = {k: v.copy() for k, v in model.state_dict().items()}
    opt = Adam(model.parameters(), lr=tc.learning_rate)
    T.train_step(model, opt, ds.sample_batch(np.random.default_rng(0), 2, 32), tc, np.random.default_rng(1), ds.skeleton)
    unchanged = [k for k, v in model.state_dict().items() if np.array_equal(v, before[k])]
    assert unchanged == []


def test_disabled_flows_leave_mapping_untouched(ds):
    mc, tc = T.method_configs("split", ModelConfig(mapping=False), T.TrainConfig(batch_size=2, crop=32))
    model = SplitLatentModel(mc)
    assert model.mapping is None
    opt = Adam(model.parameters(), lr=tc.learning_rate)
    values = T.train_step(model, opt, ds.sample_batch(np.random.default_rng(0), 2, 32), tc, np.random.default_rng(1), ds.skeleton)
    assert "relaxed" not in values and "cyc" not in values


def test_nan_aborts_with_term_step_and_seed(ds):
    model, tc = _setup(seed=13)
    model.decoder.out.bias.data[:] = np.nan
    opt = Adam(model.parameters(), lr=tc.learning_rate)
    with pytest.raises(T.TrainingError) as exc:
        T.train_step(model, opt, ds.sample_batch(np.random.default_rng(0), 2, 32), tc, np.random.default_rng(1), ds.skeleton, step=7)
    msg = str(exc.value)
    assert "rec_motion" in msg and "step 7" in msg and "seed 13" in msg


def test_training_is_bitwise_reproducible(ds, tmp_path):
    cfg = T.TrainConfig(steps=4, batch_size=2, crop=32, log_every=1, seed=3)
    a = T.train(ds, ModelConfig(), cfg)
    b = T.train(ds, ModelConfig(), cfg)
    for k, v in a.model.state_dict().items():
        np.testing.assert_array_equal(v, b.model.state_dict()[k])
    np.testing.assert_array_equal(a.model.stats.var, b.model.stats.var)
    a.write_log(tmp_path / "log.csv")
    rows = list(csv.DictReader(open(tmp_path / "log.csv")))
    assert len(rows) == 4 and {"step", "seconds", "rec_motion", "total"} <= set(rows[0])


def test_stats_recompute_matches_pooled_codes(ds):
    res = T.train(ds, ModelConfig(), T.TrainConfig(steps=2, batch_size=2, crop=32))
    model = res.model
    motion = ds.rotations.reshape((-1,) + ds.rotations.shape[2:])
    I_M = model.encode_motion(motion)[1]
    codes, post_var = I_M.mean.data, np.exp(I_M.log_var.data)
    # variance of reparameterized samples: spread of the means plus mean posterior variance
    np.testing.assert_allclose(model.stats.mean, codes.mean(axis=(0, 2)), atol=1e-12)
    np.testing.assert_allclose(model.stats.var, codes.var(axis=(0, 2)) + post_var.mean(axis=(0, 2)), rtol=1e-9)


def test_learning_rate_schedule():
    cfg = T.TrainConfig(steps=11, learning_rate=1e-2, lr_final=0.1)
    lrs = [T.learning_rate_at(cfg, k) for k in range(11)]
    assert lrs[0] == pytest.approx(1e-2) and lrs[-1] == pytest.approx(1e-3)
    assert lrs[5] == pytest.approx(0.5 * (1e-2 + 1e-3))
    assert all(a > b for a, b in zip(lrs, lrs[1:]))
    flat = T.TrainConfig(steps=11, learning_rate=1e-2, lr_final=1.0)
    assert {T.learning_rate_at(flat, k) for k in range(11)} == {1e-2}
    with pytest.raises(ValueError):
        T.TrainConfig(lr_final=0.0)


def test_train_config_validation(ds):
    with pytest.raises(ValueError):
        T.TrainConfig(learning_rate=0.0)
    with pytest.raises(ValueError):
        T.TrainConfig.from_dict({"steps": 3, "bogus": 1})
    cfg = T.TrainConfig.from_dict(T.TrainConfig(steps=9).to_dict())
    assert cfg.steps == 9 and isinstance(cfg.weights, LossWeights)
    with pytest.raises(ValueError):
        T.train(ds, ModelConfig(), T.TrainConfig(crop=65, steps=1))
    with pytest.raises(ValueError):
        T.train(ds, ModelConfig(), T.TrainConfig(lpips=True, steps=1))
    with pytest.raises(ValueError):
        T.train(ds, ModelConfig(n_joints=6), T.TrainConfig(steps=1))


def test_optional_perceptual_terms_are_added(ds, trained_extractor):
    model, tc = _setup(stft=True, ssim=True, lpips=True)
    batch = ds.sample_batch(np.random.default_rng(0), 2, 32)
    terms, _, _ = T.compute_losses(model, batch, tc, np.random.default_rng(1), ds.skeleton, trained_extractor)
    for key in ("rec_motion_stft", "rec_motion_ssim", "rec_motion_lpips"):
        assert np.isfinite(terms[key].item())


# -- trained-run properties (shared, cached training runs) -------------------

def _heldout_alignment(model, test):
    S_A = model.encode_audio(test.audio).mean
    S_M, _ = model.encode_motion(test.rotations[:, 0])
    return alignment_loss(S_A, S_M.mean).item()


def test_alignment_drops_five_fold(trained, one_to_many):
    train_set, test = one_to_many
    model, _ = trained("full", 0)
    init = SplitLatentModel(model.cfg, seed=0)
    init.set_audio_normalization(train_set.audio)
    assert _heldout_alignment(model, test) * 5 <= _heldout_alignment(init, test)


def test_diversity_loss_increases_sample_spread(trained, one_to_many):
    _, test = one_to_many
    with_ds = T.multimodality_of(trained("full", 0)[0], test, n_runs=5, seed=0)
    without = T.multimodality_of(trained("bicycle", 0)[0], test, n_runs=5, seed=0)
    assert with_ds >= without
