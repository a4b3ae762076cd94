import hashlib
from pathlib import Path

import pytest

import gesturelab
from gesturelab.data import generate_synthetic_dataset
from gesturelab.metrics import train_feature_extractor
from gesturelab.model import ModelConfig, SplitLatentModel
from gesturelab.train import TrainConfig, method_configs, train

TRAIN_STEPS = TrainConfig().steps  # the desk-scale default budget


# Modules whose code determines the weights a training run produces.
TRAINING_MODULES = ("autodiff", "nn", "kinematics", "signal", "losses", "model", "train", "data")


def _source_digest():
    h = hashlib.sha256()
    root = Path(gesturelab.__file__).parent
    for name in TRAINING_MODULES:
        h.update((root / f"{name}.py").read_bytes())
    return h.hexdigest()[:12]


@pytest.fixture(scope="session")
def extractor_data():
    ds = generate_synthetic_dataset(7, 8, 3, 128)
    return ds.rotations.reshape(-1, *ds.rotations.shape[2:]), ds.skeleton


@pytest.fixture(scope="session")
def extractor_run(extractor_data):
    rot, skel = extractor_data
    log = []
    ext = train_feature_extractor(rot[:18], skel, steps=600, seed=0, holdout=rot[18:], max_pos_l1=1.0, log=log)
    return ext, log


@pytest.fixture(scope="session")
def trained_extractor(extractor_run):
    return extractor_run[0]


@pytest.fixture(scope="session")
def one_to_many():
    """16 sequences x 3 styles x 256 frames; the last 4 sequences are held out."""
    return generate_synthetic_dataset(0, 16, 3, 256).split(4)


@pytest.fixture(scope="session")
def trained(request, one_to_many):
    """``trained(method, seed, dct)`` -> (model, training seconds).

    Checkpoints are kept in the pytest cache, keyed by a digest of the
    package source, so a code change always retrains.  Training is fully
    seeded, so a cached model equals a fresh one.
    """
    cache = Path(request.config.cache.mkdir("gesturelab-models"))
    digest = _source_digest()
    memo = {}

    def get(method="full", seed=0, dct=False, steps=TRAIN_STEPS):
        key = (method, seed, dct, steps)
        if key in memo:
            return memo[key]
        path = cache / f"{method}-seed{seed}-{'dct' if dct else 'time'}-{steps}-{digest}.npz"
        if path.exists():
            model, meta = SplitLatentModel.load(path)
            memo[key] = (model, float(meta["train_seconds"]))
        else:
            mc, tc = method_configs(method, ModelConfig(dct=dct), TrainConfig(steps=steps, seed=seed, log_every=100))
            res = train(one_to_many[0], mc, tc)
            res.model.save(path, {"train_seconds": res.seconds})
            memo[key] = (res.model, res.seconds)
        return memo[key]

    return get


@pytest.fixture(scope="session")
def tiny_model():
    """A briefly trained full model for API-level tests (not for quality checks)."""
    ds = generate_synthetic_dataset(1, 3, 2, 128)
    mc, tc = method_configs("full", ModelConfig(), TrainConfig(steps=20, crop=32, batch_size=4))
    return train(ds, mc, tc).model, ds


@pytest.fixture(scope="session")
def tiny_dct_model():
    ds = generate_synthetic_dataset(2, 3, 2, 128)
    mc, tc = method_configs("full", ModelConfig(dct=True), TrainConfig(steps=5, batch_size=2))
    return train(ds, mc, tc).model, ds


# -- acceptance report ---------------------------------------------------------

ACCEPTANCE = {}


@pytest.fixture
def acceptance():
    """``acceptance(n, passed, detail)`` records one criterion line for the summary."""

    def record(n, passed, detail):
        ACCEPTANCE[n] = (bool(passed), detail)
        return bool(passed)

    return record


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(ACCEPTANCE):
        passed, detail = ACCEPTANCE[n]
        terminalreporter.write_line(f"criterion {n:>2}: {'PASS' if passed else 'FAIL'}  {detail}")
