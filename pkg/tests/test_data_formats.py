import json

import numpy as np
import pytest

from gesturelab.data import generate_synthetic_dataset
from gesturelab.formats import (
    FormatError,
    MotionClip,
    load_dataset,
    read_features,
    read_motion,
    read_wav,
    save_dataset,
    write_features,
    write_motion,
    write_wav,
)
from gesturelab.kinematics import sixd_to_rotmat, upper_body_skeleton


@pytest.fixture(scope="module")
def small():
    return generate_synthetic_dataset(seed=5, n_sequences=3, n_styles=3, n_frames=64)


def test_motion_round_trip_is_byte_identical(small, tmp_path):
    clip = MotionClip(small.rotations[0, 1], fps=30.0, mode="3d", skeleton=small.skeleton)
    a, b = tmp_path / "a.glm", tmp_path / "b.glm"
    write_motion(a, clip)
    back = read_motion(a)
    np.testing.assert_array_equal(back.data, clip.data)
    assert back.skeleton.parent == small.skeleton.parent
    write_motion(b, back)
    assert a.read_bytes() == b.read_bytes()


def test_motion_2d_and_named_skeleton(tmp_path):
    clip = MotionClip(np.random.default_rng(0).standard_normal((5, 4, 2)), fps=15, mode="2d", skeleton="pose2d")
    write_motion(tmp_path / "m.glm", clip)
    back = read_motion(tmp_path / "m.glm")
    assert back.mode == "2d" and back.skeleton == "pose2d" and back.fps == 15.0


def test_motion_container_errors(small, tmp_path):
    with pytest.raises(FormatError):
        MotionClip(np.zeros((4, 8, 3)), mode="3d")
    with pytest.raises(FormatError):
        MotionClip(np.zeros((4, 8)))
    bad = tmp_path / "bad.glm"
    bad.write_bytes(b"NOTMOTION")
    with pytest.raises(FormatError):
        read_motion(bad)
    good = tmp_path / "good.glm"
    write_motion(good, MotionClip(small.rotations[0, 0]))
    (tmp_path / "cut.glm").write_bytes(good.read_bytes()[:-8])
    with pytest.raises(FormatError):
        read_motion(tmp_path / "cut.glm")
    with pytest.raises(FormatError):
        read_motion(tmp_path / "missing.glm")


def test_wav_round_trip(tmp_path):
    t = np.arange(1600) / 16000
    x = 0.5 * np.sin(2 * np.pi * 440 * t)
    write_wav(tmp_path / "a.wav", x)
    y = read_wav(tmp_path / "a.wav")
    assert y.shape == x.shape and np.abs(y - x).max() <= 1 / 32768
    with pytest.raises(FormatError):
        read_wav(tmp_path / "a.wav", sample_rate=22050)
    (tmp_path / "junk.wav").write_bytes(b"RIFF0000")
    with pytest.raises(FormatError):
        read_wav(tmp_path / "junk.wav")


@pytest.mark.parametrize("suffix", [".csv", ".json"])
def test_feature_round_trip(tmp_path, suffix):
    f = np.random.default_rng(1).standard_normal((7, 64))
    write_features(tmp_path / f"f{suffix}", f)
    np.testing.assert_array_equal(read_features(tmp_path / f"f{suffix}"), f)


def test_feature_errors(tmp_path):
    (tmp_path / "a.csv").write_text("1,2\n3,4\n")
    with pytest.raises(FormatError):
        read_features(tmp_path / "a.csv")
    (tmp_path / "b.csv").write_text("# shape: 2,3\n1,2\n3,4\n")
    with pytest.raises(FormatError):
        read_features(tmp_path / "b.csv")
    (tmp_path / "c.json").write_text(json.dumps({"shape": [2]}))
    with pytest.raises(FormatError):
        read_features(tmp_path / "c.json")


def test_dataset_directory_round_trip(small, tmp_path):
    save_dataset(small, tmp_path / "ds")
    back = load_dataset(tmp_path / "ds")
    for key in ("audio", "rotations", "positions", "envelopes"):
        np.testing.assert_array_equal(getattr(back, key), getattr(small, key))
    assert back.seed == small.seed and back.meta == small.meta
    with pytest.raises(FormatError):
        load_dataset(tmp_path / "nowhere")


def test_dataset_is_deterministic_and_one_to_many(small):
    again = generate_synthetic_dataset(seed=5, n_sequences=3, n_styles=3, n_frames=64)
    np.testing.assert_array_equal(again.rotations, small.rotations)
    np.testing.assert_array_equal(again.audio, small.audio)
    # every style of one sequence shares the audio but differs in motion
    assert small.style_distance() > 5.0
    R = sixd_to_rotmat(small.rotations)
    assert np.abs(np.linalg.det(R) - 1).max() < 1e-9


def test_dataset_split_and_batches(small):
    train, test = small.split(1)
    assert train.n_sequences == 2 and test.n_sequences == 1
    np.testing.assert_array_equal(test.audio[0], small.audio[2])
    batch = small.sample_batch(np.random.default_rng(0), 4, 32)
    assert batch["rotations"].shape == (4, 32, 8, 6) and batch["audio"].shape == (4, 32, 64)
    with pytest.raises(ValueError):
        small.sample_batch(np.random.default_rng(0), 4, 65)
    with pytest.raises(ValueError):
        small.split(3)


def test_dataset_argument_errors():
    with pytest.raises(ValueError):
        generate_synthetic_dataset(n_styles=1)
    with pytest.raises(ValueError):
        generate_synthetic_dataset(n_frames=16)
    assert upper_body_skeleton().n_joints == 8
