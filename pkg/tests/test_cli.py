import csv
import json
import subprocess
import sys

import numpy as np
import pytest

from gesturelab.cli import main
from gesturelab.formats import read_motion, write_features, write_wav

SMALL = {
    "dataset": {"n_sequences": 3, "n_styles": 2, "n_frames": 128, "n_test": 1},
    "train": {"steps": 3, "batch_size": 2, "crop": 32, "log_every": 1},
    "metrics": {"runs": 2, "noise_seeds": 2},
}


@pytest.fixture(scope="module")
def work(tmp_path_factory):
    root = tmp_path_factory.mktemp("cli")
    (root / "small.json").write_text(json.dumps(SMALL))
    dct = json.loads(json.dumps(SMALL))
    dct["dct"] = True
    dct["train"]["crop"] = 128
    (root / "dct.json").write_text(json.dumps(dct))
    return root


@pytest.fixture(scope="module")
def trained_dir(work):
    out = work / "train"
    assert main(["train", "--out", str(out), "--config", str(work / "small.json"), "--seed", "1"]) == 0
    return out


@pytest.fixture(scope="module")
def data_dir(work):
    out = work / "data"
    assert main(["dataset", "gen", "--out", str(out), "--n-sequences", "2", "--n-frames", "96", "--seed", "4"]) == 0
    return out


def test_dataset_gen_writes_directory_and_is_idempotent(work, data_dir):
    assert (data_dir / "dataset.json").exists() and (data_dir / "seq_0001.bin").exists()
    summary = (data_dir / "summary.json").read_bytes()
    again = work / "data2"
    assert main(["dataset", "gen", "--out", str(again), "--n-sequences", "2", "--n-frames", "96", "--seed", "4"]) == 0
    assert (again / "summary.json").read_bytes() == summary
    assert (again / "seq_0000.bin").read_bytes() == (data_dir / "seq_0000.bin").read_bytes()


def test_train_outputs(trained_dir, work):
    for name in ("model.ckpt", "train_log.csv", "loss_curve.png", "metrics.json", "metrics.txt", "config.json", "run.log"):
        assert (trained_dir / name).exists(), name
    metrics = json.loads((trained_dir / "metrics.json").read_text())
    assert metrics["config"]["train"]["seed"] == 1
    assert metrics["metrics"]["pos_l1"] > 0
    rows = list(csv.DictReader(open(trained_dir / "train_log.csv")))
    assert len(rows) == 3 and "seconds" in rows[0]
    again = work / "train_again"
    assert main(["train", "--out", str(again), "--config", str(work / "small.json"), "--seed", "1"]) == 0
    assert (again / "metrics.json").read_bytes() == (trained_dir / "metrics.json").read_bytes()


def test_generate_from_dataset_features_and_wav(trained_dir, data_dir, work):
    ckpt = str(trained_dir / "model.ckpt")
    out = work / "gen"
    assert main(["generate", "--out", str(out), "--checkpoint", ckpt, "--data", str(data_dir), "--runs", "2"]) == 0
    summary = json.loads((out / "generation.json").read_text())
    assert summary["runs"] == 2 and summary["multimodality"] > 0
    clip = read_motion(out / "motion_001.glm")
    assert clip.data.shape == (96, 8, 6)

    feats = np.random.default_rng(0).standard_normal((40, 64))
    write_features(work / "f.csv", feats)
    assert main(["generate", "--out", str(work / "gen_f"), "--checkpoint", ckpt, "--features", str(work / "f.csv")]) == 0
    assert read_motion(work / "gen_f" / "motion_000.glm").data.shape == (40, 8, 6)

    write_wav(work / "a.wav", 0.3 * np.sin(np.arange(16000) * 0.05))
    assert main(["generate", "--out", str(work / "gen_w"), "--checkpoint", ckpt, "--audio", str(work / "a.wav")]) == 0
    assert json.loads((work / "gen_w" / "generation.json").read_text())["frames"] == 30


def test_evaluate_pair_of_motions(trained_dir, data_dir, work):
    ckpt = str(trained_dir / "model.ckpt")
    assert main(["generate", "--out", str(work / "ev_gen"), "--checkpoint", ckpt, "--data", str(data_dir)]) == 0
    pred = work / "ev_gen" / "motion_000.glm"
    out = work / "ev"
    assert main(["evaluate", "--out", str(out), "--pred", str(pred), "--target", str(pred)]) == 0
    rep = json.loads((out / "report.json").read_text())["metrics"]
    assert rep["pos_l1"] == 0.0 and rep["pck"] == 1.0
    assert (out / "report.csv").exists() and (out / "report.txt").exists()


def test_noise_exp_is_worker_independent(work):
    a, b = work / "noise1", work / "noise2"
    args = ["noise-exp", "--sigmas", "1", "5", "--seeds", "2", "--seed", "3"]
    assert main(args + ["--out", str(a)]) == 0
    assert main(args + ["--out", str(b), "--workers", "2"]) == 0
    assert (a / "noise.json").read_bytes() == (b / "noise.json").read_bytes()
    rows = list(csv.DictReader(open(a / "noise.csv")))
    assert [float(r["sigma_deg"]) for r in rows] == [1.0, 5.0]
    assert float(rows[0]["accel_l1"]) < float(rows[1]["accel_l1"])
    assert (a / "noise.png").exists()


def test_rho_sweep_emits_table(work):
    out = work / "rho"
    assert main(["rho-sweep", "--out", str(out), "--config", str(work / "small.json"), "--rhos", "0", "2", "--steps", "2"]) == 0
    blob = json.loads((out / "rho_sweep.json").read_text())
    assert [r["rho"] for r in blob["rows"]] == [0.0, 2.0]
    assert blob["pos_l1_trend"] in ("increasing", "decreasing", "non-monotone")
    assert (out / "rho_sweep.txt").read_text().splitlines()[0].split()[0] == "rho"
    assert (out / "rho_sweep.png").exists()


def test_dct_ablate_and_timeline_insert(work):
    out = work / "dct"
    assert main(["dct-ablate", "--out", str(out), "--config", str(work / "dct.json"), "--draws", "2"]) == 0
    blob = json.loads((out / "dct_ablation.json").read_text())
    assert [r["edit"] for r in blob["rows"]] == ["S_A[all]", "S_A[50:]=0", "S_A[10:]=0", "I_R=0"]
    assert set(blob["reconstruction"]) == {"pos_l1", "pos_l1_zero_I"}
    assert (out / "dct_ablation.png").exists()

    ti = work / "timeline"
    assert main(["timeline-insert", "--out", str(ti), "--config", str(work / "dct.json"),
                 "--checkpoint", str(out / "model.ckpt"), "--start", "32", "--length", "64"]) == 0
    res = json.loads((ti / "timeline.json").read_text())
    assert {"span_pos_l1", "spike_ratio", "inter_style_distance", "boundary_smooth"} <= set(res)
    assert read_motion(ti / "edited.glm").data.shape == (128, 8, 6)
    assert (ti / "timeline.png").exists()


def test_dct_ablate_rejects_time_domain_model(trained_dir, work):
    assert main(["dct-ablate", "--out", str(work / "dct_bad"), "--config", str(work / "small.json"),
                 "--checkpoint", str(trained_dir / "model.ckpt")]) == 1


def test_grad_check_passes(work):
    out = work / "grad"
    assert main(["grad-check", "--out", str(out)]) == 0
    rows = list(csv.DictReader(open(out / "grad_check.csv")))
    assert rows and all(r["passed"] == "True" for r in rows)


@pytest.mark.parametrize("argv", [
    ["generate", "--checkpoint", "missing.ckpt", "--features", "nope.csv"],
    ["evaluate", "--pred", "missing.glm", "--target", "missing.glm"],
    ["timeline-insert", "--checkpoint", "missing.ckpt"],
    ["train", "--method", "nonsense"],
])
def test_errors_exit_nonzero(tmp_path, argv):
    assert main(argv + ["--out", str(tmp_path / "o")]) == 1


def test_bad_configs_exit_nonzero(tmp_path):
    (tmp_path / "broken.json").write_text("{not json")
    assert main(["train", "--out", str(tmp_path / "a"), "--config", str(tmp_path / "broken.json")]) == 1
    (tmp_path / "dct.json").write_text(json.dumps({"dct": True, "train": {"crop": 64}}))
    assert main(["train", "--out", str(tmp_path / "b"), "--config", str(tmp_path / "dct.json")]) == 1
    (tmp_path / "extra.json").write_text(json.dumps({"trian": {}}))
    assert main(["train", "--out", str(tmp_path / "c"), "--config", str(tmp_path / "extra.json")]) == 1


def test_console_entry_point_exit_codes(tmp_path):
    ok = subprocess.run([sys.executable, "-m", "gesturelab", "--version"], capture_output=True, text=True)
    assert ok.returncode == 0 and "gesturelab" in ok.stdout
    bad = subprocess.run([sys.executable, "-m", "gesturelab", "generate", "--out", str(tmp_path),
                          "--checkpoint", "missing.ckpt", "--features", "x.csv"], capture_output=True, text=True)
    assert bad.returncode == 1 and "error" in bad.stderr
    usage = subprocess.run([sys.executable, "-m", "gesturelab", "train"], capture_output=True, text=True)
    assert usage.returncode != 0
