"""Command-line entry point: ``gesturelab <subcommand> --out DIR [--seed N] ...``.

Every subcommand writes its artifacts into ``--out``.  JSON and CSV reports
are deterministic for a given seed and inputs; wall-clock times only appear
in ``run.log`` and in the training log CSV.
"""

import argparse
import csv
import json
import logging
import sys
import time
from concurrent.futures import ProcessPoolExecutor
from pathlib import Path

import numpy as np

from . import __version__
from .config import ConfigError, ExperimentConfig
from .formats import FormatError, MotionClip, load_dataset, read_features, read_motion, read_wav, save_dataset, write_motion
from .metrics import MetricReport, format_table
from .model import SplitLatentModel

log = logging.getLogger("gesturelab")


class CLIError(Exception):
    pass


# ---------------------------------------------------------------------------
# Output helpers
# ---------------------------------------------------------------------------

def _write_json(path, obj):
    Path(path).write_text(json.dumps(_plain(obj), indent=2, sort_keys=True) + "\n")


def _plain(obj):
    if isinstance(obj, dict):
        return {str(k): _plain(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_plain(v) for v in obj]
    if isinstance(obj, np.generic):
        return obj.item()
    if isinstance(obj, np.ndarray):
        return obj.tolist()
    return obj


def _write_csv(path, rows):
    keys = []
    for r in rows:
        for k in r:
            if k not in keys:
                keys.append(k)
    with open(path, "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=keys, lineterminator="\n")
        w.writeheader()
        for r in rows:
            w.writerow({k: _fmt(v) for k, v in r.items()})


def _fmt(v):
    if isinstance(v, float):
        return repr(v)
    return "" if v is None else v


def _setup_out(args):
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    handler = logging.FileHandler(out / "run.log", mode="a")
    handler.setFormatter(logging.Formatter("%(asctime)s %(levelname)s %(message)s"))
    log.addHandler(handler)
    log.setLevel(logging.INFO)
    log.info("gesturelab %s: %s", __version__, " ".join(sys.argv[1:]))
    return out


def _config(args):
    cfg = ExperimentConfig.load(args.config) if args.config else ExperimentConfig()
    d = cfg.to_dict()
    d["train"]["seed"] = args.seed
    for key in ("method", "mode"):
        if getattr(args, key, None):
            d[key] = getattr(args, key)
    if getattr(args, "dct", False):
        d["dct"] = True
        d["train"]["crop"] = 128
    if getattr(args, "steps", None):
        d["train"]["steps"] = args.steps
    return ExperimentConfig.from_dict(d)


def _datasets(cfg, data_dir=None):
    """(full, train, test) datasets from a directory or the synthetic generator."""
    from .data import generate_synthetic_dataset

    path = data_dir or (cfg.dataset.path if cfg.dataset.source == "files" else None)
    if path:
        full = load_dataset(path)
    else:
        o = cfg.dataset
        full = generate_synthetic_dataset(o.seed, o.n_sequences, o.n_styles, o.n_frames)
    n_test = min(cfg.dataset.n_test, full.n_sequences - 1)
    train_set, test_set = full.split(n_test)
    return full, train_set, test_set


def _load_model(path):
    try:
        model, meta = SplitLatentModel.load(path)
    except (OSError, KeyError, ValueError) as exc:
        raise CLIError(f"cannot load checkpoint {path}: {exc}") from exc
    return model, meta


# ---------------------------------------------------------------------------
# Subcommands
# ---------------------------------------------------------------------------

def cmd_dataset_gen(args):
    from .data import generate_synthetic_dataset

    out = _setup_out(args)
    cfg = _config(args)
    o = cfg.dataset
    ds = generate_synthetic_dataset(
        args.seed, args.n_sequences or o.n_sequences, args.n_styles or o.n_styles, args.n_frames or o.n_frames
    )
    save_dataset(ds, out)
    _write_json(out / "summary.json", {
        "seed": args.seed, "n_sequences": ds.n_sequences, "n_styles": ds.n_styles, "n_frames": ds.n_frames,
        "inter_style_distance_cm": ds.style_distance(),
    })
    print(f"wrote {ds.n_sequences} sequences x {ds.n_styles} styles to {out}")


def heldout_report(model, test_set, cfg, extractor=None, seed=0):
    """Reconstruction metrics against every held-out pair plus generation diversity."""
    from .metrics import evaluate
    from .train import model_motion, multimodality_of, heldout_positions
    from .metrics import metric_diversity

    reps = []
    for i in range(test_set.n_sequences):
        for s in range(test_set.n_styles):
            batch = {"rotations": test_set.rotations[i, s][None], "positions": test_set.positions[i, s][None]}
            motion = model_motion(batch, model.cfg)
            I = model._specific_code_any_length(motion) if model.cfg.split else None
            S = model.shared_code(test_set.audio[i][None])
            pred = model.decode(S, I).data[0]
            target = motion[0]
            reps.append(evaluate(pred, target, test_set.skeleton, model.cfg.mode, extractor,
                                 cfg.metrics.pck_delta, cfg.metrics.pck_unit, cfg.metrics.diversity_clip,
                                 cfg.metrics.fid_clip))
    rep = MetricReport.mean(reps)
    gen = heldout_positions(model, test_set, seed=seed)
    if gen.shape[1] >= 2 * cfg.metrics.diversity_clip:
        rep.diversity = float(np.mean([metric_diversity(g, cfg.metrics.diversity_clip) for g in gen]))
    else:
        rep.diversity = None
    rep.multimodality = multimodality_of(model, test_set, n_runs=min(cfg.metrics.runs, 5), seed=seed)
    return rep


def cmd_train(args):
    from .plotting import plot_loss_curve
    from .train import train, write_log_csv

    out = _setup_out(args)
    cfg = _config(args)
    full, train_set, test_set = _datasets(cfg, args.data)
    model_cfg, train_cfg = cfg.model_and_train_configs(full.skeleton.n_joints)
    _write_json(out / "config.json", cfg.to_dict())
    _write_json(out / "model_config.json", model_cfg.to_dict())
    t0 = time.time()
    res = train(train_set, model_cfg, train_cfg,
                progress=lambda row: log.info("step %d total %.4f", row["step"], row["total"]))
    log.info("training finished in %.1f s", time.time() - t0)
    res.model.save(out / "model.ckpt", {"config": cfg.to_dict()})
    write_log_csv(out / "train_log.csv", res.log)
    plot_loss_curve(res.log, out / "loss_curve.png")
    rep = heldout_report(res.model, test_set, cfg, seed=args.seed)
    _write_json(out / "metrics.json", {"config": cfg.to_dict(), "metrics": rep.to_dict()})
    (out / "metrics.txt").write_text(format_table([(cfg.method, rep)]) + "\n")
    print(format_table([(cfg.method, rep)]))


def _audio_input(args):
    if args.audio:
        from .signal import log_mel

        pcm = read_wav(args.audio)
        return log_mel(pcm)
    if args.features:
        feats = read_features(args.features)
        if feats.ndim != 2:
            raise CLIError("feature matrix must be 2-D (frames x bands)")
        return feats
    if args.data:
        ds = load_dataset(args.data)
        if not 0 <= args.sequence < ds.n_sequences:
            raise CLIError(f"sequence {args.sequence} out of range (dataset has {ds.n_sequences})")
        return ds.audio[args.sequence]
    raise CLIError("give one of --audio, --features or --data")


def cmd_generate(args):
    from .metrics import metric_multimodality
    from .train import positions_of

    out = _setup_out(args)
    model, _ = _load_model(args.checkpoint)
    feats = _audio_input(args)
    from .kinematics import upper_body_skeleton

    skeleton = upper_body_skeleton()
    motions, positions = [], []
    for r in range(args.runs):
        m = model.generate(feats, seed=args.seed + r)[0]
        clip = MotionClip(m, 30.0, model.cfg.mode, skeleton if model.cfg.mode == "3d" else None)
        write_motion(out / f"motion_{r:03d}.glm", clip)
        motions.append(m)
        positions.append(positions_of(m, model.cfg, skeleton))
    summary = {"runs": args.runs, "seed": args.seed, "frames": int(feats.shape[0])}
    if args.runs >= 2:
        summary["multimodality"] = metric_multimodality(positions)
    _write_json(out / "generation.json", summary)
    print(json.dumps(summary, sort_keys=True))


def cmd_evaluate(args):
    from .kinematics import Skeleton
    from .metrics import FeatureExtractor, evaluate

    out = _setup_out(args)
    cfg = _config(args)
    pred, target = read_motion(args.pred), read_motion(args.target)
    if pred.mode != target.mode:
        raise CLIError("prediction and target modes differ")
    skel = Skeleton.load(args.skeleton) if args.skeleton else (target.skeleton if not isinstance(target.skeleton, str) else None)
    if pred.mode == "3d" and skel is None:
        raise CLIError("3D evaluation needs a skeleton (embed one in the motion file or pass --skeleton)")
    extractor = FeatureExtractor.load(args.extractor) if args.extractor else None
    m = cfg.metrics
    rep = evaluate(pred.data, target.data, skel, pred.mode, extractor, m.pck_delta, m.pck_unit, m.diversity_clip, m.fid_clip)
    _write_json(out / "report.json", {"config": cfg.to_dict(), "pred": str(args.pred), "target": str(args.target),
                                      "metrics": rep.to_dict()})
    _write_csv(out / "report.csv", [rep.to_dict()])
    table = format_table([(Path(args.pred).stem, rep)], label="Motion")
    (out / "report.txt").write_text(table + "\n")
    print(table)


def _noise_one(job):
    from .metrics import evaluate, add_euler_noise

    rot, skel, sigma, seed, kw = job
    noisy = add_euler_noise(rot, sigma, np.random.default_rng(seed))
    return evaluate(noisy, rot, skel, "3d", None, **kw)


def cmd_noise_exp(args):
    from .data import generate_synthetic_dataset
    from .kinematics import upper_body_skeleton
    from .plotting import plot_noise

    out = _setup_out(args)
    cfg = _config(args)
    if args.motion:
        clip = read_motion(args.motion)
        if clip.mode != "3d":
            raise CLIError("the noise experiment perturbs rotations; give a 3D motion")
        rot = clip.data
        skel = clip.skeleton if clip.skeleton is not None and not isinstance(clip.skeleton, str) else upper_body_skeleton()
    else:
        ds = generate_synthetic_dataset(cfg.dataset.seed, 1, 2, cfg.dataset.n_frames)
        rot, skel = ds.rotations[0, 0], ds.skeleton
    sigmas = args.sigmas or cfg.metrics.noise_sigmas
    n_seeds = args.seeds or cfg.metrics.noise_seeds
    m = cfg.metrics
    kw = {"pck_delta": m.pck_delta, "pck_unit": m.pck_unit, "diversity_clip": m.diversity_clip, "fid_clip": m.fid_clip}
    jobs = [(rot, skel, s, args.seed + k, kw) for s in sigmas for k in range(n_seeds)]
    if args.workers > 1:
        with ProcessPoolExecutor(args.workers) as pool:
            reps = list(pool.map(_noise_one, jobs))
    else:
        reps = [_noise_one(j) for j in jobs]
    rows = [(float(s), MetricReport.mean(reps[i * n_seeds:(i + 1) * n_seeds])) for i, s in enumerate(sigmas)]
    _write_csv(out / "noise.csv", [{"sigma_deg": s, **rep.to_dict()} for s, rep in rows])
    _write_json(out / "noise.json", {"config": cfg.to_dict(), "seeds": n_seeds,
                                     "rows": [{"sigma_deg": s, "metrics": rep.to_dict()} for s, rep in rows]})
    table = format_table([(f"GT + N(0,{s:g} deg)", rep) for s, rep in rows], label="Noise")
    (out / "noise.txt").write_text(table + "\n")
    plot_noise(rows, out / "noise.png")
    print(table)


def cmd_rho_sweep(args):
    from .plotting import plot_rho_sweep
    from .train import rho_sweep

    out = _setup_out(args)
    cfg = _config(args)
    _, train_set, test_set = _datasets(cfg, args.data)
    model_cfg, train_cfg = cfg.model_and_train_configs(train_set.skeleton.n_joints)
    rows = rho_sweep(train_set, test_set, args.rhos, model_cfg, train_cfg,
                     progress=lambda row: log.info("step %d total %.4f", row["step"], row["total"]))
    for r in rows:
        log.info("rho %g trained in %.1f s", r["rho"], r.pop("seconds"))
    best = min(rows, key=lambda r: r["pos_l1"])
    l1 = [r["pos_l1"] for r in rows]
    trend = "increasing" if all(a <= b for a, b in zip(l1, l1[1:])) else \
        "decreasing" if all(a >= b for a, b in zip(l1, l1[1:])) else "non-monotone"
    _write_csv(out / "rho_sweep.csv", rows)
    _write_json(out / "rho_sweep.json", {"config": cfg.to_dict(), "rows": rows, "best_rho_by_pos_l1": best["rho"],
                                         "pos_l1_trend": trend})
    lines = [f"{'rho':>6}  {'Pos.L1':>8}  {'Gen.L1':>8}  {'MM':>8}"]
    lines += [f"{r['rho']:>6g}  {r['pos_l1']:>8.4f}  {r['nearest_l1']:>8.4f}  {r['multimodality']:>8.4f}" for r in rows]
    (out / "rho_sweep.txt").write_text("\n".join(lines) + "\n")
    plot_rho_sweep(rows, out / "rho_sweep.png")
    print("\n".join(lines))


def cmd_dct_ablate(args):
    from .experiments import dct_ablation, specific_code_ablation
    from .plotting import plot_dct_ablation
    from .train import train

    out = _setup_out(args)
    cfg = _config(args)
    _, train_set, test_set = _datasets(cfg, args.data)
    if args.checkpoint:
        model, _ = _load_model(args.checkpoint)
    else:
        d = cfg.to_dict()
        d["dct"], d["train"]["crop"] = True, 128
        cfg = ExperimentConfig.from_dict(d)
        model_cfg, train_cfg = cfg.model_and_train_configs(train_set.skeleton.n_joints)
        model = train(train_set, model_cfg, train_cfg,
                      progress=lambda row: log.info("step %d total %.4f", row["step"], row["total"])).model
        model.save(out / "model.ckpt", {"config": cfg.to_dict()})
    if not model.cfg.dct:
        raise CLIError("dct-ablate needs a model trained with the DCT variant (--dct)")
    rows = dct_ablation(model, test_set, seeds=range(args.seed, args.seed + args.draws))
    codes = specific_code_ablation(model, test_set)
    _write_csv(out / "dct_ablation.csv", rows)
    _write_json(out / "dct_ablation.json", {"config": cfg.to_dict(), "rows": rows, "reconstruction": codes})
    lines = [f"{'Edit':<12}  {'Pos.L1':>8}  {'Speed':>8}"]
    lines += [f"{r['edit']:<12}  {r['pos_l1']:>8.4f}  {r['speed']:>8.4f}" for r in rows]
    lines.append(f"reconstruction with I_M: {codes['pos_l1']:.4f}  with I = 0: {codes['pos_l1_zero_I']:.4f}")
    (out / "dct_ablation.txt").write_text("\n".join(lines) + "\n")
    plot_dct_ablation(rows, out / "dct_ablation.png")
    print("\n".join(lines))


def cmd_timeline_insert(args):
    from .experiments import timeline_insertion
    from .plotting import plot_timeline
    from .train import positions_of

    out = _setup_out(args)
    cfg = _config(args)
    model, _ = _load_model(args.checkpoint)
    if args.data:
        ds = load_dataset(args.data)
    else:
        _, _, ds = _datasets(cfg)
    if not (0 <= args.sequence < ds.n_sequences and 0 <= args.style < ds.n_styles):
        raise CLIError("sequence or style index out of range")
    res = timeline_insertion(model, ds, args.sequence, args.style, args.start, args.length, args.seed)
    motion = res.pop("motion")
    write_motion(out / "edited.glm", MotionClip(motion, ds.fps, model.cfg.mode, ds.skeleton if model.cfg.mode == "3d" else None))
    res.update({"sequence": args.sequence, "style": args.style, "start": args.start, "length": args.length,
                "seed": args.seed})
    res["span_within_quarter_style_distance"] = res["span_pos_l1"] < 0.25 * res["inter_style_distance"]
    res["boundary_smooth"] = res["spike_ratio"] <= 3.0
    _write_json(out / "timeline.json", res)
    p = positions_of(motion, model.cfg, ds.skeleton)
    plot_timeline(p, ds.positions[args.sequence, args.style], args.start, args.start + args.length, out / "timeline.png")
    print(json.dumps(_plain(res), indent=2, sort_keys=True))


def cmd_grad_check(args):
    from .experiments import gradient_suite

    out = _setup_out(args)
    rows = gradient_suite(args.seed)
    _write_csv(out / "grad_check.csv", rows)
    _write_json(out / "grad_check.json", {"seed": args.seed, "rows": rows})
    failed = [r["name"] for r in rows if not r["passed"]]
    for r in rows:
        print(f"{r['kind']:<5} {r['name']:<22} {r['error']:.3e}  {'ok' if r['passed'] else 'FAIL'}")
    if failed:
        raise CLIError(f"gradient check failed for: {', '.join(failed)}")


# ---------------------------------------------------------------------------
# Parser
# ---------------------------------------------------------------------------

def _common(p):
    p.add_argument("--out", required=True, help="output directory")
    p.add_argument("--seed", type=int, default=0, help="random seed (default 0)")
    p.add_argument("--config", help="experiment config JSON")


def build_parser():
    parser = argparse.ArgumentParser(prog="gesturelab", description="Split-latent audio-to-gesture laboratory.")
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = parser.add_subparsers(dest="command", required=True)

    ds = sub.add_parser("dataset", help="dataset utilities")
    ds_sub = ds.add_subparsers(dest="dataset_command", required=True)
    gen = ds_sub.add_parser("gen", help="write a synthetic one-to-many dataset directory")
    _common(gen)
    gen.add_argument("--n-sequences", type=int)
    gen.add_argument("--n-styles", type=int)
    gen.add_argument("--n-frames", type=int)
    gen.set_defaults(func=cmd_dataset_gen)

    tr = sub.add_parser("train", help="train a model and report held-out metrics")
    _common(tr)
    tr.add_argument("--data", help="dataset directory (default: synthetic data from the config)")
    tr.add_argument("--method", help="ablation preset: baseline, split, relaxed, mapping, bicycle, full")
    tr.add_argument("--mode", choices=["3d", "2d"])
    tr.add_argument("--steps", type=int)
    tr.add_argument("--dct", action="store_true", help="train the DCT latent variant (128-frame clips)")
    tr.set_defaults(func=cmd_train)

    g = sub.add_parser("generate", help="generate motions for audio")
    _common(g)
    g.add_argument("--checkpoint", required=True)
    g.add_argument("--audio", help="16 kHz mono 16-bit WAV")
    g.add_argument("--features", help="precomputed log-mel features (CSV or JSON)")
    g.add_argument("--data", help="dataset directory; use --sequence to pick the audio")
    g.add_argument("--sequence", type=int, default=0)
    g.add_argument("--runs", type=int, default=1)
    g.set_defaults(func=cmd_generate)

    ev = sub.add_parser("evaluate", help="metrics of a predicted motion against a target")
    _common(ev)
    ev.add_argument("--pred", required=True)
    ev.add_argument("--target", required=True)
    ev.add_argument("--skeleton", help="skeleton JSON (default: the one embedded in the target)")
    ev.add_argument("--extractor", help="trained feature extractor checkpoint for LPIPS/FID")
    ev.set_defaults(func=cmd_evaluate)

    nz = sub.add_parser("noise-exp", help="metric sensitivity to Euler-angle noise")
    _common(nz)
    nz.add_argument("--motion", help="3D motion file (default: a synthetic clip)")
    nz.add_argument("--sigmas", type=float, nargs="+")
    nz.add_argument("--seeds", type=int, help="noise draws per sigma")
    nz.add_argument("--workers", type=int, default=1)
    nz.set_defaults(func=cmd_noise_exp)

    rs = sub.add_parser("rho-sweep", help="train one model per relaxed-loss threshold")
    _common(rs)
    rs.add_argument("--rhos", type=float, nargs="+", default=[0.0, 0.5, 2.0, 5.0])
    rs.add_argument("--data")
    rs.add_argument("--steps", type=int)
    rs.set_defaults(func=cmd_rho_sweep)

    da = sub.add_parser("dct-ablate", help="band-limit edits of latent codes in the DCT variant")
    _common(da)
    da.add_argument("--checkpoint", help="DCT-variant checkpoint (default: train one)")
    da.add_argument("--data")
    da.add_argument("--steps", type=int)
    da.add_argument("--draws", type=int, default=5, help="specific-code draws per row")
    da.set_defaults(func=cmd_dct_ablate)

    ti = sub.add_parser("timeline-insert", help="insert a reference clip's specific code into a generation")
    _common(ti)
    ti.add_argument("--checkpoint", required=True)
    ti.add_argument("--data", help="dataset directory (default: held-out synthetic sequences)")
    ti.add_argument("--sequence", type=int, default=0)
    ti.add_argument("--style", type=int, default=0)
    ti.add_argument("--start", type=int, default=64)
    ti.add_argument("--length", type=int, default=64)
    ti.set_defaults(func=cmd_timeline_insert)

    gc = sub.add_parser("grad-check", help="finite-difference checks of every op and loss")
    _common(gc)
    gc.set_defaults(func=cmd_grad_check)
    return parser


def main(argv=None):
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        args.func(args)
    except (CLIError, ConfigError, FormatError, ValueError, KeyError, OSError, FloatingPointError, RuntimeError) as exc:
        print(f"gesturelab: error: {exc}", file=sys.stderr)
        log.error("%s", exc)
        return 1
    finally:
        for h in list(log.handlers):
            h.close()
            log.removeHandler(h)
    return 0


def main_exit():
    sys.exit(main())


if __name__ == "__main__":
    main_exit()
