"""Report figures rendered to PNG with the non-interactive Agg backend."""

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402


def _save(fig, path):
    fig.tight_layout()
    fig.savefig(path, dpi=110, metadata={"Software": None})
    plt.close(fig)
    return path


def plot_loss_curve(log, path, keys=None):
    """Loss terms against the step index (symlog y-axis, since diversity terms are negative)."""
    steps = [row["step"] for row in log]
    keys = keys or [k for k in log[0] if k not in ("step", "seconds")]
    fig, ax = plt.subplots(figsize=(7, 4))
    for k in keys:
        ax.plot(steps, [row.get(k, float("nan")) for row in log], label=k, lw=1.2)
    ax.set_yscale("symlog", linthresh=1.0)
    ax.set_xlabel("step")
    ax.set_ylabel("loss")
    ax.legend(fontsize=7, ncol=2)
    ax.grid(alpha=0.3)
    return _save(fig, path)


def plot_noise(rows, path, keys=("pos_l1", "accel_l1", "stft", "ssim", "pck")):
    """One panel per metric against the Euler noise level."""
    sigmas = [s for s, _ in rows]
    fig, axes = plt.subplots(1, len(keys), figsize=(3 * len(keys), 3))
    for ax, k in zip(axes, keys):
        ax.plot(sigmas, [getattr(rep, k) for _, rep in rows], "o-")
        ax.set_title(k)
        ax.set_xlabel("sigma (deg)")
        ax.grid(alpha=0.3)
    return _save(fig, path)


def plot_rho_sweep(rows, path):
    rhos = [r["rho"] for r in rows]
    fig, ax1 = plt.subplots(figsize=(6, 4))
    ax1.plot(rhos, [r["pos_l1"] for r in rows], "o-", color="tab:blue", label="reconstruction L1")
    ax1.plot(rhos, [r["nearest_l1"] for r in rows], "s--", color="tab:cyan", label="generation L1 (nearest style)")
    ax1.set_xlabel("rho (cm)")
    ax1.set_ylabel("position L1 (cm)")
    ax2 = ax1.twinx()
    ax2.plot(rhos, [r["multimodality"] for r in rows], "^-", color="tab:red", label="multimodality")
    ax2.set_ylabel("multimodality (cm)")
    lines = ax1.get_lines() + ax2.get_lines()
    ax1.legend(lines, [l.get_label() for l in lines], fontsize=8)
    ax1.grid(alpha=0.3)
    return _save(fig, path)


def plot_dct_ablation(rows, path):
    labels = [r["edit"] for r in rows]
    fig, (a, b) = plt.subplots(1, 2, figsize=(8, 3.5))
    a.bar(labels, [r["pos_l1"] for r in rows], color="tab:blue")
    a.set_ylabel("position L1 (cm)")
    b.bar(labels, [r["speed"] for r in rows], color="tab:orange")
    b.set_ylabel("mean joint speed (cm/frame)")
    for ax in (a, b):
        ax.tick_params(axis="x", rotation=30, labelsize=8)
        ax.grid(alpha=0.3, axis="y")
    return _save(fig, path)


def plot_timeline(positions, reference, start, stop, path, joint=4):
    """Height of one joint for the edited generation and the reference, span shaded."""
    fig, ax = plt.subplots(figsize=(7, 3))
    ax.plot(positions[:, joint, 1], label="edited generation")
    ax.plot(reference[:, joint, 1], "--", label="reference")
    ax.axvspan(start, stop, color="grey", alpha=0.2, label="inserted span")
    ax.set_xlabel("frame")
    ax.set_ylabel("joint height (cm)")
    ax.legend(fontsize=8)
    return _save(fig, path)
