"""Procedural one-to-many audio/motion dataset.

Each audio pattern is 16 kHz PCM: a harmonic tone whose loudness follows a
band-limited random envelope.  Its log-mel features are paired with several
motion "styles".  All styles share the envelope as their rhythm (and a common
chest sway), but differ in which arm gestures, along which axis, and with
what lag.  The same audio therefore maps to several distinct valid motions.
"""

from dataclasses import dataclass, field

import numpy as np

from .kinematics import Skeleton, euler_xyz_to_rotmat, forward_kinematics, rotmat_to_sixd, upper_body_skeleton
from .signal import MEL_HOP, MOTION_FPS, SAMPLE_RATE, log_mel

# (gesturing arms, rotation axis, amplitude in degrees, lag in frames, right arm in antiphase)
STYLE_TEMPLATES = [
    ("left", "z", 70.0, 0, False),
    ("right", "z", 70.0, 0, False),
    ("both", "y", 60.0, 3, False),
    ("both", "z", 55.0, 0, True),
]

REST_ARM_DEG = 75.0
STYLE_MARGIN_CM = 3.0


@dataclass
class SyntheticDataset:
    skeleton: Skeleton
    audio: np.ndarray          # (n_seq, T, 64) log-mel features
    rotations: np.ndarray      # (n_seq, n_styles, T, J, 6) local 6D rotations
    positions: np.ndarray      # (n_seq, n_styles, T, J, 3) cm
    envelopes: np.ndarray      # (n_seq, T) rhythm in [0, 1]
    fps: int = MOTION_FPS
    seed: int = 0
    meta: dict = field(default_factory=dict)

    @property
    def n_sequences(self):
        return self.audio.shape[0]

    @property
    def n_styles(self):
        return self.rotations.shape[1]

    @property
    def n_frames(self):
        return self.audio.shape[1]

    def pairs(self):
        return [(i, s) for i in range(self.n_sequences) for s in range(self.n_styles)]

    def subset(self, indices):
        idx = np.asarray(indices)
        return SyntheticDataset(
            self.skeleton, self.audio[idx], self.rotations[idx], self.positions[idx], self.envelopes[idx],
            self.fps, self.seed, dict(self.meta),
        )

    def split(self, n_test):
        """First ``n - n_test`` sequences for training, the rest held out."""
        n = self.n_sequences
        if not 0 < n_test < n:
            raise ValueError(f"cannot hold out {n_test} of {n} sequences")
        return self.subset(range(n - n_test)), self.subset(range(n - n_test, n))

    def style_distance(self):
        """Mean position L1 (cm per joint) between different styles of the same audio."""
        d = []
        for i in range(self.n_sequences):
            for a in range(self.n_styles):
                for b in range(a + 1, self.n_styles):
                    diff = np.abs(self.positions[i, a] - self.positions[i, b]).sum(-1).mean()
                    d.append(diff)
        return float(np.mean(d))

    def sample_batch(self, rng, batch_size, crop):
        """Random (sequence, style) pairs, each randomly cropped to ``crop`` frames."""
        if crop > self.n_frames:
            raise ValueError(f"crop length {crop} exceeds sequence length {self.n_frames}")
        seq = rng.integers(0, self.n_sequences, batch_size)
        sty = rng.integers(0, self.n_styles, batch_size)
        start = rng.integers(0, self.n_frames - crop + 1, batch_size)
        sl = [slice(s, s + crop) for s in start]
        return {
            "audio": np.stack([self.audio[i, w] for i, w in zip(seq, sl)]),
            "rotations": np.stack([self.rotations[i, k, w] for i, k, w in zip(seq, sty, sl)]),
            "positions": np.stack([self.positions[i, k, w] for i, k, w in zip(seq, sty, sl)]),
            "sequence": seq,
            "style": sty,
        }


def band_limited_envelope(rng, n_frames, fps=MOTION_FPS, n_components=4, f_lo=0.3, f_hi=2.0):
    """Sum of random low-frequency sinusoids rescaled to [0, 1]."""
    t = np.arange(n_frames) / fps
    freqs = rng.uniform(f_lo, f_hi, n_components)
    phases = rng.uniform(0, 2 * np.pi, n_components)
    amps = rng.uniform(0.5, 1.0, n_components)
    x = (amps[:, None] * np.sin(2 * np.pi * freqs[:, None] * t[None] + phases[:, None])).sum(0)
    return (x - x.min()) / (x.max() - x.min())


def synthesize_audio(rng, envelope, fps=MOTION_FPS, sample_rate=SAMPLE_RATE, hop=MEL_HOP):
    """PCM whose loudness follows ``envelope``; exactly ``len(envelope) * hop`` samples."""
    n = len(envelope) * hop
    t = np.arange(n) / sample_rate
    f0 = rng.uniform(110.0, 220.0)
    carrier = sum(np.sin(2 * np.pi * f0 * h * t + rng.uniform(0, 2 * np.pi)) / h for h in range(1, 7))
    frame_t = np.arange(len(envelope)) / fps
    loud = 0.05 + 0.95 * np.interp(t, frame_t, envelope)
    noise = rng.standard_normal(n)
    return 0.3 * loud * (carrier + 0.1 * noise) + 1e-3 * noise


def _style_template(style):
    if style < len(STYLE_TEMPLATES):
        return STYLE_TEMPLATES[style]
    r = np.random.default_rng(1000 + style)
    return (
        ("left", "right", "both")[r.integers(3)],
        ("y", "z")[r.integers(2)],
        float(r.uniform(45, 75)),
        int(r.integers(0, 6)),
        bool(r.integers(2)),
    )


def style_euler_angles(envelope, style):
    """Per-joint intrinsic XYZ Euler angles (T, 8, 3) in degrees for the upper-body skeleton."""
    arms, axis, amp, lag, antiphase = _style_template(style)
    T = len(envelope)
    r = np.concatenate([np.full(lag, envelope[0]), envelope])[:T]
    ang = np.zeros((T, 8, 3))
    # shared by every style: chest sways with the rhythm, idle arm drift
    ang[:, 1, 2] = 6.0 * (envelope - 0.5)
    ang[:, 1, 0] = 3.0 * (envelope - 0.5)
    ax = {"y": 1, "z": 2}[axis]
    for side, sign, elbow in (("left", -1.0, 3), ("right", 1.0, 6)):
        ang[:, elbow, 2] = sign * REST_ARM_DEG
        ang[:, elbow + 1, 1] = 10.0 + 8.0 * envelope
        if arms in (side, "both"):
            drive = 1.0 - r if (antiphase and side == "right") else r
            # raising the arm rotates towards the horizontal (z) or forwards (y)
            ang[:, elbow, ax] += (-sign if ax == 2 else 1.0) * amp * drive
            ang[:, elbow + 1, 1] += 40.0 * drive
    return ang


def style_rotations(envelope, style):
    return rotmat_to_sixd(euler_xyz_to_rotmat(np.deg2rad(style_euler_angles(envelope, style))))


def generate_synthetic_dataset(seed=0, n_sequences=16, n_styles=3, n_frames=256, skeleton=None):
    if n_styles < 2:
        raise ValueError(f"n_styles must be >= 2 for a one-to-many dataset, got {n_styles}")
    if n_sequences < 1:
        raise ValueError(f"n_sequences must be >= 1, got {n_sequences}")
    if n_frames < 32:
        raise ValueError(f"n_frames must be >= 32, got {n_frames}")
    skeleton = skeleton or upper_body_skeleton()
    if skeleton.n_joints != 8:
        raise ValueError("the synthetic gesture styles are defined for the 8-joint upper-body skeleton")
    rng = np.random.default_rng(seed)
    audio, rots, envs = [], [], []
    for _ in range(n_sequences):
        env = band_limited_envelope(rng, n_frames)
        pcm = synthesize_audio(rng, env)
        audio.append(log_mel(pcm, n_frames_out=n_frames))
        rots.append(np.stack([style_rotations(env, s) for s in range(n_styles)]))
        envs.append(env)
    rots = np.stack(rots)
    pos = forward_kinematics(skeleton, rots)
    return SyntheticDataset(
        skeleton, np.stack(audio), rots, pos, np.stack(envs), MOTION_FPS, seed,
        {"n_sequences": n_sequences, "n_styles": n_styles, "n_frames": n_frames},
    )
