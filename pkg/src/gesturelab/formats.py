"""On-disk formats: motion container, WAV audio, feature matrices and dataset directories.

Motion container layout (all little-endian)::

    8 bytes   magic b"GLMOTION"
    8 bytes   uint64 length of the JSON header in bytes
    n bytes   UTF-8 JSON header {format, version, mode, fps, shape, skeleton}
    rest      float64 payload, C order, ``prod(shape)`` values

The header is written with sorted keys and no timestamps, so writing a clip
that was just read reproduces the file byte for byte.
"""

import json
import struct
import wave
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .kinematics import Skeleton
from .signal import SAMPLE_RATE

MOTION_MAGIC = b"GLMOTION"
MOTION_VERSION = 1


class FormatError(ValueError):
    pass


@dataclass
class MotionClip:
    """(T, J, 6) local 6D rotations in 3D mode or (T, J, D) positions in 2D mode."""

    data: np.ndarray
    fps: float = 30.0
    mode: str = "3d"
    skeleton: object = None  # Skeleton, a path/name string, or None

    def __post_init__(self):
        self.data = np.asarray(self.data, dtype=np.float64)
        if self.data.ndim != 3:
            raise FormatError(f"motion data must be (T, J, d), got shape {self.data.shape}")
        if self.mode not in ("3d", "2d"):
            raise FormatError(f"motion mode must be '3d' or '2d', got {self.mode!r}")
        if self.mode == "3d" and self.data.shape[-1] != 6:
            raise FormatError("3D motion clips store 6D rotations (last axis 6)")
        if not self.fps > 0:
            raise FormatError("fps must be positive")


def _skeleton_header(skel):
    if skel is None or isinstance(skel, str):
        return skel
    return skel.to_dict()


def _write_container(path, magic, header, payload):
    blob = json.dumps(header, sort_keys=True, separators=(",", ":")).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(magic)
        fh.write(struct.pack("<Q", len(blob)))
        fh.write(blob)
        fh.write(np.ascontiguousarray(payload, dtype="<f8").tobytes())


def _read_container(path, magic):
    try:
        raw = Path(path).read_bytes()
    except OSError as exc:
        raise FormatError(f"cannot read {path}: {exc}") from exc
    if raw[:len(magic)] != magic:
        raise FormatError(f"{path}: not a {magic.decode()} file")
    off = len(magic)
    if len(raw) < off + 8:
        raise FormatError(f"{path}: truncated header")
    (n,) = struct.unpack("<Q", raw[off:off + 8])
    off += 8
    try:
        header = json.loads(raw[off:off + n].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise FormatError(f"{path}: corrupt JSON header") from exc
    return header, raw[off + n:]


def write_motion(path, clip):
    header = {
        "format": "gesturelab-motion",
        "version": MOTION_VERSION,
        "mode": clip.mode,
        "fps": float(clip.fps),
        "shape": list(clip.data.shape),
        "skeleton": _skeleton_header(clip.skeleton),
    }
    _write_container(path, MOTION_MAGIC, header, clip.data)


def read_motion(path):
    header, payload = _read_container(path, MOTION_MAGIC)
    if header.get("version") != MOTION_VERSION:
        raise FormatError(f"{path}: unsupported motion version {header.get('version')}")
    shape = tuple(header["shape"])
    count = int(np.prod(shape))
    if len(payload) != 8 * count:
        raise FormatError(f"{path}: payload holds {len(payload) // 8} values, header declares {count}")
    data = np.frombuffer(payload, dtype="<f8").reshape(shape).astype(np.float64)
    skel = header.get("skeleton")
    if isinstance(skel, dict):
        skel = Skeleton.from_dict(skel)
    return MotionClip(data, header["fps"], header["mode"], skel)


# ---------------------------------------------------------------------------
# Audio
# ---------------------------------------------------------------------------

def read_wav(path, sample_rate=SAMPLE_RATE):
    """16-bit mono PCM WAV -> float64 samples in [-1, 1)."""
    try:
        with wave.open(str(path), "rb") as w:
            if w.getnchannels() != 1:
                raise FormatError(f"{path}: expected mono audio, got {w.getnchannels()} channels")
            if w.getsampwidth() != 2:
                raise FormatError(f"{path}: expected 16-bit samples, got {8 * w.getsampwidth()}-bit")
            if w.getframerate() != sample_rate:
                raise FormatError(f"{path}: expected {sample_rate} Hz, got {w.getframerate()} Hz")
            frames = w.readframes(w.getnframes())
    except (wave.Error, EOFError, OSError) as exc:
        raise FormatError(f"cannot read WAV {path}: {exc}") from exc
    return np.frombuffer(frames, dtype="<i2").astype(np.float64) / 32768.0


def write_wav(path, samples, sample_rate=SAMPLE_RATE):
    pcm = np.clip(np.round(np.asarray(samples) * 32768.0), -32768, 32767).astype("<i2")
    with wave.open(str(path), "wb") as w:
        w.setnchannels(1)
        w.setsampwidth(2)
        w.setframerate(sample_rate)
        w.writeframes(pcm.tobytes())


# ---------------------------------------------------------------------------
# Feature matrices
# ---------------------------------------------------------------------------

def write_features(path, features):
    """Write a (T, F) matrix as CSV (``# shape: T,F`` header line) or JSON by suffix."""
    features = np.asarray(features, dtype=np.float64)
    path = Path(path)
    if path.suffix == ".json":
        path.write_text(json.dumps({"shape": list(features.shape), "data": features.ravel().tolist()}))
        return
    with open(path, "w") as fh:
        fh.write(f"# shape: {','.join(str(s) for s in features.shape)}\n")
        for row in features.reshape(features.shape[0], -1):
            fh.write(",".join(repr(float(v)) for v in row) + "\n")


def read_features(path):
    path = Path(path)
    try:
        text = path.read_text()
    except OSError as exc:
        raise FormatError(f"cannot read features {path}: {exc}") from exc
    if path.suffix == ".json":
        try:
            obj = json.loads(text)
            shape = tuple(int(s) for s in obj["shape"])
            data = np.asarray(obj["data"], dtype=np.float64)
        except (json.JSONDecodeError, KeyError, TypeError, ValueError) as exc:
            raise FormatError(f"{path}: malformed feature JSON") from exc
    else:
        lines = text.splitlines()
        if not lines or not lines[0].startswith("# shape:"):
            raise FormatError(f"{path}: missing '# shape: T,F' header")
        try:
            shape = tuple(int(s) for s in lines[0].split(":", 1)[1].split(","))
            data = np.array([[float(v) for v in ln.split(",")] for ln in lines[1:] if ln.strip()], dtype=np.float64)
        except ValueError as exc:
            raise FormatError(f"{path}: non-numeric feature entries") from exc
    if data.size != int(np.prod(shape)):
        raise FormatError(f"{path}: {data.size} values do not match declared shape {shape}")
    return data.reshape(shape)


# ---------------------------------------------------------------------------
# Dataset directories
# ---------------------------------------------------------------------------

_DATASET_ARRAYS = ("audio", "rotations", "positions", "envelopes")


def save_dataset(dataset, directory):
    """Directory with ``dataset.json``, ``skeleton.json`` and per-sequence JSON + .bin pairs."""
    d = Path(directory)
    d.mkdir(parents=True, exist_ok=True)
    dataset.skeleton.save(d / "skeleton.json")
    index = {
        "format": "gesturelab-dataset",
        "version": 1,
        "fps": dataset.fps,
        "seed": dataset.seed,
        "meta": dataset.meta,
        "sequences": [],
    }
    for i in range(dataset.n_sequences):
        name = f"seq_{i:04d}"
        arrays, offset = [], 0
        with open(d / f"{name}.bin", "wb") as fh:
            for key in _DATASET_ARRAYS:
                a = np.ascontiguousarray(getattr(dataset, key)[i], dtype="<f8")
                fh.write(a.tobytes())
                arrays.append({"name": key, "shape": list(a.shape), "offset": offset})
                offset += a.size
        (d / f"{name}.json").write_text(json.dumps({"name": name, "arrays": arrays}, indent=1, sort_keys=True))
        index["sequences"].append(name)
    (d / "dataset.json").write_text(json.dumps(index, indent=1, sort_keys=True))


def load_dataset(directory):
    from .data import SyntheticDataset

    d = Path(directory)
    try:
        index = json.loads((d / "dataset.json").read_text())
        skeleton = Skeleton.load(d / "skeleton.json")
    except (OSError, json.JSONDecodeError, KeyError) as exc:
        raise FormatError(f"cannot read dataset directory {d}: {exc}") from exc
    cols = {k: [] for k in _DATASET_ARRAYS}
    for name in index["sequences"]:
        desc = json.loads((d / f"{name}.json").read_text())
        buf = np.fromfile(d / f"{name}.bin", dtype="<f8")
        for a in desc["arrays"]:
            n = int(np.prod(a["shape"]))
            if a["offset"] + n > buf.size:
                raise FormatError(f"{name}.bin is shorter than its index declares")
            cols[a["name"]].append(buf[a["offset"]:a["offset"] + n].reshape(a["shape"]))
    if not index["sequences"]:
        raise FormatError(f"dataset directory {d} holds no sequences")
    return SyntheticDataset(
        skeleton, *(np.stack(cols[k]) for k in _DATASET_ARRAYS),
        fps=index["fps"], seed=index["seed"], meta=index.get("meta", {}),
    )
