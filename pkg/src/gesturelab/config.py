"""JSON experiment configuration shared by every CLI subcommand."""

import json
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

from .model import DCT_LENGTH, EncoderConfig, ModelConfig
from .train import METHODS, TrainConfig


class ConfigError(ValueError):
    pass


@dataclass
class DatasetOptions:
    source: str = "synthetic"     # "synthetic" or "files"
    path: str = None              # dataset directory when source == "files"
    seed: int = 0
    n_sequences: int = 16
    n_styles: int = 3
    n_frames: int = 256
    n_test: int = 4


@dataclass
class MetricOptions:
    pck_delta: float = 0.2
    pck_unit: float = 100.0       # cm per unit of pck_delta
    diversity_clip: int = 50
    fid_clip: int = 64
    runs: int = 20                # generations per audio for multimodality
    extractor_steps: int = 600
    noise_sigmas: list = field(default_factory=lambda: [1.0, 5.0])
    noise_seeds: int = 20


@dataclass
class ExperimentConfig:
    mode: str = "3d"
    method: str = "full"
    encoder: str = "desk"         # "desk", "paper" or an explicit EncoderConfig dict
    dct: bool = False
    dataset: DatasetOptions = field(default_factory=DatasetOptions)
    train: TrainConfig = field(default_factory=TrainConfig)
    metrics: MetricOptions = field(default_factory=MetricOptions)

    def __post_init__(self):
        if isinstance(self.dataset, dict):
            self.dataset = _build(DatasetOptions, self.dataset, "dataset")
        if isinstance(self.metrics, dict):
            self.metrics = _build(MetricOptions, self.metrics, "metrics")
        if isinstance(self.train, dict):
            try:
                self.train = TrainConfig.from_dict(self.train)
            except (TypeError, ValueError) as exc:
                raise ConfigError(f"train: {exc}") from exc
        self.validate()

    def validate(self):
        if self.mode not in ("3d", "2d"):
            raise ConfigError(f"mode must be '3d' or '2d', got {self.mode!r}")
        if self.method not in METHODS:
            raise ConfigError(f"method must be one of {sorted(METHODS)}, got {self.method!r}")
        if not (isinstance(self.encoder, dict) or self.encoder in ("desk", "paper")):
            raise ConfigError("encoder must be 'desk', 'paper' or a dict of EncoderConfig fields")
        if self.dataset.source not in ("synthetic", "files"):
            raise ConfigError(f"dataset.source must be 'synthetic' or 'files', got {self.dataset.source!r}")
        if self.dataset.source == "files" and not self.dataset.path:
            raise ConfigError("dataset.path is required when dataset.source is 'files'")
        if self.dct and self.train.crop != DCT_LENGTH:
            raise ConfigError(f"the DCT variant trains on {DCT_LENGTH}-frame clips; set train.crop to {DCT_LENGTH}")
        if self.dct and self.dataset.n_frames < DCT_LENGTH:
            raise ConfigError(f"the DCT variant needs sequences of at least {DCT_LENGTH} frames")
        if self.train.stft and self.train.crop < 32:
            raise ConfigError("the STFT loss needs crops of at least 32 frames")
        if self.train.crop > self.dataset.n_frames:
            raise ConfigError("train.crop exceeds dataset.n_frames")
        if self.metrics.pck_delta <= 0 or self.metrics.pck_unit <= 0:
            raise ConfigError("PCK threshold and unit must be positive")
        if self.metrics.runs < 2:
            raise ConfigError("metrics.runs must be >= 2")
        if self.dataset.n_styles < 2:
            raise ConfigError("dataset.n_styles must be >= 2")
        if not 0 < self.dataset.n_test < self.dataset.n_sequences:
            raise ConfigError("dataset.n_test must lie strictly between 0 and n_sequences")

    def encoder_config(self):
        if isinstance(self.encoder, dict):
            return EncoderConfig(**self.encoder)
        return EncoderConfig.desk() if self.encoder == "desk" else EncoderConfig.paper()

    def model_and_train_configs(self, n_joints=8):
        from .train import method_configs

        base = ModelConfig(mode=self.mode, n_joints=n_joints, encoder=self.encoder_config(), dct=self.dct)
        return method_configs(self.method, base, self.train)

    def to_dict(self):
        return asdict(self)

    def to_json(self):
        return json.dumps(self.to_dict(), indent=2, sort_keys=True)

    @classmethod
    def from_dict(cls, d):
        return _build(cls, d, "config")

    @classmethod
    def load(cls, path):
        try:
            d = json.loads(Path(path).read_text())
        except OSError as exc:
            raise ConfigError(f"cannot read config {path}: {exc}") from exc
        except json.JSONDecodeError as exc:
            raise ConfigError(f"config {path} is not valid JSON: {exc}") from exc
        if not isinstance(d, dict):
            raise ConfigError("config must be a JSON object")
        return cls.from_dict(d)


def _build(cls, d, where):
    known = {f.name for f in fields(cls)}
    unknown = set(d) - known
    if unknown:
        raise ConfigError(f"{where}: unknown keys {sorted(unknown)}")
    try:
        return cls(**d)
    except ConfigError:
        raise
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"{where}: {exc}") from exc
