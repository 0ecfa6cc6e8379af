"""Experiment configuration: one schema-versioned JSON file drives every command.

Two presets exist: "desk" (small model and dataset, minutes on a CPU) and
"paper" (T=1000 schedule with batch 128 over 232 epochs and the full
learning-rate recipe). Parsing is strict: unknown sections or keys are
rejected, and cross-section consistency (schedule length vs evaluation
range, channel counts, spatial divisibility) is validated before any run.
"""

import dataclasses
import hashlib
import json
from dataclasses import dataclass, field
from pathlib import Path

from .denoiser import DenoiserConfig
from .errors import ValidationError
from .noise import PyramidConfig
from .schedule import TimeRange, linear_beta_schedule
from .synthgen import AnomalySpec, PhantomConfig
from .train import TrainConfig

__all__ = ["ExperimentConfig", "desk_config", "paper_config", "load_config", "PRESETS"]

SCHEMA_VERSION = 1


@dataclass(frozen=True)
class ScheduleConfig:
    T: int = 1000
    beta_1: float = 1e-4
    beta_T: float = 0.02

    def build(self):
        return linear_beta_schedule(self.T, self.beta_1, self.beta_T)


@dataclass(frozen=True)
class AnomalyConfig:
    t_low: int = 75
    t_high: int = 200
    agg: str = "gm"
    eval_noise: str = "gaussian"

    def __post_init__(self):
        if self.agg not in ("am", "gm"):
            raise ValidationError(f"agg must be am or gm, got {self.agg!r}")
        if self.eval_noise not in ("gaussian", "pyramidal"):
            raise ValidationError(
                f"eval_noise must be gaussian or pyramidal, got {self.eval_noise!r}"
            )

    def time_range(self) -> TimeRange:
        return TimeRange(self.t_low, self.t_high)


@dataclass(frozen=True)
class PostprocConfig:
    median_filter: int = 3  # 0 disables filtering
    dilate_radius: int = 1
    yen_bins: int = 256

    def __post_init__(self):
        if self.median_filter not in (0,) and (
            self.median_filter < 3 or self.median_filter % 2 == 0
        ):
            raise ValidationError(
                f"median_filter must be 0 or an odd size >= 3, got {self.median_filter}"
            )
        if self.dilate_radius < 0:
            raise ValidationError("dilate_radius must be >= 0")
        if self.yen_bins < 2:
            raise ValidationError("yen_bins must be >= 2")


@dataclass(frozen=True)
class MetricsConfig:
    n_candidates: int = 200

    def __post_init__(self):
        if self.n_candidates < 1:
            raise ValidationError("n_candidates must be >= 1")


@dataclass(frozen=True)
class DataConfig:
    n_train_slices: int = 2000
    n_test: int = 20


@dataclass(frozen=True)
class ModelConfig:
    in_channels: int = 2
    base_width: int = 16
    depth: int = 2
    time_embed_dim: int = 32

    def build(self) -> DenoiserConfig:
        return DenoiserConfig(
            in_channels=self.in_channels,
            base_width=self.base_width,
            depth=self.depth,
            time_embed_dim=self.time_embed_dim,
        )


# per-section seed fields are derived from the experiment seed, never stored
_SECTION_TYPES = {
    "schedule": ScheduleConfig,
    "model": ModelConfig,
    "pyramid": PyramidConfig,
    "train": TrainConfig,
    "anomaly": AnomalyConfig,
    "postproc": PostprocConfig,
    "metrics": MetricsConfig,
    "data": DataConfig,
    "phantom": PhantomConfig,
    "lesions": AnomalySpec,
}
_EXCLUDED_FIELDS = {"train": {"seed"}, "phantom": {"seed"}, "lesions": {"seed"}}


@dataclass(frozen=True)
class ExperimentConfig:
    seed: int = 0
    threads: int = 1
    normalize: bool = True
    normalize_percentile: float = 0.99
    schedule: ScheduleConfig = field(default_factory=ScheduleConfig)
    model: ModelConfig = field(default_factory=ModelConfig)
    pyramid: PyramidConfig = field(default_factory=PyramidConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    anomaly: AnomalyConfig = field(default_factory=AnomalyConfig)
    postproc: PostprocConfig = field(default_factory=PostprocConfig)
    metrics: MetricsConfig = field(default_factory=MetricsConfig)
    data: DataConfig = field(default_factory=DataConfig)
    phantom: PhantomConfig = field(default_factory=PhantomConfig)
    lesions: AnomalySpec = field(default_factory=AnomalySpec)

    def __post_init__(self):
        if self.threads < 1:
            raise ValidationError("threads must be >= 1")
        if not 0.0 < self.normalize_percentile <= 1.0:
            raise ValidationError("normalize_percentile must be in (0, 1]")
        if self.schedule.T < self.anomaly.t_high:
            raise ValidationError(
                f"schedule T={self.schedule.T} is shorter than the evaluation "
                f"range upper bound t_high={self.anomaly.t_high}"
            )
        div = 1 << self.model.depth
        if self.phantom.H % div or self.phantom.W % div:
            raise ValidationError(
                f"phantom H, W ({self.phantom.H}, {self.phantom.W}) must be "
                f"divisible by 2**depth = {div}"
            )
        if self.phantom.C != self.model.in_channels:
            raise ValidationError(
                f"phantom has {self.phantom.C} channels but the model expects "
                f"{self.model.in_channels}"
            )
        self.model.build()  # surface invalid model settings now

    def to_dict(self) -> dict:
        out = {
            "schema_version": SCHEMA_VERSION,
            "seed": self.seed,
            "threads": self.threads,
            "normalize": self.normalize,
            "normalize_percentile": self.normalize_percentile,
        }
        for section, cls in _SECTION_TYPES.items():
            payload = dataclasses.asdict(getattr(self, section))
            for excluded in _EXCLUDED_FIELDS.get(section, ()):
                payload.pop(excluded, None)
            out[section] = payload
        return out

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True) + "\n"

    def fingerprint(self) -> str:
        canonical = json.dumps(self.to_dict(), sort_keys=True, separators=(",", ":"))
        return hashlib.sha256(canonical.encode("utf-8")).hexdigest()[:16]

    def seeded_train(self) -> TrainConfig:
        return dataclasses.replace(self.train, seed=self.seed)

    def seeded_phantom(self) -> PhantomConfig:
        return dataclasses.replace(self.phantom, seed=self.seed)

    def seeded_lesions(self) -> AnomalySpec:
        return dataclasses.replace(self.lesions, seed=self.seed)


def _coerce_tuples(cls, payload: dict) -> dict:
    # JSON arrays arrive as lists; frozen dataclasses expect tuples
    out = {}
    for f in dataclasses.fields(cls):
        if f.name not in payload:
            continue
        value = payload[f.name]
        if isinstance(value, list):
            value = tuple(tuple(v) if isinstance(v, list) else v for v in value)
        out[f.name] = value
    return out


def config_from_dict(raw: dict) -> ExperimentConfig:
    raw = dict(raw)
    version = raw.pop("schema_version", None)
    if version != SCHEMA_VERSION:
        raise ValidationError(
            f"config schema_version must be {SCHEMA_VERSION}, got {version!r}"
        )
    kwargs = {}
    for scalar in ("seed", "threads", "normalize", "normalize_percentile"):
        if scalar in raw:
            kwargs[scalar] = raw.pop(scalar)
    for section, cls in _SECTION_TYPES.items():
        payload = raw.pop(section, None)
        if payload is None:
            continue
        if not isinstance(payload, dict):
            raise ValidationError(f"config section {section!r} must be an object")
        allowed = {f.name for f in dataclasses.fields(cls)}
        allowed -= _EXCLUDED_FIELDS.get(section, set())
        unknown = set(payload) - allowed
        if unknown:
            raise ValidationError(
                f"unknown keys in config section {section!r}: {sorted(unknown)}"
            )
        kwargs[section] = cls(**_coerce_tuples(cls, payload))
    if raw:
        raise ValidationError(f"unknown top-level config keys: {sorted(raw)}")
    return ExperimentConfig(**kwargs)


def load_config(path) -> ExperimentConfig:
    path = Path(path)
    try:
        raw = json.loads(path.read_text())
    except (OSError, json.JSONDecodeError) as exc:
        raise ValidationError(f"cannot read config {path}: {exc}") from exc
    return config_from_dict(raw)


def desk_config(seed: int = 0) -> ExperimentConfig:
    """Small-scale defaults: trains and evaluates in minutes on a CPU."""
    return ExperimentConfig(seed=seed)


def paper_config(seed: int = 0) -> ExperimentConfig:
    """Published training recipe: batch 128 for 232 epochs on the T=1000 schedule."""
    return ExperimentConfig(
        seed=seed,
        train=TrainConfig(epochs=232, batch_size=128),
    )


PRESETS = {"desk": desk_config, "paper": paper_config}
