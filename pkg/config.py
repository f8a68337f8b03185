"""Run configuration: YAML file -> validated nested dataclasses."""

import os
import types
import typing
from dataclasses import dataclass
from dataclasses import field
from dataclasses import fields
from dataclasses import is_dataclass
from pathlib import Path

import yaml

from datagen import CorpusConfig
from datagen import OracleConfig
from losses import LossWeights
from metrics import SimulationConfig

BASE_DIR = Path(__file__).parent.resolve()
DATA_ROOT_ENV = "DVQ_GRASP_DATA_ROOT"


class ConfigError(ValueError):
    pass


@dataclass
class DataSection:
    root: str = "data"
    dataset: str = "corpus.dvqd"
    num_objects: int = 64
    grasps_per_object: int = 8
    points_per_object: int = 3000
    seed: int = 0
    workers: int = 0
    oracle: OracleConfig = field(default_factory=OracleConfig)

    @property
    def dataset_path(self) -> Path:
        path = Path(self.dataset)
        return path if path.is_absolute() else Path(self.root) / path

    def corpus(self, num_vertices: int) -> CorpusConfig:
        return CorpusConfig(
            num_objects=self.num_objects,
            grasps_per_object=self.grasps_per_object,
            seed=self.seed,
            points_per_object=self.points_per_object,
            num_vertices=num_vertices,
            workers=self.workers,
            oracle=self.oracle,
        )


@dataclass
class HandSection:
    num_vertices: int = 778


@dataclass
class ModelSection:
    latent_dim: int = 64
    num_parts: int = 6
    encoder_hidden: list[int] = field(default_factory=lambda: [64, 128])
    shared_object_encoder: bool = False


@dataclass
class QuantizerSection:
    codebook_size: int = 64
    init_from_data: bool = False


@dataclass
class DecoderSection:
    hidden: int = 256
    correction_chunk: int = 5
    correction_hidden: int = 64
    use_correction: bool = True
    reverse_stages: bool = False


@dataclass
class LossSection:
    lambda_e: float = 10.0
    lambda_m: float = -50.0
    lambda_c: float = 1500.0
    lambda_p: float = 5.0
    lambda_h: float = 0.1
    lambda_v: float = 10.0
    beta: float = 0.25
    contact_threshold: float = 0.005
    normalize_contact: bool = True
    contact_terms: bool = True

    def weights(self) -> LossWeights:
        return LossWeights(
            lambda_e=self.lambda_e,
            lambda_m=self.lambda_m,
            lambda_c=self.lambda_c,
            lambda_p=self.lambda_p,
            lambda_h=self.lambda_h,
            lambda_v=self.lambda_v,
            beta=self.beta,
        )


@dataclass
class TrainSection:
    epochs: int = 200
    batch_size: int = 32
    learning_rate: float = 1e-4
    milestones: list[int] = field(default_factory=lambda: [60, 120, 160, 180])
    gamma: float = 0.5
    seed: int = 0
    checkpoint_dir: str = "checkpoints"
    device: str = "cpu"


@dataclass
class PriorSection:
    epochs: int = 100
    learning_rate: float = 3e-4
    batch_size: int = 64
    dim: int = 64
    layers: int = 2
    heads: int = 4


@dataclass
class SampleSection:
    num: int = 4
    seed: int = 0
    temperature: float = 1.0
    mask_ratio: float = 0.0


@dataclass
class EvaluateSection:
    contact_threshold: float = 0.005
    disp_threshold: float = 2.0
    max_pen_threshold: float = 10.0
    curve_points: int = 21
    diversity_clusters: int = 20
    seed: int = 0


@dataclass
class LoggingSection:
    level: str = "INFO"
    file: str = "logs/dvq_grasp.log"
    max_size_mb: int = 10
    backup_count: int = 5
    console_level: str = "WARNING"


@dataclass
class DatabaseSection:
    path: str = "runs.db"


@dataclass
class RunConfig:
    data: DataSection = field(default_factory=DataSection)
    hand: HandSection = field(default_factory=HandSection)
    model: ModelSection = field(default_factory=ModelSection)
    quantizer: QuantizerSection = field(default_factory=QuantizerSection)
    decoder: DecoderSection = field(default_factory=DecoderSection)
    losses: LossSection = field(default_factory=LossSection)
    train: TrainSection = field(default_factory=TrainSection)
    prior: PriorSection = field(default_factory=PriorSection)
    sample: SampleSection = field(default_factory=SampleSection)
    evaluate: EvaluateSection = field(default_factory=EvaluateSection)
    simulation: SimulationConfig = field(default_factory=SimulationConfig)
    logging: LoggingSection = field(default_factory=LoggingSection)
    database: DatabaseSection = field(default_factory=DatabaseSection)

    def validate(self) -> None:
        if not 1 <= self.model.num_parts <= 6:
            error_msg = f"model.num_parts must be in 1..6, got {self.model.num_parts}"
            raise ConfigError(error_msg)
        if self.hand.num_vertices not in (60, 778):
            error_msg = (
                f"hand.num_vertices must be 60 or 778, got {self.hand.num_vertices}"
            )
            raise ConfigError(error_msg)
        if not 0.0 <= self.sample.mask_ratio < 1.0:
            error_msg = (
                f"sample.mask_ratio must be in [0, 1), got {self.sample.mask_ratio}"
            )
            raise ConfigError(error_msg)
        if self.sample.temperature <= 0:
            error_msg = "sample.temperature must be positive"
            raise ConfigError(error_msg)
        try:
            self.losses.weights()
        except ValueError as e:
            error_msg = f"losses: {e}"
            raise ConfigError(error_msg) from e

    def as_dict(self) -> dict:
        return _to_dict(self)


def _to_dict(section) -> dict:
    out = {}
    for f in fields(section):
        value = getattr(section, f.name)
        out[f.name] = _to_dict(value) if is_dataclass(value) else value
    return out


def _coerce(value, hint, key: str):
    origin = typing.get_origin(hint)
    if origin in (typing.Union, types.UnionType):
        options = typing.get_args(hint)
        if value is None and type(None) in options:
            return None
        hint = next(o for o in options if o is not type(None))
        origin = typing.get_origin(hint)
    if origin is list:
        if not isinstance(value, list):
            error_msg = f"Config key '{key}' must be a list"
            raise ConfigError(error_msg)
        (item,) = typing.get_args(hint)
        return [_coerce(v, item, f"{key}[{i}]") for i, v in enumerate(value)]
    if hint is bool:
        ok = isinstance(value, bool)
    elif hint is int:
        ok = isinstance(value, int) and not isinstance(value, bool)
    elif hint is float:
        ok = isinstance(value, int | float) and not isinstance(value, bool)
        value = float(value) if ok else value
    elif hint is str:
        ok = isinstance(value, str)
    else:
        ok = True
    if not ok:
        error_msg = f"Config key '{key}' expects {hint.__name__}, got {value!r}"
        raise ConfigError(error_msg)
    return value


def _build(cls, values, prefix: str):
    if values is None:
        values = {}
    if not isinstance(values, dict):
        error_msg = f"Config section '{prefix or 'root'}' must be a mapping"
        raise ConfigError(error_msg)
    known = {f.name for f in fields(cls)}
    unknown = sorted(set(values) - known)
    if unknown:
        keys = ", ".join(f"{prefix}.{k}" if prefix else k for k in unknown)
        error_msg = f"Unknown config key(s): {keys}"
        raise ConfigError(error_msg)
    hints = typing.get_type_hints(cls)
    kwargs = {}
    for name, value in values.items():
        key = f"{prefix}.{name}" if prefix else name
        hint = hints[name]
        if is_dataclass(hint):
            kwargs[name] = _build(hint, value, key)
        else:
            kwargs[name] = _coerce(value, hint, key)
    return cls(**kwargs)


def _absolute(path: str) -> str:
    resolved = Path(path)
    return str(resolved if resolved.is_absolute() else BASE_DIR / resolved)


def parse_config(raw: dict | None) -> RunConfig:
    config = _build(RunConfig, raw, "")
    config.validate()

    data_root = os.environ.get(DATA_ROOT_ENV)
    if data_root:
        config.data.root = data_root
    config.data.root = _absolute(config.data.root)
    config.logging.file = _absolute(config.logging.file)
    config.database.path = _absolute(config.database.path)
    config.train.checkpoint_dir = _absolute(config.train.checkpoint_dir)
    return config


def load_config(config_path: str | Path = "config.yaml") -> RunConfig:
    """Load configuration file"""
    abs_config_path = BASE_DIR / config_path

    try:
        with open(abs_config_path) as f:
            raw = yaml.safe_load(f)
    except FileNotFoundError:
        error_msg = f"Configuration file not found: {abs_config_path}"
        raise FileNotFoundError(error_msg) from None
    except yaml.YAMLError as e:
        error_msg = f"Invalid YAML in configuration file {abs_config_path}: {e}"
        raise ValueError(error_msg) from e
    except Exception as e:
        error_msg = f"Error reading configuration file {abs_config_path}: {e}"
        raise RuntimeError(error_msg) from e

    return parse_config(raw)
