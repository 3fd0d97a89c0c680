"""
tagtriplet Configuration Management
Centralized pipeline configuration: dataclass defaults, environment variables,
flat `section.key = value` files and command-line overrides.
"""

import os
import logging
from dataclasses import dataclass, field, fields
from pathlib import Path
from typing import Dict, Iterable, List, Optional, Tuple

from dotenv import dotenv_values, load_dotenv

from .errors import ConfigError

logger = logging.getLogger(__name__)

# Permanent data directory (~/.tagtriplet); created on first write, not at import
DATA_DIR = Path.home() / ".tagtriplet"

ENV_PREFIX = "TAGTRIPLET_"

TAG_SETS = ("genres", "styles", "moods", "themes")
TASKS = ("genres", "styles", "moods", "themes", "artists", "album")
# train / validation / test shares of the reference corpus split
DEFAULT_FRACTIONS = (122766 / 143585, 6461 / 143585, 14358 / 143585)


def split_list(value: str) -> List[str]:
    """Split a comma separated config value, dropping empty items"""
    return [item.strip() for item in value.split(",") if item.strip()]


@dataclass
class PathsConfig:
    """Artifact locations; relative paths resolve against output_dir"""
    output_dir: str = str(DATA_DIR / "runs")
    tags_file: str = "tags.tsv"
    corpus_file: str = "corpus.tsv"
    features_manifest: str = "features.tsv"
    wav_manifest: str = "wavs.tsv"
    lsi_model: str = "lsi.model"
    checkpoint: str = "encoder.ckpt"
    loss_history: str = "loss_history.tsv"
    embeddings: str = "embeddings.tsv"
    split_file: str = "split.tsv"

    def resolve(self, name: str) -> Path:
        """Resolve one of the path fields against the output directory"""
        path = Path(getattr(self, name)).expanduser()
        if path.is_absolute():
            return path
        return Path(self.output_dir).expanduser() / path


@dataclass
class TagConfig:
    """Tag-set selection"""
    tag_sets: str = ",".join(TAG_SETS)
    required: str = ",".join(TAG_SETS)

    def __post_init__(self):
        if not split_list(self.tag_sets):
            raise ConfigError("tags.tag_sets must name at least one tag_set")

    @property
    def tag_set_list(self) -> List[str]:
        return split_list(self.tag_sets)

    @property
    def required_list(self) -> List[str]:
        return split_list(self.required)


@dataclass
class LsiConfig:
    """Truncated SVD settings and the topic grid used by sweeps"""
    k: int = 10
    grid_start: int = 10
    grid_stop: int = 400
    grid_step: int = 10
    tol: float = 1e-10
    max_iter: int = 10000
    dense_limit: int = 500

    def __post_init__(self):
        if self.k < 1:
            raise ConfigError("lsi.k must be at least 1")
        if self.grid_start < 1 or self.grid_step < 1 or self.grid_stop < self.grid_start:
            raise ConfigError("lsi grid must satisfy 1 <= grid_start <= grid_stop and grid_step >= 1")
        if self.max_iter < 1:
            raise ConfigError("lsi.max_iter must be at least 1")

    @property
    def grid(self) -> List[int]:
        return list(range(self.grid_start, self.grid_stop + 1, self.grid_step))


@dataclass
class MiningConfig:
    """Online triplet selection"""
    theta_pos: float = 0.8
    theta_neg: float = 0.2
    strategy: str = "paper-literal"
    batch_size: int = 600
    relatedness: str = "lsi"

    def __post_init__(self):
        if not self.theta_neg < self.theta_pos:
            raise ConfigError("mining.theta_neg must be smaller than mining.theta_pos")
        if self.strategy not in ("paper-literal", "batch-hard", "random"):
            raise ConfigError(f"unknown mining.strategy: {self.strategy}")
        if self.batch_size < 3:
            raise ConfigError("mining.batch_size must be at least 3")
        if self.relatedness not in ("lsi", "overlap"):
            raise ConfigError(f"unknown mining.relatedness: {self.relatedness}")


@dataclass
class TrainerConfig:
    """Encoder, loss and optimizer settings"""
    encoder: str = "mlp"
    hidden: str = "128"
    dim: int = 256
    output_normalize: bool = True
    margin: float = 0.2
    reduction: str = "mean"
    optimizer: str = "adam"
    learning_rate: float = 1e-3
    epochs: int = 10
    seed: int = 42
    dump_triplets: bool = False

    def __post_init__(self):
        if self.encoder not in ("identity", "linear", "mlp"):
            raise ConfigError(f"unknown trainer.encoder: {self.encoder}")
        if self.dim < 1:
            raise ConfigError("trainer.dim must be at least 1")
        if self.margin < 0:
            raise ConfigError("trainer.margin must be nonnegative")
        if self.reduction not in ("sum", "mean"):
            raise ConfigError(f"unknown trainer.reduction: {self.reduction}")
        if self.optimizer not in ("sgd", "sgd-momentum", "adam"):
            raise ConfigError(f"unknown trainer.optimizer: {self.optimizer}")
        if self.learning_rate <= 0:
            raise ConfigError("trainer.learning_rate must be positive")
        if self.epochs < 1:
            raise ConfigError("trainer.epochs must be at least 1")
        try:
            self.hidden_dims
        except ValueError:
            raise ConfigError(f"trainer.hidden must be a comma separated list of ints: {self.hidden!r}")

    @property
    def hidden_dims(self) -> List[int]:
        return [int(x) for x in split_list(self.hidden)]


@dataclass
class AudioConfig:
    """Audio pre-processing"""
    sample_rate: int = 22050
    offset: float = 3.0
    duration: float = 6.0
    n_fft: int = 2048
    hop: int = 1024
    n_mels: int = 80
    f_min: float = 16.0
    f_max: float = 11000.0
    feature_mode: str = "band-stats"

    def __post_init__(self):
        if self.sample_rate <= 0:
            raise ConfigError("audio.sample_rate must be positive")
        if self.feature_mode not in ("flatten", "band-stats"):
            raise ConfigError(f"unknown audio.feature_mode: {self.feature_mode}")


@dataclass
class EvalConfig:
    """Splitting and retrieval evaluation"""
    k: int = 100
    metric: str = "euclidean"
    tasks: str = ",".join(TASKS)
    fractions: str = ",".join(repr(f) for f in DEFAULT_FRACTIONS)
    split_seed: int = 42

    def __post_init__(self):
        if self.k < 1:
            raise ConfigError("eval.k must be at least 1")
        if self.metric not in ("euclidean", "cosine"):
            raise ConfigError(f"unknown eval.metric: {self.metric}")
        unknown = set(self.task_list) - set(TASKS)
        if unknown:
            raise ConfigError(f"unknown eval.tasks: {', '.join(sorted(unknown))}")
        try:
            fr = self.fraction_values
        except ValueError:
            raise ConfigError(f"eval.fractions must be three numbers: {self.fractions!r}")
        if len(fr) != 3 or min(fr) <= 0 or abs(sum(fr) - 1.0) > 1e-9:
            raise ConfigError("eval.fractions must be three positive numbers summing to 1")

    @property
    def task_list(self) -> List[str]:
        return split_list(self.tasks)

    @property
    def fraction_values(self) -> Tuple[float, ...]:
        return tuple(float(x) for x in split_list(self.fractions))


@dataclass
class SweepConfig:
    """Tag-set combination x topic-count sweep"""
    combos: str = "all"
    workers: int = 1
    cache_file: str = "sweep_cache.sqlite"

    def __post_init__(self):
        if self.workers < 1:
            raise ConfigError("sweep.workers must be at least 1")


@dataclass
class SynthConfig:
    """Synthetic corpus generator"""
    n_clusters: int = 4
    tracks_per_cluster: int = 400
    feature_dim: int = 32
    noise_sigma: float = 0.1
    tags_per_cluster: int = 5
    artists_per_cluster: int = 50
    tracks_per_album: int = 2
    overlap: float = 0.2
    extra_tag_prob: float = 0.25
    seed: int = 7


@dataclass
class LogConfig:
    level: str = "INFO"
    file: str = ""

    def __post_init__(self):
        self.level = self.level.upper()
        if self.level not in ("DEBUG", "INFO", "WARNING", "ERROR", "CRITICAL"):
            raise ConfigError(f"unknown log.level: {self.level}")


SECTIONS = {
    "paths": PathsConfig,
    "tags": TagConfig,
    "lsi": LsiConfig,
    "mining": MiningConfig,
    "trainer": TrainerConfig,
    "audio": AudioConfig,
    "eval": EvalConfig,
    "sweep": SweepConfig,
    "synth": SynthConfig,
    "log": LogConfig,
}


def _coerce(raw: str, kind: type, key: str):
    raw = raw.strip().strip('"').strip("'")
    try:
        if kind is bool:
            lowered = raw.lower()
            if lowered in ("true", "1", "yes", "on"):
                return True
            if lowered in ("false", "0", "no", "off"):
                return False
            raise ValueError(raw)
        if kind is int:
            return int(raw)
        if kind is float:
            return float(raw)
    except ValueError:
        raise ConfigError(f"{key}: cannot read {raw!r} as {kind.__name__}")
    return raw


def _render(value) -> str:
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, float):
        return repr(value)
    return str(value)


@dataclass
class PipelineConfig:
    """Main configuration object, one attribute per section"""
    paths: PathsConfig = field(default_factory=PathsConfig)
    tags: TagConfig = field(default_factory=TagConfig)
    lsi: LsiConfig = field(default_factory=LsiConfig)
    mining: MiningConfig = field(default_factory=MiningConfig)
    trainer: TrainerConfig = field(default_factory=TrainerConfig)
    audio: AudioConfig = field(default_factory=AudioConfig)
    eval: EvalConfig = field(default_factory=EvalConfig)
    sweep: SweepConfig = field(default_factory=SweepConfig)
    synth: SynthConfig = field(default_factory=SynthConfig)
    log: LogConfig = field(default_factory=LogConfig)

    @classmethod
    def load(
        cls,
        config_file: Optional[str] = None,
        overrides: Optional[Dict[str, str]] = None,
        use_env: bool = True,
    ) -> "PipelineConfig":
        """
        Build a configuration. Later sources win:
        defaults < TAGTRIPLET_* environment < config file < overrides.
        """
        values: Dict[str, str] = {}
        if use_env:
            load_dotenv()
            for section, section_cls in SECTIONS.items():
                for f in fields(section_cls):
                    env_key = f"{ENV_PREFIX}{section}_{f.name}".upper()
                    if env_key in os.environ:
                        values[f"{section}.{f.name}"] = os.environ[env_key]
        if config_file:
            path = Path(config_file)
            if not path.exists():
                raise ConfigError(f"config file not found: {config_file}")
            for key, val in dotenv_values(path).items():
                if val is None:
                    raise ConfigError(f"{config_file}: key without value: {key}")
                values[key] = val
            logger.info(f"Loaded config file {config_file}")
        for key, val in (overrides or {}).items():
            values[key] = val
        return cls.from_flat(values)

    @classmethod
    def from_flat(cls, values: Dict[str, str]) -> "PipelineConfig":
        per_section: Dict[str, Dict[str, object]] = {name: {} for name in SECTIONS}
        for key, raw in values.items():
            # manifest keys that are not configuration
            if key in ("command", "seed", "format") or key.startswith("input."):
                continue
            section, _, name = key.partition(".")
            if section not in SECTIONS or not name:
                raise ConfigError(f"unknown config key: {key}")
            kinds = {f.name: f.type for f in fields(SECTIONS[section])}
            if name not in kinds:
                raise ConfigError(f"unknown config key: {key}")
            per_section[section][name] = _coerce(str(raw), kinds[name], key)
        return cls(**{name: SECTIONS[name](**kw) for name, kw in per_section.items()})

    def as_flat(self, sections: Optional[Iterable[str]] = None) -> Dict[str, str]:
        """Sorted `section.key -> str` view used by manifests and cache digests"""
        wanted = list(sections) if sections is not None else list(SECTIONS)
        flat = {}
        for section in wanted:
            obj = getattr(self, section)
            for f in fields(obj):
                flat[f"{section}.{f.name}"] = _render(getattr(obj, f.name))
        return dict(sorted(flat.items()))

    def __repr__(self):
        return (
            f"PipelineConfig(\n"
            f"  Output: {self.paths.output_dir}\n"
            f"  Tag sets: {self.tags.tag_sets} (required: {self.tags.required or '-'})\n"
            f"  LSI: k={self.lsi.k}, grid={self.lsi.grid_start}..{self.lsi.grid_stop}/{self.lsi.grid_step}\n"
            f"  Mining: {self.mining.strategy}, theta=({self.mining.theta_pos}, {self.mining.theta_neg}), batch={self.mining.batch_size}\n"
            f"  Trainer: {self.trainer.encoder} d={self.trainer.dim}, {self.trainer.optimizer} lr={self.trainer.learning_rate}, epochs={self.trainer.epochs}\n"
            f"  Eval: k={self.eval.k}, metric={self.eval.metric}\n"
            f")"
        )
