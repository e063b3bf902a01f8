"""
Pipeline configuration: pydantic models loaded from an INI-style file.

Each model below is one ``[section]``; lists are comma separated. Missing
keys take their defaults and relative paths resolve against the directory
of the config file.
"""
from __future__ import annotations

import configparser
from pathlib import Path

from pydantic import BaseModel, Field, PositiveInt, ValidationError, model_validator

from uflow.flow.graph import DEFAULT_CLAMP, DEFAULT_STEPS_PER_STAGE, stage_channels
from uflow.nfa import NfaConfig
from uflow.scoring import ScoreConfig
from uflow.shared.errors import ArtifactError, ConfigError, ShapeError
from uflow.synthetic import SynthConfig
from uflow.training import TrainConfig

EFFECTIVE_CONFIG_NAME = "effective_config.ini"

LIST_KEYS = {
    ("extractor", "channels"),
    ("nfa", "windows"),
    ("synthetic", "image_size"),
    ("synthetic", "defects"),
    ("synthetic", "defect_size"),
}
PATH_KEYS = {("paths", "data_dir"), ("paths", "model_path"), ("paths", "output_dir")}


class PathsConfig(BaseModel):
    data_dir: Path = Path("data")
    model_path: Path = Path("model.ufm")
    output_dir: Path = Path("run")


class ExtractorConfig(BaseModel):
    levels: int = Field(default=2, ge=1)
    patch: int = Field(default=4, ge=1)
    channels: list[PositiveInt] = Field(default_factory=lambda: [16, 16], min_length=1)
    seed: int = Field(default=0, ge=0, lt=2**64)


class FlowConfig(BaseModel):
    steps_per_stage: int = Field(default=DEFAULT_STEPS_PER_STAGE, ge=1)
    clamp: float = Field(default=DEFAULT_CLAMP, gt=0)
    seed: int = Field(default=0, ge=0, lt=2**64)


class RunConfig(BaseModel):
    jobs: int = Field(default=1, ge=1)
    exhaustive_oracle: bool = False


class PipelineConfig(BaseModel):
    model_config = {"extra": "forbid"}

    paths: PathsConfig = Field(default_factory=PathsConfig)
    extractor: ExtractorConfig = Field(default_factory=ExtractorConfig)
    flow: FlowConfig = Field(default_factory=FlowConfig)
    train: TrainConfig = Field(default_factory=TrainConfig)
    nfa: NfaConfig = Field(default_factory=NfaConfig)
    score: ScoreConfig = Field(default_factory=ScoreConfig)
    synthetic: SynthConfig = Field(default_factory=SynthConfig)
    run: RunConfig = Field(default_factory=RunConfig)

    @model_validator(mode="after")
    def consistent(self) -> "PipelineConfig":
        extractor = self.extractor
        if len(extractor.channels) != extractor.levels:
            raise ValueError(f"extractor has {extractor.levels} levels but {len(extractor.channels)} channel counts")
        try:
            stage_channels(extractor.channels)
        except ShapeError as exc:
            raise ValueError(f"extractor channels {extractor.channels}: {exc}") from exc

        unit = extractor.patch * 2 ** (extractor.levels - 1)
        height, width = self.synthetic.image_size
        if height % unit or width % unit:
            raise ValueError(f"image size {height}x{width} is not divisible by patch·2^(L-1) = {unit}")
        for level in range(extractor.levels):
            grid = min(height, width) // (extractor.patch * 2**level)
            w = self.nfa.window_for(level)
            if w > 2 * grid - 1:
                raise ValueError(f"nfa window {w} exceeds the {grid}-cell grid of scale {level + 1}")
        return self

    def with_seed(self, seed: int) -> "PipelineConfig":
        """Copy with every seeded component reseeded."""
        data = self.model_dump()
        for section in ("extractor", "flow", "train", "synthetic"):
            data[section]["seed"] = seed
        return validate_config(data)


def validate_config(data: dict) -> PipelineConfig:
    try:
        return PipelineConfig.model_validate(data)
    except ValidationError as exc:
        first = exc.errors()[0]
        location = ".".join(str(part) for part in first["loc"]) or "config"
        raise ConfigError(f"invalid config at {location}: {first['msg']}") from exc


def _section_models() -> dict[str, type[BaseModel]]:
    return {name: info.annotation for name, info in PipelineConfig.model_fields.items()}


def load_config(path=None) -> PipelineConfig:
    if path is None:
        return PipelineConfig()
    path = Path(path)
    if not path.exists():
        raise ArtifactError(f"missing config file {path}")
    parser = configparser.ConfigParser(interpolation=None)
    try:
        parser.read(path)
    except configparser.Error as exc:
        raise ConfigError(f"cannot parse {path}: {exc}") from exc

    models = _section_models()
    data: dict[str, dict] = {}
    for section in parser.sections():
        if section not in models:
            raise ConfigError(f"unknown config section [{section}]")
        values = {}
        for key, raw in parser.items(section):
            if key not in models[section].model_fields:
                raise ConfigError(f"unknown key {key!r} in [{section}]")
            if (section, key) in LIST_KEYS:
                values[key] = [item.strip() for item in raw.split(",") if item.strip()]
            elif (section, key) in PATH_KEYS:
                values[key] = (path.parent / raw).resolve()
            else:
                values[key] = raw
        data[section] = values
    return validate_config(data)


def _format(value) -> str:
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, (list, tuple)):
        return ", ".join(_format(item) for item in value)
    if isinstance(value, float):
        return repr(value)
    return str(value)


def dump_config(config: PipelineConfig, path) -> None:
    """Write every setting, defaults included, in the format ``load_config`` reads."""
    parser = configparser.ConfigParser(interpolation=None)
    for section, values in config.model_dump().items():
        for key in values:
            if (section, key) in PATH_KEYS:
                values[key] = Path(values[key]).resolve()
        parser[section] = {key: _format(value) for key, value in values.items()}
    with Path(path).open("w") as handle:
        parser.write(handle)
