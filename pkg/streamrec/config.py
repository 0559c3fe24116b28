"""Pipeline configuration read from a TOML file.

Sections ``[world]``, ``[retrieval]``, ``[quantizer]``, ``[ranking]`` and
``[pipeline]`` map one to one onto the config dataclasses of the stages.
Dotted keys such as ``retrieval.tau = 0.05`` are equivalent to the table
form. Missing keys keep their defaults.
"""
import hashlib
import os
import re
import sys
from dataclasses import dataclass
from dataclasses import field
from dataclasses import fields
from dataclasses import replace
from typing import TYPE_CHECKING
from typing import Any
from typing import Dict
from typing import Mapping
from typing import Optional
from typing import Tuple
from typing import Union

import tomli_w

from streamrec.errors import InvalidConfig
from streamrec.errors import ParseError
from streamrec.errors import UnknownKey
from streamrec.quantizer import QuantizerConfig
from streamrec.ranking import RankingConfig
from streamrec.retrieval import RetrievalConfig
from streamrec.simgen import WorldConfig

if sys.version_info >= (3, 11):
    import tomllib
else:  # pragma: no cover
    import tomli as tomllib

if TYPE_CHECKING:  # pragma: no cover
    _Path = Union[str, "os.PathLike[str]"]

_LINE_RE = re.compile(r"line (\d+)")


@dataclass(frozen=True)
class PipelineSettings:
    seed: int = 0
    out_dir: str = "streamrec-out"
    train_fraction: float = 0.8

    def validate(self) -> "PipelineSettings":
        if not 0.0 < self.train_fraction < 1.0:
            raise InvalidConfig(
                f"pipeline.train_fraction must lie in (0, 1), got {self.train_fraction}"
            )
        return self


SECTIONS: Dict[str, Any] = {
    "world": WorldConfig,
    "retrieval": RetrievalConfig,
    "quantizer": QuantizerConfig,
    "ranking": RankingConfig,
    "pipeline": PipelineSettings,
}

#: Config sections each stage's outputs depend on, upstream included.
STAGE_SECTIONS: Dict[str, Tuple[str, ...]] = {
    "simulate": ("world",),
    "train-retrieval": ("world", "retrieval"),
    "eval-retrieval": ("world", "retrieval"),
    "build-codebooks": ("world", "retrieval", "quantizer"),
    "quantize": ("world", "retrieval", "quantizer"),
    "train-ranking": ("world", "retrieval", "quantizer", "ranking"),
    "eval-ranking": ("world", "retrieval", "quantizer", "ranking"),
}


@dataclass(frozen=True)
class PipelineConfig:
    world: WorldConfig = field(default_factory=WorldConfig)
    retrieval: RetrievalConfig = field(default_factory=RetrievalConfig)
    quantizer: QuantizerConfig = field(default_factory=QuantizerConfig)
    ranking: RankingConfig = field(default_factory=RankingConfig)
    pipeline: PipelineSettings = field(default_factory=PipelineSettings)

    @property
    def seed(self) -> int:
        return self.pipeline.seed

    @property
    def out_dir(self) -> str:
        return self.pipeline.out_dir

    def validate(self) -> "PipelineConfig":
        self.world.validate()
        self.retrieval.validate()
        self.quantizer.validate()
        self.ranking.validate()
        self.pipeline.validate()
        return self

    def with_overrides(
        self, seed: Optional[int] = None, out_dir: Optional[str] = None
    ) -> "PipelineConfig":
        """Copy with a new seed or output directory. The seed reaches every stage."""
        settings = self.pipeline
        if seed is not None:
            settings = replace(settings, seed=seed)
        if out_dir is not None:
            settings = replace(settings, out_dir=out_dir)
        world = replace(self.world, seed=settings.seed)
        return replace(self, pipeline=settings, world=world)

    def as_dict(self) -> Dict[str, Dict[str, Any]]:
        return {name: _section_dict(getattr(self, name)) for name in SECTIONS}

    def to_toml(self) -> str:
        return tomli_w.dumps(self.as_dict())

    def stage_hash(self, stage: str) -> str:
        """Short digest of the seed and every section ``stage`` depends on."""
        try:
            sections = STAGE_SECTIONS[stage]
        except KeyError:
            raise ValueError(f"Unknown stage {stage!r}") from None
        data = self.as_dict()
        payload = {name: data[name] for name in sections}
        payload["pipeline"] = {
            "seed": self.pipeline.seed,
            "train_fraction": self.pipeline.train_fraction,
        }
        digest = hashlib.sha256(tomli_w.dumps(payload).encode("utf-8"))
        return digest.hexdigest()[:12]


def _plain(value: Any) -> Any:
    if isinstance(value, tuple):
        return [_plain(v) for v in value]
    if isinstance(value, Mapping):
        return {str(k): _plain(v) for k, v in value.items()}
    return value


def _section_dict(section: Any) -> Dict[str, Any]:
    return {f.name: _plain(getattr(section, f.name)) for f in fields(section)}


def _is_number(value: Any) -> bool:
    return isinstance(value, (int, float)) and not isinstance(value, bool)


def _coerce(path: str, value: Any, default: Any) -> Any:
    if isinstance(default, bool):
        if not isinstance(value, bool):
            raise InvalidConfig(f"{path} must be true or false, got {value!r}")
        return value
    if isinstance(default, int):
        if not isinstance(value, int) or isinstance(value, bool):
            raise InvalidConfig(f"{path} must be an integer, got {value!r}")
        return value
    if isinstance(default, float):
        if not _is_number(value):
            raise InvalidConfig(f"{path} must be a number, got {value!r}")
        return float(value)
    if isinstance(default, str):
        if not isinstance(value, str):
            raise InvalidConfig(f"{path} must be a string, got {value!r}")
        return value
    if isinstance(default, tuple):
        if not isinstance(value, list):
            raise InvalidConfig(f"{path} must be an array, got {value!r}")
        sample = default[0] if default else value[0] if value else None
        return tuple(_coerce(f"{path}[{i}]", v, sample) for i, v in enumerate(value))
    if isinstance(default, Mapping):
        if not isinstance(value, dict):
            raise InvalidConfig(f"{path} must be a table, got {value!r}")
        merged = dict(default)
        for key, item in value.items():
            if key not in default:
                raise UnknownKey(f"{path}.{key}")
            merged[key] = _coerce(f"{path}.{key}", item, default[key])
        return merged
    return value


def _build_section(name: str, values: Mapping[str, Any]) -> Any:
    cls = SECTIONS[name]
    defaults = cls()
    known = {f.name for f in fields(cls)}
    kwargs: Dict[str, Any] = {}
    for key, value in values.items():
        if key not in known:
            raise UnknownKey(f"{name}.{key}")
        kwargs[key] = _coerce(f"{name}.{key}", value, getattr(defaults, key))
    return replace(defaults, **kwargs)


def _parse_error(exc: Exception) -> ParseError:
    line = getattr(exc, "lineno", None)
    if line is None:
        match = _LINE_RE.search(str(exc))
        line = int(match.group(1)) if match else 0
    reason = getattr(exc, "msg", None) or str(exc)
    return ParseError(int(line), str(reason))


def parse_config_text(text: str) -> PipelineConfig:
    try:
        data = tomllib.loads(text)
    except tomllib.TOMLDecodeError as exc:
        raise _parse_error(exc) from None
    sections: Dict[str, Any] = {}
    for name, values in data.items():
        if name not in SECTIONS:
            raise UnknownKey(name)
        if not isinstance(values, dict):
            raise UnknownKey(name)
        sections[name] = _build_section(name, values)
    config = PipelineConfig(**sections)
    return config.with_overrides(seed=config.pipeline.seed).validate()


def parse_config(path: "Optional[_Path]" = None) -> PipelineConfig:
    """Read a config file; ``None`` yields the defaults."""
    if path is None:
        return PipelineConfig().validate()
    with open(path, encoding="utf-8") as fh:
        return parse_config_text(fh.read())
