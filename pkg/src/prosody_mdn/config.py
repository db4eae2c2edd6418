"""Flat ``key = value`` run configuration.

One setting per line, ``#`` starts a comment.  Values are parsed as int,
float, bool (true/false) or comma-separated int list according to the
field they set; unknown keys are rejected.
"""

from __future__ import annotations

from dataclasses import dataclass, fields, replace
from pathlib import Path

from .extractor import ExtractorConfig, ReconstructorConfig
from .gmm import InvalidInputError
from .optim import Schedule
from .predictor import PredictorConfig
from .synth import GeneratorSpec


@dataclass(frozen=True)
class Settings:
    seed: int = 0
    # corpus
    n_modes: int = 4
    embed_dim: int = 4
    context_dim: int = 16
    k_min: int = 6
    k_max: int = 12
    separation: float = 3.0
    noise: float = 1.0
    n_atoms: int = 3
    atom_std_ratio: float = 0.25
    context_gain: float = 1.5
    stickiness: float = 1.5
    feature_dim: int = 8
    t_min: int = 3
    t_max: int = 8
    segment_noise: float = 0.1
    n_train: int = 2000
    n_heldout: int = 1000
    # predictor
    n_components: int = 20
    conv_channels: int = 16
    conv_kernel: int = 3
    recurrent_width: int = 16
    dropout_rate: float = 0.1
    # extractor
    extractor_channels: tuple = (8, 8)
    # training
    epochs: int = 150
    learning_rate: float = 1e-3
    batch_size: int = 32
    clip_norm: float = 10.0
    beta: float = 0.02
    # evaluation
    components: tuple = (1, 2, 5, 10, 20)
    n_samples: int = 16
    n_contexts: int = 100
    temperature: float = 1.0

    def generator_spec(self) -> GeneratorSpec:
        return _project(GeneratorSpec, self)

    def predictor_config(self, n_components: int | None = None) -> PredictorConfig:
        cfg = _project(PredictorConfig, self)
        return cfg if n_components is None else replace(cfg, n_components=n_components)

    def extractor_config(self) -> ExtractorConfig:
        return ExtractorConfig(self.feature_dim, self.embed_dim, tuple(self.extractor_channels))

    def reconstructor_config(self) -> ReconstructorConfig:
        return ReconstructorConfig(self.context_dim, self.embed_dim, self.feature_dim)

    def schedule(self) -> Schedule:
        return _project(Schedule, self)


def _project(cls, settings: Settings):
    names = {f.name for f in fields(cls)}
    return cls(**{k: getattr(settings, k) for k in names if hasattr(settings, k)})


_FIELD_TYPES = {f.name: type(f.default) for f in fields(Settings)}


def parse_value(key: str, raw: str):
    if key not in _FIELD_TYPES:
        raise InvalidInputError(f"unknown setting {key!r}")
    kind = _FIELD_TYPES[key]
    raw = raw.strip()
    try:
        if kind is tuple:
            return tuple(int(x) for x in raw.split(",") if x.strip())
        if kind is bool:
            if raw.lower() not in ("true", "false"):
                raise ValueError(raw)
            return raw.lower() == "true"
        return kind(raw)
    except ValueError:
        raise InvalidInputError(f"bad value for {key}: {raw!r}") from None


def parse_config(text: str) -> dict:
    out = {}
    for lineno, line in enumerate(text.splitlines(), start=1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise InvalidInputError(f"line {lineno}: expected 'key = value'")
        key, value = (s.strip() for s in line.split("=", 1))
        out[key] = parse_value(key, value)
    return out


def load_settings(path: str | Path | None = None, **overrides) -> Settings:
    values = {}
    if path is not None:
        values.update(parse_config(Path(path).read_text(encoding="utf-8")))
    values.update({k: v for k, v in overrides.items() if v is not None})
    for k in values:
        if k not in _FIELD_TYPES:
            raise InvalidInputError(f"unknown setting {k!r}")
    return replace(Settings(), **values)


def dump_settings(settings: Settings) -> str:
    lines = []
    for f in fields(Settings):
        v = getattr(settings, f.name)
        lines.append(f"{f.name} = {','.join(map(str, v)) if isinstance(v, tuple) else v}")
    return "\n".join(lines) + "\n"
