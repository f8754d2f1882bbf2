"""Run configuration: built-in defaults, TOML config files, and overrides.

Precedence is CLI flag > config file > built-in default. Unknown keys in a
config file are rejected so typos cannot silently fall back to defaults.
"""

from __future__ import annotations

import sys
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path

if sys.version_info >= (3, 11):
    import tomllib
else:
    import tomli as tomllib

from .errors import ConfigError
from .fusion import FusionConfig

DEFAULT_ENDPOINT = "https://openrouter.ai/api/v1/chat/completions"
DEFAULT_MODEL = "deepseek/deepseek-chat"


@dataclass(frozen=True)
class BackendSettings:
    provider: str = "remote"  # remote | scripted
    endpoint: str = DEFAULT_ENDPOINT
    model: str = DEFAULT_MODEL
    role_models: dict[str, str] = field(default_factory=dict)
    temperature: float = 0.2
    max_tokens: int = 2048
    script: str | None = None
    timeout_s: float = 60.0


@dataclass(frozen=True)
class EmbeddingSettings:
    provider: str = "local"  # local | remote
    endpoint: str = ""
    model: str = ""


@dataclass(frozen=True)
class OptimizerConfig:
    k_max: int = 5
    tau_conv: float = 0.95
    l_max: int = 150
    update_intensity: str = "moderate"  # conservative | moderate | aggressive
    single_pass: bool = False
    length_constraint_enabled: bool = True

    def __post_init__(self):
        if self.k_max < 1:
            raise ConfigError("k_max must be at least 1")
        if not 0.0 < self.tau_conv <= 1.0:
            raise ConfigError(f"tau_conv {self.tau_conv} outside (0, 1]")
        if self.l_max < 1:
            raise ConfigError("l_max must be positive")
        if self.update_intensity not in ("conservative", "moderate", "aggressive"):
            raise ConfigError(f"unknown update_intensity {self.update_intensity!r}")


@dataclass(frozen=True)
class TemplateSettings:
    dir: str | None = None  # None = packaged defaults


@dataclass(frozen=True)
class TraceSettings:
    dir: str = "traces"
    trace_similarities: bool = False
    embed_templates: bool = False


@dataclass(frozen=True)
class CacheSettings:
    dir: str = ".weathertgd-cache"
    enabled: bool = True


@dataclass(frozen=True)
class RunConfig:
    """Full configuration for one optimization run."""

    backend: BackendSettings = field(default_factory=BackendSettings)
    embedding: EmbeddingSettings = field(default_factory=EmbeddingSettings)
    fusion: FusionConfig = field(default_factory=FusionConfig)
    optimizer: OptimizerConfig = field(default_factory=OptimizerConfig)
    templates: TemplateSettings = field(default_factory=TemplateSettings)
    trace: TraceSettings = field(default_factory=TraceSettings)
    cache: CacheSettings = field(default_factory=CacheSettings)
    # Programmatic knobs (not part of the config-file schema):
    roles: tuple[str, ...] = ("stat", "phys", "met")
    seed_role: str = "stat"
    series_max_rows: int = 48
    concurrent_agents: bool = True
    jobs: int = 1

    def snapshot(self) -> dict:
        """JSON-safe snapshot of every setting, recorded in trace headers."""
        data = asdict(self)
        data["roles"] = list(self.roles)
        return data


_SECTION_TYPES = {
    "backend": BackendSettings,
    "embedding": EmbeddingSettings,
    "fusion": FusionConfig,
    "optimizer": OptimizerConfig,
    "templates": TemplateSettings,
    "trace": TraceSettings,
    "cache": CacheSettings,
}


def _build_section(name: str, cls, values: dict):
    known = set(cls.__dataclass_fields__)
    unknown = sorted(set(values) - known)
    if unknown:
        raise ConfigError(f"unknown key(s) in [{name}]: {', '.join(unknown)}")
    try:
        return cls(**values)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"invalid [{name}] section: {exc}") from exc


def load_config(path: str | Path | None) -> RunConfig:
    """Load a TOML config file; ``None`` yields the built-in defaults."""
    if path is None:
        return RunConfig()
    try:
        with open(path, "rb") as f:
            data = tomllib.load(f)
    except FileNotFoundError:
        raise ConfigError(f"config file not found: {path}") from None
    except tomllib.TOMLDecodeError as exc:
        raise ConfigError(f"invalid TOML in {path}: {exc}") from exc

    unknown = sorted(set(data) - set(_SECTION_TYPES))
    if unknown:
        raise ConfigError(f"unknown section(s): {', '.join(unknown)}")

    sections = {}
    for name, cls in _SECTION_TYPES.items():
        values = data.get(name, {})
        if not isinstance(values, dict):
            raise ConfigError(f"[{name}] must be a table")
        sections[name] = _build_section(name, cls, values)
    return RunConfig(**sections)


def from_snapshot(snapshot: dict) -> RunConfig:
    """Rebuild a :class:`RunConfig` from a trace-header snapshot."""
    kwargs = {}
    for name, cls in _SECTION_TYPES.items():
        kwargs[name] = cls(**snapshot.get(name, {}))
    for extra in ("seed_role", "series_max_rows", "concurrent_agents", "jobs"):
        if extra in snapshot:
            kwargs[extra] = snapshot[extra]
    if "roles" in snapshot:
        kwargs["roles"] = tuple(snapshot["roles"])
    return RunConfig(**kwargs)


def apply_overrides(
    config: RunConfig,
    trace_dir: str | None = None,
    cache_dir: str | None = None,
    seed_role: str | None = None,
    trace_similarities: bool = False,
    jobs: int | None = None,
) -> RunConfig:
    """Apply CLI flag overrides on top of a loaded config."""
    if trace_dir is not None:
        config = replace(config, trace=replace(config.trace, dir=trace_dir))
    if cache_dir is not None:
        config = replace(config, cache=replace(config.cache, dir=cache_dir))
    if seed_role is not None:
        if seed_role not in ("stat", "phys", "met"):
            raise ConfigError(f"unknown seed role {seed_role!r}")
        config = replace(config, seed_role=seed_role)
    if trace_similarities:
        config = replace(config, trace=replace(config.trace, trace_similarities=True))
    if jobs is not None:
        if jobs < 1:
            raise ConfigError("jobs must be at least 1")
        config = replace(config, jobs=jobs)
    return config
