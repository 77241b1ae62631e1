"""Pipeline configuration: ``key = value`` files with dotted section keys plus
``ARTCORE_<KEY>`` environment overrides (dots written as double underscores)."""

from __future__ import annotations

import configparser
import dataclasses
import os
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Mapping

from .backend import BackendConfig
from .frontend import FrontendConfig
from .gaussians import MapConfig
from .mapping import OptimConfig
from .providers.synthetic import SyntheticSceneConfig

ENV_PREFIX = "ARTCORE_"
_SECTION = "artcore"


class ConfigError(ValueError):
    pass


@dataclass
class PipelineConfig:
    provider: str = "synthetic"  # synthetic | files
    data: str | None = None  # dataset root for the files provider
    out: str = "artcore_out"
    seed: int = 0
    deterministic: bool = False
    loop_closure: bool = True
    eval_stride: int = 8
    mapping: bool = True
    queue_capacity: int = 4
    render_workers: int = 1
    write_images: bool = True
    synthetic: SyntheticSceneConfig = field(default_factory=SyntheticSceneConfig)
    frontend: FrontendConfig = field(default_factory=FrontendConfig)
    backend: BackendConfig = field(default_factory=BackendConfig)
    map: MapConfig = field(default_factory=MapConfig)
    optim: OptimConfig = field(default_factory=OptimConfig)

    def validate(self) -> "PipelineConfig":
        if self.provider not in ("synthetic", "files"):
            raise ConfigError(f"provider must be 'synthetic' or 'files', got {self.provider!r}")
        if self.provider == "files" and not self.data:
            raise ConfigError("the files provider needs 'data = <dataset directory>'")
        if self.eval_stride < 2:
            raise ConfigError("eval_stride must be at least 2")
        if self.queue_capacity < 1:
            raise ConfigError("queue_capacity must be at least 1")
        out = Path(self.out)
        try:
            out.mkdir(parents=True, exist_ok=True)
        except OSError as e:
            raise ConfigError(f"output directory {out} is not writable: {e}") from e
        if not os.access(out, os.W_OK):
            raise ConfigError(f"output directory {out} is not writable")
        return self

    def is_eval(self, index: int) -> bool:
        """Every ``eval_stride``-th frame (by position in the sequence) is held out."""
        return index % self.eval_stride == self.eval_stride - 1


_SUBCONFIGS = ("synthetic", "frontend", "backend", "map", "optim")


def _field_type(obj, name: str) -> str:
    return next(str(f.type) for f in dataclasses.fields(obj) if f.name == name)


def _coerce(raw: str, current: Any, key: str, annotation: str = ""):
    raw = raw.strip()
    try:
        if isinstance(current, bool):
            low = raw.lower()
            if low in ("1", "true", "yes", "on"):
                return True
            if low in ("0", "false", "no", "off"):
                return False
            raise ValueError(raw)
        if isinstance(current, int):
            return int(raw)
        if isinstance(current, float):
            return float(raw)
        if isinstance(current, tuple):
            parts = [p for p in raw.replace("(", "").replace(")", "").split(",") if p.strip()]
            return tuple(float(p) for p in parts)
        if current is None:
            if raw.lower() in ("none", ""):
                return None
            if "float" in annotation:
                return float(raw)
            if "int" in annotation:
                return int(raw)
        return raw
    except ValueError as e:
        raise ConfigError(f"{key}: cannot parse {raw!r} as {type(current).__name__}") from e


def apply_overrides(cfg: PipelineConfig, values: Mapping[str, str]) -> PipelineConfig:
    """Return a copy of ``cfg`` with dotted ``section.field`` or top-level keys replaced."""
    top: dict[str, Any] = {}
    subs: dict[str, dict[str, Any]] = {s: {} for s in _SUBCONFIGS}
    for key, raw in values.items():
        parts = key.strip().split(".")
        if len(parts) == 1:
            name = parts[0]
            if name in _SUBCONFIGS or not hasattr(cfg, name):
                raise ConfigError(f"unknown key {key!r}")
            top[name] = _coerce(raw, getattr(cfg, name), key, _field_type(cfg, name))
        elif len(parts) == 2 and parts[0] in _SUBCONFIGS:
            sub = getattr(cfg, parts[0])
            if parts[1] not in {f.name for f in dataclasses.fields(sub)}:
                raise ConfigError(f"unknown key {key!r}")
            subs[parts[0]][parts[1]] = _coerce(raw, getattr(sub, parts[1]), key,
                                               _field_type(sub, parts[1]))
        else:
            raise ConfigError(f"unknown key {key!r}")
    try:
        for s, changes in subs.items():
            if changes:
                top[s] = dataclasses.replace(getattr(cfg, s), **changes)
        return dataclasses.replace(cfg, **top)
    except (TypeError, ValueError) as e:
        raise ConfigError(str(e)) from e


def parse_config_text(text: str) -> dict[str, str]:
    parser = configparser.ConfigParser(interpolation=None, delimiters=("=",),
                                       comment_prefixes=("#", ";"), inline_comment_prefixes=("#",))
    parser.optionxform = str  # keys are case-sensitive (optim.K)
    try:
        parser.read_string(f"[{_SECTION}]\n" + text)
    except configparser.Error as e:
        raise ConfigError(f"malformed config: {e}") from e
    return dict(parser[_SECTION])


def env_overrides(environ: Mapping[str, str] | None = None) -> dict[str, str]:
    """``ARTCORE_OPTIM__K=10`` -> ``{'optim.K': '10'}``; top-level keys are lower-cased."""
    environ = os.environ if environ is None else environ
    out = {}
    for name, value in environ.items():
        if not name.startswith(ENV_PREFIX):
            continue
        parts = name[len(ENV_PREFIX):].split("__")
        if len(parts) == 1:
            key = parts[0].lower()
        else:
            section = parts[0].lower()
            sub = getattr(PipelineConfig(), section, None) if section in _SUBCONFIGS else None
            names = {f.name.lower(): f.name for f in dataclasses.fields(sub)} if sub is not None else {}
            key = f"{section}.{names.get(parts[1].lower(), parts[1])}"
        out[key] = value
    return out


def load_config(path=None, environ: Mapping[str, str] | None = None,
                overrides: Mapping[str, str] | None = None) -> PipelineConfig:
    """Defaults, then the file, then environment variables, then explicit overrides."""
    cfg = PipelineConfig()
    if path is not None:
        try:
            text = Path(path).read_text()
        except OSError as e:
            raise ConfigError(f"cannot read config {path}: {e}") from e
        cfg = apply_overrides(cfg, parse_config_text(text))
    cfg = apply_overrides(cfg, env_overrides(environ))
    if overrides:
        cfg = apply_overrides(cfg, overrides)
    return cfg


def dump_config(cfg: PipelineConfig) -> str:
    """Round-trippable text form."""
    lines = []
    for f in dataclasses.fields(cfg):
        v = getattr(cfg, f.name)
        if f.name in _SUBCONFIGS:
            for g in dataclasses.fields(v):
                lines.append(f"{f.name}.{g.name} = {_fmt(getattr(v, g.name))}")
        else:
            lines.append(f"{f.name} = {_fmt(v)}")
    return "\n".join(lines) + "\n"


def _fmt(v) -> str:
    if isinstance(v, tuple):
        return ", ".join(repr(float(x)) for x in v)
    if v is None:
        return "none"
    return repr(v) if isinstance(v, float) else str(v)
