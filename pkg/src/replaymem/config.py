"""Versioned YAML experiment configs with strict keys and line-aware diagnostics."""
from __future__ import annotations

import dataclasses
import hashlib
import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Optional

import yaml

from .memory import Strategy, StrategyError
from .stream import DEFAULT_SHAPES, ShapeParams, SourceSpec, StreamError, default_sources

SCHEMA_VERSION = 1


class ConfigError(ValueError):
    def __init__(self, field: str, message: str, line: Optional[int] = None):
        self.field = field
        self.line = line
        where = f"line {line}: " if line is not None else ""
        super().__init__(f"{where}{field}: {message}")


@dataclass
class ExperimentConfig:
    strategy: Strategy = Strategy.SELECTIVE
    N: int = 128
    S: int = 10
    K: float = 0.25
    batch_size: int = 8
    seed: int = 0
    eval_interval: int = 50
    output_dir: str = "runs/default"
    learning_rate: float = 0.5
    ema_momentum: float = 0.9
    embedding_dim: int = 16
    n_test: int = 24
    grid: tuple = (16, 16, 4)
    n_classes: int = 6
    sources: list = field(default_factory=lambda: default_sources(200))

    def validate(self, lines: Optional[dict] = None) -> "ExperimentConfig":
        lines = lines or {}

        def fail(name, msg):
            raise ConfigError(name, msg, lines.get(name))

        try:
            self.strategy = Strategy.parse(self.strategy)
        except StrategyError as e:
            fail("strategy", str(e))
        for name in ("N", "S", "batch_size", "seed", "eval_interval", "embedding_dim", "n_test", "n_classes"):
            v = getattr(self, name)
            if isinstance(v, bool) or not isinstance(v, int):
                fail(name, f"expected an integer, got {v!r}")
        for name in ("K", "learning_rate", "ema_momentum"):
            v = getattr(self, name)
            if isinstance(v, bool) or not isinstance(v, (int, float)):
                fail(name, f"expected a number, got {v!r}")
            setattr(self, name, float(v))
        if self.batch_size < 1:
            fail("batch_size", f"must be >= 1, got {self.batch_size}")
        if self.N < self.batch_size:
            fail("N", f"must be >= batch_size ({self.batch_size}), got {self.N}")
        if self.S < 1:
            fail("S", f"must be >= 1, got {self.S}")
        if not 0.0 <= self.K <= 1.0:
            fail("K", f"must lie in [0, 1], got {self.K}")
        if self.eval_interval < 1:
            fail("eval_interval", f"must be >= 1, got {self.eval_interval}")
        if self.learning_rate <= 0:
            fail("learning_rate", f"must be > 0, got {self.learning_rate}")
        if not 0.0 < self.ema_momentum < 1.0:
            fail("ema_momentum", f"must lie in (0, 1), got {self.ema_momentum}")
        if self.embedding_dim < 1 or self.n_test < 1 or self.n_classes < 1:
            fail("embedding_dim", "embedding_dim, n_test and n_classes must be >= 1")
        if len(self.grid) != 3 or any(int(g) < 1 for g in self.grid):
            fail("grid", f"expected positive H, W, F, got {self.grid}")
        self.grid = tuple(int(g) for g in self.grid)
        if not self.sources:
            fail("sources", "at least one source is required")
        ids = [s.source_id for s in self.sources]
        if len(set(ids)) != len(ids):
            fail("sources", f"duplicate source ids {ids}")
        for i, s in enumerate(self.sources):
            if len(s.feature_shift) != self.grid[2]:
                fail(f"sources[{i}].feature_shift", f"needs {self.grid[2]} entries, got {len(s.feature_shift)}")
            bad = [c for c in s.shape_params if not 0 <= c < self.n_classes]
            if bad:
                fail(f"sources[{i}].shapes", f"class ids {bad} outside [0, {self.n_classes})")
        return self

    def to_dict(self) -> dict:
        return {
            "schema_version": SCHEMA_VERSION,
            "strategy": self.strategy.value,
            "N": self.N,
            "S": self.S,
            "K": self.K,
            "batch_size": self.batch_size,
            "seed": self.seed,
            "eval_interval": self.eval_interval,
            "output_dir": self.output_dir,
            "learning_rate": self.learning_rate,
            "ema_momentum": self.ema_momentum,
            "embedding_dim": self.embedding_dim,
            "n_test": self.n_test,
            "grid": {"H": self.grid[0], "W": self.grid[1], "F": self.grid[2]},
            "n_classes": self.n_classes,
            "sources": [_source_to_dict(s) for s in self.sources],
        }

    def to_yaml(self) -> str:
        return yaml.safe_dump(self.to_dict(), sort_keys=False, default_flow_style=None)

    def stream_key(self) -> str:
        """Digest of everything that shapes the stream, independent of strategy and seed."""
        d = self.to_dict()
        key = {k: d[k] for k in ("grid", "n_classes", "sources", "n_test")}
        return hashlib.sha256(json.dumps(key, sort_keys=True).encode()).hexdigest()[:16]


def _source_to_dict(s: SourceSpec) -> dict:
    return {
        "source_id": s.source_id,
        "n_samples": s.n_samples,
        "annotated_classes": sorted(s.annotated_classes),
        "feature_shift": list(s.feature_shift),
        "noise_sigma": s.noise_sigma[0] if s.noise_sigma[0] == s.noise_sigma[1] else list(s.noise_sigma),
        "shapes": {int(c): {"radius": list(p.radius), "presence": p.presence}
                   for c, p in sorted(s.shape_params.items())},
    }


_TOP_KEYS = {f.name for f in dataclasses.fields(ExperimentConfig)} | {"schema_version"}
_SOURCE_KEYS = {"source_id", "n_samples", "annotated_classes", "feature_shift", "noise_sigma", "shapes"}
_PRESET_KEYS = {"preset", "n_samples"}


def _line_map(node, prefix="", out=None) -> dict:
    """Map dotted field paths to 1-based source lines."""
    out = {} if out is None else out
    if isinstance(node, yaml.MappingNode):
        for k, v in node.value:
            path = f"{prefix}.{k.value}" if prefix else str(k.value)
            out[path] = k.start_mark.line + 1
            _line_map(v, path, out)
    elif isinstance(node, yaml.SequenceNode):
        for i, v in enumerate(node.value):
            path = f"{prefix}[{i}]"
            out[path] = v.start_mark.line + 1
            _line_map(v, path, out)
    return out


def _noise(v):
    if isinstance(v, (list, tuple)):
        if len(v) != 2:
            raise ValueError(f"noise_sigma range needs [lo, hi], got {v}")
        return tuple(float(x) for x in v)
    return float(v)


def _parse_source(i: int, raw: Any, lines: dict) -> SourceSpec:
    name = f"sources[{i}]"
    if not isinstance(raw, dict):
        raise ConfigError(name, "expected a mapping", lines.get(name))
    unknown = set(raw) - _SOURCE_KEYS
    if unknown:
        k = sorted(unknown)[0]
        raise ConfigError(f"{name}.{k}", "unknown key", lines.get(f"{name}.{k}"))
    for req in ("source_id", "n_samples", "annotated_classes"):
        if req not in raw:
            raise ConfigError(f"{name}.{req}", "missing required key", lines.get(name))
    shapes = dict(DEFAULT_SHAPES)
    if "shapes" in raw:
        shapes = {}
        for c, sp in (raw["shapes"] or {}).items():
            try:
                shapes[int(c)] = ShapeParams(tuple(float(r) for r in sp["radius"]), float(sp.get("presence", 0.7)))
            except (KeyError, TypeError, ValueError) as e:
                raise ConfigError(f"{name}.shapes.{c}", f"bad shape params ({e})",
                                  lines.get(f"{name}.shapes.{c}")) from None
    try:
        return SourceSpec(
            source_id=int(raw["source_id"]),
            n_samples=int(raw["n_samples"]),
            annotated_classes=frozenset(int(c) for c in raw["annotated_classes"]),
            feature_shift=tuple(float(x) for x in raw.get("feature_shift", (0.0,) * 4)),
            noise_sigma=_noise(raw.get("noise_sigma", 0.5)),
            shape_params=shapes,
        )
    except (StreamError, TypeError, ValueError) as e:
        raise ConfigError(name, str(e), lines.get(name)) from None


def _parse_sources(raw: Any, lines: dict) -> list[SourceSpec]:
    if isinstance(raw, dict):
        unknown = set(raw) - _PRESET_KEYS
        if unknown:
            k = sorted(unknown)[0]
            raise ConfigError(f"sources.{k}", "unknown key", lines.get(f"sources.{k}"))
        if raw.get("preset", "default") != "default":
            raise ConfigError("sources.preset", f"unknown preset {raw['preset']!r}", lines.get("sources.preset"))
        return default_sources(int(raw.get("n_samples", 200)))
    if isinstance(raw, list):
        return [_parse_source(i, s, lines) for i, s in enumerate(raw)]
    raise ConfigError("sources", "expected a preset mapping or a list of sources", lines.get("sources"))


def config_from_mapping(raw: Any, lines: Optional[dict] = None) -> ExperimentConfig:
    lines = lines or {}
    if not isinstance(raw, dict):
        raise ConfigError("<root>", "config must be a mapping")
    unknown = set(raw) - _TOP_KEYS
    if unknown:
        k = sorted(unknown)[0]
        raise ConfigError(k, "unknown key", lines.get(k))
    version = raw.get("schema_version")
    if version != SCHEMA_VERSION:
        raise ConfigError("schema_version", f"expected {SCHEMA_VERSION}, got {version!r}",
                          lines.get("schema_version"))
    kwargs = {k: v for k, v in raw.items() if k not in ("schema_version", "grid", "sources")}
    if "grid" in raw:
        g = raw["grid"]
        if isinstance(g, dict):
            extra = set(g) - {"H", "W", "F"}
            if extra or len(g) != 3:
                raise ConfigError("grid", "expected keys H, W, F", lines.get("grid"))
            kwargs["grid"] = (g["H"], g["W"], g["F"])
        else:
            kwargs["grid"] = tuple(g)
    if "sources" in raw:
        kwargs["sources"] = _parse_sources(raw["sources"], lines)
    if "output_dir" in kwargs:
        kwargs["output_dir"] = str(kwargs["output_dir"])
    return ExperimentConfig(**kwargs).validate(lines)


def parse_config(text: str) -> ExperimentConfig:
    try:
        node = yaml.compose(text)
        raw = yaml.safe_load(text)
    except yaml.YAMLError as e:
        mark = getattr(e, "problem_mark", None)
        raise ConfigError("<yaml>", str(getattr(e, "problem", e)),
                          mark.line + 1 if mark is not None else None) from None
    return config_from_mapping(raw, _line_map(node) if node is not None else {})


def load_config(path) -> ExperimentConfig:
    return parse_config(Path(path).read_text())


def apply_overrides(cfg: ExperimentConfig, overrides: dict) -> ExperimentConfig:
    """Return a re-validated copy with non-None ``overrides`` applied."""
    d = dataclasses.replace(cfg, **{k: v for k, v in overrides.items() if v is not None})
    return d.validate()
