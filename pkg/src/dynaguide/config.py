"""Run configuration and the flat ``key = value`` config file format."""
from __future__ import annotations

import dataclasses
from dataclasses import dataclass, fields
from pathlib import Path

from .exceptions import ConfigurationError


@dataclass(frozen=True)
class RunConfig:
    """Hyperparameters and ablation switches for one refinement run."""

    p: int = 100
    q: int = 100
    block_count: int = 3
    kernel_size: int = 3
    use_skip: bool = True
    include_diagonal: bool = True
    use_huber: bool = True
    guidance_enabled: bool = True
    alpha: float = 15.0
    huber_delta: float = 1.0
    learning_rate: float = 0.1
    momentum: float = 0.9
    iterations: int = 200
    min_clusters: int = 3
    bn_eps: float = 1e-5
    reduction: str = "mean"
    output_affine: bool = True
    padding_mode: str = "replicate"
    init_gain: float = 0.05
    seed: int = 0

    def __post_init__(self):
        self.validate()

    def validate(self) -> None:
        if self.p < 1 or self.q < 1:
            raise ConfigurationError(f"p and q must be >= 1, got p={self.p}, q={self.q}")
        if self.block_count < 1:
            raise ConfigurationError(f"block_count must be >= 1, got {self.block_count}")
        if self.kernel_size < 1 or self.kernel_size % 2 == 0:
            raise ConfigurationError(f"kernel_size must be odd, got {self.kernel_size}")
        if not self.alpha > 0:
            raise ConfigurationError(f"alpha must be > 0, got {self.alpha}")
        if not self.huber_delta > 0:
            raise ConfigurationError(f"huber_delta must be > 0, got {self.huber_delta}")
        if not 0 <= self.momentum < 1:
            raise ConfigurationError(f"momentum must be in [0, 1), got {self.momentum}")
        if self.learning_rate < 0:
            raise ConfigurationError(f"learning_rate must be >= 0, got {self.learning_rate}")
        if self.iterations < 0:
            raise ConfigurationError(f"iterations must be >= 0, got {self.iterations}")
        if not 1 <= self.min_clusters <= self.q:
            raise ConfigurationError(
                f"min_clusters must be in [1, q={self.q}], got {self.min_clusters}")
        if self.padding_mode not in ("zeros", "reflect", "replicate"):
            raise ConfigurationError(f"unknown padding_mode {self.padding_mode!r}")
        if not self.init_gain > 0:
            raise ConfigurationError(f"init_gain must be > 0, got {self.init_gain}")
        if self.reduction not in ("sum", "mean", "pixel"):
            raise ConfigurationError(
                f"reduction must be 'sum', 'mean' or 'pixel', got {self.reduction!r}")
        if not self.bn_eps > 0:
            raise ConfigurationError(f"bn_eps must be > 0, got {self.bn_eps}")

    def replace(self, **changes) -> "RunConfig":
        return dataclasses.replace(self, **changes)

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    @classmethod
    def from_dict(cls, values: dict) -> "RunConfig":
        known = {f.name: f for f in fields(cls)}
        parsed = {}
        for key, raw in values.items():
            if key not in known:
                raise ConfigurationError(f"unknown config key {key!r}")
            parsed[key] = _coerce(key, known[key].type, raw)
        return cls(**parsed)


_TRUE = {"1", "true", "yes", "on"}
_FALSE = {"0", "false", "no", "off"}


def _coerce(key: str, type_name, raw):
    if not isinstance(raw, str):
        return raw
    text = raw.strip()
    type_name = type_name if isinstance(type_name, str) else type_name.__name__
    try:
        if type_name == "bool":
            low = text.lower()
            if low in _TRUE:
                return True
            if low in _FALSE:
                return False
            raise ValueError(text)
        if type_name == "int":
            return int(text)
        if type_name == "float":
            return float(text)
    except ValueError:
        raise ConfigurationError(f"bad value for {key}: {raw!r} (expected {type_name})") from None
    return text


def parse_config_text(text: str) -> dict[str, str]:
    """Parse ``key = value`` lines; ``#`` starts a comment."""
    values = {}
    for lineno, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigurationError(f"config line {lineno}: expected 'key = value', got {line!r}")
        key, value = (part.strip() for part in line.split("=", 1))
        if not key:
            raise ConfigurationError(f"config line {lineno}: empty key")
        values[key] = value
    return values


def load_config(path: str | Path | None = None, **overrides) -> RunConfig:
    """Defaults, then the file at ``path``, then ``overrides`` (None values skipped)."""
    values: dict = {}
    if path is not None:
        try:
            text = Path(path).read_text()
        except OSError as exc:
            raise ConfigurationError(f"cannot read config {path}: {exc}") from None
        values.update(parse_config_text(text))
    values.update({k: v for k, v in overrides.items() if v is not None})
    return RunConfig.from_dict(values)
