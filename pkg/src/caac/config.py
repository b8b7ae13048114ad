"""One JSON document configures a whole run.

Sections map onto the library dataclasses; unknown keys anywhere are an
error, and :meth:`RunConfig.resolved` materializes every default so the
logged copy (and its hash) fully determines the run.
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

from .baselines import MlpConfig
from .dataset import DataConfig
from .model import CaacConfig
from .scene import SceneParams
from .train import TrainConfig


class ConfigError(ValueError):
    pass


@dataclass(frozen=True)
class EvalConfig:
    angles: str = "sza=0:60:15,vza=0:45:15"
    noise_sigma: float = 0.01
    effects: bool = True
    batch_size: int = 64


_SECTIONS = {
    "scene": SceneParams,
    "data": DataConfig,
    "model": CaacConfig,
    "mlp": MlpConfig,
    "train": TrainConfig,
    "eval": EvalConfig,
}


def _build(cls, data, where: str):
    if not isinstance(data, dict):
        raise ConfigError(f"{where}: expected an object")
    known = {f.name: f for f in fields(cls)}
    unknown = sorted(set(data) - set(known))
    if unknown:
        raise ConfigError(f"{where}: unknown keys {unknown}")
    kwargs = {}
    for k, v in data.items():
        default = getattr(cls(), k) if k in known else None
        if isinstance(default, tuple) and isinstance(v, list):
            v = tuple(v)
        kwargs[k] = v
    try:
        return cls(**kwargs)
    except (TypeError, ValueError) as err:
        raise ConfigError(f"{where}: {err}") from err


@dataclass(frozen=True)
class RunConfig:
    seed: int = 0
    scene: SceneParams = field(default_factory=SceneParams)
    data: DataConfig = field(default_factory=DataConfig)
    model: CaacConfig = field(default_factory=CaacConfig)
    mlp: MlpConfig = field(default_factory=MlpConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    eval: EvalConfig = field(default_factory=EvalConfig)

    @classmethod
    def from_dict(cls, data: dict) -> "RunConfig":
        if not isinstance(data, dict):
            raise ConfigError("config must be a JSON object")
        unknown = sorted(set(data) - set(_SECTIONS) - {"seed"})
        if unknown:
            raise ConfigError(f"unknown top-level keys {unknown}")
        seed = data.get("seed", 0)
        if not isinstance(seed, int) or isinstance(seed, bool) or seed < 0:
            raise ConfigError("seed must be a non-negative integer")
        parts = {name: _build(cls_, data.get(name, {}), name) for name, cls_ in _SECTIONS.items()}
        return cls(seed=seed, **parts)

    def resolved(self) -> dict:
        return json.loads(json.dumps(asdict(self)))

    def hash(self) -> str:
        blob = json.dumps(self.resolved(), sort_keys=True, separators=(",", ":"))
        return hashlib.sha256(blob.encode()).hexdigest()[:16]


def load_config(path) -> RunConfig:
    """Read a RunConfig; JSON errors are re-raised as ConfigError with line/column."""
    if path is None:
        return RunConfig()
    text = Path(path).read_text()
    try:
        data = json.loads(text)
    except json.JSONDecodeError as err:
        raise ConfigError(f"{path}: invalid JSON at line {err.lineno} column {err.colno}: {err.msg}") from err
    return RunConfig.from_dict(data)
