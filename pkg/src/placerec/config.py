"""Run configuration: file loading, dotted overrides and the run stamp.

A run is configured by an optional TOML or JSON file plus ``--set`` style
``section.key=value`` overrides, merged over the dataclass defaults one
section at a time. Unknown sections or keys are rejected rather than
ignored, so a typo cannot silently fall back to a default. The merged
result hashes to a stable sha256 and every artifact directory gets a
``stamp.json`` carrying that hash, the seed and the package version; no
timestamps, so identical runs write identical stamps.

Precedence, lowest to highest: defaults, config file, the
``PLACEREC_DATA_ROOT`` environment variable (for ``data_root`` only),
``--set`` overrides.
"""

from __future__ import annotations

import dataclasses
import hashlib
import json
import os
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence, Tuple

try:
    import tomllib
except ModuleNotFoundError:                       # Python < 3.11
    import tomli as tomllib

from . import __version__
from .errors import ConfigError
from .mining import MiningConfig
from .pipeline import ModelConfig
from .retrieval import DB_SPACING, MATCH_RADIUS
from .training import Stage1Config, Stage2Config
from .dataset import WorldSpec

DATA_ROOT_ENV = "PLACEREC_DATA_ROOT"


@dataclass
class RetrievalSettings:
    """Database construction and evaluation knobs."""

    spacing: float = DB_SPACING          # same-scene distance that opens a new entry
    match_radius: float = MATCH_RADIUS   # correct-match centroid distance, strict
    ks: Tuple[int, ...] = (1, 2, 3, 4, 5)


@dataclass
class KeyframeSettings:
    """Motion thresholds for keyframe selection."""

    min_translation: float = 0.3         # metres
    min_rotation_deg: float = 15.0


@dataclass
class RunConfig:
    """Everything a command needs, validated and ready to hash."""

    seed: int = 0                        # world generation seed
    data_root: str = "."
    world_dir: str = "world"             # dataset root, relative to data_root
    out_dir: str = "runs"                # checkpoints, metrics, reports
    model: ModelConfig = field(default_factory=ModelConfig)
    world: WorldSpec = field(default_factory=WorldSpec)
    stage1: Stage1Config = field(default_factory=Stage1Config)
    stage2: Stage2Config = field(default_factory=Stage2Config)
    retrieval: RetrievalSettings = field(default_factory=RetrievalSettings)
    keyframes: KeyframeSettings = field(default_factory=KeyframeSettings)

    def validate(self) -> None:
        self.model.validate()
        self.world.validate()
        self.stage2.mining.validate()
        if not self.model.two_stage and self.stage2.freeze_encoder:
            raise ConfigError(
                "two_stage=false trains the encoder with the quadruplet "
                "stage; freeze_encoder=true would leave it at initialisation. "
                "Set stage2.freeze_encoder=false for that variant.")
        if any(k < 1 for k in self.retrieval.ks):
            raise ConfigError(f"retrieval.ks must be positive: {self.retrieval.ks}")
        if self.retrieval.spacing <= 0 or self.retrieval.match_radius <= 0:
            raise ConfigError("retrieval distances must be positive")

    # ---- paths ------------------------------------------------------------

    def resolve(self, p) -> Path:
        p = Path(p)
        return p if p.is_absolute() else Path(self.data_root) / p

    @property
    def world_path(self) -> Path:
        return self.resolve(self.world_dir)

    @property
    def out_path(self) -> Path:
        return self.resolve(self.out_dir)

    # ---- identity ---------------------------------------------------------

    def as_dict(self) -> dict:
        d = dataclasses.asdict(self)
        return d

    def sha256(self) -> str:
        blob = json.dumps(self.as_dict(), sort_keys=True, default=list)
        return hashlib.sha256(blob.encode()).hexdigest()

    def run_id(self) -> str:
        return f"{__version__}+{self.sha256()[:12]}"

    def stamp(self) -> dict:
        return {"version": __version__, "run_id": self.run_id(),
                "config_sha256": self.sha256(), "seed": self.seed}

    def write_stamp(self, directory) -> None:
        directory = Path(directory)
        directory.mkdir(parents=True, exist_ok=True)
        (directory / "stamp.json").write_text(
            json.dumps(self.stamp(), indent=2, sort_keys=True) + "\n")


_SECTIONS = {
    "model": ModelConfig,
    "world": WorldSpec,
    "stage1": Stage1Config,
    "stage2": Stage2Config,
    "mining": MiningConfig,
    "retrieval": RetrievalSettings,
    "keyframes": KeyframeSettings,
}
_TOP_KEYS = ("seed", "data_root", "world_dir", "out_dir")


def _read_file(path: Path) -> dict:
    if path.suffix == ".toml":
        try:
            with open(path, "rb") as f:
                return tomllib.load(f)
        except tomllib.TOMLDecodeError as e:
            raise ConfigError(f"{path}: {e}") from e
    if path.suffix == ".json":
        try:
            return json.loads(path.read_text())
        except json.JSONDecodeError as e:
            raise ConfigError(f"{path}: {e}") from e
    raise ConfigError(f"{path}: config must be .toml or .json")


def _coerce(name: str, default, value):
    """Light type adaptation from parsed config values to dataclass fields."""
    if isinstance(default, tuple) and isinstance(value, (list, tuple)):
        return tuple(value)
    if name in ("neighbor_limits", "ks") and isinstance(value, (list, tuple)):
        return tuple(value)
    if isinstance(default, bool) or isinstance(value, bool):
        if isinstance(default, bool) != isinstance(value, bool):
            raise ConfigError(f"'{name}' expects a boolean, got {value!r}")
        return value
    if isinstance(default, float) and isinstance(value, int):
        return float(value)
    return value


def _build_section(name: str, factory, data: dict):
    fields = {f.name: f for f in dataclasses.fields(factory)}
    kwargs = {}
    for key, value in data.items():
        if key not in fields:
            raise ConfigError(f"unknown key '{name}.{key}'")
        if name == "stage2" and key == "mining":
            raise ConfigError("put mining thresholds in the [mining] section")
        f = fields[key]
        default = f.default if f.default is not dataclasses.MISSING else None
        kwargs[key] = _coerce(key, default, value)
    return factory(**kwargs)


def _parse_override(text: str):
    key, sep, raw = text.partition("=")
    if not sep or not key.strip():
        raise ConfigError(f"override must look like section.key=value: {text!r}")
    try:
        value = tomllib.loads(f"v = {raw}")["v"]
    except tomllib.TOMLDecodeError:
        value = raw                       # bare word: treat as a string
    return key.strip(), value


def load_config(path=None, overrides: Sequence[str] = ()) -> RunConfig:
    """Defaults, then the file, then the environment, then the overrides."""
    data: dict = {}
    if path is not None:
        p = Path(path)
        if not p.exists():
            raise FileNotFoundError(f"config file not found: {p}")
        data = _read_file(p)

    top = {}
    sections: dict = {}
    for key, value in data.items():
        if key in _TOP_KEYS:
            top[key] = value
        elif key in _SECTIONS:
            if not isinstance(value, dict):
                raise ConfigError(f"'{key}' must be a table/object")
            sections[key] = dict(value)
        else:
            raise ConfigError(f"unknown section or key '{key}'")

    env_root = os.environ.get(DATA_ROOT_ENV)
    if env_root:
        top["data_root"] = env_root

    for text in overrides:
        key, value = _parse_override(text)
        if "." in key:
            section, sub = key.split(".", 1)
            if section not in _SECTIONS:
                raise ConfigError(f"unknown section '{section}'")
            if "." in sub:
                raise ConfigError(f"overrides nest one level only: {key!r}")
            sections.setdefault(section, {})[sub] = value
        elif key in _TOP_KEYS:
            top[key] = value
        else:
            raise ConfigError(f"unknown key '{key}'")

    built = {name: _build_section(name, factory, sections.get(name, {}))
             for name, factory in _SECTIONS.items()}
    built["stage2"].mining = built.pop("mining")

    for key in ("seed",):
        if key in top and not isinstance(top[key], int):
            raise ConfigError(f"'{key}' expects an integer, got {top[key]!r}")
    cfg = RunConfig(**top, **built)
    cfg.validate()
    return cfg
