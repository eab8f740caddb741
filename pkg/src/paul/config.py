"""Run configuration: one flat YAML mapping of typed keys.

Every field of :class:`RunConfig` can be set in the file or overridden on the
command line (``--learning-rate 1e-3``); command-line values win. Unknown keys
are rejected so a typo never silently falls back to a default.
"""

from __future__ import annotations

import dataclasses
import hashlib
import json
import os
import typing
from dataclasses import dataclass, fields
from pathlib import Path
from typing import Any, Optional

import yaml

from .augment import FILLS, GUIDANCES
from .cotrain import POLICIES, VARIANTS, TrainConfig
from .partition import STRATEGIES

# keys that name locations rather than change results; excluded from the hash
PATH_KEYS = ("data_dir", "out_dir", "dump_saliency")


class ConfigError(ValueError):
    """Invalid or unknown configuration value."""


@dataclass
class RunConfig:
    # dataset
    data_dir: str = "data"
    out_dir: str = "runs/default"
    n_pairs: int = 1000
    noise_ratio: float = 0.3
    world_size: int = 1024
    n_landmarks: int = 400
    extent: float = 64.0
    holdout: tuple = (768.0, 0.0, 1024.0, 1024.0)
    # training (mirrors TrainConfig)
    epochs: int = 5
    warmup_epochs: int = 1
    batch_size: int = 64
    learning_rate: float = 1e-4
    lr_schedule: str = "cosine"
    tau_infonce: float = 0.07
    tau_evidence: float = 1.0
    lam: float = 0.005
    lam_edl: float = 1.0
    eta: float = 0.5
    connectivity: int = 4
    partition_strategy: str = "gmm"
    clean_threshold: float = 0.5
    assumed_noise_rate: float = 0.3
    fixed_cutoff: Optional[float] = None
    gmm_scope: str = "batch"
    guidance: str = "edl"
    fill_strategy: str = "zero"
    match_reduction: str = "mean"
    edl_reduction: str = "sum"
    kl_remove_target: bool = False
    seed: int = 0
    variant: str = "paul"
    output_dim: int = 64
    hidden: int = 128
    resolution: int = 32
    # evaluation and artifacts
    inference_policy: str = "model_a"
    eval_split: str = "test"
    sdm_scale: float = 64.0
    ablate_seeds: tuple = (0, 1, 2)
    dump_saliency: str = ""

    def __post_init__(self):
        self.validate()

    def validate(self) -> None:
        checks = [
            (0.0 <= self.noise_ratio <= 1.0, f"noise_ratio must lie in [0, 1], got {self.noise_ratio}"),
            (self.n_pairs >= 1, "n_pairs must be positive"),
            (self.epochs >= 0 and self.warmup_epochs >= 0, "epoch counts must be non-negative"),
            (self.learning_rate > 0, "learning_rate must be positive"),
            (self.tau_infonce > 0 and self.tau_evidence > 0, "temperatures must be positive"),
            (self.eta > 0.0, "eta must be positive"),
            (self.variant in VARIANTS, f"variant must be one of {VARIANTS}"),
            (self.partition_strategy in STRATEGIES, f"partition_strategy must be one of {STRATEGIES}"),
            (self.guidance in GUIDANCES, f"guidance must be one of {GUIDANCES}"),
            (self.fill_strategy in FILLS, f"fill_strategy must be one of {FILLS}"),
            (self.inference_policy in POLICIES, f"inference_policy must be one of {POLICIES}"),
            (self.eval_split in ("test", "train"), "eval_split must be 'test' or 'train'"),
            (self.match_reduction in ("mean", "sum"), "match_reduction must be 'mean' or 'sum'"),
            (self.edl_reduction in ("mean", "sum"), "edl_reduction must be 'mean' or 'sum'"),
            (len(self.holdout) == 4, "holdout must have four numbers: x0, y0, x1, y1"),
            (len(self.ablate_seeds) >= 1, "ablate_seeds must not be empty"),
            (self.sdm_scale > 0, "sdm_scale must be positive"),
        ]
        for ok, msg in checks:
            if not ok:
                raise ConfigError(msg)
        try:
            self.train_config()
        except ValueError as exc:
            raise ConfigError(str(exc)) from exc

    def train_config(self) -> TrainConfig:
        names = {f.name for f in fields(TrainConfig)}
        return TrainConfig(**{k: v for k, v in self.as_dict().items() if k in names})

    def as_dict(self) -> dict:
        return {f.name: getattr(self, f.name) for f in fields(self)}

    def replace(self, **changes) -> "RunConfig":
        return coerce({**self.as_dict(), **changes})

    def hash(self) -> str:
        """Short digest of every result-affecting key."""
        d = {k: v for k, v in self.as_dict().items() if k not in PATH_KEYS}
        blob = json.dumps(d, sort_keys=True, default=list).encode()
        return hashlib.sha256(blob).hexdigest()[:16]


_HINTS = typing.get_type_hints(RunConfig)


def _coerce_value(name: str, value: Any) -> Any:
    hint = _HINTS[name]
    if typing.get_origin(hint) is typing.Union:
        if value is None or (isinstance(value, str) and value.lower() in ("none", "null", "")):
            return None
        hint = next(a for a in typing.get_args(hint) if a is not type(None))
    try:
        if hint is bool:
            if isinstance(value, str):
                low = value.lower()
                if low not in ("true", "false", "1", "0", "yes", "no"):
                    raise ValueError(value)
                return low in ("true", "1", "yes")
            return bool(value)
        if hint is int:
            if isinstance(value, float) and not value.is_integer():
                raise ValueError(value)
            return int(value)
        if hint is float:
            return float(value)
        if hint is tuple:
            if isinstance(value, str):
                value = [v for v in value.replace(",", " ").split() if v]
            items = [yaml.safe_load(v) if isinstance(v, str) else v for v in value]
            default = getattr(RunConfig, name)
            kind = type(default[0]) if default else float
            return tuple(kind(v) for v in items)
        if value is None:
            raise ValueError("missing value")
        return str(value)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"bad value for {name!r}: {value!r}") from exc


def coerce(raw: dict) -> RunConfig:
    """Build a RunConfig from loosely typed values, rejecting unknown keys."""
    known = {f.name for f in fields(RunConfig)}
    unknown = sorted(set(raw) - known)
    if unknown:
        raise ConfigError(f"unknown config key(s): {', '.join(unknown)}")
    return RunConfig(**{k: _coerce_value(k, v) for k, v in raw.items()})


def parse(text: str) -> RunConfig:
    try:
        raw = yaml.safe_load(text) or {}
    except yaml.YAMLError as exc:
        raise ConfigError(f"config is not valid YAML: {exc}") from exc
    if not isinstance(raw, dict):
        raise ConfigError("config must be a flat key: value mapping")
    nested = [k for k, v in raw.items() if isinstance(v, dict)]
    if nested:
        raise ConfigError(f"config must be flat; nested keys: {nested}")
    return coerce(raw)


def serialize(config: RunConfig) -> str:
    d = {k: list(v) if isinstance(v, tuple) else v for k, v in config.as_dict().items()}
    return yaml.safe_dump(d, sort_keys=False, default_flow_style=None)


def load(path: Optional[str] = None, overrides: Optional[dict] = None, env=None) -> RunConfig:
    """File values, then PAUL_SEED if the file leaves seed unset, then overrides."""
    env = os.environ if env is None else env
    raw: dict = {}
    if path:
        p = Path(path)
        if not p.exists():
            raise ConfigError(f"config file not found: {p}")
        raw = parse(p.read_text()).as_dict()
        explicit = yaml.safe_load(p.read_text()) or {}
    else:
        explicit = {}
    if "seed" not in explicit and env.get("PAUL_SEED") not in (None, ""):
        raw["seed"] = env["PAUL_SEED"]
    raw.update({k: v for k, v in (overrides or {}).items() if v is not None})
    return coerce(raw)


def field_names() -> list[str]:
    return [f.name for f in dataclasses.fields(RunConfig)]
