"""Experiment configuration: YAML files validated against a JSON schema."""

from __future__ import annotations

import os
from dataclasses import asdict, dataclass, field
from pathlib import Path

import jsonschema
import yaml

from .models import ROTNET_FAMILIES as BACKBONE_FAMILIES
from .pretrain import LOSSES, TrainConfig, default_train_config
from .transfer import ProbeConfig

TASKS = ("rotnet", "dae", "jigsaw", "supervised")
DATA_ENV = "SSL_SONAR_DATA"
RUNS_ENV = "SSL_SONAR_RUNS"


class ConfigError(ValueError):
    pass


_TRAIN_SCHEMA = {
    "type": "object",
    "additionalProperties": False,
    "properties": {
        "lr": {"type": "number", "exclusiveMinimum": 0},
        "epochs": {"type": "integer", "minimum": 1},
        "batch_size": {"type": "integer", "minimum": 1},
        "loss": {"enum": list(LOSSES)},
        "augmentation": {"type": "boolean"},
        "seed": {"type": "integer"},
        "select": {"enum": ["final", "best-val"]},
    },
}

_PROBE_SCHEMA = {
    "type": "object",
    "additionalProperties": False,
    "properties": {
        "spc_grid": {"type": "array", "items": {"type": "integer", "minimum": 1}, "minItems": 1},
        "repeats": {"type": "integer", "minimum": 1},
        "svm_C": {"type": "number", "exclusiveMinimum": 0},
        "seed_base": {"type": "integer"},
        "standardize": {"type": "boolean"},
    },
}

SCHEMA = {
    "type": "object",
    "additionalProperties": False,
    "required": ["task", "data"],
    "properties": {
        "task": {"enum": list(TASKS)},
        "family": {"enum": list(BACKBONE_FAMILIES) + ["jigsaw"]},
        "w": {"type": "integer", "minimum": 1},
        "c": {"type": "integer", "minimum": 1},
        "sigma": {"type": "number", "minimum": 0},
        "P": {"type": "integer", "minimum": 2},
        "name": {"type": "string"},
        "seed": {"type": "integer"},
        "output_dir": {"type": "string"},
        "data": {
            "type": "object",
            "additionalProperties": False,
            "required": ["root"],
            "properties": {
                "root": {"type": "string"},
                "fractions": {"type": "array", "items": {"type": "number", "minimum": 0}, "minItems": 3,
                              "maxItems": 3},
                "split_seed": {"type": "integer"},
                "split_manifest": {"type": "string"},
                "strict_grayscale": {"type": "boolean"},
                "mean_override": {"type": "number", "minimum": 0, "maximum": 255},
            },
        },
        "train": _TRAIN_SCHEMA,
        "probe": _PROBE_SCHEMA,
    },
    "allOf": [
        {"if": {"properties": {"task": {"const": "rotnet"}}},
         "then": {"required": ["family", "w"], "properties": {"family": {"enum": list(BACKBONE_FAMILIES)}}}},
        {"if": {"properties": {"task": {"const": "supervised"}}}, "then": {"required": ["family"]}},
        {"if": {"properties": {"task": {"const": "dae"}}}, "then": {"required": ["c"]}},
        {"if": {"properties": {"task": {"const": "jigsaw"}}}, "then": {"required": ["P"]}},
    ],
}


@dataclass
class ExperimentConfig:
    task: str
    data_root: Path
    train: TrainConfig
    probe: ProbeConfig = field(default_factory=ProbeConfig)
    family: str | None = None
    w: int | None = None
    c: int | None = None
    sigma: float = 0.0
    P: int | None = None
    name: str | None = None
    seed: int = 0
    output_dir: Path = Path("runs")
    fractions: tuple[float, float, float] = (0.70, 0.15, 0.15)
    split_seed: int = 0
    split_manifest: Path | None = None
    strict_grayscale: bool = False
    mean_override: float | None = None
    raw: dict = field(default_factory=dict)

    @property
    def run_id(self) -> str:
        if self.name:
            return self.name
        if self.task == "dae":
            return f"dae_c{self.c}_s{self.sigma:g}_seed{self.seed}"
        if self.task == "jigsaw":
            return f"jigsaw_P{self.P}_seed{self.seed}"
        tag = "ssl" if self.task == "rotnet" else "sl"
        if self.w is None:
            return f"{self.family}_{tag}_seed{self.seed}"
        return f"{self.family}_w{self.w}_{tag}_seed{self.seed}"

    def resolved(self) -> dict:
        """Fully resolved config, as embedded in every run directory."""
        return {
            "task": self.task, "family": self.family, "w": self.w, "c": self.c, "sigma": self.sigma,
            "P": self.P, "name": self.run_id, "seed": self.seed, "output_dir": str(self.output_dir),
            "data": {"root": str(self.data_root), "fractions": list(self.fractions), "split_seed": self.split_seed,
                     "split_manifest": str(self.split_manifest) if self.split_manifest else None,
                     "strict_grayscale": self.strict_grayscale, "mean_override": self.mean_override},
            "train": asdict(self.train),
            "probe": {**asdict(self.probe), "spc_grid": list(self.probe.spc_grid)},
        }


def _field_path(err: jsonschema.ValidationError) -> str:
    return ".".join(str(p) for p in err.absolute_path) or "<root>"


def _resolve_path(value: str, base: Path, env: str | None = None) -> Path:
    value = os.path.expandvars(value)
    p = Path(value).expanduser()
    if not p.is_absolute():
        env_root = os.environ.get(env) if env else None
        p = (Path(env_root) / p) if env_root and not (base / p).exists() else base / p
    return p


def validate_config(raw: dict, base_dir: str | Path = ".", check_paths: bool = True) -> ExperimentConfig:
    """Validate a parsed config dict; every problem is reported with its field path."""
    if not isinstance(raw, dict):
        raise ConfigError("<root>: config must be a mapping")
    errors = sorted(jsonschema.Draft7Validator(SCHEMA).iter_errors(raw), key=lambda e: list(e.absolute_path))
    if errors:
        raise ConfigError("; ".join(f"{_field_path(e)}: {e.message}" for e in errors))
    base = Path(base_dir)
    task = raw["task"]
    family = raw.get("family")
    w = raw.get("w")
    if task == "supervised" and family != "jigsaw" and w is None:
        raise ConfigError("w: required for supervised backbone runs")
    data = raw["data"]
    root = _resolve_path(data["root"], base, DATA_ENV)
    if check_paths and not root.is_dir():
        raise ConfigError(f"data.root: directory {root} does not exist")
    manifest = _resolve_path(data["split_manifest"], base) if data.get("split_manifest") else None
    if check_paths and manifest is not None and not manifest.is_file():
        raise ConfigError(f"data.split_manifest: file {manifest} does not exist")
    fractions = tuple(data.get("fractions", (0.70, 0.15, 0.15)))
    if abs(sum(fractions) - 1.0) > 1e-9:
        raise ConfigError(f"data.fractions: must sum to 1, got {sum(fractions)}")
    seed = raw.get("seed", 0)
    train_kw = dict(raw.get("train", {}))
    train_kw.setdefault("seed", seed)
    try:
        train = default_train_config(task, family, **train_kw)
        probe = ProbeConfig(**raw.get("probe", {}))
    except ValueError as exc:
        raise ConfigError(f"train/probe: {exc}") from exc
    out = raw.get("output_dir") or os.environ.get(RUNS_ENV) or "runs"
    return ExperimentConfig(
        task=task, data_root=root, train=train, probe=probe, family=family, w=w, c=raw.get("c"),
        sigma=float(raw.get("sigma", 0.0)), P=raw.get("P"), name=raw.get("name"), seed=seed,
        output_dir=_resolve_path(out, base) if not Path(out).is_absolute() else Path(out),
        fractions=fractions, split_seed=data.get("split_seed", 0), split_manifest=manifest,
        strict_grayscale=data.get("strict_grayscale", False), mean_override=data.get("mean_override"), raw=raw)


def load_config(path: str | Path, check_paths: bool = True) -> ExperimentConfig:
    path = Path(path)
    if not path.is_file():
        raise ConfigError(f"config file {path} not found")
    try:
        raw = yaml.safe_load(path.read_text())
    except yaml.YAMLError as exc:
        raise ConfigError(f"{path}: invalid YAML ({exc})") from exc
    return validate_config(raw, path.parent, check_paths)
