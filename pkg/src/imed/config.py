"""Run configuration (versioned JSON document) and per-epoch metrics records."""
from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

import jsonschema

from imed.errors import ConfigError

SCHEMA_VERSION = 1

_pos_num = {"type": "number", "exclusiveMinimum": 0}
_nonneg_num = {"type": "number", "minimum": 0}
_pos_int = {"type": "integer", "minimum": 1}
_nonneg_int = {"type": "integer", "minimum": 0}

RUN_CONFIG_SCHEMA = {
    "$schema": "https://json-schema.org/draft/2020-12/schema",
    "title": "imed run config",
    "type": "object",
    "additionalProperties": False,
    "properties": {
        "schema_version": {"const": SCHEMA_VERSION},
        "transfer_name": {"type": "string", "minLength": 1},
        "dataset": {
            "type": "object",
            "properties": {
                "path": {"type": "string"},
                "kind": {"enum": ["moons", "blobs", "rings"]},
                "shift": {"type": "number"},
                "n": _pos_int,
                "seed": _nonneg_int,
                "noise": _nonneg_num,
            },
            "additionalProperties": False,
        },
        "seed": _nonneg_int,
        "seeds": {"type": "array", "items": _nonneg_int, "minItems": 1},
        "methods": {
            "type": "array",
            "items": {"enum": ["source_only", "jan_like", "cdan_like"]},
            "minItems": 1,
        },
        "share_head": {"type": "boolean"},
        "feature_dim": _pos_int,
        "backbone_hidden": {"type": "array", "items": _pos_int},
        "component_weight": _nonneg_num,
        "mu1": _nonneg_num,
        "mu2": _nonneg_num,
        "mu3": _nonneg_num,
        "alpha": {"type": "number", "minimum": 1},
        "rho": _nonneg_num,
        "groups": _pos_int,
        "tau": _pos_int,
        "fusion_depth": _pos_int,
        "fusion_kind": {"enum": ["shuffle", "dense", "avg"]},
        "instance_aware": {"type": "boolean"},
        "endogeny_hidden": _pos_int,
        "disc_hidden": _pos_int,
        "projection_dim": _pos_int,
        "softmax_conditioning": {"type": "boolean"},
        "mcc_temperature": _pos_num,
        "feature_kd": {"enum": ["softmax", "mse"]},
        "l0": _pos_num,
        "component_l0": _pos_num,
        "momentum": {"type": "number", "minimum": 0, "maximum": 1},
        "weight_decay": _nonneg_num,
        "grad_clip": _nonneg_num,
        "disc_lr_mult": _pos_num,
        "epoch_c": _nonneg_int,
        "epoch_t": _nonneg_int,
        "epoch_s": _nonneg_int,
        "iters": _pos_int,
        "batch_size": _pos_int,
        "components_pretrained": {"type": "boolean"},
        "distill": {"type": "boolean"},
    },
}


@dataclass
class RunConfig:
    schema_version: int = SCHEMA_VERSION
    transfer_name: str = "moons_rot30"
    dataset: dict = field(default_factory=lambda: {"kind": "moons", "shift": 30.0, "n": 1000, "seed": 0})
    seed: int = 0
    seeds: list = field(default_factory=lambda: [0, 1])
    methods: list = field(default_factory=lambda: ["jan_like"])
    share_head: bool = False
    feature_dim: int = 32
    backbone_hidden: list = field(default_factory=lambda: [64, 64])
    component_weight: float = 1.0
    mu1: float = 1.0
    mu2: float = 0.1
    mu3: float = 1.0
    alpha: float = 2.0
    rho: float = 0.02
    groups: int = 4
    tau: int = 128
    fusion_depth: int = 2
    fusion_kind: str = "shuffle"
    instance_aware: bool = True
    endogeny_hidden: int = 256
    disc_hidden: int = 1024
    projection_dim: int = 1024
    softmax_conditioning: bool = True
    mcc_temperature: float = 2.5
    feature_kd: str = "softmax"
    l0: float = 0.003
    component_l0: float = 0.03
    momentum: float = 0.9
    weight_decay: float = 5e-4
    grad_clip: float = 5.0
    disc_lr_mult: float = 1.0
    epoch_c: int = 10
    epoch_t: int = 5
    epoch_s: int = 15
    iters: int = 50
    batch_size: int = 32
    components_pretrained: bool = True
    distill: bool = True

    def __post_init__(self):
        validate(asdict(self))
        if len(self.methods) not in (1, len(self.seeds)):
            raise ConfigError(f"methods: give one method or one per seed ({len(self.seeds)})")

    @property
    def n_components(self) -> int:
        return len(self.seeds)

    def component_methods(self) -> list[str]:
        return list(self.methods) * len(self.seeds) if len(self.methods) == 1 else list(self.methods)

    def to_dict(self) -> dict:
        return asdict(self)

    def replace(self, **changes) -> "RunConfig":
        d = self.to_dict()
        d.update(changes)
        return RunConfig(**d)

    @classmethod
    def from_dict(cls, d: dict) -> "RunConfig":
        validate(d)
        return cls(**d)

    @classmethod
    def load(cls, path: Path) -> "RunConfig":
        try:
            d = json.loads(Path(path).read_text())
        except json.JSONDecodeError as err:
            raise ConfigError(f"{path}: invalid JSON ({err})") from None
        return cls.from_dict(d)

    def dump(self, path: Path):
        Path(path).write_text(json.dumps(self.to_dict(), indent=2, sort_keys=True) + "\n")


def validate(d: dict):
    """Raise ConfigError listing every offending field."""
    validator = jsonschema.Draft202012Validator(RUN_CONFIG_SCHEMA)
    errors = sorted(validator.iter_errors(d), key=lambda e: list(e.absolute_path))
    if errors:
        lines = []
        for e in errors:
            where = ".".join(str(p) for p in e.absolute_path) or "<root>"
            lines.append(f"{where}: {e.message}")
        raise ConfigError("invalid run config:\n  " + "\n  ".join(lines))


CONFIG_FIELDS = tuple(f.name for f in fields(RunConfig))


@dataclass
class MetricsRecord:
    transfer_name: str
    model: str  # "teacher", "student", "component0", ...
    phase: str
    epoch: int
    source_acc: float
    target_acc: float
    losses: dict = field(default_factory=dict)
    wall_time: float = 0.0

    def __post_init__(self):
        for name in ("source_acc", "target_acc"):
            v = getattr(self, name)
            if not 0.0 <= v <= 1.0:
                raise ValueError(f"{name} must be in [0, 1], got {v}")

    @property
    def source_risk(self) -> float:
        return 1.0 - self.source_acc

    @property
    def target_risk(self) -> float:
        return 1.0 - self.target_acc

    def to_dict(self) -> dict:
        return asdict(self)
