"""Pipeline configuration: one JSON document, one block per stage.

Each stage block is validated against the declared defaults of that stage's
config dataclass: unknown keys are rejected and every type mismatch is
reported, so a bad config fails with the complete list of violations instead
of the first one. Stage seeds not set explicitly are derived from the global
seed, which keeps the whole run reproducible from a single integer.
"""

from __future__ import annotations

import hashlib
import json
import typing
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

from .dataset import DatasetConfig
from .diffusion import TrainConfig
from .distill import SdsConfig
from .materials import PbrConfig
from .recon import ReconTrainConfig
from .utils import derive_seed

PRECISIONS = ("f32", "f64")
SCORE_KINDS = ("oracle", "model")
BUILTIN_ENVS = ("studio", "white", "purple")


@dataclass
class DmtetStageConfig:
    """Surface-stage grid and albedo-distillation settings; the distillation
    schedule itself comes from the sds block (iters_dmtet, lr_dmtet)."""

    resolution: int = 32
    albedo_iters: int = 300
    seed: int = 0


@dataclass
class RelightStageConfig:
    envs: tuple = BUILTIN_ENVS
    resolution: int = 64
    azimuth_deg: float = 30.0
    elevation_deg: float = 15.0
    radius: float = 2.0
    seed: int = 0


STAGE_SCHEMAS: dict[str, type] = {
    "dataset": DatasetConfig,
    "anmvm": TrainConfig,
    "trm": ReconTrainConfig,
    "sds": SdsConfig,
    "dmtet": DmtetStageConfig,
    "pbr": PbrConfig,
    "relight": RelightStageConfig,
}

GLOBAL_DEFAULTS = {"seed": 0, "out": "runs/demo", "precision": "f32", "score": "oracle"}


class ConfigError(ValueError):
    def __init__(self, violations: list[str]):
        self.violations = list(violations)
        super().__init__("invalid config:\n" + "\n".join(f"  - {v}" for v in violations))


@dataclass
class PipelineConfig:
    seed: int = 0
    out: str = "runs/demo"
    precision: str = "f32"
    score: str = "oracle"
    dataset: DatasetConfig = field(default_factory=DatasetConfig)
    anmvm: TrainConfig = field(default_factory=TrainConfig)
    trm: ReconTrainConfig = field(default_factory=ReconTrainConfig)
    sds: SdsConfig = field(default_factory=SdsConfig)
    dmtet: DmtetStageConfig = field(default_factory=DmtetStageConfig)
    pbr: PbrConfig = field(default_factory=PbrConfig)
    relight: RelightStageConfig = field(default_factory=RelightStageConfig)

    def stage_config(self, stage: str):
        return getattr(self, stage)

    def stage_hash(self, stage: str) -> str:
        """Hash of the effective stage block plus the globals that feed it."""
        doc = {
            "stage": stage,
            "block": asdict(self.stage_config(stage)) if stage in STAGE_SCHEMAS else {},
            "seed": self.seed,
            "precision": self.precision,
            "score": self.score,
        }
        return hashlib.sha256(json.dumps(doc, sort_keys=True).encode()).hexdigest()[:16]


def _type_ok(value, expected) -> bool:
    origin = typing.get_origin(expected)
    if origin in (tuple, list):
        if not isinstance(value, (list, tuple)):
            return False
        args = [a for a in typing.get_args(expected) if a is not Ellipsis]
        return all(_type_ok(v, args[0]) for v in value) if args else True
    if expected is bool:
        return isinstance(value, bool)
    if expected is int:
        return isinstance(value, int) and not isinstance(value, bool)
    if expected is float:
        return isinstance(value, (int, float)) and not isinstance(value, bool)
    if expected is str:
        return isinstance(value, str)
    return True


def _coerce(value, expected):
    origin = typing.get_origin(expected)
    if origin in (tuple, list) or expected is tuple:
        return tuple(value)
    if expected is float:
        return float(value)
    return value


def parse_config(doc: dict) -> PipelineConfig:
    """Validate the whole document and build the effective config.

    Raises ConfigError listing every violation; never stops at the first.
    """
    if not isinstance(doc, dict):
        raise ConfigError(["top level must be a JSON object"])
    violations: list[str] = []
    known_top = set(GLOBAL_DEFAULTS) | set(STAGE_SCHEMAS)
    for key in doc:
        if key not in known_top:
            violations.append(f"{key}: unknown key")

    globals_eff = dict(GLOBAL_DEFAULTS)
    for key, default in GLOBAL_DEFAULTS.items():
        if key in doc:
            if not _type_ok(doc[key], type(default)):
                violations.append(f"{key}: expected {type(default).__name__}, got {doc[key]!r}")
            else:
                globals_eff[key] = doc[key]
    if globals_eff["precision"] not in PRECISIONS:
        violations.append(f"precision: must be one of {PRECISIONS}, got {globals_eff['precision']!r}")
    if globals_eff["score"] not in SCORE_KINDS:
        violations.append(f"score: must be one of {SCORE_KINDS}, got {globals_eff['score']!r}")

    blocks = {}
    for stage, schema in STAGE_SCHEMAS.items():
        block = doc.get(stage, {})
        if not isinstance(block, dict):
            violations.append(f"{stage}: stage block must be a JSON object")
            block = {}
        hints = typing.get_type_hints(schema)
        declared = {f.name: hints[f.name] for f in fields(schema)}
        kwargs = {}
        for key, value in block.items():
            if key not in declared:
                violations.append(f"{stage}.{key}: unknown key")
                continue
            if not _type_ok(value, declared[key]):
                violations.append(
                    f"{stage}.{key}: expected {getattr(declared[key], '__name__', declared[key])}, got {value!r}"
                )
                continue
            kwargs[key] = _coerce(value, declared[key])
        if "seed" in declared and "seed" not in kwargs:
            kwargs["seed"] = derive_seed(int(globals_eff["seed"]), stage)
        blocks[stage] = (schema, kwargs)

    built = {}
    for stage, (schema, kwargs) in blocks.items():
        try:
            built[stage] = schema(**kwargs)
        except (ValueError, TypeError) as exc:
            violations.append(f"{stage}: {exc}")
    if "relight" in built and any(e not in BUILTIN_ENVS for e in built["relight"].envs):
        violations.append(f"relight.envs: entries must be among {BUILTIN_ENVS}")
    if violations:
        raise ConfigError(violations)

    return PipelineConfig(
        seed=int(globals_eff["seed"]),
        out=str(globals_eff["out"]),
        precision=str(globals_eff["precision"]),
        score=str(globals_eff["score"]),
        **built,
    )


def load_config(path: str | Path) -> PipelineConfig:
    text = Path(path).read_text()
    try:
        doc = json.loads(text)
    except json.JSONDecodeError as exc:
        raise ConfigError([f"{path}: not valid JSON ({exc})"]) from exc
    return parse_config(doc)


def quickstart_doc(seed: int = 7, out: str = "runs/quickstart") -> dict:
    """Small-everything document: 8 scenes, short trainings, oracle score."""
    return {
        "seed": seed,
        "out": out,
        "score": "oracle",
        "dataset": {"scenes": 8},
        "anmvm": {"steps": 60},
        "trm": {"steps": 40},
        "sds": {"iters_nerf": 40, "iters_dmtet": 20, "unsharp_last": 10, "resolution": 32},
        "dmtet": {"resolution": 16, "albedo_iters": 60},
        "pbr": {"iters": 40, "resolution": 32},
        "relight": {"resolution": 32},
    }
