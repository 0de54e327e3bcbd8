"""Checkpoint container: named parameter groups plus a provenance record."""

from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass, field
from pathlib import Path

from safetensors.torch import load_file, save_file

from .backbone import ModelConfig
from .core_math import NoiseSchedule, make_noise_schedule
from .model import GROUP_NAMES, ColorizationModel

STAGE_ORDER = ("0", "1a", "1b", "2", "3")
PREREQUISITE = {"0": None, "1a": "0", "1b": "1a", "2": "1b", "3": "2"}


class ProvenanceError(RuntimeError):
    """A checkpoint lacks the training stages an operation depends on."""


@dataclass(frozen=True)
class ScheduleConfig:
    T: int = 1000
    beta_start: float = 1e-4
    beta_end: float = 0.02

    def build(self) -> NoiseSchedule:
        return make_noise_schedule(self.T, self.beta_start, self.beta_end)

    def to_dict(self) -> dict:
        return {"T": self.T, "beta_start": self.beta_start, "beta_end": self.beta_end}


def config_hash(model_cfg: ModelConfig, schedule: ScheduleConfig) -> str:
    blob = json.dumps({"model": model_cfg.to_dict(), "schedule": schedule.to_dict()}, sort_keys=True)
    return hashlib.sha256(blob.encode()).hexdigest()[:16]


@dataclass
class Checkpoint:
    model: ColorizationModel
    schedule: ScheduleConfig = field(default_factory=ScheduleConfig)
    stages: list = field(default_factory=list)
    seeds: dict = field(default_factory=dict)
    steps: dict = field(default_factory=dict)
    history: dict = field(default_factory=dict)

    @classmethod
    def fresh(cls, model_cfg: ModelConfig | None = None, schedule: ScheduleConfig | None = None) -> "Checkpoint":
        return cls(ColorizationModel(model_cfg or ModelConfig()), schedule or ScheduleConfig())

    @property
    def config(self) -> ModelConfig:
        return self.model.cfg

    @property
    def provenance(self) -> dict:
        return {
            "stages_completed": list(self.stages),
            "config_hash": config_hash(self.model.cfg, self.schedule),
            "seeds": dict(self.seeds),
            "steps": dict(self.steps),
            "model_config": self.model.cfg.to_dict(),
            "schedule": self.schedule.to_dict(),
            "groups": list(GROUP_NAMES),
        }

    def has_stage(self, stage: str) -> bool:
        return stage in self.stages

    def require_stage(self, stage: str, purpose: str) -> None:
        if stage not in self.stages:
            done = ", ".join(self.stages) or "none"
            raise ProvenanceError(f"{purpose} requires completed stage {stage}; checkpoint has: {done}")

    def save(self, path) -> Path:
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        tensors = {}
        for name in GROUP_NAMES:
            for key, t in self.model.group_state(name).items():
                tensors[key] = t.detach().contiguous().clone()
        meta = {"provenance": json.dumps(self.provenance, sort_keys=True)}
        save_file(tensors, str(path), metadata=meta)
        return path

    @classmethod
    def load(cls, path) -> "Checkpoint":
        from safetensors import safe_open

        path = Path(path)
        with safe_open(str(path), framework="pt") as f:
            meta = f.metadata() or {}
        if "provenance" not in meta:
            raise ValueError(f"{path} has no provenance record")
        prov = json.loads(meta["provenance"])
        missing = set(GROUP_NAMES) - set(prov.get("groups", []))
        if missing:
            raise ValueError(f"{path} lacks parameter groups {sorted(missing)}")
        model = ColorizationModel(ModelConfig.from_dict(prov["model_config"]))
        tensors = load_file(str(path))
        for name in GROUP_NAMES:
            prefix = f"{name}."
            state = {k[len(prefix):]: v for k, v in tensors.items() if k.startswith(prefix)}
            model.group(name).load_state_dict(state, strict=True)
        model.requires_grad_(False)
        ckpt = cls(model, ScheduleConfig(**prov["schedule"]), list(prov["stages_completed"]),
                   dict(prov.get("seeds", {})), dict(prov.get("steps", {})))
        if prov.get("config_hash") != config_hash(model.cfg, ckpt.schedule):
            raise ValueError(f"{path}: config hash does not match its model/schedule config")
        return ckpt


def file_checksum(path) -> str:
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()


def clone_checkpoint(ckpt: Checkpoint) -> Checkpoint:
    model = ColorizationModel(ckpt.model.cfg)
    model.load_state_dict(ckpt.model.state_dict())
    return Checkpoint(model, ckpt.schedule, list(ckpt.stages), dict(ckpt.seeds), dict(ckpt.steps))
