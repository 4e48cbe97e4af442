"""Experiment configuration: one JSON document drives the whole pipeline.

Every run directory receives the exact config that produced it, all
randomness flows from the named seeds, and validation reports every bad
field at once before any compute starts.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field

from .data import SplitProtocol, SynthConfig
from .importance import CRITERIA
from .model import ModelConfig
from .training import TrainConfig

__all__ = ["ExperimentConfig", "PruneGridConfig", "DataConfig", "ConfigError"]


class ConfigError(ValueError):
    def __init__(self, problems):
        self.problems = list(problems)
        super().__init__("invalid configuration:\n" + "\n".join(f"  - {p}" for p in self.problems))


@dataclass
class DataConfig:
    source: str = "synthetic"  # synthetic | folder
    synthetic: SynthConfig = field(default_factory=SynthConfig)
    folder: str | None = None

    def validate(self) -> list[str]:
        problems = []
        if self.source not in ("synthetic", "folder"):
            problems.append(f"data.source must be 'synthetic' or 'folder', got {self.source!r}")
        if self.source == "synthetic":
            problems.extend(f"data.synthetic: {p}" for p in self.synthetic.validate())
        elif not self.folder:
            problems.append("data.folder path required when source is 'folder'")
        return problems

    def to_dict(self) -> dict:
        return {
            "source": self.source,
            "synthetic": self.synthetic.to_dict(),
            "folder": self.folder,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "DataConfig":
        return cls(
            source=d.get("source", "synthetic"),
            synthetic=SynthConfig.from_dict(d.get("synthetic", {})),
            folder=d.get("folder"),
        )


@dataclass
class PruneGridConfig:
    criteria: list[str] = field(default_factory=lambda: list(CRITERIA))
    ratios: list[float] = field(default_factory=lambda: [0.5, 0.75, 0.95])
    sites: list[str] = field(default_factory=lambda: ["attn_head", "mlp_channel"])
    min_heads: int = 1
    min_mlp: int = 1
    min_embed: int = 8
    calibration_batches: int = 8
    calibration_batch_size: int = 8
    aggregation: str = "mean"
    measure_speedup: bool = True
    speedup_batch: int = 16
    speedup_trials: int = 7

    def validate(self) -> list[str]:
        problems = []
        unknown = [c for c in self.criteria if c not in CRITERIA]
        if unknown:
            problems.append(f"prune.criteria contains unknown entries {unknown}")
        if not self.criteria:
            problems.append("prune.criteria must not be empty")
        bad = [r for r in self.ratios if not 0.0 <= r < 1.0]
        if bad:
            problems.append(f"prune.ratios must lie in [0, 1), got {bad}")
        if not self.ratios:
            problems.append("prune.ratios must not be empty")
        unknown_sites = set(self.sites) - {"attn_head", "mlp_channel", "embed_channel"}
        if unknown_sites:
            problems.append(f"prune.sites contains unknown entries {sorted(unknown_sites)}")
        if min(self.min_heads, self.min_mlp, self.min_embed) < 1:
            problems.append("prune minimum widths must be positive")
        if self.aggregation not in ("mean", "sum"):
            problems.append(f"prune.aggregation must be 'mean' or 'sum', got {self.aggregation!r}")
        if self.calibration_batches < 1 or self.calibration_batch_size < 1:
            problems.append("prune calibration settings must be positive")
        return problems

    def to_dict(self) -> dict:
        return {
            "criteria": list(self.criteria),
            "ratios": list(self.ratios),
            "sites": list(self.sites),
            "min_heads": self.min_heads,
            "min_mlp": self.min_mlp,
            "min_embed": self.min_embed,
            "calibration_batches": self.calibration_batches,
            "calibration_batch_size": self.calibration_batch_size,
            "aggregation": self.aggregation,
            "measure_speedup": self.measure_speedup,
            "speedup_batch": self.speedup_batch,
            "speedup_trials": self.speedup_trials,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "PruneGridConfig":
        return cls(**d)


_DEFAULT_SEEDS = {"data": 0, "split": 1, "init": 2, "prune": 3}


@dataclass
class ExperimentConfig:
    name: str = "desk"
    model: ModelConfig = field(default_factory=lambda: ModelConfig(
        image_size=32, channels=3, patch_size=8, embed_dim=64, num_layers=2,
        num_heads=8, head_dim=8, mlp_hidden=512, num_classes=7,
        pooling="mean", use_cls_token=True,
    ))
    data: DataConfig = field(default_factory=DataConfig)
    protocol: SplitProtocol = field(default_factory=SplitProtocol)
    dg_train: TrainConfig = field(default_factory=lambda: TrainConfig.dg_finetune(
        lr=1e-3, max_epochs=50, patience=10,
    ))
    postprune_train: TrainConfig = field(default_factory=lambda: TrainConfig.postprune_finetune(
        lr=1.5e-3, max_epochs=30, patience=10,
    ))
    prune: PruneGridConfig = field(default_factory=PruneGridConfig)
    seeds: dict = field(default_factory=lambda: dict(_DEFAULT_SEEDS))
    eval_batch_size: int = 64
    attn_images: int = 8

    def validate(self) -> list[str]:
        problems = []
        if not self.name:
            problems.append("name must not be empty")
        problems.extend(f"model: {p}" for p in self.model.validate())
        problems.extend(self.data.validate())
        problems.extend(f"protocol: {p}" for p in self.protocol.validate())
        problems.extend(f"dg_train: {p}" for p in self.dg_train.validate())
        problems.extend(f"postprune_train: {p}" for p in self.postprune_train.validate())
        problems.extend(f"prune: {p}" for p in self.prune.validate())
        missing = [k for k in _DEFAULT_SEEDS if k not in self.seeds]
        if missing:
            problems.append(f"seeds missing entries {missing}")
        if self.eval_batch_size < 1:
            problems.append("eval_batch_size must be positive")
        if self.attn_images < 1:
            problems.append("attn_images must be positive")
        if self.data.source == "synthetic":
            if self.model.num_classes != self.data.synthetic.classes:
                problems.append(
                    f"model.num_classes ({self.model.num_classes}) must match "
                    f"data.synthetic.classes ({self.data.synthetic.classes})"
                )
            if self.model.image_size != self.data.synthetic.image_size:
                problems.append("model.image_size must match data.synthetic.image_size")
            if self.model.channels != self.data.synthetic.channels:
                problems.append("model.channels must match data.synthetic.channels")
        return problems

    def check(self) -> None:
        problems = self.validate()
        if problems:
            raise ConfigError(problems)

    def to_dict(self) -> dict:
        return {
            "name": self.name,
            "model": self.model.to_dict(),
            "data": self.data.to_dict(),
            "protocol": self.protocol.to_dict(),
            "dg_train": self.dg_train.to_dict(),
            "postprune_train": self.postprune_train.to_dict(),
            "prune": self.prune.to_dict(),
            "seeds": dict(self.seeds),
            "eval_batch_size": self.eval_batch_size,
            "attn_images": self.attn_images,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "ExperimentConfig":
        known = {
            "name", "model", "data", "protocol", "dg_train", "postprune_train",
            "prune", "seeds", "eval_batch_size", "attn_images",
        }
        unknown = set(d) - known
        if unknown:
            raise ConfigError([f"unknown config fields: {sorted(unknown)}"])
        cfg = cls(
            name=d.get("name", "desk"),
            model=ModelConfig.from_dict(d["model"]) if "model" in d else cls().model,
            data=DataConfig.from_dict(d.get("data", {})),
            protocol=SplitProtocol.from_dict(d.get("protocol", {})),
            dg_train=TrainConfig.from_dict(d["dg_train"]) if "dg_train" in d else cls().dg_train,
            postprune_train=(
                TrainConfig.from_dict(d["postprune_train"])
                if "postprune_train" in d else cls().postprune_train
            ),
            prune=PruneGridConfig.from_dict(d.get("prune", {})) if d.get("prune") else PruneGridConfig(),
            seeds={**_DEFAULT_SEEDS, **d.get("seeds", {})},
            eval_batch_size=d.get("eval_batch_size", 64),
            attn_images=d.get("attn_images", 8),
        )
        return cfg

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), sort_keys=True, indent=2)

    @classmethod
    def from_json(cls, text: str) -> "ExperimentConfig":
        try:
            doc = json.loads(text)
        except json.JSONDecodeError as exc:
            raise ConfigError([f"config is not valid JSON: {exc}"]) from None
        return cls.from_dict(doc)


def apply_override(doc: dict, dotted: str, raw_value: str) -> None:
    """Apply a ``--set a.b.c=value`` override onto a raw config dict; the
    value parses as JSON, falling back to a literal string."""
    path = dotted.split(".")
    node = doc
    for part in path[:-1]:
        if part not in node or not isinstance(node[part], dict):
            node[part] = {}
        node = node[part]
    try:
        value = json.loads(raw_value)
    except json.JSONDecodeError:
        value = raw_value
    node[path[-1]] = value
