"""Fine-tuning loops and the evaluation report schema.

Two phases share one loop: the baseline domain-generalisation fine-tune
(Adam, lr 5e-5, weight decay 0.05, constant lr) and the post-prune
fine-tune (AdamW, lr 1.5e-4, weight decay 0.3, cosine schedule with linear
warmup from a 0.033 start factor). Training freezes everything except the
last k transformer blocks plus the final norm and classifier head, stops
early on stalling validation loss, and returns the best-validation
checkpoint. Wall-clock numbers are quarantined in a ``timing`` section.
"""

from __future__ import annotations

import time
from dataclasses import dataclass, field

import numpy as np

from .data import SampleSet
from .model import TransformerModel
from .optim import Adam, AdamW, ConstantSchedule, CosineWarmupSchedule
from .tensor import NonFiniteError, backward, cross_entropy, no_grad

__all__ = [
    "TrainConfig",
    "TrainResult",
    "SplitMetrics",
    "EvalReport",
    "DivergenceError",
    "train",
    "evaluate_split",
    "build_report",
    "curves_to_csv",
    "format_hms",
]


class DivergenceError(RuntimeError):
    def __init__(self, epoch: int):
        super().__init__(f"training diverged (non-finite loss) at epoch {epoch}")
        self.epoch = epoch


@dataclass
class TrainConfig:
    phase: str = "dg_finetune"
    optimizer: str = "adam"  # adam | adamw
    lr: float = 5e-5
    betas: tuple[float, float] = (0.9, 0.999)
    weight_decay: float = 0.05
    schedule: str = "constant"  # constant | cosine_warmup
    warmup_epochs: int = 0
    warmup_start_factor: float = 0.033
    batch_size: int = 8
    max_epochs: int = 50
    patience: int = 5
    freeze_last_k: int = 2
    hflip: bool = True
    seed: int = 0

    def validate(self) -> list[str]:
        problems = []
        if self.phase not in ("dg_finetune", "postprune_finetune"):
            problems.append(f"unknown phase {self.phase!r}")
        if self.optimizer not in ("adam", "adamw"):
            problems.append(f"unknown optimizer {self.optimizer!r}")
        if self.schedule not in ("constant", "cosine_warmup"):
            problems.append(f"unknown schedule {self.schedule!r}")
        if self.lr <= 0:
            problems.append("lr must be positive")
        if self.batch_size < 1:
            problems.append("batch_size must be >= 1")
        if self.patience < 1:
            problems.append("patience must be >= 1")
        if self.max_epochs < 0:
            problems.append("max_epochs must be >= 0")
        if self.freeze_last_k < 0:
            problems.append("freeze_last_k must be >= 0")
        if not 0 <= self.warmup_epochs:
            problems.append("warmup_epochs must be >= 0")
        return problems

    @classmethod
    def dg_finetune(cls, **overrides) -> "TrainConfig":
        cfg = cls(phase="dg_finetune", optimizer="adam", lr=5e-5, weight_decay=0.05,
                  schedule="constant")
        for k, v in overrides.items():
            setattr(cfg, k, v)
        return cfg

    @classmethod
    def postprune_finetune(cls, **overrides) -> "TrainConfig":
        cfg = cls(phase="postprune_finetune", optimizer="adamw", lr=1.5e-4,
                  betas=(0.9, 0.999), weight_decay=0.3, schedule="cosine_warmup",
                  warmup_epochs=1, warmup_start_factor=0.033)
        for k, v in overrides.items():
            setattr(cfg, k, v)
        return cfg

    def to_dict(self) -> dict:
        return {
            "phase": self.phase,
            "optimizer": self.optimizer,
            "lr": self.lr,
            "betas": list(self.betas),
            "weight_decay": self.weight_decay,
            "schedule": self.schedule,
            "warmup_epochs": self.warmup_epochs,
            "warmup_start_factor": self.warmup_start_factor,
            "batch_size": self.batch_size,
            "max_epochs": self.max_epochs,
            "patience": self.patience,
            "freeze_last_k": self.freeze_last_k,
            "hflip": self.hflip,
            "seed": self.seed,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        d = dict(d)
        if "betas" in d:
            d["betas"] = tuple(d["betas"])
        return cls(**d)


# -- metrics ------------------------------------------------------------------


@dataclass
class SplitMetrics:
    top1: float
    top5: float
    loss: float
    macro_precision: float
    n: int
    per_domain: dict[str, dict]

    def to_dict(self) -> dict:
        return {
            "top1": self.top1,
            "top5": self.top5,
            "loss": self.loss,
            "macro_precision": self.macro_precision,
            "n": self.n,
            "per_domain": self.per_domain,
        }


def metrics_from_logits(logits: np.ndarray, labels: np.ndarray, domains: np.ndarray,
                        class_names, domain_names) -> SplitMetrics:
    n, classes = logits.shape
    if n == 0:
        raise ValueError("cannot evaluate an empty split")
    shifted = logits - logits.max(axis=1, keepdims=True)
    lse = np.log(np.exp(shifted).sum(axis=1))
    losses = lse - shifted[np.arange(n), labels]
    preds = logits.argmax(axis=1)
    top1 = float((preds == labels).mean())
    k = min(5, classes)
    # stable argsort so ties break on class index, deterministically
    topk = np.argsort(-logits, axis=1, kind="stable")[:, :k]
    top5 = float((topk == labels[:, None]).any(axis=1).mean())
    precisions = []
    for c in range(classes):
        predicted = preds == c
        if predicted.sum() == 0:
            precisions.append(0.0)
        else:
            precisions.append(float((labels[predicted] == c).mean()))
    per_domain = {}
    for d in sorted(set(domains.tolist())):
        sel = domains == d
        per_domain[domain_names[d]] = {
            "accuracy": float((preds[sel] == labels[sel]).mean()),
            "loss": float(losses[sel].mean()),
            "n": int(sel.sum()),
        }
    return SplitMetrics(
        top1=top1,
        top5=top5,
        loss=float(losses.mean()),
        macro_precision=float(np.mean(precisions)),
        n=n,
        per_domain=per_domain,
    )


def evaluate_split(model: TransformerModel, samples: SampleSet,
                   batch_size: int = 64) -> SplitMetrics:
    if len(samples) == 0:
        raise ValueError("cannot evaluate an empty split")
    chunks = []
    with no_grad():
        for start in range(0, len(samples), batch_size):
            logits = model.forward(samples.images[start:start + batch_size])
            chunks.append(logits.data)
    logits = np.concatenate(chunks, axis=0)
    return metrics_from_logits(
        logits, samples.labels, samples.domains, samples.class_names, samples.domain_names
    )


@dataclass
class EvalReport:
    """The paper-schema record: per-split metrics, the IID/OOD gap, and the
    accuracy delta against a baseline when one is supplied. ``gap`` is
    derived, never stored."""

    valid: SplitMetrics
    test: SplitMetrics
    train: SplitMetrics | None = None
    delta_acc: float | None = None
    curves: list[dict] = field(default_factory=list)
    low_information_top5: bool = False
    timing: dict = field(default_factory=dict)

    @property
    def gap(self) -> float:
        return self.valid.top1 - self.test.top1

    def to_dict(self) -> dict:
        doc = {
            "splits": {
                "valid": self.valid.to_dict(),
                "test": self.test.to_dict(),
            },
            "gap": self.gap,
            "delta_acc": self.delta_acc,
            "flags": {"low_information_top5": self.low_information_top5},
            "curves": list(self.curves),
            "timing": dict(self.timing),
        }
        if self.train is not None:
            doc["splits"]["train"] = self.train.to_dict()
        return doc


def build_report(model: TransformerModel, train_set, valid_set, test_set,
                 baseline: EvalReport | None = None, curves=None,
                 wall_seconds: float | None = None,
                 batch_size: int = 64) -> EvalReport:
    valid = evaluate_split(model, valid_set, batch_size)
    test = evaluate_split(model, test_set, batch_size)
    train_m = evaluate_split(model, train_set, batch_size) if len(train_set) else None
    delta = None
    if baseline is not None:
        delta = test.top1 - baseline.test.top1
    timing = {}
    if wall_seconds is not None:
        timing["finetune_seconds"] = wall_seconds
        timing["finetune_time"] = format_hms(wall_seconds)
    return EvalReport(
        valid=valid,
        test=test,
        train=train_m,
        delta_acc=delta,
        curves=list(curves or []),
        low_information_top5=len(valid_set.class_names) <= 10,
        timing=timing,
    )


def format_hms(seconds: float) -> str:
    seconds = int(round(seconds))
    h, rem = divmod(seconds, 3600)
    m, s = divmod(rem, 60)
    return f"{h:02d}:{m:02d}:{s:02d}"


# -- training loop ------------------------------------------------------------


def _trainable_keys(model: TransformerModel, freeze_last_k: int) -> set[str]:
    """Freeze all blocks except the last k (plus the classifier neck). The
    embedding layers are frozen alongside the early blocks; when no block is
    frozen (k >= depth) the whole model trains."""
    cfg = model.config
    k = min(freeze_last_k, cfg.num_layers)
    live_layers = set(range(cfg.num_layers - k, cfg.num_layers))
    keys = {"final_ln.weight", "final_ln.bias", "head.weight", "head.bias"}
    for i in live_layers:
        keys.update(key for key in model.params if key.startswith(f"layers.{i}."))
    if k >= cfg.num_layers:
        keys.update(key for key in model.params if not key.startswith("layers."))
    return keys


@dataclass
class TrainResult:
    model: TransformerModel
    curves: list[dict]
    best_epoch: int | None
    best_valid_loss: float | None
    epochs_run: int
    wall_seconds: float


def train(model: TransformerModel, train_set: SampleSet, valid_set: SampleSet,
          test_set: SampleSet, config: TrainConfig) -> TrainResult:
    """Fine-tune a copy of ``model``; the input model is never mutated.

    Freezes all blocks except the last ``freeze_last_k`` (plus final norm
    and head), early-stops when validation loss fails to improve for
    ``patience`` consecutive epochs, and returns the parameters of the best
    validation epoch along with per-epoch curves for all three splits.
    """
    problems = config.validate()
    if problems:
        raise ValueError("; ".join(problems))
    if len(train_set) == 0 or len(valid_set) == 0 or len(test_set) == 0:
        raise ValueError("train/valid/test splits must be non-empty")

    work = model.copy()
    start = time.perf_counter()
    if config.max_epochs == 0:
        return TrainResult(work, [], None, None, 0, time.perf_counter() - start)

    trainable = _trainable_keys(work, config.freeze_last_k)
    for key, p in work.params.items():
        p.requires_grad = key in trainable
    params = [(k, p) for k, p in work.params.items() if p.requires_grad]
    tensors = [p for _, p in params]

    steps_per_epoch = (len(train_set) + config.batch_size - 1) // config.batch_size
    if config.schedule == "cosine_warmup":
        schedule = CosineWarmupSchedule(
            config.lr,
            total_steps=max(config.max_epochs * steps_per_epoch, 1),
            warmup_steps=config.warmup_epochs * steps_per_epoch,
            warmup_start_factor=config.warmup_start_factor,
        )
    else:
        schedule = ConstantSchedule(config.lr)
    opt_cls = AdamW if config.optimizer == "adamw" else Adam
    opt = opt_cls(params, lr=config.lr, betas=config.betas,
                  weight_decay=config.weight_decay, schedule=schedule)

    rng = np.random.Generator(np.random.PCG64(config.seed))
    curves: list[dict] = []
    best_loss = np.inf
    best_epoch = None
    best_params = None
    stall = 0
    epochs_run = 0
    for epoch in range(config.max_epochs):
        order = rng.permutation(len(train_set))
        for s in range(steps_per_epoch):
            idx = order[s * config.batch_size:(s + 1) * config.batch_size]
            images = train_set.images[idx]
            if config.hflip:
                flips = rng.random(len(idx)) < 0.5
                if flips.any():
                    images = images.copy()
                    images[flips] = images[flips][..., ::-1]
            try:
                loss = cross_entropy(work.forward(images), train_set.labels[idx])
                backward(loss, params=tensors)
            except NonFiniteError:
                raise DivergenceError(epoch) from None
            if not np.isfinite(loss.data):
                raise DivergenceError(epoch)
            opt.step()
        epochs_run = epoch + 1
        for split_name, sset in (("train", train_set), ("valid", valid_set), ("test", test_set)):
            m = evaluate_split(work, sset)
            curves.append(
                {"epoch": epoch, "split": split_name, "loss": m.loss,
                 "top1": m.top1, "top5": m.top5}
            )
        val_loss = curves[-2]["loss"]
        if not np.isfinite(val_loss):
            raise DivergenceError(epoch)
        if val_loss < best_loss:
            best_loss = val_loss
            best_epoch = epoch
            best_params = {k: p.data.copy() for k, p in work.params.items()}
            stall = 0
        else:
            stall += 1
            if stall >= config.patience:
                break

    if best_params is not None:
        for k, p in work.params.items():
            p.data = best_params[k]
    for p in work.params.values():
        p.requires_grad = True
    return TrainResult(
        model=work,
        curves=curves,
        best_epoch=best_epoch,
        best_valid_loss=None if best_epoch is None else float(best_loss),
        epochs_run=epochs_run,
        wall_seconds=time.perf_counter() - start,
    )


def curves_to_csv(curves: list[dict]) -> str:
    lines = ["epoch,split,loss,top1,top5"]
    for row in curves:
        lines.append(
            f"{row['epoch']},{row['split']},{row['loss']!r},{row['top1']!r},{row['top5']!r}"
        )
    return "\n".join(lines) + "\n"
