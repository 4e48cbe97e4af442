"""Global grouped structural pruning.

Groups are ranked ascending by importance across the whole network and
removed greedily until the requested fraction of prunable parameters is
gone; any removal that would push a layer below its width floor is skipped.
Application rewrites the model into a strictly smaller dense model, so no
zero padding remains and the masked-equivalence identity (structural
removal == zeroing the removed slices) holds exactly for attn_head and
mlp_channel sites. Embedding-channel removal changes layer-norm statistics
and is validated by graph revalidation instead.
"""

from __future__ import annotations

import time
from dataclasses import dataclass, field

import numpy as np

from .depgraph import (
    SITE_ATTN_HEAD,
    SITE_EMBED_CHANNEL,
    SITE_MLP_CHANNEL,
    DependencyGraph,
    build_graph,
)
from .model import ModelConfig, TransformerModel, macs_count
from .tensor import Tensor, no_grad

__all__ = [
    "PruneSpec",
    "PrunePlan",
    "PlanEntry",
    "PruneReport",
    "PruneError",
    "plan_prune",
    "apply_prune",
    "prune_model",
    "measure_speedup",
]


class PruneError(ValueError):
    pass


@dataclass
class PruneSpec:
    ratio: float
    criterion: str
    sites: tuple[str, ...] = (SITE_ATTN_HEAD, SITE_MLP_CHANNEL)
    min_heads: int = 1
    min_mlp: int = 1
    min_embed: int = 8
    seed: int = 0  # feeds the random criterion

    def __post_init__(self):
        self.sites = tuple(self.sites)
        if not 0.0 <= self.ratio < 1.0:
            raise PruneError(f"ratio must lie in [0, 1), got {self.ratio}")
        if min(self.min_heads, self.min_mlp, self.min_embed) < 1:
            raise PruneError("minimum widths must be positive")
        unknown = set(self.sites) - {SITE_ATTN_HEAD, SITE_MLP_CHANNEL, SITE_EMBED_CHANNEL}
        if unknown:
            raise PruneError(f"unknown sites {sorted(unknown)}")

    def to_dict(self) -> dict:
        return {
            "ratio": self.ratio,
            "criterion": self.criterion,
            "sites": list(self.sites),
            "min_heads": self.min_heads,
            "min_mlp": self.min_mlp,
            "min_embed": self.min_embed,
            "seed": self.seed,
        }


@dataclass(frozen=True)
class PlanEntry:
    gid: tuple
    score: float
    param_count: int  # slice size against the unpruned model


@dataclass
class PrunePlan:
    entries: list[PlanEntry]
    spec: PruneSpec
    prunable_total: int
    threshold: float | None  # score of the last removed group
    config: ModelConfig

    @property
    def removed_params(self) -> int:
        return sum(e.param_count for e in self.entries)


def _sort_key(gid: tuple, score: float):
    site, layer, index = gid
    return (score, -1 if layer is None else layer, site, index)


def plan_prune(graph: DependencyGraph, scores: dict, spec: PruneSpec) -> PrunePlan:
    """Rank and greedily select groups until the removed fraction of
    prunable parameters reaches ``spec.ratio``."""
    groups = graph.groups(spec.sites)
    missing = [g.gid for g in groups if g.gid not in scores]
    if missing:
        raise PruneError(f"scores missing for {len(missing)} groups, e.g. {missing[:3]}")
    cfg = graph.config
    total = sum(g.param_count for g in groups)
    target = spec.ratio * total
    heads_left = list(cfg.num_heads)
    mlp_left = list(cfg.mlp_hidden)
    embed_left = cfg.embed_dim

    def score_of(g):
        s = scores[g.gid]
        return s.value if hasattr(s, "value") else float(s)

    ordered = sorted(groups, key=lambda g: _sort_key(g.gid, score_of(g)))
    entries: list[PlanEntry] = []
    removed = 0
    skipped: dict[str, int] = {}
    for g in ordered:
        if removed + 1e-9 >= target:
            break
        site, layer, _ = g.gid
        if site == SITE_ATTN_HEAD:
            if heads_left[layer] - 1 < spec.min_heads:
                skipped["min_heads"] = skipped.get("min_heads", 0) + 1
                continue
            heads_left[layer] -= 1
        elif site == SITE_MLP_CHANNEL:
            if mlp_left[layer] - 1 < spec.min_mlp:
                skipped["min_mlp"] = skipped.get("min_mlp", 0) + 1
                continue
            mlp_left[layer] -= 1
        else:
            if embed_left - 1 < spec.min_embed:
                skipped["min_embed"] = skipped.get("min_embed", 0) + 1
                continue
            embed_left -= 1
        entries.append(PlanEntry(g.gid, score_of(g), g.param_count))
        removed += g.param_count
    if removed + 1e-9 < target:
        binding = max(skipped, key=skipped.get) if skipped else "prunable pool exhausted"
        raise PruneError(
            f"ratio {spec.ratio} unreachable: removed {removed} of {total} prunable "
            f"parameters; binding constraint: {binding}"
        )
    threshold = entries[-1].score if entries else None
    return PrunePlan(entries=entries, spec=spec, prunable_total=total,
                     threshold=threshold, config=cfg)


def _removed_index_sets(plan: PrunePlan, cfg: ModelConfig):
    heads = [set() for _ in range(cfg.num_layers)]
    mlp = [set() for _ in range(cfg.num_layers)]
    embed: set[int] = set()
    for e in plan.entries:
        site, layer, index = e.gid
        if site == SITE_ATTN_HEAD:
            if not (0 <= layer < cfg.num_layers and 0 <= index < cfg.num_heads[layer]):
                raise PruneError(f"plan entry {e.gid} does not fit the model")
            heads[layer].add(index)
        elif site == SITE_MLP_CHANNEL:
            if not (0 <= layer < cfg.num_layers and 0 <= index < cfg.mlp_hidden[layer]):
                raise PruneError(f"plan entry {e.gid} does not fit the model")
            mlp[layer].add(index)
        elif site == SITE_EMBED_CHANNEL:
            if not 0 <= index < cfg.embed_dim:
                raise PruneError(f"plan entry {e.gid} does not fit the model")
            embed.add(index)
        else:
            raise PruneError(f"plan entry {e.gid} has unknown site")
    return heads, mlp, embed


def apply_prune(model: TransformerModel, plan: PrunePlan) -> TransformerModel:
    """Rewrite the model with the planned groups removed. Returns a new
    dense model; the input model is untouched."""
    cfg = model.config
    if plan.config.to_dict() != cfg.to_dict():
        raise PruneError("plan was produced against a different model configuration")
    heads_rm, mlp_rm, embed_rm = _removed_index_sets(plan, cfg)
    dh = cfg.head_dim
    heads_keep = [
        [h for h in range(cfg.num_heads[i]) if h not in heads_rm[i]]
        for i in range(cfg.num_layers)
    ]
    mlp_keep = [
        [c for c in range(cfg.mlp_hidden[i]) if c not in mlp_rm[i]]
        for i in range(cfg.num_layers)
    ]
    embed_keep = [c for c in range(cfg.embed_dim) if c not in embed_rm]
    if any(len(k) < 1 for k in heads_keep) or any(len(k) < 1 for k in mlp_keep):
        raise PruneError("plan removes an entire layer width")
    if len(embed_keep) < 1:
        raise PruneError("plan removes every embedding channel")

    new_cfg = ModelConfig.from_dict(cfg.to_dict())
    new_cfg.num_heads = [len(k) for k in heads_keep]
    new_cfg.mlp_hidden = [len(k) for k in mlp_keep]
    new_cfg.embed_dim = len(embed_keep)

    old = {k: p.data for k, p in model.params.items()}
    emb = np.asarray(embed_keep)
    new: dict[str, np.ndarray] = {
        "patch_embed.weight": old["patch_embed.weight"][:, emb],
        "patch_embed.bias": old["patch_embed.bias"][emb],
        "pos_embed.weight": old["pos_embed.weight"][:, emb],
    }
    if cfg.use_cls_token:
        new["cls.token"] = old["cls.token"][emb]
    for i in range(cfg.num_layers):
        pre = f"layers.{i}."
        attn_old = cfg.num_heads[i] * dh
        qkv_cols = []
        out_rows = []
        for h in heads_keep[i]:
            out_rows.extend(range(h * dh, (h + 1) * dh))
        for block in range(3):
            for h in heads_keep[i]:
                start = block * attn_old + h * dh
                qkv_cols.extend(range(start, start + dh))
        qkv_cols = np.asarray(qkv_cols)
        out_rows = np.asarray(out_rows)
        mlp_cols = np.asarray(mlp_keep[i])
        new[pre + "ln1.weight"] = old[pre + "ln1.weight"][emb]
        new[pre + "ln1.bias"] = old[pre + "ln1.bias"][emb]
        new[pre + "qkv.weight"] = old[pre + "qkv.weight"][np.ix_(emb, qkv_cols)]
        new[pre + "qkv.bias"] = old[pre + "qkv.bias"][qkv_cols]
        new[pre + "attn_out.weight"] = old[pre + "attn_out.weight"][np.ix_(out_rows, emb)]
        new[pre + "attn_out.bias"] = old[pre + "attn_out.bias"][emb]
        new[pre + "ln2.weight"] = old[pre + "ln2.weight"][emb]
        new[pre + "ln2.bias"] = old[pre + "ln2.bias"][emb]
        new[pre + "mlp_fc1.weight"] = old[pre + "mlp_fc1.weight"][np.ix_(emb, mlp_cols)]
        new[pre + "mlp_fc1.bias"] = old[pre + "mlp_fc1.bias"][mlp_cols]
        new[pre + "mlp_fc2.weight"] = old[pre + "mlp_fc2.weight"][np.ix_(mlp_cols, emb)]
        new[pre + "mlp_fc2.bias"] = old[pre + "mlp_fc2.bias"][emb]
    new["final_ln.weight"] = old["final_ln.weight"][emb]
    new["final_ln.bias"] = old["final_ln.bias"][emb]
    new["head.weight"] = old["head.weight"][emb, :]
    new["head.bias"] = old["head.bias"].copy()
    params = {k: Tensor(np.ascontiguousarray(v), requires_grad=True) for k, v in new.items()}
    return TransformerModel(new_cfg, params)


def _sequential_removed_counts(plan: PrunePlan, cfg: ModelConfig):
    """Parameters each group removes, accounted against the shrinking model
    (plan order), so the counts sum exactly to the parameter delta."""
    d = cfg.embed_dim
    dh = cfg.head_dim
    heads = list(cfg.num_heads)
    mlp = list(cfg.mlp_hidden)
    t = cfg.num_tokens
    counts = []
    for e in plan.entries:
        site, layer, _ = e.gid
        if site == SITE_ATTN_HEAD:
            counts.append(3 * (dh * d + dh) + dh * d)
            heads[layer] -= 1
        elif site == SITE_MLP_CHANNEL:
            counts.append(2 * d + 1)
            mlp[layer] -= 1
        else:
            n = cfg.patch_dim + 1 + t + (1 if cfg.use_cls_token else 0)
            for i in range(cfg.num_layers):
                n += 2 + 3 * heads[i] * dh + heads[i] * dh + 1 + 2 + 2 * mlp[i] + 1
            n += 2 + cfg.num_classes
            counts.append(n)
            d -= 1
    return counts


@dataclass
class PruneReport:
    criterion: str
    ratio: float
    sites: list[str]
    removed: list[dict]
    threshold: float | None
    prunable_total: int
    params_before: int
    params_after: int
    macs_before: int
    macs_after: int
    timing: dict = field(default_factory=dict)

    @property
    def theoretical_speedup(self) -> float:
        return self.macs_before / self.macs_after

    def to_dict(self) -> dict:
        return {
            "criterion": self.criterion,
            "ratio": self.ratio,
            "sites": list(self.sites),
            "removed_groups": self.removed,
            "threshold": self.threshold,
            "prunable_total": self.prunable_total,
            "params_before": self.params_before,
            "params_after": self.params_after,
            "macs_before": self.macs_before,
            "macs_after": self.macs_after,
            "theoretical_speedup": self.theoretical_speedup,
            "timing": dict(self.timing),
        }


def prune_model(model: TransformerModel, plan: PrunePlan):
    """Apply a plan and produce (pruned model, report). The report recounts
    parameters and MACs on the pruned model; removed-group accounting is
    sequential so the sum matches the delta exactly."""
    pruned = apply_prune(model, plan)
    counts = _sequential_removed_counts(plan, model.config)
    params_before = model.param_count()
    params_after = pruned.param_count()
    if params_before - params_after != sum(counts):
        raise PruneError(
            "internal accounting error: "
            f"{params_before - params_after} != {sum(counts)}"
        )
    removed = [
        {
            "site": e.gid[0],
            "layer": e.gid[1],
            "index": e.gid[2],
            "score": e.score,
            "removed_params": c,
        }
        for e, c in zip(plan.entries, counts)
    ]
    report = PruneReport(
        criterion=plan.spec.criterion,
        ratio=plan.spec.ratio,
        sites=list(plan.spec.sites),
        removed=removed,
        threshold=plan.threshold,
        prunable_total=plan.prunable_total,
        params_before=params_before,
        params_after=params_after,
        macs_before=macs_count(model.config),
        macs_after=macs_count(pruned.config),
    )
    rebuilt = build_graph(pruned)
    problems = rebuilt.validate(pruned)
    if problems:
        raise PruneError(f"pruned model failed graph validation: {problems[:3]}")
    return pruned, report


def measure_speedup(base: TransformerModel, pruned: TransformerModel, batch,
                    trials: int = 10, warmup: int = 2) -> float:
    """Median wall-clock forward time of base over pruned, same batch."""
    if trials < 5:
        raise PruneError("measure_speedup needs at least 5 trials")
    batch = np.asarray(batch, dtype=np.float64)

    def median_time(m: TransformerModel) -> float:
        with no_grad():
            for _ in range(warmup):
                m.forward(batch)
            times = []
            for _ in range(trials):
                start = time.perf_counter()
                m.forward(batch)
                times.append(time.perf_counter() - start)
        return float(np.median(times))

    return median_time(base) / median_time(pruned)
