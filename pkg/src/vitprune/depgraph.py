"""Dependency graph over prunable parameter slices.

Three sites exist in this architecture family:

* ``attn_head``   - one unit per attention head; owns the head's Q/K/V
  projection columns and biases plus its output-projection rows.
* ``mlp_channel`` - one unit per hidden MLP channel; owns one fc1 output
  column and bias plus the matching fc2 input row.
* ``embed_channel`` - one unit per embedding channel; the residual stream
  ties a channel to every layer, so such a unit owns that channel index
  across the patch embedding, positional embeddings, cls token, every
  layer norm, QKV input rows, output-projection columns, MLP rows/columns
  and the classifier input.

Unit slice lists already close over all structural coupling for this
layout, so coupling edges between distinct units only appear for exotic
hand-built graphs; the grouping machinery handles them regardless.
"""

from __future__ import annotations

import json
from dataclasses import dataclass

from .model import ModelConfig, TransformerModel, param_shapes

__all__ = [
    "SITE_ATTN_HEAD",
    "SITE_MLP_CHANNEL",
    "SITE_EMBED_CHANNEL",
    "ALL_SITES",
    "Slice",
    "PruneUnit",
    "PruneGroup",
    "DependencyGraph",
    "GraphError",
    "build_graph",
]

SITE_ATTN_HEAD = "attn_head"
SITE_MLP_CHANNEL = "mlp_channel"
SITE_EMBED_CHANNEL = "embed_channel"
ALL_SITES = (SITE_ATTN_HEAD, SITE_MLP_CHANNEL, SITE_EMBED_CHANNEL)


class GraphError(ValueError):
    pass


@dataclass(frozen=True)
class Slice:
    """A contiguous index range along one axis of one parameter tensor."""

    key: str
    axis: int
    start: int
    stop: int

    def __post_init__(self):
        if self.stop <= self.start:
            raise GraphError(f"empty slice on {self.key}")

    @property
    def length(self) -> int:
        return self.stop - self.start

    def size(self, shapes: dict[str, tuple[int, ...]]) -> int:
        """Number of scalars covered, given the parameter shapes."""
        shape = shapes[self.key]
        other = 1
        for ax, extent in enumerate(shape):
            if ax != self.axis:
                other *= extent
        return self.length * other


@dataclass(frozen=True)
class PruneUnit:
    site: str
    layer: int | None  # None for network-wide units (embed_channel)
    index: int
    slices: tuple[Slice, ...]

    @property
    def uid(self) -> tuple:
        return (self.site, self.layer, self.index)

    def param_count(self, shapes) -> int:
        return sum(s.size(shapes) for s in self.slices)


@dataclass(frozen=True)
class PruneGroup:
    """A set of units closed under coupling; removal is all-or-nothing."""

    units: tuple[PruneUnit, ...]
    site: str
    param_count: int

    @property
    def gid(self) -> tuple:
        return self.units[0].uid

    @property
    def layer(self):
        return self.units[0].layer

    @property
    def index(self):
        return self.units[0].index


class DependencyGraph:
    def __init__(self, config: ModelConfig, units: list[PruneUnit],
                 edges: list[tuple[tuple, tuple]] | None = None):
        self.config = config
        self.shapes = param_shapes(config)
        self.units = list(units)
        self.edges = list(edges or [])
        self._by_uid = {u.uid: u for u in self.units}
        if len(self._by_uid) != len(self.units):
            raise GraphError("duplicate unit ids")
        self._adjacency: dict[tuple, set] = {u.uid: set() for u in self.units}
        for a, b in self.edges:
            if a not in self._by_uid or b not in self._by_uid:
                raise GraphError(f"edge references unknown unit: {(a, b)}")
            self._adjacency[a].add(b)
            self._adjacency[b].add(a)

    def units_of_site(self, site: str) -> list[PruneUnit]:
        return [u for u in self.units if u.site == site]

    def group_for(self, unit: PruneUnit | tuple) -> PruneGroup:
        """Connected component of coupling edges containing ``unit``."""
        uid = unit.uid if isinstance(unit, PruneUnit) else tuple(unit)
        if uid not in self._by_uid:
            raise GraphError(f"unknown unit {uid}")
        seen = {uid}
        frontier = [uid]
        while frontier:
            cur = frontier.pop()
            for nxt in sorted(self._adjacency[cur]):
                if nxt not in seen:
                    seen.add(nxt)
                    frontier.append(nxt)
        members = tuple(self._by_uid[m] for m in sorted(seen))
        count = sum(u.param_count(self.shapes) for u in members)
        return PruneGroup(units=members, site=self._by_uid[uid].site, param_count=count)

    def groups(self, sites=None) -> list[PruneGroup]:
        """All coupling-closed groups, one per connected component."""
        wanted = set(sites) if sites is not None else set(ALL_SITES)
        out = []
        emitted: set[tuple] = set()
        for u in self.units:
            if u.uid in emitted:
                continue
            group = self.group_for(u)
            emitted.update(m.uid for m in group.units)
            if group.site in wanted:
                out.append(group)
        return out

    # -- validation ---------------------------------------------------------

    def prunable_coverage(self, site: str) -> dict[tuple[str, int], int]:
        """(param key, axis) -> extent covered by this site's units."""
        cover: dict[tuple[str, int], int] = {}
        for u in self.units_of_site(site):
            for s in u.slices:
                cover[(s.key, s.axis)] = self.shapes[s.key][s.axis]
        return cover

    def validate(self, model: TransformerModel | None = None) -> list[str]:
        """Full coverage, in-site disjointness, and group closure. Returns a
        list of violation strings; empty means the graph is sound."""
        problems: list[str] = []
        shapes = self.shapes
        if model is not None:
            for key, p in model.params.items():
                if key not in shapes:
                    problems.append(f"model parameter {key} unknown to graph")
                elif p.shape != shapes[key]:
                    problems.append(
                        f"shape mismatch for {key}: model {p.shape} vs graph {shapes[key]}"
                    )
        for site in ALL_SITES:
            covered: dict[tuple[str, int], list[tuple[int, int, tuple]]] = {}
            for u in self.units_of_site(site):
                for s in u.slices:
                    if s.key not in shapes:
                        problems.append(f"{u.uid}: slice references unknown parameter {s.key}")
                        continue
                    extent = shapes[s.key][s.axis]
                    if s.stop > extent:
                        problems.append(
                            f"{u.uid}: slice [{s.start}, {s.stop}) exceeds axis {s.axis} "
                            f"extent {extent} of {s.key}"
                        )
                        continue
                    covered.setdefault((s.key, s.axis), []).append((s.start, s.stop, u.uid))
            for (key, axis), ranges in covered.items():
                ranges.sort()
                cursor = 0
                for start, stop, uid in ranges:
                    if start < cursor:
                        problems.append(
                            f"site {site}: overlapping slices on {key} axis {axis} at {start}"
                        )
                    elif start > cursor:
                        problems.append(
                            f"site {site}: coverage gap on {key} axis {axis} at "
                            f"[{cursor}, {start})"
                        )
                    cursor = max(cursor, stop)
                extent = shapes[key][axis]
                if cursor < extent:
                    problems.append(
                        f"site {site}: coverage gap on {key} axis {axis} at [{cursor}, {extent})"
                    )
        for uid, neighbours in self._adjacency.items():
            group_ids = {m.uid for m in self.group_for(uid).units}
            escaping = {n for m in group_ids for n in self._adjacency[m]} - group_ids
            if escaping:
                problems.append(f"group of {uid} leaks edges to {sorted(escaping)}")
        return problems

    def to_json(self) -> str:
        doc = {
            "config": self.config.to_dict(),
            "units": [
                {
                    "site": u.site,
                    "layer": u.layer,
                    "index": u.index,
                    "slices": [
                        {"key": s.key, "axis": s.axis, "start": s.start, "stop": s.stop}
                        for s in u.slices
                    ],
                }
                for u in self.units
            ],
            "edges": [[list(a), list(b)] for a, b in self.edges],
        }
        return json.dumps(doc, sort_keys=True, indent=2)


def build_graph(model_or_config) -> DependencyGraph:
    """Construct the dependency graph for a model (or bare config).

    Construction is schema-driven from the known component layout, so the
    result is exact: every prunable axis of every parameter is covered by
    exactly one unit of its site.
    """
    if isinstance(model_or_config, TransformerModel):
        cfg = model_or_config.config
    elif isinstance(model_or_config, ModelConfig):
        cfg = model_or_config
    else:
        raise GraphError(f"cannot build a graph from {type(model_or_config)!r}")
    cfg.check()
    units: list[PruneUnit] = []
    dh = cfg.head_dim
    for li in range(cfg.num_layers):
        pre = f"layers.{li}."
        attn = cfg.num_heads[li] * dh
        for h in range(cfg.num_heads[li]):
            slices = []
            for block in range(3):  # Q, K, V column blocks
                off = block * attn + h * dh
                slices.append(Slice(pre + "qkv.weight", 1, off, off + dh))
                slices.append(Slice(pre + "qkv.bias", 0, off, off + dh))
            slices.append(Slice(pre + "attn_out.weight", 0, h * dh, (h + 1) * dh))
            units.append(PruneUnit(SITE_ATTN_HEAD, li, h, tuple(slices)))
        for ch in range(cfg.mlp_hidden[li]):
            units.append(
                PruneUnit(
                    SITE_MLP_CHANNEL,
                    li,
                    ch,
                    (
                        Slice(pre + "mlp_fc1.weight", 1, ch, ch + 1),
                        Slice(pre + "mlp_fc1.bias", 0, ch, ch + 1),
                        Slice(pre + "mlp_fc2.weight", 0, ch, ch + 1),
                    ),
                )
            )
    for ch in range(cfg.embed_dim):
        slices = [
            Slice("patch_embed.weight", 1, ch, ch + 1),
            Slice("patch_embed.bias", 0, ch, ch + 1),
            Slice("pos_embed.weight", 1, ch, ch + 1),
        ]
        if cfg.use_cls_token:
            slices.append(Slice("cls.token", 0, ch, ch + 1))
        for li in range(cfg.num_layers):
            pre = f"layers.{li}."
            slices.extend(
                [
                    Slice(pre + "ln1.weight", 0, ch, ch + 1),
                    Slice(pre + "ln1.bias", 0, ch, ch + 1),
                    Slice(pre + "qkv.weight", 0, ch, ch + 1),
                    Slice(pre + "attn_out.weight", 1, ch, ch + 1),
                    Slice(pre + "attn_out.bias", 0, ch, ch + 1),
                    Slice(pre + "ln2.weight", 0, ch, ch + 1),
                    Slice(pre + "ln2.bias", 0, ch, ch + 1),
                    Slice(pre + "mlp_fc1.weight", 0, ch, ch + 1),
                    Slice(pre + "mlp_fc2.weight", 1, ch, ch + 1),
                    Slice(pre + "mlp_fc2.bias", 0, ch, ch + 1),
                ]
            )
        slices.extend(
            [
                Slice("final_ln.weight", 0, ch, ch + 1),
                Slice("final_ln.bias", 0, ch, ch + 1),
                Slice("head.weight", 0, ch, ch + 1),
            ]
        )
        units.append(PruneUnit(SITE_EMBED_CHANNEL, None, ch, tuple(slices)))
    return DependencyGraph(cfg, units)
