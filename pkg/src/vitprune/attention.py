"""Attention-latent-space analysis: mean attention distance per head and
attention-map / token-mask extraction with simple image writers.

Mean attention distance weights the Euclidean distance between patch-grid
centers (in pixels) by the post-softmax attention, averaged per query, then
per image. The cls token has no spatial position, so its row and column are
dropped and the remaining rows renormalized before the distance sum.
"""

from __future__ import annotations

import io
from dataclasses import dataclass

import numpy as np

from .model import AttentionRecord, TransformerModel

__all__ = [
    "AttentionDistanceTable",
    "AttentionMap",
    "AnalysisError",
    "patch_distance_matrix",
    "mean_attention_distance",
    "attention_map",
    "write_pgm",
    "saliency_svg",
]


class AnalysisError(ValueError):
    pass


def patch_distance_matrix(grid: int, patch_size: int) -> np.ndarray:
    """Pairwise Euclidean distances between patch centers, pixel units."""
    rows, cols = np.divmod(np.arange(grid * grid), grid)
    dr = rows[:, None] - rows[None, :]
    dc = cols[:, None] - cols[None, :]
    return patch_size * np.sqrt((dr * dr + dc * dc).astype(np.float64))


@dataclass
class AttentionDistanceTable:
    """Mean attention distance in pixels, one array of per-head values per
    layer (layers may have different head counts after pruning)."""

    distances: list[np.ndarray]
    n_images: int
    grid: int
    patch_size: int

    @property
    def max_possible(self) -> float:
        return self.patch_size * np.sqrt(2.0) * (self.grid - 1)

    def rows(self):
        for layer, values in enumerate(self.distances):
            for head, value in enumerate(values):
                yield layer, head, float(value)

    def to_csv(self) -> str:
        buf = io.StringIO()
        buf.write("layer,head,mean_distance_px,n_images\n")
        for layer, head, value in self.rows():
            buf.write(f"{layer},{head},{value!r},{self.n_images}\n")
        return buf.getvalue()


def _per_image_distances(weights: np.ndarray, has_cls: bool, dist: np.ndarray,
                         grid: int) -> np.ndarray:
    """(batch, heads, tokens, tokens) attention -> (batch, heads) mean
    distance per image."""
    n = grid * grid
    expected = n + (1 if has_cls else 0)
    if weights.shape[-1] != expected or weights.shape[-2] != expected:
        raise AnalysisError(
            f"attention record has {weights.shape[-1]} tokens, grid {grid} expects {expected}"
        )
    if has_cls:
        weights = weights[:, :, 1:, 1:]
    sums = weights.sum(axis=-1, keepdims=True)
    weights = weights / sums
    per_query = (weights * dist).sum(axis=-1)  # (batch, heads, n)
    return per_query.mean(axis=-1)


def mean_attention_distance(records, grid: int | None = None,
                            patch_size: int | None = None) -> AttentionDistanceTable:
    """Aggregate one or more AttentionRecords into a distance table.

    Averaging is per query, then per image, then across the dataset (each
    image weighted equally).
    """
    if isinstance(records, AttentionRecord):
        records = [records]
    records = list(records)
    if not records:
        raise AnalysisError("no attention records supplied")
    grid = grid if grid is not None else records[0].grid
    patch_size = patch_size if patch_size is not None else records[0].patch_size
    dist = patch_distance_matrix(grid, patch_size)
    sums: list[np.ndarray] | None = None
    n_images = 0
    for rec in records:
        if rec.grid != grid or rec.patch_size != patch_size:
            raise AnalysisError("attention records disagree on patch geometry")
        per_layer = [
            _per_image_distances(layer, rec.has_cls, dist, grid) for layer in rec.layers
        ]
        if sums is None:
            sums = [p.sum(axis=0) for p in per_layer]
        else:
            if len(per_layer) != len(sums) or any(
                p.shape[1] != s.shape[0] for p, s in zip(per_layer, sums)
            ):
                raise AnalysisError("attention records disagree on layer/head layout")
            for s, p in zip(sums, per_layer):
                s += p.sum(axis=0)
        n_images += rec.num_images
    return AttentionDistanceTable(
        distances=[s / n_images for s in sums],
        n_images=n_images,
        grid=grid,
        patch_size=patch_size,
    )


@dataclass
class AttentionMap:
    saliency: np.ndarray  # (grid, grid), sums to 1
    mask: np.ndarray  # (grid, grid) bool token mask
    heatmap: np.ndarray  # (H, W) upsampled saliency in [0, 1]
    blended: np.ndarray  # (H, W) heatmap alpha-blended over the image
    mode: str
    layer: int


def _token_mask(saliency_flat: np.ndarray, coverage: float) -> np.ndarray:
    """Smallest patch set whose saliency mass reaches ``coverage``; patches
    tied with the boundary value are included, so uniform saliency keeps
    every patch."""
    order = np.argsort(-saliency_flat, kind="stable")
    csum = np.cumsum(saliency_flat[order])
    k = int(np.searchsorted(csum, coverage - 1e-12)) + 1
    k = min(k, len(order))
    boundary = saliency_flat[order[k - 1]]
    mask = np.zeros(len(saliency_flat), dtype=bool)
    mask[order[:k]] = True
    mask |= saliency_flat >= boundary - 1e-12
    return mask


def attention_map(model: TransformerModel, image: np.ndarray, layer: int,
                  mode: str = "cls_query", coverage: float = 0.9,
                  alpha: float = 0.5) -> AttentionMap:
    """Saliency grid plus rendered heatmap for one image.

    ``cls_query`` averages the cls-token query row over heads (requires a
    cls token). ``token_mask`` uses the same saliency to keep the smallest
    patch set covering ``coverage`` of the attention mass; on cls-free
    models it falls back to the head-averaged attention each patch receives.
    """
    cfg = model.config
    if mode not in ("cls_query", "token_mask"):
        raise AnalysisError(f"unknown attention-map mode {mode!r}")
    if not 0 <= layer < cfg.num_layers:
        raise AnalysisError(f"layer {layer} out of range for {cfg.num_layers} layers")
    if mode == "cls_query" and not cfg.use_cls_token:
        raise AnalysisError("cls_query mode requires a model with a cls token")
    image = np.asarray(image, dtype=np.float64)
    if image.ndim == 3:
        batch = image[None]
    else:
        batch = image
        image = batch[0]
    _, record = model.forward(batch[:1], record_attention=True)
    weights = record.layers[layer][0]  # (heads, tokens, tokens)
    if cfg.use_cls_token:
        sal = weights[:, 0, 1:].mean(axis=0)
    else:
        sal = weights.mean(axis=(0, 1))
    sal = sal / sal.sum()
    grid = cfg.grid
    mask = _token_mask(sal, coverage).reshape(grid, grid)
    sal_grid = sal.reshape(grid, grid)
    scale = sal_grid.max()
    heat_unit = sal_grid / scale if scale > 0 else np.zeros_like(sal_grid)
    heatmap = np.kron(heat_unit, np.ones((cfg.patch_size, cfg.patch_size)))
    gray = image.mean(axis=0)
    lo, hi = gray.min(), gray.max()
    gray = (gray - lo) / (hi - lo) if hi > lo else np.zeros_like(gray)
    blended = np.clip((1 - alpha) * gray + alpha * heatmap, 0.0, 1.0)
    return AttentionMap(
        saliency=sal_grid, mask=mask, heatmap=heatmap, blended=blended,
        mode=mode, layer=layer,
    )


def write_pgm(path, image: np.ndarray) -> None:
    """Write a (H, W) array in [0, 1] as a binary PGM file."""
    arr = np.clip(np.asarray(image), 0.0, 1.0)
    data = (arr * 255.0 + 0.5).astype(np.uint8)
    h, w = data.shape
    with open(path, "wb") as fh:
        fh.write(f"P5\n{w} {h}\n255\n".encode())
        fh.write(data.tobytes())


def saliency_svg(saliency: np.ndarray, mask: np.ndarray | None = None,
                 cell: int = 16) -> str:
    """Render a saliency grid (and optional token mask outline) as SVG."""
    g = saliency.shape[0]
    peak = saliency.max()
    parts = [
        f'<svg xmlns="http://www.w3.org/2000/svg" width="{g * cell}" height="{g * cell}">'
    ]
    for r in range(g):
        for c in range(g):
            v = saliency[r, c] / peak if peak > 0 else 0.0
            shade = int(255 * (1.0 - v))
            parts.append(
                f'<rect x="{c * cell}" y="{r * cell}" width="{cell}" height="{cell}" '
                f'fill="rgb(255,{shade},{shade})"/>'
            )
            if mask is not None and mask[r, c]:
                parts.append(
                    f'<rect x="{c * cell}" y="{r * cell}" width="{cell}" height="{cell}" '
                    f'fill="none" stroke="black" stroke-width="2"/>'
                )
    parts.append("</svg>")
    return "".join(parts)
