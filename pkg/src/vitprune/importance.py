"""Importance scores for prune groups: l1, l2, taylor, hessian, random.

Magnitude criteria read weights only. Taylor uses loss gradients averaged
over calibration batches; hessian approximates the loss curvature diagonal
with the empirical Fisher (mean squared per-sample gradient), the classic
saliency 0.5 * h_ii * w_i^2. Every criterion averages over the scalars of a
group so that scores stay comparable between heads and single channels
(``aggregation="sum"`` switches that off).
"""

from __future__ import annotations

import hashlib
import io
from dataclasses import dataclass

import numpy as np

from .depgraph import DependencyGraph, PruneGroup
from .model import TransformerModel
from .tensor import backward, cross_entropy

__all__ = [
    "CRITERIA",
    "ImportanceScore",
    "ImportanceError",
    "calibration_batches",
    "magnitude_saliency",
    "taylor_saliency",
    "hessian_saliency",
    "compute_scores",
    "scores_to_csv",
]

CRITERIA = ("l1", "l2", "taylor", "hessian", "random")


class ImportanceError(ValueError):
    pass


@dataclass(frozen=True)
class ImportanceScore:
    gid: tuple
    criterion: str
    value: float
    calibration: int = 0  # batches consumed; 0 for data-free criteria

    def __post_init__(self):
        if not np.isfinite(self.value) or self.value < 0:
            raise ImportanceError(f"score for {self.gid} must be finite and >= 0")


def calibration_batches(images: np.ndarray, labels: np.ndarray, n_batches: int = 8,
                        batch_size: int = 8, seed: int = 0):
    """Draw deterministic calibration batches from a sample pool."""
    if len(images) == 0:
        raise ImportanceError("calibration pool is empty")
    rng = np.random.Generator(np.random.PCG64(seed))
    picks = rng.choice(len(images), size=min(len(images), n_batches * batch_size),
                       replace=len(images) < n_batches * batch_size)
    batches = []
    for b in range(n_batches):
        idx = picks[b * batch_size:(b + 1) * batch_size]
        if len(idx) == 0:
            break
        batches.append((images[idx], labels[idx]))
    return batches


# -- per-scalar saliencies ----------------------------------------------------


def magnitude_saliency(weights: np.ndarray, order: int) -> np.ndarray:
    if order == 1:
        return np.abs(weights)
    return weights * weights  # l2 aggregates via sqrt of the mean


def taylor_saliency(weights: np.ndarray, mean_grad: np.ndarray) -> np.ndarray:
    """First-order saliency (g * w)^2, squared to avoid sign cancellation."""
    gw = mean_grad * weights
    return gw * gw


def hessian_saliency(weights: np.ndarray, fisher_diag: np.ndarray) -> np.ndarray:
    """OBD-style saliency 0.5 * h * w^2 with h from the empirical Fisher."""
    return 0.5 * fisher_diag * weights * weights


# -- gradient plumbing ---------------------------------------------------------


def _slice_values(model: TransformerModel, group: PruneGroup, arrays=None) -> np.ndarray:
    source = arrays if arrays is not None else {k: p.data for k, p in model.params.items()}
    parts = []
    for unit in group.units:
        for s in unit.slices:
            arr = source[s.key]
            index = [slice(None)] * arr.ndim
            index[s.axis] = slice(s.start, s.stop)
            parts.append(arr[tuple(index)].reshape(-1))
    if not parts:
        raise ImportanceError(f"group {group.gid} owns no parameters")
    return np.concatenate(parts)


def _all_params_trainable(model: TransformerModel):
    saved = {k: p.requires_grad for k, p in model.params.items()}
    for p in model.params.values():
        p.requires_grad = True
    return saved


def _restore_flags(model: TransformerModel, saved):
    for k, p in model.params.items():
        p.requires_grad = saved[k]


def mean_gradients(model: TransformerModel, batches) -> dict[str, np.ndarray]:
    """Loss gradient per parameter, averaged over calibration batches."""
    if not batches:
        raise ImportanceError("taylor criterion needs at least one calibration batch")
    saved = _all_params_trainable(model)
    try:
        acc = {k: np.zeros_like(p.data) for k, p in model.params.items()}
        params = [p for _, p in model.params.items()]
        for images, labels in batches:
            loss = cross_entropy(model.forward(images), labels)
            backward(loss, params=params)
            for k, p in model.params.items():
                acc[k] += p.grad
        return {k: g / len(batches) for k, g in acc.items()}
    finally:
        _restore_flags(model, saved)


def fisher_diagonals(model: TransformerModel, batches) -> tuple[dict[str, np.ndarray], int]:
    """Empirical Fisher: mean over individual calibration samples of the
    squared per-sample loss gradient."""
    if not batches:
        raise ImportanceError("hessian criterion needs at least one calibration batch")
    saved = _all_params_trainable(model)
    try:
        acc = {k: np.zeros_like(p.data) for k, p in model.params.items()}
        params = [p for _, p in model.params.items()]
        n = 0
        for images, labels in batches:
            for i in range(len(images)):
                loss = cross_entropy(model.forward(images[i:i + 1]), labels[i:i + 1])
                backward(loss, params=params)
                for k, p in model.params.items():
                    acc[k] += p.grad * p.grad
                n += 1
        return {k: g / n for k, g in acc.items()}, n
    finally:
        _restore_flags(model, saved)


def _random_value(seed: int, gid: tuple) -> float:
    tag = f"{seed}|{gid[0]}|{gid[1]}|{gid[2]}".encode()
    digest = hashlib.sha256(tag).digest()
    return int.from_bytes(digest[:8], "big") / 2.0**64


def _aggregate(saliency: np.ndarray, aggregation: str, criterion: str) -> float:
    if aggregation == "sum":
        value = float(saliency.sum())
    else:
        value = float(saliency.mean())
    if criterion == "l2":
        value = float(np.sqrt(value))
    return value


def compute_scores(model: TransformerModel, graph: DependencyGraph, criterion: str,
                   *, batches=None, seed: int = 0,
                   aggregation: str = "mean",
                   sites=None) -> dict[tuple, ImportanceScore]:
    """Score every coupling-closed group of the enabled sites."""
    if criterion not in CRITERIA:
        raise ImportanceError(f"unknown criterion {criterion!r}; expected one of {CRITERIA}")
    if aggregation not in ("mean", "sum"):
        raise ImportanceError(f"aggregation must be 'mean' or 'sum', got {aggregation!r}")
    groups = graph.groups(sites)
    scores: dict[tuple, ImportanceScore] = {}
    if criterion == "random":
        for g in groups:
            scores[g.gid] = ImportanceScore(g.gid, criterion, _random_value(seed, g.gid))
        return scores
    if criterion in ("l1", "l2"):
        order = 1 if criterion == "l1" else 2
        for g in groups:
            sal = magnitude_saliency(_slice_values(model, g), order)
            scores[g.gid] = ImportanceScore(g.gid, criterion, _aggregate(sal, aggregation, criterion))
        return scores
    n_batches = len(batches) if batches else 0
    if criterion == "taylor":
        grads = mean_gradients(model, batches)
        for g in groups:
            sal = taylor_saliency(_slice_values(model, g), _slice_values(model, g, grads))
            scores[g.gid] = ImportanceScore(
                g.gid, criterion, _aggregate(sal, aggregation, criterion), n_batches
            )
        return scores
    fisher, _ = fisher_diagonals(model, batches)
    for g in groups:
        sal = hessian_saliency(_slice_values(model, g), _slice_values(model, g, fisher))
        scores[g.gid] = ImportanceScore(
            g.gid, criterion, _aggregate(sal, aggregation, criterion), n_batches
        )
    return scores


def scores_to_csv(scores: dict[tuple, ImportanceScore]) -> str:
    buf = io.StringIO()
    buf.write("site,layer,index,criterion,score\n")
    for gid in sorted(scores, key=lambda g: (g[0], -1 if g[1] is None else g[1], g[2])):
        s = scores[gid]
        layer = "" if gid[1] is None else gid[1]
        buf.write(f"{gid[0]},{layer},{gid[2]},{s.criterion},{s.value!r}\n")
    return buf.getvalue()
