"""Multi-domain datasets: a synthetic shape benchmark, folder ingestion,
and the two split protocols (pooled holdout and leave-one-domain-out).

The synthetic generator renders 7 geometric shape classes under 4 domain
styles (flat colour, stripe texture, heavy background noise, edge-only
sketch), echoing the 7-class / 4-domain layout of PACS at 32x32 scale.
"""

from __future__ import annotations

import io
import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .archive import read_archive, write_archive

__all__ = [
    "DataError",
    "DomainDataset",
    "SampleSet",
    "SynthConfig",
    "SplitProtocol",
    "synth_generate",
    "ingest_folder",
    "split",
    "save_dataset",
    "load_dataset",
]

SHAPE_NAMES = ("circle", "ring", "square", "diamond", "triangle", "cross", "bars")
DOMAIN_STYLES = ("flat", "texture", "noisy", "sketch")


class DataError(ValueError):
    pass


@dataclass
class DomainDataset:
    """Samples grouped by domain; every domain shares one class set."""

    class_names: list[str]
    domain_names: list[str]
    images: list[np.ndarray]  # per domain: (n, C, H, W) float64
    labels: list[np.ndarray]  # per domain: (n,) int64
    provenance: str = "synthetic"

    def __post_init__(self):
        if len(self.images) != len(self.domain_names) or len(self.labels) != len(self.domain_names):
            raise DataError("one image/label block per domain required")
        shapes = {img.shape[1:] for img in self.images}
        if len(shapes) > 1:
            raise DataError(f"domains disagree on image shape: {sorted(shapes)}")
        for d, (imgs, labs) in enumerate(zip(self.images, self.labels)):
            if len(imgs) != len(labs):
                raise DataError(f"domain {self.domain_names[d]}: {len(imgs)} images, {len(labs)} labels")
            if len(labs) and (labs.min() < 0 or labs.max() >= len(self.class_names)):
                raise DataError(f"domain {self.domain_names[d]} has out-of-range labels")

    @property
    def num_domains(self) -> int:
        return len(self.domain_names)

    @property
    def num_classes(self) -> int:
        return len(self.class_names)

    @property
    def image_shape(self) -> tuple[int, ...]:
        return self.images[0].shape[1:]

    def total_samples(self) -> int:
        return sum(len(x) for x in self.images)


@dataclass
class SampleSet:
    """A flat evaluation/training split."""

    images: np.ndarray  # (n, C, H, W)
    labels: np.ndarray  # (n,)
    domains: np.ndarray  # (n,) domain index per sample
    class_names: list[str]
    domain_names: list[str]

    def __len__(self):
        return len(self.images)


@dataclass
class SynthConfig:
    classes: int = 7
    domains: int = 4
    per_domain: int = 200
    image_size: int = 32
    channels: int = 3

    def validate(self) -> list[str]:
        problems = []
        if not 2 <= self.classes <= len(SHAPE_NAMES):
            problems.append(f"classes must lie in [2, {len(SHAPE_NAMES)}]")
        if not 2 <= self.domains <= len(DOMAIN_STYLES):
            problems.append(f"domains must lie in [2, {len(DOMAIN_STYLES)}]")
        if self.per_domain < self.classes:
            problems.append("per_domain must cover every class at least once")
        if self.image_size < 8:
            problems.append("image_size must be at least 8")
        if self.channels not in (1, 3):
            problems.append("channels must be 1 or 3")
        return problems

    def to_dict(self) -> dict:
        return {
            "classes": self.classes,
            "domains": self.domains,
            "per_domain": self.per_domain,
            "image_size": self.image_size,
            "channels": self.channels,
        }

    @classmethod
    def from_dict(cls, d):
        return cls(**d)


# -- shape rendering -------------------------------------------------------------


def _shape_mask(name: str, size: int, cx: float, cy: float, scale: float) -> np.ndarray:
    lin = np.linspace(-1.0, 1.0, size)
    yy, xx = np.meshgrid(lin, lin, indexing="ij")
    x = (xx - cx) / scale
    y = (yy - cy) / scale
    r2 = x * x + y * y
    if name == "circle":
        return r2 <= 1.0
    if name == "ring":
        return (r2 <= 1.0) & (r2 >= 0.45**2)
    if name == "square":
        return np.maximum(np.abs(x), np.abs(y)) <= 0.82
    if name == "diamond":
        return np.abs(x) + np.abs(y) <= 1.1
    if name == "triangle":
        return (y <= 1.0) & (y >= -1.0) & (np.abs(x) <= (y + 1.0) / 2.0)
    if name == "cross":
        return ((np.abs(x) <= 0.33) & (np.abs(y) <= 1.0)) | ((np.abs(y) <= 0.33) & (np.abs(x) <= 1.0))
    if name == "bars":
        return ((np.abs(y - 0.55) <= 0.22) | (np.abs(y + 0.55) <= 0.22)) & (np.abs(x) <= 0.9)
    raise DataError(f"unknown shape {name!r}")


def _edges(mask: np.ndarray) -> np.ndarray:
    eroded = mask.copy()
    for shift, axis in ((1, 0), (-1, 0), (1, 1), (-1, 1)):
        eroded &= np.roll(mask, shift, axis=axis)
    return mask & ~eroded


_PALETTES = {
    "flat": [(0.85, 0.25, 0.25), (0.25, 0.65, 0.85), (0.9, 0.75, 0.2), (0.4, 0.8, 0.35)],
    "texture": [(0.8, 0.5, 0.2), (0.55, 0.3, 0.7), (0.25, 0.6, 0.5), (0.75, 0.7, 0.3)],
    "noisy": [(0.95, 0.9, 0.85), (0.85, 0.95, 0.9), (0.9, 0.85, 0.95), (0.95, 0.95, 0.8)],
}


def _render(style: str, mask: np.ndarray, size: int, rng: np.random.Generator,
            channels: int) -> np.ndarray:
    lin = np.linspace(0.0, 1.0, size)
    yy, xx = np.meshgrid(lin, lin, indexing="ij")
    if style == "sketch":
        stroke = _edges(mask)
        img = np.full((3, size, size), 0.95)
        img[:, stroke] = 0.08
    else:
        palette = _PALETTES[style]
        base = np.array(palette[rng.integers(0, len(palette))])
        base = np.clip(base + rng.uniform(-0.06, 0.06, size=3), 0.0, 1.0)
        if style == "flat":
            bg = 0.15 + 0.02 * rng.standard_normal((size, size))
            img = np.repeat(bg[None, :, :], 3, axis=0)
            for c in range(3):
                img[c][mask] = base[c]
        elif style == "texture":
            freq = rng.uniform(9.0, 14.0)
            phase = rng.uniform(0.0, 2 * np.pi)
            stripes = 0.62 + 0.38 * np.sign(np.sin(freq * (xx + yy) * np.pi + phase))
            checker = 0.16 + 0.08 * (((xx * size // 4).astype(int) + (yy * size // 4).astype(int)) % 2)
            img = np.repeat(checker[None, :, :], 3, axis=0)
            for c in range(3):
                img[c][mask] = (stripes * base[c])[mask]
        else:  # noisy
            bg = rng.uniform(0.0, 0.35, size=(size, size))
            img = np.repeat(bg[None, :, :], 3, axis=0)
            for c in range(3):
                img[c][mask] = base[c]
    img = np.clip(img, 0.0, 1.0)
    if channels == 1:
        img = img.mean(axis=0, keepdims=True)
    return img


def synth_generate(cfg: SynthConfig, seed: int) -> DomainDataset:
    """Deterministic synthetic dataset: class = shape, domain = style.

    Stored images are channel-normalized by the dataset mean and standard
    deviation (the harness trains on normalized inputs, matching the
    folder-ingestion path)."""
    problems = cfg.validate()
    if problems:
        raise DataError("; ".join(problems))
    rng = np.random.Generator(np.random.PCG64(seed))
    class_names = list(SHAPE_NAMES[: cfg.classes])
    domain_names = list(DOMAIN_STYLES[: cfg.domains])
    images, labels = [], []
    for style in domain_names:
        imgs = np.zeros((cfg.per_domain, cfg.channels, cfg.image_size, cfg.image_size))
        labs = np.zeros(cfg.per_domain, dtype=np.int64)
        for i in range(cfg.per_domain):
            cls = i % cfg.classes  # balanced labels by construction
            cx, cy = rng.uniform(-0.15, 0.15, size=2)
            scale = rng.uniform(0.62, 0.85)
            mask = _shape_mask(class_names[cls], cfg.image_size, cx, cy, scale)
            imgs[i] = _render(style, mask, cfg.image_size, rng, cfg.channels)
            labs[i] = cls
        images.append(imgs)
        labels.append(labs)
    stacked = np.concatenate(images, axis=0)
    mean = stacked.mean(axis=(0, 2, 3), keepdims=True)
    std = stacked.std(axis=(0, 2, 3), keepdims=True)
    std[std < 1e-8] = 1.0
    images = [(img - mean) / std for img in images]
    return DomainDataset(class_names, domain_names, images, labels, provenance="synthetic")


# -- folder ingestion -------------------------------------------------------------


def ingest_folder(root, image_size: int | None = None, channels: int = 3) -> DomainDataset:
    """Load a ``root/domain/class/*.{ppm,pgm,png}`` tree.

    Domains and classes come from directory names sorted lexicographically;
    images are resized when ``image_size`` is given and channel-normalized
    by the dataset mean and standard deviation.
    """
    from PIL import Image, UnidentifiedImageError

    root = Path(root)
    if not root.is_dir():
        raise DataError(f"dataset root {root} is not a directory")
    domain_dirs = sorted(p for p in root.iterdir() if p.is_dir())
    if not domain_dirs:
        raise DataError(f"dataset root {root} contains no domain directories")
    class_sets = {d.name: sorted(p.name for p in d.iterdir() if p.is_dir()) for d in domain_dirs}
    class_names = class_sets[domain_dirs[0].name]
    for dname, classes in class_sets.items():
        if classes != class_names:
            missing = sorted(set(class_names).symmetric_difference(classes))
            raise DataError(
                f"domain {dname!r} disagrees on the class set; asymmetric classes: {missing}"
            )
    if not class_names:
        raise DataError("no class directories found")

    images, labels = [], []
    for d in domain_dirs:
        imgs, labs = [], []
        for ci, cname in enumerate(class_names):
            files = sorted(
                p for p in (d / cname).iterdir()
                if p.suffix.lower() in (".ppm", ".pgm", ".png")
            )
            for f in files:
                try:
                    with Image.open(f) as im:
                        im = im.convert("RGB" if channels == 3 else "L")
                        if image_size is not None:
                            im = im.resize((image_size, image_size), Image.BILINEAR)
                        arr = np.asarray(im, dtype=np.float64) / 255.0
                except (UnidentifiedImageError, OSError) as exc:
                    raise DataError(f"cannot decode image file {f}: {exc}") from None
                if arr.ndim == 2:
                    arr = arr[None, :, :]
                else:
                    arr = arr.transpose(2, 0, 1)
                imgs.append(arr)
                labs.append(ci)
        if not imgs:
            raise DataError(f"domain {d.name!r} has no decodable images")
        images.append(np.stack(imgs))
        labels.append(np.asarray(labs, dtype=np.int64))

    shapes = {img.shape[1:] for img in images}
    if len(shapes) > 1:
        raise DataError(
            f"images disagree on shape {sorted(shapes)}; pass image_size to resize"
        )
    # channel normalization over the whole dataset
    stacked = np.concatenate(images, axis=0)
    mean = stacked.mean(axis=(0, 2, 3), keepdims=True)
    std = stacked.std(axis=(0, 2, 3), keepdims=True)
    std[std < 1e-8] = 1.0
    images = [(img - mean) / std for img in images]
    return DomainDataset(
        class_names,
        [d.name for d in domain_dirs],
        images,
        labels,
        provenance="folder",
    )


# -- splits --------------------------------------------------------------------------


@dataclass
class SplitProtocol:
    kind: str = "pooled_holdout"  # or "leave_one_domain_out"
    train_fraction: float = 0.8
    holdout_domain: str | None = None
    seed: int = 0
    valid_fraction: float = 0.1  # of the train+valid pool

    def validate(self) -> list[str]:
        problems = []
        if self.kind not in ("pooled_holdout", "leave_one_domain_out"):
            problems.append(f"unknown split kind {self.kind!r}")
        if not 0.0 < self.train_fraction < 1.0:
            problems.append("train_fraction must lie in (0, 1)")
        if not 0.0 < self.valid_fraction < 1.0:
            problems.append("valid_fraction must lie in (0, 1)")
        if self.kind == "leave_one_domain_out" and not self.holdout_domain:
            problems.append("leave_one_domain_out requires holdout_domain")
        return problems

    def to_dict(self) -> dict:
        return {
            "kind": self.kind,
            "train_fraction": self.train_fraction,
            "holdout_domain": self.holdout_domain,
            "seed": self.seed,
            "valid_fraction": self.valid_fraction,
        }

    @classmethod
    def from_dict(cls, d):
        return cls(**d)


def _gather(dataset: DomainDataset, picks: list[tuple[int, np.ndarray]]) -> SampleSet:
    imgs, labs, doms = [], [], []
    for d, idx in picks:
        if len(idx) == 0:
            continue
        imgs.append(dataset.images[d][idx])
        labs.append(dataset.labels[d][idx])
        doms.append(np.full(len(idx), d, dtype=np.int64))
    if not imgs:
        shape = dataset.image_shape
        return SampleSet(
            np.zeros((0, *shape)), np.zeros(0, dtype=np.int64), np.zeros(0, dtype=np.int64),
            dataset.class_names, dataset.domain_names,
        )
    return SampleSet(
        np.concatenate(imgs), np.concatenate(labs), np.concatenate(doms),
        dataset.class_names, dataset.domain_names,
    )


def split(dataset: DomainDataset, protocol: SplitProtocol):
    """Partition into (train, valid, test) per the protocol. Deterministic
    for a fixed seed; splits are disjoint and exhaustive."""
    problems = protocol.validate()
    if problems:
        raise DataError("; ".join(problems))
    rng = np.random.Generator(np.random.PCG64(protocol.seed))
    train_picks, valid_picks, test_picks = [], [], []
    if protocol.kind == "pooled_holdout":
        for d in range(dataset.num_domains):
            n = len(dataset.images[d])
            perm = rng.permutation(n)
            n_pool = int(round(protocol.train_fraction * n))
            pool, test_idx = perm[:n_pool], perm[n_pool:]
            n_valid = int(round(protocol.valid_fraction * n_pool))
            valid_idx, train_idx = pool[:n_valid], pool[n_valid:]
            train_picks.append((d, np.sort(train_idx)))
            valid_picks.append((d, np.sort(valid_idx)))
            test_picks.append((d, np.sort(test_idx)))
    else:
        if protocol.holdout_domain not in dataset.domain_names:
            raise DataError(
                f"holdout domain {protocol.holdout_domain!r} not in {dataset.domain_names}"
            )
        holdout = dataset.domain_names.index(protocol.holdout_domain)
        for d in range(dataset.num_domains):
            n = len(dataset.images[d])
            if d == holdout:
                test_picks.append((d, np.arange(n)))
                continue
            perm = rng.permutation(n)
            n_valid = int(round(protocol.valid_fraction * n))
            valid_idx, train_idx = perm[:n_valid], perm[n_valid:]
            train_picks.append((d, np.sort(train_idx)))
            valid_picks.append((d, np.sort(valid_idx)))
    return (
        _gather(dataset, train_picks),
        _gather(dataset, valid_picks),
        _gather(dataset, test_picks),
    )


# -- persistence -------------------------------------------------------------------


def save_dataset(dataset: DomainDataset, path) -> None:
    meta = {
        "class_names": dataset.class_names,
        "domain_names": dataset.domain_names,
        "provenance": dataset.provenance,
        "image_shape": list(dataset.image_shape),
        "counts": [len(x) for x in dataset.images],
    }
    entries = {"meta.json": json.dumps(meta, sort_keys=True, indent=2).encode()}
    for d in range(dataset.num_domains):
        entries[f"domain_{d:03d}.images"] = np.ascontiguousarray(
            dataset.images[d], dtype="<f8"
        ).tobytes()
        entries[f"domain_{d:03d}.labels"] = np.ascontiguousarray(
            dataset.labels[d], dtype="<i8"
        ).tobytes()
    write_archive(path, entries)


def load_dataset(path) -> DomainDataset:
    entries = read_archive(path)
    meta = json.loads(entries["meta.json"].decode())
    shape = tuple(meta["image_shape"])
    images, labels = [], []
    for d, n in enumerate(meta["counts"]):
        img = np.frombuffer(entries[f"domain_{d:03d}.images"], dtype="<f8")
        images.append(img.astype(np.float64).reshape(n, *shape))
        lab = np.frombuffer(entries[f"domain_{d:03d}.labels"], dtype="<i8")
        labels.append(lab.astype(np.int64))
    return DomainDataset(
        meta["class_names"], meta["domain_names"], images, labels, meta["provenance"]
    )
