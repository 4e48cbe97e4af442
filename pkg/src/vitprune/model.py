"""A configurable ViT-family encoder on the tensor engine.

Patch embedding, learned positional embeddings, pre-norm multi-head
self-attention blocks with GELU MLPs and residuals, and a pooled linear
classifier. Per-layer head and MLP widths live in the config so that a
structurally pruned model is just a model with a narrower config.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field

import numpy as np

from . import tensor as T
from .archive import read_archive, write_archive
from .tensor import Tensor

__all__ = [
    "ModelConfig",
    "TransformerModel",
    "AttentionRecord",
    "init_model",
    "param_shapes",
    "param_count",
    "macs_count",
]

LAYERNORM_EPS = 1e-5


class ConfigError(ValueError):
    """A model configuration violates a structural constraint."""


def _as_width_list(value, num_layers: int, what: str) -> list[int]:
    if isinstance(value, int):
        return [value] * num_layers
    widths = [int(v) for v in value]
    if len(widths) != num_layers:
        raise ConfigError(f"{what} must have one entry per layer ({num_layers}), got {len(widths)}")
    return widths


@dataclass
class ModelConfig:
    """Architecture hyperparameters. ``num_heads`` and ``mlp_hidden`` accept
    a single int (uniform) or one value per layer (pruned widths)."""

    image_size: int = 32
    channels: int = 3
    patch_size: int = 8
    embed_dim: int = 64
    num_layers: int = 2
    num_heads: list[int] = field(default_factory=lambda: [4, 4])
    head_dim: int = 16
    mlp_hidden: list[int] = field(default_factory=lambda: [128, 128])
    num_classes: int = 7
    pooling: str = "mean"
    use_cls_token: bool = True

    def __post_init__(self):
        self.num_heads = _as_width_list(self.num_heads, self.num_layers, "num_heads")
        self.mlp_hidden = _as_width_list(self.mlp_hidden, self.num_layers, "mlp_hidden")

    # -- derived geometry ---------------------------------------------------

    @property
    def grid(self) -> int:
        return self.image_size // self.patch_size

    @property
    def num_patches(self) -> int:
        return self.grid * self.grid

    @property
    def num_tokens(self) -> int:
        return self.num_patches + (1 if self.use_cls_token else 0)

    @property
    def patch_dim(self) -> int:
        return self.channels * self.patch_size * self.patch_size

    def validate(self) -> list[str]:
        """Collect every violated constraint (empty list means valid)."""
        problems = []
        if self.image_size < 1 or self.patch_size < 1:
            problems.append("image_size and patch_size must be positive")
        elif self.image_size % self.patch_size != 0:
            problems.append(
                f"image_size {self.image_size} not divisible by patch_size {self.patch_size}"
            )
        if self.channels < 1:
            problems.append("channels must be positive")
        if self.embed_dim < 1:
            problems.append("embed_dim must be positive")
        if self.num_layers < 1:
            problems.append("num_layers must be positive")
        if self.head_dim < 1:
            problems.append("head_dim must be positive")
        if any(h < 1 for h in self.num_heads):
            problems.append("every layer needs at least one attention head")
        if any(m < 1 for m in self.mlp_hidden):
            problems.append("every layer needs at least one mlp channel")
        if self.num_classes < 1:
            problems.append("num_classes must be positive")
        if self.pooling not in ("cls", "mean"):
            problems.append(f"pooling must be 'cls' or 'mean', got {self.pooling!r}")
        if self.pooling == "cls" and not self.use_cls_token:
            problems.append("cls pooling requires use_cls_token")
        return problems

    def check(self) -> None:
        problems = self.validate()
        if problems:
            raise ConfigError("; ".join(problems))

    def to_dict(self) -> dict:
        return {
            "image_size": self.image_size,
            "channels": self.channels,
            "patch_size": self.patch_size,
            "embed_dim": self.embed_dim,
            "num_layers": self.num_layers,
            "num_heads": list(self.num_heads),
            "head_dim": self.head_dim,
            "mlp_hidden": list(self.mlp_hidden),
            "num_classes": self.num_classes,
            "pooling": self.pooling,
            "use_cls_token": self.use_cls_token,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        return cls(**d)

    @classmethod
    def vit_base(cls, num_classes: int = 1000) -> "ModelConfig":
        return cls(
            image_size=224,
            channels=3,
            patch_size=16,
            embed_dim=768,
            num_layers=12,
            num_heads=12,
            head_dim=64,
            mlp_hidden=3072,
            num_classes=num_classes,
            pooling="cls",
            use_cls_token=True,
        )


def param_shapes(cfg: ModelConfig) -> dict[str, tuple[int, ...]]:
    """Parameter key -> shape, in canonical (deterministic) order.

    Weight orientation is input-major: linear layers compute x @ W + b with
    W of shape (in, out). The QKV projection is one matrix with columns laid
    out [Q | K | V], head-major inside each block.
    """
    d = cfg.embed_dim
    shapes: dict[str, tuple[int, ...]] = {
        "patch_embed.weight": (cfg.patch_dim, d),
        "patch_embed.bias": (d,),
        "pos_embed.weight": (cfg.num_tokens, d),
    }
    if cfg.use_cls_token:
        shapes["cls.token"] = (d,)
    for i in range(cfg.num_layers):
        attn = cfg.num_heads[i] * cfg.head_dim
        mlp = cfg.mlp_hidden[i]
        shapes[f"layers.{i}.ln1.weight"] = (d,)
        shapes[f"layers.{i}.ln1.bias"] = (d,)
        shapes[f"layers.{i}.qkv.weight"] = (d, 3 * attn)
        shapes[f"layers.{i}.qkv.bias"] = (3 * attn,)
        shapes[f"layers.{i}.attn_out.weight"] = (attn, d)
        shapes[f"layers.{i}.attn_out.bias"] = (d,)
        shapes[f"layers.{i}.ln2.weight"] = (d,)
        shapes[f"layers.{i}.ln2.bias"] = (d,)
        shapes[f"layers.{i}.mlp_fc1.weight"] = (d, mlp)
        shapes[f"layers.{i}.mlp_fc1.bias"] = (mlp,)
        shapes[f"layers.{i}.mlp_fc2.weight"] = (mlp, d)
        shapes[f"layers.{i}.mlp_fc2.bias"] = (d,)
    shapes["final_ln.weight"] = (d,)
    shapes["final_ln.bias"] = (d,)
    shapes["head.weight"] = (d, cfg.num_classes)
    shapes["head.bias"] = (cfg.num_classes,)
    return shapes


def param_count(cfg: ModelConfig) -> int:
    """Exact number of stored scalars, a pure function of the config."""
    total = 0
    for shape in param_shapes(cfg).values():
        n = 1
        for extent in shape:
            n *= extent
        total += n
    return total


def macs_count(cfg: ModelConfig) -> int:
    """Multiply-accumulates of one single-image forward pass.

    Counts every matmul: patch embedding, QKV projections, attention scores
    and weighting, output projections, both MLP matmuls, classifier head.
    """
    t = cfg.num_tokens
    d = cfg.embed_dim
    total = cfg.num_patches * cfg.patch_dim * d
    for i in range(cfg.num_layers):
        attn = cfg.num_heads[i] * cfg.head_dim
        mlp = cfg.mlp_hidden[i]
        total += t * d * 3 * attn          # qkv projection
        total += t * t * attn              # q . k^T over all heads
        total += t * t * attn              # attention-weighted values
        total += t * attn * d              # output projection
        total += t * d * mlp + t * mlp * d  # mlp
    total += d * cfg.num_classes
    return total


@dataclass
class AttentionRecord:
    """Post-softmax attention weights, one (batch, heads, tokens, tokens)
    array per layer."""

    layers: list[np.ndarray]
    has_cls: bool
    grid: int
    patch_size: int

    @property
    def num_images(self) -> int:
        return self.layers[0].shape[0] if self.layers else 0


def _truncated_normal(rng: np.random.Generator, shape, std: float = 0.02, bound: float = 2.0):
    out = rng.standard_normal(shape)
    mask = np.abs(out) > bound
    while mask.any():
        out[mask] = rng.standard_normal(int(mask.sum()))
        mask = np.abs(out) > bound
    return out * std


def init_model(cfg: ModelConfig, seed: int) -> "TransformerModel":
    """Fresh model: truncated-normal(std 0.02) weights, zero biases, unit
    layer-norm scales. Deterministic in (config, seed)."""
    cfg.check()
    if len(set(cfg.num_heads)) != 1 or len(set(cfg.mlp_hidden)) != 1:
        raise ConfigError("init_model requires uniform per-layer widths")
    if cfg.num_heads[0] * cfg.head_dim != cfg.embed_dim:
        raise ConfigError(
            f"at initialization num_heads*head_dim must equal embed_dim "
            f"({cfg.num_heads[0]}*{cfg.head_dim} != {cfg.embed_dim})"
        )
    rng = np.random.Generator(np.random.PCG64(seed))
    params: dict[str, Tensor] = {}
    for key, shape in param_shapes(cfg).items():
        if key.endswith(".bias"):
            data = np.zeros(shape)
        elif ".ln" in key or key.startswith("final_ln"):
            data = np.ones(shape) if key.endswith(".weight") else np.zeros(shape)
        else:
            data = _truncated_normal(rng, shape)
        params[key] = Tensor(data, requires_grad=True)
    return TransformerModel(cfg, params)


def _to_patches(images: np.ndarray, patch: int) -> np.ndarray:
    """(B, C, S, S) -> (B, grid*grid, C*patch*patch), patches row-major."""
    b, c, s, _ = images.shape
    g = s // patch
    x = images.reshape(b, c, g, patch, g, patch)
    x = x.transpose(0, 2, 4, 1, 3, 5)
    return x.reshape(b, g * g, c * patch * patch)


class TransformerModel:
    def __init__(self, config: ModelConfig, params: dict[str, Tensor]):
        config.check()
        expected = param_shapes(config)
        if set(params) != set(expected):
            missing = sorted(set(expected) - set(params))
            extra = sorted(set(params) - set(expected))
            raise ConfigError(f"parameter keys mismatch: missing {missing}, unexpected {extra}")
        for key, shape in expected.items():
            if params[key].shape != shape:
                raise ConfigError(
                    f"parameter {key} has shape {params[key].shape}, expected {shape}"
                )
        self.config = config
        self.params = {key: params[key] for key in expected}  # canonical order

    # -- basic bookkeeping ---------------------------------------------------

    def copy(self) -> "TransformerModel":
        params = {
            k: Tensor(p.data.copy(), requires_grad=p.requires_grad)
            for k, p in self.params.items()
        }
        return TransformerModel(ModelConfig.from_dict(self.config.to_dict()), params)

    def param_count(self) -> int:
        return sum(p.size for p in self.params.values())

    def macs_count(self) -> int:
        return macs_count(self.config)

    def trainable_params(self) -> list[tuple[str, Tensor]]:
        return [(k, p) for k, p in self.params.items() if p.requires_grad]

    # -- forward --------------------------------------------------------------

    def forward(self, images, record_attention: bool = False):
        """Run a batch of images to logits.

        ``images`` is (batch, channels, size, size). Returns logits of shape
        (batch, num_classes); with ``record_attention`` also an
        AttentionRecord carrying one (batch, heads, tokens, tokens) array
        per layer.
        """
        cfg = self.config
        images = np.asarray(images, dtype=np.float64)
        expected = (cfg.channels, cfg.image_size, cfg.image_size)
        if images.ndim != 4 or images.shape[1:] != expected:
            raise T.ShapeError(
                f"forward expects images of shape (batch, {expected[0]}, {expected[1]}, "
                f"{expected[2]}), got {images.shape}"
            )
        T._check_finite(images, "input images")
        b = images.shape[0]
        p = self.params
        tokens = cfg.num_tokens
        d = cfg.embed_dim

        patches = Tensor(_to_patches(images, cfg.patch_size))
        x = T.matmul(patches, p["patch_embed.weight"]) + p["patch_embed.bias"]
        if cfg.use_cls_token:
            cls_row = T.expand(p["cls.token"].reshape((1, 1, d)), (b, 1, d))
            x = T.concat([cls_row, x], axis=1)
        x = x + p["pos_embed.weight"]

        recorded: list[np.ndarray] = []
        for i in range(cfg.num_layers):
            heads = cfg.num_heads[i]
            dh = cfg.head_dim
            attn_width = heads * dh
            pre = f"layers.{i}."
            h = T.layer_norm(x, axis=-1, eps=LAYERNORM_EPS)
            h = h * p[pre + "ln1.weight"] + p[pre + "ln1.bias"]
            qkv = T.matmul(h, p[pre + "qkv.weight"]) + p[pre + "qkv.bias"]
            qkv = qkv.reshape((b, tokens, 3, heads, dh)).transpose((2, 0, 3, 1, 4))
            q = qkv.narrow(0, 0, 1).reshape((b, heads, tokens, dh))
            k = qkv.narrow(0, 1, 1).reshape((b, heads, tokens, dh))
            v = qkv.narrow(0, 2, 1).reshape((b, heads, tokens, dh))
            scores = T.matmul(q, k.transpose((0, 1, 3, 2))) * (1.0 / np.sqrt(dh))
            attn = T.softmax(scores, axis=-1)
            if record_attention:
                recorded.append(attn.data.copy())
            ctx = T.matmul(attn, v).transpose((0, 2, 1, 3)).reshape((b, tokens, attn_width))
            x = x + (T.matmul(ctx, p[pre + "attn_out.weight"]) + p[pre + "attn_out.bias"])
            h = T.layer_norm(x, axis=-1, eps=LAYERNORM_EPS)
            h = h * p[pre + "ln2.weight"] + p[pre + "ln2.bias"]
            h = T.gelu(T.matmul(h, p[pre + "mlp_fc1.weight"]) + p[pre + "mlp_fc1.bias"])
            x = x + (T.matmul(h, p[pre + "mlp_fc2.weight"]) + p[pre + "mlp_fc2.bias"])

        x = T.layer_norm(x, axis=-1, eps=LAYERNORM_EPS)
        x = x * p["final_ln.weight"] + p["final_ln.bias"]
        if cfg.pooling == "cls":
            pooled = x.narrow(1, 0, 1).reshape((b, d))
        else:
            # mean pooling aggregates the patch tokens; a cls token, when
            # present, is positional bookkeeping only
            if cfg.use_cls_token:
                pooled = x.narrow(1, 1, cfg.num_patches).mean(axis=1)
            else:
                pooled = x.mean(axis=1)
        logits = T.matmul(pooled, p["head.weight"]) + p["head.bias"]

        if record_attention:
            record = AttentionRecord(
                layers=recorded,
                has_cls=cfg.use_cls_token,
                grid=cfg.grid,
                patch_size=cfg.patch_size,
            )
            return logits, record
        return logits

    # -- checkpoint i/o ---------------------------------------------------------

    def save(self, path) -> None:
        """Write a checkpoint archive: config JSON plus raw little-endian
        float64 buffers. Byte-for-byte reproducible for identical weights."""
        entries = {
            "config.json": json.dumps(self.config.to_dict(), sort_keys=True, indent=2).encode()
        }
        for key, p in self.params.items():
            entries[f"params/{key}"] = np.ascontiguousarray(p.data, dtype="<f8").tobytes()
        write_archive(path, entries)

    @classmethod
    def load(cls, path) -> "TransformerModel":
        entries = read_archive(path)
        cfg = ModelConfig.from_dict(json.loads(entries["config.json"].decode()))
        params = {}
        for key, shape in param_shapes(cfg).items():
            raw = entries[f"params/{key}"]
            data = np.frombuffer(raw, dtype="<f8").astype(np.float64).reshape(shape)
            params[key] = Tensor(data, requires_grad=True)
        return cls(cfg, params)
