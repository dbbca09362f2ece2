"""Minimal pre-norm vision transformer with per-tensor freezing.

The desk-scale default (32px images, 8px patches, 6 layers, width 64) is
small enough to finite-difference the whole network while keeping the
structural layout of the standard ViT family. Token order throughout is
[class, (prompts), patches].
"""

from __future__ import annotations

import hashlib
from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .errors import ConfigError, ShapeError
from .tensor import Tensor


@dataclass
class BackboneConfig:
    image_size: int = 32
    patch_size: int = 8
    channels: int = 1
    depth: int = 6
    width: int = 64
    heads: int = 4
    mlp_ratio: int = 4
    num_classes_pretrain: int = 4
    eps: float = 1e-6

    def __post_init__(self):
        if self.image_size % self.patch_size != 0:
            raise ConfigError(
                f"image_size {self.image_size} not divisible by patch_size {self.patch_size}")
        if self.width % self.heads != 0:
            raise ConfigError(f"width {self.width} not divisible by heads {self.heads}")

    @property
    def num_patches(self):
        return (self.image_size // self.patch_size) ** 2

    @property
    def patch_dim(self):
        return self.channels * self.patch_size ** 2


def truncated_normal(rng, shape, std=0.02, bound=2.0):
    """Normal(0, std) resampled until all draws fall within +-bound*std."""
    out = rng.standard_normal(shape) * std
    limit = bound * std
    bad = np.abs(out) > limit
    while bad.any():
        out[bad] = rng.standard_normal(int(bad.sum())) * std
        bad = np.abs(out) > limit
    return out


class Backbone:
    """Named parameter tensors plus the architecture description.

    `freeze()` flips every tensor to non-trainable; a frozen backbone is
    immutable for the rest of its life and safe to share between workers.
    """

    def __init__(self, cfg: BackboneConfig, seed=0):
        self.cfg = cfg
        self.frozen = False
        rng = np.random.default_rng((int(seed), 0xB0))
        d = cfg.width
        p = {}
        p["embed.proj.weight"] = truncated_normal(rng, (cfg.patch_dim, d))
        p["embed.proj.bias"] = np.zeros(d)
        p["embed.pos"] = truncated_normal(rng, (cfg.num_patches, d))
        p["cls"] = truncated_normal(rng, (1, d))
        for i in range(1, cfg.depth + 1):
            pre = f"layer{i}."
            p[pre + "norm1.gain"] = np.ones(d)
            p[pre + "norm1.bias"] = np.zeros(d)
            for name in ("q", "k", "v", "out"):
                p[pre + f"attn.{name}.weight"] = truncated_normal(rng, (d, d))
                p[pre + f"attn.{name}.bias"] = np.zeros(d)
            p[pre + "norm2.gain"] = np.ones(d)
            p[pre + "norm2.bias"] = np.zeros(d)
            hidden = cfg.mlp_ratio * d
            p[pre + "mlp.fc1.weight"] = truncated_normal(rng, (d, hidden))
            p[pre + "mlp.fc1.bias"] = np.zeros(hidden)
            p[pre + "mlp.fc2.weight"] = truncated_normal(rng, (hidden, d))
            p[pre + "mlp.fc2.bias"] = np.zeros(d)
        p["norm.gain"] = np.ones(d)
        p["norm.bias"] = np.zeros(d)
        p["head.weight"] = truncated_normal(rng, (d, cfg.num_classes_pretrain))
        p["head.bias"] = np.zeros(cfg.num_classes_pretrain)
        self.params = {name: Tensor(v, requires_grad=True) for name, v in p.items()}

    def freeze(self):
        for t in self.params.values():
            t.requires_grad = False
            t.zero_grad()
        self.frozen = True

    def trainable(self):
        return {n: t for n, t in self.params.items() if t.requires_grad}

    def parameter_count(self, include_head=True):
        skip = () if include_head else ("head.weight", "head.bias")
        return sum(t.size for n, t in self.params.items() if n not in skip)

    def checksum(self):
        h = hashlib.sha256()
        for name in sorted(self.params):
            h.update(name.encode())
            h.update(self.params[name].data.tobytes())
        return h.hexdigest()

    def state_arrays(self):
        return {n: t.data.copy() for n, t in self.params.items()}

    def load_state(self, arrays):
        for n, t in self.params.items():
            if n not in arrays:
                raise ConfigError(f"checkpoint missing backbone tensor {n!r}")
            if arrays[n].shape != t.data.shape:
                raise ShapeError(
                    f"tensor {n!r} shape {arrays[n].shape} does not match {t.data.shape}")
            t.data[...] = arrays[n]


def extract_patches(images, cfg: BackboneConfig):
    """[B?, C, H, W] pixels -> [B?, num_patches, patch_dim] row-major patches."""
    arr = images.data if isinstance(images, Tensor) else np.asarray(images, dtype=np.float64)
    squeeze = arr.ndim == 3
    if squeeze:
        arr = arr[None]
    b, c, h, w = arr.shape
    if c != cfg.channels or h != cfg.image_size or w != cfg.image_size:
        raise ShapeError(
            f"expected [{cfg.channels}, {cfg.image_size}, {cfg.image_size}] images, got {arr.shape[1:]}")
    ps = cfg.patch_size
    g = h // ps
    patches = arr.reshape(b, c, g, ps, g, ps)
    patches = patches.transpose(0, 2, 4, 1, 3, 5).reshape(b, g * g, cfg.patch_dim)
    if squeeze:
        patches = patches[0]
    return np.ascontiguousarray(patches)


def embed(backbone: Backbone, images):
    """Patchify, project, and add position embeddings."""
    patches = Tensor(extract_patches(images, backbone.cfg))
    p = backbone.params
    tokens = T.linear(patches, p["embed.proj.weight"], p["embed.proj.bias"])
    return T.add(tokens, p["embed.pos"])


def encoder_layer(backbone: Backbone, i, tokens):
    """One pre-norm attention + MLP block; also returns attention probabilities."""
    cfg = backbone.cfg
    if not 1 <= i <= cfg.depth:
        raise ConfigError(f"layer index {i} outside 1..{cfg.depth}")
    p = backbone.params
    pre = f"layer{i}."
    squeeze = tokens.ndim == 2
    if squeeze:
        tokens = T.reshape(tokens, (1,) + tokens.shape)
    b, s, d = tokens.shape
    heads = cfg.heads
    dh = d // heads

    h = T.layernorm(tokens, p[pre + "norm1.gain"], p[pre + "norm1.bias"], cfg.eps)
    q = T.linear(h, p[pre + "attn.q.weight"], p[pre + "attn.q.bias"])
    k = T.linear(h, p[pre + "attn.k.weight"], p[pre + "attn.k.bias"])
    v = T.linear(h, p[pre + "attn.v.weight"], p[pre + "attn.v.bias"])
    q = T.transpose(T.reshape(q, (b, s, heads, dh)), (0, 2, 1, 3))
    k = T.transpose(T.reshape(k, (b, s, heads, dh)), (0, 2, 1, 3))
    v = T.transpose(T.reshape(v, (b, s, heads, dh)), (0, 2, 1, 3))
    scores = T.scale(T.matmul(q, T.transpose(k, (0, 1, 3, 2))), 1.0 / np.sqrt(dh))
    attn = T.softmax(scores, axis=-1)
    ctx = T.matmul(attn, v)
    ctx = T.reshape(T.transpose(ctx, (0, 2, 1, 3)), (b, s, d))
    tokens = T.add(tokens, T.linear(ctx, p[pre + "attn.out.weight"], p[pre + "attn.out.bias"]))

    h2 = T.layernorm(tokens, p[pre + "norm2.gain"], p[pre + "norm2.bias"], cfg.eps)
    mid = T.gelu(T.linear(h2, p[pre + "mlp.fc1.weight"], p[pre + "mlp.fc1.bias"]))
    tokens = T.add(tokens, T.linear(mid, p[pre + "mlp.fc2.weight"], p[pre + "mlp.fc2.bias"]))

    if squeeze:
        tokens = T.reshape(tokens, (s, d))
        attn = T.reshape(attn, (heads, s, s))
    return tokens, attn


def final_norm(backbone: Backbone, tokens):
    p = backbone.params
    return T.layernorm(tokens, p["norm.gain"], p["norm.bias"], backbone.cfg.eps)


def class_output(tokens):
    """Class-token row of a [.., S, d] token stack, as [.., d]."""
    row = T.tslice(tokens, tokens.ndim - 2, 0, 1)
    shape = row.shape[:-2] + (row.shape[-1],)
    return T.reshape(row, shape)


def classify_head(backbone: Backbone, cls_out):
    return T.linear(cls_out, backbone.params["head.weight"], backbone.params["head.bias"])


def pretrain_forward(backbone: Backbone, images):
    """Full unprompted forward to source-task logits."""
    tokens = embed(backbone, images)
    squeeze = tokens.ndim == 2
    if squeeze:
        tokens = T.reshape(tokens, (1,) + tokens.shape)
    b = tokens.shape[0]
    cls = T.broadcast_to(backbone.params["cls"], (b, 1, backbone.cfg.width))
    tokens = T.concat([cls, tokens], axis=1)
    for i in range(1, backbone.cfg.depth + 1):
        tokens, _ = encoder_layer(backbone, i, tokens)
    logits = classify_head(backbone, class_output(final_norm(backbone, tokens)))
    if squeeze:
        logits = T.reshape(logits, (logits.shape[-1],))
    return logits
