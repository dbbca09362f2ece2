"""Per-layer prompt construction, insertion, and the prompted forward pass.

A prompt bank owns one trainable [M, d] block per insertion layer. At each
layer the first m = round(alpha*M) rows can be routed through a transform
(the real-part Fourier map, or a fixed/learnable linear layer for the
ablations) before being concatenated with the untouched rows and spliced
into the token stream as [class, prompts, patches].
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import spectral
from . import tensor as T
from .backbone import Backbone, class_output, classify_head, embed, encoder_layer, final_norm, truncated_normal
from .errors import ConfigError
from .tensor import Tensor

LOCATIONS = ("prepend", "append", "random")
DIM_MODES = ("sequence", "hidden", "both")
TRANSFORMS = ("fft", "fll", "lll", "none")
VARIANTS = ("deep", "shallow")


def fourier_count(alpha, m_total):
    """Number of transformed prompts; .5 ties round up."""
    return int(np.floor(alpha * m_total + 0.5))


@dataclass
class PromptConfig:
    prompts_per_layer: int = 10
    alpha: float = 1.0
    location: str = "prepend"
    depth_set: tuple | None = None  # None: every insertion layer
    dim_mode: str = "both"
    transform: str = "fft"
    variant: str = "deep"

    def __post_init__(self):
        if self.prompts_per_layer < 0:
            raise ConfigError(f"prompts_per_layer must be >= 0, got {self.prompts_per_layer}")
        if not 0.0 <= self.alpha <= 1.0:
            raise ConfigError(f"alpha must lie in [0, 1], got {self.alpha}")
        if self.location not in LOCATIONS:
            raise ConfigError(f"location must be one of {LOCATIONS}, got {self.location!r}")
        if self.dim_mode not in DIM_MODES:
            raise ConfigError(f"dim_mode must be one of {DIM_MODES}, got {self.dim_mode!r}")
        if self.transform not in TRANSFORMS:
            raise ConfigError(f"transform must be one of {TRANSFORMS}, got {self.transform!r}")
        if self.variant not in VARIANTS:
            raise ConfigError(f"variant must be one of {VARIANTS}, got {self.variant!r}")
        if self.depth_set is not None:
            self.depth_set = tuple(sorted(set(int(i) for i in self.depth_set)))
            if not self.depth_set:
                raise ConfigError("depth_set must be nonempty when given")

    @property
    def fourier_prompts(self):
        return fourier_count(self.alpha, self.prompts_per_layer)

    def insertion_layers(self, n_layers):
        """Layers that receive prompts: all of them (deep) or just the first."""
        if self.variant == "shallow":
            return (1,)
        return tuple(range(1, n_layers + 1))

    def transform_layers(self, n_layers):
        """Layers whose leading m prompts get transformed."""
        insertion = self.insertion_layers(n_layers)
        if self.depth_set is None:
            return insertion
        bad = [i for i in self.depth_set if not 1 <= i <= n_layers]
        if bad:
            raise ConfigError(f"depth_set entries {bad} outside 1..{n_layers}")
        outside = [i for i in self.depth_set if i not in insertion]
        if outside:
            raise ConfigError(
                f"depth_set entries {outside} are not insertion layers for variant {self.variant!r}")
        return tuple(i for i in insertion if i in self.depth_set)


class PromptBank:
    """Trainable prompt tensors plus the optional linear-transform weights."""

    def __init__(self, config: PromptConfig, n_layers, width, patch_dim, seed=0):
        self.config = config
        self.n_layers = n_layers
        self.width = width
        rng = np.random.default_rng((int(seed), 0xF0))
        r = np.sqrt(6.0 / (width + patch_dim))
        m_total = config.prompts_per_layer
        self.prompts = {}
        for i in config.insertion_layers(n_layers):
            self.prompts[i] = Tensor(
                rng.uniform(-r, r, (m_total, width)), requires_grad=True)
        self.lll = None
        self.fll = None
        if config.transform == "lll":
            self.lll = Tensor(truncated_normal(rng, (width, width)), requires_grad=True)
        elif config.transform == "fll":
            self.fll = Tensor(truncated_normal(rng, (width, width)), requires_grad=False)
        # one position per layer, fixed for the run
        self.random_offsets = {}
        if config.location == "random":
            m = config.fourier_prompts
            for i in config.insertion_layers(n_layers):
                self.random_offsets[i] = int(rng.integers(0, m_total - m + 1))

    def trainable(self):
        named = {f"prompt.layer{i}": t for i, t in self.prompts.items()}
        if self.lll is not None:
            named["prompt.lll"] = self.lll
        return named

    def named_state(self):
        named = self.trainable()
        if self.fll is not None:
            named = dict(named)
            named["prompt.fll"] = self.fll
        return named


def fll_transform(block, w_fixed):
    """Fixed linear map along the hidden dimension: rows times W^T."""
    return T.matmul(block, T.transpose(w_fixed, (1, 0)))


def lll_transform(block, w_learn):
    """Learnable linear map along the hidden dimension."""
    return T.matmul(block, T.transpose(w_learn, (1, 0)))


def _apply_transform(block, config, bank):
    if config.transform == "fft":
        if config.dim_mode == "both":
            return spectral.fourier2d_real(block)
        return spectral.fourier1d_real(block, config.dim_mode)
    if config.transform == "fll":
        return fll_transform(block, bank.fll)
    if config.transform == "lll":
        return lll_transform(block, bank.lll)
    raise ConfigError(f"no transform to apply for {config.transform!r}")


def _assemble(raw, transformed_block, m, location, offset):
    m_total = raw.shape[0]
    if m == m_total:
        return transformed_block
    rest = T.tslice(raw, 0, m, m_total - m)
    if location == "prepend":
        return T.concat([transformed_block, rest], axis=0)
    if location == "append":
        return T.concat([rest, transformed_block], axis=0)
    parts = []
    if offset > 0:
        parts.append(T.tslice(rest, 0, 0, offset))
    parts.append(transformed_block)
    if offset < m_total - m:
        parts.append(T.tslice(rest, 0, offset, m_total - m - offset))
    return T.concat(parts, axis=0)


def build_layer_prompts(bank: PromptBank, config: PromptConfig, i):
    """The [M, d] prompt block entering layer i, transforms applied."""
    if i not in bank.prompts:
        raise ConfigError(f"layer {i} is not in the insertion set")
    raw = bank.prompts[i]
    m = config.fourier_prompts
    if m == 0 or config.transform == "none" or i not in config.transform_layers(bank.n_layers):
        return raw
    block = T.tslice(raw, 0, 0, m)
    transformed = _apply_transform(block, config, bank)
    return _assemble(raw, transformed, m, config.location, bank.random_offsets.get(i, 0))


def build_all_layer_prompts(bank: PromptBank, config: PromptConfig):
    """Prompt blocks for every insertion layer, transform batched across layers."""
    layers = config.insertion_layers(bank.n_layers)
    m = config.fourier_prompts
    transform_layers = config.transform_layers(bank.n_layers)
    if m == 0 or config.transform == "none" or not transform_layers:
        return {i: bank.prompts[i] for i in layers}
    d = bank.width
    stacked = T.concat(
        [T.reshape(T.tslice(bank.prompts[i], 0, 0, m), (1, m, d)) for i in transform_layers],
        axis=0)
    transformed = _apply_transform(stacked, config, bank)
    out = {}
    for pos, i in enumerate(transform_layers):
        block = T.reshape(T.tslice(transformed, 0, pos, 1), (m, d))
        out[i] = _assemble(bank.prompts[i], block, m, config.location,
                           bank.random_offsets.get(i, 0))
    for i in layers:
        if i not in out:
            out[i] = bank.prompts[i]
    return out


def insert(tokens_prev, layer_prompts):
    """Splice prompt rows between the class token and the patch tokens."""
    m = layer_prompts.shape[0]
    if m == 0:
        return tokens_prev
    axis = tokens_prev.ndim - 2
    cls = T.tslice(tokens_prev, axis, 0, 1)
    patches = T.tslice(tokens_prev, axis, 1, tokens_prev.shape[axis] - 1)
    if tokens_prev.ndim == 3:
        b = tokens_prev.shape[0]
        layer_prompts = T.broadcast_to(layer_prompts, (b,) + layer_prompts.shape)
    return T.concat([cls, layer_prompts, patches], axis=axis)


def strip_prompts(tokens, m):
    """Drop the m prompt rows, keeping class and patch rows."""
    if m == 0:
        return tokens
    axis = tokens.ndim - 2
    s = tokens.shape[axis]
    cls = T.tslice(tokens, axis, 0, 1)
    patches = T.tslice(tokens, axis, 1 + m, s - 1 - m)
    return T.concat([cls, patches], axis=axis)


class Head:
    """Task classification head read off the class token."""

    def __init__(self, width, num_classes, seed=0):
        rng = np.random.default_rng((int(seed), 0x4E))
        self.weight = Tensor(truncated_normal(rng, (width, num_classes)), requires_grad=True)
        self.bias = Tensor(np.zeros(num_classes), requires_grad=True)

    def __call__(self, cls_out):
        return T.linear(cls_out, self.weight, self.bias)

    def trainable(self):
        return {"head.weight": self.weight, "head.bias": self.bias}


def input_tokens(backbone: Backbone, images):
    """[class, patches] token rows for a batch, before any prompting."""
    tokens = embed(backbone, images)
    squeeze = tokens.ndim == 2
    if squeeze:
        tokens = T.reshape(tokens, (1,) + tokens.shape)
    b = tokens.shape[0]
    cls = T.broadcast_to(backbone.params["cls"], (b, 1, backbone.cfg.width))
    tokens = T.concat([cls, tokens], axis=1)
    return tokens, squeeze


def tuned_forward(backbone: Backbone, bank: PromptBank, config: PromptConfig, images,
                  head: Head | None = None):
    """Prompted forward pass; returns logits and per-layer attention."""
    tokens, squeeze = input_tokens(backbone, images)
    logits, attns = forward_from_tokens(backbone, bank, config, tokens, head)
    if squeeze:
        logits = T.reshape(logits, (logits.shape[-1],))
        attns = [T.reshape(a, a.shape[1:]) for a in attns]
    return logits, attns


def forward_from_tokens(backbone: Backbone, bank: PromptBank, config: PromptConfig,
                        tokens, head: Head | None = None):
    """Prompted forward from precomputed [B, 1+P, d] class+patch rows."""
    n_layers = backbone.cfg.depth
    insertion = config.insertion_layers(n_layers)
    blocks = build_all_layer_prompts(bank, config)
    m_total = config.prompts_per_layer
    attns = []
    carrying_prompts = False
    for i in range(1, n_layers + 1):
        if i in insertion:
            if carrying_prompts:
                tokens = strip_prompts(tokens, m_total)
            tokens = insert(tokens, blocks[i])
            carrying_prompts = m_total > 0
        tokens, attn = encoder_layer(backbone, i, tokens)
        attns.append(attn)
    cls_out = class_output(final_norm(backbone, tokens))
    if head is not None:
        logits = head(cls_out)
    else:
        logits = classify_head(backbone, cls_out)
    return logits, attns


def count_parameters(backbone: Backbone | None, bank: PromptBank | None,
                     head: Head | None):
    """Tuned / total parameter accounting.

    The source-task classifier attached to the backbone is dropped at
    transfer time, so it is excluded from the totals.
    """
    prompt_params = 0
    lll_params = 0
    if bank is not None:
        prompt_params = sum(t.size for t in bank.prompts.values())
        if bank.lll is not None:
            lll_params = bank.lll.size
    head_params = 0
    if head is not None:
        head_params = head.weight.size + head.bias.size
    tuned = prompt_params + lll_params + head_params
    backbone_params = backbone.parameter_count(include_head=False) if backbone else 0
    total = backbone_params + tuned
    percent = 100.0 * tuned / total if total else 0.0
    return {
        "tuned": tuned,
        "total": total,
        "percent": percent,
        "prompts": prompt_params,
        "lll": lll_params,
        "head": head_params,
    }


class PromptedClassifier:
    """Frozen backbone + prompt bank + task head, bundled for training."""

    def __init__(self, backbone: Backbone, config: PromptConfig, num_classes, seed=0):
        if not backbone.frozen:
            raise ConfigError("backbone must be frozen before prompt tuning")
        self.backbone = backbone
        self.config = config
        self.bank = PromptBank(config, backbone.cfg.depth, backbone.cfg.width,
                               backbone.cfg.patch_dim, seed=seed)
        self.head = Head(backbone.cfg.width, num_classes, seed=seed)

    def forward(self, images):
        return tuned_forward(self.backbone, self.bank, self.config, images, self.head)

    def forward_tokens(self, tokens):
        return forward_from_tokens(self.backbone, self.bank, self.config, tokens, self.head)

    def loss(self, images, labels):
        logits, _ = self.forward(images)
        return T.crossentropy(logits, labels)

    def trainable(self):
        named = dict(self.bank.trainable())
        named.update(self.head.trainable())
        return named

    def named_state(self):
        named = dict(self.bank.named_state())
        named.update(self.head.trainable())
        return named

    def parameter_summary(self):
        return count_parameters(self.backbone, self.bank, self.head)
