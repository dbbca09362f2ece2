"""Encoder structure, embedding arithmetic, and the freeze contract."""

import numpy as np
import pytest

from vfpt import tensor as T
from vfpt.backbone import (Backbone, BackboneConfig, embed, encoder_layer,
                           pretrain_forward)
from vfpt.errors import ConfigError, ShapeError
from vfpt.prompts import insert
from vfpt.selftest import check_gradients
from vfpt.tensor import Tensor


def test_config_divisibility_checks():
    with pytest.raises(ConfigError):
        BackboneConfig(image_size=30, patch_size=8)
    with pytest.raises(ConfigError):
        BackboneConfig(width=66, heads=4)


def test_embed_token_count():
    cfg = BackboneConfig()
    backbone = Backbone(cfg, seed=0)
    out = embed(backbone, np.zeros((1, 32, 32)))
    assert out.shape == (16, cfg.width)


def test_embed_zero_image_gives_position_embeddings():
    cfg = BackboneConfig()
    backbone = Backbone(cfg, seed=0)
    out = embed(backbone, np.zeros((1, 32, 32)))
    assert np.array_equal(out.data, backbone.params["embed.pos"].data)


def test_embed_deterministic():
    cfg = BackboneConfig()
    backbone = Backbone(cfg, seed=0)
    img = np.random.default_rng(0).uniform(0, 1, (1, 32, 32))
    a = embed(backbone, img).data
    b = embed(backbone, img).data
    assert np.array_equal(a, b)


def test_embed_rejects_wrong_size():
    backbone = Backbone(BackboneConfig(), seed=0)
    with pytest.raises(ShapeError):
        embed(backbone, np.zeros((1, 16, 16)))


def test_attention_rows_sum_to_one():
    backbone = Backbone(BackboneConfig(), seed=1)
    rng = np.random.default_rng(2)
    tokens = Tensor(rng.standard_normal((5, 17, 64)))
    _, attn = encoder_layer(backbone, 1, tokens)
    sums = attn.data.sum(axis=-1)
    assert np.abs(sums - 1.0).max() < 1e-12


def test_token_count_with_prompts_inserted():
    # 196 patches, 10 prompts, 1 class token -> 207 rows into each layer
    d = 8
    tokens = Tensor(np.zeros((1 + 196, d)))
    prompts = Tensor(np.zeros((10, d)))
    assert insert(tokens, prompts).shape == (207, d)


def test_encoder_layer_gradient():
    cfg = BackboneConfig(image_size=8, patch_size=4, channels=1, depth=1,
                         width=8, heads=2, num_classes_pretrain=2)
    backbone = Backbone(cfg, seed=3)
    rng = np.random.default_rng(4)
    x = Tensor(rng.uniform(-1, 1, (3, 8)), requires_grad=True)
    w = Tensor(rng.uniform(-1, 1, (3, 8)))

    def build():
        out, _ = encoder_layer(backbone, 1, x)
        return T.tsum(T.mul(out, w))

    assert check_gradients(build, [x], h=1e-6) < 1e-5


def test_untrained_crossentropy_near_uniform_baseline():
    cfg = BackboneConfig()
    backbone = Backbone(cfg, seed=5)
    rng = np.random.default_rng(6)
    images = rng.uniform(0, 1, (64, 1, 32, 32))
    labels = rng.integers(0, cfg.num_classes_pretrain, 64)
    with T.no_grad():
        logits = pretrain_forward(backbone, images)
        loss = T.crossentropy(logits, labels).item()
    assert abs(loss - np.log(cfg.num_classes_pretrain)) < 0.1


def test_logits_shape():
    cfg = BackboneConfig()
    backbone = Backbone(cfg, seed=7)
    with T.no_grad():
        logits = pretrain_forward(backbone, np.zeros((1, 32, 32)))
    assert logits.shape == (cfg.num_classes_pretrain,)


def test_freeze_blocks_parameter_drift(frozen_tiny_backbone):
    # gradients through a frozen backbone must not allocate or change anything
    backbone = frozen_tiny_backbone
    checksum = backbone.checksum()
    rng = np.random.default_rng(8)
    x = Tensor(rng.uniform(0, 1, (2, 1, 8, 8)))
    head = Tensor(rng.standard_normal((16, 3)), requires_grad=True)
    for _ in range(3):
        tokens = embed(backbone, x)
        out, _ = encoder_layer(backbone, 1, tokens)
        logits = T.matmul(out, head)
        loss = T.crossentropy(T.reshape(T.tslice(logits, 1, 0, 1), (2, 3)),
                              np.array([0, 1]))
        T.backward(loss)
        head.data -= 0.1 * head.grad
        head.zero_grad()
    assert all(t.grad is None for t in backbone.params.values())
    assert backbone.checksum() == checksum


def test_checksum_sensitive_to_any_tensor():
    backbone = Backbone(BackboneConfig(image_size=8, patch_size=4, width=16,
                                       heads=2, depth=1), seed=9)
    before = backbone.checksum()
    backbone.params["layer1.mlp.fc2.bias"].data[0] += 1e-9
    assert backbone.checksum() != before
