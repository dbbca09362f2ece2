"""Prompt construction, insertion semantics, and the tuning equivalences."""

import numpy as np
import pytest

from vfpt import spectral, tensor as T
from vfpt.data import TaskSpec, SOURCE_ORIENTATION
from vfpt.errors import ConfigError
from vfpt.prompts import (Head, PromptBank, PromptConfig, PromptedClassifier,
                          build_all_layer_prompts, build_layer_prompts,
                          count_parameters, fll_transform, fourier_count, insert,
                          lll_transform, strip_prompts, tuned_forward)
from vfpt.selftest import check_gradients
from vfpt.tensor import Tensor
from vfpt.training import TrainConfig, Tuner, prepare_task
from tests.test_spectral import brute_dft2_real


def make_bank(config, n_layers=4, width=8, seed=0):
    return PromptBank(config, n_layers, width, patch_dim=16, seed=seed)


def test_fourier_count_rounding():
    assert fourier_count(0.0, 10) == 0
    assert fourier_count(1.0, 10) == 10
    assert fourier_count(0.5, 10) == 5
    assert fourier_count(0.25, 10) == 3  # 2.5 rounds up
    assert fourier_count(0.3, 10) == 3


def test_config_validation():
    with pytest.raises(ConfigError):
        PromptConfig(alpha=1.5)
    with pytest.raises(ConfigError):
        PromptConfig(location="middle")
    with pytest.raises(ConfigError):
        PromptConfig(depth_set=())
    with pytest.raises(ConfigError):
        PromptConfig(variant="shallow", depth_set=(2,)).transform_layers(4)


def test_alpha_zero_returns_raw_tensor():
    config = PromptConfig(prompts_per_layer=6, alpha=0.0, transform="fft")
    bank = make_bank(config)
    out = build_layer_prompts(bank, config, 1)
    assert out is bank.prompts[1]


def test_alpha_one_transforms_every_row():
    config = PromptConfig(prompts_per_layer=4, alpha=1.0, transform="fft")
    bank = make_bank(config)
    out = build_layer_prompts(bank, config, 2)
    expected = brute_dft2_real(bank.prompts[2].data)
    assert np.abs(out.data - expected).max() < 1e-10


def test_partial_transform_prepend_layout():
    config = PromptConfig(prompts_per_layer=10, alpha=0.5, location="prepend",
                          transform="fft", dim_mode="both")
    bank = make_bank(config, width=16)
    raw = bank.prompts[3].data
    out = build_layer_prompts(bank, config, 3).data
    expected_head = brute_dft2_real(raw[:5])
    assert np.abs(out[:5] - expected_head).max() < 1e-10
    assert np.array_equal(out[5:], raw[5:])


def test_partial_transform_append_layout():
    config = PromptConfig(prompts_per_layer=10, alpha=0.5, location="append",
                          transform="fft")
    bank = make_bank(config, width=16)
    raw = bank.prompts[1].data
    out = build_layer_prompts(bank, config, 1).data
    assert np.array_equal(out[:5], raw[5:])
    assert np.abs(out[5:] - brute_dft2_real(raw[:5])).max() < 1e-10


def test_random_location_fixed_by_seed():
    config = PromptConfig(prompts_per_layer=8, alpha=0.25, location="random")
    first = make_bank(config, seed=11).random_offsets
    second = make_bank(config, seed=11).random_offsets
    third = make_bank(config, seed=12).random_offsets
    assert first == second
    assert all(0 <= off <= 6 for off in first.values())
    assert first != third or len(first) == 0


def test_random_location_layout():
    config = PromptConfig(prompts_per_layer=6, alpha=0.5, location="random")
    bank = make_bank(config, width=8, seed=3)
    raw = bank.prompts[2].data
    offset = bank.random_offsets[2]
    out = build_layer_prompts(bank, config, 2).data
    rest = raw[3:]
    transformed = brute_dft2_real(raw[:3])
    assert np.array_equal(out[:offset], rest[:offset])
    assert np.abs(out[offset:offset + 3] - transformed).max() < 1e-10
    assert np.array_equal(out[offset + 3:], rest[offset:])


def test_depth_set_skips_transform_but_keeps_prompts():
    config = PromptConfig(prompts_per_layer=4, alpha=1.0, transform="fft",
                          depth_set=(1, 3))
    bank = make_bank(config, n_layers=4)
    assert build_layer_prompts(bank, config, 2) is bank.prompts[2]
    transformed = build_layer_prompts(bank, config, 3)
    assert not np.array_equal(transformed.data, bank.prompts[3].data)


def test_dim_mode_selects_axis():
    config_seq = PromptConfig(prompts_per_layer=4, alpha=1.0, dim_mode="sequence")
    bank = make_bank(config_seq)
    out = build_layer_prompts(bank, config_seq, 1).data
    expected = spectral.real_dft1(bank.prompts[1].data, spectral.SEQUENCE)
    assert np.abs(out - expected).max() < 1e-12


def test_build_all_matches_per_layer():
    config = PromptConfig(prompts_per_layer=6, alpha=0.5, transform="fft")
    bank = make_bank(config, n_layers=5, width=16)
    blocks = build_all_layer_prompts(bank, config)
    for i in range(1, 6):
        single = build_layer_prompts(bank, config, i)
        assert np.array_equal(blocks[i].data, single.data)


def test_insert_zero_prompts_is_identity():
    tokens = Tensor(np.random.default_rng(0).standard_normal((2, 5, 8)))
    out = insert(tokens, Tensor(np.zeros((0, 8))))
    assert out is tokens


def test_insert_row_arithmetic():
    tokens = Tensor(np.zeros((1 + 16, 8)))
    prompts = Tensor(np.ones((4, 8)))
    out = insert(tokens, prompts)
    assert out.shape == (21, 8)
    assert np.array_equal(out.data[1:5], np.ones((4, 8)))


def test_deep_variant_strips_previous_prompts():
    rng = np.random.default_rng(1)
    tokens = Tensor(rng.standard_normal((2, 1 + 3 + 4, 8)))  # cls + 3 prompts + 4 patches
    stripped = strip_prompts(tokens, 3)
    assert stripped.shape == (2, 5, 8)
    assert np.array_equal(stripped.data[:, 0], tokens.data[:, 0])
    assert np.array_equal(stripped.data[:, 1:], tokens.data[:, 4:])


def test_shallow_insertion_set():
    config = PromptConfig(prompts_per_layer=4, variant="shallow")
    assert config.insertion_layers(6) == (1,)
    config_deep = PromptConfig(prompts_per_layer=4, variant="deep")
    assert config_deep.insertion_layers(6) == (1, 2, 3, 4, 5, 6)


def test_transform_none_equals_vpt_bit_for_bit(frozen_tiny_backbone):
    rng = np.random.default_rng(2)
    image = rng.uniform(0, 1, (2, 1, 8, 8))
    cfg_none = PromptConfig(prompts_per_layer=4, alpha=0.7, transform="none")
    cfg_zero = PromptConfig(prompts_per_layer=4, alpha=0.0, transform="fft")
    head = Head(16, 3, seed=4)
    bank_none = PromptBank(cfg_none, 2, 16, 16, seed=4)
    bank_zero = PromptBank(cfg_zero, 2, 16, 16, seed=4)
    with T.no_grad():
        out_none, _ = tuned_forward(frozen_tiny_backbone, bank_none, cfg_none, image, head)
        out_zero, _ = tuned_forward(frozen_tiny_backbone, bank_zero, cfg_zero, image, head)
    assert np.array_equal(out_none.data, out_zero.data)


def test_tuned_forward_gradients(frozen_tiny_backbone):
    rng = np.random.default_rng(3)
    image = rng.uniform(0, 1, (2, 1, 8, 8))
    labels = np.array([0, 2])
    config = PromptConfig(prompts_per_layer=3, alpha=1.0, transform="lll")
    model = PromptedClassifier(frozen_tiny_backbone, config, 3, seed=5)
    tensors = list(model.trainable().values())
    worst = check_gradients(lambda: model.loss(image, labels), tensors)
    assert worst < 1e-4


def test_gradients_reach_only_trainables(frozen_tiny_backbone):
    rng = np.random.default_rng(4)
    image = rng.uniform(0, 1, (1, 1, 8, 8))
    config = PromptConfig(prompts_per_layer=2, alpha=0.5, transform="fft")
    model = PromptedClassifier(frozen_tiny_backbone, config, 3, seed=6)
    T.backward(model.loss(image, np.array([1])))
    for t in frozen_tiny_backbone.params.values():
        assert t.grad is None
    for t in model.trainable().values():
        assert t.grad is not None
        t.zero_grad()


def test_count_parameters_vit_base_arithmetic():
    # deep: 12 layers x 10 prompts x 768 dims; shallow: one layer
    deep = PromptConfig(prompts_per_layer=10, variant="deep")
    bank = PromptBank(deep, 12, 768, patch_dim=768, seed=0)
    counts = count_parameters(None, bank, None)
    assert counts["prompts"] == 92_160
    assert counts["tuned"] == 92_160

    shallow = PromptConfig(prompts_per_layer=10, variant="shallow")
    bank_s = PromptBank(shallow, 12, 768, patch_dim=768, seed=0)
    assert count_parameters(None, bank_s, None)["prompts"] == 7_680


def test_count_parameters_zero_case():
    counts = count_parameters(None, None, None)
    assert counts["tuned"] == 0 and counts["percent"] == 0.0


def test_count_parameters_with_backbone_and_head(frozen_tiny_backbone):
    config = PromptConfig(prompts_per_layer=4, transform="lll")
    bank = PromptBank(config, 2, 16, 16, seed=0)
    head = Head(16, 3, seed=0)
    counts = count_parameters(frozen_tiny_backbone, bank, head)
    assert counts["prompts"] == 2 * 4 * 16
    assert counts["lll"] == 16 * 16
    assert counts["head"] == 16 * 3 + 3
    assert counts["tuned"] == counts["prompts"] + counts["lll"] + counts["head"]
    assert counts["total"] == counts["tuned"] + frozen_tiny_backbone.parameter_count(
        include_head=False)
    assert 0 < counts["percent"] < 100


def test_fll_lll_identity_and_zero():
    block = Tensor(np.random.default_rng(5).standard_normal((3, 6)))
    eye = Tensor(np.eye(6))
    assert np.allclose(fll_transform(block, eye).data, block.data, atol=1e-15)
    zeros = Tensor(np.zeros((2, 6)))
    w = Tensor(np.random.default_rng(6).standard_normal((6, 6)))
    assert np.array_equal(lll_transform(zeros, w).data, np.zeros((2, 6)))


def test_lll_weight_gradient():
    rng = np.random.default_rng(7)
    block = Tensor(rng.uniform(-1, 1, (3, 6)), requires_grad=True)
    w = Tensor(rng.uniform(-1, 1, (6, 6)), requires_grad=True)
    probe = Tensor(rng.uniform(-1, 1, (3, 6)))
    assert check_gradients(
        lambda: T.tsum(T.mul(lll_transform(block, w), probe)), [block, w]) < 1e-5


def test_fll_is_frozen_lll_is_trainable():
    cfg_fll = PromptConfig(prompts_per_layer=2, transform="fll")
    cfg_lll = PromptConfig(prompts_per_layer=2, transform="lll")
    bank_f = make_bank(cfg_fll)
    bank_l = make_bank(cfg_lll)
    assert bank_f.fll is not None and not bank_f.fll.requires_grad
    assert "prompt.fll" not in bank_f.trainable()
    assert "prompt.fll" in bank_f.named_state()
    assert bank_l.lll is not None and bank_l.lll.requires_grad
    assert "prompt.lll" in bank_l.trainable()


def test_vpt_equivalence_over_training(frozen_tiny_backbone):
    """(alpha=0, fft) and (transform=none) follow identical trajectories."""
    spec = TaskSpec("equiv", SOURCE_ORIENTATION, num_classes=3, train_count=24,
                    val_count=6, test_count=6, image_size=8, noise_std=0.1, seed=1)
    task = prepare_task(spec)
    train_cfg = TrainConfig(epochs=5, batch_size=8, base_lr=0.2,
                            weight_decay=1e-4, warmup_epochs=1)
    losses = {}
    for label, (alpha, transform) in (("a", (0.0, "fft")), ("b", (0.0, "none"))):
        cfg = PromptConfig(prompts_per_layer=4, alpha=alpha, transform=transform)
        tuner = Tuner(frozen_tiny_backbone, task, cfg, train_cfg, seed=3)
        record = tuner.run()
        losses[label] = record.train_loss
    assert losses["a"] == losses["b"]


def test_freeze_partition_after_training(frozen_tiny_backbone):
    """Exactly the prompts, head, and LLL weight change during tuning."""
    spec = TaskSpec("partition", SOURCE_ORIENTATION, num_classes=3, train_count=16,
                    val_count=4, test_count=4, image_size=8, noise_std=0.1, seed=2)
    task = prepare_task(spec)
    config = PromptConfig(prompts_per_layer=3, alpha=0.5, transform="lll")
    train_cfg = TrainConfig(epochs=3, batch_size=8, base_lr=0.2,
                            weight_decay=1e-4, warmup_epochs=1)
    tuner = Tuner(frozen_tiny_backbone, task, config, train_cfg, seed=4)
    before = {name: t.data.copy() for name, t in tuner.model.named_state().items()}
    backbone_before = frozen_tiny_backbone.checksum()
    tuner.run()
    changed = {name for name, t in tuner.model.named_state().items()
               if not np.array_equal(before[name], t.data)}
    expected = set(tuner.model.trainable())
    assert changed == expected
    assert frozen_tiny_backbone.checksum() == backbone_before
