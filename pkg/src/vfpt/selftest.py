"""Built-in verification suites behind the `selftest` command.

Four suites: the FFT-versus-reference oracle, finite-difference gradient
checks, the adjoint dot-product identity for the real-part transforms,
and the zero-fraction equivalence between transformed and plain prompt
tuning. Each returns (name, passed, detail) and the runner prints one
line per suite.
"""

from __future__ import annotations

import numpy as np

from . import spectral
from . import tensor as T
from .backbone import Backbone, BackboneConfig
from .data import TaskSpec, SOURCE_ORIENTATION
from .prompts import PromptConfig
from .tensor import Tensor
from .training import TrainConfig, Tuner, prepare_task


def finite_difference(loss_fn, tensor, h=1e-5):
    """Central-difference gradient of a scalar function of one tensor."""
    grad = np.zeros_like(tensor.data)
    flat = tensor.data.reshape(-1)
    out = grad.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + h
        with T.no_grad():
            up = loss_fn()
        flat[i] = orig - h
        with T.no_grad():
            down = loss_fn()
        flat[i] = orig
        out[i] = (up - down) / (2.0 * h)
    return grad


def gradient_error(analytic, numeric):
    """Max absolute difference normalized by the gradient's magnitude."""
    scale = max(np.abs(numeric).max(), np.abs(analytic).max(), 1e-12)
    return float(np.abs(analytic - numeric).max() / scale)


def check_gradients(build_loss, tensors, h=1e-5):
    """FD-check every tensor feeding `build_loss`; returns worst error."""
    loss = build_loss()
    T.backward(loss)
    analytic = {id(t): t.grad.copy() for t in tensors}
    for t in tensors:
        t.zero_grad()
    worst = 0.0
    for t in tensors:
        numeric = finite_difference(lambda: build_loss().item(), t, h=h)
        worst = max(worst, gradient_error(analytic[id(t)], numeric))
    return worst


def fft_oracle_suite(cases=200, seed=0):
    rng = np.random.default_rng((seed, 0xFF7))
    worst_fft = worst_inv = worst_parseval = 0.0
    for _ in range(cases):
        n = int(rng.integers(1, 65))
        buf = spectral.ComplexBuffer(rng.uniform(-1, 1, n), rng.uniform(-1, 1, n))
        fast = spectral.fft(buf)
        ref = spectral.dft_naive(buf)
        worst_fft = max(worst_fft,
                        np.abs(fast.re - ref.re).max(), np.abs(fast.im - ref.im).max())
        back = spectral.ifft(fast)
        worst_inv = max(worst_inv,
                        np.abs(back.re - buf.re).max(), np.abs(back.im - buf.im).max())
        power_in = float((buf.re ** 2 + buf.im ** 2).sum())
        power_out = float((fast.re ** 2 + fast.im ** 2).sum())
        worst_parseval = max(worst_parseval,
                             abs(power_out - n * power_in) / max(n * power_in, 1e-12))
    passed = worst_fft < 1e-10 and worst_inv < 1e-10 and worst_parseval < 1e-8
    return ("fft-oracle", passed,
            f"fft-vs-reference {worst_fft:.2e}, inverse {worst_inv:.2e}, "
            f"parseval {worst_parseval:.2e}")


def adjoint_suite(pairs=100, seed=0):
    rng = np.random.default_rng((seed, 0xAD0))
    worst = 0.0
    for k in range(pairs):
        m = int(rng.integers(1, 17))
        d = int(rng.integers(1, 65))
        p = Tensor(rng.uniform(-1, 1, (m, d)), requires_grad=True)
        g = rng.uniform(-1, 1, (m, d))
        if k % 3 == 0:
            out = spectral.fourier2d_real(p)
        elif k % 3 == 1:
            out = spectral.fourier1d_real(p, spectral.SEQUENCE)
        else:
            out = spectral.fourier1d_real(p, spectral.HIDDEN)
        loss = T.tsum(T.mul(out, Tensor(g)))
        T.backward(loss)
        lhs = float((g * out.data).sum())
        rhs = float((p.grad * p.data).sum())
        worst = max(worst, abs(lhs - rhs))
    return ("adjoint", worst < 1e-10, f"max dot-product gap {worst:.2e}")


def gradient_suite(seed=0):
    rng = np.random.default_rng((seed, 0x93AD))
    worst = {}

    a = Tensor(rng.uniform(-1, 1, (4, 5)), requires_grad=True)
    b = Tensor(rng.uniform(-1, 1, (5, 2)), requires_grad=True)
    worst["matmul"] = check_gradients(
        lambda: T.tsum(T.mul(T.matmul(a, b), T.matmul(a, b))), [a, b])

    x = Tensor(rng.uniform(-1, 1, 7), requires_grad=True)
    w = Tensor(rng.uniform(-1, 1, 7))
    worst["softmax"] = check_gradients(
        lambda: T.tsum(T.mul(T.softmax(x), w)), [x])

    xs = Tensor(rng.uniform(-1, 1, (3, 8)), requires_grad=True)
    gain = Tensor(rng.uniform(0.5, 1.5, 8), requires_grad=True)
    bias = Tensor(rng.uniform(-0.5, 0.5, 8), requires_grad=True)
    wl = Tensor(rng.uniform(-1, 1, (3, 8)))
    worst["layernorm"] = check_gradients(
        lambda: T.tsum(T.mul(T.layernorm(xs, gain, bias), wl)), [xs, gain, bias])

    xg = Tensor(rng.uniform(-2, 2, (4, 6)), requires_grad=True)
    wg = Tensor(rng.uniform(-1, 1, (4, 6)))
    worst["gelu"] = check_gradients(lambda: T.tsum(T.mul(T.gelu(xg), wg)), [xg])

    logits = Tensor(rng.uniform(-1, 1, (5, 4)), requires_grad=True)
    labels = rng.integers(0, 4, 5)
    worst["crossentropy"] = check_gradients(
        lambda: T.crossentropy(logits, labels), [logits])

    u = Tensor(rng.uniform(-1, 1, (2, 3)), requires_grad=True)
    v = Tensor(rng.uniform(-1, 1, (2, 2)), requires_grad=True)
    wc = Tensor(rng.uniform(-1, 1, (2, 3)))
    worst["concat-slice"] = check_gradients(
        lambda: T.tsum(T.mul(T.tslice(T.concat([u, v], axis=1), 1, 1, 3), wc)), [u, v])

    xl = Tensor(rng.uniform(-1, 1, (3, 4, 5)), requires_grad=True)
    wl2 = Tensor(rng.uniform(-1, 1, (5, 6)), requires_grad=True)
    bl = Tensor(rng.uniform(-1, 1, 6), requires_grad=True)
    wl3 = Tensor(rng.uniform(-1, 1, (3, 4, 6)))
    worst["linear"] = check_gradients(
        lambda: T.tsum(T.mul(T.linear(xl, wl2, bl), wl3)), [xl, wl2, bl])

    p2 = Tensor(rng.uniform(-1, 1, (3, 8)), requires_grad=True)
    wp = Tensor(rng.uniform(-1, 1, (3, 8)))
    worst["fourier2d"] = check_gradients(
        lambda: T.tsum(T.mul(spectral.fourier2d_real(p2), wp)), [p2])

    bad = {k: v for k, v in worst.items() if v >= 1e-6}
    detail = ", ".join(f"{k} {v:.2e}" for k, v in sorted(worst.items()))
    return ("gradient-check", not bad, detail)


def _tiny_setup(alpha, transform, seed=0):
    cfg = BackboneConfig(image_size=8, patch_size=4, channels=1, depth=2,
                         width=16, heads=2, num_classes_pretrain=3)
    backbone = Backbone(cfg, seed=seed)
    backbone.freeze()
    spec = TaskSpec("selftest", SOURCE_ORIENTATION, num_classes=3, train_count=24,
                    val_count=6, test_count=6, image_size=8, noise_std=0.1, seed=seed)
    task = prepare_task(spec)
    prompt_cfg = PromptConfig(prompts_per_layer=4, alpha=alpha, transform=transform)
    train_cfg = TrainConfig(epochs=10, batch_size=8, base_lr=0.2,
                            weight_decay=1e-4, warmup_epochs=1)
    return backbone, task, prompt_cfg, train_cfg


def equivalence_suite(seed=0):
    """alpha=0 with the transform enabled must be plain prompt tuning exactly."""
    losses = {}
    logits = {}
    for label, (alpha, transform) in (("fourier", (0.0, "fft")),
                                      ("plain", (0.0, "none"))):
        backbone, task, prompt_cfg, train_cfg = _tiny_setup(alpha, transform, seed)
        tuner = Tuner(backbone, task, prompt_cfg, train_cfg, seed=seed)
        record = tuner.run()
        losses[label] = list(record.train_loss)
        tokens, labels_, forward = tuner._forward_split("val")
        with T.no_grad():
            logits[label] = forward(tokens).data.copy()
    same_losses = losses["fourier"] == losses["plain"]
    same_logits = np.array_equal(logits["fourier"], logits["plain"])
    detail = ("losses identical" if same_losses else "losses differ") + ", " + \
        ("logits identical" if same_logits else "logits differ")
    return ("alpha-zero-equivalence", same_losses and same_logits, detail)


def run_all(log=print):
    suites = [fft_oracle_suite, gradient_suite, adjoint_suite, equivalence_suite]
    all_ok = True
    for suite in suites:
        name, ok, detail = suite()
        all_ok &= ok
        log(f"[{'PASS' if ok else 'FAIL'}] {name}: {detail}")
    return all_ok
