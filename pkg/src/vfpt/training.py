"""Pretrain-then-finetune driver: optimizer, schedule, grid search, sweeps.

Runs are pure functions of (config, seed): the data order, every
initialization, and therefore the whole loss curve reproduce bit for bit.
A run whose loss goes non-finite is terminated and marked diverged;
divergence is expected for the largest grid learning rates and such cells
are excluded from hyperparameter selection.
"""

from __future__ import annotations

import time
from dataclasses import dataclass, field, replace

import numpy as np

from . import tensor as T
from .backbone import Backbone, BackboneConfig, pretrain_forward
from .data import Dataset, Splits, TaskSpec, compute_stats, generate, normalize
from .errors import ConfigError
from .prompts import PromptConfig, PromptedClassifier, input_tokens
from .tensor import Tensor

DESK_LR_GRID = (1.0, 0.5, 0.1, 0.05)
DESK_WD_GRID = (0.0001, 0.0)


@dataclass
class TrainConfig:
    epochs: int = 100
    batch_size: int = 32
    base_lr: float = 0.5
    weight_decay: float = 0.0001
    lr_grid: tuple = DESK_LR_GRID
    wd_grid: tuple = DESK_WD_GRID
    seeds: tuple = (0, 1, 2, 3, 4)
    warmup_epochs: int = 10
    momentum: float = 0.9

    def __post_init__(self):
        if self.base_lr <= 0:
            raise ConfigError(f"base_lr must be positive, got {self.base_lr}")
        if self.epochs <= 0 or self.batch_size <= 0:
            raise ConfigError("epochs and batch_size must be positive")
        if self.warmup_epochs < 0 or self.warmup_epochs >= self.epochs:
            raise ConfigError(
                f"warmup_epochs must lie in [0, epochs), got {self.warmup_epochs}")
        if self.weight_decay < 0:
            raise ConfigError("weight_decay must be nonnegative")


@dataclass
class RunRecord:
    train_loss: list = field(default_factory=list)   # one entry per epoch
    val_accuracy: list = field(default_factory=list)
    test_accuracy: float = float("nan")
    batch_time: float = float("nan")                  # seconds, median
    peak_memory: int = 0                              # bytes, estimate
    lr: float = float("nan")
    weight_decay: float = float("nan")
    seed: int = 0
    diverged: bool = False

    def final_val_accuracy(self):
        return self.val_accuracy[-1] if self.val_accuracy else float("nan")


def cosine_lr(step, total_steps, base_lr, warmup_steps):
    """Linear warmup to base_lr, then cosine decay to zero."""
    if not 0 <= step <= total_steps:
        raise ConfigError(f"step {step} outside [0, {total_steps}]")
    if warmup_steps > 0 and step < warmup_steps:
        return base_lr * step / warmup_steps
    if total_steps == warmup_steps:
        return base_lr
    progress = (step - warmup_steps) / (total_steps - warmup_steps)
    return base_lr * 0.5 * (1.0 + np.cos(np.pi * progress))


class SGD:
    """Momentum SGD with decoupled weight decay over named tensors."""

    def __init__(self, params, momentum=0.9, weight_decay=0.0):
        self.params = dict(params)
        self.momentum = momentum
        self.weight_decay = weight_decay
        self.velocity = {n: np.zeros_like(t.data) for n, t in self.params.items()}

    def step(self, lr):
        for name, t in self.params.items():
            g = t.grad
            if g is None:
                g = 0.0
            v = self.velocity[name]
            v *= self.momentum
            v += g
            t.data -= lr * v
            if self.weight_decay:
                t.data -= lr * self.weight_decay * t.data
            t.zero_grad()


def sgd_step(params, lr, weight_decay=0.0, momentum_state=None, momentum=0.9):
    """One optimizer step over named tensors whose `.grad` is populated."""
    if momentum_state is None:
        momentum_state = {n: np.zeros_like(t.data) for n, t in params.items()}
    for name, t in params.items():
        g = t.grad if t.grad is not None else 0.0
        v = momentum_state[name]
        v *= momentum
        v += g
        t.data -= lr * v
        if weight_decay:
            t.data -= lr * weight_decay * t.data
        t.zero_grad()
    return momentum_state


@dataclass
class Task:
    """A generated task with the fixed source-task normalization applied."""

    spec: TaskSpec
    splits: Splits
    mean: np.ndarray
    std: np.ndarray

    @property
    def num_classes(self):
        return self.spec.num_classes

    def normalized(self, dataset: Dataset):
        return normalize(dataset.images, self.mean, self.std), dataset.labels


def prepare_task(spec: TaskSpec, stats=None) -> Task:
    """Generate a task; `stats` fixes the normalization constants.

    When `stats` is None (the source task) the constants are computed from
    the task's own train split and reused for every target task.
    """
    splits = generate(spec)
    if stats is None:
        stats = compute_stats(splits.train.images)
    return Task(spec, splits, stats[0], stats[1])


def _batches(n, batch_size, rng):
    order = rng.permutation(n)
    for lo in range(0, n, batch_size):
        yield order[lo:lo + batch_size]


def evaluate_logits(forward, images, labels, batch_size=100):
    correct = 0
    losses = []
    with T.no_grad():
        for lo in range(0, images.shape[0], batch_size):
            x = images[lo:lo + batch_size]
            y = labels[lo:lo + batch_size]
            logits = forward(x)
            losses.append(T.crossentropy(logits, y).item() * len(y))
            correct += int((logits.data.argmax(axis=1) == y).sum())
    n = images.shape[0]
    return correct / n, sum(losses) / n


def pretrain(task: Task, backbone_cfg: BackboneConfig, train_cfg: TrainConfig, seed=0,
             log=None):
    """Train a fresh backbone on the source task and freeze it."""
    backbone = Backbone(backbone_cfg, seed=seed)
    opt = SGD(backbone.params, momentum=train_cfg.momentum,
              weight_decay=train_cfg.weight_decay)
    xtr, ytr = task.normalized(task.splits.train)
    xva, yva = task.normalized(task.splits.val)
    n = xtr.shape[0]
    steps_per_epoch = (n + train_cfg.batch_size - 1) // train_cfg.batch_size
    total = train_cfg.epochs * steps_per_epoch
    warmup = train_cfg.warmup_epochs * steps_per_epoch
    record = RunRecord(lr=train_cfg.base_lr, weight_decay=train_cfg.weight_decay, seed=seed)
    data_rng = np.random.default_rng((int(seed), 0xBA7C))
    step = 0
    for epoch in range(train_cfg.epochs):
        epoch_loss = 0.0
        for idx in _batches(n, train_cfg.batch_size, data_rng):
            logits = pretrain_forward(backbone, xtr[idx])
            loss = T.crossentropy(logits, ytr[idx])
            value = loss.item()
            if not np.isfinite(value):
                record.diverged = True
                backbone.freeze()
                return backbone, record
            T.backward(loss)
            opt.step(cosine_lr(step, total, train_cfg.base_lr, warmup))
            epoch_loss += value * len(idx)
            step += 1
        record.train_loss.append(epoch_loss / n)
        acc, _ = evaluate_logits(lambda x: pretrain_forward(backbone, x), xva, yva)
        record.val_accuracy.append(acc)
        if log:
            log(f"pretrain epoch {epoch + 1}/{train_cfg.epochs} "
                f"loss {record.train_loss[-1]:.4f} val acc {acc:.3f}")
    backbone.freeze()
    return backbone, record


class Tuner:
    """Prompt-tunes a frozen backbone on one task."""

    def __init__(self, backbone: Backbone, task: Task, prompt_cfg: PromptConfig,
                 train_cfg: TrainConfig, seed=0):
        if not backbone.frozen:
            raise ConfigError("backbone must be frozen before tuning")
        self.backbone = backbone
        self.task = task
        self.prompt_cfg = prompt_cfg
        self.train_cfg = train_cfg
        self.seed = int(seed)
        self.model = PromptedClassifier(backbone, prompt_cfg, task.num_classes, seed=seed)
        # the backbone is frozen, so class+patch rows per example are fixed
        self._tokens = {}
        for name, split_data in (("train", task.splits.train),
                                 ("val", task.splits.val),
                                 ("test", task.splits.test)):
            images, labels = task.normalized(split_data)
            with T.no_grad():
                tokens, _ = input_tokens(backbone, images)
            self._tokens[name] = (tokens.data, labels)

    def _forward_split(self, name):
        tokens, labels = self._tokens[name]

        def forward(x):
            logits, _ = self.model.forward_tokens(Tensor(x))
            return logits

        return tokens, labels, forward

    def evaluate(self, split="val"):
        tokens, labels, forward = self._forward_split(split)
        return evaluate_logits(forward, tokens, labels)

    def run(self, log=None, time_batches=False):
        cfg = self.train_cfg
        tokens, labels = self._tokens["train"]
        n = tokens.shape[0]
        steps_per_epoch = (n + cfg.batch_size - 1) // cfg.batch_size
        total = cfg.epochs * steps_per_epoch
        warmup = cfg.warmup_epochs * steps_per_epoch
        opt = SGD(self.model.trainable(), momentum=cfg.momentum,
                  weight_decay=cfg.weight_decay)
        record = RunRecord(lr=cfg.base_lr, weight_decay=cfg.weight_decay, seed=self.seed)
        data_rng = np.random.default_rng((self.seed, 0xBA7C))
        step = 0
        times = []
        for epoch in range(cfg.epochs):
            epoch_loss = 0.0
            for idx in _batches(n, cfg.batch_size, data_rng):
                t0 = time.perf_counter() if time_batches else 0.0
                logits, _ = self.model.forward_tokens(Tensor(tokens[idx]))
                loss = T.crossentropy(logits, labels[idx])
                value = loss.item()
                if not np.isfinite(value):
                    record.diverged = True
                    record.train_loss.append(float("nan"))
                    record.val_accuracy.append(float("nan"))
                    return record
                T.backward(loss)
                opt.step(cosine_lr(step, total, cfg.base_lr, warmup))
                if time_batches:
                    times.append(time.perf_counter() - t0)
                epoch_loss += value * len(idx)
                step += 1
            record.train_loss.append(epoch_loss / n)
            acc, _ = self.evaluate("val")
            record.val_accuracy.append(acc)
            if log:
                log(f"tune epoch {epoch + 1}/{cfg.epochs} "
                    f"loss {record.train_loss[-1]:.4f} val acc {acc:.3f}")
        record.test_accuracy, _ = self.evaluate("test")
        if times:
            record.batch_time = float(np.median(times))
        return record


def tune(backbone, task, prompt_cfg, train_cfg, seed=0, log=None):
    tuner = Tuner(backbone, task, prompt_cfg, train_cfg, seed=seed)
    record = tuner.run(log=log)
    return tuner.model, record


def grid_search(backbone, task, prompt_cfg, train_cfg, seed=0, log=None):
    """One tuning run per (lr, wd) cell; select by val accuracy.

    Ties break toward the smaller learning rate, then the smaller weight
    decay. Diverged cells are recorded but never selected.
    """
    if not train_cfg.lr_grid or not train_cfg.wd_grid:
        raise ConfigError("grid search needs nonempty lr and wd grids")
    cells = []
    for lr in train_cfg.lr_grid:
        for wd in train_cfg.wd_grid:
            cfg = replace(train_cfg, base_lr=lr, weight_decay=wd)
            record = Tuner(backbone, task, prompt_cfg, cfg, seed=seed).run()
            cells.append(record)
            if log:
                status = "diverged" if record.diverged else \
                    f"val acc {record.final_val_accuracy():.3f}"
                log(f"grid lr={lr} wd={wd}: {status}")
    alive = [r for r in cells if not r.diverged]
    if not alive:
        raise ConfigError("every grid cell diverged")
    best = min(alive, key=lambda r: (-r.final_val_accuracy(), r.lr, r.weight_decay))
    return (best.lr, best.weight_decay), cells


def alpha_sweep(backbone, task, prompt_cfg, train_cfg, alphas, seeds, log=None,
                run_fn=None):
    """One tuned run per (alpha, seed); returns per-run rows plus a summary.

    Every alpha must land on an integer prompt count for the configured M.
    """
    m_total = prompt_cfg.prompts_per_layer
    for alpha in alphas:
        if abs(alpha * m_total - round(alpha * m_total)) > 1e-9:
            raise ConfigError(
                f"alpha {alpha} does not yield an integer count for M={m_total}")
    rows = []
    for alpha in alphas:
        cfg_a = replace(prompt_cfg, alpha=float(alpha))
        for seed in seeds:
            if run_fn is not None:
                record = run_fn(cfg_a, int(seed))
            else:
                record = Tuner(backbone, task, cfg_a, train_cfg, seed=int(seed)).run()
            rows.append({
                "alpha": float(alpha),
                "seed": int(seed),
                "val_accuracy": record.final_val_accuracy(),
                "test_accuracy": record.test_accuracy,
            })
            if log:
                log(f"sweep alpha={alpha} seed={seed}: "
                    f"val acc {rows[-1]['val_accuracy']:.3f}")
    summary = []
    for alpha in alphas:
        vals = [r["val_accuracy"] for r in rows if r["alpha"] == float(alpha)]
        summary.append({
            "alpha": float(alpha),
            "mean_val_accuracy": float(np.mean(vals)),
            "std_val_accuracy": float(np.std(vals, ddof=1)) if len(vals) > 1 else 0.0,
            "runs": len(vals),
        })
    return rows, summary


def timing_harness(backbone, task, prompt_cfg, train_cfg, seed=0, warm_batches=50):
    """Median per-batch train/inference times plus a peak-memory estimate.

    Memory is measured by live tensor-buffer accounting during one
    training batch and reported both exactly and at MiB granularity (the
    headline figure, below which allocator-level jitter is not
    meaningful).
    """
    tuner = Tuner(backbone, task, prompt_cfg, train_cfg, seed=seed)
    tokens, labels = tuner._tokens["train"]
    bs = train_cfg.batch_size
    idx = np.arange(min(bs, tokens.shape[0]))
    opt = SGD(tuner.model.trainable(), momentum=train_cfg.momentum,
              weight_decay=train_cfg.weight_decay)

    def train_batch():
        logits, _ = tuner.model.forward_tokens(Tensor(tokens[idx]))
        loss = T.crossentropy(logits, labels[idx])
        T.backward(loss)
        opt.step(0.0)  # measure update cost without moving parameters

    def infer_batch():
        with T.no_grad():
            logits, _ = tuner.model.forward_tokens(Tensor(tokens[idx]))
        return logits

    # memory phase: account live tensor bytes across one full train step
    T.meter.enable()
    train_batch()
    peak = T.meter.peak
    T.meter.disable()

    for _ in range(5):
        train_batch()
        infer_batch()
    train_times = []
    infer_times = []
    for _ in range(warm_batches):
        t0 = time.perf_counter()
        train_batch()
        train_times.append(time.perf_counter() - t0)
        t0 = time.perf_counter()
        infer_batch()
        infer_times.append(time.perf_counter() - t0)
    mib = 1 << 20
    return {
        "train_batch_seconds": float(np.median(train_times)),
        "infer_batch_seconds": float(np.median(infer_times)),
        "peak_memory_bytes": int(peak),
        "peak_memory_mib": int(-(-peak // mib)),
    }
