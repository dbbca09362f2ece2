"""Loss landscapes and Hessian extreme-eigenvalue maps around a tuned model.

Tunes plain-prompt and all-Fourier models on the same task, then compares
the loss surface over two filter-normalized random directions and the
convexity fraction of the extreme-eigenvalue ratio map.
"""

import os

from vfpt import BackboneConfig, PromptConfig, TaskSpec, TrainConfig, Tuner
from vfpt import io as vio
from vfpt.analysis import ModelProbe, convexity_map, landscape, random_directions
from vfpt.data import FREQUENCY_BAND, SOURCE_ORIENTATION
from vfpt.training import prepare_task, pretrain

HERE = os.path.dirname(os.path.abspath(__file__))

source = prepare_task(TaskSpec("source", SOURCE_ORIENTATION, num_classes=4,
                               noise_std=0.1, seed=100))
backbone, _ = pretrain(source, BackboneConfig(),
                       TrainConfig(epochs=12, warmup_epochs=2, base_lr=0.2,
                                   weight_decay=1e-4), seed=0)
target = prepare_task(TaskSpec("freq", FREQUENCY_BAND, num_classes=4,
                               noise_std=0.2, seed=200),
                      stats=(source.mean, source.std))

for label, alpha in (("plain", 0.0), ("fourier", 1.0)):
    config = PromptConfig(prompts_per_layer=10, alpha=alpha, transform="fft")
    tuner = Tuner(backbone, target, config,
                  TrainConfig(epochs=10, warmup_epochs=1, base_lr=0.25,
                              weight_decay=1e-4), seed=0)
    record = tuner.run()
    tokens, labels = tuner._tokens["train"]
    probe = ModelProbe(tuner.model, tokens, labels, subset=64, seed=0)
    dir1, dir2 = random_directions(probe.space, seed=0)

    grid = landscape(probe, dir1, dir2, resolution=11)
    surface = grid.values["value"]
    path = os.path.join(HERE, f"landscape_{label}.csv")
    vio.write_grid_csv(path, grid)
    print(f"{label}: val acc {record.final_val_accuracy():.3f}; "
          f"center loss {surface[5, 5]:.4f}, edge mean {surface[[0, -1], :].mean():.4f} "
          f"-> {path}")

    ratio_grid, fraction = convexity_map(probe, dir1, dir2, resolution=3,
                                         tau=0.01, tol=1e-2, maxiter=8, seed=0)
    vio.write_grid_csv(os.path.join(HERE, f"hessian_{label}.csv"), ratio_grid)
    print(f"  convex fraction (lambda_min >= -0.01*|lambda_max|): {fraction:.2f}")
