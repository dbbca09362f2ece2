"""Raw last-layer attention, head-averaged, with token-segment annotations.

Compares where plain-prompt and all-Fourier models place attention mass:
the class token, the learnable prompts, or the image patches. Writes the
matrices as CSV plus grayscale graymaps.
"""

import os

from vfpt import BackboneConfig, PromptConfig, TaskSpec, TrainConfig, Tuner
from vfpt import io as vio
from vfpt.analysis import attention_export
from vfpt.data import FREQUENCY_BAND, SOURCE_ORIENTATION, normalize
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
image = normalize(target.splits.test.images[0], target.mean, target.std)

for label, alpha in (("plain", 0.0), ("fourier", 1.0)):
    config = PromptConfig(prompts_per_layer=10, alpha=alpha, transform="fft")
    tuner = Tuner(backbone, target, config,
                  TrainConfig(epochs=10, warmup_epochs=1, base_lr=0.25,
                              weight_decay=1e-4), seed=0)
    record = tuner.run()
    matrix, segments, prompt_mass = attention_export(tuner.model, image)
    csv_path = os.path.join(HERE, f"attention_{label}.csv")
    lines = ["# segments: " + ", ".join(f"{k}={lo}:{hi}"
                                        for k, (lo, hi) in segments.items())]
    lines += [",".join(vio.format_float(v) for v in row) for row in matrix]
    vio.atomic_write_text(csv_path, "\n".join(lines) + "\n")
    vio.write_pgm(os.path.join(HERE, f"attention_{label}.pgm"), matrix)
    masses = {name: matrix[:, lo:hi].sum(axis=1).mean()
              for name, (lo, hi) in segments.items()}
    print(f"{label}: val acc {record.final_val_accuracy():.3f}; "
          f"attention mass class={masses['class']:.3f} "
          f"prompts={masses['prompts']:.3f} patches={masses['patches']:.3f}")
