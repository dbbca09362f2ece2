"""The pretrain-then-finetune story at desk scale.

Pretrains a small vision transformer on grating orientation, freezes it,
then adapts it to the frequency-band task three ways: plain prompts,
half-Fourier prompts, and all-Fourier prompts. Takes a few minutes on one
core.
"""

from vfpt import BackboneConfig, PromptConfig, TaskSpec, TrainConfig, Tuner
from vfpt.data import FREQUENCY_BAND, SOURCE_ORIENTATION
from vfpt.training import prepare_task, pretrain

print("== pretraining the source model (grating orientation) ==")
source = prepare_task(TaskSpec("source", SOURCE_ORIENTATION, num_classes=4,
                               noise_std=0.1, seed=100))
backbone, record = pretrain(source, BackboneConfig(),
                            TrainConfig(epochs=12, warmup_epochs=2, base_lr=0.2,
                                        weight_decay=1e-4), seed=0,
                            log=lambda msg: print("  " + msg))
print(f"source val accuracy: {record.val_accuracy[-1]:.3f}; backbone frozen\n")

target = prepare_task(TaskSpec("freq", FREQUENCY_BAND, num_classes=4,
                               noise_std=0.2, seed=200),
                      stats=(source.mean, source.std))

for alpha in (0.0, 0.5, 1.0):
    config = PromptConfig(prompts_per_layer=10, alpha=alpha, transform="fft")
    tuner = Tuner(backbone, target, config,
                  TrainConfig(epochs=10, warmup_epochs=1, base_lr=0.25,
                              weight_decay=1e-4), seed=0)
    result = tuner.run()
    counts = tuner.model.parameter_summary()
    print(f"alpha={alpha}: val acc {result.final_val_accuracy():.3f}, "
          f"test acc {result.test_accuracy:.3f} "
          f"({counts['tuned']} tuned / {counts['total']} total parameters, "
          f"{counts['percent']:.2f}%)")
