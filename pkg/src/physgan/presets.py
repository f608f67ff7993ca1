"""Desk-scale settings shared by the acceptance suite, the CLI and the README.

The full-size protocol (width 1, nine ResBlocks, lr 2e-4, batch 1, 200
epochs) is the default of :class:`~physgan.trainer.TrainConfig`. The toy
preset below trains a quarter-width network for 2000 steps on 32x32 glyph
images and is tuned so that a CPU run finishes in a few minutes.
"""

from __future__ import annotations

from .synth import SynthConfig
from .trainer import TrainConfig

TOY_TRAIN_SEED = 1
TOY_EVAL_SEED = 2
TOY_TRAIN_COUNT = 50
TOY_EVAL_COUNT = 20

TOY_SYNTH = dict(
    task="deblur",
    image_size=32,
    style="glyphs",
    kernel_size_range=(7, 7),
    disc_radius_range=(1.5, 3.0),
    defocus_fraction=1.0,
    noise_max=0.10,
)

TOY_TRAIN = dict(
    task="deblur",
    width_scale=0.25,
    n_resblocks=4,
    batch_size=10,
    epochs=400,
    decay_start_epoch=200,
    lr_initial=1e-2,
    lam=100.0,
    augment=True,
    eval_every=5,
    checkpoint_every=100,
)


def toy_synth_config(count=TOY_TRAIN_COUNT, seed=TOY_TRAIN_SEED, **overrides):
    return SynthConfig(**{**TOY_SYNTH, "count": count, "seed": seed, **overrides})


def toy_train_config(**overrides):
    return TrainConfig(**{**TOY_TRAIN, **overrides})


def toy_corpora(**overrides):
    """``(train_samples, eval_samples)`` of the toy deblurring corpus, built in memory."""
    from .synth import make_sample

    tr = toy_synth_config(TOY_TRAIN_COUNT, TOY_TRAIN_SEED, **overrides)
    ev = toy_synth_config(TOY_EVAL_COUNT, TOY_EVAL_SEED, **overrides)
    return [make_sample(tr, i) for i in range(tr.count)], [make_sample(ev, i) for i in range(ev.count)]
