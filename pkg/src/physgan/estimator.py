"""scikit-learn style wrapper around the trainer.

``X`` holds degraded observations and ``y`` the matching clean images, both
as ``(n, H, W, C)`` arrays in [0, 1]. The physics branch needs one forward
model per training image, passed to :meth:`PhysicsGANRestorer.fit` as
``physics_models``.
"""

from __future__ import annotations

import numpy as np
from sklearn.base import BaseEstimator, TransformerMixin
from sklearn.utils.validation import check_array, check_is_fitted

from .metrics import psnr
from .physics import Downsample
from .synth import PairedSample
from .trainer import TrainConfig, Trainer, restore_image


def _check_images(X, name):
    X = check_array(X, allow_nd=True, ensure_2d=False, dtype=np.float64, input_name=name)
    if X.ndim == 3:
        X = X[..., None]
    if X.ndim != 4:
        raise ValueError(f"{name} must have shape (n, H, W) or (n, H, W, C), got {X.shape}")
    if X.min() < 0 or X.max() > 1:
        raise ValueError(f"{name} intensities must lie in [0, 1]")
    return X


class PhysicsGANRestorer(TransformerMixin, BaseEstimator):
    """Physics-constrained GAN restoration as an estimator.

    Parameters mirror :class:`~physgan.trainer.TrainConfig`; ``transform``
    and ``predict`` both return restored images and ``score`` is mean PSNR.
    """

    def __init__(
        self,
        task="deblur",
        width_scale=0.25,
        n_resblocks=4,
        epochs=20,
        lr_initial=1e-2,
        decay_start_epoch=10,
        batch_size=10,
        lam=100.0,
        augment=True,
        ablation=(),
        seed=0,
    ):
        self.task = task
        self.width_scale = width_scale
        self.n_resblocks = n_resblocks
        self.epochs = epochs
        self.lr_initial = lr_initial
        self.decay_start_epoch = decay_start_epoch
        self.batch_size = batch_size
        self.lam = lam
        self.augment = augment
        self.ablation = ablation
        self.seed = seed

    def _config(self):
        return TrainConfig(
            task=self.task,
            width_scale=self.width_scale,
            n_resblocks=self.n_resblocks,
            epochs=self.epochs,
            lr_initial=self.lr_initial,
            decay_start_epoch=self.decay_start_epoch,
            batch_size=self.batch_size,
            lam=self.lam,
            augment=self.augment,
            ablation=frozenset(self.ablation),
            seed=self.seed,
        )

    def fit(self, X, y, physics_models=None):
        cfg = self._config()
        X = _check_images(X, "X")
        y = _check_images(y, "y")
        if len(X) != len(y):
            raise ValueError(f"X and y hold {len(X)} and {len(y)} images")
        if physics_models is None:
            if cfg.physics_branch:
                raise ValueError("physics_models is required unless the physics branch is ablated")
            physics_models = [None] * len(X)
        if len(physics_models) != len(X):
            raise ValueError("need one physics model per training image")
        samples = [PairedSample(c, d, m, f"{i:05d}") for i, (d, c, m) in enumerate(zip(X, y, physics_models))]
        trainer = Trainer(cfg, samples)
        self.loss_history_ = []
        while trainer.epoch < cfg.epochs:
            self.loss_history_.extend(rep for _, _, rep in trainer.run_epoch())
        self.generator_ = trainer.G.eval()
        scales = {m.scale for m in physics_models if isinstance(m, Downsample)}
        self.sr_scale_ = scales.pop() if len(scales) == 1 else None
        self.n_features_in_ = int(np.prod(X.shape[1:]))
        return self

    def transform(self, X):
        check_is_fitted(self, "generator_")
        X = _check_images(X, "X")
        return np.stack([restore_image(self.generator_, img, self.sr_scale_) for img in X])

    def predict(self, X):
        return self.transform(X)

    def score(self, X, y):
        """Mean PSNR (dB) of the restorations of ``X`` against ``y``."""
        out = self.transform(X)
        y = _check_images(y, "y")
        if y.shape[-1] == 1 and out.shape[-1] == 3:
            y = np.repeat(y, 3, axis=-1)
        return float(np.mean([psnr(a, b) for a, b in zip(out, y)]))
