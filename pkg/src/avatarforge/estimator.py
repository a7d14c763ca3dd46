"""scikit-learn style facade over the pipeline.

``fit`` overfits the networks to one synthetic subject, ``predict`` runs the
feed-forward loop and returns the reconstructed avatar, ``score`` reports the
masked PSNR of the final render.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from sklearn.base import BaseEstimator
from sklearn.utils.validation import check_is_fitted

from .autodiff import load_weights, save_weights
from .config import Config
from .losses import psnr
from .mesh import RiggedMesh
from .pipeline import init_blocks, run, train_overfit
from .raster import UvImage
from .validation import check_inference_input, check_subject


@dataclass
class Avatar:
    mesh: RiggedMesh          # canonical deformed mesh with its rig
    texture: UvImage
    renders: list             # rendered image per iteration state (0..K)


class AvatarReconstructor(BaseEstimator):
    """Single-image head avatar reconstruction.

    Parameters mirror the most commonly tuned :class:`Config` fields;
    ``config_overrides`` reaches everything else.
    """

    def __init__(self, profile: str = "desk", K: int = 2, steps: int = 500, lr: float = 2e-3,
                 warmup: int = 20, seed: int = 0, config_overrides: dict | None = None):
        self.profile = profile
        self.K = K
        self.steps = steps
        self.lr = lr
        self.warmup = warmup
        self.seed = seed
        self.config_overrides = config_overrides

    def make_config(self) -> Config:
        extra = dict(self.config_overrides or {})
        return Config.for_profile(self.profile, K=self.K, steps=self.steps, lr=self.lr,
                                  warmup=self.warmup, seed=self.seed, **extra)

    def fit(self, X, y=None, on_step=None):
        """Train on one subject (a :class:`SyntheticSubject` or a bundle path)."""
        subject = check_subject(X)
        config = self.make_config()
        blocks = init_blocks(config)
        result = train_overfit(subject, blocks, config, on_step=on_step)
        self.config_ = config
        self.blocks_ = blocks
        self.history_ = result.history
        self.n_parameters_ = blocks.n_parameters()
        return self

    def predict(self, X) -> Avatar:
        check_is_fitted(self, "blocks_")
        image, params, rig = check_inference_input(X, self.config_.image_res)
        res = run(image, params, rig, self.blocks_)
        return Avatar(res.mesh, res.texture, res.images())

    def score(self, X, y=None) -> float:
        """Masked PSNR of the final render against the subject's photo."""
        subject = check_subject(X)
        avatar = self.predict(subject)
        return psnr(avatar.renders[-1], subject.input_image, subject.fg_mask)

    def save(self, path) -> None:
        check_is_fitted(self, "blocks_")
        save_weights(self.blocks_.store.state_dict(), path)

    def load(self, path, config: Config | None = None) -> "AvatarReconstructor":
        """Restore weights saved by :meth:`save` (config defaults to this estimator's params)."""
        config = self.make_config() if config is None else config
        blocks = init_blocks(config)
        blocks.store.load_state_dict(load_weights(path))
        self.config_ = config
        self.blocks_ = blocks
        self.history_ = []
        self.n_parameters_ = blocks.n_parameters()
        return self

    def training_curve(self) -> np.ndarray:
        check_is_fitted(self, "history_")
        return np.array([row["L_total"] for row in self.history_])
