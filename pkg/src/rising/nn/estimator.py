from __future__ import annotations

import numpy as np
from sklearn.base import BaseEstimator, RegressorMixin
from sklearn.utils.validation import check_is_fitted

from ..validation import check_images
from .optim import TrainConfig
from .train import load_checkpoint, save_checkpoint, train
from .unet import NetworkSpec


class ResUNetRegressor(RegressorMixin, BaseEstimator):
    """Image-to-image regressor backed by the residual U-Net.

    ``fit(X, y)`` takes ``(N, n, n)`` input and target stacks with values in
    ``[0, 1]``; ``predict`` returns the same layout.

    Attributes
    ----------
    network_ : ResUNet
    training_log_ : TrainingLog
    optimizer_state_ : AdamState
    """

    def __init__(self, levels=3, base_channels=16, convs_per_level=2, kernel_size=3, *, epochs=100,
                 batch_size=8, lr_start=1e-3, lr_end=1e-5, lr_power=1.0, grad_clip=5.0,
                 random_state=0, shuffle_seed=0, dtype="float32", deterministic=True):
        self.levels = levels
        self.base_channels = base_channels
        self.convs_per_level = convs_per_level
        self.kernel_size = kernel_size
        self.epochs = epochs
        self.batch_size = batch_size
        self.lr_start = lr_start
        self.lr_end = lr_end
        self.lr_power = lr_power
        self.grad_clip = grad_clip
        self.random_state = random_state
        self.shuffle_seed = shuffle_seed
        self.dtype = dtype
        self.deterministic = deterministic

    def network_spec(self) -> NetworkSpec:
        return NetworkSpec(self.levels, self.base_channels, self.convs_per_level, self.kernel_size)

    def train_config(self) -> TrainConfig:
        return TrainConfig(epochs=self.epochs, batch_size=self.batch_size, lr_start=self.lr_start,
                           lr_end=self.lr_end, lr_power=self.lr_power, grad_clip=self.grad_clip,
                           shuffle_seed=self.shuffle_seed)

    def fit(self, X, y):
        X = check_images(X)
        y = check_images(y, n=X.shape[1], name="y")
        if len(X) != len(y):
            raise ValueError(f"X has {len(X)} images but y has {len(y)}")
        self.network_, self.training_log_, self.optimizer_state_ = train(
            X, y, self.network_spec(), self.train_config(), init_seed=self.random_state,
            dtype=np.dtype(self.dtype), deterministic=self.deterministic)
        self.n_features_in_ = X.shape[1] * X.shape[2]
        return self

    def predict(self, X):
        check_is_fitted(self, "network_")
        X = check_images(X)
        return self.network_.predict(X[:, None].astype(self.network_.dtype))[:, 0].astype(np.float64)

    def score(self, X, y, sample_weight=None):
        """Negative mean squared error (higher is better)."""
        y = check_images(y, name="y")
        return -float(np.mean((self.predict(X) - y) ** 2))

    def save(self, path, extra: dict | None = None):
        check_is_fitted(self, "network_")
        return save_checkpoint(path, self.network_, train_cfg=self.train_config(), log=self.training_log_,
                               adam=self.optimizer_state_, extra=extra)

    @classmethod
    def load(cls, path) -> "ResUNetRegressor":
        net, manifest, adam = load_checkpoint(path)
        spec = manifest["spec"]
        tcfg = manifest.get("train_config") or {}
        est = cls(spec["levels"], spec["base_channels"], spec["convs_per_level"], spec["kernel_size"],
                  random_state=manifest["init_seed"],
                  **{k: tcfg[k] for k in ("epochs", "batch_size", "lr_start", "lr_end", "lr_power",
                                          "grad_clip", "shuffle_seed") if k in tcfg})
        est.network_ = net
        est.optimizer_state_ = adam
        est.checkpoint_manifest_ = manifest
        est.n_features_in_ = None
        return est
