"""scikit-learn estimator wrapper around the Top-GAP network."""

from __future__ import annotations

import numpy as np
from sklearn.base import BaseEstimator, ClassifierMixin, TransformerMixin
from sklearn.preprocessing import LabelEncoder
from sklearn.utils.multiclass import check_classification_targets
from sklearn.utils.validation import check_array, check_is_fitted

from .data.dataset import Dataset
from .errors import DataError
from .net import BackboneConfig, HeadConfig, TopGapNetwork, TrainHyper, build_model, feature_maps, predict, train_model
from .net.model import cam_mode


class TopGAPClassifier(ClassifierMixin, TransformerMixin, BaseEstimator):
    """Image classifier with Top-GAP pooling and an l1-sparse class map.

    ``X`` is an ``N x C x H x W`` float array in [0, 1] (uint8 input is
    scaled by 1/255). ``k=0`` trains the plain global-average baseline
    (k covers the whole map and ``lam`` is ignored).

    ``transform`` returns the raw class maps (``N x classes x H1 x W1``);
    ``explain`` returns min-max scaled CAMs at input resolution.

    Parameters
    ----------
    k : int
        Number of spatial positions averaged per class (0 for plain GAP).
    lam : float
        Weight of the mean-absolute-value penalty on the class map.
    stage_widths, blocks_per_stage, feature_maps_used :
        Backbone shape; the input size is taken from ``X`` at fit time.
    fpn_channels, dropout_rate :
        Head width and dropout before the class convolution.
    epochs, batch_size, lr :
        Adam training schedule.
    val_fraction : float
        Stratified hold-out used to pick the best epoch (0 uses the training set).
    random_state : int
        Seed for weights, splits, shuffling and dropout.
    """

    def __init__(self, k=16, lam=1.0, stage_widths=(16, 32, 48), blocks_per_stage=1, feature_maps_used=3,
                 fpn_channels=32, dropout_rate=0.0, epochs=10, batch_size=64, lr=2e-3, val_fraction=0.2,
                 random_state=0):
        self.k = k
        self.lam = lam
        self.stage_widths = stage_widths
        self.blocks_per_stage = blocks_per_stage
        self.feature_maps_used = feature_maps_used
        self.fpn_channels = fpn_channels
        self.dropout_rate = dropout_rate
        self.epochs = epochs
        self.batch_size = batch_size
        self.lr = lr
        self.val_fraction = val_fraction
        self.random_state = random_state

    def _check_images(self, X, reset: bool = False) -> np.ndarray:
        X = np.asarray(X)
        if X.dtype == np.uint8:
            X = X.astype(np.float32) / 255
        X = check_array(X, allow_nd=True, dtype=(np.float32, np.float64), ensure_min_samples=1)
        if X.ndim != 4:
            raise DataError(f"expected N x C x H x W images, got shape {X.shape}")
        if X.shape[2] != X.shape[3]:
            raise DataError(f"images must be square, got {X.shape[2]}x{X.shape[3]}")
        if reset:
            self.n_features_in_ = int(np.prod(X.shape[1:]))
            self.image_shape_ = X.shape[1:]
        elif X.shape[1:] != self.image_shape_:
            raise DataError(f"expected images of shape {self.image_shape_}, got {X.shape[1:]}")
        return X.astype(np.float32, copy=False)

    def fit(self, X, y):
        X = self._check_images(X, reset=True)
        y = np.asarray(y)
        check_classification_targets(y)
        if len(y) != len(X):
            raise DataError(f"X has {len(X)} samples but y has {len(y)}")
        self._encoder = LabelEncoder().fit(y)
        self.classes_ = self._encoder.classes_
        yi = self._encoder.transform(y).astype(np.int64)
        n_classes = len(self.classes_)
        if n_classes < 2:
            raise DataError("need at least two classes")
        bcfg = BackboneConfig(input_size=X.shape[-1], input_channels=X.shape[1], stage_widths=self.stage_widths,
                              blocks_per_stage=self.blocks_per_stage, feature_maps_used=self.feature_maps_used)
        bcfg.validate()
        fused = bcfg.feature_sizes()[0]
        if self.k == 0:
            hcfg = HeadConfig.gap_baseline(fused, num_classes=n_classes, fpn_channels=self.fpn_channels,
                                           dropout_rate=self.dropout_rate)
        else:
            hcfg = HeadConfig(num_classes=n_classes, k=int(self.k), lam=float(self.lam),
                              fpn_channels=self.fpn_channels, dropout_rate=self.dropout_rate)
        hcfg.validate(fused)
        params = build_model(bcfg, hcfg, seed=self.random_state)
        data = Dataset(X, yi, None, [f"s{i}" for i in range(len(X))], [str(c) for c in self.classes_])
        hyper = TrainHyper(lr=self.lr, val_fraction=self.val_fraction)
        self.params_, self.train_log_ = train_model(params, data, self.epochs, self.batch_size, hyper,
                                                    self.random_state)
        return self

    def predict_proba(self, X) -> np.ndarray:
        check_is_fitted(self, "params_")
        return predict(self.params_, self._check_images(X), batch_size=self.batch_size * 4)[1]

    def predict(self, X) -> np.ndarray:
        proba = self.predict_proba(X)
        return self.classes_[proba.argmax(axis=1)]

    def decision_function(self, X) -> np.ndarray:
        check_is_fitted(self, "params_")
        return TopGapNetwork(self.params_).logits(self._check_images(X), self.batch_size * 4)

    def transform(self, X) -> np.ndarray:
        """Raw class maps, ``N x classes x H1 x W1``."""
        check_is_fitted(self, "params_")
        return feature_maps(self.params_, self._check_images(X), self.batch_size * 4)

    def explain(self, X, y=None) -> np.ndarray:
        """Min-max scaled CAMs at input size for ``y`` (default: the predicted class)."""
        maps = self.transform(X)
        if y is None:
            idx = self.decision_function(X).argmax(axis=1)
        else:
            idx = self._encoder.transform(np.asarray(y))
        return cam_mode(maps, idx, self.image_shape_[-1])

    def _more_tags(self):
        return {"X_types": ["3darray"], "requires_y": True}
