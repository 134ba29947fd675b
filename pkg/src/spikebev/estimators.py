"""scikit-learn style wrappers around the rasteriser, rate coder and detector.

    >>> det = SpikingBEVDetector(epochs=2).fit(bev, labels)
    >>> det.predict(bev[:1])[0]          # list of Detection
    >>> det.score(bev, labels)           # AP at IoU 0.5
"""
from __future__ import annotations

import numpy as np
from sklearn.base import BaseEstimator, TransformerMixin
from sklearn.utils.validation import check_array, check_is_fitted

from . import spkl
from .codec import EncoderParams, encode_rate
from .evaluation import average_precision
from .ingest import GridMeta, PointCloud, pointcloud_to_bev
from .pipeline import SceneDataset, detect_many
from .train import TrainConfig, train


def check_bev(X, n_channels: int = 3, shape=None) -> np.ndarray:
    """Validate a BEV batch ``(n, C, H, W)``; a single ``(C, H, W)`` grid is promoted."""
    X = check_array(X, allow_nd=True, ensure_2d=False, dtype=np.float64)
    if X.ndim == 3:
        X = X[None]
    if X.ndim != 4 or X.shape[1] != n_channels:
        raise ValueError(f"expected (n, {n_channels}, H, W) BEV input, got shape {X.shape}")
    if shape is not None and X.shape[2:] != tuple(shape):
        raise ValueError(f"grid shape {X.shape[2:]} does not match the fitted {tuple(shape)}")
    return X


def _as_cloud(x) -> PointCloud:
    if isinstance(x, PointCloud):
        return x
    pts = check_array(x, dtype=np.float64)
    if pts.shape[1] != 4:
        raise ValueError(f"point arrays must be (N, 4), got {pts.shape}")
    return PointCloud(pts)


class BEVRasterizer(TransformerMixin, BaseEstimator):
    """Point clouds (``PointCloud`` or ``(N, 4)`` arrays) to BEV grids ``(n, 3, H, W)``."""

    def __init__(self, meta: GridMeta | None = None):
        self.meta = meta

    def fit(self, X=None, y=None):
        self.meta_ = self.meta or GridMeta()
        return self

    def transform(self, X):
        check_is_fitted(self, "meta_")
        if isinstance(X, (PointCloud, np.ndarray)):
            X = [X]
        return np.stack([pointcloud_to_bev(_as_cloud(x), self.meta_).data for x in X])


class RateEncoder(TransformerMixin, BaseEstimator):
    """Per-channel rate coding ``clamp(floor(alpha * x), 0, n_max)``.

    ``alpha`` defaults to ``n_max`` for every channel, so a unit input
    saturates.
    """

    def __init__(self, n_max: int = 63, alpha=None):
        self.n_max = n_max
        self.alpha = alpha

    def fit(self, X, y=None):
        X = check_bev(X, n_channels=np.asarray(X).shape[-3])
        n_ch = X.shape[1]
        alpha = np.full(n_ch, float(self.n_max)) if self.alpha is None else \
            np.broadcast_to(np.asarray(self.alpha, dtype=np.float64), (n_ch,)).copy()
        self.params_ = EncoderParams(alpha, self.n_max)
        self.n_features_in_ = n_ch
        return self

    def transform(self, X):
        check_is_fitted(self, "params_")
        X = check_bev(X, self.n_features_in_)
        return np.stack([encode_rate(x, self.params_) for x in X])


class SpikingBEVDetector(BaseEstimator):
    """Quantization-aware trained spiking keypoint detector.

    ``X`` is a BEV batch ``(n, 3, H, W)`` on the grid ``meta``; ``y`` is a
    list of ``SceneLabel``. Hyperparameters mirror ``TrainConfig``; ``arch``
    and ``loss`` take dicts (or the dataclasses) so that ``get_params`` stays
    flat and cloneable.
    """

    def __init__(self, arch=None, loss=None, epochs: int = 100, lr: float = 1e-3,
                 optimizer: str = "adam", momentum: float = 0.9, batch_size: int = 4,
                 seed: int = 0, theta_init: float = 4.0, weight_init: str = "normal",
                 calibrate_scenes: int = 16, open_heads: bool = True,
                 theta_lr_scale: float = 10.0, min_margin: int = 1, meta: GridMeta | None = None,
                 threads: int = 1):
        self.arch = arch
        self.loss = loss
        self.epochs = epochs
        self.lr = lr
        self.optimizer = optimizer
        self.momentum = momentum
        self.batch_size = batch_size
        self.seed = seed
        self.theta_init = theta_init
        self.weight_init = weight_init
        self.calibrate_scenes = calibrate_scenes
        self.open_heads = open_heads
        self.theta_lr_scale = theta_lr_scale
        self.min_margin = min_margin
        self.meta = meta
        self.threads = threads

    def train_config(self) -> TrainConfig:
        # dicts are merged onto the training recipe defaults; dataclasses are used as given
        d = dict(lr=self.lr, momentum=self.momentum, optimizer=self.optimizer,
                 epochs=self.epochs, batch_size=self.batch_size, seed=self.seed,
                 theta_init=self.theta_init, weight_init=self.weight_init,
                 calibrate_scenes=self.calibrate_scenes, open_heads=self.open_heads,
                 theta_lr_scale=self.theta_lr_scale, min_margin=self.min_margin,
                 loss=self.loss or {}, arch=self.arch or {})
        return TrainConfig.from_dict(d)

    def fit(self, X, y, out_dir=None):
        cfg = self.train_config()
        meta = self.meta or GridMeta()
        X = check_bev(X, cfg.arch.in_channels, meta.shape)
        if len(y) != len(X):
            raise ValueError(f"{len(X)} grids but {len(y)} label sets")
        data = SceneDataset.from_bev(X, list(y), meta, cfg.arch.n_bins)
        self.network_, self.report_, _ = train(cfg, data, out_dir)
        self.meta_ = meta
        self.n_features_in_ = cfg.arch.in_channels
        return self

    @classmethod
    def from_network(cls, net, meta: GridMeta | None = None, **kw) -> "SpikingBEVDetector":
        """Wrap an already trained network (e.g. one loaded from a SPKL file)."""
        det = cls(arch=net.cfg.to_dict(), meta=meta, **kw)
        det.network_ = net
        det.report_ = None
        det.meta_ = meta or GridMeta()
        det.n_features_in_ = net.cfg.in_channels
        return det

    @classmethod
    def load(cls, path, meta: GridMeta | None = None, **kw) -> "SpikingBEVDetector":
        return cls.from_network(spkl.load(path), meta, **kw)

    def save(self, path):
        check_is_fitted(self, "network_")
        spkl.save(self.network_, path)

    def predict(self, X):
        """One list of ``Detection`` per input grid."""
        check_is_fitted(self, "network_")
        X = check_bev(X, self.n_features_in_, self.meta_.shape)
        return detect_many(self.network_, X, self.meta_, self.min_margin, self.threads)

    def evaluate(self, X, y, iou_thresholds=(0.5, 0.7)):
        return average_precision(self.predict(X), list(y), iou_thresholds)

    def score(self, X, y):
        """AP at IoU 0.5 on the easy bucket (every synthetic object is easy)."""
        return float(self.evaluate(X, y, (0.5,)).ap[0.5]["easy"])
