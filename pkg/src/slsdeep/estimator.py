"""scikit-learn style wrapper: ``SLSDeepSegmenter().fit(images, masks).predict(images)``."""

from __future__ import annotations

import numpy as np
from sklearn.base import BaseEstimator
from sklearn.utils.validation import check_is_fitted

from .data import ArrayDataset, AugmentConfig
from .loss import LossConfig
from .metrics import binarize, evaluate_dataset
from .network import NetworkConfig, build
from .tensor import Tensor
from .trainer import TrainConfig, train


def check_images(X, name: str = "X") -> np.ndarray:
    """Validate a batch of RGB images and return (n, 3, H, W) float32 in [0, 1].

    Accepts channels-last (n, H, W, 3) or channels-first (n, 3, H, W) arrays;
    uint8 input is scaled by 1/255, real input must already lie in [0, 1].
    """
    arr = np.asarray(X)
    if arr.ndim != 4:
        raise ValueError(f"{name} must be 4-D (n, H, W, 3) or (n, 3, H, W), got shape {arr.shape}")
    if arr.shape[0] == 0:
        raise ValueError(f"{name} contains no images")
    if arr.shape[-1] == 3 and arr.shape[1] != 3:
        arr = arr.transpose(0, 3, 1, 2)
    elif arr.shape[1] != 3:
        raise ValueError(f"{name} must have 3 colour channels, got shape {arr.shape}")
    if arr.dtype == np.uint8:
        return arr.astype(np.float32) / np.float32(255)
    if not np.issubdtype(arr.dtype, np.number) or np.issubdtype(arr.dtype, np.complexfloating):
        raise ValueError(f"{name} must be numeric, got dtype {arr.dtype}")
    arr = arr.astype(np.float32)
    if not np.all(np.isfinite(arr)):
        raise ValueError(f"{name} contains NaN or infinite values")
    if arr.min() < 0 or arr.max() > 1:
        raise ValueError(f"{name} values must lie in [0, 1] (or be uint8)")
    return arr


def check_masks(y, images: np.ndarray, name: str = "y") -> np.ndarray:
    """Validate binary masks matching ``images``; return (n, 1, H, W) float32 in {0, 1}.

    Accepts (n, H, W) or (n, 1, H, W) with values {0, 1} or {0, 255}.
    """
    arr = np.asarray(y)
    if arr.ndim == 4 and arr.shape[1] == 1:
        arr = arr[:, 0]
    if arr.ndim != 3:
        raise ValueError(f"{name} must be (n, H, W) or (n, 1, H, W), got shape {np.shape(y)}")
    expected = (images.shape[0],) + images.shape[2:]
    if arr.shape != expected:
        raise ValueError(f"{name} shape {arr.shape} does not match images {expected}")
    values = np.unique(arr)
    if set(values.tolist()) <= {0, 255} and 255 in values:
        arr = arr // 255
    elif not set(values.tolist()) <= {0, 1}:
        raise ValueError(f"{name} must be binary (0/1 or 0/255), found values {values[:5].tolist()}")
    return arr.astype(np.float32)[:, None]


class SLSDeepSegmenter(BaseEstimator):
    """Binary lesion segmenter with the encoder-decoder network and NLL + EPE loss.

    Inputs are image batches; targets are binary masks of the same size. The
    network input size is taken from the training images, so every image
    passed to ``predict`` must have that size too.
    """

    def __init__(self, width_scale=1 / 16, stage_depths=(1, 1, 1, 1), skip_mode="single", alpha=0.5,
                 use_epe=True, epochs=10, batch_size=16, base_lr_encoder=0.001, base_lr_decoder=0.01,
                 augment=False, threshold=0.5, random_state=0):
        self.width_scale = width_scale
        self.stage_depths = stage_depths
        self.skip_mode = skip_mode
        self.alpha = alpha
        self.use_epe = use_epe
        self.epochs = epochs
        self.batch_size = batch_size
        self.base_lr_encoder = base_lr_encoder
        self.base_lr_decoder = base_lr_decoder
        self.augment = augment
        self.threshold = threshold
        self.random_state = random_state

    def fit(self, X, y):
        images = check_images(X)
        masks = check_masks(y, images)
        seed = 0 if self.random_state is None else int(self.random_state)
        self.network_config_ = NetworkConfig(input_size=tuple(images.shape[2:]), width_scale=self.width_scale,
                                             stage_depths=tuple(self.stage_depths), skip_mode=self.skip_mode)
        self.network_config_.check_input(*images.shape[2:])
        self.train_config_ = TrainConfig(base_lr_encoder=self.base_lr_encoder,
                                         base_lr_decoder=self.base_lr_decoder, epochs=self.epochs,
                                         batch_size=self.batch_size, seed=seed,
                                         loss=LossConfig(alpha=self.alpha, use_epe=self.use_epe))
        augment = AugmentConfig(enabled=bool(self.augment), seed=seed)
        self.model_ = build(self.network_config_, init_seed=seed)
        result = train(self.model_, ArrayDataset(images, masks), self.train_config_, augment_config=augment)
        self.log_ = result.log
        self.n_iter_ = len(result.log)
        return self

    def _images(self, X) -> np.ndarray:
        check_is_fitted(self, "model_")
        images = check_images(X)
        if tuple(images.shape[2:]) != tuple(self.network_config_.input_size):
            raise ValueError(f"images are {images.shape[2]}x{images.shape[3]}, the model was fitted on "
                             f"{self.network_config_.input_size[0]}x{self.network_config_.input_size[1]}")
        return images

    def predict_proba(self, X, batch_size: int = 4) -> np.ndarray:
        """Foreground probability per pixel, shape (n, H, W)."""
        images = self._images(X)
        out = [self.model_.forward(Tensor(images[i:i + batch_size]), training=False).data[:, 1]
               for i in range(0, len(images), batch_size)]
        return np.concatenate(out)

    def transform(self, X) -> np.ndarray:
        """Same as ``predict_proba``; lets the segmenter sit inside a pipeline."""
        return self.predict_proba(X)

    def predict(self, X) -> np.ndarray:
        """Binary masks (n, H, W) uint8, foreground where probability >= ``threshold``."""
        return binarize(self.predict_proba(X), self.threshold)

    def score(self, X, y) -> float:
        """Mean per-image Jaccard index."""
        images = self._images(X)
        masks = check_masks(y, images)[:, 0]
        preds = self.predict(images)
        return evaluate_dataset(list(zip(preds, masks.astype(np.uint8)))).jac
