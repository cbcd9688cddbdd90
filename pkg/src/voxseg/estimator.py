"""Scikit-learn style front end for the segmentation engine.

``VolumeSegmenter`` wraps network construction, the training loop and
inference behind the familiar fit/predict/score surface, so the model
drops into sklearn pipelines, ``clone`` and grid search.  Inputs may be
:class:`~voxseg.volumes.Volume`/:class:`~voxseg.volumes.LabelVolume`
containers or plain (H, W, D) arrays.
"""

from __future__ import annotations

import numpy as np
from sklearn.base import BaseEstimator
from sklearn.exceptions import NotFittedError

from .augment import DeformParams, NoiseParams
from .errors import ShapeError
from .losses import LossConfig, LossKind
from .metrics import evaluate
from .network import MIN_INPUT_EXTENT, NetworkConfig
from .trainer import TrainConfig, infer, train
from .volumes import LabelVolume, Volume


def check_volume(x) -> Volume:
    """Coerce to a Volume and validate it is usable as network input."""
    if not isinstance(x, Volume):
        x = Volume(np.asarray(x, dtype=np.float32))
    if any(e < MIN_INPUT_EXTENT for e in x.dims):
        raise ShapeError(
            f"volume dims {x.dims} too small; every extent must be >= {MIN_INPUT_EXTENT}"
        )
    return x


def check_labels(y, num_classes=None) -> LabelVolume:
    """Coerce to a LabelVolume, optionally forcing the class count."""
    if isinstance(y, LabelVolume):
        if num_classes is not None and y.num_classes != num_classes:
            return LabelVolume(y.data, num_classes=num_classes, spacing=y.spacing)
        return y
    return LabelVolume(np.asarray(y), num_classes=num_classes)


def _as_list(x):
    if isinstance(x, (Volume, LabelVolume)):
        return [x]
    if isinstance(x, np.ndarray) and x.ndim == 3:
        return [x]
    return list(x)


class VolumeSegmenter(BaseEstimator):
    """Full-volume 3-D segmentation estimator.

    Parameters mirror the training configuration: network widths, loss
    choice, precision level, optimizer settings and augmentation strengths.
    ``fit`` trains on in-memory (volume, labels) pairs; ``predict`` returns
    a label array per input volume; ``score`` is the mean foreground Dice
    overlap in [0, 1].
    """

    def __init__(
        self,
        num_classes=None,
        branch_channels=(16, 32, 64),
        stem_channels=32,
        bottleneck_mid_channels=16,
        steps=30000,
        lr=1e-3,
        loss="ce",
        precision="o1",
        elastic_alpha=8.0,
        elastic_sigma_range=(0.04, 0.06),
        noise_sigma_range=(0.0, 0.1),
        seed=0,
    ):
        self.num_classes = num_classes
        self.branch_channels = branch_channels
        self.stem_channels = stem_channels
        self.bottleneck_mid_channels = bottleneck_mid_channels
        self.steps = steps
        self.lr = lr
        self.loss = loss
        self.precision = precision
        self.elastic_alpha = elastic_alpha
        self.elastic_sigma_range = elastic_sigma_range
        self.noise_sigma_range = noise_sigma_range
        self.seed = seed

    def fit(self, X, y):
        vols = [check_volume(v) for v in _as_list(X)]
        raw_labels = _as_list(y)
        if len(vols) != len(raw_labels):
            raise ShapeError(f"{len(vols)} volumes but {len(raw_labels)} label maps")
        n_classes = self.num_classes
        if n_classes is None:
            n_classes = max(
                int(np.max(lab.data if isinstance(lab, LabelVolume) else lab)) + 1
                for lab in raw_labels
            )
            n_classes = max(2, n_classes)
        labels = [check_labels(lab, n_classes) for lab in raw_labels]
        for v, lab in zip(vols, labels):
            if v.dims != lab.dims:
                raise ShapeError(f"volume dims {v.dims} != label dims {lab.dims}")
        cfg = TrainConfig(
            network=NetworkConfig(
                num_classes=n_classes,
                branch_channels=tuple(self.branch_channels),
                stem_channels=self.stem_channels,
                bottleneck_mid_channels=self.bottleneck_mid_channels,
            ),
            steps=self.steps,
            precision=self.precision,
            loss=LossConfig(kind=LossKind(self.loss)),
            deform=DeformParams(
                sigma_range=tuple(self.elastic_sigma_range), alpha=self.elastic_alpha
            ),
            noise=NoiseParams(sigma_range=tuple(self.noise_sigma_range)),
            seed=self.seed,
            lr=self.lr,
            manifest=tuple(zip(vols, labels)),
            checkpoint_every=0,
        )
        result = train(cfg)
        self.network_ = result.network
        self.classes_ = np.arange(n_classes)
        self.train_result_ = result
        return self

    def _require_fitted(self):
        if not hasattr(self, "network_"):
            raise NotFittedError("this VolumeSegmenter instance is not fitted yet")

    def predict(self, X):
        """Label array (H, W, D) per volume; a list in, a list out."""
        self._require_fitted()
        single = isinstance(X, (Volume, np.ndarray))
        out = [infer(self.network_, check_volume(v)).data for v in _as_list(X)]
        return out[0] if single else out

    def predict_volume(self, x) -> LabelVolume:
        self._require_fitted()
        return infer(self.network_, check_volume(x))

    def score(self, X, y):
        """Mean foreground DSC over the given pairs, scaled to [0, 1]."""
        self._require_fitted()
        vols = _as_list(X)
        labs = _as_list(y)
        scores = []
        for v, lab in zip(vols, labs):
            pred = self.predict_volume(v)
            truth = check_labels(lab, self.network_.config.num_classes)
            scores.append(evaluate(truth, pred, truth.num_classes).mean_dsc)
        return float(np.mean(scores)) / 100.0
