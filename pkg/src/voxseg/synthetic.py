"""Synthetic concentric-box volumes for demos and overfit checks."""

from __future__ import annotations

import numpy as np

from .volumes import LabelVolume, Volume


def make_toy_pair(extent=24, num_classes=4, seed=0, noise=0.15):
    """A cube of nested boxes: label k is the k-th shell from the outside.

    Intensity tracks the label (mean k per shell) plus Gaussian noise, so a
    small network can overfit the mapping quickly while the task is not a
    pure lookup table.
    """
    if num_classes < 2:
        raise ValueError("need at least 2 classes")
    rng = np.random.Generator(np.random.PCG64(np.random.SeedSequence(seed)))
    idx = np.indices((extent, extent, extent))
    # Chebyshev distance from the boundary, normalized to shell index.
    border = np.minimum(idx, extent - 1 - idx).min(axis=0)
    shell_width = max(1, extent // (2 * num_classes))
    labels = np.minimum(border // shell_width, num_classes - 1).astype(np.int32)
    intensity = labels.astype(np.float32)
    intensity += rng.normal(0.0, noise, size=labels.shape).astype(np.float32)
    vol = Volume(intensity)
    lab = LabelVolume(labels, num_classes=num_classes)
    assert len(np.unique(labels)) == num_classes
    return vol, lab
