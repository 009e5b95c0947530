"""Small datasets and constants shared across test modules."""

import numpy as np
import torch

from mumis.data import LabeledDataset

FORGET_CLASS = 9
SEQUENCE = (9, 7, 8)
TRAIN_SEED = 0


def blobs(n_per_class=40, classes=3, seed=0):
    """Well-separated Gaussian blobs shaped like 1x2x2 images."""
    g = np.random.default_rng(seed)
    centers = 3.0 * g.standard_normal((classes, 4))
    x = np.concatenate([c + 0.3 * g.standard_normal((n_per_class, 4)) for c in centers])
    y = np.repeat(np.arange(classes), n_per_class)
    perm = g.permutation(len(y))
    x, y = x[perm], y[perm]
    n_train = int(0.8 * len(y))
    return LabeledDataset(
        "blobs",
        torch.tensor(x, dtype=torch.float32).view(-1, 1, 2, 2),
        torch.from_numpy(y),
        np.arange(n_train),
        np.arange(n_train, len(y)),
        classes,
    )
