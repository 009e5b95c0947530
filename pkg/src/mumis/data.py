"""Built-in desk datasets.

Two small labeled image sets ship with the toolkit:

* ``digits`` -- the 8x8 handwritten digits bundled with scikit-learn
  (10 classes, 1797 images), split 80/20 into train/test.
* ``shapes20`` -- a generated 8x8 set with 20 fine classes grouped into
  5 coarse classes (4 fine per coarse), used for sub-class scenarios.

Both are deterministic.  Generated arrays are cached as ``.npz`` under
``$MUMIS_DATA_DIR`` (default ``~/.cache/mumis``).
"""

from __future__ import annotations

import hashlib
import logging
import os
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch

logger = logging.getLogger(__name__)

DATA_DIR_ENV = "MUMIS_DATA_DIR"


@dataclass(frozen=True, eq=False)
class LabeledDataset:
    """Images with fine labels and a fixed train/test partition.

    ``images`` has shape (N, 1, H, W), standardized with train statistics.
    ``coarse_map`` maps fine class -> coarse class when the dataset has a
    two-level label hierarchy.
    """

    name: str
    images: torch.Tensor
    labels: torch.Tensor
    train_idx: np.ndarray
    test_idx: np.ndarray
    num_classes: int
    coarse_map: dict[int, int] | None = None
    _digest: str = field(default="", repr=False)

    def __post_init__(self):
        if not self._digest:
            h = hashlib.sha256()
            h.update(self.name.encode())
            h.update(self.images.numpy().tobytes())
            h.update(self.labels.numpy().tobytes())
            h.update(self.train_idx.tobytes())
            h.update(self.test_idx.tobytes())
            object.__setattr__(self, "_digest", h.hexdigest()[:16])

    @property
    def dataset_id(self) -> str:
        return f"{self.name}-{self._digest}"

    @property
    def input_shape(self) -> tuple[int, ...]:
        return tuple(self.images.shape[1:])

    @property
    def num_coarse(self) -> int:
        if self.coarse_map is None:
            raise ValueError(f"dataset {self.name!r} has no coarse label map")
        return len(set(self.coarse_map.values()))

    def targets(self, granularity: str = "fine") -> torch.Tensor:
        """Label tensor at ``fine`` or ``coarse`` granularity."""
        if granularity == "fine":
            return self.labels
        if granularity == "coarse":
            if self.coarse_map is None:
                raise ValueError(f"dataset {self.name!r} has no coarse label map")
            lut = torch.tensor([self.coarse_map[c] for c in range(self.num_classes)])
            return lut[self.labels]
        raise ValueError(f"unknown label granularity {granularity!r}")

    def class_indices(self, classes, split: str = "train") -> np.ndarray:
        pool = self.train_idx if split == "train" else self.test_idx
        mask = np.isin(self.labels.numpy()[pool], list(classes))
        return pool[mask]


def data_dir() -> Path:
    root = os.environ.get(DATA_DIR_ENV)
    return Path(root) if root else Path.home() / ".cache" / "mumis"


def _stratified_split(labels: np.ndarray, test_frac: float, seed: int):
    rng = np.random.default_rng(seed)
    train, test = [], []
    for c in np.unique(labels):
        idx = np.flatnonzero(labels == c)
        rng.shuffle(idx)
        n_test = int(round(test_frac * len(idx)))
        test.append(idx[:n_test])
        train.append(idx[n_test:])
    return np.sort(np.concatenate(train)), np.sort(np.concatenate(test))


def _standardize(x: np.ndarray, train_idx: np.ndarray) -> np.ndarray:
    mean = x[train_idx].mean()
    std = x[train_idx].std()
    return (x - mean) / std


def load_digits_dataset(seed: int = 0) -> LabeledDataset:
    from sklearn.datasets import load_digits

    raw = load_digits()
    x = raw.images.astype(np.float32)[:, None] / 16.0
    y = raw.target.astype(np.int64)
    train_idx, test_idx = _stratified_split(y, 0.2, seed)
    x = _standardize(x, train_idx).astype(np.float32)
    return LabeledDataset(
        name="digits",
        images=torch.from_numpy(x),
        labels=torch.from_numpy(y),
        train_idx=train_idx,
        test_idx=test_idx,
        num_classes=10,
    )


SHAPES20_COARSE = {fine: fine // 4 for fine in range(20)}


def _generate_shapes20(seed: int, per_class: int = 90) -> tuple[np.ndarray, np.ndarray]:
    # coarse template + fine-specific deviation + per-sample noise and jitter
    rng = np.random.default_rng(seed)
    side = 8
    coarse_t = rng.normal(size=(5, side, side))
    fine_t = rng.normal(size=(20, side, side))
    images, labels = [], []
    for fine in range(20):
        proto = coarse_t[SHAPES20_COARSE[fine]] + 0.7 * fine_t[fine]
        for _ in range(per_class):
            img = proto + 0.8 * rng.normal(size=(side, side))
            img = np.roll(img, rng.integers(-1, 2, size=2), axis=(0, 1))
            images.append(img)
            labels.append(fine)
    x = np.asarray(images, dtype=np.float32)[:, None]
    return x, np.asarray(labels, dtype=np.int64)


def load_shapes20_dataset(seed: int = 0) -> LabeledDataset:
    cache = data_dir() / f"shapes20_s{seed}.npz"
    if cache.exists():
        with np.load(cache) as f:
            x, y = f["x"], f["y"]
    else:
        x, y = _generate_shapes20(seed)
        cache.parent.mkdir(parents=True, exist_ok=True)
        np.savez(cache, x=x, y=y)
        logger.info("cached shapes20 at %s", cache)
    train_idx, test_idx = _stratified_split(y, 0.2, seed)
    x = _standardize(x, train_idx).astype(np.float32)
    return LabeledDataset(
        name="shapes20",
        images=torch.from_numpy(x),
        labels=torch.from_numpy(y),
        train_idx=train_idx,
        test_idx=test_idx,
        num_classes=20,
        coarse_map=dict(SHAPES20_COARSE),
    )


_LOADERS = {"digits": load_digits_dataset, "shapes20": load_shapes20_dataset}
_CACHE: dict[tuple[str, int], LabeledDataset] = {}


def load_dataset(name: str, seed: int = 0) -> LabeledDataset:
    try:
        loader = _LOADERS[name]
    except KeyError:
        raise ValueError(f"unknown dataset {name!r}; choose from {sorted(_LOADERS)}") from None
    key = (name, seed)
    if key not in _CACHE:
        _CACHE[key] = loader(seed)
    return _CACHE[key]
