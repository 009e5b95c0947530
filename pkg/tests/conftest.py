"""Shared fixtures.

Desk checkpoints (SmallConvNet on digits) take ~10-20 s each to train on one
CPU, so they are cached in pytest's cache directory keyed by the training
recipe and the source of the modules that shape them.  ``pytest
--cache-clear`` forces a rebuild.
"""

from __future__ import annotations

import hashlib
import os
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path

import numpy as np
import pytest
import torch

import mumis
from mumis import data, modelzoo
from mumis.data import load_digits_dataset
from mumis.modelzoo import DESK_ARCH, DESK_RECIPE, ModelCheckpoint, build_model, train
from mumis.tasks import TaskSpec, build_split, cumulative_spec

from helpers import FORGET_CLASS, SEQUENCE, TRAIN_SEED


_VERDICTS: dict[int, str] = {}


def pytest_configure(config):
    os.environ.setdefault(data.DATA_DIR_ENV, str(Path(config.cache.mkdir("mumis-data"))))


def pytest_terminal_summary(terminalreporter):
    if _VERDICTS:
        terminalreporter.section("acceptance criteria")
        for n in sorted(_VERDICTS):
            terminalreporter.write_line(_VERDICTS[n])


@pytest.fixture
def verdict(capsys):
    """``verdict(n, ok, detail)`` prints one PASS/FAIL line for criterion ``n``."""

    def _record(n: int, ok: bool, detail: str) -> bool:
        line = f"{'PASS' if ok else 'FAIL'} criterion {n:>2}: {detail}"
        _VERDICTS[n] = line
        with capsys.disabled():
            print("\n" + line)
        return ok

    return _record


def _fixture_key() -> str:
    h = hashlib.sha256()
    h.update(mumis.__version__.encode())
    h.update(repr((asdict(DESK_RECIPE), DESK_ARCH, TRAIN_SEED)).encode())
    for mod in (data, modelzoo):
        h.update(Path(mod.__file__).read_bytes())
    return h.hexdigest()[:12]


@dataclass
class Desk:
    """Pre-trained model plus on-demand retrain oracles for digits tasks."""

    root: Path
    dataset: data.LabeledDataset
    recipe: modelzoo.TrainConfig
    _cache: dict = field(default_factory=dict)

    def _get(self, name: str, indices) -> ModelCheckpoint:
        if name not in self._cache:
            path = self.root / name
            if (path / "meta.json").is_file():
                ckpt = ModelCheckpoint.load(path)
            else:
                ckpt = train(self.dataset, indices, self.recipe, DESK_ARCH[0], arch_kwargs=DESK_ARCH[1])
                ckpt.save(path)
            self._cache[name] = ckpt
        return self._cache[name]

    @property
    def pretrain(self) -> ModelCheckpoint:
        return self._get("pretrain", self.dataset.train_idx)

    def retrain(self, classes) -> ModelCheckpoint:
        classes = tuple(classes)
        split = build_split(TaskSpec("full_class", classes), self.dataset)
        return self._get("retrain_" + "_".join(map(str, classes)), split.remain)

    def split(self, classes=(FORGET_CLASS,)):
        return build_split(TaskSpec("full_class", tuple(classes)), self.dataset)

    def init_model(self) -> ModelCheckpoint:
        """The untrained network exactly as ``train`` initializes it."""
        torch.manual_seed(self.recipe.seed)
        model = build_model(DESK_ARCH[0], self.dataset.input_shape, self.dataset.num_classes, **DESK_ARCH[1]).eval()
        return ModelCheckpoint.from_model(
            model, DESK_ARCH[0], self.dataset.input_shape, list(range(self.dataset.num_classes)), arch_kwargs=DESK_ARCH[1]
        )

    def sequence_oracles(self, order=SEQUENCE) -> list[ModelCheckpoint]:
        spec = TaskSpec("sequential", tuple(order))
        return [self.retrain(cumulative_spec(spec, k).targets) for k in range(len(order))]


@pytest.fixture(scope="session")
def digits():
    return load_digits_dataset()


@pytest.fixture(scope="session")
def desk(pytestconfig, digits) -> Desk:
    root = Path(pytestconfig.cache.mkdir("mumis-desk")) / _fixture_key()
    root.mkdir(parents=True, exist_ok=True)
    return Desk(root, digits, replace(DESK_RECIPE, seed=TRAIN_SEED))


@pytest.fixture
def mlp64():
    """Small double-precision tanh MLP (8 inputs, 3 classes, < 1k params)."""
    torch.manual_seed(0)
    return build_model("mlp", (1, 2, 4), 3, hidden=12).double().eval()


@pytest.fixture
def rng():
    return np.random.default_rng(0)
