"""Unlearning scenarios as index partitions over a labeled dataset."""

from __future__ import annotations

import hashlib
import json
import math
from dataclasses import asdict, dataclass, field
from enum import Enum
from pathlib import Path
from typing import NamedTuple

import numpy as np

from .data import LabeledDataset


class SpecError(ValueError):
    """Raised for invalid or unsatisfiable task specifications."""


class Mode(str, Enum):
    FULL_CLASS = "full_class"
    SUB_CLASS = "sub_class"
    RANDOM_SUBSET = "random_subset"
    SEQUENTIAL = "sequential"


@dataclass(frozen=True)
class TaskSpec:
    """Declarative unlearning scenario.

    ``targets`` holds class ids (full_class), fine-class ids (sub_class),
    a single fraction in (0, 1] (random_subset), or the ordered per-request
    class ids (sequential).  Sequential specs set ``request_mode`` to the
    mode each individual request uses.
    """

    mode: Mode
    targets: tuple
    seed: int = 0
    superclass_map: dict[int, int] | None = None
    request_mode: Mode = Mode.FULL_CLASS

    def __post_init__(self):
        object.__setattr__(self, "mode", Mode(self.mode))
        object.__setattr__(self, "request_mode", Mode(self.request_mode))
        object.__setattr__(self, "targets", tuple(self.targets))
        if self.superclass_map is not None:
            object.__setattr__(
                self, "superclass_map", {int(k): int(v) for k, v in self.superclass_map.items()}
            )
        self.validate()

    def validate(self) -> None:
        if not self.targets:
            raise SpecError("targets must be non-empty")
        if self.mode is Mode.RANDOM_SUBSET:
            if len(self.targets) != 1:
                raise SpecError("random_subset takes exactly one fraction target")
            frac = self.targets[0]
            if not (isinstance(frac, (int, float)) and 0.0 < frac <= 1.0):
                raise SpecError(f"random_subset fraction must lie in (0, 1], got {frac!r}")
            return
        if any(not isinstance(t, (int, np.integer)) or isinstance(t, bool) for t in self.targets):
            raise SpecError(f"class targets must be integers, got {self.targets!r}")
        if len(set(self.targets)) != len(self.targets):
            raise SpecError(f"duplicate class targets in {self.targets!r}")
        if self.mode is Mode.SEQUENTIAL:
            if self.request_mode not in (Mode.FULL_CLASS, Mode.SUB_CLASS):
                raise SpecError("sequential requests must be full_class or sub_class")
            if len(self.targets) < 2:
                raise SpecError("sequential mode needs at least 2 requests")
        active = self.request_mode if self.mode is Mode.SEQUENTIAL else self.mode
        if active is Mode.SUB_CLASS and self.superclass_map is None:
            raise SpecError("sub_class mode requires a superclass_map")

    @property
    def granularity(self) -> str:
        mode = self.request_mode if self.mode is Mode.SEQUENTIAL else self.mode
        return "coarse" if mode is Mode.SUB_CLASS else "fine"

    def to_dict(self) -> dict:
        d = asdict(self)
        d["mode"] = self.mode.value
        d["request_mode"] = self.request_mode.value
        d["targets"] = list(self.targets)
        if self.superclass_map is not None:
            d["superclass_map"] = {str(k): v for k, v in sorted(self.superclass_map.items())}
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "TaskSpec":
        try:
            return cls(
                mode=d["mode"],
                targets=tuple(d["targets"]),
                seed=int(d.get("seed", 0)),
                superclass_map=d.get("superclass_map"),
                request_mode=d.get("request_mode", Mode.FULL_CLASS.value),
            )
        except (KeyError, TypeError) as exc:
            raise SpecError(f"malformed TaskSpec document: {exc}") from exc

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), sort_keys=True)

    @classmethod
    def from_json(cls, text: str) -> "TaskSpec":
        return cls.from_dict(json.loads(text))

    @property
    def num_requests(self) -> int:
        return len(self.targets) if self.mode is Mode.SEQUENTIAL else 1


@dataclass(frozen=True)
class SplitIndices:
    forget: np.ndarray
    remain: np.ndarray
    test: np.ndarray
    label_space: tuple[int, ...]
    granularity: str = "fine"
    mode: str = Mode.FULL_CLASS.value
    forget_classes: tuple[int, ...] = field(default=())

    def to_dict(self) -> dict:
        return {
            "forget": self.forget.tolist(),
            "remain": self.remain.tolist(),
            "test": self.test.tolist(),
            "label_space": list(self.label_space),
            "granularity": self.granularity,
            "mode": self.mode,
            "forget_classes": list(self.forget_classes),
        }

    @classmethod
    def from_dict(cls, d: dict) -> "SplitIndices":
        return cls(
            forget=np.asarray(d["forget"], dtype=np.int64),
            remain=np.asarray(d["remain"], dtype=np.int64),
            test=np.asarray(d["test"], dtype=np.int64),
            label_space=tuple(d["label_space"]),
            granularity=d["granularity"],
            mode=d["mode"],
            forget_classes=tuple(d["forget_classes"]),
        )

    def __eq__(self, other):
        if not isinstance(other, SplitIndices):
            return NotImplemented
        return self.to_dict() == other.to_dict()

    def digest(self) -> str:
        return hashlib.sha256(json.dumps(self.to_dict(), sort_keys=True).encode()).hexdigest()[:16]


def _check_classes(classes, known: set[int], what: str) -> None:
    unknown = sorted(set(classes) - known)
    if unknown:
        raise SpecError(f"unknown {what} id(s) {unknown}")


def build_split(spec: TaskSpec, dataset: LabeledDataset) -> SplitIndices:
    """Partition the training indices of ``dataset`` according to ``spec``.

    A sequential spec is split as the union of all its requests; use
    :func:`advance_sequence` to get the per-request spec.
    """
    train = np.sort(dataset.train_idx)
    test = np.sort(dataset.test_idx)
    fine = dataset.labels.numpy()
    known = set(np.unique(fine[train]).tolist())
    mode = spec.request_mode if spec.mode is Mode.SEQUENTIAL else spec.mode

    if spec.mode is Mode.RANDOM_SUBSET:
        n = math.ceil(spec.targets[0] * len(train))
        rng = np.random.default_rng(spec.seed)
        forget = np.sort(rng.choice(train, size=n, replace=False))
        forget_classes: tuple[int, ...] = ()
    else:
        _check_classes(spec.targets, known, "class")
        forget = train[np.isin(fine[train], spec.targets)]
        forget_classes = tuple(int(t) for t in spec.targets)

    if forget.size == 0:
        raise SpecError(f"spec {spec.to_json()} selects no training samples")
    remain = np.setdiff1d(train, forget, assume_unique=True)

    if mode is Mode.SUB_CLASS:
        cmap = spec.superclass_map
        _check_classes(known, set(cmap), "fine class (missing from superclass_map)")
        label_space = tuple(sorted({cmap[int(c)] for c in fine[remain]}))
        granularity = "coarse"
    else:
        label_space = tuple(sorted({int(c) for c in fine[remain]}))
        granularity = "fine"

    return SplitIndices(
        forget=forget.astype(np.int64),
        remain=remain.astype(np.int64),
        test=test.astype(np.int64),
        label_space=label_space,
        granularity=granularity,
        mode=spec.mode.value,
        forget_classes=forget_classes,
    )


class SequenceStep(NamedTuple):
    request: TaskSpec
    forgotten_before: frozenset[int]


def advance_sequence(spec: TaskSpec, step: int) -> SequenceStep:
    """Single-request spec for request ``step`` and the classes forgotten before it."""
    if spec.mode is not Mode.SEQUENTIAL:
        raise SpecError("advance_sequence needs a sequential spec")
    if not 0 <= step < len(spec.targets):
        raise SpecError(f"step {step} out of range for {len(spec.targets)} requests")
    request = TaskSpec(
        mode=spec.request_mode,
        targets=(spec.targets[step],),
        seed=spec.seed,
        superclass_map=spec.superclass_map,
    )
    return SequenceStep(request, frozenset(spec.targets[:step]))


def cumulative_spec(spec: TaskSpec, step: int) -> TaskSpec:
    """Spec forgetting every request up to and including ``step`` at once."""
    advance_sequence(spec, step)
    return TaskSpec(
        mode=spec.request_mode,
        targets=tuple(spec.targets[: step + 1]),
        seed=spec.seed,
        superclass_map=spec.superclass_map,
    )


def split_cache_key(spec: TaskSpec, dataset: LabeledDataset) -> str:
    payload = json.dumps({"spec": spec.to_dict(), "dataset": dataset.dataset_id}, sort_keys=True)
    return hashlib.sha256(payload.encode()).hexdigest()[:20]


def cached_split(spec: TaskSpec, dataset: LabeledDataset, cache_dir: str | Path) -> SplitIndices:
    """:func:`build_split` memoized as JSON under ``cache_dir``."""
    path = Path(cache_dir) / f"split_{split_cache_key(spec, dataset)}.json"
    if path.exists():
        return SplitIndices.from_dict(json.loads(path.read_text()))
    split = build_split(spec, dataset)
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_suffix(".tmp")
    tmp.write_text(json.dumps(split.to_dict()))
    tmp.replace(path)
    return split
