"""Experiment configuration documents for the command-line runner.

An experiment is one JSON file validated against the shipped schema
(``schema/experiment.schema.json``).  Component seeds are never written in
the file: they are derived from the top-level ``seed`` through named
sub-streams so that, say, the unlearning run can be re-seeded without
retraining.
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import asdict, dataclass, field, replace
from functools import lru_cache
from importlib import resources
from pathlib import Path

import jsonschema
import numpy as np

from .modelzoo import DESK_ARCH, DESK_RECIPE, TrainConfig
from .tasks import SpecError, TaskSpec
from .unlearn import UnlearnConfig

SCHEMA_VERSION = 1
SEED_STREAMS = ("task", "train", "unlearn", "mia")


class ConfigError(ValueError):
    """The experiment document is missing, malformed or inconsistent."""


def derive_seed(seed: int, stream: str) -> int:
    """Independent 31-bit seed for ``stream`` under a top-level ``seed``."""
    if stream not in SEED_STREAMS:
        raise ValueError(f"unknown seed stream {stream!r}")
    key = int.from_bytes(hashlib.sha256(stream.encode()).digest()[:4], "little")
    return int(np.random.SeedSequence(seed, spawn_key=(key,)).generate_state(1)[0] >> 1)


@lru_cache(maxsize=1)
def schema() -> dict:
    text = resources.files("mumis").joinpath("schema/experiment.schema.json").read_text()
    return json.loads(text)


@dataclass
class EvalOptions:
    mia: bool = True
    kl: bool = True
    mia_pool_size: int | None = None


@dataclass
class ExperimentConfig:
    task: TaskSpec
    dataset: str = "digits"
    split_seed: int = 0
    arch: str = DESK_ARCH[0]
    arch_kwargs: dict = field(default_factory=lambda: dict(DESK_ARCH[1]))
    train_recipe: TrainConfig = field(default_factory=lambda: replace(DESK_RECIPE))
    unlearn: UnlearnConfig = field(default_factory=UnlearnConfig)
    eval: EvalOptions = field(default_factory=EvalOptions)
    output_dir: str = "runs"
    seed: int = 0
    builtin_superclass_map: bool = False

    def seeds(self) -> dict[str, int]:
        return {name: derive_seed(self.seed, name) for name in SEED_STREAMS}

    def to_document(self) -> dict:
        """The JSON document this config round-trips through."""
        task = self.task.to_dict()
        task.pop("seed")
        if self.task.mode.value != "sequential":
            task.pop("request_mode")
        if task.get("superclass_map") is None:
            task.pop("superclass_map", None)
        elif self.builtin_superclass_map:
            task["superclass_map"] = "builtin"
        train = asdict(self.train_recipe)
        train.pop("seed")
        unlearn = self.unlearn.to_dict()
        unlearn.pop("seed")
        return {
            "schema_version": SCHEMA_VERSION,
            "seed": self.seed,
            "output_dir": self.output_dir,
            "dataset": {"name": self.dataset, "split_seed": self.split_seed},
            "model": {"arch": self.arch, "kwargs": dict(self.arch_kwargs)},
            "task": task,
            "train_recipe": train,
            "unlearn": unlearn,
            "eval": asdict(self.eval),
        }

    def config_hash(self) -> str:
        """Hash of everything that affects results (``output_dir`` excluded)."""
        doc = self.to_document()
        doc.pop("output_dir")
        return hashlib.sha256(json.dumps(doc, sort_keys=True).encode()).hexdigest()[:16]

    def with_task(self, task: TaskSpec) -> "ExperimentConfig":
        return replace(self, task=task)

    @classmethod
    def from_document(cls, doc: dict, base_dir: Path | None = None) -> "ExperimentConfig":
        try:
            jsonschema.validate(doc, schema())
        except jsonschema.ValidationError as exc:
            where = "/".join(str(p) for p in exc.absolute_path) or "<root>"
            raise ConfigError(f"config schema violation at {where}: {exc.message}") from None

        seed = doc.get("seed", 0)
        seeds = {name: derive_seed(seed, name) for name in SEED_STREAMS}
        ds = doc.get("dataset", {})
        model = doc.get("model", {})
        task_doc = dict(doc["task"])
        builtin = task_doc.get("superclass_map") == "builtin"
        if builtin:
            from .data import load_dataset

            cmap = load_dataset(ds.get("name", "digits"), ds.get("split_seed", 0)).coarse_map
            if cmap is None:
                raise ConfigError(f"dataset {ds.get('name', 'digits')!r} has no built-in superclass map")
            task_doc["superclass_map"] = cmap
        task_doc["seed"] = seeds["task"]
        try:
            task = TaskSpec.from_dict(task_doc)
            train = TrainConfig(**{**asdict(DESK_RECIPE), **doc.get("train_recipe", {}), "seed": seeds["train"]})
            unlearn = UnlearnConfig(**{**doc.get("unlearn", {}), "seed": seeds["unlearn"]})
        except (SpecError, ValueError, TypeError) as exc:
            raise ConfigError(str(exc)) from exc

        out = doc.get("output_dir", "runs")
        if base_dir is not None and not Path(out).is_absolute():
            out = str((base_dir / out).resolve())
        default_model = model.get("arch", DESK_ARCH[0]) == DESK_ARCH[0]
        return cls(
            task=task,
            dataset=ds.get("name", "digits"),
            split_seed=ds.get("split_seed", 0),
            arch=model.get("arch", DESK_ARCH[0]),
            arch_kwargs=model.get("kwargs", dict(DESK_ARCH[1]) if default_model else {}),
            train_recipe=train,
            unlearn=unlearn,
            eval=EvalOptions(**doc.get("eval", {})),
            output_dir=out,
            seed=seed,
            builtin_superclass_map=builtin,
        )

    @classmethod
    def load(cls, path: str | Path, **overrides) -> "ExperimentConfig":
        """Read ``path``; non-None ``overrides`` replace top-level keys first."""
        path = Path(path)
        doc = load_document(path)
        doc.update({k: v for k, v in overrides.items() if v is not None})
        return cls.from_document(doc, base_dir=path.parent)


def load_document(path: str | Path) -> dict:
    path = Path(path)
    if not path.is_file():
        raise ConfigError(f"config file not found: {path}")
    try:
        doc = json.loads(path.read_text())
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{path}: invalid JSON ({exc})") from None
    if not isinstance(doc, dict):
        raise ConfigError(f"{path}: top level must be a JSON object")
    return doc
