"""MU-Mis unlearning with threshold-ratio stopping, plus NG, RL and FT baselines.

Every method reads training data only through :class:`DataSource`, which
counts samples per split into a :class:`DataAccessAudit`.  Evaluation
probes passed to the drivers see the model only and are excluded from both
the audit and the run-time measurement.
"""

from __future__ import annotations

import csv
import json
import logging
import math
import time
from dataclasses import asdict, dataclass, field
from enum import Enum
from pathlib import Path
from typing import Callable, Iterator, NamedTuple

import numpy as np
import torch
from torch import nn
from torch.nn import functional as F

from .data import LabeledDataset
from .modelzoo import ModelCheckpoint
from .sensitivity import draw_irrelevant, mean_irrelevant_norm, mumis_objective

logger = logging.getLogger(__name__)

DIVERGENCE_FACTOR = 1e6


class Method(str, Enum):
    MUMIS = "mumis"
    NG = "ng"
    RL = "rl"
    FT = "ft"


REMAINING_DATA_FREE = {Method.MUMIS, Method.NG, Method.RL}


class StopReason(str, Enum):
    THRESHOLD_MET = "threshold_met"
    MAX_EPOCHS = "max_epochs"
    DIVERGED = "diverged"


class AuditViolation(RuntimeError):
    """A remaining-data-free method touched remaining or test data."""


@dataclass
class UnlearnConfig:
    method: Method = Method.MUMIS
    lr: float = 1e-3
    stop_ratio: float = 1.0
    kappa: float = 1.0
    batch_size: int = 256
    max_epochs: int = 50
    seed: int = 0
    variant: str = "full"
    per_step_stop: bool = False
    per_sample_tau: bool = False
    rl_redraw_per_epoch: bool = False

    def __post_init__(self):
        self.method = Method(self.method)
        if self.lr <= 0:
            raise ValueError(f"lr must be positive, got {self.lr}")
        if self.stop_ratio <= 0:
            raise ValueError(f"stop_ratio must be positive, got {self.stop_ratio}")
        if self.kappa < 1:
            raise ValueError(f"kappa must be >= 1, got {self.kappa}")
        if self.max_epochs < 1:
            raise ValueError(f"max_epochs must be >= 1, got {self.max_epochs}")
        if self.batch_size < 1:
            raise ValueError(f"batch_size must be >= 1, got {self.batch_size}")

    def to_dict(self) -> dict:
        d = asdict(self)
        d["method"] = self.method.value
        return d


@dataclass
class DataAccessAudit:
    forget: int = 0
    remain: int = 0
    test: int = 0

    def record(self, split: str, n: int) -> None:
        setattr(self, split, getattr(self, split) + int(n))

    def check(self, method: Method) -> None:
        if Method(method) in REMAINING_DATA_FREE and (self.remain or self.test):
            raise AuditViolation(
                f"{Method(method).value} consumed remain={self.remain} test={self.test} samples"
            )

    def to_dict(self) -> dict:
        return asdict(self)


class DataSource:
    """Audited access to one split (``forget``, ``remain`` or ``test``) of a dataset."""

    SPLITS = ("forget", "remain", "test")

    def __init__(self, dataset: LabeledDataset, indices, split: str, audit: DataAccessAudit, granularity: str = "fine"):
        if split not in self.SPLITS:
            raise ValueError(f"unknown split {split!r}")
        self.indices = np.asarray(indices, dtype=np.int64)
        self.split = split
        self.audit = audit
        self._x = dataset.images[torch.from_numpy(self.indices)]
        self._y = dataset.targets(granularity)[torch.from_numpy(self.indices)]

    def __len__(self) -> int:
        return len(self.indices)

    def all(self) -> tuple[torch.Tensor, torch.Tensor]:
        self.audit.record(self.split, len(self))
        return self._x, self._y

    def batches(self, batch_size: int, generator: torch.Generator | None = None) -> Iterator[tuple[torch.Tensor, torch.Tensor, torch.Tensor]]:
        """Shuffled (x, y, position) batches; positions index into this source."""
        order = torch.randperm(len(self), generator=generator)
        for s in range(0, len(order), batch_size):
            pos = order[s : s + batch_size]
            self.audit.record(self.split, len(pos))
            yield self._x[pos], self._y[pos], pos


@dataclass
class TraceRecord:
    step: int
    epoch: int
    loss: float
    tc_term: float
    oc_term: float
    irrelevant_norm: float
    epsilon: float
    fa: float | None = None
    ra: float | None = None
    ta: float | None = None
    elapsed: float = 0.0


@dataclass
class UnlearnTrace:
    method: str
    config: dict
    records: list[TraceRecord] = field(default_factory=list)
    stop_reason: StopReason = StopReason.MAX_EPOCHS
    initial_norm: float = float("nan")
    rte_seconds: float = 0.0

    @property
    def epsilons(self) -> list[float]:
        return [r.epsilon for r in self.records]

    def column(self, name: str) -> list:
        return [getattr(r, name) for r in self.records]

    def to_csv(self, path: str | Path) -> Path:
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        names = list(TraceRecord.__dataclass_fields__)
        with path.open("w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(names)
            for r in self.records:
                w.writerow(["" if getattr(r, n) is None else getattr(r, n) for n in names])
        return path

    @classmethod
    def from_csv(cls, path: str | Path, method: str = "", config: dict | None = None) -> "UnlearnTrace":
        """Records only; run-level fields keep their defaults."""
        names = TraceRecord.__dataclass_fields__
        records = []
        with Path(path).open(newline="") as fh:
            for row in csv.DictReader(fh):
                vals = {}
                for n, f in names.items():
                    raw = row.get(n, "")
                    vals[n] = None if raw == "" else (int(raw) if f.type in ("int", int) else float(raw))
                records.append(TraceRecord(**vals))
        return cls(method=method, config=config or {}, records=records)

    def summary(self) -> dict:
        last = self.records[-1] if self.records else None
        return {
            "method": self.method,
            "config": self.config,
            "stop_reason": StopReason(self.stop_reason).value,
            "steps": last.step if last else 0,
            "epochs": last.epoch if last else 0,
            "records": len(self.records),
            "initial_norm": self.initial_norm,
            "final_norm": last.irrelevant_norm if last else None,
            "rte_seconds": self.rte_seconds,
        }

    def write_summary(self, path: str | Path) -> Path:
        path = Path(path)
        path.write_text(json.dumps(self.summary(), indent=2, sort_keys=True, default=str) + "\n")
        return path


class UnlearnResult(NamedTuple):
    checkpoint: ModelCheckpoint
    trace: UnlearnTrace
    audit: DataAccessAudit


Probe = Callable[[nn.Module], dict]


class _Clock:
    """Accumulates wall time of algorithm work, pausing around probes."""

    def __init__(self):
        self.total = 0.0
        self._t = None

    def start(self):
        self._t = time.perf_counter()

    def stop(self):
        if self._t is not None:
            self.total += time.perf_counter() - self._t
            self._t = None


def _sgd_step(params: list[torch.Tensor], grads, lr: float) -> None:
    with torch.no_grad():
        for p, g in zip(params, grads):
            if g is not None:
                p.sub_(lr * g)


def _probe(probe: Probe | None, model: nn.Module) -> dict:
    if probe is None:
        return {}
    out = probe(model)
    model.eval()
    return {k: out.get(k) for k in ("fa", "ra", "ta")}


def _setup(ckpt: ModelCheckpoint, cfg: UnlearnConfig, expected: Method):
    if cfg.method is not expected:
        raise ValueError(f"config method {cfg.method.value!r} does not match driver {expected.value!r}")
    model = ckpt.to_model()
    model.eval()
    params = [p for p in model.parameters() if p.requires_grad]
    gen = torch.Generator().manual_seed(cfg.seed)
    return model, params, gen


def run_mumis(ckpt: ModelCheckpoint, forget: DataSource, cfg: UnlearnConfig, probe: Probe | None = None) -> UnlearnResult:
    """Minimize the input-sensitivity gap on the forgetting data.

    Plain gradient descent under frozen normalization.  After every epoch
    (or step, with ``per_step_stop``) the mean irrelevant-class norm M over
    the forgetting data is compared with its running minimum eps and its
    initial value M0; the run stops once M > eps and M / M0 > stop_ratio.
    """
    if len(forget) == 0:
        raise ValueError("forget source is empty")
    model, params, gen = _setup(ckpt, cfg, Method.MUMIS)
    C = ckpt.num_classes
    kappa = None if cfg.kappa == 1.0 else cfg.kappa
    trace = UnlearnTrace(Method.MUMIS.value, cfg.to_dict())
    clock = _Clock()

    clock.start()
    x_f, y_f = forget.all()
    m0 = mean_irrelevant_norm(model, x_f, y_f)
    clock.stop()
    trace.initial_norm = m0
    trace.records.append(TraceRecord(0, 0, float("nan"), float("nan"), float("nan"), m0, math.inf, **_probe(probe, model)))

    eps = math.inf
    step = 0
    initial_loss = None
    stop = None

    def check(epoch, last) -> StopReason | None:
        nonlocal eps
        clock.start()
        m = mean_irrelevant_norm(model, x_f, y_f)
        hit = m > eps and m / m0 > cfg.stop_ratio
        eps = min(eps, m)
        clock.stop()
        trace.records.append(
            TraceRecord(step, epoch, last.total, last.tc_term, last.oc_term, m, eps, elapsed=clock.total, **_probe(probe, model))
        )
        return StopReason.THRESHOLD_MET if hit else None

    for epoch in range(1, cfg.max_epochs + 1):
        last = None
        for xb, yb, _ in forget.batches(cfg.batch_size, gen):
            clock.start()
            irr = draw_irrelevant(yb, C, gen)
            total, value = mumis_objective(
                model, xb, yb, irr, kappa, variant=cfg.variant, per_sample_tau=cfg.per_sample_tau
            )
            if initial_loss is None:
                initial_loss = max(abs(value.total), 1e-12)
            if not math.isfinite(value.total) or abs(value.total) > DIVERGENCE_FACTOR * initial_loss:
                clock.stop()
                stop = StopReason.DIVERGED
                break
            grads = torch.autograd.grad(total, params, allow_unused=True)
            _sgd_step(params, grads, cfg.lr)
            step += 1
            last = value
            clock.stop()
            if cfg.per_step_stop:
                stop = check(epoch, last)
                if stop:
                    break
        if stop:
            break
        if not cfg.per_step_stop:
            stop = check(epoch, last)
            if stop:
                break
    trace.stop_reason = stop or StopReason.MAX_EPOCHS
    trace.rte_seconds = clock.total
    logger.info("mumis stopped after %d steps: %s", step, trace.stop_reason.value)
    return UnlearnResult(ckpt.with_model(model, unlearn=cfg.to_dict()), trace, forget.audit)


def _cross_entropy_driver(ckpt, source: DataSource, cfg: UnlearnConfig, method: Method, probe, sign: float, relabel=None) -> UnlearnResult:
    model, params, gen = _setup(ckpt, cfg, method)
    trace = UnlearnTrace(method.value, cfg.to_dict())
    trace.records.append(TraceRecord(0, 0, float("nan"), float("nan"), float("nan"), float("nan"), math.inf, **_probe(probe, model)))
    clock = _Clock()
    step = 0
    initial_loss = None
    stop = None
    for epoch in range(1, cfg.max_epochs + 1):
        if relabel is not None and cfg.rl_redraw_per_epoch and epoch > 1:
            relabel = relabel.redraw(gen)
        losses = []
        for xb, yb, pos in source.batches(cfg.batch_size, gen):
            clock.start()
            target = yb if relabel is None else relabel.labels[pos]
            loss = F.cross_entropy(model(xb), target)
            value = loss.item()
            if initial_loss is None:
                initial_loss = max(abs(value), 1e-12)
            if not math.isfinite(value) or abs(value) > DIVERGENCE_FACTOR * initial_loss:
                clock.stop()
                stop = StopReason.DIVERGED
                break
            grads = torch.autograd.grad(sign * loss, params, allow_unused=True)
            _sgd_step(params, grads, cfg.lr)
            step += 1
            losses.append(value)
            clock.stop()
        mean_loss = float(np.mean(losses)) if losses else float("nan")
        trace.records.append(
            TraceRecord(step, epoch, mean_loss, float("nan"), float("nan"), float("nan"), math.inf, elapsed=clock.total, **_probe(probe, model))
        )
        if stop:
            break
    trace.stop_reason = stop or StopReason.MAX_EPOCHS
    trace.rte_seconds = clock.total
    return UnlearnResult(ckpt.with_model(model, unlearn=cfg.to_dict()), trace, source.audit)


def run_ng(ckpt: ModelCheckpoint, forget: DataSource, cfg: UnlearnConfig, probe: Probe | None = None) -> UnlearnResult:
    """Gradient ascent on the cross-entropy of the forgetting data."""
    if len(forget) == 0:
        raise ValueError("forget source is empty")
    return _cross_entropy_driver(ckpt, forget, cfg, Method.NG, probe, sign=-1.0)


@dataclass
class RandomRelabel:
    true_labels: torch.Tensor
    labels: torch.Tensor
    num_classes: int

    @classmethod
    def draw(cls, true_labels, num_classes: int, gen: torch.Generator) -> "RandomRelabel":
        return cls(true_labels, draw_irrelevant(true_labels, num_classes, gen), num_classes)

    def redraw(self, gen: torch.Generator) -> "RandomRelabel":
        return RandomRelabel.draw(self.true_labels, self.num_classes, gen)


def run_rl(ckpt: ModelCheckpoint, forget: DataSource, cfg: UnlearnConfig, probe: Probe | None = None) -> UnlearnResult:
    """Fine-tune on the forgetting data relabeled with random wrong classes.

    Labels are drawn once per run unless ``cfg.rl_redraw_per_epoch``.
    """
    if len(forget) == 0:
        raise ValueError("forget source is empty")
    gen = torch.Generator().manual_seed(cfg.seed + 1)
    relabel = RandomRelabel.draw(forget._y, ckpt.num_classes, gen)
    return _cross_entropy_driver(ckpt, forget, cfg, Method.RL, probe, sign=1.0, relabel=relabel)


def run_ft(ckpt: ModelCheckpoint, remain: DataSource, cfg: UnlearnConfig, probe: Probe | None = None) -> UnlearnResult:
    """Fine-tune on the remaining data only."""
    if remain.split != "remain":
        raise ValueError("FT fine-tunes on the remain split")
    if len(remain) == 0:
        raise ValueError("remain source is empty")
    return _cross_entropy_driver(ckpt, remain, cfg, Method.FT, probe, sign=1.0)


DRIVERS = {Method.MUMIS: run_mumis, Method.NG: run_ng, Method.RL: run_rl, Method.FT: run_ft}


def run_unlearning(
    ckpt: ModelCheckpoint,
    dataset: LabeledDataset,
    forget_idx,
    remain_idx,
    cfg: UnlearnConfig,
    probe: Probe | None = None,
) -> UnlearnResult:
    """Dispatch on ``cfg.method``, wiring the right audited source."""
    audit = DataAccessAudit()
    if cfg.method is Method.FT:
        source = DataSource(dataset, remain_idx, "remain", audit, ckpt.granularity)
    else:
        source = DataSource(dataset, forget_idx, "forget", audit, ckpt.granularity)
    result = DRIVERS[cfg.method](ckpt, source, cfg, probe)
    result.audit.check(cfg.method)
    return result
