"""Utility, privacy, indistinguishability, efficiency and resilience metrics."""

from __future__ import annotations

import csv
import io
import json
import logging
import math
import warnings
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path
from typing import Sequence

import numpy as np
import torch
from sklearn.linear_model import LogisticRegression
from sklearn.pipeline import make_pipeline
from sklearn.preprocessing import StandardScaler
from torch.nn import functional as F

from .data import LabeledDataset
from .modelzoo import ModelCheckpoint, evaluate_accuracy, predict_logits
from .tasks import Mode, SplitIndices
from .unlearn import UnlearnTrace

logger = logging.getLogger(__name__)

PROB_CLAMP = 1e-12


class DegenerateAttackWarning(UserWarning):
    """The membership attack saw a single class of features or predictions."""


def avg_gap(unlearned: Sequence[float], retrain: Sequence[float]) -> float:
    """Mean absolute difference between two (FA, RA, TA) triples."""
    a = np.asarray(unlearned, dtype=float)
    b = np.asarray(retrain, dtype=float)
    if a.shape != (3,) or b.shape != (3,):
        raise ValueError(f"avg_gap needs two accuracy triples, got shapes {a.shape} and {b.shape}")
    return float(np.mean(np.abs(a - b)))


def utility_sets(dataset: LabeledDataset, split: SplitIndices, exclude_classes=()) -> dict[str, np.ndarray]:
    """Index sets for FA / RA / TA.

    Class-wise modes measure FA and RA on the held-out split; random-subset
    mode measures them on the train split.  ``exclude_classes`` drops
    previously forgotten classes from RA during sequential unlearning.
    """
    if split.mode == Mode.RANDOM_SUBSET.value:
        return {"fa": split.forget, "ra": split.remain, "ta": split.test}
    fine = dataset.labels.numpy()
    test = split.test
    forget_mask = np.isin(fine[test], split.forget_classes)
    remain_mask = ~forget_mask & ~np.isin(fine[test], list(exclude_classes))
    return {"fa": test[forget_mask], "ra": test[remain_mask], "ta": test}


def utility_accuracies(model, dataset: LabeledDataset, split: SplitIndices, exclude_classes=()) -> dict[str, float]:
    sets = utility_sets(dataset, split, exclude_classes)
    return {k: evaluate_accuracy(model, dataset, idx, split.granularity) for k, idx in sets.items()}


def membership_features(model, x: torch.Tensor, y: torch.Tensor) -> np.ndarray:
    """(N, 3) features: max softmax probability, prediction entropy, cross-entropy loss."""
    logits = predict_logits(model, x).double()
    logp = F.log_softmax(logits, 1)
    p = logp.exp()
    conf = p.max(1).values
    entropy = -(p * logp).sum(1)
    loss = F.nll_loss(logp, torch.as_tensor(y, dtype=torch.long), reduction="none")
    return torch.stack([conf, entropy, loss], 1).numpy()


def attack_success(attack, features: np.ndarray) -> float:
    """Percentage of samples the attack labels "member" (class 1)."""
    if len(features) == 0:
        raise ValueError("no samples to attack")
    return 100.0 * float(np.mean(attack.predict(features) == 1))


def fit_membership_attack(member: np.ndarray, nonmember: np.ndarray, seed: int = 0):
    X = np.concatenate([member, nonmember])
    y = np.concatenate([np.ones(len(member)), np.zeros(len(nonmember))])
    if np.allclose(X.std(0), 0):
        warnings.warn("membership features are constant across pools", DegenerateAttackWarning, stacklevel=2)
    attack = make_pipeline(StandardScaler(), LogisticRegression(random_state=seed, max_iter=1000))
    attack.fit(X, y)
    if len(np.unique(attack.predict(X))) < 2:
        warnings.warn("membership attack predicts a single class", DegenerateAttackWarning, stacklevel=2)
    return attack


def mia_score(
    model,
    dataset: LabeledDataset,
    forget_idx,
    member_idx,
    nonmember_idx,
    seed: int = 0,
    granularity: str = "fine",
    pool_size: int | None = None,
) -> float:
    """Fraction (in %) of forgetting samples a confidence-based attack calls members.

    The attack is a logistic regression trained on equally sized member
    (remaining-train) and non-member (test) pools.
    """
    member_idx = np.sort(np.asarray(member_idx, dtype=np.int64))
    nonmember_idx = np.sort(np.asarray(nonmember_idx, dtype=np.int64))
    forget_idx = np.asarray(forget_idx, dtype=np.int64)
    if member_idx.size == 0 or nonmember_idx.size == 0:
        raise ValueError("membership pools must be non-empty")
    if np.intersect1d(member_idx, nonmember_idx).size:
        raise ValueError("member and non-member pools overlap")
    n = min(member_idx.size, nonmember_idx.size)
    if pool_size is not None:
        n = min(n, pool_size)
    rng = np.random.default_rng(seed)
    member_idx = rng.choice(member_idx, size=n, replace=False)
    nonmember_idx = rng.choice(nonmember_idx, size=n, replace=False)

    y = dataset.targets(granularity)

    def feats(idx):
        t = torch.from_numpy(np.asarray(idx))
        return membership_features(model, dataset.images[t], y[t])

    attack = fit_membership_attack(feats(member_idx), feats(nonmember_idx), seed)
    return attack_success(attack, feats(forget_idx))


def categorical_kl(p: torch.Tensor, q: torch.Tensor) -> torch.Tensor:
    """Row-wise KL(p || q) with both sides clamped below at 1e-12."""
    p = p.double().clamp_min(PROB_CLAMP)
    q = q.double().clamp_min(PROB_CLAMP)
    return (p * (p.log() - q.log())).sum(-1)


def _output_dim(model) -> int | None:
    if isinstance(model, ModelCheckpoint):
        return model.num_classes
    return None


def kl_divergence(retrain, unlearned, x: torch.Tensor) -> float:
    """Mean KL from the retrained model's softmax to the unlearned model's."""
    if isinstance(retrain, ModelCheckpoint) and isinstance(unlearned, ModelCheckpoint):
        if retrain.label_space != unlearned.label_space:
            raise ValueError(f"label spaces differ: {retrain.label_space} vs {unlearned.label_space}")
    p = F.softmax(predict_logits(retrain, x).double(), 1)
    q = F.softmax(predict_logits(unlearned, x).double(), 1)
    if p.shape != q.shape:
        raise ValueError(f"output shapes differ: {tuple(p.shape)} vs {tuple(q.shape)}")
    return float(categorical_kl(p, q).mean())


def all_samples(dataset: LabeledDataset) -> torch.Tensor:
    idx = np.sort(np.concatenate([dataset.train_idx, dataset.test_idx]))
    return dataset.images[torch.from_numpy(idx)]


@dataclass(frozen=True)
class Resilience:
    fgta: float
    fgva: float
    resilience_avg_gap: float


def forgotten_accuracies(model, dataset: LabeledDataset, classes, granularity: str = "fine") -> tuple[float, float]:
    """(train, valid) accuracy restricted to ``classes``."""
    classes = sorted(classes)
    if not classes:
        raise ValueError("no previously forgotten classes")
    train = dataset.class_indices(classes, "train")
    valid = dataset.class_indices(classes, "test")
    return (
        evaluate_accuracy(model, dataset, train, granularity),
        evaluate_accuracy(model, dataset, valid, granularity),
    )


def resilience_metrics(model, dataset: LabeledDataset, forgotten, reference, granularity: str = "fine") -> Resilience:
    """FGTA / FGVA on the forgotten classes and their mean gap to ``reference``.

    ``reference`` is the matching retrain oracle (model or checkpoint) or its
    precomputed (fgta, fgva) pair.
    """
    fgta, fgva = forgotten_accuracies(model, dataset, forgotten, granularity)
    if isinstance(reference, (tuple, list)):
        r_ta, r_va = reference
    else:
        r_ta, r_va = forgotten_accuracies(reference, dataset, forgotten, granularity)
    return Resilience(fgta, fgva, 0.5 * (abs(fgta - r_ta) + abs(fgva - r_va)))


def rte(trace: UnlearnTrace) -> float:
    """Wall-clock seconds of the unlearning run, evaluation probes excluded."""
    return float(trace.rte_seconds)


@dataclass
class MetricsReport:
    fa: float
    ra: float
    ta: float
    avg_gap: float
    mia: float | None = None
    kl_div: float | None = None
    rte_seconds: float | None = None
    fgta: float | None = None
    fgva: float | None = None
    resilience_avg_gap: float | None = None
    reference_retrain_id: str = ""
    method: str = ""
    provenance: dict = field(default_factory=dict)

    def __post_init__(self):
        for name in ("fa", "ra", "ta", "mia", "fgta", "fgva"):
            v = getattr(self, name)
            if v is not None and not 0.0 <= v <= 100.0:
                raise ValueError(f"{name}={v} is not a percentage")

    def to_dict(self) -> dict:
        return asdict(self)

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True)

    @classmethod
    def from_dict(cls, d: dict) -> "MetricsReport":
        names = {f.name for f in fields(cls)}
        return cls(**{k: v for k, v in d.items() if k in names})

    def save(self, path: str | Path) -> Path:
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_text(self.to_json() + "\n")
        return path


def evaluate(
    unlearned,
    retrain: ModelCheckpoint,
    dataset: LabeledDataset,
    split: SplitIndices,
    *,
    trace: UnlearnTrace | None = None,
    forgotten_before=(),
    retrain_accs: dict | None = None,
    mia: bool = True,
    kl: bool = True,
    seed: int = 0,
    mia_pool_size: int | None = None,
    method: str = "",
) -> MetricsReport:
    """Full metric suite for one model against the retrain oracle of the same task."""
    accs = utility_accuracies(unlearned, dataset, split, forgotten_before)
    ref = retrain_accs or utility_accuracies(retrain, dataset, split, forgotten_before)
    gap = avg_gap([accs["fa"], accs["ra"], accs["ta"]], [ref["fa"], ref["ra"], ref["ta"]])
    report = MetricsReport(
        fa=accs["fa"],
        ra=accs["ra"],
        ta=accs["ta"],
        avg_gap=gap,
        reference_retrain_id=retrain.digest(),
        method=method,
    )
    if mia:
        remain = split.remain
        if forgotten_before:
            remain = remain[~np.isin(dataset.labels.numpy()[remain], list(forgotten_before))]
        report.mia = mia_score(
            unlearned, dataset, split.forget, remain, split.test, seed, split.granularity, mia_pool_size
        )
    if kl:
        report.kl_div = kl_divergence(retrain, unlearned, all_samples(dataset))
    if trace is not None:
        report.rte_seconds = rte(trace)
    if forgotten_before:
        res = resilience_metrics(unlearned, dataset, forgotten_before, retrain, split.granularity)
        report.fgta, report.fgva, report.resilience_avg_gap = res.fgta, res.fgva, res.resilience_avg_gap
    return report


TABLE_COLUMNS = [
    ("RA", "ra"),
    ("FA", "fa"),
    ("TA", "ta"),
    ("Avg. Gap", "avg_gap"),
    ("MIA", "mia"),
    ("RTE", "rte_seconds"),
    ("KL", "kl_div"),
    ("FGTA", "fgta"),
    ("FGVA", "fgva"),
    ("Res. Gap", "resilience_avg_gap"),
]


def _fmt(v, name) -> str:
    if v is None or (isinstance(v, float) and math.isnan(v)):
        return "-"
    if name == "kl_div":
        return f"{v:.4f}"
    return f"{v:.2f}"


def _columns(reports: dict[str, MetricsReport]):
    cols = TABLE_COLUMNS[:6]
    for title, name in TABLE_COLUMNS[6:]:
        if any(getattr(r, name) is not None for r in reports.values()):
            cols.append((title, name))
    return cols


def render_table(reports: dict[str, MetricsReport]) -> str:
    """Aligned text table, one row per method."""
    cols = _columns(reports)
    header = ["Method"] + [t for t, _ in cols]
    rows = [[name] + [_fmt(getattr(r, f), f) for _, f in cols] for name, r in reports.items()]
    widths = [max(len(row[i]) for row in [header, *rows]) for i in range(len(header))]
    lines = ["  ".join(h.rjust(w) if i else h.ljust(w) for i, (h, w) in enumerate(zip(header, widths)))]
    lines.append("-" * len(lines[0]))
    for row in rows:
        lines.append("  ".join(c.rjust(w) if i else c.ljust(w) for i, (c, w) in enumerate(zip(row, widths))))
    return "\n".join(lines)


def table_csv(reports: dict[str, MetricsReport]) -> str:
    cols = _columns(reports)
    buf = io.StringIO()
    w = csv.writer(buf)
    w.writerow(["method"] + [f for _, f in cols])
    for name, r in reports.items():
        w.writerow([name] + ["" if getattr(r, f) is None else getattr(r, f) for _, f in cols])
    return buf.getvalue()
